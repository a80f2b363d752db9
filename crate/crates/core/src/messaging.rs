//! Broadcast frames: plaintext core-level emergency messages multiplexed
//! with AEAD-protected enhancement-level driving data.
//!
//! Enhancement frames are sealed with AES-256-GCM under the cluster group
//! key. The sender's disclosed chain value rides along as associated data
//! together with the cluster id and timestamp, so tampering with any of
//! them breaks authentication. Core frames stay plaintext: emergency data
//! must reach every vehicle, cluster member or not.

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes256Gcm, Key, KeyInit, Nonce, Tag};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{contains, is_active, secs_to_ms, ClusterId, SecureCluster};
use crate::hashchain::Digest;

/// AEAD algorithm tag carried by enhancement frames.
pub const AEAD_ALG: &str = "aes-256-gcm";

/// Enhancement frames older than this (relative to the receiver's clock)
/// are ignored as replays.
pub const DEFAULT_REPLAY_WINDOW_S: f64 = 5.0;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum MessagingError {
    #[error("sender chain value is not in the cluster member list")]
    NotAMember,
    #[error("cluster is outside its lifetime window")]
    Expired,
    #[error("a multiplexed signal carries at most one core frame")]
    MultipleCoreFrames,
    #[error("frame level does not match its multiplex slot")]
    LevelMismatch,
    #[error("AEAD rejected the message")]
    Crypto,
}

/// The two multiplexed broadcast layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameLevel {
    #[serde(rename = "core")]
    Core,
    #[serde(rename = "enh")]
    Enhancement,
}

/// Level-specific frame contents.
#[derive(Debug, Clone, PartialEq)]
pub enum FramePayload {
    /// Plaintext emergency message.
    Core { plaintext: Vec<u8> },
    /// Sealed driving data addressed to one cluster.
    Enhancement {
        cluster_id: ClusterId,
        nonce: [u8; NONCE_LEN],
        ciphertext: Vec<u8>,
        tag: [u8; TAG_LEN],
    },
}

/// One broadcast frame, tagged with the sender's disclosed chain value.
#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastFrame {
    pub sender_value: Digest,
    pub timestamp: f64,
    pub payload: FramePayload,
}

impl BroadcastFrame {
    pub fn level(&self) -> FrameLevel {
        match self.payload {
            FramePayload::Core { .. } => FrameLevel::Core,
            FramePayload::Enhancement { .. } => FrameLevel::Enhancement,
        }
    }
}

/// Flat wire rendering shared by traces and the service socket. Fields are
/// always present; the ones that do not apply to the level are null.
#[derive(Serialize, Deserialize)]
struct WireFrame {
    level: FrameLevel,
    sender_value: Digest,
    ts_ms: u64,
    cluster_id: Option<ClusterId>,
    nonce: Option<String>,
    ct: Option<String>,
    tag: Option<String>,
    pt: Option<String>,
    alg: Option<String>,
}

impl Serialize for BroadcastFrame {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let wire = match &self.payload {
            FramePayload::Core { plaintext } => WireFrame {
                level: FrameLevel::Core,
                sender_value: self.sender_value,
                ts_ms: secs_to_ms(self.timestamp),
                cluster_id: None,
                nonce: None,
                ct: None,
                tag: None,
                pt: Some(BASE64.encode(plaintext)),
                alg: None,
            },
            FramePayload::Enhancement { cluster_id, nonce, ciphertext, tag } => WireFrame {
                level: FrameLevel::Enhancement,
                sender_value: self.sender_value,
                ts_ms: secs_to_ms(self.timestamp),
                cluster_id: Some(*cluster_id),
                nonce: Some(hex::encode(nonce)),
                ct: Some(BASE64.encode(ciphertext)),
                tag: Some(hex::encode(tag)),
                pt: None,
                alg: Some(AEAD_ALG.to_string()),
            },
        };
        wire.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for BroadcastFrame {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let w = WireFrame::deserialize(de)?;
        let payload = match w.level {
            FrameLevel::Core => {
                let pt = w.pt.ok_or_else(|| D::Error::custom("core frame requires pt"))?;
                if w.cluster_id.is_some() || w.nonce.is_some() || w.ct.is_some() || w.tag.is_some() {
                    return Err(D::Error::custom("core frame carries no cryptographic fields"));
                }
                FramePayload::Core {
                    plaintext: BASE64.decode(pt).map_err(D::Error::custom)?,
                }
            }
            FrameLevel::Enhancement => {
                let alg = w.alg.ok_or_else(|| D::Error::custom("enhancement frame requires alg"))?;
                if alg != AEAD_ALG {
                    return Err(D::Error::custom(format!("unsupported AEAD alg {alg:?}")));
                }
                let nonce_hex = w.nonce.ok_or_else(|| D::Error::custom("missing nonce"))?;
                let tag_hex = w.tag.ok_or_else(|| D::Error::custom("missing tag"))?;
                let ct = w.ct.ok_or_else(|| D::Error::custom("missing ct"))?;
                let mut nonce = [0u8; NONCE_LEN];
                hex::decode_to_slice(&nonce_hex, &mut nonce).map_err(D::Error::custom)?;
                let mut tag = [0u8; TAG_LEN];
                hex::decode_to_slice(&tag_hex, &mut tag).map_err(D::Error::custom)?;
                FramePayload::Enhancement {
                    cluster_id: w.cluster_id.ok_or_else(|| D::Error::custom("missing cluster_id"))?,
                    nonce,
                    ciphertext: BASE64.decode(ct).map_err(D::Error::custom)?,
                    tag,
                }
            }
        };
        Ok(BroadcastFrame {
            sender_value: w.sender_value,
            timestamp: w.ts_ms as f64 / 1000.0,
            payload,
        })
    }
}

/// Frames sharing one emission instant: at most one core frame, any number
/// of enhancement frames.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MuxedSignal {
    frames: Vec<BroadcastFrame>,
}

impl MuxedSignal {
    pub fn frames(&self) -> &[BroadcastFrame] {
        &self.frames
    }
}

/// Combine one optional core frame with enhancement frames, core first.
pub fn mux(core: Option<BroadcastFrame>, enhancements: Vec<BroadcastFrame>) -> Result<MuxedSignal, MessagingError> {
    if let Some(c) = &core {
        if c.level() != FrameLevel::Core {
            return Err(MessagingError::LevelMismatch);
        }
    }
    if enhancements.iter().any(|f| f.level() == FrameLevel::Core) {
        return Err(MessagingError::MultipleCoreFrames);
    }
    let mut frames = Vec::with_capacity(enhancements.len() + 1);
    frames.extend(core);
    frames.extend(enhancements);
    Ok(MuxedSignal { frames })
}

/// Split a signal back into its core and enhancement parts.
pub fn demux(signal: MuxedSignal) -> (Option<BroadcastFrame>, Vec<BroadcastFrame>) {
    let mut core = None;
    let mut enhancements = Vec::new();
    for f in signal.frames {
        match f.level() {
            FrameLevel::Core => core = Some(f),
            FrameLevel::Enhancement => enhancements.push(f),
        }
    }
    (core, enhancements)
}

/// Build a plaintext core-level frame.
pub fn core_frame(sender_value: Digest, plaintext: impl Into<Vec<u8>>, timestamp: f64) -> BroadcastFrame {
    BroadcastFrame {
        sender_value,
        timestamp,
        payload: FramePayload::Core { plaintext: plaintext.into() },
    }
}

pub(crate) fn aad_bytes(cluster_id: &ClusterId, sender_value: &Digest, ts_ms: u64) -> [u8; 56] {
    let mut aad = [0u8; 56];
    aad[..16].copy_from_slice(cluster_id.as_bytes());
    aad[16..48].copy_from_slice(sender_value.as_bytes());
    aad[48..].copy_from_slice(&ts_ms.to_be_bytes());
    aad
}

pub(crate) fn gcm_seal(
    key: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
    aad: &[u8],
    plaintext: &[u8],
) -> Result<(Vec<u8>, [u8; TAG_LEN]), MessagingError> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(nonce), aad, &mut buf)
        .map_err(|_| MessagingError::Crypto)?;
    Ok((buf, tag.into()))
}

pub(crate) fn gcm_open(
    key: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
    aad: &[u8],
    ciphertext: &[u8],
    tag: &[u8; TAG_LEN],
) -> Option<Vec<u8>> {
    let cipher = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    let mut buf = ciphertext.to_vec();
    cipher
        .decrypt_in_place_detached(Nonce::from_slice(nonce), aad, &mut buf, Tag::from_slice(tag))
        .ok()
        .map(|()| buf)
}

/// Seal driving data into an enhancement frame under the cluster key.
///
/// The nonce is the sender's 4-byte index in the id-sorted member list
/// followed by the caller's 8-byte counter; the caller owns the counter
/// and must never reuse a value within the cluster lifetime.
pub fn encrypt_broadcast(
    cluster: &SecureCluster,
    sender_value: &Digest,
    plaintext: &[u8],
    now: f64,
    nonce_counter: u64,
) -> Result<BroadcastFrame, MessagingError> {
    let Some(index) = cluster.member_index(sender_value) else {
        return Err(MessagingError::NotAMember);
    };
    if !is_active(cluster, now) {
        return Err(MessagingError::Expired);
    }

    let mut nonce = [0u8; NONCE_LEN];
    nonce[..4].copy_from_slice(&index.to_be_bytes());
    nonce[4..].copy_from_slice(&nonce_counter.to_be_bytes());

    let ts_ms = secs_to_ms(now);
    let aad = aad_bytes(cluster.cluster_id(), sender_value, ts_ms);
    let (ciphertext, tag) = gcm_seal(cluster.group_key().as_bytes(), &nonce, &aad, plaintext)?;
    Ok(BroadcastFrame {
        sender_value: *sender_value,
        timestamp: now,
        payload: FramePayload::Enhancement {
            cluster_id: *cluster.cluster_id(),
            nonce,
            ciphertext,
            tag,
        },
    })
}

/// Outcome of processing one received frame. Hostile input maps to a
/// variant, never a panic or error.
#[derive(Debug, Clone, PartialEq)]
pub enum ReceiveOutcome {
    Accepted(Vec<u8>),
    Ignored,
    Expired,
    AuthFailure,
}

/// Process a received frame against the receiver's stored cluster state.
///
/// Core frames are accepted unconditionally. Enhancement frames are
/// ignored unless the sender's chain value is in the stored member list,
/// reported expired outside the cluster lifetime, ignored when older than
/// the replay window, and otherwise authenticated and decrypted.
pub fn receive_broadcast(frame: &BroadcastFrame, cluster: &SecureCluster, now: f64) -> ReceiveOutcome {
    receive_broadcast_with_window(frame, cluster, now, DEFAULT_REPLAY_WINDOW_S)
}

pub fn receive_broadcast_with_window(
    frame: &BroadcastFrame,
    cluster: &SecureCluster,
    now: f64,
    replay_window_s: f64,
) -> ReceiveOutcome {
    match &frame.payload {
        FramePayload::Core { plaintext } => ReceiveOutcome::Accepted(plaintext.clone()),
        FramePayload::Enhancement { cluster_id, nonce, ciphertext, tag } => {
            if cluster_id != cluster.cluster_id() {
                return ReceiveOutcome::Ignored;
            }
            if !contains(cluster, &frame.sender_value) {
                return ReceiveOutcome::Ignored;
            }
            if now >= cluster.expires_at() {
                return ReceiveOutcome::Expired;
            }
            if frame.timestamp < now - replay_window_s {
                return ReceiveOutcome::Ignored;
            }
            let aad = aad_bytes(cluster_id, &frame.sender_value, secs_to_ms(frame.timestamp));
            match gcm_open(cluster.group_key().as_bytes(), nonce, &aad, ciphertext, tag) {
                Some(plaintext) => ReceiveOutcome::Accepted(plaintext),
                None => ReceiveOutcome::AuthFailure,
            }
        }
    }
}
