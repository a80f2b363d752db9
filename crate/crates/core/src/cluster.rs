//! Secure-cluster formation, group-key derivation, and lifetime rules.
//!
//! A vehicle announces itself when its secrecy capacity meets the reference
//! threshold. The forming vehicle admits every announcer that passes both
//! the threshold test and disclosure verification, then every member
//! derives the same group key locally from the shared disclosure values.
//! The key itself never goes on the air.

use std::collections::BTreeMap;
use std::fmt;

use hkdf::Hkdf;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::hashchain::{ChainDisclosure, Digest};
use crate::ids::VehicleId;

/// Domain label for the expand step of the key derivation.
const GROUP_KEY_INFO: &[u8] = b"group key";

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("initiator secrecy capacity {vsc} below threshold {threshold}")]
    InitiatorBelowThreshold { vsc: f64, threshold: f64 },
    #[error("initiator disclosure failed verification")]
    InitiatorRejected,
    #[error("no admissible members besides the initiator")]
    Degenerate,
    #[error("cannot derive a key for an empty member set")]
    EmptyMembers,
    #[error("cluster expired")]
    Expired,
    #[error("ttl_seconds must be positive, got {0}")]
    InvalidTtl(f64),
}

/// Convert simulation-clock seconds to the wire's integer milliseconds.
pub fn secs_to_ms(seconds: f64) -> u64 {
    (seconds * 1000.0).round() as u64
}

/// 16-byte cluster identifier, drawn fresh from the seeded RNG at formation.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClusterId([u8; 16]);

impl ClusterId {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        ClusterId(bytes)
    }

    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill_bytes(&mut bytes);
        ClusterId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(hex_str: &str) -> Result<Self, hex::FromHexError> {
        let mut bytes = [0u8; 16];
        hex::decode_to_slice(hex_str, &mut bytes)?;
        Ok(ClusterId(bytes))
    }
}

impl fmt::Debug for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClusterId({})", self.to_hex())
    }
}

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ClusterId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ClusterId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let text = String::deserialize(de)?;
        ClusterId::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

/// 256-bit group secret. Never serialized; members re-derive it locally.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct GroupKey([u8; 32]);

impl GroupKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GroupKey(..)")
    }
}

/// Broadcast a vehicle sends when its secrecy capacity clears the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Announcement {
    pub sender: VehicleId,
    pub disclosure: ChainDisclosure,
    pub vsc_value: f64,
    pub timestamp: f64,
}

/// A formed cluster: admitted disclosures, the derived group key, and the
/// lifetime window. Immutable after formation; renewal forms a new cluster.
#[derive(Debug, Clone)]
pub struct SecureCluster {
    cluster_id: ClusterId,
    threshold: f64,
    members: BTreeMap<VehicleId, ChainDisclosure>,
    group_key: GroupKey,
    created_at: f64,
    expires_at: f64,
}

impl SecureCluster {
    pub fn cluster_id(&self) -> &ClusterId {
        &self.cluster_id
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn members(&self) -> &BTreeMap<VehicleId, ChainDisclosure> {
        &self.members
    }

    pub fn group_key(&self) -> &GroupKey {
        &self.group_key
    }

    pub fn created_at(&self) -> f64 {
        self.created_at
    }

    pub fn expires_at(&self) -> f64 {
        self.expires_at
    }

    pub fn expires_at_ms(&self) -> u64 {
        secs_to_ms(self.expires_at)
    }

    /// Index of the member holding `value` in the id-sorted member order.
    pub fn member_index(&self, value: &Digest) -> Option<u32> {
        self.members
            .values()
            .position(|d| &d.value == value)
            .map(|i| i as u32)
    }
}

/// Emit an announcement iff the secrecy capacity meets the threshold
/// (inclusive comparison).
pub fn make_announcement(
    sender: &VehicleId,
    disclosure: ChainDisclosure,
    vsc_value: f64,
    threshold: f64,
    timestamp: f64,
) -> Option<Announcement> {
    if vsc_value >= threshold {
        Some(Announcement { sender: sender.clone(), disclosure, vsc_value, timestamp })
    } else {
        None
    }
}

/// Form a cluster from the initiator's own announcement plus whatever
/// qualifying announcements it heard.
///
/// Admission requires both `vsc_value >= threshold` and acceptance by the
/// caller-supplied `verifier` (registry-backed at the MEC, link-based in a
/// peer). Duplicate announcements from one sender collapse to the latest
/// timestamp, first-processed winning ties. A cluster of one is refused.
pub fn form_cluster(
    initiator: &Announcement,
    announcements: &[Announcement],
    verifier: &mut dyn FnMut(&VehicleId, &ChainDisclosure) -> bool,
    now: f64,
    ttl_seconds: f64,
    threshold: f64,
    rng: &mut impl RngCore,
) -> Result<SecureCluster, ClusterError> {
    if !(ttl_seconds > 0.0) {
        return Err(ClusterError::InvalidTtl(ttl_seconds));
    }
    if !(initiator.vsc_value >= threshold) {
        return Err(ClusterError::InitiatorBelowThreshold {
            vsc: initiator.vsc_value,
            threshold,
        });
    }
    if !verifier(&initiator.sender, &initiator.disclosure) {
        return Err(ClusterError::InitiatorRejected);
    }

    let mut latest: BTreeMap<&VehicleId, &Announcement> = BTreeMap::new();
    for a in announcements {
        if a.sender == initiator.sender {
            continue;
        }
        match latest.get(&a.sender) {
            Some(prev) if a.timestamp <= prev.timestamp => {}
            _ => {
                latest.insert(&a.sender, a);
            }
        }
    }

    let mut members = BTreeMap::new();
    members.insert(initiator.sender.clone(), initiator.disclosure);
    for a in latest.values() {
        if a.vsc_value >= threshold && verifier(&a.sender, &a.disclosure) {
            members.insert(a.sender.clone(), a.disclosure);
        }
    }
    if members.len() < 2 {
        return Err(ClusterError::Degenerate);
    }

    let cluster_id = ClusterId::random(rng);
    let expires_at = now + ttl_seconds;
    let group_key = derive_group_key(members.values(), &cluster_id, secs_to_ms(expires_at))?;
    Ok(SecureCluster {
        cluster_id,
        threshold,
        members,
        group_key,
        created_at: now,
        expires_at,
    })
}

/// Derive the 32-byte group key from the shared disclosure values.
///
/// Input keying material is the disclosure values sorted ascending by their
/// hex rendering, then the cluster id, then the expiry as an 8-byte
/// big-endian millisecond count; the key is HKDF-SHA256 extract-then-expand
/// over that. Every member computes the same bytes from the distributed
/// member list.
pub fn derive_group_key<'a>(
    disclosures: impl IntoIterator<Item = &'a ChainDisclosure>,
    cluster_id: &ClusterId,
    expires_at_ms: u64,
) -> Result<GroupKey, ClusterError> {
    let mut values: Vec<&Digest> = disclosures.into_iter().map(|d| &d.value).collect();
    if values.is_empty() {
        return Err(ClusterError::EmptyMembers);
    }
    values.sort(); // byte order == lowercase hex order

    let mut ikm = Vec::with_capacity(values.len() * 32 + 24);
    for v in values {
        ikm.extend_from_slice(v.as_bytes());
    }
    ikm.extend_from_slice(cluster_id.as_bytes());
    ikm.extend_from_slice(&expires_at_ms.to_be_bytes());

    let hk = Hkdf::<Sha256>::new(None, &ikm);
    let mut key = [0u8; 32];
    hk.expand(GROUP_KEY_INFO, &mut key).expect("32 bytes is a valid HKDF output length");
    Ok(GroupKey(key))
}

/// One member's record inside distributed key material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub id: VehicleId,
    pub value: Digest,
    pub m: u64,
}

/// The shared payload every member receives after formation. Carries the
/// inputs to re-derive the group key, never the key itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyMaterial {
    pub cluster_id: ClusterId,
    pub threshold: f64,
    pub expires_at_ms: u64,
    pub members: Vec<MemberRecord>,
}

impl KeyMaterial {
    pub fn derive_key(&self) -> Result<GroupKey, ClusterError> {
        let disclosures: Vec<ChainDisclosure> = self
            .members
            .iter()
            .map(|m| ChainDisclosure { value: m.value, m: m.m })
            .collect();
        derive_group_key(disclosures.iter(), &self.cluster_id, self.expires_at_ms)
    }

    /// Reconstruct a usable cluster handle on the receiving side.
    ///
    /// `received_at` stands in for the creation instant; the expiry bound
    /// comes from the material itself, so every member enforces the same
    /// millisecond deadline that is bound into the key.
    pub fn to_cluster(&self, received_at: f64) -> Result<SecureCluster, ClusterError> {
        let group_key = self.derive_key()?;
        let members = self
            .members
            .iter()
            .map(|m| (m.id.clone(), ChainDisclosure { value: m.value, m: m.m }))
            .collect();
        Ok(SecureCluster {
            cluster_id: self.cluster_id,
            threshold: self.threshold,
            members,
            group_key,
            created_at: received_at,
            expires_at: self.expires_at_ms as f64 / 1000.0,
        })
    }
}

/// Key material addressed to one member.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMaterialMessage {
    pub to: VehicleId,
    pub material: KeyMaterial,
}

/// The shared key material for a cluster, members in id order.
pub fn key_material(cluster: &SecureCluster) -> KeyMaterial {
    KeyMaterial {
        cluster_id: cluster.cluster_id,
        threshold: cluster.threshold,
        expires_at_ms: cluster.expires_at_ms(),
        members: cluster
            .members
            .iter()
            .map(|(id, d)| MemberRecord { id: id.clone(), value: d.value, m: d.m })
            .collect(),
    }
}

/// Build the key material once and address a copy to every member.
pub fn distribute(cluster: &SecureCluster, now: f64) -> Result<Vec<KeyMaterialMessage>, ClusterError> {
    if now >= cluster.expires_at {
        return Err(ClusterError::Expired);
    }
    let material = key_material(cluster);
    Ok(cluster
        .members
        .keys()
        .map(|id| KeyMaterialMessage { to: id.clone(), material: material.clone() })
        .collect())
}

/// Lifetime test over the half-open interval `[created_at, expires_at)`.
pub fn is_active(cluster: &SecureCluster, now: f64) -> bool {
    cluster.created_at <= now && now < cluster.expires_at
}

/// Does any member's disclosed value equal `chain_value`?
pub fn contains(cluster: &SecureCluster, chain_value: &Digest) -> bool {
    cluster.members.values().any(|d| &d.value == chain_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashchain::{generate_chain, verify_disclosure, Vin};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    const VINS: [&str; 5] = [
        "1HGCM82633A004352",
        "1HGCM82633A004353",
        "JH4KA7561PC008269",
        "5YJSA1DG9DFP14705",
        "WDBRF40J43F472028",
    ];

    fn ann(i: usize, vsc: f64, t: f64) -> Announcement {
        let vin = Vin::parse(VINS[i]).unwrap();
        let chain = generate_chain(&vin, 20).unwrap();
        Announcement {
            sender: VehicleId::new(format!("v{i:02}")),
            disclosure: chain.disclose(10).unwrap(),
            vsc_value: vsc,
            timestamp: t,
        }
    }

    fn registry_verifier() -> impl FnMut(&VehicleId, &ChainDisclosure) -> bool {
        |id: &VehicleId, d: &ChainDisclosure| {
            let idx: usize = id.as_str()[1..].parse().unwrap();
            verify_disclosure(d, &Vin::parse(VINS[idx]).unwrap())
        }
    }

    fn rng() -> Xoshiro256StarStar {
        Xoshiro256StarStar::seed_from_u64(0xC1)
    }

    #[test]
    fn announcement_threshold_is_inclusive() {
        let a = ann(0, 0.0, 1.0);
        let id = a.sender.clone();
        assert!(make_announcement(&id, a.disclosure, 1.2, 1.0, 1.0).is_some());
        assert!(make_announcement(&id, a.disclosure, 1.0, 1.0, 1.0).is_some());
        assert!(make_announcement(&id, a.disclosure, 0.99, 1.0, 1.0).is_none());
    }

    #[test]
    fn forms_cluster_with_qualifying_announcers() {
        let initiator = ann(0, 2.0, 1.0);
        let others = [ann(1, 1.5, 1.0), ann(2, 1.0, 1.0), ann(3, 3.0, 1.0)];
        let mut verifier = registry_verifier();
        let c = form_cluster(&initiator, &others, &mut verifier, 1.0, 10.0, 1.0, &mut rng()).unwrap();
        assert_eq!(c.members().len(), 4);
        assert!(is_active(&c, 1.0));
        assert_eq!(c.expires_at(), 11.0);
        for a in others.iter().chain([&initiator]) {
            assert!(contains(&c, &a.disclosure.value));
        }
    }

    #[test]
    fn tampered_disclosure_is_excluded_others_admitted() {
        let initiator = ann(0, 2.0, 1.0);
        let mut bad = ann(1, 1.5, 1.0);
        let mut bytes = *bad.disclosure.value.as_bytes();
        bytes[5] ^= 0xff;
        bad.disclosure.value = Digest::from_bytes(bytes);
        let good = ann(2, 1.5, 1.0);
        let mut verifier = registry_verifier();
        let c = form_cluster(&initiator, &[bad.clone(), good.clone()], &mut verifier, 1.0, 10.0, 1.0, &mut rng())
            .unwrap();
        assert_eq!(c.members().len(), 2);
        assert!(!contains(&c, &bad.disclosure.value));
        assert!(contains(&c, &good.disclosure.value));
    }

    #[test]
    fn all_below_threshold_is_degenerate() {
        let initiator = ann(0, 2.0, 1.0);
        let others = [ann(1, 0.4, 1.0), ann(2, 0.2, 1.0)];
        let mut verifier = registry_verifier();
        let err = form_cluster(&initiator, &others, &mut verifier, 1.0, 10.0, 1.0, &mut rng()).unwrap_err();
        assert_eq!(err, ClusterError::Degenerate);
    }

    #[test]
    fn initiator_must_qualify() {
        let initiator = ann(0, 0.5, 1.0);
        let others = [ann(1, 2.0, 1.0)];
        let mut verifier = registry_verifier();
        let err = form_cluster(&initiator, &others, &mut verifier, 1.0, 10.0, 1.0, &mut rng()).unwrap_err();
        assert!(matches!(err, ClusterError::InitiatorBelowThreshold { .. }));

        let mut reject_all = |_: &VehicleId, _: &ChainDisclosure| false;
        let initiator = ann(0, 2.0, 1.0);
        let err = form_cluster(&initiator, &others, &mut reject_all, 1.0, 10.0, 1.0, &mut rng()).unwrap_err();
        assert_eq!(err, ClusterError::InitiatorRejected);
    }

    #[test]
    fn duplicate_sender_latest_timestamp_wins() {
        let initiator = ann(0, 2.0, 5.0);
        let stale = ann(1, 0.1, 4.0); // would fail threshold
        let fresh = ann(1, 2.0, 4.5);
        let mut verifier = registry_verifier();
        let c = form_cluster(&initiator, &[stale, fresh], &mut verifier, 5.0, 10.0, 1.0, &mut rng()).unwrap();
        assert_eq!(c.members().len(), 2);

        // equal timestamps: first processed wins
        let first = ann(1, 2.0, 4.5);
        let second = ann(1, 0.1, 4.5);
        let c = form_cluster(&initiator, &[first, second], &mut verifier, 5.0, 10.0, 1.0, &mut rng()).unwrap();
        assert_eq!(c.members().len(), 2);
    }

    #[test]
    fn group_key_matches_independent_hkdf_oracle() {
        // Frozen with Python hmac/hashlib: HKDF-SHA256(salt=0^32,
        // ikm = sorted values || cluster_id || expiry_ms BE, info="group key").
        let va = Vin::parse(VINS[0]).unwrap();
        let vb = Vin::parse(VINS[1]).unwrap();
        let ca = generate_chain(&va, 5).unwrap();
        let cb = generate_chain(&vb, 5).unwrap();
        let disclosures = [
            ca.disclose(3).unwrap(),
            cb.disclose(2).unwrap(),
            ca.disclose(1).unwrap(),
        ];
        let cluster_id = ClusterId::from_bytes([
            0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15,
        ]);
        let key = derive_group_key(disclosures.iter(), &cluster_id, 1_723_456_789_012).unwrap();
        assert_eq!(
            hex::encode(key.as_bytes()),
            "4d2251e8d4e5ec8669737da4d6991ac721e08f1e0d4997aab8eb680cfaaffc4f"
        );
    }

    #[test]
    fn key_is_order_invariant_and_input_sensitive() {
        let a = ann(0, 2.0, 1.0);
        let b = ann(1, 2.0, 1.0);
        let c = ann(2, 2.0, 1.0);
        let id = ClusterId::from_bytes([7; 16]);
        let fwd = [a.disclosure, b.disclosure, c.disclosure];
        let rev = [c.disclosure, b.disclosure, a.disclosure];
        let k1 = derive_group_key(fwd.iter(), &id, 1000).unwrap();
        let k2 = derive_group_key(rev.iter(), &id, 1000).unwrap();
        assert_eq!(k1, k2);

        // change one member value
        let mut mutated = fwd;
        let mut bytes = *mutated[1].value.as_bytes();
        bytes[0] ^= 1;
        mutated[1].value = Digest::from_bytes(bytes);
        assert_ne!(derive_group_key(mutated.iter(), &id, 1000).unwrap(), k1);

        // change cluster id or expiry
        let other_id = ClusterId::from_bytes([8; 16]);
        assert_ne!(derive_group_key(fwd.iter(), &other_id, 1000).unwrap(), k1);
        assert_ne!(derive_group_key(fwd.iter(), &id, 1001).unwrap(), k1);

        assert_eq!(derive_group_key([].iter(), &id, 1000).unwrap_err(), ClusterError::EmptyMembers);
    }

    #[test]
    fn distribute_fans_out_identical_payload() {
        let initiator = ann(0, 2.0, 1.0);
        let others = [ann(1, 1.5, 1.0), ann(2, 1.2, 1.0), ann(3, 1.1, 1.0)];
        let mut verifier = registry_verifier();
        let c = form_cluster(&initiator, &others, &mut verifier, 1.0, 10.0, 1.0, &mut rng()).unwrap();

        let msgs = distribute(&c, 2.0).unwrap();
        assert_eq!(msgs.len(), 4);
        let addressees: Vec<&str> = msgs.iter().map(|m| m.to.as_str()).collect();
        assert_eq!(addressees, ["v00", "v01", "v02", "v03"]);
        for m in &msgs {
            assert_eq!(m.material, msgs[0].material);
            assert_eq!(&m.material.derive_key().unwrap(), c.group_key());
            let rebuilt = m.material.to_cluster(2.0).unwrap();
            assert_eq!(rebuilt.group_key(), c.group_key());
            assert_eq!(rebuilt.members(), c.members());
        }

        assert_eq!(distribute(&c, 11.0).unwrap_err(), ClusterError::Expired);
    }

    #[test]
    fn key_material_wire_format() {
        let material = KeyMaterial {
            cluster_id: ClusterId::from_bytes([0xab; 16]),
            threshold: 1.5,
            expires_at_ms: 11000,
            members: vec![MemberRecord {
                id: VehicleId::from("v00"),
                value: ann(0, 0.0, 0.0).disclosure.value,
                m: 10,
            }],
        };
        let json = serde_json::to_string(&material).unwrap();
        let value_hex = material.members[0].value.to_hex();
        assert_eq!(
            json,
            format!(
                "{{\"cluster_id\":\"abababababababababababababababab\",\"threshold\":1.5,\
                 \"expires_at_ms\":11000,\"members\":[{{\"id\":\"v00\",\"value\":\"{value_hex}\",\"m\":10}}]}}"
            )
        );
        let back: KeyMaterial = serde_json::from_str(&json).unwrap();
        assert_eq!(back, material);
    }

    #[test]
    fn lifetime_is_half_open() {
        let initiator = ann(0, 2.0, 1.0);
        let others = [ann(1, 1.5, 1.0)];
        let mut verifier = registry_verifier();
        let c = form_cluster(&initiator, &others, &mut verifier, 1.0, 10.0, 1.0, &mut rng()).unwrap();
        assert!(is_active(&c, c.created_at()));
        assert!(!is_active(&c, c.expires_at()));
        assert!(is_active(&c, c.expires_at() - 1e-9));
        assert!(!is_active(&c, c.created_at() - 1e-9));
    }

    #[test]
    fn contains_membership() {
        let initiator = ann(0, 2.0, 1.0);
        let excluded = ann(1, 0.1, 1.0);
        let admitted = ann(2, 1.5, 1.0);
        let mut verifier = registry_verifier();
        let c = form_cluster(&initiator, &[excluded.clone(), admitted.clone()], &mut verifier, 1.0, 10.0, 1.0, &mut rng())
            .unwrap();
        assert!(contains(&c, &admitted.disclosure.value));
        assert!(!contains(&c, &excluded.disclosure.value));
        assert!(!contains(&c, &Digest::from_bytes([0x42; 32])));
    }
}
