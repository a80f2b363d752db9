//! Newline-delimited JSON event trace of a run.
//!
//! Every record that feeds the post-hoc soundness replay is here: beacon
//! anchors, announcements with their secrecy values, formation outcomes
//! with full member lists, and per-receiver frame dispositions. VINs never
//! appear in any event.

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterId, MemberRecord};
use crate::hashchain::Digest;
use crate::ids::VehicleId;
use crate::mec::RejectReason;
use crate::messaging::BroadcastFrame;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    /// Trust-on-first-use anchor disclosure sent before the run starts.
    Beacon {
        t_ms: u64,
        sender: VehicleId,
        value: Digest,
        m: u64,
    },
    Announce {
        t_ms: u64,
        sender: VehicleId,
        value: Digest,
        m: u64,
        vsc: f64,
    },
    IngestRejected {
        t_ms: u64,
        sender: VehicleId,
        reason: RejectReason,
    },
    FormationFailed {
        t_ms: u64,
        initiator: VehicleId,
        reason: String,
    },
    ClusterFormed {
        t_ms: u64,
        cluster_id: ClusterId,
        initiator: VehicleId,
        threshold: f64,
        window_s: f64,
        expires_at_ms: u64,
        members: Vec<MemberRecord>,
        via_mec: bool,
    },
    KeyMaterialDelivered {
        t_ms: u64,
        to: VehicleId,
        cluster_id: ClusterId,
    },
    FrameTx {
        t_ms: u64,
        sender: VehicleId,
        frame: BroadcastFrame,
    },
    FrameRx {
        t_ms: u64,
        receiver: VehicleId,
        sender: VehicleId,
        outcome: FrameOutcome,
    },
    EavesdropCoreRead {
        t_ms: u64,
        eavesdropper: VehicleId,
    },
    EavesdropAttempt {
        t_ms: u64,
        eavesdropper: VehicleId,
        success: bool,
    },
    ClusterExpired {
        t_ms: u64,
        cluster_id: ClusterId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameOutcome {
    Accepted,
    Ignored,
    Expired,
    AuthFailure,
}

impl From<&crate::messaging::ReceiveOutcome> for FrameOutcome {
    fn from(o: &crate::messaging::ReceiveOutcome) -> Self {
        use crate::messaging::ReceiveOutcome as R;
        match o {
            R::Accepted(_) => FrameOutcome::Accepted,
            R::Ignored => FrameOutcome::Ignored,
            R::Expired => FrameOutcome::Expired,
            R::AuthFailure => FrameOutcome::AuthFailure,
        }
    }
}
