//! Run outcomes: counters, latency, and the per-vehicle secrecy trace.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

/// One sampled point of a vehicle's secrecy trace: time, secrecy value,
/// and the size of the cluster the vehicle held at that instant.
pub type VscSample = (f64, f64, u32);

/// Measured outcomes of one run.
///
/// Frame counters tick per (frame, legitimate receiver) delivery, so the
/// dispositions partition `frames_sent` exactly. Eavesdropper deliveries
/// have their own ledger and must never produce a decryption success.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub clusters_formed: u64,
    pub mean_cluster_size: f64,
    pub formation_latency_s: f64,
    pub frames_sent: u64,
    pub frames_accepted: u64,
    pub frames_ignored: u64,
    pub frames_auth_failed: u64,
    pub frames_expired: u64,
    pub frames_in_flight: u64,
    pub core_frames_emitted: u64,
    pub eavesdrop_attempts: u64,
    pub eavesdrop_success: u64,
    pub eavesdrop_core_read: u64,
    pub vsc_trace: BTreeMap<String, Vec<VscSample>>,
}

impl Metrics {
    /// Disposition counts must sum back to deliveries attempted.
    pub fn conserved(&self) -> bool {
        self.frames_accepted + self.frames_ignored + self.frames_auth_failed + self.frames_expired
            + self.frames_in_flight
            == self.frames_sent
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics always serialize")
    }

    /// Flat CSV of the secrecy trace for spreadsheet use.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "t_s,vehicle,vsc,cluster_size")?;
        for (vehicle, samples) in &self.vsc_trace {
            for (t, vsc, size) in samples {
                writeln!(out, "{t},{vehicle},{vsc},{size}")?;
            }
        }
        Ok(())
    }
}
