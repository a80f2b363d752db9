//! Per-link SNR, channel capacity, and the vehicular secrecy capacity.
//!
//! The secrecy figure compares the capacity of the link to the intended
//! target against the capacity at the mean SNR of every responder heard
//! during one signaling window:
//!
//! ```text
//! vsc = log2(1 + snr_target) - log2(1 + mean(observed snr))
//! ```
//!
//! SNR flows through this module in linear units. Propagation uses a
//! log-distance path-loss model; the responders' side assumes the host
//! never observes its own transmissions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::VehicleId;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("SNR must be nonnegative, got {0}")]
    NegativeSnr(f64),
    #[error("no channel observations in the window")]
    InsufficientObservations,
}

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Multiplicative fading applied to linear SNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fading {
    /// Deterministic propagation only (the default, so runs replay exactly).
    #[default]
    None,
    /// Rayleigh envelope: linear SNR scaled by a unit-mean exponential draw.
    Rayleigh,
}

/// Log-distance propagation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub tx_power_dbm: f64,
    pub ref_loss_db: f64,
    pub ref_distance_m: f64,
    pub path_loss_exponent: f64,
    pub noise_floor_dbm: f64,
    pub min_distance_m: f64,
    #[serde(default)]
    pub fading: Fading,
    /// Hard radio-range cutoff; `None` keeps every vehicle in range.
    #[serde(default)]
    pub max_range_m: Option<f64>,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            tx_power_dbm: 23.0,
            ref_loss_db: 47.0,
            ref_distance_m: 1.0,
            path_loss_exponent: 2.7,
            noise_floor_dbm: -96.0,
            min_distance_m: 1.0,
            fading: Fading::None,
            max_range_m: None,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let fields = [
            (self.tx_power_dbm, "tx_power_dbm"),
            (self.ref_loss_db, "ref_loss_db"),
            (self.ref_distance_m, "ref_distance_m"),
            (self.path_loss_exponent, "path_loss_exponent"),
            (self.noise_floor_dbm, "noise_floor_dbm"),
            (self.min_distance_m, "min_distance_m"),
        ];
        for (value, name) in fields {
            if !value.is_finite() {
                return Err(ChannelError::NonFinite(name));
            }
        }
        if self.ref_distance_m <= 0.0 {
            return Err(ChannelError::NonFinite("ref_distance_m must be > 0"));
        }
        if self.min_distance_m <= 0.0 {
            return Err(ChannelError::NonFinite("min_distance_m must be > 0"));
        }
        if self.path_loss_exponent <= 0.0 {
            return Err(ChannelError::NonFinite("path_loss_exponent must be > 0"));
        }
        Ok(())
    }
}

/// One received channel-information report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub sender: VehicleId,
    pub receiver: VehicleId,
    pub snr_linear: f64,
    pub timestamp: f64,
}

/// Inputs to one secrecy-capacity evaluation.
///
/// `observed` holds every report the host received during the window; the
/// host's own transmissions are filtered out on construction, the target's
/// report stays in.
#[derive(Debug, Clone, PartialEq)]
pub struct VscInputs {
    pub snr_ab: f64,
    pub observed: Vec<ChannelInfo>,
}

impl VscInputs {
    pub fn new(snr_ab: f64, host: &VehicleId, observed: impl IntoIterator<Item = ChannelInfo>) -> Self {
        let observed = observed.into_iter().filter(|o| &o.sender != host).collect();
        VscInputs { snr_ab, observed }
    }
}

/// Log-distance path loss in dB, clamped below `min_distance_m`.
pub fn path_loss_db(distance_m: f64, params: &ChannelParams) -> Result<f64, ChannelError> {
    if !distance_m.is_finite() || distance_m < 0.0 {
        return Err(ChannelError::NonFinite("distance_m"));
    }
    params.validate()?;
    let d = distance_m.max(params.min_distance_m);
    Ok(params.ref_loss_db + 10.0 * params.path_loss_exponent * (d / params.ref_distance_m).log10())
}

/// Linear SNR of a transmission from `tx` heard at `rx`.
pub fn snr_linear(tx: &Position, rx: &Position, params: &ChannelParams) -> Result<f64, ChannelError> {
    if !tx.is_finite() || !rx.is_finite() {
        return Err(ChannelError::NonFinite("position"));
    }
    let loss = path_loss_db(tx.distance_to(rx), params)?;
    Ok(10f64.powf((params.tx_power_dbm - loss - params.noise_floor_dbm) / 10.0))
}

/// Shannon capacity `log2(1 + snr)` in bits/s/Hz.
pub fn capacity(snr_linear: f64) -> Result<f64, ChannelError> {
    if !snr_linear.is_finite() {
        return Err(ChannelError::NonFinite("snr_linear"));
    }
    if snr_linear < 0.0 {
        return Err(ChannelError::NegativeSnr(snr_linear));
    }
    Ok((1.0 + snr_linear).log2())
}

// Sum in sorted order so the mean is exactly independent of arrival order.
fn ordered_mean(values: impl Iterator<Item = f64>) -> Result<f64, ChannelError> {
    let mut values: Vec<f64> = values.collect();
    if values.is_empty() {
        return Err(ChannelError::InsufficientObservations);
    }
    values.sort_by(f64::total_cmp);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Arithmetic mean of the observed linear SNRs and the count that went in.
pub fn average_snr(observed: &[ChannelInfo]) -> Result<(f64, usize), ChannelError> {
    let mean = ordered_mean(observed.iter().map(|o| o.snr_linear))?;
    Ok((mean, observed.len()))
}

/// Vehicular secrecy capacity: target capacity minus capacity at the
/// observed mean. May be negative; negative simply fails threshold tests.
pub fn vsc(inputs: &VscInputs) -> Result<f64, ChannelError> {
    let (mean, _count) = average_snr(&inputs.observed)?;
    Ok(capacity(inputs.snr_ab)? - capacity(mean)?)
}

/// Secrecy capacity from bare SNR values (CLI and test convenience).
pub fn vsc_from_snrs(snr_ab: f64, observed: &[f64]) -> Result<f64, ChannelError> {
    let mean = ordered_mean(observed.iter().copied())?;
    Ok(capacity(snr_ab)? - capacity(mean)?)
}

/// Unit-mean exponential scaling of linear SNR for Rayleigh fading.
pub fn apply_fading(snr: f64, fading: Fading, rng: &mut impl rand::Rng) -> f64 {
    match fading {
        Fading::None => snr,
        Fading::Rayleigh => {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            snr * -u.ln()
        }
    }
}
