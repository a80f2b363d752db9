//! Scenario files: the deterministic world description a run consumes.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, Position};
use crate::hashchain::Vin;
use crate::ids::VehicleId;

use super::SimError;

/// Velocity vector in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Legitimate,
    Eavesdropper,
}

/// One vehicle in the world. Eavesdroppers observe every frame but are
/// never registered with the MEC and never announce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: VehicleId,
    pub vin: Vin,
    pub position: Position,
    pub velocity: Velocity,
    pub role: Role,
}

/// Who drives cluster formation: a named vehicle, or the MEC service on
/// behalf of the first legitimate vehicle in id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Initiator {
    Mec,
    Vehicle(VehicleId),
}

impl Serialize for Initiator {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            Initiator::Mec => ser.serialize_str("mec"),
            Initiator::Vehicle(id) => ser.serialize_str(id.as_str()),
        }
    }
}

impl<'de> Deserialize<'de> for Initiator {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let text = String::deserialize(de)?;
        Ok(if text == "mec" {
            Initiator::Mec
        } else {
            Initiator::Vehicle(VehicleId::new(text))
        })
    }
}

fn default_tick() -> f64 {
    0.1
}

fn default_window() -> f64 {
    1.0
}

fn default_traffic() -> u32 {
    1
}

fn default_emergency_interval() -> f64 {
    1.0
}

/// Complete world description. Two runs of an identical scenario produce
/// byte-identical outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_tick")]
    pub tick_s: f64,
    /// Signaling window that feeds the observed-SNR mean.
    #[serde(default = "default_window")]
    pub window_seconds: f64,
    #[serde(default)]
    pub channel: ChannelParams,
    /// Reference secrecy-capacity value for announcements and admission.
    pub threshold: f64,
    pub ttl_seconds: f64,
    pub initiator: Initiator,
    /// Enhancement frames per member vehicle per tick.
    #[serde(default = "default_traffic")]
    pub traffic: u32,
    /// Cadence of core-level emergency frames from the initiating vehicle.
    #[serde(default = "default_emergency_interval")]
    pub emergency_interval_s: f64,
    pub vehicles: Vec<VehicleSpec>,
}

impl Scenario {
    pub fn ticks(&self) -> u64 {
        (self.duration_s / self.tick_s).round() as u64
    }

    pub fn legitimate(&self) -> impl Iterator<Item = &VehicleSpec> {
        self.vehicles.iter().filter(|v| v.role == Role::Legitimate)
    }

    pub fn eavesdroppers(&self) -> impl Iterator<Item = &VehicleSpec> {
        self.vehicles.iter().filter(|v| v.role == Role::Eavesdropper)
    }

    /// The vehicle that requests or performs formation: the named initiator,
    /// or for MEC-driven scenarios the first legitimate vehicle in id order.
    pub fn host_id(&self) -> Option<&VehicleId> {
        match &self.initiator {
            Initiator::Vehicle(id) => Some(id),
            Initiator::Mec => self.legitimate().map(|v| &v.id).min(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |field: &str, reason: &str| SimError::InvalidScenario {
            field: field.to_string(),
            reason: reason.to_string(),
        };
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(invalid("duration_s", "must be a positive finite number"));
        }
        if !(self.tick_s > 0.0) || !self.tick_s.is_finite() || self.tick_s > self.duration_s {
            return Err(invalid("tick_s", "must be positive and no longer than duration_s"));
        }
        if !(self.window_seconds > 0.0) || !self.window_seconds.is_finite() {
            return Err(invalid("window_seconds", "must be a positive finite number"));
        }
        if !self.threshold.is_finite() {
            return Err(invalid("threshold", "must be finite"));
        }
        if !(self.ttl_seconds > 0.0) || !self.ttl_seconds.is_finite() {
            return Err(invalid("ttl_seconds", "must be a positive finite number"));
        }
        if !(self.emergency_interval_s > 0.0) || !self.emergency_interval_s.is_finite() {
            return Err(invalid("emergency_interval_s", "must be a positive finite number"));
        }
        self.channel
            .validate()
            .map_err(|e| invalid("channel", &e.to_string()))?;

        let mut ids = std::collections::BTreeSet::new();
        let mut vins = std::collections::BTreeSet::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            if v.id.as_str() == "mec" {
                return Err(invalid(&format!("vehicles[{i}].id"), "\"mec\" is reserved"));
            }
            if v.id.as_str().is_empty() {
                return Err(invalid(&format!("vehicles[{i}].id"), "must not be empty"));
            }
            if !ids.insert(v.id.clone()) {
                return Err(invalid(&format!("vehicles[{i}].id"), "duplicate pseudo-id"));
            }
            if !vins.insert(v.vin.as_str().to_string()) {
                return Err(invalid(&format!("vehicles[{i}].vin"), "duplicate VIN"));
            }
            if !v.position.is_finite() {
                return Err(invalid(&format!("vehicles[{i}].position"), "coordinates must be finite"));
            }
            if !v.velocity.x.is_finite() || !v.velocity.y.is_finite() {
                return Err(invalid(&format!("vehicles[{i}].velocity"), "components must be finite"));
            }
        }
        if self.legitimate().count() < 2 {
            return Err(invalid("vehicles", "need at least 2 legitimate vehicles"));
        }
        if let Initiator::Vehicle(id) = &self.initiator {
            match self.vehicles.iter().find(|v| &v.id == id) {
                None => return Err(invalid("initiator", "names a vehicle not in the scenario")),
                Some(v) if v.role != Role::Legitimate => {
                    return Err(invalid("initiator", "must be a legitimate vehicle"));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// The stock demonstration world: a six-vehicle ring close to the
    /// initiator so a cluster forms, three stragglers below threshold, and
    /// one eavesdropper trailing far behind. Rigid formation at 25 m/s.
    pub fn default_demo() -> Scenario {
        let v = |id: &str, vin: &str, x: f64, y: f64, role: Role| VehicleSpec {
            id: VehicleId::from(id),
            vin: Vin::parse(vin).unwrap(),
            position: Position::new(x, y),
            velocity: Velocity { x: 25.0, y: 0.0 },
            role,
        };
        Scenario {
            seed: 1,
            duration_s: 60.0,
            tick_s: 0.1,
            window_seconds: 1.0,
            channel: ChannelParams::default(),
            threshold: 0.5,
            ttl_seconds: 10.0,
            initiator: Initiator::Vehicle(VehicleId::from("v00")),
            traffic: 1,
            emergency_interval_s: 1.0,
            vehicles: vec![
                v("v00", "1HGCM82633A004352", 0.0, 0.0, Role::Legitimate),
                v("v01", "1HGCM82633A004353", 0.0, 60.0, Role::Legitimate),
                v("v02", "JH4KA7561PC008269", -57.063, 18.541, Role::Legitimate),
                v("v03", "5YJSA1DG9DFP14705", -35.267, -48.541, Role::Legitimate),
                v("v04", "WDBRF40J43F472028", 35.267, -48.541, Role::Legitimate),
                v("v05", "1FTFW1ET5DFC10312", 57.063, 18.541, Role::Legitimate),
                v("v06", "2T1BU4EE9DC071057", -400.0, 0.0, Role::Legitimate),
                v("v07", "3VWFE21C04M000001", -550.0, 60.0, Role::Legitimate),
                v("v08", "JM1BK32F781234567", -700.0, -60.0, Role::Legitimate),
                v("eve", "WVWZZZ1JZ3W386752", -1500.0, 0.0, Role::Eavesdropper),
            ],
        }
    }

    /// A symmetric world: three co-moving vehicles on an equilateral
    /// triangle, so every pairwise SNR is equal and every secrecy value is
    /// exactly zero. No cluster can clear a positive threshold.
    pub fn equidistant_demo() -> Scenario {
        let side = 50.0;
        let h = side * 3f64.sqrt() / 2.0;
        let v = |id: &str, vin: &str, x: f64, y: f64| VehicleSpec {
            id: VehicleId::from(id),
            vin: Vin::parse(vin).unwrap(),
            position: Position::new(x, y),
            velocity: Velocity { x: 20.0, y: 0.0 },
            role: Role::Legitimate,
        };
        Scenario {
            seed: 1,
            duration_s: 10.0,
            tick_s: 0.1,
            window_seconds: 1.0,
            channel: ChannelParams::default(),
            threshold: 0.5,
            ttl_seconds: 10.0,
            initiator: Initiator::Vehicle(VehicleId::from("v00")),
            traffic: 1,
            emergency_interval_s: 1.0,
            vehicles: vec![
                v("v00", "1HGCM82633A004352", 0.0, 0.0),
                v("v01", "1HGCM82633A004353", side, 0.0),
                v("v02", "JH4KA7561PC008269", side / 2.0, h),
            ],
        }
    }
}
