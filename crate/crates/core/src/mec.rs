//! The MEC-hosted secure clustering service.
//!
//! Vehicles register out of band, which is how the service comes to hold
//! their VINs; that makes it the one party able to run the full
//! hash-count verification on announced disclosures. The service ingests
//! announcements and, on request from a host vehicle, forms a cluster and
//! returns the hash-chain key material.
//!
//! The same service runs in-process or behind a newline-delimited JSON
//! socket; both paths go through [`MecService::handle_wire_line`], so a
//! scripted session produces byte-identical responses either way.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{form_cluster, key_material, Announcement, ClusterError, KeyMaterial};
use crate::hashchain::{verify_disclosure, ChainDisclosure, Vin};
use crate::ids::VehicleId;

#[derive(Debug, Error, PartialEq)]
pub enum MecError {
    #[error("VIN already registered")]
    DuplicateVin,
    #[error("pseudo-id {0} already registered")]
    DuplicateId(VehicleId),
    #[error("unknown host {0}")]
    UnknownHost(VehicleId),
    #[error("invalid cluster request: {0}")]
    InvalidRequest(&'static str),
}

/// Pseudo-id to VIN bindings. Both sides are unique.
#[derive(Debug, Default, Clone)]
pub struct VinRegistry {
    by_id: BTreeMap<VehicleId, Vin>,
    vins: BTreeSet<String>,
}

/// One persisted registry binding (the MEC's private store; never sent
/// in responses or traces).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub id: VehicleId,
    pub vin: Vin,
}

impl VinRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind a VIN to a freshly minted random pseudo-id.
    pub fn register(&mut self, vin: Vin, rng: &mut impl rand::RngCore) -> Result<VehicleId, MecError> {
        if self.vins.contains(vin.as_str()) {
            return Err(MecError::DuplicateVin);
        }
        let mut id = VehicleId::random(rng);
        while self.by_id.contains_key(&id) {
            id = VehicleId::random(rng);
        }
        self.vins.insert(vin.as_str().to_string());
        self.by_id.insert(id.clone(), vin);
        Ok(id)
    }

    /// Bind a VIN to a caller-chosen pseudo-id (scenario files and
    /// persisted registries).
    pub fn register_as(&mut self, id: VehicleId, vin: Vin) -> Result<(), MecError> {
        if self.by_id.contains_key(&id) {
            return Err(MecError::DuplicateId(id));
        }
        if self.vins.contains(vin.as_str()) {
            return Err(MecError::DuplicateVin);
        }
        self.vins.insert(vin.as_str().to_string());
        self.by_id.insert(id, vin);
        Ok(())
    }

    pub fn vin_of(&self, id: &VehicleId) -> Option<&Vin> {
        self.by_id.get(id)
    }

    pub fn contains_id(&self, id: &VehicleId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn entries(&self) -> Vec<RegistryEntry> {
        self.by_id
            .iter()
            .map(|(id, vin)| RegistryEntry { id: id.clone(), vin: vin.clone() })
            .collect()
    }

    pub fn from_entries(entries: Vec<RegistryEntry>) -> Result<Self, MecError> {
        let mut reg = Self::new();
        for e in entries {
            reg.register_as(e.id, e.vin)?;
        }
        Ok(reg)
    }
}

/// Why an announcement was turned away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnknownSender,
    BadDisclosure,
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted,
    Rejected(RejectReason),
}

/// A host vehicle's request for clustering service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRequest {
    pub host_id: VehicleId,
    pub threshold: f64,
    pub ttl_seconds: f64,
    pub window_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStatus {
    Ok,
    Degenerate,
    HostBelowThreshold,
}

/// Service answer to a cluster request: key material present iff `ok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResponse {
    pub status: ClusterStatus,
    pub body: Option<KeyMaterial>,
}

#[derive(Debug, Clone, Copy)]
pub struct MecConfig {
    /// Ingest freshness window; also sizes the per-sender retention ring
    /// (`window_seconds * 10` entries).
    pub window_seconds: f64,
}

impl Default for MecConfig {
    fn default() -> Self {
        MecConfig { window_seconds: 1.0 }
    }
}

/// The clustering service state: registry, announcement rings, RNG.
pub struct MecService {
    registry: VinRegistry,
    config: MecConfig,
    announcements: BTreeMap<VehicleId, VecDeque<Announcement>>,
    rng: Xoshiro256StarStar,
}

impl MecService {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, MecConfig::default())
    }

    pub fn with_config(seed: u64, config: MecConfig) -> Self {
        MecService {
            registry: VinRegistry::new(),
            config,
            announcements: BTreeMap::new(),
            rng: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn with_registry(seed: u64, config: MecConfig, registry: VinRegistry) -> Self {
        MecService { registry, ..Self::with_config(seed, config) }
    }

    pub fn registry(&self) -> &VinRegistry {
        &self.registry
    }

    fn ring_capacity(&self) -> usize {
        ((self.config.window_seconds * 10.0) as usize).max(1)
    }

    /// Register a vehicle, minting a fresh pseudo-id for its VIN.
    pub fn register_vehicle(&mut self, vin: Vin) -> Result<VehicleId, MecError> {
        self.registry.register(vin, &mut self.rng)
    }

    /// Register a vehicle under a pre-assigned pseudo-id.
    pub fn register_vehicle_as(&mut self, id: VehicleId, vin: Vin) -> Result<(), MecError> {
        self.registry.register_as(id, vin)
    }

    /// Accept an announcement iff the sender is registered, the disclosure
    /// verifies against the registry VIN, and the timestamp is inside the
    /// current window. Rejections are data, not errors.
    pub fn ingest_announcement(&mut self, a: Announcement, now: f64) -> IngestOutcome {
        let Some(vin) = self.registry.vin_of(&a.sender) else {
            return IngestOutcome::Rejected(RejectReason::UnknownSender);
        };
        if !verify_disclosure(&a.disclosure, vin) {
            return IngestOutcome::Rejected(RejectReason::BadDisclosure);
        }
        if a.timestamp > now || a.timestamp < now - self.config.window_seconds {
            return IngestOutcome::Rejected(RejectReason::Stale);
        }

        let cap = self.ring_capacity();
        let window = self.config.window_seconds;
        let ring = self.announcements.entry(a.sender.clone()).or_default();
        ring.retain(|old| old.timestamp >= now - window);
        while ring.len() >= cap {
            ring.pop_front();
        }
        ring.push_back(a);
        IngestOutcome::Accepted
    }

    /// Form a cluster for the host from announcements in `[now - window, now]`.
    pub fn handle_cluster_request(&mut self, req: &ClusterRequest, now: f64) -> Result<ClusterResponse, MecError> {
        if !self.registry.contains_id(&req.host_id) {
            return Err(MecError::UnknownHost(req.host_id.clone()));
        }
        if !(req.ttl_seconds > 0.0) {
            return Err(MecError::InvalidRequest("ttl_seconds must be positive"));
        }
        if !(req.window_seconds > 0.0) {
            return Err(MecError::InvalidRequest("window_seconds must be positive"));
        }

        let in_window = |a: &&Announcement| a.timestamp >= now - req.window_seconds && a.timestamp <= now;
        let host_announcement = self
            .announcements
            .get(&req.host_id)
            .and_then(|ring| ring.iter().filter(in_window).last())
            .cloned();
        let Some(initiator) = host_announcement else {
            return Ok(ClusterResponse { status: ClusterStatus::HostBelowThreshold, body: None });
        };

        let others: Vec<Announcement> = self
            .announcements
            .iter()
            .filter(|(id, _)| **id != req.host_id)
            .flat_map(|(_, ring)| ring.iter().filter(in_window).cloned())
            .collect();

        let registry = &self.registry;
        let mut verifier = |id: &VehicleId, d: &ChainDisclosure| {
            registry.vin_of(id).is_some_and(|vin| verify_disclosure(d, vin))
        };
        match form_cluster(&initiator, &others, &mut verifier, now, req.ttl_seconds, req.threshold, &mut self.rng) {
            Ok(cluster) => Ok(ClusterResponse {
                status: ClusterStatus::Ok,
                body: Some(key_material(&cluster)),
            }),
            Err(ClusterError::Degenerate) => {
                Ok(ClusterResponse { status: ClusterStatus::Degenerate, body: None })
            }
            Err(ClusterError::InitiatorBelowThreshold { .. } | ClusterError::InitiatorRejected) => {
                Ok(ClusterResponse { status: ClusterStatus::HostBelowThreshold, body: None })
            }
            Err(ClusterError::InvalidTtl(_)) => Err(MecError::InvalidRequest("ttl_seconds must be positive")),
            Err(e) => Err(MecError::InvalidRequest(match e {
                ClusterError::EmptyMembers => "empty member set",
                _ => "unprocessable request",
            })),
        }
    }

    /// Process one wire-protocol line and render the response JSON.
    ///
    /// This is the single entry point shared by the socket server and
    /// in-process callers, so responses are byte-identical across modes.
    pub fn handle_wire_line(&mut self, line: &str) -> String {
        let response = match serde_json::from_str::<WireRequest>(line) {
            Ok(req) => self.dispatch(req),
            Err(e) => WireResponse::error(format!("malformed request: {e}")),
        };
        serde_json::to_string(&response).expect("wire responses always serialize")
    }

    fn dispatch(&mut self, req: WireRequest) -> WireResponse {
        match req {
            WireRequest::Register { vin } => match Vin::parse(&vin) {
                Ok(vin) => match self.register_vehicle(vin) {
                    Ok(id) => WireResponse {
                        status: "ok".into(),
                        body: serde_json::json!({ "id": id }),
                    },
                    Err(e) => WireResponse::error(e.to_string()),
                },
                Err(e) => WireResponse::error(e.to_string()),
            },
            WireRequest::Announce { sender, disclosure, vsc, ts_ms, now_ms } => {
                let a = Announcement {
                    sender,
                    disclosure,
                    vsc_value: vsc,
                    timestamp: ts_ms as f64 / 1000.0,
                };
                match self.ingest_announcement(a, now_ms as f64 / 1000.0) {
                    IngestOutcome::Accepted => WireResponse {
                        status: "accepted".into(),
                        body: serde_json::Value::Null,
                    },
                    IngestOutcome::Rejected(reason) => WireResponse {
                        status: "rejected".into(),
                        body: serde_json::json!({ "reason": reason }),
                    },
                }
            }
            WireRequest::Cluster { host_id, threshold, ttl_seconds, window_seconds, now_ms } => {
                let req = ClusterRequest { host_id, threshold, ttl_seconds, window_seconds };
                match self.handle_cluster_request(&req, now_ms as f64 / 1000.0) {
                    Ok(resp) => WireResponse {
                        status: serde_json::to_value(resp.status)
                            .expect("status serializes")
                            .as_str()
                            .expect("status is a string")
                            .to_string(),
                        body: match resp.body {
                            Some(material) => serde_json::to_value(material).expect("key material serializes"),
                            None => serde_json::Value::Null,
                        },
                    },
                    Err(e) => WireResponse::error(e.to_string()),
                }
            }
        }
    }
}

/// Socket requests: one JSON object per line, selected by `op`.
#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
enum WireRequest {
    Register {
        vin: String,
    },
    Announce {
        sender: VehicleId,
        disclosure: ChainDisclosure,
        vsc: f64,
        ts_ms: u64,
        now_ms: u64,
    },
    Cluster {
        host_id: VehicleId,
        threshold: f64,
        ttl_seconds: f64,
        window_seconds: f64,
        now_ms: u64,
    },
}

#[derive(Debug, Serialize)]
struct WireResponse {
    status: String,
    body: serde_json::Value,
}

impl WireResponse {
    fn error(message: String) -> Self {
        WireResponse {
            status: "error".into(),
            body: serde_json::json!({ "message": message }),
        }
    }
}

/// Serve the wire protocol until `shutdown` is raised.
///
/// Connections are handled one at a time and requests strictly in arrival
/// order, so every cluster request runs against a consistent announcement
/// snapshot.
pub fn serve(listener: TcpListener, service: &mut MecService, shutdown: &AtomicBool) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _addr)) => {
                // Errors on one connection (e.g. a client vanishing) must
                // not take the service down.
                let _ = handle_connection(stream, service, shutdown);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn handle_connection(stream: TcpStream, service: &mut MecService, shutdown: &AtomicBool) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_millis(100)))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        match reader.read_line(&mut line) {
            Ok(0) => return Ok(()),
            Ok(_) => {
                let trimmed = line.trim();
                if !trimmed.is_empty() {
                    let response = service.handle_wire_line(trimmed);
                    writer.write_all(response.as_bytes())?;
                    writer.write_all(b"\n")?;
                    writer.flush()?;
                }
                line.clear();
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if shutdown.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Err(e) => return Err(e),
        }
    }
}
