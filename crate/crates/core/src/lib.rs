//! Hash-chain secure clusters for vehicle communication.
//!
//! Vehicles measure a per-link secrecy figure from overheard channel
//! reports, disclose values from a VIN-seeded hash chain when they clear
//! the reference threshold, and form clusters whose shared disclosure set
//! doubles as group-key material. On top of the protocol sits a
//! deterministic discrete-event simulator and an MEC-hosted clustering
//! service with a line-delimited JSON socket.
//!
//! Module map:
//! - [`hashchain`]: chain generation, disclosure, and both verification modes
//! - [`channel`]: path loss, SNR, capacity, and the secrecy figure
//! - [`cluster`]: admission, group-key derivation, distribution, lifetime
//! - [`messaging`]: core/enhancement frames, AEAD sealing, multiplexing
//! - [`mec`]: registry-backed clustering service, in-process or over a socket
//! - [`sim`]: scenarios, the event loop, metrics, and traces

pub mod channel;
pub mod cluster;
pub mod hashchain;
pub mod ids;
pub mod mec;
pub mod messaging;
pub mod sim;

pub use ids::VehicleId;
