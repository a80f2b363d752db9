//! Opaque vehicle pseudo-identifiers.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque pseudo-id a vehicle is known by on the air and in the registry.
///
/// Pseudo-ids decouple every on-air artifact from the secret VIN. The MEC
/// registry mints fresh ones as 8 random bytes rendered lowercase hex;
/// scenario files may assign their own stable strings.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(String);

impl VehicleId {
    pub fn new(id: impl Into<String>) -> Self {
        VehicleId(id.into())
    }

    /// Mint a fresh id from 8 random bytes, rendered as 16 lowercase hex chars.
    pub fn random(rng: &mut impl rand::RngCore) -> Self {
        let mut bytes = [0u8; 8];
        rng.fill_bytes(&mut bytes);
        VehicleId(hex::encode(bytes))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VehicleId {
    fn from(s: &str) -> Self {
        VehicleId(s.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256StarStar;

    #[test]
    fn random_ids_are_16_hex_chars_and_seed_deterministic() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(7);
        let a = VehicleId::random(&mut rng);
        assert_eq!(a.as_str().len(), 16);
        assert!(a.as_str().chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));

        let mut rng2 = Xoshiro256StarStar::seed_from_u64(7);
        assert_eq!(a, VehicleId::random(&mut rng2));
    }
}
