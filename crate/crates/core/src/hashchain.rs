//! Vehicle hash chains seeded from the vehicle identification number.
//!
//! A vehicle keeps its VIN secret and precomputes the chain
//! `v_1 = H(VIN)`, `v_k = H(v_{k-1})`. When it qualifies for a secure
//! cluster it discloses one `(v_m, m)` pair. A verifier that knows the VIN
//! recomputes `H^m(VIN)`; a verifier that only saw an earlier disclosure
//! links the two values instead ([`verify_link`]).

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Chains longer than this are refused at generation time.
pub const MAX_CHAIN_LEN: u64 = 1_000_000;

/// Default precomputed chain length when a caller does not pick one.
pub const DEFAULT_CHAIN_LEN: u64 = 1000;

/// Hash algorithm tag carried by every serialized disclosure.
pub const HASH_ALG: &str = "sha-256";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HashChainError {
    #[error("invalid VIN: {0}")]
    InvalidVin(String),
    #[error("chain length {0} outside 1..={MAX_CHAIN_LEN}")]
    BadLength(u64),
    #[error("disclosure index m={m} outside 1..={len}")]
    MOutOfRange { m: u64, len: u64 },
    #[error("disclosure order violated: earlier m={earlier} must be < later m={later}")]
    DisclosureOrder { earlier: u64, later: u64 },
    #[error("unsupported hash algorithm tag {0:?} (expected {HASH_ALG:?})")]
    UnsupportedAlg(String),
}

/// How strictly [`Vin::parse`] checks the identifier text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VinMode {
    /// 17 uppercase alphanumerics, letters I, O, Q excluded.
    #[default]
    Strict,
    /// 11..=17 uppercase alphanumerics, for test corpora with loose ids.
    Permissive,
}

/// Vehicle identification number: the secret seed of the vehicle's chain.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Vin(String);

impl Vin {
    pub fn parse(text: &str) -> Result<Self, HashChainError> {
        Self::parse_with(text, VinMode::Strict)
    }

    pub fn parse_with(text: &str, mode: VinMode) -> Result<Self, HashChainError> {
        let ok = match mode {
            VinMode::Strict => {
                text.len() == 17
                    && text
                        .bytes()
                        .all(|b| b.is_ascii_digit() || (b.is_ascii_uppercase() && !matches!(b, b'I' | b'O' | b'Q')))
            }
            VinMode::Permissive => {
                (11..=17).contains(&text.len())
                    && text.bytes().all(|b| b.is_ascii_digit() || b.is_ascii_uppercase())
            }
        };
        if ok {
            Ok(Vin(text.to_string()))
        } else {
            Err(HashChainError::InvalidVin(format!(
                "{text:?} does not match the {mode:?} VIN format"
            )))
        }
    }

    /// Canonical byte encoding: the ASCII bytes of the text, no padding.
    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

// Keep the seed out of debug/log output.
impl fmt::Debug for Vin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Vin(..)")
    }
}

impl<'de> Deserialize<'de> for Vin {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let text = String::deserialize(de)?;
        Vin::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// 32-byte hash output, rendered as 64 lowercase hex chars.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest([u8; 32]);

impl Digest {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    pub fn from_hex(hex_str: &str) -> Result<Self, hex::FromHexError> {
        let mut bytes = [0u8; 32];
        hex::decode_to_slice(hex_str, &mut bytes)?;
        Ok(Digest(bytes))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let text = String::deserialize(de)?;
        if text.len() != 64 || text.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(serde::de::Error::custom("digest must be 64 lowercase hex chars"));
        }
        Digest::from_hex(&text).map_err(serde::de::Error::custom)
    }
}

fn sha256(data: &[u8]) -> Digest {
    let out = Sha256::digest(data);
    Digest(out.into())
}

/// Apply H `times` times starting from `seed` bytes. `times` must be >= 1.
fn iterate_hash(seed: &[u8], times: u64) -> Digest {
    debug_assert!(times >= 1);
    let mut cur = sha256(seed);
    for _ in 1..times {
        cur = sha256(&cur.0);
    }
    cur
}

/// Precomputed chain `values[k] = H^k(VIN)` for `k = 1..=length`.
#[derive(Clone)]
pub struct HashChain {
    seed_vin: Vin,
    values: Vec<Digest>,
}

impl HashChain {
    pub fn length(&self) -> u64 {
        self.values.len() as u64
    }

    pub fn seed_vin(&self) -> &Vin {
        &self.seed_vin
    }

    /// The value after m hash applications, 1-indexed.
    pub fn value(&self, m: u64) -> Result<Digest, HashChainError> {
        if m == 0 || m > self.length() {
            return Err(HashChainError::MOutOfRange { m, len: self.length() });
        }
        Ok(self.values[(m - 1) as usize])
    }

    /// Publish `(values[m], m)`.
    pub fn disclose(&self, m: u64) -> Result<ChainDisclosure, HashChainError> {
        Ok(ChainDisclosure { value: self.value(m)?, m })
    }
}

impl fmt::Debug for HashChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashChain(len={})", self.values.len())
    }
}

/// The public `(value, m)` pair a vehicle discloses.
///
/// Serializes as `{"value": <64 hex>, "m": <int>, "alg": "sha-256"}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChainDisclosure {
    pub value: Digest,
    pub m: u64,
}

impl Serialize for ChainDisclosure {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = ser.serialize_struct("ChainDisclosure", 3)?;
        st.serialize_field("value", &self.value)?;
        st.serialize_field("m", &self.m)?;
        st.serialize_field("alg", HASH_ALG)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for ChainDisclosure {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Wire {
            value: Digest,
            m: u64,
            #[serde(default = "default_alg")]
            alg: String,
        }
        fn default_alg() -> String {
            HASH_ALG.to_string()
        }
        let w = Wire::deserialize(de)?;
        if w.alg != HASH_ALG {
            return Err(serde::de::Error::custom(HashChainError::UnsupportedAlg(w.alg)));
        }
        if w.m == 0 {
            return Err(serde::de::Error::custom("disclosure m must be >= 1"));
        }
        Ok(ChainDisclosure { value: w.value, m: w.m })
    }
}

/// Build the chain `H(VIN), H^2(VIN), ..., H^n(VIN)`.
///
/// Deterministic for fixed inputs. The raw VIN never appears in the value
/// sequence; index 1 is already one hash application in.
pub fn generate_chain(vin: &Vin, n: u64) -> Result<HashChain, HashChainError> {
    if n == 0 || n > MAX_CHAIN_LEN {
        return Err(HashChainError::BadLength(n));
    }
    let mut values = Vec::with_capacity(n as usize);
    let mut cur = sha256(vin.as_bytes());
    values.push(cur);
    for _ in 1..n {
        cur = sha256(&cur.0);
        values.push(cur);
    }
    Ok(HashChain { seed_vin: vin.clone(), values })
}

/// Check a disclosure against the chain's secret seed: does `H^m(VIN)`
/// equal the disclosed value? Work is proportional to `m`. A mismatch is
/// a `false`, not an error.
pub fn verify_disclosure(d: &ChainDisclosure, vin: &Vin) -> bool {
    if d.m == 0 {
        return false;
    }
    iterate_hash(vin.as_bytes(), d.m) == d.value
}

/// Check that two disclosures come from one chain without knowing the VIN:
/// applying H `(later.m - earlier.m)` times to `earlier.value` must yield
/// `later.value`. Requires `earlier.m < later.m`.
pub fn verify_link(earlier: &ChainDisclosure, later: &ChainDisclosure) -> Result<bool, HashChainError> {
    if earlier.m >= later.m {
        return Err(HashChainError::DisclosureOrder { earlier: earlier.m, later: later.m });
    }
    Ok(iterate_hash(earlier.value.as_bytes(), later.m - earlier.m) == later.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    const VIN_A: &str = "1HGCM82633A004352";
    const VIN_B: &str = "1HGCM82633A004353";

    // Frozen against an independent SHA-256 implementation (Python hashlib).
    const H1_A: &str = "84b11956da73b2f05a32d77bc65e5dc4b5c0130e4cb6f99beef5ec65b7c3462a";
    const H3_A: &str = "d6d7c1dd8303a0be2e0ddac27a6c346236013d8bda84f6eeaf582b39dd8ce995";
    const H4_A: &str = "4a5e69a58921db85ee42e7034a53288e4589662ae57441832e4dedda145fd0fe";
    const H17_A: &str = "ea05ea4b10eb9b7ac1e05768959dbacd7ada9524b1df17072544d0ca469ccaae";
    const H1_B: &str = "6774bcd696da5375820f7f098fdd419930f8bf6ce12f98a53a192847a6ac9aba";

    fn vin(text: &str) -> Vin {
        Vin::parse(text).unwrap()
    }

    #[test]
    fn first_value_matches_reference_hash() {
        let chain = generate_chain(&vin(VIN_A), 1).unwrap();
        assert_eq!(chain.value(1).unwrap().to_hex(), H1_A);
    }

    #[test]
    fn chain_construction_identity() {
        let chain = generate_chain(&vin(VIN_A), 3).unwrap();
        let v1 = chain.value(1).unwrap();
        let v2 = chain.value(2).unwrap();
        let v3 = chain.value(3).unwrap();
        assert_eq!(sha256(v1.as_bytes()), v2);
        assert_eq!(sha256(v2.as_bytes()), v3);
        assert_eq!(v3.to_hex(), H3_A);
    }

    #[test]
    fn one_character_vin_difference_changes_first_value() {
        let a = generate_chain(&vin(VIN_A), 1).unwrap();
        let b = generate_chain(&vin(VIN_B), 1).unwrap();
        assert_eq!(a.value(1).unwrap().to_hex(), H1_A);
        assert_eq!(b.value(1).unwrap().to_hex(), H1_B);
        assert_ne!(a.value(1).unwrap(), b.value(1).unwrap());
    }

    #[test]
    fn generate_rejects_bad_inputs() {
        assert!(matches!(generate_chain(&vin(VIN_A), 0), Err(HashChainError::BadLength(0))));
        assert!(matches!(
            generate_chain(&vin(VIN_A), MAX_CHAIN_LEN + 1),
            Err(HashChainError::BadLength(_))
        ));
        assert!(Vin::parse("SHORT").is_err());
        assert!(Vin::parse("1HGCM82633A00435I").is_err()); // I excluded
        assert!(Vin::parse("1hgcm82633a004352").is_err()); // lowercase
    }

    #[test]
    fn permissive_mode_accepts_shorter_ids() {
        assert!(Vin::parse_with("ABC12345678", VinMode::Permissive).is_ok());
        assert!(Vin::parse_with("OIQ12345678", VinMode::Permissive).is_ok());
        assert!(Vin::parse_with("ABC1234567", VinMode::Permissive).is_err()); // 10 chars
        assert!(Vin::parse("ABC12345678").is_err());
    }

    #[test]
    fn disclose_boundaries() {
        let chain = generate_chain(&vin(VIN_A), 10).unwrap();
        let d = chain.disclose(10).unwrap();
        assert_eq!(d.m, 10);
        assert_eq!(d.value, chain.value(10).unwrap());
        let base = chain.disclose(1).unwrap();
        assert_eq!(base.value.to_hex(), H1_A);
        assert!(matches!(chain.disclose(11), Err(HashChainError::MOutOfRange { m: 11, len: 10 })));
        assert!(matches!(chain.disclose(0), Err(HashChainError::MOutOfRange { m: 0, .. })));
    }

    #[test]
    fn verify_disclosure_accepts_genuine_and_rejects_tampered() {
        let v = vin(VIN_A);
        let chain = generate_chain(&v, 50).unwrap();
        let d = chain.disclose(17).unwrap();
        assert_eq!(d.value.to_hex(), H17_A);
        assert!(verify_disclosure(&d, &v));

        // one bit flipped in the value
        let mut bytes = *d.value.as_bytes();
        bytes[0] ^= 0x01;
        let flipped = ChainDisclosure { value: Digest::from_bytes(bytes), m: d.m };
        assert!(!verify_disclosure(&flipped, &v));

        // m replaced by m+1: H^18(VIN) != H^17(VIN), frozen check via H4 below
        let bumped = ChainDisclosure { value: d.value, m: d.m + 1 };
        assert!(!verify_disclosure(&bumped, &v));
        let d3 = chain.disclose(3).unwrap();
        assert_eq!(d3.value.to_hex(), H3_A);
        assert_ne!(H3_A, H4_A);
        assert!(!verify_disclosure(&ChainDisclosure { value: d3.value, m: 4 }, &v));
        assert!(verify_disclosure(&ChainDisclosure { value: Digest::from_hex(H4_A).unwrap(), m: 4 }, &v));
    }

    #[test]
    fn verify_link_within_and_across_chains() {
        let ca = generate_chain(&vin(VIN_A), 10).unwrap();
        let cb = generate_chain(&vin(VIN_B), 10).unwrap();
        let e = ca.disclose(3).unwrap();
        let l = ca.disclose(7).unwrap();
        assert_eq!(verify_link(&e, &l), Ok(true));
        assert_eq!(verify_link(&cb.disclose(3).unwrap(), &l), Ok(false));
        assert!(matches!(
            verify_link(&ca.disclose(5).unwrap(), &ca.disclose(5).unwrap()),
            Err(HashChainError::DisclosureOrder { earlier: 5, later: 5 })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_chain(&vin(VIN_A), 64).unwrap();
        let b = generate_chain(&vin(VIN_A), 64).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn disclosure_wire_format() {
        let chain = generate_chain(&vin(VIN_A), 3).unwrap();
        let d = chain.disclose(1).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, format!("{{\"value\":\"{H1_A}\",\"m\":1,\"alg\":\"sha-256\"}}"));
        let back: ChainDisclosure = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<ChainDisclosure>(
            &format!("{{\"value\":\"{H1_A}\",\"m\":1,\"alg\":\"md5\"}}")
        )
        .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const VIN_CHARS: &[u8] = b"ABCDEFGHJKLMNPRSTUVWXYZ0123456789";

        fn arb_vin() -> impl Strategy<Value = Vin> {
            proptest::collection::vec(0..VIN_CHARS.len(), 17).prop_map(|idx| {
                let text: String = idx.iter().map(|&i| VIN_CHARS[i] as char).collect();
                Vin::parse(&text).unwrap()
            })
        }

        proptest! {
            #[test]
            fn round_trip_verifies(v in arb_vin(), n in 1u64..48, m_frac in 0.0f64..1.0) {
                let m = 1 + ((n - 1) as f64 * m_frac) as u64;
                let chain = generate_chain(&v, n).unwrap();
                let d = chain.disclose(m).unwrap();
                prop_assert!(verify_disclosure(&d, &v));
            }

            #[test]
            fn tampering_rejects(v in arb_vin(), n in 2u64..48, bit in 0usize..256, bump in prop::bool::ANY) {
                let chain = generate_chain(&v, n).unwrap();
                let d = chain.disclose(n / 2 + 1).unwrap();
                let mut bytes = *d.value.as_bytes();
                bytes[bit / 8] ^= 1 << (bit % 8);
                let flipped = ChainDisclosure { value: Digest::from_bytes(bytes), m: d.m };
                prop_assert!(!verify_disclosure(&flipped, &v));
                let m2 = if bump { d.m + 1 } else { d.m.saturating_sub(1).max(1) };
                if m2 != d.m {
                    let perturbed = ChainDisclosure { value: d.value, m: m2 };
                    prop_assert!(!verify_disclosure(&perturbed, &v));
                }
            }

            #[test]
            fn cross_vin_disclosures_fail(a in arb_vin(), b in arb_vin(), m in 1u64..32) {
                prop_assume!(a != b);
                let d = generate_chain(&a, 32).unwrap().disclose(m).unwrap();
                prop_assert!(!verify_disclosure(&d, &b));
            }

            #[test]
            fn link_holds_within_chain_and_fails_across(a in arb_vin(), b in arb_vin(), e in 1u64..16, step in 1u64..16) {
                prop_assume!(a != b);
                let ca = generate_chain(&a, 32).unwrap();
                let cb = generate_chain(&b, 32).unwrap();
                let l = e + step;
                prop_assert_eq!(verify_link(&ca.disclose(e).unwrap(), &ca.disclose(l).unwrap()), Ok(true));
                prop_assert_eq!(verify_link(&cb.disclose(e).unwrap(), &ca.disclose(l).unwrap()), Ok(false));
            }
        }
    }
}
