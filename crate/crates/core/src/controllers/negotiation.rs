use rand::RngCore;
use thiserror::Error;

use crate::messages::{AppProtocol, SessionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no offered protocol is supported")]
pub struct FailedNoNegotiation;

/// An offer matches a supported entry with the same namespace and major
/// version when its minor version is at least the supported one.
pub fn offer_matches(offer: &AppProtocol, supported: &AppProtocol) -> bool {
    offer.namespace == supported.namespace
        && offer.version_major == supported.version_major
        && offer.version_minor >= supported.version_minor
}

/// Schema id of the highest-priority (lowest number) matching offer.
pub fn negotiate_protocol(
    offers: &[AppProtocol],
    supported: &[AppProtocol],
) -> Result<u8, FailedNoNegotiation> {
    offers
        .iter()
        .filter(|o| supported.iter().any(|s| offer_matches(o, s)))
        .min_by_key(|o| o.priority)
        .map(|o| o.schema_id)
        .ok_or(FailedNoNegotiation)
}

/// The requested id when present and non-zero, otherwise a fresh non-zero
/// one from `rng`.
pub fn assign_session_id<R: RngCore>(requested: Option<SessionId>, rng: &mut R) -> SessionId {
    if let Some(id) = requested.filter(|id| !id.is_zero()) {
        return id;
    }
    loop {
        let id = SessionId::from_u64(rng.next_u64());
        if !id.is_zero() {
            return id;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn proto(ns: &str, major: u32, minor: u32, id: u8, prio: u8) -> AppProtocol {
        AppProtocol {
            namespace: ns.into(),
            version_major: major,
            version_minor: minor,
            schema_id: id,
            priority: prio,
        }
    }

    #[test]
    fn single_match() {
        let supported = [proto("ns", 2, 0, 9, 1)];
        assert_eq!(
            negotiate_protocol(&[proto("ns", 2, 0, 1, 1)], &supported),
            Ok(1)
        );
        assert_eq!(
            negotiate_protocol(&[proto("ns", 0, 0, 1, 1)], &supported),
            Err(FailedNoNegotiation)
        );
        assert_eq!(
            negotiate_protocol(&[proto("other", 2, 0, 1, 1)], &supported),
            Err(FailedNoNegotiation)
        );
    }

    #[test]
    fn priority_one_wins_in_either_order() {
        let supported = [proto("ns", 2, 0, 9, 1)];
        let a = proto("ns", 2, 0, 10, 2);
        let b = proto("ns", 2, 1, 11, 1);
        assert_eq!(
            negotiate_protocol(&[a.clone(), b.clone()], &supported),
            Ok(11)
        );
        assert_eq!(negotiate_protocol(&[b, a], &supported), Ok(11));
    }

    #[test]
    fn minor_must_reach_supported_minimum() {
        let supported = [proto("ns", 2, 3, 9, 1)];
        assert!(negotiate_protocol(&[proto("ns", 2, 2, 1, 1)], &supported).is_err());
        assert_eq!(
            negotiate_protocol(&[proto("ns", 2, 4, 1, 1)], &supported),
            Ok(1)
        );
    }

    #[test]
    fn session_ids() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let req = SessionId::from_u64(0x0011_2233_4455_6677);
        assert_eq!(assign_session_id(Some(req), &mut rng), req);
        let a = assign_session_id(None, &mut ChaCha20Rng::seed_from_u64(42));
        let b = assign_session_id(None, &mut ChaCha20Rng::seed_from_u64(42));
        assert_eq!(a, b);
        assert!(!assign_session_id(Some(SessionId::ZERO), &mut rng).is_zero());
    }

    /// An rng that yields zero first must still not produce the reserved id.
    #[test]
    fn zero_draw_is_skipped() {
        struct Seq(Vec<u64>);
        impl rand::RngCore for Seq {
            fn next_u32(&mut self) -> u32 {
                self.next_u64() as u32
            }
            fn next_u64(&mut self) -> u64 {
                self.0.remove(0)
            }
            fn fill_bytes(&mut self, dest: &mut [u8]) {
                dest.fill(0)
            }
            fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
                dest.fill(0);
                Ok(())
            }
        }
        assert_eq!(
            assign_session_id(None, &mut Seq(vec![0, 7])),
            SessionId::from_u64(7)
        );
    }

    proptest! {
        #[test]
        fn never_zero(seed in any::<u64>()) {
            prop_assert!(!assign_session_id(None, &mut ChaCha20Rng::seed_from_u64(seed)).is_zero());
        }
    }
}
