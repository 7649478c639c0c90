mod support {
    pub mod invariants;
}

use proptest::prelude::*;
use support::invariants;

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn leaves_tile_the_space(seed in any::<u64>()) {
        invariants::tiling(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn frontier_is_complete(seed in any::<u64>()) {
        invariants::frontier(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn updated_index_matches_rebuilt(seed in any::<u64>()) {
        invariants::index_equivalence(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn rebuilds_lose_no_events(seed in any::<u64>()) {
        invariants::event_loss(seed).map_err(TestCaseError::fail)?;
    }
}
