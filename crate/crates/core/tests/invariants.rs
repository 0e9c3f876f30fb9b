mod common;

use common::props::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn alpha_is_immutable_holds(seed in any::<u64>()) {
        alpha_is_immutable(seed)?;
    }

    #[test]
    fn dead_voxels_stay_silent_holds(seed in any::<u64>()) {
        dead_voxels_stay_silent(seed)?;
    }

    #[test]
    fn single_step_changes_are_bounded_holds(seed in any::<u64>()) {
        single_step_changes_are_bounded(seed)?;
    }

    #[test]
    fn zero_final_layer_is_identity_holds(seed in any::<u64>()) {
        zero_final_layer_is_identity(seed)?;
    }

    #[test]
    fn influence_travels_one_voxel_per_step_holds(seed in any::<u64>()) {
        influence_travels_one_voxel_per_step(seed)?;
    }

    #[test]
    fn off_cross_taps_stay_zero_holds(seed in any::<u64>()) {
        off_cross_taps_stay_zero(seed)?;
    }

    #[test]
    fn recovery_only_grows_holds(seed in any::<u64>()) {
        recovery_only_grows(seed)?;
    }
}
