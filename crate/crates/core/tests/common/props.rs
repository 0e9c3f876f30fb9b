//! Property bodies shared by the proptest suite and the acceptance runner.

use super::*;
use morphobricks::damage::{recover, seed_cells, DamageError, DamageLabel, Detector};
use morphobricks::engine::{init_state, rollout, rollout_from, EngineConfig, NcaParams, StateVolume, CROSS_TAP_INDICES};
use morphobricks::training::{adam_step, checkpoint, AdamState};
use morphobricks::voxel::VoxelGrid;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random shape ≤ 4³, parameters with a final layer of random scale, a
/// rollout length and an engine configuration.
fn instance(seed: u64) -> (VoxelGrid, NcaParams, EngineConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = rng.random_range(0.2..0.9);
    let grid = random_grid(&mut rng, 4, density);
    let mut p = NcaParams::init(28, 84, &mut rng);
    let s = rng.random_range(0.0..2.0f32) / 84f32.sqrt();
    p.layer2.mapv_inplace(|_| rng.random_range(-s..=s));
    p.layer2_bias.mapv_inplace(|_| rng.random_range(-s..=s));
    let config = EngineConfig {
        firing_rate: if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.1..1.0) },
        steps: rng.random_range(1..=8),
        rng_seed: rng.random(),
        ..EngineConfig::default()
    };
    (grid, p, config)
}

fn trace(grid: &VoxelGrid, p: &NcaParams, config: &EngineConfig) -> Vec<StateVolume> {
    rollout(grid, p, config, true).unwrap().trace.unwrap()
}

pub fn alpha_is_immutable(seed: u64) -> Result<(), TestCaseError> {
    let (grid, p, config) = instance(seed);
    let initial = init_state(&grid);
    for s in trace(&grid, &p, &config) {
        prop_assert_eq!(s.matrix().column(0), initial.matrix().column(0));
    }
    Ok(())
}

pub fn dead_voxels_stay_silent(seed: u64) -> Result<(), TestCaseError> {
    let (grid, p, config) = instance(seed);
    for s in trace(&grid, &p, &config) {
        for v in (0..grid.len()).filter(|&v| !grid.is_occupied(v)) {
            prop_assert!(s.voxel(v).iter().all(|&x| x == 0.0));
        }
    }
    Ok(())
}

pub fn single_step_changes_are_bounded(seed: u64) -> Result<(), TestCaseError> {
    let (grid, p, config) = instance(seed);
    let t = trace(&grid, &p, &config);
    for w in t.windows(2) {
        let d = w[1].matrix() - w[0].matrix();
        prop_assert!(d.iter().all(|x| x.abs() < 1.0), "max change {}", d.iter().fold(0.0f32, |m, x| m.max(x.abs())));
    }
    Ok(())
}

pub fn zero_final_layer_is_identity(seed: u64) -> Result<(), TestCaseError> {
    let (grid, mut p, config) = instance(seed);
    p.layer2.fill(0.0);
    p.layer2_bias.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut initial = init_state(&grid);
    for v in grid.occupied_indices() {
        for c in 1..28 {
            initial.matrix_mut()[[v, c]] = rng.random_range(-3.0..3.0);
        }
    }
    let out = rollout_from(initial.clone(), &p, &config, false).unwrap();
    prop_assert_eq!(out.state, initial);
    Ok(())
}

pub fn influence_travels_one_voxel_per_step(seed: u64) -> Result<(), TestCaseError> {
    let (grid, p, config) = instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let origin = grid.occupied_indices().nth(rng.random_range(0..grid.occupied_count())).unwrap();
    let base = init_state(&grid);
    let mut poked = base.clone();
    for c in 1..28 {
        poked.matrix_mut()[[origin, c]] = rng.random_range(-1.0..1.0);
    }
    let a = rollout_from(base, &p, &config, true).unwrap().trace.unwrap();
    let b = rollout_from(poked, &p, &config, true).unwrap().trace.unwrap();
    let o = grid.coords(origin);
    for (step, (sa, sb)) in a.iter().zip(&b).enumerate() {
        for v in 0..grid.len() {
            let q = grid.coords(v);
            let dist: usize = (0..3).map(|k| o[k].abs_diff(q[k])).sum();
            if dist > step {
                prop_assert_eq!(sa.voxel(v), sb.voxel(v), "voxel {} at distance {} changed by step {}", v, dist, step);
            }
        }
    }
    Ok(())
}

pub fn off_cross_taps_stay_zero(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, w) = (rng.random_range(2..=6), rng.random_range(1..=6));
    let mut p = NcaParams::init(c, w, &mut rng);
    let mut adam = AdamState::for_params(&mut p);
    let dir = tempfile::tempdir().unwrap();
    for _ in 0..rng.random_range(1..=6) {
        match rng.random_range(0..3) {
            0 => {
                let mut g: Vec<Vec<f64>> = p.tensors().iter().map(|(_, _, d)| d.iter().map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
                adam_step(&mut p, &mut g, &mut adam, rng.random_range(1e-4..1e-1), rng.random_range(0.1..10.0)).unwrap();
            }
            1 => {
                let path = dir.path().join("p.ncap");
                checkpoint::save_params(&path, &p).unwrap();
                p = NcaParams::from_tensors(&checkpoint::load(&path).unwrap()).unwrap();
            }
            _ => {
                for x in p.kernel.iter_mut() {
                    *x += rng.random_range(-1.0..1.0);
                }
                p.apply_mask();
            }
        }
        prop_assert!(p.is_mask_consistent());
    }
    for tap in (0..27).filter(|t| !CROSS_TAP_INDICES.contains(t)) {
        prop_assert!(p.kernel.rows().into_iter().skip(tap * c).take(c).all(|r| r.iter().all(|&x| x == 0.0)));
    }
    Ok(())
}

pub fn recovery_only_grows(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6)];
    let n = rng.random_range(1..=dims[0] * dims[1] * dims[2]);
    let target = random_connected(&mut rng, dims, n);
    let seed_grid = seed_cells(&target, rng.random_range(1..=4));
    let mut detector = RandomDetector(ChaCha8Rng::seed_from_u64(seed ^ 3), rng.random_range(0.0..1.0));
    let max = rng.random_range(1..=12);
    let out = recover(&target, &seed_grid, &mut detector, max).unwrap();
    prop_assert!(seed_grid.is_subset_of(&out.grid));
    prop_assert!(out.iterations <= max && out.sizes.len() == out.iterations);
    let mut last = seed_grid.occupied_count();
    for &s in &out.sizes {
        prop_assert!(s >= last);
        last = s;
    }
    prop_assert_eq!(last, out.grid.occupied_count());
    prop_assert_eq!(out.grid.dims(), target.dims());
    Ok(())
}

/// Predicts a uniformly random direction for each cell with probability `.1`,
/// otherwise no damage.
struct RandomDetector(ChaCha8Rng, f64);

impl Detector for RandomDetector {
    fn detect(&mut self, current: &VoxelGrid, _: &VoxelGrid, _: usize) -> Result<Vec<DamageLabel>, DamageError> {
        Ok(current
            .occupied_indices()
            .map(|_| {
                if self.0.random_bool(self.1) {
                    DamageLabel::ALL[self.0.random_range(1..7)]
                } else {
                    DamageLabel::NoDamage
                }
            })
            .collect())
    }
}

pub type Property = fn(u64) -> Result<(), TestCaseError>;

pub const PROPERTIES: [(&str, Property); 7] = [
    ("alpha immutability", alpha_is_immutable),
    ("dead-voxel silence", dead_voxels_stay_silent),
    ("tanh boundedness", single_step_changes_are_bounded),
    ("zero-init identity", zero_final_layer_is_identity),
    ("information speed", influence_travels_one_voxel_per_step),
    ("mask persistence", off_cross_taps_stay_zero),
    ("recovery monotonicity", recovery_only_grows),
];
