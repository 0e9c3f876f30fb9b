mod common;

use morphobricks::damage::*;
use morphobricks::training::{adam_step, AdamState};
use morphobricks::voxel::VoxelGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bar() -> VoxelGrid {
    VoxelGrid::solid([3, 1, 1]).unwrap()
}

fn sample(target: &VoxelGrid, keep: &[usize]) -> DamageSample {
    let mut damaged = VoxelGrid::new(target.dims()).unwrap();
    keep.iter().for_each(|&v| damaged.set_index(v, true));
    DamageSample {
        target: 0,
        labels: label_damage(target, &damaged).unwrap(),
        damaged,
    }
}

fn train_on(targets: &[VoxelGrid], samples: &[DamageSample], epochs: usize, seed: u64) -> (DamageNcaParams, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = DamageNcaParams::init(8, 32, 1, Conditioning::HiddenEveryStep, &mut rng);
    let mut adam = AdamState::for_params(&mut params);
    let refs: Vec<&DamageSample> = samples.iter().collect();
    let held: Vec<DamageSample> = samples.iter().cycle().take(120).cloned().collect();
    for epoch in 1..=epochs {
        let steps = rng.random_range(12..=20);
        let seeds: Vec<u64> = (0..refs.len()).map(|_| rng.random()).collect();
        let (_, _, _, mut g) = damage_gradient(&params, targets, &refs, &seeds, steps, 0.5).unwrap();
        adam_step(&mut params, &mut g, &mut adam, 1e-3, 1.0).unwrap();
        let perfect = |steps| detection_report(&params, targets, &held, steps, 0.5, epoch as u64).unwrap().accuracy == 1.0;
        if epoch % 100 == 0 && (12..=20).all(perfect) {
            return (params, epoch);
        }
    }
    (params, epochs)
}

#[test]
fn bar_with_end_damage_is_learned() {
    let targets = vec![bar()];
    // One or two voxels removed from the +X end.
    let samples = vec![sample(&targets[0], &[0, 1]), sample(&targets[0], &[0])];
    let (params, epochs) = train_on(&targets, &samples, 500, 40);
    let held: Vec<DamageSample> = samples.iter().cycle().take(200).cloned().collect();
    let report = detection_report(&params, &targets, &held, 12, 0.5, 1).unwrap();
    assert!(report.accuracy > 0.95, "accuracy {} after {epochs} epochs", report.accuracy);
}

#[test]
fn bar_regrows_from_its_centre_cell() {
    let targets = vec![bar()];
    let seed = seed_cells(&targets[0], 1);
    assert_eq!(seed.occupied_indices().collect::<Vec<_>>(), vec![1]);
    let chain = recover(&targets[0], &seed, &mut OracleDetector, 10).unwrap();
    assert_eq!(chain.sizes, vec![2, 3, 3]);
    let samples = vec![sample(&targets[0], &[1]), sample(&targets[0], &[0, 1]), sample(&targets[0], &[0, 1, 2])];
    let (params, _) = train_on(&targets, &samples, 1000, 41);
    for s in 0..20 {
        let rc = RecoveryConfig {
            step_range: (12, 20),
            seed: s,
            ..RecoveryConfig::default()
        };
        let out = recover(&targets[0], &seed, &mut NcaDetector::new(&params, &rc), 10).unwrap();
        assert_eq!(out.grid, targets[0], "seed {s}: {:?}", out.sizes);
        assert!(out.converged);
    }
}

#[test]
fn oracle_detector_regrows_desk_shapes_exactly() {
    let ds = morphobricks::voxel::Dataset::procedural(&[0, 3], 5, 0, [12, 12, 12]).unwrap();
    for s in &ds.shapes {
        let seed = seed_cells(&s.grid, 3);
        let out = recover(&s.grid, &seed, &mut OracleDetector, 100).unwrap();
        assert!(out.converged);
        assert_eq!(out.grid, s.grid, "{}", s.name);
        assert_eq!(recovery_accuracy(&out.grid, &s.grid).iou, 1.0);
    }
}

#[test]
fn detector_null_class_matches_undamaged_rollout() {
    let targets = vec![bar()];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let params = DamageNcaParams::init(4, 16, 1, Conditioning::HiddenEveryStep, &mut rng);
    let intact = vec![sample(&targets[0], &[0, 1, 2]); 3];
    let report = detection_report(&params, &targets, &intact, 10, 0.5, 3).unwrap();
    let mut none = 0;
    for (i, s) in intact.iter().enumerate() {
        let fire = morphobricks::rng::hash_key(&[3, i as u64]);
        let r = damage_rollout(&s.damaged, &targets[0], &params, 10, 0.5, fire).unwrap();
        none += r.predictions.iter().filter(|&&p| p == DamageLabel::NoDamage).count();
    }
    assert_eq!(report.per_label[0].unwrap(), none as f64 / 9.0);
    assert_eq!(report.accuracy, report.per_label[0].unwrap());
}

