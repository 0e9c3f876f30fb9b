//! Masked cross-entropy, backpropagation through the rollout, Adam with
//! global-norm clipping, and the classification train/evaluate loops.

mod adam;
pub mod checkpoint;
mod grad;

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamState, Trainable};
pub use grad::{backward, cross_entropy_rows, record, record_with, Backward, Gradients, Injection, Trace};

use crate::engine::{advance_with, inject, CellNet, CellSet, EngineError, NcaParams, StateVolume};
use crate::voxel::{Dataset, VoxelGrid, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("grid has no occupied voxels")]
    EmptyGrid,
    #[error("label {0} out of range")]
    BadLabel(usize),
    #[error("shape {0} has no label")]
    Unlabeled(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("gradient and parameter shapes differ")]
    ShapeMismatch,
    #[error("non-finite update at step {step} (cell {cell})")]
    NonFinite { step: usize, cell: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Global-norm bound applied before every optimizer step.
    pub clip: f64,
    /// Passes over the shuffled dataset.
    pub iterations: usize,
    pub batch_size: usize,
    /// Inclusive range the per-batch rollout length is drawn from.
    pub step_range: (usize, usize),
    pub rng_seed: u64,
    /// Evaluate every this many iterations (0 disables).
    pub eval_every: usize,
    pub firing_rate: f32,
    /// Rollout length and firing rate used by periodic evaluation.
    pub eval_steps: usize,
    pub eval_firing_rate: f32,
    /// Stop once periodic evaluation reaches this overall accuracy.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            clip: 1.0,
            iterations: 4000,
            batch_size: 8,
            step_range: (60, 120),
            rng_seed: 0,
            eval_every: 0,
            firing_rate: 0.5,
            eval_steps: 60,
            eval_firing_rate: 1.0,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip {} must be positive", self.clip));
        }
        let (lo, hi) = self.step_range;
        if lo < 1 || hi > 1000 || lo > hi {
            return bad(format!("step_range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= 1000"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.firing_rate > 0.0 && self.firing_rate <= 1.0) {
            return bad(format!("firing_rate {} not in (0, 1]", self.firing_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Fraction of active voxels classified correctly at the end of the rollouts.
    pub accuracy: f64,
    pub wall_ms: u64,
}

pub fn write_records_csv(path: &Path, records: &[TrainRecord]) -> Result<(), TrainError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "iteration,loss,accuracy,ms")?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.iteration, r.loss, r.accuracy, r.wall_ms)?;
    }
    Ok(())
}

/// Mean over occupied voxels of `-log softmax(logits)[label]`.
pub fn masked_cross_entropy(state: &StateVolume, label: usize, grid: &VoxelGrid) -> Result<f64, TrainError> {
    if label >= NUM_CLASSES {
        return Err(TrainError::BadLabel(label));
    }
    let rows: Vec<u32> = grid.occupied_indices().map(|i| i as u32).collect();
    if rows.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let labels = vec![label; rows.len()];
    Ok(cross_entropy_rows(state.matrix().view(), &rows, &labels).0)
}

/// Cells of several shapes stacked into one state matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    pub cells: CellSet,
    pub initial: Array2<f32>,
    pub labels: Vec<usize>,
    /// Index of the owning shape for every cell.
    pub owner: Vec<usize>,
}

impl Batch {
    /// `labels[i]` holds one label per occupied voxel of `grids[i]`, in voxel order.
    pub fn new(grids: &[&VoxelGrid], labels: Vec<Vec<usize>>, seeds: &[u64], channels: usize) -> Self {
        let mut parts = Vec::with_capacity(grids.len());
        let mut owner = Vec::new();
        for (i, (g, &seed)) in grids.iter().zip(seeds).enumerate() {
            let (set, voxels) = CellSet::compact(g, seed);
            owner.extend(std::iter::repeat_n(i, voxels.len()));
            parts.push(set);
        }
        let cells = CellSet::concat(&parts);
        let mut initial = Array2::zeros((cells.len(), channels));
        initial.column_mut(0).fill(1.0);
        Self {
            cells,
            initial,
            labels: labels.into_iter().flatten().collect(),
            owner,
        }
    }

    pub fn classification(grids: &[&VoxelGrid], labels: &[usize], seeds: &[u64]) -> Self {
        let per_cell = grids
            .iter()
            .zip(labels)
            .map(|(g, &l)| vec![l; g.occupied_count()])
            .collect();
        Self::new(grids, per_cell, seeds, crate::engine::STATE_CHANNELS)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Loss, correct-cell count and full gradient for one batch.
pub struct BatchGradient {
    pub loss: f64,
    pub correct: usize,
    pub backward: Backward,
    pub trace: Trace,
}

pub fn batch_gradient(
    params: &NcaParams,
    batch: &Batch,
    steps: usize,
    firing_rate: f32,
    injection: Option<Injection>,
    feature_bias: Option<Array2<f32>>,
) -> Result<BatchGradient, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let trace = record_with(
        params,
        batch.cells.clone(),
        batch.initial.clone(),
        steps,
        firing_rate,
        injection,
        feature_bias,
    )
        .map_err(|(step, cell)| TrainError::NonFinite { step, cell })?;
    let (loss, correct, d_final) =
        cross_entropy_rows(trace.final_state().view(), &batch.cells.rows, &batch.labels);
    let backward = backward(params, &trace, d_final);
    Ok(BatchGradient {
        loss,
        correct,
        backward,
        trace,
    })
}

/// Loss and exact gradient for a single shape rolled out `steps` times with
/// the firing stream keyed by `seed`.
pub fn loss_and_gradient(
    params: &NcaParams,
    grid: &VoxelGrid,
    label: usize,
    steps: usize,
    firing_rate: f32,
    seed: u64,
) -> Result<(f64, Gradients), TrainError> {
    if label >= NUM_CLASSES {
        return Err(TrainError::BadLabel(label));
    }
    let batch = Batch::classification(&[grid], &[label], &[seed]);
    let out = batch_gradient(params, &batch, steps, firing_rate, None, None)?;
    Ok((out.loss, out.backward.params))
}

/// Final compact state of a rollout without retaining intermediates.
pub fn run_cells(
    params: &NcaParams,
    cells: &CellSet,
    initial: Array2<f32>,
    steps: usize,
    firing_rate: f32,
    injection: Option<&Injection>,
    feature_bias: Option<ArrayView2<'_, f32>>,
) -> Result<Array2<f32>, TrainError> {
    let net = CellNet::new(params);
    let mut state = initial;
    for t in 0..steps {
        let mut adv = advance_with(state.view(), cells, &net, t as u64, firing_rate, feature_bias)
            .map_err(|cell| TrainError::NonFinite { step: t, cell })?;
        if let Some(inj) = injection {
            inject(&mut adv.next, cells, inj.channels.clone(), inj.per_cell.view());
        }
        state = adv.next;
    }
    Ok(state)
}

/// Progress notifications from [`train_with`].
pub enum TrainEvent<'a> {
    Iteration(&'a TrainRecord),
    Evaluation { iteration: usize, report: &'a EvalReport },
}

fn shape_labels(dataset: &Dataset) -> Result<Vec<usize>, TrainError> {
    dataset
        .shapes
        .iter()
        .map(|s| s.label.ok_or_else(|| TrainError::Unlabeled(s.name.clone())))
        .collect()
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(NcaParams, Vec<TrainRecord>), TrainError> {
    train_with(dataset, config, |_| {})
}

/// Trains from fresh parameters drawn from `config.rng_seed`.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut observe: impl FnMut(TrainEvent<'_>),
) -> Result<(NcaParams, Vec<TrainRecord>), TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let labels = shape_labels(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut params = NcaParams::classifier(&mut rng);
    let mut adam = AdamState::for_params(&mut params);
    let mut records = Vec::with_capacity(config.iterations);
    let started = Instant::now();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for iteration in 0..config.iterations {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut cells) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let steps = rng.random_range(config.step_range.0..=config.step_range.1);
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let grids: Vec<&VoxelGrid> = chunk.iter().map(|&i| &dataset.shapes[i].grid).collect();
            let chunk_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch::classification(&grids, &chunk_labels, &seeds);
            let out = batch_gradient(&params, &batch, steps, config.firing_rate, None, None)?;
            let mut grads = out.backward.params.tensors;
            adam_step(&mut params, &mut grads, &mut adam, config.learning_rate, config.clip)?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
            cells += batch.len();
        }
        let record = TrainRecord {
            iteration,
            loss: loss_sum / cells as f64,
            accuracy: correct as f64 / cells as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        observe(TrainEvent::Iteration(&record));
        records.push(record);

        if config.eval_every > 0 && (iteration + 1) % config.eval_every == 0 {
            let report = evaluate(
                dataset,
                &params,
                config.eval_steps,
                1,
                config.eval_firing_rate,
                config.rng_seed,
            )?;
            observe(TrainEvent::Evaluation {
                iteration,
                report: &report,
            });
            if config.target_accuracy.is_some_and(|t| report.overall >= t) {
                break;
            }
        }
    }
    Ok((params, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy per class, `None` for classes absent from the dataset.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub overall: f64,
    /// Active voxels per class summed over trials.
    pub voxels: [usize; NUM_CLASSES],
}

/// Fraction of active voxels whose final prediction matches the label,
/// pooled per class and overall across `trials` rollouts.
pub fn evaluate(
    dataset: &Dataset,
    params: &NcaParams,
    steps: usize,
    trials: usize,
    firing_rate: f32,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    let labels = shape_labels(dataset)?;
    let jobs: Vec<(usize, usize)> = (0..dataset.len())
        .flat_map(|s| (0..trials.max(1)).map(move |t| (s, t)))
        .collect();
    let results: Vec<Result<(usize, usize, usize), TrainError>> = jobs
        .par_iter()
        .map(|&(s, t)| {
            let grid = &dataset.shapes[s].grid;
            let fire_seed = crate::rng::hash_key(&[seed, s as u64, t as u64]);
            let batch = Batch::classification(&[grid], &[labels[s]], &[fire_seed]);
            let out = run_cells(params, &batch.cells, batch.initial.clone(), steps, firing_rate, None, None)?;
            let (_, correct, _) = cross_entropy_rows(out.view(), &batch.cells.rows, &batch.labels);
            Ok((labels[s], correct, batch.len()))
        })
        .collect();
    let mut hits = [0usize; NUM_CLASSES];
    let mut voxels = [0usize; NUM_CLASSES];
    for r in results {
        let (label, correct, total) = r?;
        hits[label] += correct;
        voxels[label] += total;
    }
    let total: usize = voxels.iter().sum();
    let per_class = std::array::from_fn(|c| (voxels[c] > 0).then(|| hits[c] as f64 / voxels[c] as f64));
    Ok(EvalReport {
        per_class,
        overall: hits.iter().sum::<usize>() as f64 / total.max(1) as f64,
        voxels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{init_state, rollout, EngineConfig, LOGIT_OFFSET};
    use crate::voxel::ShapeInstance;

    #[test]
    fn zero_logits_give_ln7() {
        let grid = VoxelGrid::solid([2, 2, 1]).unwrap();
        let s = init_state(&grid);
        for label in 0..NUM_CLASSES {
            let l = masked_cross_entropy(&s, label, &grid).unwrap();
            assert!((l - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_logits_and_shift_invariance() {
        let grid = VoxelGrid::solid([3, 1, 1]).unwrap();
        let mut s = init_state(&grid);
        for v in 0..3 {
            s.matrix_mut()[[v, LOGIT_OFFSET + 5]] = 10.0;
        }
        let l = masked_cross_entropy(&s, 5, &grid).unwrap();
        // 6 e^-10 / (1 + 6 e^-10) to first order.
        assert!(l < 0.01 && (l - (1.0 + 6.0 * (-10f64).exp()).ln()).abs() < 1e-9);
        let mut shifted = s.clone();
        for v in 0..3 {
            for c in LOGIT_OFFSET..LOGIT_OFFSET + 7 {
                shifted.matrix_mut()[[v, c]] += 3.25;
            }
        }
        let l2 = masked_cross_entropy(&shifted, 5, &grid).unwrap();
        assert!((l - l2).abs() < 1e-9);
    }

    #[test]
    fn loss_errors() {
        let empty = VoxelGrid::new([2, 1, 1]).unwrap();
        let s = init_state(&empty);
        assert!(matches!(masked_cross_entropy(&s, 0, &empty), Err(TrainError::EmptyGrid)));
        assert!(matches!(masked_cross_entropy(&s, 7, &empty), Err(TrainError::BadLabel(7))));
    }

    #[test]
    fn masked_taps_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = NcaParams::classifier(&mut rng);
        p.layer2.mapv_inplace(|_| rng.random_range(-0.05..0.05));
        let grid = VoxelGrid::solid([2, 2, 2]).unwrap();
        let (_, g) = loss_and_gradient(&p, &grid, 2, 4, 1.0, 0).unwrap();
        let c = p.channels();
        let w = p.width();
        for tap in 0..27 {
            let block = &g.tensors[Gradients::KERNEL][tap * c * w..(tap + 1) * c * w];
            if p.mask().is_active(tap) {
                assert!(block.iter().any(|&v| v != 0.0));
            } else {
                assert!(block.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_final_layer_gradient_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = NcaParams::classifier(&mut rng);
        let grid = VoxelGrid::solid([3, 2, 1]).unwrap();
        let (loss, g) = loss_and_gradient(&p, &grid, 4, 5, 1.0, 0).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-9);
        assert!(g.tensors[Gradients::LAYER2].iter().any(|&v| v != 0.0));
        assert!(g.tensors[Gradients::LAYER2_BIAS].iter().any(|&v| v != 0.0));
        for t in [Gradients::KERNEL, Gradients::PERCEPTION_BIAS, Gradients::LAYER1, Gradients::LAYER1_BIAS] {
            assert!(g.tensors[t].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn compact_run_matches_grid_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = NcaParams::classifier(&mut rng);
        p.layer2.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        let grid = VoxelGrid::from_fn([4, 3, 2], |x, y, z| x == 0 || y + z == 1).unwrap();
        let cfg = EngineConfig {
            firing_rate: 0.5,
            steps: 9,
            rng_seed: 42,
            ..EngineConfig::default()
        };
        let dense = rollout(&grid, &p, &cfg, false).unwrap().state;
        let batch = Batch::classification(&[&grid], &[0], &[42]);
        let compact = run_cells(&p, &batch.cells, batch.initial.clone(), 9, 0.5, None, None).unwrap();
        for (r, v) in grid.occupied_indices().enumerate() {
            for c in 0..28 {
                assert_eq!(compact[[r, c]], dense.matrix()[[v, c]]);
            }
        }
    }

    fn toy_dataset() -> Dataset {
        Dataset {
            shapes: vec![ShapeInstance::new(VoxelGrid::solid([2, 1, 1]).unwrap(), Some(3), "bar").unwrap()],
        }
    }

    #[test]
    fn training_is_deterministic_and_learns_toy() {
        let cfg = TrainConfig {
            iterations: 200,
            rng_seed: 5,
            ..TrainConfig::default()
        };
        let (p1, r1) = train(&toy_dataset(), &cfg).unwrap();
        let (p2, r2) = train(&toy_dataset(), &cfg).unwrap();
        assert_eq!(p1, p2);
        let strip = |r: &[TrainRecord]| r.iter().map(|x| (x.iteration, x.loss, x.accuracy)).collect::<Vec<_>>();
        assert_eq!(strip(&r1), strip(&r2));
        assert!(r1.last().unwrap().loss < 7f64.ln() / 10.0, "final loss {}", r1.last().unwrap().loss);
        assert!(p1.is_mask_consistent());
    }

    #[test]
    fn untrained_eval_is_class_zero_fraction() {
        let ds = Dataset::procedural(&[0, 3, 5], 2, 1, [8, 8, 8]).unwrap();
        let p = NcaParams::classifier(&mut ChaCha8Rng::seed_from_u64(0));
        let rep = evaluate(&ds, &p, 10, 2, 1.0, 0).unwrap();
        let planes = ds.shapes.iter().filter(|s| s.label == Some(0)).map(|s| s.grid.occupied_count()).sum::<usize>();
        let all = ds.shapes.iter().map(|s| s.grid.occupied_count()).sum::<usize>();
        assert!((rep.overall - planes as f64 / all as f64).abs() < 1e-12);
        assert_eq!(rep.per_class[0], Some(1.0));
        assert_eq!(rep.per_class[3], Some(0.0));
        assert_eq!(rep.per_class[1], None);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.step_range = (0, 5);
        assert!(c.validate().is_err());
        c.step_range = (5, 1001);
        assert!(c.validate().is_err());
        c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
