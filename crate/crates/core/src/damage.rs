//! Shape-conditioned damage detection and grow-from-seed recovery.
//!
//! A small strided convolutional encoder turns the intended shape into a
//! vector that conditions an NCA whose last seven channels predict, per
//! cell, whether and on which face a neighbour is missing.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

use crate::engine::{argmax, NcaParams, FEATURE_CHANNELS};
use crate::training::{
    adam_step, batch_gradient, run_cells, AdamState, Batch, Injection, TrainError, TrainRecord,
    Trainable,
};
use crate::voxel::{Face, VoxelGrid, MAX_CLASSIFY_DIM};

pub const DAMAGE_LABELS: usize = 7;
/// Side of the encoder's input volume and of its pooled output.
pub const ENCODER_INPUT: usize = MAX_CLASSIFY_DIM;
pub const ENCODER_OUTPUT: usize = 5;
const ENCODER_STRIDE: usize = ENCODER_INPUT / ENCODER_OUTPUT;
const ENCODER_BLOCKS: usize = ENCODER_OUTPUT * ENCODER_OUTPUT * ENCODER_OUTPUT;
const ENCODER_TAPS: usize = ENCODER_STRIDE * ENCODER_STRIDE * ENCODER_STRIDE;

#[derive(Debug, Error)]
pub enum DamageError {
    #[error("damage region does not intersect the grid volume")]
    Miss,
    #[error("damage removes every voxel")]
    RemovesAll,
    #[error("damaged grid is not a subset of the original")]
    NotSubset,
    #[error("could not sample a damage that removes some but not all voxels")]
    Unsampleable,
    #[error("target {0:?} exceeds the encoder volume")]
    TooLarge([usize; 3]),
    #[error("invalid damage specification: {0}")]
    Spec(String),
    #[error("checkpoint does not describe a damage model: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DamageLabel {
    NoDamage,
    NegX,
    PosX,
    NegY,
    PosY,
    NegZ,
    PosZ,
}

impl DamageLabel {
    pub const ALL: [DamageLabel; DAMAGE_LABELS] = [
        DamageLabel::NoDamage,
        DamageLabel::NegX,
        DamageLabel::PosX,
        DamageLabel::NegY,
        DamageLabel::PosY,
        DamageLabel::NegZ,
        DamageLabel::PosZ,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_face(face: Face) -> Self {
        Self::ALL[face.index() + 1]
    }

    pub fn face(self) -> Option<Face> {
        (self != DamageLabel::NoDamage).then(|| Face::from_index(self.index() - 1).expect("six faces"))
    }

    pub fn name(self) -> &'static str {
        ["none", "-x", "+x", "-y", "+y", "-z", "+z"][self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DamageSpec {
    /// Removes sites within Euclidean distance `radius` of `center`.
    Sphere { center: [f64; 3], radius: f64 },
    /// Removes sites inside the closed box `min..=max`.
    Box { min: [i64; 3], max: [i64; 3] },
}

impl DamageSpec {
    pub fn validate(&self) -> Result<(), DamageError> {
        match *self {
            DamageSpec::Sphere { radius, center } => {
                if !(radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(DamageError::Spec(format!("sphere radius {radius} must be positive")));
                }
            }
            DamageSpec::Box { min, max } => {
                if (0..3).any(|a| min[a] > max[a]) {
                    return Err(DamageError::Spec(format!("box corners {min:?} {max:?} not ordered")));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        match *self {
            DamageSpec::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|a| (p[a] as f64 - center[a]).powi(2)).sum();
                d2 <= radius * radius
            }
            DamageSpec::Box { min, max } => (0..3).all(|a| min[a] <= p[a] as i64 && p[a] as i64 <= max[a]),
        }
    }

    fn intersects_volume(&self, dims: [usize; 3]) -> bool {
        match *self {
            DamageSpec::Sphere { center, radius } => {
                let d2: f64 = (0..3)
                    .map(|a| {
                        let hi = (dims[a] - 1) as f64;
                        let c = center[a].clamp(0.0, hi);
                        (c - center[a]).powi(2)
                    })
                    .sum();
                d2 <= radius * radius
            }
            DamageSpec::Box { min, max } => (0..3).all(|a| max[a] >= 0 && min[a] < dims[a] as i64),
        }
    }
}

/// Removes every occupied site inside the damage region.
pub fn apply_damage(grid: &VoxelGrid, spec: &DamageSpec) -> Result<VoxelGrid, DamageError> {
    spec.validate()?;
    if !spec.intersects_volume(grid.dims()) {
        return Err(DamageError::Miss);
    }
    let mut out = grid.clone();
    for v in grid.occupied_indices() {
        if spec.contains(grid.coords(v)) {
            out.set_index(v, false);
        }
    }
    if out.occupied_count() == 0 {
        return Err(DamageError::RemovesAll);
    }
    Ok(out)
}

/// Label of every occupied voxel of `damaged`, in voxel order: the first
/// face (in face order) whose neighbour was removed, else `NoDamage`.
pub fn label_damage(original: &VoxelGrid, damaged: &VoxelGrid) -> Result<Vec<DamageLabel>, DamageError> {
    if !damaged.is_subset_of(original) {
        return Err(DamageError::NotSubset);
    }
    Ok(damaged
        .occupied_indices()
        .map(|v| {
            Face::ALL
                .into_iter()
                .find(|&f| {
                    damaged
                        .neighbor(v, f)
                        .is_some_and(|n| original.is_occupied(n) && !damaged.is_occupied(n))
                })
                .map_or(DamageLabel::NoDamage, DamageLabel::from_face)
        })
        .collect())
}

/// Draws a sphere (radius in [1.5, 4.5]) or box (edges in [2, 5]) centred
/// in the occupied bounding box, retrying until the damage removes at least
/// one voxel and keeps at least one.
pub fn sample_damage<R: Rng + ?Sized>(grid: &VoxelGrid, rng: &mut R) -> Result<(DamageSpec, VoxelGrid), DamageError> {
    let (lo, hi) = grid.bounding_box().ok_or(DamageError::Unsampleable)?;
    let total = grid.occupied_count();
    for _ in 0..1000 {
        let spec = if rng.random::<bool>() {
            let center = std::array::from_fn(|a| rng.random_range(lo[a] as f64..=hi[a] as f64));
            DamageSpec::Sphere {
                center,
                radius: rng.random_range(1.5..=4.5),
            }
        } else {
            let center: [i64; 3] = std::array::from_fn(|a| rng.random_range(lo[a]..=hi[a]) as i64);
            let edge: [i64; 3] = std::array::from_fn(|_| rng.random_range(2..=5));
            DamageSpec::Box {
                min: std::array::from_fn(|a| center[a] - (edge[a] - 1) / 2),
                max: std::array::from_fn(|a| center[a] + edge[a] / 2),
            }
        };
        match apply_damage(grid, &spec) {
            Ok(d) if d.occupied_count() < total => return Ok((spec, d)),
            _ => continue,
        }
    }
    Err(DamageError::Unsampleable)
}

/// The target as the encoder sees it: cropped and centred in 15³.
pub fn encoder_input(target: &VoxelGrid) -> Result<VoxelGrid, DamageError> {
    let cropped = target.cropped().unwrap_or_else(|| target.clone());
    cropped
        .centered_in([ENCODER_INPUT; 3])
        .map_err(|_| DamageError::TooLarge(target.dims()))
}

/// Non-overlapping 3³ convolution with `channels` filters, ReLU, flatten
/// (channel-major), and a dense projection to `hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub channels: usize,
    pub hidden: usize,
    /// `channels x 27`.
    pub conv_weight: Array2<f32>,
    pub conv_bias: Array1<f32>,
    /// `(channels * 125) x hidden`.
    pub proj: Array2<f32>,
    pub proj_bias: Array1<f32>,
}

/// Intermediates kept for the encoder's backward pass.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    /// `125 x 27` input patches.
    patches: Array2<f32>,
    /// Post-ReLU convolution output, flattened channel-major.
    pooled: Array1<f32>,
    pub embedding: Array1<f32>,
}

impl Encoder {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            hidden,
            conv_weight: Array2::zeros((channels, ENCODER_TAPS)),
            conv_bias: Array1::zeros(channels),
            proj: Array2::zeros((channels * ENCODER_BLOCKS, hidden)),
            proj_bias: Array1::zeros(hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let mut e = Self::zeros(channels, hidden);
        let s = 1.0 / (ENCODER_TAPS as f32).sqrt();
        e.conv_weight.mapv_inplace(|_| rng.random_range(-s..=s));
        e.conv_bias.mapv_inplace(|_| rng.random_range(-s..=s));
        let s = 1.0 / ((channels * ENCODER_BLOCKS) as f32).sqrt();
        e.proj.mapv_inplace(|_| rng.random_range(-s..=s));
        e.proj_bias.mapv_inplace(|_| rng.random_range(-s..=s));
        e
    }

    pub fn parameter_count(&self) -> usize {
        self.conv_weight.len() + self.conv_bias.len() + self.proj.len() + self.proj_bias.len()
    }

    fn patches(input: &VoxelGrid) -> Array2<f32> {
        let mut p = Array2::zeros((ENCODER_BLOCKS, ENCODER_TAPS));
        let o = ENCODER_OUTPUT;
        for bz in 0..o {
            for by in 0..o {
                for bx in 0..o {
                    let b = bx + o * (by + o * bz);
                    for kz in 0..ENCODER_STRIDE {
                        for ky in 0..ENCODER_STRIDE {
                            for kx in 0..ENCODER_STRIDE {
                                let k = kx + ENCODER_STRIDE * (ky + ENCODER_STRIDE * kz);
                                let (x, y, z) = (
                                    ENCODER_STRIDE * bx + kx,
                                    ENCODER_STRIDE * by + ky,
                                    ENCODER_STRIDE * bz + kz,
                                );
                                if input.get(x, y, z) {
                                    p[[b, k]] = 1.0;
                                }
                            }
                        }
                    }
                }
            }
        }
        p
    }

    pub fn forward(&self, target: &VoxelGrid) -> Result<EncoderPass, DamageError> {
        let input = encoder_input(target)?;
        let patches = Self::patches(&input);
        // blocks x channels, then flattened channel-major.
        let mut conv = patches.dot(&self.conv_weight.t());
        conv += &self.conv_bias;
        conv.mapv_inplace(|v| v.max(0.0));
        let pooled = Array1::from_iter(conv.t().iter().copied());
        let mut embedding = pooled.dot(&self.proj);
        embedding += &self.proj_bias;
        Ok(EncoderPass {
            patches,
            pooled,
            embedding,
        })
    }

    /// Accumulates parameter gradients for one pass given `d_embedding`.
    fn backward(&self, pass: &EncoderPass, d_embedding: &Array1<f64>, grads: &mut [Vec<f64>]) {
        let h = self.hidden;
        for (i, &z) in pass.pooled.iter().enumerate() {
            if z != 0.0 {
                let row = &mut grads[2][i * h..(i + 1) * h];
                for (g, &d) in row.iter_mut().zip(d_embedding.iter()) {
                    *g += z as f64 * d;
                }
            }
        }
        for (g, &d) in grads[3].iter_mut().zip(d_embedding.iter()) {
            *g += d;
        }
        for c in 0..self.channels {
            for b in 0..ENCODER_BLOCKS {
                let i = c * ENCODER_BLOCKS + b;
                if pass.pooled[i] <= 0.0 {
                    continue;
                }
                let d_pre: f64 = self.proj.row(i).iter().zip(d_embedding.iter()).map(|(&w, &d)| w as f64 * d).sum();
                for k in 0..ENCODER_TAPS {
                    grads[0][c * ENCODER_TAPS + k] += d_pre * pass.patches[[b, k]] as f64;
                }
                grads[1][c] += d_pre;
            }
        }
    }
}

/// Where the shape embedding enters the cell dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    /// Added to every living cell's hidden channels after every step.
    HiddenEveryStep,
    /// Written into the hidden channels of the initial state only.
    HiddenInit,
    /// Projected to a per-cell perception bias.
    PerceptionInput,
}

impl Conditioning {
    fn code(self) -> f32 {
        match self {
            Conditioning::HiddenEveryStep => 0.0,
            Conditioning::HiddenInit => 1.0,
            Conditioning::PerceptionInput => 2.0,
        }
    }

    fn from_code(v: f32) -> Option<Self> {
        match v as i32 {
            0 => Some(Conditioning::HiddenEveryStep),
            1 => Some(Conditioning::HiddenInit),
            2 => Some(Conditioning::PerceptionInput),
            _ => None,
        }
    }
}

/// Damage model: the cell network over `1 + hidden + 7` channels, its shape
/// encoder, and (for perception conditioning) the embedding projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageNcaParams {
    pub hidden: usize,
    pub conditioning: Conditioning,
    pub core: NcaParams,
    pub encoder: Encoder,
    /// `hidden x width`, present only with [`Conditioning::PerceptionInput`].
    pub cond_proj: Option<Array2<f32>>,
}

impl DamageNcaParams {
    pub fn init<R: Rng + ?Sized>(
        hidden: usize,
        width: usize,
        encoder_channels: usize,
        conditioning: Conditioning,
        rng: &mut R,
    ) -> Self {
        let core = NcaParams::init(1 + hidden + DAMAGE_LABELS, width, rng);
        let encoder = Encoder::init(encoder_channels, hidden, rng);
        let cond_proj = (conditioning == Conditioning::PerceptionInput).then(|| {
            let s = 1.0 / (hidden as f32).sqrt();
            Array2::from_shape_fn((hidden, width), |_| rng.random_range(-s..=s))
        });
        Self {
            hidden,
            conditioning,
            core,
            encoder,
            cond_proj,
        }
    }

    pub fn channels(&self) -> usize {
        self.core.channels()
    }

    pub fn parameter_count(&self) -> usize {
        self.core.parameter_count() + self.encoder.parameter_count() + self.cond_proj.as_ref().map_or(0, |p| p.len())
    }

    pub fn embed(&self, target: &VoxelGrid) -> Result<Array1<f32>, DamageError> {
        Ok(self.encoder.forward(target)?.embedding)
    }

    /// Named tensors for the checkpoint file.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .core
            .tensors()
            .into_iter()
            .map(|(n, d, v)| (n.to_string(), d, v.to_vec()))
            .collect();
        let e = &self.encoder;
        let c = e.channels;
        out.push(("encoder.conv.weight".into(), vec![c, 3, 3, 3], e.conv_weight.iter().copied().collect()));
        out.push(("encoder.conv.bias".into(), vec![c], e.conv_bias.to_vec()));
        out.push(("encoder.proj.weight".into(), vec![c * ENCODER_BLOCKS, e.hidden], e.proj.iter().copied().collect()));
        out.push(("encoder.proj.bias".into(), vec![e.hidden], e.proj_bias.to_vec()));
        out.push(("conditioning.mode".into(), vec![1], vec![self.conditioning.code()]));
        if let Some(p) = &self.cond_proj {
            out.push(("conditioning.weight".into(), vec![p.nrows(), p.ncols()], p.iter().copied().collect()));
        }
        out
    }

    pub fn from_tensors(tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<Self, DamageError> {
        let bad = |m: &str| DamageError::Checkpoint(m.to_string());
        let core = NcaParams::from_tensors(tensors).ok_or_else(|| bad("cell network tensors"))?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| DamageError::Checkpoint(format!("missing {name}")))
        };
        let (_, cd, cw) = find("encoder.conv.weight")?;
        let (_, _, cb) = find("encoder.conv.bias")?;
        let (_, pd, pw) = find("encoder.proj.weight")?;
        let (_, _, pb) = find("encoder.proj.bias")?;
        let (_, _, mode) = find("conditioning.mode")?;
        let channels = *cd.first().ok_or_else(|| bad("encoder rank"))?;
        let hidden = *pd.get(1).ok_or_else(|| bad("projection rank"))?;
        if core.channels() != 1 + hidden + DAMAGE_LABELS || pd[0] != channels * ENCODER_BLOCKS {
            return Err(bad("inconsistent dimensions"));
        }
        let shape_err = |_| bad("tensor size");
        let encoder = Encoder {
            channels,
            hidden,
            conv_weight: Array2::from_shape_vec((channels, ENCODER_TAPS), cw.clone()).map_err(shape_err)?,
            conv_bias: Array1::from_vec(cb.clone()),
            proj: Array2::from_shape_vec((pd[0], hidden), pw.clone()).map_err(shape_err)?,
            proj_bias: Array1::from_vec(pb.clone()),
        };
        if encoder.conv_bias.len() != channels || encoder.proj_bias.len() != hidden {
            return Err(bad("bias size"));
        }
        let conditioning = mode
            .first()
            .and_then(|&m| Conditioning::from_code(m))
            .ok_or_else(|| bad("conditioning mode"))?;
        let cond_proj = if conditioning == Conditioning::PerceptionInput {
            let (_, d, w) = find("conditioning.weight")?;
            if *d != vec![hidden, core.width()] {
                return Err(bad("conditioning projection shape"));
            }
            Some(Array2::from_shape_vec((hidden, core.width()), w.clone()).map_err(shape_err)?)
        } else {
            None
        };
        Ok(Self {
            hidden,
            conditioning,
            core,
            encoder,
            cond_proj,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DamageError> {
        let t = self.tensors();
        let refs: Vec<(&str, Vec<usize>, &[f32])> = t.iter().map(|(n, d, v)| (n.as_str(), d.clone(), &v[..])).collect();
        crate::training::checkpoint::save(path, &refs)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DamageError> {
        Self::from_tensors(&crate::training::checkpoint::load(path)?)
    }

    /// Initial states, injection and feature bias for cells of a batch whose
    /// `owner[k]`-th embedding conditions cell `k`.
    fn drive(&self, batch: &mut Batch, embeddings: &[Array1<f32>]) -> (Option<Injection>, Option<Array2<f32>>) {
        let h = self.hidden;
        let per_cell = |rows: &[&Array1<f32>], width: usize| {
            let mut m = Array2::zeros((rows.len(), width));
            for (k, r) in rows.iter().enumerate() {
                m.row_mut(k).assign(r);
            }
            m
        };
        match self.conditioning {
            Conditioning::HiddenEveryStep => {
                let rows: Vec<&Array1<f32>> = batch.owner.iter().map(|&o| &embeddings[o]).collect();
                (
                    Some(Injection {
                        channels: 1..1 + h,
                        per_cell: per_cell(&rows, h),
                    }),
                    None,
                )
            }
            Conditioning::HiddenInit => {
                for (k, &o) in batch.owner.iter().enumerate() {
                    let r = batch.cells.rows[k] as usize;
                    batch.initial.slice_mut(s![r, 1..1 + h]).assign(&embeddings[o]);
                }
                (None, None)
            }
            Conditioning::PerceptionInput => {
                let proj = self.cond_proj.as_ref().expect("perception conditioning has a projection");
                let biases: Vec<Array1<f32>> = embeddings.iter().map(|e| e.dot(proj)).collect();
                let rows: Vec<&Array1<f32>> = batch.owner.iter().map(|&o| &biases[o]).collect();
                (None, Some(per_cell(&rows, proj.ncols())))
            }
        }
    }
}

impl Trainable for DamageNcaParams {
    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v = self.core.tensors_mut();
        let e = &mut self.encoder;
        v.push(e.conv_weight.as_slice_mut().expect("standard layout"));
        v.push(e.conv_bias.as_slice_mut().expect("standard layout"));
        v.push(e.proj.as_slice_mut().expect("standard layout"));
        v.push(e.proj_bias.as_slice_mut().expect("standard layout"));
        if let Some(p) = self.cond_proj.as_mut() {
            v.push(p.as_slice_mut().expect("standard layout"));
        }
        v
    }

    fn after_step(&mut self) {
        self.core.apply_mask();
    }
}

/// Per-voxel damage predictions of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageRollout {
    /// Occupied voxel indices of the damaged grid, in order.
    pub voxels: Vec<usize>,
    /// `voxels x 7` final logits.
    pub logits: Array2<f32>,
    pub predictions: Vec<DamageLabel>,
}

/// Runs the conditioned NCA on `damaged` for `steps` steps.
pub fn damage_rollout(
    damaged: &VoxelGrid,
    target: &VoxelGrid,
    params: &DamageNcaParams,
    steps: usize,
    firing_rate: f32,
    seed: u64,
) -> Result<DamageRollout, DamageError> {
    let embedding = params.embed(target)?;
    rollout_embedded(damaged, &embedding, params, steps, firing_rate, seed)
}

fn rollout_embedded(
    damaged: &VoxelGrid,
    embedding: &Array1<f32>,
    params: &DamageNcaParams,
    steps: usize,
    firing_rate: f32,
    seed: u64,
) -> Result<DamageRollout, DamageError> {
    let voxels: Vec<usize> = damaged.occupied_indices().collect();
    let mut batch = Batch::new(&[damaged], vec![vec![0; voxels.len()]], &[seed], params.channels());
    let (inj, bias) = params.drive(&mut batch, std::slice::from_ref(embedding));
    let out = run_cells(
        &params.core,
        &batch.cells,
        batch.initial.clone(),
        steps,
        firing_rate,
        inj.as_ref(),
        bias.as_ref().map(|b| b.view()),
    )?;
    let c = params.channels();
    let logits = out.slice(s![.., c - DAMAGE_LABELS..]).to_owned();
    let predictions = logits
        .axis_iter(Axis(0))
        .map(|r| DamageLabel::ALL[argmax(r)])
        .collect();
    Ok(DamageRollout {
        voxels,
        logits,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DamageTrainConfig {
    /// Optimizer steps, each on a fresh batch of damaged shapes.
    pub epochs: usize,
    pub batch_size: usize,
    pub step_range: (usize, usize),
    pub hidden: usize,
    pub width: usize,
    pub encoder_channels: usize,
    pub conditioning: Conditioning,
    pub learning_rate: f64,
    pub clip: f64,
    pub firing_rate: f32,
    pub seed: u64,
    /// Probability that a batch sample is a partially regrown shape
    /// instead of a randomly damaged one.
    pub growth_prob: f64,
}

impl Default for DamageTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            batch_size: 12,
            step_range: (64, 96),
            hidden: 128,
            width: FEATURE_CHANNELS,
            encoder_channels: 1,
            conditioning: Conditioning::HiddenEveryStep,
            learning_rate: 1e-4,
            clip: 1.0,
            firing_rate: 0.5,
            seed: 0,
            growth_prob: 0.0,
        }
    }
}

impl DamageTrainConfig {
    pub fn validate(&self) -> Result<(), DamageError> {
        let bad = |m: String| Err(DamageError::Train(TrainError::Config(m)));
        let (lo, hi) = self.step_range;
        if lo < 1 || lo > hi || hi > 1000 {
            return bad(format!("step_range ({lo}, {hi}) invalid"));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.width == 0 || self.encoder_channels == 0 {
            return bad("batch_size, hidden, width and encoder_channels must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.clip > 0.0) {
            return bad("learning_rate and clip must be positive".into());
        }
        if !(self.firing_rate > 0.0 && self.firing_rate <= 1.0) {
            return bad(format!("firing_rate {} not in (0, 1]", self.firing_rate));
        }
        if !(0.0..=1.0).contains(&self.growth_prob) {
            return bad(format!("growth_prob {} not in [0, 1]", self.growth_prob));
        }
        Ok(())
    }
}

/// A damaged copy of a target with its per-voxel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageSample {
    pub target: usize,
    pub damaged: VoxelGrid,
    pub labels: Vec<DamageLabel>,
}

pub fn damage_sample<R: Rng + ?Sized>(targets: &[VoxelGrid], target: usize, rng: &mut R) -> Result<DamageSample, DamageError> {
    let (_, damaged) = sample_damage(&targets[target], rng)?;
    let labels = label_damage(&targets[target], &damaged)?;
    Ok(DamageSample {
        target,
        damaged,
        labels,
    })
}

/// The state reached after `iterations` exact growth iterations from the
/// centroid seed, labelled against the target.
pub fn growth_sample(targets: &[VoxelGrid], target: usize, iterations: usize) -> Result<DamageSample, DamageError> {
    let t = &targets[target];
    let seed = seed_cells(t, RecoveryConfig::default().seed_cells);
    let damaged = if iterations == 0 {
        seed
    } else {
        recover(t, &seed, &mut OracleDetector, iterations)?.grid
    };
    let labels = label_damage(t, &damaged)?;
    Ok(DamageSample {
        target,
        damaged,
        labels,
    })
}

/// Exact growth iterations needed to regrow `target` from its centroid seed.
pub fn growth_depth(target: &VoxelGrid) -> usize {
    let seed = seed_cells(target, RecoveryConfig::default().seed_cells);
    recover(target, &seed, &mut OracleDetector, 10_000).map_or(0, |o| o.iterations)
}

/// `count` fresh samples over uniformly chosen targets.
pub fn damage_samples(targets: &[VoxelGrid], count: usize, seed: u64) -> Result<Vec<DamageSample>, DamageError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t = rng.random_range(0..targets.len());
            damage_sample(targets, t, &mut rng)
        })
        .collect()
}

/// Loss, correct count, cell count and full gradient for one batch.
pub fn damage_gradient(
    params: &DamageNcaParams,
    targets: &[VoxelGrid],
    samples: &[&DamageSample],
    fire_seeds: &[u64],
    steps: usize,
    firing_rate: f32,
) -> Result<(f64, usize, usize, Vec<Vec<f64>>), DamageError> {
    let passes: Vec<EncoderPass> = samples
        .iter()
        .map(|s| params.encoder.forward(&targets[s.target]))
        .collect::<Result<_, _>>()?;
    let embeddings: Vec<Array1<f32>> = passes.iter().map(|p| p.embedding.clone()).collect();
    let grids: Vec<&VoxelGrid> = samples.iter().map(|s| &s.damaged).collect();
    let labels = samples.iter().map(|s| s.labels.iter().map(|l| l.index()).collect()).collect();
    let mut batch = Batch::new(&grids, labels, fire_seeds, params.channels());
    let (inj, bias) = params.drive(&mut batch, &embeddings);
    let out = batch_gradient(&params.core, &batch, steps, firing_rate, inj, bias)?;

    let h = params.hidden;
    let mut d_embed = vec![Array1::<f64>::zeros(h); samples.len()];
    let mut d_cond = params.cond_proj.as_ref().map(|p| vec![0.0f64; p.len()]);
    match params.conditioning {
        Conditioning::HiddenEveryStep => {
            let d = out.backward.injection.as_ref().expect("injection gradient");
            for (k, &o) in batch.owner.iter().enumerate() {
                d_embed[o] += &d.row(k);
            }
        }
        Conditioning::HiddenInit => {
            for (k, &o) in batch.owner.iter().enumerate() {
                let r = batch.cells.rows[k] as usize;
                let g = out.backward.initial_state.slice(s![r, 1..1 + h]);
                d_embed[o].zip_mut_with(&g, |a, &b| *a += b as f64);
            }
        }
        Conditioning::PerceptionInput => {
            let d = out.backward.feature_bias.as_ref().expect("feature bias gradient");
            let proj = params.cond_proj.as_ref().expect("projection");
            let w = proj.ncols();
            let mut per_sample = vec![Array1::<f64>::zeros(w); samples.len()];
            for (k, &o) in batch.owner.iter().enumerate() {
                per_sample[o] += &d.row(k);
            }
            let dc = d_cond.as_mut().expect("conditioning gradient");
            for (o, g) in per_sample.iter().enumerate() {
                for (i, &e) in embeddings[o].iter().enumerate() {
                    for (j, &gj) in g.iter().enumerate() {
                        dc[i * w + j] += e as f64 * gj;
                    }
                }
                for i in 0..h {
                    d_embed[o][i] = proj.row(i).iter().zip(g.iter()).map(|(&p, &gj)| p as f64 * gj).sum();
                }
            }
        }
    }

    let mut grads = out.backward.params.tensors;
    let enc = &params.encoder;
    let mut enc_grads = vec![
        vec![0.0; enc.conv_weight.len()],
        vec![0.0; enc.conv_bias.len()],
        vec![0.0; enc.proj.len()],
        vec![0.0; enc.proj_bias.len()],
    ];
    for (pass, d) in passes.iter().zip(&d_embed) {
        enc.backward(pass, d, &mut enc_grads);
    }
    grads.extend(enc_grads);
    if let Some(dc) = d_cond {
        grads.push(dc);
    }
    Ok((out.loss, out.correct, batch.len(), grads))
}

pub fn train_damage(
    targets: &[VoxelGrid],
    config: &DamageTrainConfig,
    mut observe: impl FnMut(&TrainRecord),
) -> Result<(DamageNcaParams, Vec<TrainRecord>), DamageError> {
    config.validate()?;
    if targets.is_empty() {
        return Err(DamageError::Train(TrainError::EmptyDataset));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = DamageNcaParams::init(
        config.hidden,
        config.width,
        config.encoder_channels,
        config.conditioning,
        &mut rng,
    );
    let mut adam = AdamState::for_params(&mut params);
    let mut records = Vec::with_capacity(config.epochs);
    let depths: Vec<usize> = if config.growth_prob > 0.0 {
        targets.iter().map(growth_depth).collect()
    } else {
        Vec::new()
    };
    let started = Instant::now();
    for epoch in 0..config.epochs {
        let samples: Vec<DamageSample> = (0..config.batch_size)
            .map(|_| {
                let t = rng.random_range(0..targets.len());
                if config.growth_prob > 0.0 && rng.random_bool(config.growth_prob) {
                    let k = rng.random_range(0..=depths[t]);
                    growth_sample(targets, t, k)
                } else {
                    damage_sample(targets, t, &mut rng)
                }
            })
            .collect::<Result<_, _>>()?;
        let steps = rng.random_range(config.step_range.0..=config.step_range.1);
        let seeds: Vec<u64> = samples.iter().map(|_| rng.random()).collect();
        let refs: Vec<&DamageSample> = samples.iter().collect();
        let (loss, correct, cells, mut grads) =
            damage_gradient(&params, targets, &refs, &seeds, steps, config.firing_rate)?;
        adam_step(&mut params, &mut grads, &mut adam, config.learning_rate, config.clip)?;
        let record = TrainRecord {
            iteration: epoch,
            loss,
            accuracy: correct as f64 / cells as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        observe(&record);
        records.push(record);
    }
    Ok((params, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Fraction of remaining voxels whose predicted label is correct.
    pub accuracy: f64,
    /// Accuracy restricted to voxels of each true label.
    pub per_label: [Option<f64>; DAMAGE_LABELS],
    pub voxels: [usize; DAMAGE_LABELS],
}

pub fn detection_report(
    params: &DamageNcaParams,
    targets: &[VoxelGrid],
    samples: &[DamageSample],
    steps: usize,
    firing_rate: f32,
    seed: u64,
) -> Result<DetectionReport, DamageError> {
    let embeddings: Vec<Array1<f32>> = targets.iter().map(|t| params.embed(t)).collect::<Result<_, _>>()?;
    let per_sample: Vec<([usize; DAMAGE_LABELS], [usize; DAMAGE_LABELS])> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let fire = crate::rng::hash_key(&[seed, i as u64]);
            let r = rollout_embedded(&s.damaged, &embeddings[s.target], params, steps, firing_rate, fire)?;
            let mut hits = [0; DAMAGE_LABELS];
            let mut totals = [0; DAMAGE_LABELS];
            for (&p, &l) in r.predictions.iter().zip(&s.labels) {
                totals[l.index()] += 1;
                if p == l {
                    hits[l.index()] += 1;
                }
            }
            Ok((hits, totals))
        })
        .collect::<Result<_, DamageError>>()?;
    let mut hits = [0usize; DAMAGE_LABELS];
    let mut voxels = [0usize; DAMAGE_LABELS];
    for (h, t) in per_sample {
        for l in 0..DAMAGE_LABELS {
            hits[l] += h[l];
            voxels[l] += t[l];
        }
    }
    let total: usize = voxels.iter().sum();
    Ok(DetectionReport {
        accuracy: hits.iter().sum::<usize>() as f64 / total.max(1) as f64,
        per_label: std::array::from_fn(|l| (voxels[l] > 0).then(|| hits[l] as f64 / voxels[l] as f64)),
        voxels,
    })
}

/// Per-cell damage directions for the current grid.
pub trait Detector {
    fn detect(&mut self, current: &VoxelGrid, target: &VoxelGrid, iteration: usize) -> Result<Vec<DamageLabel>, DamageError>;
}

/// Exact labels computed from the target, for testing the growth loop.
pub struct OracleDetector;

impl Detector for OracleDetector {
    fn detect(&mut self, current: &VoxelGrid, target: &VoxelGrid, _: usize) -> Result<Vec<DamageLabel>, DamageError> {
        Ok(current
            .occupied_indices()
            .map(|v| {
                Face::ALL
                    .into_iter()
                    .find(|&f| {
                        current
                            .neighbor(v, f)
                            .is_some_and(|n| target.is_occupied(n) && !current.is_occupied(n))
                    })
                    .map_or(DamageLabel::NoDamage, DamageLabel::from_face)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub max_iterations: usize,
    /// Inclusive range each iteration's rollout length is drawn from.
    pub step_range: (usize, usize),
    pub seed_cells: usize,
    pub firing_rate: f32,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            max_iterations: 32,
            step_range: (64, 96),
            seed_cells: 3,
            firing_rate: 0.5,
            seed: 0,
        }
    }
}

/// The trained network as a recovery detector with per-iteration rollout
/// lengths and firing streams drawn from a seeded generator.
pub struct NcaDetector<'a> {
    pub params: &'a DamageNcaParams,
    embedding: Option<Array1<f32>>,
    config: RecoveryConfig,
    rng: ChaCha8Rng,
}

impl<'a> NcaDetector<'a> {
    pub fn new(params: &'a DamageNcaParams, config: &RecoveryConfig) -> Self {
        Self {
            params,
            embedding: None,
            config: config.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }
}

impl Detector for NcaDetector<'_> {
    fn detect(&mut self, current: &VoxelGrid, target: &VoxelGrid, _: usize) -> Result<Vec<DamageLabel>, DamageError> {
        if self.embedding.is_none() {
            self.embedding = Some(self.params.embed(target)?);
        }
        let (lo, hi) = self.config.step_range;
        let steps = self.rng.random_range(lo..=hi);
        let fire = self.rng.random();
        let out = rollout_embedded(
            current,
            self.embedding.as_ref().expect("set above"),
            self.params,
            steps,
            self.config.firing_rate,
            fire,
        )?;
        Ok(out.predictions)
    }
}

/// The `k` occupied voxels nearest the occupied centroid (ties by index).
pub fn seed_cells(target: &VoxelGrid, k: usize) -> VoxelGrid {
    let voxels: Vec<usize> = target.occupied_indices().collect();
    let n = voxels.len().max(1) as f64;
    let mut centroid = [0.0f64; 3];
    for &v in &voxels {
        let p = target.coords(v);
        for a in 0..3 {
            centroid[a] += p[a] as f64 / n;
        }
    }
    let dist = |v: usize| -> f64 {
        let p = target.coords(v);
        (0..3).map(|a| (p[a] as f64 - centroid[a]).powi(2)).sum()
    };
    let mut order = voxels.clone();
    order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    let mut g = VoxelGrid::new(target.dims()).expect("valid dims");
    for &v in order.iter().take(k) {
        g.set_index(v, true);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    pub grid: VoxelGrid,
    /// Detector invocations performed.
    pub iterations: usize,
    /// True when the last detection reported no damage anywhere.
    pub converged: bool,
    /// Occupied count after each iteration.
    pub sizes: Vec<usize>,
}

/// Grows `seed` by adding, for every cell predicting a direction, the site on
/// that face (when inside the volume and empty), until no cell reports
/// damage or `max_iterations` detections have run.
pub fn recover(
    target: &VoxelGrid,
    seed: &VoxelGrid,
    detector: &mut dyn Detector,
    max_iterations: usize,
) -> Result<RecoveryOutcome, DamageError> {
    if !seed.is_subset_of(target) || seed.occupied_count() == 0 {
        return Err(DamageError::NotSubset);
    }
    let mut grid = seed.clone();
    let mut sizes = Vec::new();
    for it in 1..=max_iterations.max(1) {
        let labels = detector.detect(&grid, target, it)?;
        let voxels: Vec<usize> = grid.occupied_indices().collect();
        let mut grown = grid.clone();
        let mut damage_seen = false;
        for (&v, &l) in voxels.iter().zip(&labels) {
            if let Some(face) = l.face() {
                damage_seen = true;
                if let Some(n) = grid.neighbor(v, face) {
                    grown.set_index(n, true);
                }
            }
        }
        grid = grown;
        sizes.push(grid.occupied_count());
        if !damage_seen {
            return Ok(RecoveryOutcome {
                grid,
                iterations: it,
                converged: true,
                sizes,
            });
        }
    }
    Ok(RecoveryOutcome {
        grid,
        iterations: max_iterations.max(1),
        converged: false,
        sizes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    pub iou: f64,
    /// Agreement over the bounding box of the union of both shapes.
    pub voxel_acc: f64,
}

pub fn recovery_accuracy(final_grid: &VoxelGrid, target: &VoxelGrid) -> RecoveryScore {
    assert_eq!(final_grid.dims(), target.dims(), "recovery grids must share dims");
    let (mut inter, mut union) = (0usize, 0usize);
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for v in 0..target.len() {
        let (a, b) = (final_grid.is_occupied(v), target.is_occupied(v));
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
            let p = target.coords(v);
            for ax in 0..3 {
                lo[ax] = lo[ax].min(p[ax]);
                hi[ax] = hi[ax].max(p[ax]);
            }
        }
    }
    if union == 0 {
        return RecoveryScore { iou: 1.0, voxel_acc: 1.0 };
    }
    let (mut agree, mut total) = (0usize, 0usize);
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                total += 1;
                if final_grid.get(x, y, z) == target.get(x, y, z) {
                    agree += 1;
                }
            }
        }
    }
    RecoveryScore {
        iou: inter as f64 / union as f64,
        voxel_acc: agree as f64 / total as f64,
    }
}

/// One `class,H,seed,iterations,iou,voxel_acc` report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub class: String,
    pub hidden: usize,
    pub seed: u64,
    pub iterations: usize,
    pub iou: f64,
    pub voxel_acc: f64,
}

pub const RECOVERY_CSV_HEADER: &str = "class,H,seed,iterations,iou,voxel_acc";

impl RecoveryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6}",
            self.class, self.hidden, self.seed, self.iterations, self.iou, self.voxel_acc
        )
    }
}

/// Recovers every target from its centroid seed once per recovery seed.
pub fn recovery_sweep(
    params: &DamageNcaParams,
    targets: &[(String, VoxelGrid)],
    seeds: &[u64],
    config: &RecoveryConfig,
) -> Result<Vec<RecoveryRow>, DamageError> {
    let jobs: Vec<(usize, u64)> = (0..targets.len()).flat_map(|t| seeds.iter().map(move |&s| (t, s))).collect();
    jobs.par_iter()
        .map(|&(t, seed)| {
            let (class, target) = &targets[t];
            let cfg = RecoveryConfig {
                seed: crate::rng::hash_key(&[seed, t as u64]),
                ..config.clone()
            };
            let start = seed_cells(target, cfg.seed_cells);
            let mut det = NcaDetector::new(params, &cfg);
            let out = recover(target, &start, &mut det, cfg.max_iterations)?;
            let score = recovery_accuracy(&out.grid, target);
            Ok(RecoveryRow {
                class: class.clone(),
                hidden: params.hidden,
                seed,
                iterations: out.iterations,
                iou: score.iou,
                voxel_acc: score.voxel_acc,
            })
        })
        .collect()
}
