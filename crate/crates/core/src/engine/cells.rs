//! Row-batched cell kernels shared by the grid engine, the trainer and the
//! per-brick simulator.
//!
//! A [`CellSet`] lists the cells that update and, for each, the state-matrix
//! rows of its six face neighbours. Inputs are assembled as `7 * channels`
//! wide rows (centre block, then one block per face), and the network runs
//! as three dense products over all rows at once.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{NcaParams, CROSS_TAPS};
use crate::rng::firing_uniform;
use crate::voxel::{Face, VoxelGrid};

pub const NO_NEIGHBOR: u32 = u32::MAX;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellSet {
    /// Row of each cell in the state matrix.
    pub rows: Vec<u32>,
    /// State-matrix row of each face neighbour, [`NO_NEIGHBOR`] if absent.
    pub neighbors: Vec<[u32; 6]>,
    /// Firing-stream key per cell: (stream seed, voxel id).
    pub fire_keys: Vec<(u64, u64)>,
}

impl CellSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cells addressing a dense `voxels x channels` state matrix: one cell per
    /// voxel where `alive` holds, neighbours are any in-grid voxel.
    pub fn dense(grid_dims: [usize; 3], alive: impl Fn(usize) -> bool, seed: u64) -> Self {
        let shape = VoxelGrid::new(grid_dims).expect("valid dims");
        let mut set = CellSet::default();
        for v in (0..shape.len()).filter(|&v| alive(v)) {
            set.rows.push(v as u32);
            set.neighbors.push(Face::ALL.map(|f| {
                shape.neighbor(v, f).map_or(NO_NEIGHBOR, |n| n as u32)
            }));
            set.fire_keys.push((seed, v as u64));
        }
        set
    }

    /// Cells addressing a compact `occupied x channels` matrix, rows in
    /// increasing voxel order. Returns the set and the voxel index of each row.
    pub fn compact(grid: &VoxelGrid, seed: u64) -> (Self, Vec<usize>) {
        let voxels: Vec<usize> = grid.occupied_indices().collect();
        let mut row_of = vec![NO_NEIGHBOR; grid.len()];
        for (r, &v) in voxels.iter().enumerate() {
            row_of[v] = r as u32;
        }
        let mut set = CellSet::default();
        for (r, &v) in voxels.iter().enumerate() {
            set.rows.push(r as u32);
            set.neighbors.push(Face::ALL.map(|f| {
                grid.neighbor(v, f).map_or(NO_NEIGHBOR, |n| row_of[n])
            }));
            set.fire_keys.push((seed, v as u64));
        }
        (set, voxels)
    }

    /// Concatenates compact sets into one set over stacked state matrices.
    pub fn concat(parts: &[CellSet]) -> Self {
        let mut out = CellSet::default();
        let mut offset = 0u32;
        for p in parts {
            out.rows.extend(p.rows.iter().map(|&r| r + offset));
            out.neighbors.extend(p.neighbors.iter().map(|n| {
                n.map(|j| if j == NO_NEIGHBOR { j } else { j + offset })
            }));
            out.fire_keys.extend_from_slice(&p.fire_keys);
            offset += p.rows.iter().map(|&r| r + 1).max().unwrap_or(0);
        }
        out
    }

    /// Builds the `cells x (7 * channels)` perception input.
    pub fn gather(&self, states: ArrayView2<'_, f32>) -> Array2<f32> {
        let c = states.ncols();
        let mut input = Array2::zeros((self.len(), CROSS_TAPS * c));
        for (k, mut row) in input.axis_iter_mut(Axis(0)).enumerate() {
            row.slice_mut(s![0..c])
                .assign(&states.row(self.rows[k] as usize));
            for (f, &n) in self.neighbors[k].iter().enumerate() {
                if n != NO_NEIGHBOR {
                    row.slice_mut(s![(f + 1) * c..(f + 2) * c])
                        .assign(&states.row(n as usize));
                }
            }
        }
        input
    }

    /// Firing decisions for `step` at `rate`.
    pub fn firing(&self, step: u64, rate: f32) -> Vec<bool> {
        if rate >= 1.0 {
            return vec![true; self.len()];
        }
        self.fire_keys
            .iter()
            .map(|&(seed, voxel)| firing_uniform(seed, step, voxel) < rate)
            .collect()
    }
}

/// Intermediate values of one forward pass, one row per cell.
#[derive(Debug, Clone)]
pub struct Activations {
    /// ReLU perception output, `cells x width`.
    pub features: Array2<f32>,
    /// ReLU first-layer output, `cells x width`.
    pub hidden: Array2<f32>,
    /// tanh-bounded update for channels `1..channels`.
    pub delta: Array2<f32>,
}

/// The per-cell network with its cross-tap kernel unpacked once.
pub struct CellNet<'a> {
    params: &'a NcaParams,
    cross: Array2<f32>,
}

fn affine(input: ArrayView2<'_, f32>, weights: &Array2<f32>, bias: &Array1<f32>) -> Array2<f32> {
    let mut out = input.dot(weights);
    out += bias;
    out
}

impl<'a> CellNet<'a> {
    pub fn new(params: &'a NcaParams) -> Self {
        Self {
            params,
            cross: params.cross_kernel(),
        }
    }

    pub fn params(&self) -> &NcaParams {
        self.params
    }

    /// Stacked cross-tap kernel, `(7 * channels) x width`.
    pub fn cross(&self) -> &Array2<f32> {
        &self.cross
    }

    pub fn perceive(&self, input: ArrayView2<'_, f32>) -> Array2<f32> {
        self.perceive_with(input, None)
    }

    /// Perception with an extra per-cell pre-activation bias.
    pub fn perceive_with(&self, input: ArrayView2<'_, f32>, extra: Option<ArrayView2<'_, f32>>) -> Array2<f32> {
        let mut f = affine(input, &self.cross, &self.params.perception_bias);
        if let Some(e) = extra {
            f += &e;
        }
        f.mapv_inplace(|v| v.max(0.0));
        f
    }

    pub fn forward(&self, input: ArrayView2<'_, f32>) -> Activations {
        self.forward_with(input, None)
    }

    pub fn forward_with(&self, input: ArrayView2<'_, f32>, extra: Option<ArrayView2<'_, f32>>) -> Activations {
        let features = self.perceive_with(input, extra);
        let mut hidden = affine(features.view(), &self.params.layer1, &self.params.layer1_bias);
        hidden.mapv_inplace(|v| v.max(0.0));
        let mut delta = affine(hidden.view(), &self.params.layer2, &self.params.layer2_bias);
        delta.mapv_inplace(f32::tanh);
        Activations {
            features,
            hidden,
            delta,
        }
    }
}

/// Result of advancing a cell set by one step.
pub struct Advanced {
    pub next: Array2<f32>,
    pub activations: Activations,
    pub fired: Vec<bool>,
}

/// One synchronous update: reads `states`, writes a new matrix. Fired cells
/// add their delta to channels `1..`. Returns the offending cell on a
/// non-finite update.
pub fn advance(
    states: ArrayView2<'_, f32>,
    cells: &CellSet,
    net: &CellNet<'_>,
    step: u64,
    firing_rate: f32,
) -> Result<Advanced, usize> {
    advance_with(states, cells, net, step, firing_rate, None)
}

/// [`advance`] with a per-cell perception bias (`cells x width`).
pub fn advance_with(
    states: ArrayView2<'_, f32>,
    cells: &CellSet,
    net: &CellNet<'_>,
    step: u64,
    firing_rate: f32,
    feature_bias: Option<ArrayView2<'_, f32>>,
) -> Result<Advanced, usize> {
    let input = cells.gather(states);
    let activations = net.forward_with(input.view(), feature_bias);
    let fired = cells.firing(step, firing_rate);
    let mut next = states.to_owned();
    for (k, delta) in activations.delta.axis_iter(Axis(0)).enumerate() {
        if !fired[k] {
            continue;
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(k);
        }
        let mut row = next.row_mut(cells.rows[k] as usize);
        Zip::from(row.slice_mut(s![1..])).and(delta).for_each(|s, &d| *s += d);
    }
    Ok(Advanced {
        next,
        activations,
        fired,
    })
}

/// Adds a per-cell vector to `channels` of every cell in the set.
pub fn inject(states: &mut Array2<f32>, cells: &CellSet, channels: Range<usize>, per_cell: ArrayView2<'_, f32>) {
    for (k, e) in per_cell.axis_iter(Axis(0)).enumerate() {
        let mut row = states.row_mut(cells.rows[k] as usize);
        Zip::from(row.slice_mut(s![channels.clone()])).and(e).for_each(|s, &v| *s += v);
    }
}
