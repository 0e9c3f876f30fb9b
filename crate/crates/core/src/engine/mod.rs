//! The grid-tensor neural cellular automaton: state layout, masked
//! perception, the two-layer update head, stochastic firing and rollouts.

mod cells;
mod params;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView1, Axis};
use thiserror::Error;

pub use cells::{advance, advance_with, inject, Activations, Advanced, CellNet, CellSet, NO_NEIGHBOR};
pub use params::{kernel_tap, KernelMask, NcaParams, CROSS_TAPS, CROSS_TAP_INDICES, KERNEL_TAPS};

use crate::voxel::{VoxelGrid, CLASS_NAMES, NUM_CLASSES};

pub const STATE_CHANNELS: usize = 28;
pub const HIDDEN_CHANNELS: usize = 20;
pub const LOGIT_CHANNELS: usize = 7;
/// First logit channel of the 28-channel classifier state.
pub const LOGIT_OFFSET: usize = 1 + HIDDEN_CHANNELS;
pub const FEATURE_CHANNELS: usize = 3 * STATE_CHANNELS;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("non-finite update at voxel {coords:?} (step {step})")]
    NonFinite { coords: [usize; 3], step: u64 },
    #[error("non-finite state value at voxel {coords:?}")]
    NonFiniteState { coords: [usize; 3] },
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("state has {state} channels but parameters expect {params}")]
    ChannelMismatch { state: usize, params: usize },
    #[error("channel {0} out of range")]
    BadChannel(usize),
    #[error("state dims {state:?} do not match grid dims {grid:?}")]
    DimsMismatch { state: [usize; 3], grid: [usize; 3] },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EngineConfig {
    pub alive_threshold: f32,
    pub firing_rate: f32,
    pub steps: usize,
    pub rng_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            alive_threshold: 0.1,
            firing_rate: 0.5,
            steps: 60,
            rng_seed: 0,
        }
    }
}

impl EngineConfig {
    /// Firing rate one: every living cell updates every step.
    pub fn deterministic(steps: usize) -> Self {
        Self {
            firing_rate: 1.0,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.firing_rate > 0.0 && self.firing_rate <= 1.0) {
            return Err(EngineError::Config(format!(
                "firing_rate {} not in (0, 1]",
                self.firing_rate
            )));
        }
        if !(self.alive_threshold >= 0.0) {
            return Err(EngineError::Config(format!(
                "alive_threshold {} is negative",
                self.alive_threshold
            )));
        }
        Ok(())
    }
}

/// Per-voxel cell state: channel 0 alpha, then hidden, then logits.
/// Stored as a `voxels x channels` matrix in grid linear order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVolume {
    dims: [usize; 3],
    data: Array2<f32>,
}

impl StateVolume {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            data: Array2::zeros((dims[0] * dims[1] * dims[2], channels)),
        }
    }

    pub fn from_matrix(dims: [usize; 3], data: Array2<f32>) -> Self {
        assert_eq!(data.nrows(), dims[0] * dims[1] * dims[2]);
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<f32> {
        &mut self.data
    }

    pub fn voxel(&self, idx: usize) -> ArrayView1<'_, f32> {
        self.data.row(idx)
    }

    pub fn alpha(&self, idx: usize) -> f32 {
        self.data[[idx, 0]]
    }

    /// The last [`LOGIT_CHANNELS`] channels of a voxel.
    pub fn logits(&self, idx: usize) -> ArrayView1<'_, f32> {
        let c = self.channels();
        self.data.slice(s![idx, c - LOGIT_CHANNELS..c])
    }

    fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    fn check_finite(&self) -> Result<(), EngineError> {
        for (i, row) in self.data.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EngineError::NonFiniteState {
                    coords: self.coords(i),
                });
            }
        }
        Ok(())
    }
}

/// Alpha 1 on occupied voxels, everything else 0.
pub fn init_state(grid: &VoxelGrid) -> StateVolume {
    init_state_with(grid, STATE_CHANNELS)
}

pub fn init_state_with(grid: &VoxelGrid, channels: usize) -> StateVolume {
    let mut state = StateVolume::zeros(grid.dims(), channels);
    for i in grid.occupied_indices() {
        state.data[[i, 0]] = 1.0;
    }
    state
}

fn check_channels(state: &StateVolume, params: &NcaParams) -> Result<(), EngineError> {
    if state.channels() != params.channels() {
        return Err(EngineError::ChannelMismatch {
            state: state.channels(),
            params: params.channels(),
        });
    }
    Ok(())
}

/// Perception features for every voxel (`voxels x width`), zero padding at
/// the grid boundary.
pub fn perceive(state: &StateVolume, params: &NcaParams) -> Result<Array2<f32>, EngineError> {
    check_channels(state, params)?;
    state.check_finite()?;
    let cells = CellSet::dense(state.dims, |_| true, 0);
    let net = CellNet::new(params);
    Ok(net.perceive(cells.gather(state.data.view()).view()))
}

fn living_cells(state: &StateVolume, config: &EngineConfig) -> CellSet {
    let threshold = config.alive_threshold;
    CellSet::dense(state.dims, |v| state.data[[v, 0]] > threshold, config.rng_seed)
}

/// One update of every living cell that fires at `step`.
pub fn update_step(
    state: &StateVolume,
    params: &NcaParams,
    config: &EngineConfig,
    step: u64,
) -> Result<StateVolume, EngineError> {
    config.validate()?;
    check_channels(state, params)?;
    let cells = living_cells(state, config);
    let net = CellNet::new(params);
    step_cells(state, &cells, &net, config, step)
}

fn step_cells(
    state: &StateVolume,
    cells: &CellSet,
    net: &CellNet<'_>,
    config: &EngineConfig,
    step: u64,
) -> Result<StateVolume, EngineError> {
    let adv = advance(state.data.view(), cells, net, step, config.firing_rate).map_err(|k| {
        EngineError::NonFinite {
            coords: state.coords(cells.rows[k] as usize),
            step,
        }
    })?;
    Ok(StateVolume {
        dims: state.dims,
        data: adv.next,
    })
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub state: StateVolume,
    /// Every state from the initial one to the final one, when requested.
    pub trace: Option<Vec<StateVolume>>,
}

/// `init_state` followed by `config.steps` updates.
pub fn rollout(
    grid: &VoxelGrid,
    params: &NcaParams,
    config: &EngineConfig,
    keep_trace: bool,
) -> Result<Rollout, EngineError> {
    rollout_from(init_state_with(grid, params.channels()), params, config, keep_trace)
}

pub fn rollout_from(
    initial: StateVolume,
    params: &NcaParams,
    config: &EngineConfig,
    keep_trace: bool,
) -> Result<Rollout, EngineError> {
    config.validate()?;
    check_channels(&initial, params)?;
    if config.steps == 0 {
        return Err(EngineError::Config("steps must be at least 1".into()));
    }
    initial.check_finite()?;
    let cells = living_cells(&initial, config);
    let net = CellNet::new(params);
    let mut trace = keep_trace.then(|| Vec::with_capacity(config.steps + 1));
    let mut state = initial;
    for step in 0..config.steps as u64 {
        let next = step_cells(&state, &cells, &net, config, step)?;
        if let Some(t) = trace.as_mut() {
            t.push(state);
        }
        state = next;
    }
    if let Some(t) = trace.as_mut() {
        t.push(state.clone());
    }
    Ok(Rollout { state, trace })
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: ArrayView1<'_, f32>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// (voxel index, predicted class) for each occupied voxel.
    pub predictions: Vec<(usize, usize)>,
    /// Fraction of occupied voxels predicting each class.
    pub fractions: [f64; NUM_CLASSES],
    /// All occupied voxels agree.
    pub consensus: bool,
}

impl Classification {
    pub fn majority(&self) -> usize {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if self.fractions[c] > self.fractions[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, label: usize) -> f64 {
        self.fractions[label]
    }
}

pub fn classify(state: &StateVolume, grid: &VoxelGrid) -> Classification {
    let predictions: Vec<(usize, usize)> = grid
        .occupied_indices()
        .map(|i| (i, argmax(state.logits(i))))
        .collect();
    let mut fractions = [0.0; NUM_CLASSES];
    for &(_, c) in &predictions {
        fractions[c] += 1.0;
    }
    let n = predictions.len().max(1) as f64;
    fractions.iter_mut().for_each(|f| *f /= n);
    let consensus = predictions.windows(2).all(|w| w[0].1 == w[1].1);
    Classification {
        predictions,
        fractions,
        consensus,
    }
}

/// Renders one channel of a state volume in the `.voxfield` format.
pub fn format_field(state: &StateVolume, channel: usize, label: Option<usize>) -> Result<String, EngineError> {
    if channel >= state.channels() {
        return Err(EngineError::BadChannel(channel));
    }
    let [nx, ny, nz] = state.dims;
    let mut out = String::new();
    out.push_str("voxfield 1\n");
    let _ = writeln!(out, "dims {nx} {ny} {nz}");
    let _ = writeln!(out, "class {}", label.map_or("-", |l| CLASS_NAMES[l]));
    for z in 0..nz {
        let _ = writeln!(out, "slice {z}");
        for y in 0..ny {
            for x in 0..nx {
                if x > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{}", state.data[[x + nx * (y + ny * z), channel]]);
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parses a `.voxfield` file back into `(dims, label, values)`.
pub fn parse_field(text: &str) -> Result<([usize; 3], Option<usize>, Vec<f32>), crate::voxel::VoxelError> {
    use crate::voxel::{parse_header, read_slices, RowStyle, VoxelError};
    let (dims, label, body) = parse_header(text, "voxfield")?;
    let [nx, ny, _] = dims;
    let mut values = vec![0.0f32; dims.iter().product()];
    read_slices(
        body,
        dims,
        |line, x, y, z, tok| {
            values[x + nx * (y + ny * z)] = tok.parse().map_err(|_| VoxelError::Parse {
                line,
                msg: format!("invalid real {tok:?}"),
            })?;
            Ok(())
        },
        RowStyle::Whitespace,
    )?;
    Ok((dims, label, values))
}

/// Writes `<run>_s<step>_c<channel>.voxfield` for each requested pair.
/// `steps` index into `trace`.
pub fn export_channels(
    trace: &[StateVolume],
    steps: &[usize],
    channels: &[usize],
    label: Option<usize>,
    dir: &Path,
    run: &str,
) -> Result<Vec<PathBuf>, EngineError> {
    let channel_count = trace.first().map_or(STATE_CHANNELS, |s| s.channels());
    if let Some(&c) = channels.iter().find(|&&c| c >= channel_count) {
        return Err(EngineError::BadChannel(c));
    }
    if let Some(&s) = steps.iter().find(|&&s| s >= trace.len()) {
        return Err(EngineError::Config(format!("step {s} beyond trace length {}", trace.len())));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(steps.len() * channels.len());
    for &step in steps {
        for &channel in channels {
            let path = dir.join(format!("{run}_s{step}_c{channel}.voxfield"));
            fs::write(&path, format_field(&trace[step], channel, label)?)?;
            written.push(path);
        }
    }
    Ok(written)
}
