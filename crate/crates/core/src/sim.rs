//! Per-brick simulation of the physical collective. Every brick holds one
//! cell state, exchanges face messages once per cycle and runs the shared
//! network on its own seven-tap input.

use std::collections::{BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{argmax, CellNet, NcaParams, LOGIT_CHANNELS, STATE_CHANNELS};
use crate::protocol::{exchange, ChannelModel, Frame, ProtocolConfig, ProtocolError};
use crate::rng::hash_key;
use crate::voxel::{connected_component_count, Face, VoxelGrid};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("assembly grid is empty")]
    Empty,
    #[error("assembly grid has {0} components, expected 1")]
    Disconnected(usize),
    #[error("fault fraction {0} not in [0, 1)")]
    FaultFraction(f64),
    #[error("no brick with id {0}")]
    UnknownBrick(usize),
    #[error("parameters have {0} channels, bricks carry {STATE_CHANNELS}")]
    Channels(usize),
    #[error("non-finite state in brick {brick} at cycle {cycle}")]
    NonFinite { cycle: usize, brick: usize },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("telemetry parse error on line {line}: {msg}")]
    Telemetry { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Normal,
    Faulty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Brick {
    pub id: usize,
    pub pos: [usize; 3],
    pub state: Vec<f32>,
    /// Neighbour id on each face, in face order.
    pub links: [Option<usize>; 6],
    pub mode: Mode,
}

impl Brick {
    pub fn is_faulty(&self) -> bool {
        self.mode == Mode::Faulty
    }

    pub fn guess(&self) -> usize {
        argmax(ndarray::ArrayView1::from(&self.state[STATE_CHANNELS - LOGIT_CHANNELS..]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Comm {
    Ideal,
    Protocol {
        channel: ChannelModel,
        config: ProtocolConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub cycles: usize,
    /// Simulated compute time per cycle, added to the exchange window.
    pub compute_ms: u64,
    pub alive_threshold: f32,
    /// Bounded-skew mode: per cycle, each brick lags (skips its update) with
    /// this probability, never twice in a row.
    pub lag_prob: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            cycles: 60,
            compute_ms: 25,
            alive_threshold: 0.1,
            lag_prob: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Assembly {
    pub dims: [usize; 3],
    pub bricks: Vec<Brick>,
    pub params: NcaParams,
    pub comm: Comm,
    pub config: SimConfig,
    /// Physically broken links, stored as (lower id, face from that brick).
    severed: BTreeSet<(usize, Face)>,
}

const WINDOW_MS: u64 = 3000;

/// One brick per occupied voxel, ids in voxel order.
pub fn build_assembly(grid: &VoxelGrid, params: NcaParams, comm: Comm) -> Result<Assembly, SimError> {
    if params.channels() != STATE_CHANNELS {
        return Err(SimError::Channels(params.channels()));
    }
    match connected_component_count(grid) {
        0 => return Err(SimError::Empty),
        1 => {}
        n => return Err(SimError::Disconnected(n)),
    }
    let voxels: Vec<usize> = grid.occupied_indices().collect();
    let mut id_of = vec![usize::MAX; grid.len()];
    for (id, &v) in voxels.iter().enumerate() {
        id_of[v] = id;
    }
    let bricks = voxels
        .iter()
        .enumerate()
        .map(|(id, &v)| {
            let mut state = vec![0.0; STATE_CHANNELS];
            state[0] = 1.0;
            Brick {
                id,
                pos: grid.coords(v),
                state,
                links: Face::ALL.map(|f| grid.neighbor(v, f).filter(|&n| grid.is_occupied(n)).map(|n| id_of[n])),
                mode: Mode::Normal,
            }
        })
        .collect();
    Ok(Assembly {
        dims: grid.dims(),
        bricks,
        params,
        comm,
        config: SimConfig::default(),
        severed: BTreeSet::new(),
    })
}

impl Assembly {
    pub fn len(&self) -> usize {
        self.bricks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bricks.is_empty()
    }

    pub fn cycle_ms(&self) -> u64 {
        let window = match &self.comm {
            Comm::Ideal => WINDOW_MS,
            Comm::Protocol { config, .. } => config.window_ms.round() as u64,
        };
        window + self.config.compute_ms
    }

    pub fn grid(&self) -> VoxelGrid {
        let mut g = VoxelGrid::new(self.dims).expect("assembly dims are valid");
        for b in &self.bricks {
            let [x, y, z] = b.pos;
            g.set(x, y, z, true);
        }
        g
    }

    fn link_key(&self, id: usize, face: Face) -> Option<(usize, Face)> {
        let other = self.bricks.get(id)?.links[face.index()]?;
        Some(if id < other { (id, face) } else { (other, face.opposite()) })
    }

    /// Breaks the physical link on `face` of brick `id` (both directions).
    pub fn sever(&mut self, id: usize, face: Face) -> Result<(), SimError> {
        let key = self.link_key(id, face).ok_or(SimError::UnknownBrick(id))?;
        self.severed.insert(key);
        Ok(())
    }

    pub fn is_severed(&self, id: usize, face: Face) -> bool {
        self.link_key(id, face).is_some_and(|k| self.severed.contains(&k))
    }

    /// The neighbour currently reachable through `face`, ignoring faults.
    fn live_link(&self, id: usize, face: Face) -> Option<usize> {
        let n = self.bricks[id].links[face.index()]?;
        (!self.is_severed(id, face)).then_some(n)
    }

    /// Resets every brick to the initial state and normal mode.
    pub fn reset(&mut self) {
        for b in &mut self.bricks {
            b.state.iter_mut().for_each(|v| *v = 0.0);
            b.state[0] = 1.0;
            b.mode = Mode::Normal;
        }
    }

    /// Current states as an `N x 28` matrix in id order.
    pub fn state_matrix(&self) -> Array2<f32> {
        let mut m = Array2::zeros((self.len(), STATE_CHANNELS));
        for (i, b) in self.bricks.iter().enumerate() {
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&b.state[..]));
        }
        m
    }

    /// Ids whose removal would split the assembly into several pieces.
    pub fn articulation_bricks(&self) -> Vec<usize> {
        let grid = self.grid();
        self.bricks
            .iter()
            .filter(|b| {
                let mut g = grid.clone();
                let [x, y, z] = b.pos;
                g.set(x, y, z, false);
                connected_component_count(&g) > 1
            })
            .map(|b| b.id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FaultPlan {
    None,
    Explicit(Vec<usize>),
    Fraction { fraction: f64, seed: u64 },
}

/// Marks bricks faulty according to `plan` and returns their sorted ids.
/// A fraction selects `ceil(fraction * N)` distinct bricks uniformly.
pub fn inject_faults(assembly: &mut Assembly, plan: &FaultPlan) -> Result<Vec<usize>, SimError> {
    let n = assembly.len();
    let mut ids = match plan {
        FaultPlan::None => Vec::new(),
        FaultPlan::Explicit(ids) => {
            if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
                return Err(SimError::UnknownBrick(bad));
            }
            ids.clone()
        }
        FaultPlan::Fraction { fraction, seed } => {
            if !(0.0..1.0).contains(fraction) {
                return Err(SimError::FaultFraction(*fraction));
            }
            let count = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            sample(&mut rng, n, count.min(n)).into_vec()
        }
    };
    ids.sort_unstable();
    ids.dedup();
    for &i in &ids {
        assembly.bricks[i].mode = Mode::Faulty;
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub cycle: usize,
    pub id: usize,
    pub pos: [usize; 3],
    pub state: Vec<f32>,
    pub guess: usize,
    pub faulty: bool,
    pub ms: u64,
}

/// Records in (cycle, id) order; cycle `k` holds the state after `k + 1`
/// forward passes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TelemetryLog {
    pub records: Vec<TelemetryRecord>,
}

impl TelemetryLog {
    pub fn cycles(&self) -> usize {
        self.records.last().map_or(0, |r| r.cycle + 1)
    }

    pub fn cycle(&self, k: usize) -> impl Iterator<Item = &TelemetryRecord> {
        self.records.iter().filter(move |r| r.cycle == k)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, SimError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| SimError::Telemetry {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }
}

/// The 28 received state floats, or `None` when nothing valid arrived.
fn receive(
    comm: &Comm,
    sender_state: &[f32],
    seed: u64,
    cycle: usize,
    receiver: usize,
    face: Face,
) -> Result<Option<Vec<f32>>, SimError> {
    match comm {
        Comm::Ideal => Ok(Some(sender_state.to_vec())),
        Comm::Protocol { channel, config } => {
            let mut rng = ChaCha8Rng::seed_from_u64(hash_key(&[
                seed,
                cycle as u64,
                receiver as u64,
                face.index() as u64,
            ]));
            let out = exchange(&Frame::state_message(sender_state), channel, config, &mut rng)?;
            Ok(out
                .frame
                .filter(|f| f.payload.first() == Some(&1.0))
                .map(|f| f.payload[1..].to_vec()))
        }
    }
}

/// Applies `plan`, then runs `assembly.config.cycles` synchronous cycles.
/// Messages are read from the previous cycle's states (double buffering).
pub fn run_cycles(assembly: &mut Assembly, plan: &FaultPlan) -> Result<TelemetryLog, SimError> {
    inject_faults(assembly, plan)?;
    let c = STATE_CHANNELS;
    let n = assembly.len();
    let cfg = assembly.config.clone();
    let cycle_ms = assembly.cycle_ms();
    let net = CellNet::new(&assembly.params);
    let mut log = TelemetryLog {
        records: Vec::with_capacity(cfg.cycles * n),
    };
    let mut lagged = vec![false; n];

    for cycle in 0..cfg.cycles {
        let current = assembly.state_matrix();
        let active: Vec<usize> = (0..n)
            .filter(|&i| {
                let b = &assembly.bricks[i];
                !b.is_faulty() && b.state[0] > cfg.alive_threshold
            })
            .filter(|&i| {
                if cfg.lag_prob <= 0.0 || lagged[i] {
                    return true;
                }
                let u = crate::rng::firing_uniform(hash_key(&[cfg.seed, 0x5ce4]), cycle as u64, i as u64);
                (u as f64) >= cfg.lag_prob
            })
            .collect();
        let mut updated = vec![false; n];
        for &i in &active {
            updated[i] = true;
        }
        for i in 0..n {
            lagged[i] = !assembly.bricks[i].is_faulty() && !updated[i];
        }

        let rows: Vec<Vec<f32>> = active
            .par_iter()
            .map(|&i| -> Result<Vec<f32>, SimError> {
                let mut row = vec![0.0f32; 7 * c];
                row[..c].copy_from_slice(current.row(i).as_slice().expect("contiguous"));
                for face in Face::ALL {
                    let Some(j) = assembly.live_link(i, face) else { continue };
                    if assembly.bricks[j].is_faulty() {
                        continue;
                    }
                    let sender = current.row(j);
                    let msg = receive(&assembly.comm, sender.as_slice().expect("contiguous"), cfg.seed, cycle, i, face)?;
                    if let Some(v) = msg {
                        let at = (face.index() + 1) * c;
                        row[at..at + c].copy_from_slice(&v);
                    }
                }
                Ok(row)
            })
            .collect::<Result<_, _>>()?;

        if !active.is_empty() {
            let input = Array2::from_shape_vec((active.len(), 7 * c), rows.concat()).expect("row width");
            let acts = net.forward(input.view());
            for (k, &i) in active.iter().enumerate() {
                let delta = acts.delta.slice(s![k, ..]);
                if delta.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::NonFinite { cycle, brick: i });
                }
                let state = &mut assembly.bricks[i].state;
                for (s, &d) in state[1..].iter_mut().zip(delta.iter()) {
                    *s += d;
                }
            }
        }

        let ms = (cycle as u64 + 1) * cycle_ms;
        for b in &assembly.bricks {
            log.records.push(TelemetryRecord {
                cycle,
                id: b.id,
                pos: b.pos,
                state: b.state.clone(),
                guess: b.guess(),
                faulty: b.is_faulty(),
                ms,
            });
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    /// Per cycle, fraction of non-faulty bricks predicting the true label.
    pub curve: Vec<f64>,
    pub converged: bool,
}

impl ConsensusReport {
    pub fn final_fraction(&self) -> f64 {
        self.curve.last().copied().unwrap_or(0.0)
    }
}

pub fn consensus_report(log: &TelemetryLog, true_label: usize) -> ConsensusReport {
    let cycles = log.cycles();
    let mut hits = vec![0usize; cycles];
    let mut totals = vec![0usize; cycles];
    for r in log.records.iter().filter(|r| !r.faulty) {
        totals[r.cycle] += 1;
        if r.guess == true_label {
            hits[r.cycle] += 1;
        }
    }
    let curve: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    let converged = curve.last() == Some(&1.0);
    ConsensusReport { curve, converged }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Neighbour id heard on each face of each brick.
    pub observed: Vec<[Option<usize>; 6]>,
    /// Intended links that were not observed, as (brick id, face).
    pub missing: Vec<(usize, Face)>,
    pub reached: Vec<bool>,
    /// Shape rebuilt from observed links, anchored at the initiator.
    pub reconstruction: VoxelGrid,
}

/// Flood-propagated identifier probe started at `initiator`. Each brick that
/// receives the probe announces its id on every face and forwards the probe.
pub fn run_id_probe(assembly: &Assembly, initiator: usize) -> Result<ProbeReport, SimError> {
    let n = assembly.len();
    if initiator >= n {
        return Err(SimError::UnknownBrick(initiator));
    }
    let mut observed = vec![[None; 6]; n];
    let mut reached = vec![false; n];
    let mut queue = VecDeque::new();
    if !assembly.bricks[initiator].is_faulty() {
        reached[initiator] = true;
        queue.push_back(initiator);
    }
    while let Some(i) = queue.pop_front() {
        for face in Face::ALL {
            let Some(j) = assembly.live_link(i, face) else { continue };
            if assembly.bricks[j].is_faulty() {
                continue;
            }
            observed[j][face.opposite().index()] = Some(i);
            if !reached[j] {
                reached[j] = true;
                queue.push_back(j);
            }
        }
    }
    let mut missing = Vec::new();
    for b in &assembly.bricks {
        for face in Face::ALL {
            if b.links[face.index()].is_some() && observed[b.id][face.index()].is_none() {
                missing.push((b.id, face));
            }
        }
    }
    // Rebuild positions by walking observed links from the initiator.
    let mut reconstruction = VoxelGrid::new(assembly.dims).expect("assembly dims are valid");
    let mut placed: Vec<Option<[i64; 3]>> = vec![None; n];
    if reached[initiator] {
        let p = assembly.bricks[initiator].pos;
        placed[initiator] = Some([p[0] as i64, p[1] as i64, p[2] as i64]);
        let mut queue = VecDeque::from([initiator]);
        while let Some(i) = queue.pop_front() {
            let here = placed[i].expect("queued bricks are placed");
            for face in Face::ALL {
                if let Some(j) = observed[i][face.index()] {
                    if placed[j].is_none() {
                        let o = face.offset();
                        placed[j] = Some([here[0] + o[0], here[1] + o[1], here[2] + o[2]]);
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    for p in placed.iter().flatten() {
        if let Some(v) = reconstruction.index_signed(*p) {
            reconstruction.set_index(v, true);
        }
    }
    Ok(ProbeReport {
        observed,
        missing,
        reached,
        reconstruction,
    })
}

/// One row of a fault sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fault_rate: f64,
    pub seed: u64,
    pub faulted: Vec<usize>,
    pub final_fraction: f64,
    pub converged: bool,
}

/// Runs every (rate, seed) pair from a fresh assembly state.
pub fn fault_sweep(
    assembly: &Assembly,
    label: usize,
    rates: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, SimError> {
    let jobs: Vec<(f64, u64)> = rates.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    jobs.par_iter()
        .map(|&(rate, seed)| {
            let mut a = assembly.clone();
            a.reset();
            a.config.seed = seed;
            let plan = FaultPlan::Fraction { fraction: rate, seed };
            let log = run_cycles(&mut a, &plan)?;
            let faulted = a.bricks.iter().filter(|b| b.is_faulty()).map(|b| b.id).collect();
            let report = consensus_report(&log, label);
            Ok(SweepRow {
                fault_rate: rate,
                seed,
                faulted,
                final_fraction: report.final_fraction(),
                converged: report.converged,
            })
        })
        .collect()
}

/// Mean final fraction per rate, in the order of `rates`.
pub fn sweep_means(rows: &[SweepRow], rates: &[f64]) -> Vec<f64> {
    rates
        .iter()
        .map(|&r| {
            let sel: Vec<f64> = rows.iter().filter(|x| x.fault_rate == r).map(|x| x.final_fraction).collect();
            sel.iter().sum::<f64>() / sel.len().max(1) as f64
        })
        .collect()
}
