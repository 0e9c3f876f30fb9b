//! Independent reference implementations shared by the integration tests and
//! the acceptance runner. Everything here is written per voxel in f64 and
//! avoids the library's row-batched kernels.
#![allow(dead_code)]

use std::collections::VecDeque;

use morphobricks::damage::{Conditioning, DamageNcaParams, DamageSample};
use morphobricks::engine::NcaParams;
use morphobricks::rng::firing_uniform;
use morphobricks::voxel::VoxelGrid;
use rand::Rng;

pub mod checks;
pub mod props;

pub type State = Vec<Vec<f64>>;

pub fn linear(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

pub fn unlinear(dims: [usize; 3], i: usize) -> [usize; 3] {
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}

fn offset(dims: [usize; 3], v: usize, d: [i64; 3]) -> Option<usize> {
    let p = unlinear(dims, v);
    let q: Vec<i64> = (0..3).map(|a| p[a] as i64 + d[a]).collect();
    if (0..3).all(|a| q[a] >= 0 && q[a] < dims[a] as i64) {
        Some(linear(dims, q[0] as usize, q[1] as usize, q[2] as usize))
    } else {
        None
    }
}

/// The cell network with every weight widened to f64. The kernel is read as
/// a dense 3x3x3 tensor so masked taps must already be zero to matter.
#[derive(Clone, Debug)]
pub struct NaiveNca {
    pub c: usize,
    pub w: usize,
    /// `[dz][dy][dx][channel][feature]`, flattened.
    pub kernel: Vec<f64>,
    pub pb: Vec<f64>,
    pub l1: Vec<f64>,
    pub b1: Vec<f64>,
    pub l2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl NaiveNca {
    pub fn from_params(p: &NcaParams) -> Self {
        let t = p.tensors();
        Self {
            c: p.channels(),
            w: p.width(),
            kernel: widen(t[0].2),
            pb: widen(t[1].2),
            l1: widen(t[2].2),
            b1: widen(t[3].2),
            l2: widen(t[4].2),
            b2: widen(t[5].2),
        }
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.kernel,
            &mut self.pb,
            &mut self.l1,
            &mut self.b1,
            &mut self.l2,
            &mut self.b2,
        ]
    }

    /// Post-ReLU perception of voxel `v`, zero outside the grid.
    pub fn features(&self, dims: [usize; 3], state: &State, v: usize, extra: Option<&[f64]>, signs: &mut Vec<bool>) -> Vec<f64> {
        let (c, w) = (self.c, self.w);
        let mut f = self.pb.clone();
        if let Some(e) = extra {
            f.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let Some(n) = offset(dims, v, [dx, dy, dz]) else {
                        continue;
                    };
                    let tap = ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize;
                    for ch in 0..c {
                        let s = state[n][ch];
                        if s == 0.0 {
                            continue;
                        }
                        let row = &self.kernel[(tap * c + ch) * w..(tap * c + ch + 1) * w];
                        for j in 0..w {
                            f[j] += s * row[j];
                        }
                    }
                }
            }
        }
        signs.extend(f.iter().map(|&x| x > 0.0));
        f.iter_mut().for_each(|x| *x = x.max(0.0));
        f
    }

    /// Update of voxel `v`; the sign of every ReLU input is appended to `signs`.
    pub fn delta(&self, dims: [usize; 3], state: &State, v: usize, extra: Option<&[f64]>, signs: &mut Vec<bool>) -> Vec<f64> {
        let w = self.w;
        let out = self.c - 1;
        let f = self.features(dims, state, v, extra, signs);
        let mut h = self.b1.clone();
        for i in 0..w {
            for j in 0..w {
                h[j] += f[i] * self.l1[i * w + j];
            }
        }
        signs.extend(h.iter().map(|&x| x > 0.0));
        h.iter_mut().for_each(|x| *x = x.max(0.0));
        let mut d = self.b2.clone();
        for i in 0..w {
            for j in 0..out {
                d[j] += h[i] * self.l2[i * out + j];
            }
        }
        d.iter_mut().for_each(|x| *x = x.tanh());
        d
    }

    /// One synchronous step of the cells in `alive`; a cell fires when its
    /// keyed uniform draw is below `rate` (always at rate 1).
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        dims: [usize; 3],
        state: &State,
        alive: &[bool],
        rate: f32,
        seed: u64,
        step: u64,
        extra: Option<&[f64]>,
        signs: &mut Vec<bool>,
    ) -> State {
        let mut next = state.clone();
        for v in 0..state.len() {
            if !alive[v] {
                continue;
            }
            if rate < 1.0 && firing_uniform(seed, step, v as u64) >= rate {
                continue;
            }
            let d = self.delta(dims, state, v, extra, signs);
            for (ch, dv) in d.iter().enumerate() {
                next[v][ch + 1] += dv;
            }
        }
        next
    }
}

pub fn init_state(grid: &VoxelGrid, channels: usize) -> State {
    (0..grid.len())
        .map(|v| {
            let mut s = vec![0.0; channels];
            if grid.is_occupied(v) {
                s[0] = 1.0;
            }
            s
        })
        .collect()
}

/// Softmax cross-entropy of the trailing 7 channels, mean over `rows`.
pub fn mean_cross_entropy(state: &State, rows: &[usize], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (&v, &l) in rows.iter().zip(labels) {
        let s = &state[v];
        let logits = &s[s.len() - 7..];
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
        total += z.ln() + m - logits[l];
    }
    total / rows.len() as f64
}

/// A loss value with the ReLU activation pattern that produced it. Two
/// evaluations with equal patterns lie in one smooth piece of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Traced {
    pub loss: f64,
    pub signs: Vec<bool>,
}

/// Classification loss of a rollout from `init_state(grid)`.
pub fn classification_loss(net: &NaiveNca, grid: &VoxelGrid, label: usize, steps: usize, rate: f32, seed: u64) -> Traced {
    let dims = grid.dims();
    let alive: Vec<bool> = grid.occupancy().to_vec();
    let mut s = init_state(grid, net.c);
    let mut signs = Vec::new();
    for t in 0..steps {
        s = net.step(dims, &s, &alive, rate, seed, t as u64, None, &mut signs);
    }
    let rows: Vec<usize> = grid.occupied_indices().collect();
    let labels = vec![label; rows.len()];
    Traced {
        loss: mean_cross_entropy(&s, &rows, &labels),
        signs,
    }
}

/// Relative error with a magnitude floor below which differences are
/// measured absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-4;

/// Central difference of `loss` in coordinate `i` of the picked tensor, or
/// `None` when a ReLU input changes sign within ±h (the difference would
/// straddle a kink and the derivative is not what it measures).
pub fn central_difference<T: Clone>(
    base: &T,
    pick: impl Fn(&mut T) -> &mut Vec<f64>,
    i: usize,
    loss: impl Fn(&T) -> Traced,
) -> Option<f64> {
    let centre = loss(base);
    let mut plus = base.clone();
    pick(&mut plus)[i] += FD_STEP;
    let mut minus = base.clone();
    pick(&mut minus)[i] -= FD_STEP;
    let (p, m) = (loss(&plus), loss(&minus));
    (p.signs == centre.signs && m.signs == centre.signs).then(|| (p.loss - m.loss) / (2.0 * FD_STEP))
}

// ---------------------------------------------------------------------------
// Damage model reference

/// Every tensor of a damage model in f64, in the model's checkpoint order.
#[derive(Clone, Debug)]
pub struct NaiveDamage {
    pub net: NaiveNca,
    pub hidden: usize,
    pub mode: Conditioning,
    pub enc_channels: usize,
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub proj: Vec<f64>,
    pub proj_b: Vec<f64>,
    pub cond: Vec<f64>,
}

impl NaiveDamage {
    pub fn from_params(p: &DamageNcaParams) -> Self {
        let e = &p.encoder;
        Self {
            net: NaiveNca::from_params(&p.core),
            hidden: p.hidden,
            mode: p.conditioning,
            enc_channels: e.channels,
            conv_w: widen(e.conv_weight.as_slice().unwrap()),
            conv_b: widen(e.conv_bias.as_slice().unwrap()),
            proj: widen(e.proj.as_slice().unwrap()),
            proj_b: widen(e.proj_bias.as_slice().unwrap()),
            cond: p.cond_proj.as_ref().map_or(Vec::new(), |c| widen(c.as_slice().unwrap())),
        }
    }

    /// Tensor `k` in the order the trainer reports gradients.
    pub fn tensor(&mut self, k: usize) -> &mut Vec<f64> {
        match k {
            0..=5 => self.net.tensors_mut().into_iter().nth(k).unwrap(),
            6 => &mut self.conv_w,
            7 => &mut self.conv_b,
            8 => &mut self.proj,
            9 => &mut self.proj_b,
            _ => &mut self.cond,
        }
    }

    /// Shape embedding: crop, centre in 15³, 3³/stride-3 conv, ReLU, dense.
    pub fn embed(&self, target: &VoxelGrid, signs: &mut Vec<bool>) -> Vec<f64> {
        let (lo, hi) = target.bounding_box().unwrap();
        let size: Vec<usize> = (0..3).map(|a| hi[a] - lo[a] + 1).collect();
        let off: Vec<usize> = (0..3).map(|a| (15 - size[a]) / 2).collect();
        let occupied = |p: [usize; 3]| {
            let q: Vec<i64> = (0..3).map(|a| p[a] as i64 - off[a] as i64 + lo[a] as i64).collect();
            (0..3).all(|a| q[a] >= lo[a] as i64 && q[a] <= hi[a] as i64)
                && target.get(q[0] as usize, q[1] as usize, q[2] as usize)
        };
        let h = self.hidden;
        let mut e = self.proj_b.clone();
        for ch in 0..self.enc_channels {
            for bz in 0..5 {
                for by in 0..5 {
                    for bx in 0..5 {
                        let mut a = self.conv_b[ch];
                        for kz in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    if occupied([3 * bx + kx, 3 * by + ky, 3 * bz + kz]) {
                                        a += self.conv_w[ch * 27 + kx + 3 * (ky + 3 * kz)];
                                    }
                                }
                            }
                        }
                        signs.push(a > 0.0);
                        let a = a.max(0.0);
                        let i = ch * 125 + bx + 5 * (by + 5 * bz);
                        for j in 0..h {
                            e[j] += a * self.proj[i * h + j];
                        }
                    }
                }
            }
        }
        e
    }

    /// Mean damage cross-entropy over every cell of every sample.
    pub fn loss(&self, targets: &[VoxelGrid], samples: &[&DamageSample], seeds: &[u64], steps: usize, rate: f32) -> Traced {
        let (mut total, mut cells) = (0.0, 0usize);
        let mut signs = Vec::new();
        let w = self.net.w;
        for (s, &seed) in samples.iter().zip(seeds) {
            let e = self.embed(&targets[s.target], &mut signs);
            let grid = &s.damaged;
            let dims = grid.dims();
            let alive = grid.occupancy().to_vec();
            let mut state = init_state(grid, self.net.c);
            let bias: Option<Vec<f64>> = (self.mode == Conditioning::PerceptionInput).then(|| {
                (0..w)
                    .map(|j| (0..self.hidden).map(|i| e[i] * self.cond[i * w + j]).sum())
                    .collect()
            });
            if self.mode == Conditioning::HiddenInit {
                for v in grid.occupied_indices() {
                    state[v][1..1 + self.hidden].copy_from_slice(&e);
                }
            }
            for t in 0..steps {
                state = self.net.step(dims, &state, &alive, rate, seed, t as u64, bias.as_deref(), &mut signs);
                if self.mode == Conditioning::HiddenEveryStep {
                    for v in grid.occupied_indices() {
                        for i in 0..self.hidden {
                            state[v][1 + i] += e[i];
                        }
                    }
                }
            }
            let rows: Vec<usize> = grid.occupied_indices().collect();
            let labels: Vec<usize> = s.labels.iter().map(|l| l.index()).collect();
            total += mean_cross_entropy(&state, &rows, &labels) * rows.len() as f64;
            cells += rows.len();
        }
        Traced {
            loss: total / cells as f64,
            signs,
        }
    }
}

// ---------------------------------------------------------------------------
// Grid oracles

/// Per-voxel damage label by brute force: 0 when intact, otherwise 1 + the
/// first face (−X, +X, −Y, +Y, −Z, +Z) whose neighbour was removed.
pub fn brute_labels(original: &VoxelGrid, damaged: &VoxelGrid) -> Vec<usize> {
    let dims = original.dims();
    let faces: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    let mut out = Vec::new();
    for v in 0..original.len() {
        if !damaged.is_occupied(v) {
            continue;
        }
        let mut label = 0;
        for (f, d) in faces.iter().enumerate() {
            if let Some(n) = offset(dims, v, *d) {
                if original.is_occupied(n) && !damaged.is_occupied(n) {
                    label = f + 1;
                    break;
                }
            }
        }
        out.push(label);
    }
    out
}

/// 6-connected component count by BFS over coordinates.
pub fn bfs_components(grid: &VoxelGrid) -> usize {
    let dims = grid.dims();
    let mut seen = vec![false; grid.len()];
    let mut count = 0;
    for start in 0..grid.len() {
        if !grid.is_occupied(start) || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(v) = q.pop_front() {
            for d in [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]] {
                if let Some(n) = offset(dims, v, d) {
                    if grid.is_occupied(n) && !seen[n] {
                        seen[n] = true;
                        q.push_back(n);
                    }
                }
            }
        }
    }
    count
}

pub fn random_grid<R: Rng + ?Sized>(rng: &mut R, max: usize, density: f64) -> VoxelGrid {
    let dims = [rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max)];
    let mut g = VoxelGrid::from_fn(dims, |_, _, _| rng.random_bool(density)).unwrap();
    if g.occupied_count() == 0 {
        g.set_index(rng.random_range(0..g.len()), true);
    }
    g
}

/// A random connected shape grown from one voxel.
pub fn random_connected<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 3], cells: usize) -> VoxelGrid {
    let mut g = VoxelGrid::new(dims).unwrap();
    let start = rng.random_range(0..g.len());
    g.set_index(start, true);
    let mut members = vec![start];
    let target = cells.min(g.len());
    while members.len() < target {
        let v = members[rng.random_range(0..members.len())];
        let d = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]][rng.random_range(0..6)];
        if let Some(n) = offset(dims, v, d) {
            if !g.is_occupied(n) {
                g.set_index(n, true);
                members.push(n);
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Finite-difference instances

/// Random parameters with a non-zero final layer so every tensor carries
/// gradient.
pub fn live_params<R: Rng + ?Sized>(rng: &mut R, channels: usize, width: usize) -> NcaParams {
    let mut p = NcaParams::init(channels, width, rng);
    let s = 1.0 / (width as f32).sqrt();
    p.layer2.mapv_inplace(|_| rng.random_range(-s..=s));
    p.layer2_bias.mapv_inplace(|_| rng.random_range(-s..=s));
    p
}

/// Coordinates worth checking in a kernel-shaped tensor: unmasked taps only.
pub fn cross_kernel_coord<R: Rng + ?Sized>(rng: &mut R, channels: usize, width: usize) -> usize {
    let taps = morphobricks::engine::CROSS_TAP_INDICES;
    let tap = taps[rng.random_range(0..taps.len())];
    (tap * channels + rng.random_range(0..channels)) * width + rng.random_range(0..width)
}

pub struct FdOutcome {
    pub max_rel: f64,
    pub checked: usize,
    /// Kink-free coordinates compared, per tensor.
    pub per_tensor: [usize; 6],
    /// Coordinates redrawn because ±h crossed a ReLU kink.
    pub redrawn: usize,
    /// Masked kernel taps whose analytic gradient is not exactly zero.
    pub masked_nonzero: usize,
}

/// One random classification instance (≤ 4³, ≤ 8 steps) checked on
/// `per_tensor` coordinates of every tensor.
pub fn classification_fd(seed: u64, per_tensor: usize) -> FdOutcome {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (c, w) = (morphobricks::engine::STATE_CHANNELS, morphobricks::engine::FEATURE_CHANNELS);
    let params = live_params(&mut rng, c, w);
    let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
    let cells = rng.random_range(1..=dims[0] * dims[1] * dims[2]);
    let grid = random_connected(&mut rng, dims, cells);
    let label = rng.random_range(0..7);
    let steps = rng.random_range(1..=8);
    let rate = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
    let fire_seed = rng.random::<u64>();
    let (_, grads) = morphobricks::training::loss_and_gradient(&params, &grid, label, steps, rate, fire_seed).unwrap();
    let base = NaiveNca::from_params(&params);
    let loss = |n: &NaiveNca| classification_loss(n, &grid, label, steps, rate, fire_seed);

    let mask = params.mask();
    let mut masked_nonzero = 0;
    for tap in 0..27 {
        if !mask.is_active(tap) {
            let block = &grads.tensors[0][tap * c * w..(tap + 1) * c * w];
            masked_nonzero += block.iter().filter(|&&g| g != 0.0).count();
        }
    }
    let (mut max_rel, mut checked, mut redrawn) = (0.0f64, 0, 0);
    let mut per_tensor_checked = [0; 6];
    for k in 0..6 {
        let (mut done, mut tries) = (0, 0);
        while done < per_tensor && tries < 20 * per_tensor {
            tries += 1;
            let i = if k == 0 {
                cross_kernel_coord(&mut rng, c, w)
            } else {
                rng.random_range(0..grads.tensors[k].len())
            };
            let Some(numeric) = central_difference(&base, |n| n.tensors_mut().into_iter().nth(k).unwrap(), i, loss) else {
                redrawn += 1;
                continue;
            };
            done += 1;
            per_tensor_checked[k] += 1;
            let r = rel_err(grads.tensors[k][i], numeric, FD_FLOOR);
            max_rel = max_rel.max(r);
            checked += 1;
        }
    }
    FdOutcome {
        max_rel,
        checked,
        per_tensor: per_tensor_checked,
        redrawn,
        masked_nonzero,
    }
}

/// One random damage-model instance: two targets, a batch of two damaged
/// samples, gradients of every tensor including the encoder's.
pub fn damage_fd(seed: u64, mode: Conditioning, per_tensor: usize) -> (f64, Vec<usize>) {
    use morphobricks::damage::{damage_gradient, damage_sample};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let hidden = rng.random_range(2..=5);
    let mut params = DamageNcaParams::init(hidden, 16, 2, mode, &mut rng);
    let s = 0.25;
    params.core.layer2.mapv_inplace(|_| rng.random_range(-s..=s));
    params.core.layer2_bias.mapv_inplace(|_| rng.random_range(-s..=s));
    let targets: Vec<VoxelGrid> = (0..2)
        .map(|_| {
            let dims = [rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(1..=4)];
            let n = rng.random_range(3..=dims[0] * dims[1] * dims[2]);
            random_connected(&mut rng, dims, n)
        })
        .collect();
    let samples: Vec<DamageSample> = (0..2).map(|t| damage_sample(&targets, t, &mut rng).unwrap()).collect();
    let refs: Vec<&DamageSample> = samples.iter().collect();
    let seeds = [rng.random::<u64>(), rng.random::<u64>()];
    let steps = rng.random_range(1..=6);
    let rate = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
    let (_, _, _, grads) = damage_gradient(&params, &targets, &refs, &seeds, steps, rate).unwrap();
    let base = NaiveDamage::from_params(&params);
    let loss = |n: &NaiveDamage| n.loss(&targets, &refs, &seeds, steps, rate);
    let c = params.channels();
    let mut max_rel = 0.0f64;
    let mut checked = vec![0; grads.len()];
    for k in 0..grads.len() {
        let mut tries = 0;
        while checked[k] < per_tensor && tries < 20 * per_tensor {
            tries += 1;
            let i = if k == 0 {
                cross_kernel_coord(&mut rng, c, 16)
            } else {
                rng.random_range(0..grads[k].len())
            };
            let Some(numeric) = central_difference(&base, |n| n.tensor(k), i, loss) else {
                continue;
            };
            checked[k] += 1;
            max_rel = max_rel.max(rel_err(grads[k][i], numeric, FD_FLOOR));
        }
    }
    (max_rel, checked)
}
