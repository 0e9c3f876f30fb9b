//! Reverse-mode differentiation through a recorded rollout.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::engine::{advance_with, inject, Activations, CellNet, CellSet, NcaParams, CROSS_TAP_INDICES, NO_NEIGHBOR};

/// Gradient congruent to [`NcaParams`]: one flat f64 tensor per parameter
/// tensor, in [`NcaParams::tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub const KERNEL: usize = 0;
    pub const PERCEPTION_BIAS: usize = 1;
    pub const LAYER1: usize = 2;
    pub const LAYER1_BIAS: usize = 3;
    pub const LAYER2: usize = 4;
    pub const LAYER2_BIAS: usize = 5;

    pub fn zeros_like(params: &NcaParams) -> Self {
        Self {
            tensors: params
                .tensors()
                .iter()
                .map(|(_, _, d)| vec![0.0; d.len()])
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }
}

/// A constant per-cell vector added to a channel range after every step.
#[derive(Debug, Clone)]
pub struct Injection {
    pub channels: Range<usize>,
    /// `cells x channels.len()`.
    pub per_cell: Array2<f32>,
}

/// Everything the backward pass needs from a forward rollout. States are
/// compact (one row per cell); firing masks are kept as constants.
#[derive(Debug, Clone)]
pub struct Trace {
    pub cells: CellSet,
    /// `steps + 1` state matrices, initial through final.
    pub states: Vec<Array2<f32>>,
    pub activations: Vec<Activations>,
    pub fired: Vec<Vec<bool>>,
    pub injection: Option<Injection>,
    /// Per-cell perception bias, `cells x width`, held fixed over the rollout.
    pub feature_bias: Option<Array2<f32>>,
}

impl Trace {
    pub fn steps(&self) -> usize {
        self.activations.len()
    }

    pub fn final_state(&self) -> &Array2<f32> {
        self.states.last().expect("trace holds the initial state")
    }
}

/// Runs `steps` updates from `initial`, retaining activations and masks.
/// On a non-finite update returns `(step, cell)`.
pub fn record(
    params: &NcaParams,
    cells: CellSet,
    initial: Array2<f32>,
    steps: usize,
    firing_rate: f32,
    injection: Option<Injection>,
) -> Result<Trace, (usize, usize)> {
    record_with(params, cells, initial, steps, firing_rate, injection, None)
}

pub fn record_with(
    params: &NcaParams,
    cells: CellSet,
    initial: Array2<f32>,
    steps: usize,
    firing_rate: f32,
    injection: Option<Injection>,
    feature_bias: Option<Array2<f32>>,
) -> Result<Trace, (usize, usize)> {
    let net = CellNet::new(params);
    let mut states = Vec::with_capacity(steps + 1);
    let mut activations = Vec::with_capacity(steps);
    let mut fired = Vec::with_capacity(steps);
    states.push(initial);
    for t in 0..steps {
        let current = states.last().expect("non-empty").view();
        let bias = feature_bias.as_ref().map(|b| b.view());
        let mut adv = advance_with(current, &cells, &net, t as u64, firing_rate, bias).map_err(|k| (t, k))?;
        if let Some(inj) = &injection {
            inject(&mut adv.next, &cells, inj.channels.clone(), inj.per_cell.view());
        }
        states.push(adv.next);
        activations.push(adv.activations);
        fired.push(adv.fired);
    }
    Ok(Trace {
        cells,
        states,
        activations,
        fired,
        injection,
        feature_bias,
    })
}

/// Output of [`backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Gradients,
    /// Gradient with respect to the initial state matrix.
    pub initial_state: Array2<f32>,
    /// Gradient with respect to each cell's injected vector.
    pub injection: Option<Array2<f64>>,
    /// Gradient with respect to each cell's perception bias.
    pub feature_bias: Option<Array2<f64>>,
}

fn column_sums(m: &Array2<f32>, into: &mut [f64]) {
    for row in m.axis_iter(Axis(0)) {
        for (acc, &v) in into.iter_mut().zip(row.iter()) {
            *acc += v as f64;
        }
    }
}

fn accumulate(into: &mut [f64], m: &Array2<f32>) {
    for (acc, &v) in into.iter_mut().zip(m.iter()) {
        *acc += v as f64;
    }
}

/// Backpropagates `d_final` (gradient of the loss with respect to the final
/// state matrix) through every recorded step.
pub fn backward(params: &NcaParams, trace: &Trace, d_final: Array2<f32>) -> Backward {
    let c = params.channels();
    let width = params.width();
    let net = CellNet::new(params);
    let cross_t = net.cross().t();
    let layer1_t = params.layer1.t();
    let layer2_t = params.layer2.t();
    let cells = &trace.cells;

    let mut grads = Gradients::zeros_like(params);
    let mut d_cross = vec![0.0f64; 7 * c * width];
    let mut d_injection = trace
        .injection
        .as_ref()
        .map(|inj| Array2::<f64>::zeros(inj.per_cell.dim()));
    let mut d_feature_bias = trace
        .feature_bias
        .as_ref()
        .map(|b| Array2::<f64>::zeros(b.dim()));
    let mut g = d_final;

    for t in (0..trace.steps()).rev() {
        let acts = &trace.activations[t];
        let fired = &trace.fired[t];

        if let (Some(inj), Some(d_inj)) = (&trace.injection, d_injection.as_mut()) {
            for (k, mut d) in d_inj.axis_iter_mut(Axis(0)).enumerate() {
                let row = g.slice(s![cells.rows[k] as usize, inj.channels.clone()]);
                Zip::from(&mut d).and(row).for_each(|a, &b| *a += b as f64);
            }
        }

        // Through tanh, gated by the firing mask.
        let mut d_z2 = Array2::<f32>::zeros(acts.delta.dim());
        for (k, mut row) in d_z2.axis_iter_mut(Axis(0)).enumerate() {
            if !fired[k] {
                continue;
            }
            let upstream = g.slice(s![cells.rows[k] as usize, 1..]);
            Zip::from(&mut row)
                .and(upstream)
                .and(acts.delta.row(k))
                .for_each(|d, &up, &u| *d = up * (1.0 - u * u));
        }
        accumulate(&mut grads.tensors[Gradients::LAYER2], &acts.hidden.t().dot(&d_z2));
        column_sums(&d_z2, &mut grads.tensors[Gradients::LAYER2_BIAS]);

        let mut d_hidden = d_z2.dot(&layer2_t);
        Zip::from(&mut d_hidden)
            .and(&acts.hidden)
            .for_each(|d, &h| if h <= 0.0 { *d = 0.0 });
        accumulate(&mut grads.tensors[Gradients::LAYER1], &acts.features.t().dot(&d_hidden));
        column_sums(&d_hidden, &mut grads.tensors[Gradients::LAYER1_BIAS]);

        let mut d_features = d_hidden.dot(&layer1_t);
        Zip::from(&mut d_features)
            .and(&acts.features)
            .for_each(|d, &f| if f <= 0.0 { *d = 0.0 });
        let input = cells.gather(trace.states[t].view());
        accumulate(&mut d_cross, &input.t().dot(&d_features));
        column_sums(&d_features, &mut grads.tensors[Gradients::PERCEPTION_BIAS]);
        if let Some(d) = d_feature_bias.as_mut() {
            Zip::from(d).and(&d_features).for_each(|a, &b| *a += b as f64);
        }

        let d_input = d_features.dot(&cross_t);
        scatter_input_grad(&mut g, cells, d_input.view(), c);
    }

    // Unpack the stacked cross kernel gradient into the full 27-tap layout.
    let kernel = &mut grads.tensors[Gradients::KERNEL];
    for (block, &tap) in CROSS_TAP_INDICES.iter().enumerate() {
        let src = &d_cross[block * c * width..(block + 1) * c * width];
        kernel[tap * c * width..(tap + 1) * c * width].copy_from_slice(src);
    }

    Backward {
        params: grads,
        initial_state: g,
        injection: d_injection,
        feature_bias: d_feature_bias,
    }
}

fn scatter_input_grad(g: &mut Array2<f32>, cells: &CellSet, d_input: ArrayView2<'_, f32>, c: usize) {
    for (k, d_row) in d_input.axis_iter(Axis(0)).enumerate() {
        let own = cells.rows[k] as usize;
        Zip::from(g.row_mut(own))
            .and(d_row.slice(s![0..c]))
            .for_each(|a, &b| *a += b);
        for (f, &n) in cells.neighbors[k].iter().enumerate() {
            if n != NO_NEIGHBOR {
                Zip::from(g.row_mut(n as usize))
                    .and(d_row.slice(s![(f + 1) * c..(f + 2) * c]))
                    .for_each(|a, &b| *a += b);
            }
        }
    }
}

/// Mean softmax cross-entropy of the trailing 7 channels of each listed row
/// against its label, with the gradient written into a `rows x channels`
/// matrix shaped like `states`.
pub fn cross_entropy_rows(
    states: ArrayView2<'_, f32>,
    rows: &[u32],
    labels: &[usize],
) -> (f64, usize, Array2<f32>) {
    let c = states.ncols();
    let k = crate::engine::LOGIT_CHANNELS;
    let n = rows.len().max(1) as f64;
    let mut grad = Array2::<f32>::zeros(states.dim());
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (&r, &label) in rows.iter().zip(labels) {
        let logits = states.slice(s![r as usize, c - k..c]);
        let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Array1<f64> = logits.mapv(|v| (v as f64 - max).exp());
        let total = exps.sum();
        loss += total.ln() + max - logits[label] as f64;
        if crate::engine::argmax(logits) == label {
            correct += 1;
        }
        let mut g = grad.slice_mut(s![r as usize, c - k..c]);
        for j in 0..k {
            let p = exps[j] / total;
            let y = if j == label { 1.0 } else { 0.0 };
            g[j] = ((p - y) / n) as f32;
        }
    }
    (loss / n, correct, grad)
}
