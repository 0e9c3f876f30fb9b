use super::TrainError;

/// Parameter sets the optimizer can update in place.
pub trait Trainable {
    /// Flat tensors, in the same order as the gradient tensors.
    fn tensors_mut(&mut self) -> Vec<&mut [f32]>;

    /// Re-establishes structural constraints after an update.
    fn after_step(&mut self) {}
}

impl Trainable for crate::engine::NcaParams {
    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        crate::engine::NcaParams::tensors_mut(self)
    }

    fn after_step(&mut self) {
        self.apply_mask();
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_params<P: Trainable>(params: &mut P) -> Self {
        let shapes: Vec<usize> = params.tensors_mut().iter().map(|t| t.len()).collect();
        Self::new(&shapes)
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `clip`; returns the factor.
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip && norm > 0.0 {
        let factor = clip / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= factor);
        factor
    } else {
        1.0
    }
}

/// Global-norm clipping followed by a bias-corrected Adam update; structural
/// constraints (the kernel mask) are re-applied afterwards. Returns the
/// pre-clip gradient norm.
pub fn adam_step<P: Trainable>(
    params: &mut P,
    grads: &mut [Vec<f64>],
    state: &mut AdamState,
    learning_rate: f64,
    clip: f64,
) -> Result<f64, TrainError> {
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    let norm = global_norm(grads);
    clip_global_norm(grads, clip);
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len()
        || tensors.iter().zip(grads.iter()).any(|(p, g)| p.len() != g.len())
        || state.m.len() != grads.len()
    {
        return Err(TrainError::ShapeMismatch);
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, p) in tensors.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let update = learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + state.epsilon);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    drop(tensors);
    params.after_step();
    Ok(norm)
}
