use ndarray::{s, Array1, Array2};
use rand::Rng;

/// Taps of a 3×3×3 kernel, indexed `(dz+1)*9 + (dy+1)*3 + (dx+1)`.
pub const KERNEL_TAPS: usize = 27;
/// Taps kept by the cross-shaped mask.
pub const CROSS_TAPS: usize = 7;

/// Kernel taps of the cross, in input-block order: centre, then the six faces
/// in (−X, +X, −Y, +Y, −Z, +Z) order.
pub const CROSS_TAP_INDICES: [usize; CROSS_TAPS] = [13, 12, 14, 10, 16, 4, 22];

pub fn kernel_tap(dx: i64, dy: i64, dz: i64) -> usize {
    ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize
}

/// Fixed binary mask over the 27 kernel taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelMask([bool; KERNEL_TAPS]);

impl KernelMask {
    pub fn cross() -> Self {
        let mut taps = [false; KERNEL_TAPS];
        for t in CROSS_TAP_INDICES {
            taps[t] = true;
        }
        Self(taps)
    }

    pub fn is_active(&self, tap: usize) -> bool {
        self.0[tap]
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&t| t).count()
    }
}

impl Default for KernelMask {
    fn default() -> Self {
        Self::cross()
    }
}

/// Learnable weights of the per-cell update network.
///
/// The perception kernel is stored for all 27 taps as a `(27 * channels) x width`
/// matrix whose row `tap * channels + c` maps input channel `c` at `tap`.
/// Off-cross rows stay exactly zero. Layer matrices are `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct NcaParams {
    channels: usize,
    width: usize,
    mask: KernelMask,
    pub kernel: Array2<f32>,
    pub perception_bias: Array1<f32>,
    pub layer1: Array2<f32>,
    pub layer1_bias: Array1<f32>,
    pub layer2: Array2<f32>,
    pub layer2_bias: Array1<f32>,
}

impl NcaParams {
    /// All-zero parameters for `channels` state channels and `width` features.
    pub fn zeros(channels: usize, width: usize) -> Self {
        assert!(channels >= 2 && width >= 1, "degenerate network shape");
        Self {
            channels,
            width,
            mask: KernelMask::cross(),
            kernel: Array2::zeros((KERNEL_TAPS * channels, width)),
            perception_bias: Array1::zeros(width),
            layer1: Array2::zeros((width, width)),
            layer1_bias: Array1::zeros(width),
            layer2: Array2::zeros((width, channels - 1)),
            layer2_bias: Array1::zeros(channels - 1),
        }
    }

    /// Perception and first layer uniform in ±1/sqrt(fan-in); the final layer
    /// starts at zero so the initial rollout is the identity.
    pub fn init<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, width);
        let s = 1.0 / ((CROSS_TAPS * channels) as f32).sqrt();
        for &tap in &CROSS_TAP_INDICES {
            p.kernel
                .slice_mut(s![tap * channels..(tap + 1) * channels, ..])
                .mapv_inplace(|_| rng.random_range(-s..=s));
        }
        p.perception_bias.mapv_inplace(|_| rng.random_range(-s..=s));
        let s = 1.0 / (width as f32).sqrt();
        p.layer1.mapv_inplace(|_| rng.random_range(-s..=s));
        p.layer1_bias.mapv_inplace(|_| rng.random_range(-s..=s));
        p
    }

    /// The classifier shape: 28 state channels, 84 features.
    pub fn classifier<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::init(super::STATE_CHANNELS, super::FEATURE_CHANNELS, rng)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask(&self) -> &KernelMask {
        &self.mask
    }

    /// Zeroes every off-cross kernel tap.
    pub fn apply_mask(&mut self) {
        let c = self.channels;
        for tap in 0..KERNEL_TAPS {
            if !self.mask.is_active(tap) {
                self.kernel.slice_mut(s![tap * c..(tap + 1) * c, ..]).fill(0.0);
            }
        }
    }

    pub fn is_mask_consistent(&self) -> bool {
        let c = self.channels;
        (0..KERNEL_TAPS).filter(|&t| !self.mask.is_active(t)).all(|t| {
            self.kernel
                .slice(s![t * c..(t + 1) * c, ..])
                .iter()
                .all(|&v| v == 0.0)
        })
    }

    /// Kernel weights for the 7 cross taps stacked in input-block order,
    /// `(7 * channels) x width`.
    pub fn cross_kernel(&self) -> Array2<f32> {
        let c = self.channels;
        let mut out = Array2::zeros((CROSS_TAPS * c, self.width));
        for (block, &tap) in CROSS_TAP_INDICES.iter().enumerate() {
            out.slice_mut(s![block * c..(block + 1) * c, ..])
                .assign(&self.kernel.slice(s![tap * c..(tap + 1) * c, ..]));
        }
        out
    }

    /// Named tensors with their logical dimensions, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f32])> {
        let (c, w) = (self.channels, self.width);
        vec![
            ("perception.weight", vec![3, 3, 3, c, w], slice(&self.kernel)),
            ("perception.bias", vec![w], slice1(&self.perception_bias)),
            ("layer1.weight", vec![w, w], slice(&self.layer1)),
            ("layer1.bias", vec![w], slice1(&self.layer1_bias)),
            ("layer2.weight", vec![w, c - 1], slice(&self.layer2)),
            ("layer2.bias", vec![c - 1], slice1(&self.layer2_bias)),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.kernel.as_slice_mut().expect("standard layout"),
            self.perception_bias.as_slice_mut().expect("standard layout"),
            self.layer1.as_slice_mut().expect("standard layout"),
            self.layer1_bias.as_slice_mut().expect("standard layout"),
            self.layer2.as_slice_mut().expect("standard layout"),
            self.layer2_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Rebuilds parameters from checkpoint tensors (as produced by [`tensors`](Self::tensors)).
    pub fn from_tensors(tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Option<Self> {
        let find = |name: &str| tensors.iter().find(|(n, _, _)| n == name);
        let (_, kd, _) = find("perception.weight")?;
        if kd.len() != 5 || kd[..3] != [3, 3, 3] {
            return None;
        }
        let (c, w) = (kd[3], kd[4]);
        if c < 2 || w == 0 {
            return None;
        }
        let mut p = Self::zeros(c, w);
        let expected = p
            .tensors()
            .into_iter()
            .map(|(n, d, _)| (n, d))
            .collect::<Vec<_>>();
        for ((name, dims), dst) in expected.into_iter().zip(p.tensors_mut()) {
            let (_, d, data) = find(name)?;
            if *d != dims || data.len() != dst.len() {
                return None;
            }
            dst.copy_from_slice(data);
        }
        p.is_mask_consistent().then_some(p)
    }
}

fn slice(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}
