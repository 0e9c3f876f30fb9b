//! Voxel occupancy grids, the `.voxtxt` text format, connectivity checks and
//! the procedural desk-scale shape generators.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Class names in logit-channel order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["plane", "chair", "car", "table", "house", "guitar", "boat"];
pub const NUM_CLASSES: usize = 7;

/// Largest extent along any axis allowed for training and classification.
pub const MAX_CLASSIFY_DIM: usize = 15;

/// Occupied-fraction threshold used by [`downsample`].
pub const DOWNSAMPLE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("invalid dimensions {0:?}: every axis must be at least 1")]
    InvalidDims([usize; 3]),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("shape has no occupied voxels")]
    Empty,
    #[error("shape is not 6-connected ({0} components)")]
    Disconnected(usize),
    #[error("class index {0} out of range")]
    BadClass(usize),
    #[error("size budget {budget:?} too small for a {class} (needs at least {needed:?})")]
    Budget {
        class: &'static str,
        budget: [usize; 3],
        needed: [usize; 3],
    },
    #[error("target dimensions {target:?} invalid for source {source_dims:?}")]
    BadTarget {
        target: [usize; 3],
        source_dims: [usize; 3],
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One of the six faces of a lattice site, in the fixed artifact-wide order
/// (−X, +X, −Y, +Y, −Z, +Z).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    NegX,
    PosX,
    NegY,
    PosY,
    NegZ,
    PosZ,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::NegX,
        Face::PosX,
        Face::NegY,
        Face::PosY,
        Face::NegZ,
        Face::PosZ,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Face> {
        Face::ALL.get(i).copied()
    }

    pub fn offset(self) -> [i64; 3] {
        match self {
            Face::NegX => [-1, 0, 0],
            Face::PosX => [1, 0, 0],
            Face::NegY => [0, -1, 0],
            Face::PosY => [0, 1, 0],
            Face::NegZ => [0, 0, -1],
            Face::PosZ => [0, 0, 1],
        }
    }

    pub fn opposite(self) -> Face {
        match self {
            Face::NegX => Face::PosX,
            Face::PosX => Face::NegX,
            Face::NegY => Face::PosY,
            Face::PosY => Face::NegY,
            Face::NegZ => Face::PosZ,
            Face::PosZ => Face::NegZ,
        }
    }
}

/// A dense boolean occupancy lattice. Linear index is `x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    dims: [usize; 3],
    occupancy: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3]) -> Result<Self, VoxelError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VoxelError::InvalidDims(dims));
        }
        Ok(Self {
            dims,
            occupancy: vec![false; dims[0] * dims[1] * dims[2]],
        })
    }

    pub fn from_fn(
        dims: [usize; 3],
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self, VoxelError> {
        let mut grid = Self::new(dims)?;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    grid.set(x, y, z, f(x, y, z));
                }
            }
        }
        Ok(grid)
    }

    pub fn from_occupancy(dims: [usize; 3], occupancy: Vec<bool>) -> Result<Self, VoxelError> {
        let grid = Self::new(dims)?;
        if occupancy.len() != grid.occupancy.len() {
            return Err(VoxelError::InvalidDims(dims));
        }
        Ok(Self { dims, occupancy })
    }

    /// A solid box of the given dimensions.
    pub fn solid(dims: [usize; 3]) -> Result<Self, VoxelError> {
        Self::from_fn(dims, |_, _, _| true)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied_count() == 0
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[self.index(x, y, z)]
    }

    /// Occupancy at signed coordinates; anything outside the lattice is empty.
    pub fn get_signed(&self, p: [i64; 3]) -> bool {
        self.index_signed(p).is_some_and(|i| self.occupancy[i])
    }

    pub fn index_signed(&self, p: [i64; 3]) -> Option<usize> {
        let in_range = |v: i64, d: usize| v >= 0 && (v as usize) < d;
        if in_range(p[0], self.dims[0]) && in_range(p[1], self.dims[1]) && in_range(p[2], self.dims[2])
        {
            Some(self.index(p[0] as usize, p[1] as usize, p[2] as usize))
        } else {
            None
        }
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.occupancy[i] = value;
    }

    pub fn set_index(&mut self, idx: usize, value: bool) {
        self.occupancy[idx] = value;
    }

    pub fn is_occupied(&self, idx: usize) -> bool {
        self.occupancy[idx]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn occupied_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupancy
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| o.then_some(i))
    }

    /// Lattice neighbor index of `idx` across `face`, if it lies inside the grid.
    #[inline]
    pub fn neighbor(&self, idx: usize, face: Face) -> Option<usize> {
        let [x, y, z] = self.coords(idx);
        let o = face.offset();
        self.index_signed([x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]])
    }

    pub fn fits_classification(&self) -> bool {
        self.dims.iter().all(|&d| d <= MAX_CLASSIFY_DIM)
    }

    /// True if every occupied voxel of `self` is occupied in `other` (same dims).
    pub fn is_subset_of(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
            && self
                .occupancy
                .iter()
                .zip(&other.occupancy)
                .all(|(&a, &b)| !a || b)
    }

    /// Inclusive bounding box `(min, max)` of occupied voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut it = self.occupied_indices();
        let first = self.coords(it.next()?);
        let (mut lo, mut hi) = (first, first);
        for i in it {
            let c = self.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        Some((lo, hi))
    }

    /// Crops to the occupied bounding box. Returns `None` for an empty grid.
    pub fn cropped(&self) -> Option<VoxelGrid> {
        let (lo, hi) = self.bounding_box()?;
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        VoxelGrid::from_fn(dims, |x, y, z| self.get(x + lo[0], y + lo[1], z + lo[2])).ok()
    }

    /// Places `self` into a larger grid of `dims` with its origin at `offset`.
    pub fn embedded(&self, dims: [usize; 3], offset: [usize; 3]) -> Result<VoxelGrid, VoxelError> {
        if (0..3).any(|a| self.dims[a] + offset[a] > dims[a]) {
            return Err(VoxelError::BadTarget {
                target: dims,
                source_dims: self.dims,
            });
        }
        let mut out = VoxelGrid::new(dims)?;
        for i in self.occupied_indices() {
            let [x, y, z] = self.coords(i);
            out.set(x + offset[0], y + offset[1], z + offset[2], true);
        }
        Ok(out)
    }

    /// Centres the grid inside a `dims` volume (integer offsets, rounded down).
    pub fn centered_in(&self, dims: [usize; 3]) -> Result<VoxelGrid, VoxelError> {
        if (0..3).any(|a| self.dims[a] > dims[a]) {
            return Err(VoxelError::BadTarget {
                target: dims,
                source_dims: self.dims,
            });
        }
        let offset = [
            (dims[0] - self.dims[0]) / 2,
            (dims[1] - self.dims[1]) / 2,
            (dims[2] - self.dims[2]) / 2,
        ];
        self.embedded(dims, offset)
    }
}

/// A labelled, single-component shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeInstance {
    pub grid: VoxelGrid,
    /// `None` for unlabeled files (`class -`).
    pub label: Option<usize>,
    pub name: String,
}

impl ShapeInstance {
    pub fn new(grid: VoxelGrid, label: Option<usize>, name: impl Into<String>) -> Result<Self, VoxelError> {
        if let Some(l) = label {
            if l >= NUM_CLASSES {
                return Err(VoxelError::BadClass(l));
            }
        }
        validate_shape_grid(&grid)?;
        Ok(Self {
            grid,
            label,
            name: name.into(),
        })
    }
}

fn validate_shape_grid(grid: &VoxelGrid) -> Result<(), VoxelError> {
    match connected_component_count(grid) {
        0 => Err(VoxelError::Empty),
        1 => Ok(()),
        n => Err(VoxelError::Disconnected(n)),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub shapes: Vec<ShapeInstance>,
}

impl Dataset {
    pub fn class_names() -> [&'static str; NUM_CLASSES] {
        CLASS_NAMES
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// `count` procedural shapes for each class in `classes`, shape seeds
    /// derived from `seed`.
    pub fn procedural(
        classes: &[usize],
        count: usize,
        seed: u64,
        budget: [usize; 3],
    ) -> Result<Self, VoxelError> {
        let mut shapes = Vec::with_capacity(classes.len() * count);
        for &class in classes {
            for k in 0..count {
                shapes.push(generate_procedural(class, seed.wrapping_add(k as u64), budget)?);
            }
        }
        Ok(Self { shapes })
    }
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

// ---------------------------------------------------------------------------
// Text format

/// Renders the `.voxtxt` representation.
pub fn format_shape(shape: &ShapeInstance) -> String {
    let g = &shape.grid;
    let [nx, ny, nz] = g.dims();
    let mut out = String::with_capacity(g.len() + 16 * nz + 64);
    out.push_str("voxtxt 1\n");
    let _ = writeln!(out, "dims {nx} {ny} {nz}");
    match shape.label {
        Some(l) => {
            let _ = writeln!(out, "class {}", CLASS_NAMES[l]);
        }
        None => out.push_str("class -\n"),
    }
    for z in 0..nz {
        let _ = writeln!(out, "slice {z}");
        for y in 0..ny {
            for x in 0..nx {
                out.push(if g.get(x, y, z) { '1' } else { '0' });
            }
            out.push('\n');
        }
    }
    out
}

/// Parses `.voxtxt` content. `name` becomes the instance name.
pub fn parse_shape(text: &str, name: &str) -> Result<ShapeInstance, VoxelError> {
    let (dims, label, body) = parse_header(text, "voxtxt")?;
    let mut grid = VoxelGrid::new(dims)?;
    read_slices(body, dims, |line_no, x, y, z, token| {
        let v = match token {
            "1" => true,
            "0" => false,
            other => {
                return Err(VoxelError::Parse {
                    line: line_no,
                    msg: format!("invalid cell character {other:?}"),
                })
            }
        };
        grid.set(x, y, z, v);
        Ok(())
    }, RowStyle::Chars)?;
    ShapeInstance::new(grid, label, name).map_err(|e| match e {
        VoxelError::Empty | VoxelError::Disconnected(_) => VoxelError::Parse {
            line: 4,
            msg: e.to_string(),
        },
        other => other,
    })
}

pub(crate) enum RowStyle {
    Chars,
    Whitespace,
}

type Body<'a> = Vec<(usize, &'a str)>;

pub(crate) fn parse_header<'a>(
    text: &'a str,
    magic: &str,
) -> Result<([usize; 3], Option<usize>, Body<'a>), VoxelError> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let perr = |line: usize, msg: String| VoxelError::Parse { line, msg };

    let (n, l) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    if l.trim_end() != format!("{magic} 1") {
        return Err(perr(n, format!("expected header `{magic} 1`, found {l:?}")));
    }
    let (n, l) = lines.next().ok_or_else(|| perr(2, "missing dims line".into()))?;
    let mut parts = l.split_whitespace();
    if parts.next() != Some("dims") {
        return Err(perr(n, format!("expected `dims nx ny nz`, found {l:?}")));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = parts
            .next()
            .and_then(|t| t.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| perr(n, format!("bad dims line {l:?}")))?;
    }
    if parts.next().is_some() {
        return Err(perr(n, format!("trailing tokens on dims line {l:?}")));
    }
    let (n, l) = lines.next().ok_or_else(|| perr(3, "missing class line".into()))?;
    let label = match l.trim_end().strip_prefix("class ") {
        Some("-") => None,
        Some(name) => Some(
            class_index(name).ok_or_else(|| perr(n, format!("unknown class name {name:?}")))?,
        ),
        None => return Err(perr(n, format!("expected `class <name>`, found {l:?}"))),
    };
    let body: Body<'a> = lines.collect();
    Ok((dims, label, body))
}

pub(crate) fn read_slices(
    body: Body<'_>,
    dims: [usize; 3],
    mut cell: impl FnMut(usize, usize, usize, usize, &str) -> Result<(), VoxelError>,
    style: RowStyle,
) -> Result<(), VoxelError> {
    let [nx, ny, nz] = dims;
    let mut it = body.into_iter();
    let mut last_line = 3;
    for z in 0..nz {
        let (n, l) = it.next().ok_or(VoxelError::Parse {
            line: last_line + 1,
            msg: format!("missing `slice {z}`"),
        })?;
        if l.trim_end() != format!("slice {z}") {
            return Err(VoxelError::Parse {
                line: n,
                msg: format!("expected `slice {z}`, found {l:?}"),
            });
        }
        last_line = n;
        for y in 0..ny {
            let (n, l) = it.next().ok_or(VoxelError::Parse {
                line: last_line + 1,
                msg: format!("slice {z} is missing row {y}"),
            })?;
            last_line = n;
            let tokens: Vec<&str> = match style {
                RowStyle::Chars => {
                    let l = l.trim_end_matches('\r');
                    (0..l.len()).map(|i| l.get(i..i + 1).unwrap_or("?")).collect()
                }
                RowStyle::Whitespace => l.split_whitespace().collect(),
            };
            if tokens.len() != nx {
                return Err(VoxelError::Parse {
                    line: n,
                    msg: format!("row has width {} but dims declare {nx}", tokens.len()),
                });
            }
            for (x, t) in tokens.into_iter().enumerate() {
                cell(n, x, y, z, t)?;
            }
        }
    }
    for (n, l) in it {
        if !l.trim().is_empty() {
            return Err(VoxelError::Parse {
                line: n,
                msg: "unexpected content after last slice".into(),
            });
        }
    }
    Ok(())
}

pub fn load_shape(path: &Path) -> Result<ShapeInstance, VoxelError> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_shape(&text, &name)
}

pub fn save_shape(shape: &ShapeInstance, path: &Path) -> Result<(), VoxelError> {
    validate_shape_grid(&shape.grid)?;
    fs::write(path, format_shape(shape))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Connectivity and resampling

/// Number of maximal 6-connected occupied components.
pub fn connected_component_count(grid: &VoxelGrid) -> usize {
    let mut seen = vec![false; grid.len()];
    let mut queue = VecDeque::new();
    let mut components = 0;
    for start in grid.occupied_indices() {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for face in Face::ALL {
                if let Some(j) = grid.neighbor(i, face) {
                    if grid.is_occupied(j) && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    components
}

/// Block-average downsampling: a target voxel is occupied iff the occupied
/// fraction of its source block is at least [`DOWNSAMPLE_THRESHOLD`]. Source
/// blocks along an axis are `[floor(i*n/t), floor((i+1)*n/t))`.
pub fn downsample(grid: &VoxelGrid, target: [usize; 3]) -> Result<VoxelGrid, VoxelError> {
    let src = grid.dims();
    if target.iter().any(|&t| t == 0) || (0..3).any(|a| target[a] > src[a]) {
        return Err(VoxelError::BadTarget {
            target,
            source_dims: src,
        });
    }
    let span = |a: usize, i: usize| (i * src[a] / target[a], (i + 1) * src[a] / target[a]);
    VoxelGrid::from_fn(target, |x, y, z| {
        let (x0, x1) = span(0, x);
        let (y0, y1) = span(1, y);
        let (z0, z1) = span(2, z);
        let mut filled = 0usize;
        for zz in z0..z1 {
            for yy in y0..y1 {
                for xx in x0..x1 {
                    filled += grid.get(xx, yy, zz) as usize;
                }
            }
        }
        let total = (x1 - x0) * (y1 - y0) * (z1 - z0);
        filled as f64 >= DOWNSAMPLE_THRESHOLD * total as f64
    })
}

// ---------------------------------------------------------------------------
// Procedural generators

struct Builder {
    grid: VoxelGrid,
}

impl Builder {
    fn new(dims: [usize; 3]) -> Self {
        Self {
            grid: VoxelGrid::new(dims).expect("builder dims are positive"),
        }
    }

    /// Fills the inclusive box `lo..=hi`.
    fn fill(&mut self, lo: [usize; 3], hi: [usize; 3]) {
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    self.grid.set(x, y, z, true);
                }
            }
        }
    }

    fn finish(self) -> VoxelGrid {
        self.grid.cropped().expect("templates are non-empty")
    }
}

/// Smallest budget each class template can be realised in.
fn min_budget(class: usize) -> [usize; 3] {
    match class {
        0 => [5, 6, 2],  // plane
        1 => [3, 3, 4],  // chair
        2 => [5, 3, 2],  // car
        3 => [4, 3, 3],  // table
        4 => [3, 3, 3],  // house
        5 => [3, 6, 1],  // guitar
        6 => [3, 4, 2],  // boat
        _ => [usize::MAX; 3],
    }
}

fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize, cap: usize) -> usize {
    let hi = hi.min(cap).max(lo);
    rng.random_range(lo..=hi)
}

/// Deterministic procedural shape of class `class`, fitting in `budget`.
/// The returned grid is cropped to its bounding box.
pub fn generate_procedural(
    class: usize,
    seed: u64,
    budget: [usize; 3],
) -> Result<ShapeInstance, VoxelError> {
    if class >= NUM_CLASSES {
        return Err(VoxelError::BadClass(class));
    }
    let needed = min_budget(class);
    if (0..3).any(|a| budget[a] < needed[a]) {
        return Err(VoxelError::Budget {
            class: CLASS_NAMES[class],
            budget,
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class as u64 + 1) << 56) ^ 0x6d6f_7270_686f);
    let [bx, by, bz] = budget;
    let grid = match class {
        0 => plane(&mut rng, bx, by, bz),
        1 => chair(&mut rng, bx, by, bz),
        2 => car(&mut rng, bx, by, bz),
        3 => table(&mut rng, bx, by, bz),
        4 => house(&mut rng, bx, by, bz),
        5 => guitar(&mut rng, bx, by, bz),
        _ => boat(&mut rng, bx, by, bz),
    };
    let name = format!("{}_{seed}", CLASS_NAMES[class]);
    ShapeInstance::new(grid, Some(class), name)
}

// Fuselage along +y, wings spanning x, tail plane and fin at y = 0.
fn plane(rng: &mut ChaCha8Rng, bx: usize, by: usize, bz: usize) -> VoxelGrid {
    let length = pick(rng, 6, 10, by);
    let span = pick(rng, 5, 9, bx) | 1;
    let span = if span > bx { span - 2 } else { span };
    let chord = pick(rng, 1, 2, length / 3);
    let fin = bz >= 2 && rng.random_bool(0.8);
    let mut b = Builder::new([span, length, 2]);
    let cx = span / 2;
    b.fill([cx, 0, 0], [cx, length - 1, 0]);
    let wing_y = length / 2 + rng.random_range(0..=length / 4);
    let wing_y = wing_y.min(length - chord);
    b.fill([0, wing_y, 0], [span - 1, wing_y + chord - 1, 0]);
    let tail = pick(rng, 1, 2, (span - 1) / 2);
    b.fill([cx - tail, 0, 0], [cx + tail, 0, 0]);
    if fin {
        b.fill([cx, 0, 1], [cx, 0, 1]);
    }
    b.finish()
}

// Seat on legs with a backrest rising from the +y edge.
fn chair(rng: &mut ChaCha8Rng, bx: usize, by: usize, bz: usize) -> VoxelGrid {
    let sx = pick(rng, 3, 5, bx);
    let sy = pick(rng, 3, 5, by);
    let leg = pick(rng, 1, 3, bz.saturating_sub(3).max(1));
    let back = pick(rng, 2, 4, bz - leg - 1);
    let h = leg + 1 + back;
    let mut b = Builder::new([sx, sy, h]);
    b.fill([0, 0, leg], [sx - 1, sy - 1, leg]);
    for (x, y) in [(0, 0), (sx - 1, 0), (0, sy - 1), (sx - 1, sy - 1)] {
        b.fill([x, y, 0], [x, y, leg - 1]);
    }
    b.fill([0, sy - 1, leg + 1], [sx - 1, sy - 1, h - 1]);
    b.finish()
}

fn car(rng: &mut ChaCha8Rng, bx: usize, by: usize, bz: usize) -> VoxelGrid {
    let lx = pick(rng, 5, 8, bx);
    let ly = pick(rng, 3, 4, by);
    let body_h = pick(rng, 1, 2, bz - 1);
    let cab_len = pick(rng, 2, lx - 2, lx);
    let cab_x = rng.random_range(0..=lx - cab_len);
    let mut b = Builder::new([lx, ly, body_h + 1]);
    b.fill([0, 0, 0], [lx - 1, ly - 1, body_h - 1]);
    let cy0 = usize::from(ly > 3);
    b.fill([cab_x, cy0, body_h], [cab_x + cab_len - 1, ly - 1 - cy0, body_h]);
    b.finish()
}

// Slab on 3-5 legs.
fn table(rng: &mut ChaCha8Rng, bx: usize, by: usize, bz: usize) -> VoxelGrid {
    let lx = pick(rng, 4, 8, bx);
    let ly = pick(rng, 3, 6, by);
    let leg = pick(rng, 2, 4, bz - 1);
    let legs = rng.random_range(3..=5usize);
    let mut b = Builder::new([lx, ly, leg + 1]);
    b.fill([0, 0, leg], [lx - 1, ly - 1, leg]);
    let mut corners = vec![(0, 0), (lx - 1, 0), (0, ly - 1), (lx - 1, ly - 1)];
    if legs == 3 {
        let drop = rng.random_range(0..4);
        corners.remove(drop);
    } else if legs == 5 {
        corners.push((lx / 2, ly / 2));
    }
    for (x, y) in corners {
        b.fill([x, y, 0], [x, y, leg - 1]);
    }
    b.finish()
}

// Solid box with a stepped gable roof.
fn house(rng: &mut ChaCha8Rng, bx: usize, by: usize, bz: usize) -> VoxelGrid {
    let w = pick(rng, 3, 7, bx);
    let d = pick(rng, 3, 6, by);
    let wall = pick(rng, 2, 4, bz - 1);
    let roof_layers = ((w + 1) / 2).min(bz - wall).max(1);
    let mut b = Builder::new([w, d, wall + roof_layers]);
    b.fill([0, 0, 0], [w - 1, d - 1, wall - 1]);
    for k in 0..roof_layers {
        let (x0, x1) = (k, w - 1 - k);
        if x0 > x1 {
            break;
        }
        b.fill([x0, 0, wall + k], [x1, d - 1, wall + k]);
    }
    b.finish()
}

// Body block, a single-voxel neck along +y and a small headstock.
fn guitar(rng: &mut ChaCha8Rng, bx: usize, by: usize, bz: usize) -> VoxelGrid {
    let w = pick(rng, 3, 5, bx);
    let body_len = pick(rng, 3, 5, by - 3);
    let neck = pick(rng, 2, 5, by - body_len - 1);
    let head = pick(rng, 1, 2, by - body_len - neck);
    let thick = pick(rng, 1, 2, bz);
    let len = body_len + neck + head;
    let mut b = Builder::new([w, len, thick]);
    b.fill([0, 0, 0], [w - 1, body_len - 1, thick - 1]);
    let cx = w / 2;
    b.fill([cx, body_len, 0], [cx, body_len + neck - 1, 0]);
    let hx1 = (cx + 1).min(w - 1);
    b.fill([cx, body_len + neck, 0], [hx1, len - 1, 0]);
    b.finish()
}

// Hull widening upward from a keel, optional bridge on deck.
fn boat(rng: &mut ChaCha8Rng, bx: usize, by: usize, bz: usize) -> VoxelGrid {
    let w = pick(rng, 3, 5, bx) | 1;
    let w = if w > bx { w - 2 } else { w };
    let len = pick(rng, 4, 9, by);
    let bridge = bz >= 3 && rng.random_bool(0.7);
    let h = if bridge { 3 } else { 2 };
    let mut b = Builder::new([w, len, h]);
    let cx = w / 2;
    b.fill([cx, 1.min(len - 1), 0], [cx, len.saturating_sub(2).max(1), 0]);
    b.fill([0, 0, 1], [w - 1, len - 1, 1]);
    if bridge {
        let bl = pick(rng, 1, 2, len / 2);
        let by0 = rng.random_range(0..=len - bl);
        b.fill([cx, by0, 2], [cx, by0 + bl - 1, 2]);
    }
    b.finish()
}
