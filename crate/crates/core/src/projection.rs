//! Point-to-cell assignment for the planar and range-image views, and the
//! flatten (scatter-average) / inflate (gather) pair.
//!
//! The public `[N, C]` functions follow the row-major point layout; the tape
//! ops work channel-first (`[C, N]` in, `[C, H, W]` out) like the rest of
//! the network.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Backward, Real, Tape, Tensor, Var};
use crate::timing::{median_millis, time_reps};

/// Cell index of points that fall outside a view.
pub const OUT_OF_VIEW: u32 = u32::MAX;

/// Largest dense projection matrix (in elements) the oracle will build.
pub const DEFAULT_ORACLE_CAP: usize = 1 << 29;

// slack for degree/radian round trips at the field-of-view edges
const FOV_SLACK: f64 = 1e-12;
const MIN_RANGE: f64 = 1e-6;

/// Geometry of one 2D view.
#[derive(Clone, Debug, PartialEq)]
pub enum GridSpec {
    /// Orthogonal projection onto the plane of `axes`; rows run along
    /// `axes[0]`, columns along `axes[1]`.
    Planar {
        axes: [usize; 2],
        resolution: f64,
        min: [f64; 2],
        max: [f64; 2],
    },
    /// Range image with equal-angle rows. Angles in degrees.
    Spherical {
        height: usize,
        width: usize,
        fov_up: f64,
        fov_down: f64,
        /// Keep only the closest point of each cell instead of averaging.
        closest: bool,
    },
}

impl GridSpec {
    pub fn planar(axes: [usize; 2], resolution: f64, min: [f64; 2], max: [f64; 2]) -> Self {
        GridSpec::Planar {
            axes,
            resolution,
            min,
            max,
        }
    }

    /// 64 x 2048 image spanning +3 to -25 degrees.
    pub fn range_image() -> Self {
        GridSpec::Spherical {
            height: 64,
            width: 2048,
            fov_up: 3.0,
            fov_down: -25.0,
            closest: false,
        }
    }

    /// The XY, XZ and YZ planes over a crop box, followed by the range image.
    pub fn default_views(crop_min: [f32; 3], crop_max: [f32; 3], resolution: f64) -> Vec<GridSpec> {
        let lo = crop_min.map(f64::from);
        let hi = crop_max.map(f64::from);
        let mut views: Vec<GridSpec> = [[0, 1], [0, 2], [1, 2]]
            .into_iter()
            .map(|[a, b]| GridSpec::planar([a, b], resolution, [lo[a], lo[b]], [hi[a], hi[b]]))
            .collect();
        views.push(GridSpec::range_image());
        views
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("grid `{self}`: {m}")));
        match *self {
            GridSpec::Planar {
                axes,
                resolution,
                min,
                max,
            } => {
                if axes[0] > 2 || axes[1] > 2 || axes[0] == axes[1] {
                    return bad(format!("axes {axes:?} must be two distinct axes in 0..3"));
                }
                if !(resolution.is_finite() && resolution > 0.0) {
                    return bad("resolution must be positive".into());
                }
                for i in 0..2 {
                    if !(min[i].is_finite() && max[i].is_finite() && max[i] > min[i]) {
                        return bad(format!("bounds [{}, {}] are empty", min[i], max[i]));
                    }
                }
                if self.cells() > u32::MAX as usize - 1 {
                    return bad("too many cells".into());
                }
            }
            GridSpec::Spherical {
                height,
                width,
                fov_up,
                fov_down,
                ..
            } => {
                if height == 0 || width == 0 {
                    return bad("height and width must be >= 1".into());
                }
                if !(fov_up.is_finite() && fov_down.is_finite() && fov_up > fov_down) {
                    return bad("fov_up must exceed fov_down".into());
                }
                if fov_up > 90.0 || fov_down < -90.0 {
                    return bad("field of view must lie within [-90, 90] degrees".into());
                }
                if height.checked_mul(width).map_or(true, |c| c > u32::MAX as usize - 1) {
                    return bad("too many cells".into());
                }
            }
        }
        Ok(())
    }

    /// `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            GridSpec::Planar {
                resolution,
                min,
                max,
                ..
            } => {
                let cells = |i: usize| (((max[i] - min[i]) / resolution).ceil() as usize).max(1);
                (cells(0), cells(1))
            }
            GridSpec::Spherical { height, width, .. } => (height, width),
        }
    }

    pub fn cells(&self) -> usize {
        let (h, w) = self.dims();
        h * w
    }

    /// Short view name: `xy`, `xz`, `yz` or `range`.
    pub fn name(&self) -> String {
        match self {
            GridSpec::Planar { axes, .. } => axes.iter().map(|&a| ['x', 'y', 'z'][a.min(2)]).collect(),
            GridSpec::Spherical { .. } => "range".into(),
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridSpec::Planar {
                axes,
                resolution,
                min,
                max,
            } => write!(
                f,
                "planar {} {} {} {} {} {} {}",
                axes[0], axes[1], resolution, min[0], max[0], min[1], max[1]
            ),
            GridSpec::Spherical {
                height,
                width,
                fov_up,
                fov_down,
                closest,
            } => {
                write!(f, "spherical {height} {width} {fov_up} {fov_down}")?;
                if *closest {
                    f.write_str(" closest")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::Config(format!("cannot parse grid spec `{s}`"));
        fn num<V: FromStr>(t: &str) -> Option<V> {
            t.parse().ok()
        }
        let spec = match tokens.as_slice() {
            ["planar", a0, a1, res, min0, max0, min1, max1] => GridSpec::Planar {
                axes: [num(a0).ok_or_else(bad)?, num(a1).ok_or_else(bad)?],
                resolution: num(res).ok_or_else(bad)?,
                min: [num(min0).ok_or_else(bad)?, num(min1).ok_or_else(bad)?],
                max: [num(max0).ok_or_else(bad)?, num(max1).ok_or_else(bad)?],
            },
            ["spherical", h, w, up, down, rest @ ..] => GridSpec::Spherical {
                height: num(h).ok_or_else(bad)?,
                width: num(w).ok_or_else(bad)?,
                fov_up: num(up).ok_or_else(bad)?,
                fov_down: num(down).ok_or_else(bad)?,
                closest: match rest {
                    [] => false,
                    ["closest"] => true,
                    _ => return Err(bad()),
                },
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Which cell every point of a cloud falls into, with its averaging weight.
#[derive(Clone, Debug, PartialEq)]
pub struct CellAssignment {
    cell_index: Vec<u32>,
    inv_density: Vec<f64>,
    cells: usize,
}

impl CellAssignment {
    /// Builds the assignment from per-point cells ([`OUT_OF_VIEW`] allowed),
    /// weighting each in-view point by one over its cell's population.
    pub fn from_cells(cell_index: Vec<u32>, cells: usize) -> Result<Self> {
        let mut count = vec![0u32; cells];
        for (p, &c) in cell_index.iter().enumerate() {
            if c == OUT_OF_VIEW {
                continue;
            }
            match count.get_mut(c as usize) {
                Some(n) => *n += 1,
                None => {
                    return Err(Error::CorruptAssignment(format!(
                        "point {p} maps to cell {c}, grid has {cells}"
                    )))
                }
            }
        }
        let inv_density = cell_index
            .iter()
            .map(|&c| if c == OUT_OF_VIEW { 0.0 } else { 1.0 / count[c as usize] as f64 })
            .collect();
        Ok(CellAssignment {
            cell_index,
            inv_density,
            cells,
        })
    }

    /// Reassigns weights so that only the point of smallest `key` in each
    /// cell (lowest index on ties) carries weight 1.
    fn keep_minimum(mut self, key: &[f64]) -> Self {
        let mut best: Vec<Option<usize>> = vec![None; self.cells];
        for (p, &c) in self.cell_index.iter().enumerate() {
            if c == OUT_OF_VIEW {
                continue;
            }
            let slot = &mut best[c as usize];
            if slot.map_or(true, |b| key[p] < key[b]) {
                *slot = Some(p);
            }
        }
        for (p, &c) in self.cell_index.iter().enumerate() {
            self.inv_density[p] = if c != OUT_OF_VIEW && best[c as usize] == Some(p) { 1.0 } else { 0.0 };
        }
        self
    }

    pub fn len(&self) -> usize {
        self.cell_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_index.is_empty()
    }

    /// Number of cells in the grid, `H·W`.
    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn cell_index(&self) -> &[u32] {
        &self.cell_index
    }

    pub fn inv_density(&self) -> &[f64] {
        &self.inv_density
    }

    pub fn in_view(&self, point: usize) -> bool {
        self.cell_index[point] != OUT_OF_VIEW
    }

    /// Same assignment with points reordered so that new point `i` is old
    /// point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        CellAssignment {
            cell_index: perm.iter().map(|&p| self.cell_index[p]).collect(),
            inv_density: perm.iter().map(|&p| self.inv_density[p]).collect(),
            cells: self.cells,
        }
    }

    fn check(&self, op: &'static str, points: usize, cells: usize) -> Result<()> {
        if self.len() != points {
            return Err(Error::shape(
                op,
                format!("assignment covers {} points, features have {points}", self.len()),
            ));
        }
        if let Some((p, &c)) = self
            .cell_index
            .iter()
            .enumerate()
            .find(|(_, &c)| c != OUT_OF_VIEW && c as usize >= cells)
        {
            return Err(Error::CorruptAssignment(format!(
                "point {p} maps to cell {c}, grid has {cells}"
            )));
        }
        Ok(())
    }
}

/// Assigns points to the cells of `spec`.
pub fn assign(cloud: &PointCloud, spec: &GridSpec) -> Result<CellAssignment> {
    match spec {
        GridSpec::Planar { .. } => assign_planar(cloud, spec),
        GridSpec::Spherical { .. } => assign_spherical(cloud, spec),
    }
}

/// Planar cell of every point: `floor((coord - min) / resolution)` per axis.
/// Points outside the closed bounds are out of view; a point on the upper
/// bound lands in the last cell.
pub fn assign_planar(cloud: &PointCloud, spec: &GridSpec) -> Result<CellAssignment> {
    let GridSpec::Planar {
        axes,
        resolution,
        min,
        max,
    } = *spec
    else {
        return Err(Error::Config(format!("assign_planar needs a planar grid, got `{spec}`")));
    };
    spec.validate()?;
    let (h, w) = spec.dims();
    let bin = |v: f64, i: usize, n: usize| -> Option<usize> {
        if !(min[i]..=max[i]).contains(&v) {
            return None;
        }
        Some((((v - min[i]) / resolution).floor() as usize).min(n - 1))
    };
    let cells = cloud
        .points()
        .iter()
        .map(|p| {
            let row = bin(p.coord(axes[0]) as f64, 0, h);
            let col = bin(p.coord(axes[1]) as f64, 1, w);
            match (row, col) {
                (Some(r), Some(c)) => (r * w + c) as u32,
                _ => OUT_OF_VIEW,
            }
        })
        .collect();
    CellAssignment::from_cells(cells, h * w)
}

/// Range-image cell of a point, or `None` when out of view.
fn spherical_cell(xyz: [f32; 3], h: usize, w: usize, up: f64, down: f64) -> Option<(usize, usize, f64)> {
    let [x, y, z] = xyz.map(f64::from);
    let range = (x * x + y * y + z * z).sqrt();
    if !(range >= MIN_RANGE) {
        return None;
    }
    let pitch = (z / range).clamp(-1.0, 1.0).asin();
    if pitch > up + FOV_SLACK || pitch < down - FOV_SLACK {
        return None;
    }
    let mut yaw = y.atan2(x);
    if yaw <= -PI {
        yaw = PI;
    }
    let col = (0.5 * (1.0 - yaw / PI) * w as f64).floor().clamp(0.0, (w - 1) as f64) as usize;
    let row = ((1.0 - (pitch - down) / (up - down)) * h as f64)
        .floor()
        .clamp(0.0, (h - 1) as f64) as usize;
    Some((row, col, range))
}

/// Range-image cell of every point. Columns follow yaw (forward is the
/// image center), rows follow pitch with equal angular spacing.
pub fn assign_spherical(cloud: &PointCloud, spec: &GridSpec) -> Result<CellAssignment> {
    let GridSpec::Spherical {
        height,
        width,
        fov_up,
        fov_down,
        closest,
    } = *spec
    else {
        return Err(Error::Config(format!("assign_spherical needs a spherical grid, got `{spec}`")));
    };
    spec.validate()?;
    let (up, down) = (fov_up.to_radians(), fov_down.to_radians());
    let mut ranges = Vec::with_capacity(if closest { cloud.len() } else { 0 });
    let cells = cloud
        .points()
        .iter()
        .map(|p| {
            let hit = spherical_cell(p.xyz(), height, width, up, down);
            if closest {
                ranges.push(hit.map_or(f64::INFINITY, |h| h.2));
            }
            hit.map_or(OUT_OF_VIEW, |(r, c, _)| (r * width + c) as u32)
        })
        .collect();
    let a = CellAssignment::from_cells(cells, height * width)?;
    Ok(if closest { a.keep_minimum(&ranges) } else { a })
}

/// Per-cell weighted sum of point features: `[N, C]` in, `[HW, C]` out.
pub fn flatten_scatter<T: Real>(features: &Tensor<T>, assign: &CellAssignment, hw: usize) -> Result<Tensor<T>> {
    let (n, c) = rows_cols("flatten_scatter", features)?;
    assign.check("flatten_scatter", n, hw)?;
    let mut out = vec![T::zero(); hw * c];
    let f = features.data();
    for (p, (&cell, &wt)) in assign.cell_index.iter().zip(&assign.inv_density).enumerate() {
        if cell == OUT_OF_VIEW || wt == 0.0 {
            continue;
        }
        let wt = T::of(wt);
        let dst = &mut out[cell as usize * c..(cell as usize + 1) * c];
        for (d, &v) in dst.iter_mut().zip(&f[p * c..(p + 1) * c]) {
            *d += wt * v;
        }
    }
    Tensor::new(&[hw, c], out)
}

/// Dense `[HW, N]` projection matrix `M[cell, point] = inv_density`.
pub fn projection_matrix<T: Real>(assign: &CellAssignment, hw: usize, cap: usize) -> Result<Tensor<T>> {
    let n = assign.len();
    if hw.saturating_mul(n) > cap {
        return Err(Error::MemoryCap {
            cells: hw,
            points: n,
            cap,
        });
    }
    assign.check("projection_matrix", n, hw)?;
    let mut m = Tensor::zeros(&[hw, n]);
    let d = m.data_mut();
    for (p, (&cell, &wt)) in assign.cell_index.iter().zip(&assign.inv_density).enumerate() {
        if cell != OUT_OF_VIEW {
            d[cell as usize * n + p] = T::of(wt);
        }
    }
    Ok(m)
}

/// Flatten as an explicit matrix product, for checking [`flatten_scatter`].
pub fn flatten_matmul_oracle<T: Real>(
    features: &Tensor<T>,
    assign: &CellAssignment,
    hw: usize,
    cap: usize,
) -> Result<Tensor<T>> {
    let (n, _) = rows_cols("flatten_matmul_oracle", features)?;
    if assign.len() != n {
        return Err(Error::shape("flatten_matmul_oracle", "assignment and features disagree on N"));
    }
    let m = projection_matrix(assign, hw, cap)?;
    matmul(&m, features)
}

/// Every point takes its cell's feature row; out-of-view points get zeros.
/// `[HW, C]` in, `[N, C]` out.
pub fn inflate<T: Real>(grid: &Tensor<T>, assign: &CellAssignment) -> Result<Tensor<T>> {
    let (hw, c) = rows_cols("inflate", grid)?;
    assign.check("inflate", assign.len(), hw)?;
    let g = grid.data();
    let mut out = vec![T::zero(); assign.len() * c];
    for (row, &cell) in out.chunks_mut(c.max(1)).zip(&assign.cell_index) {
        if cell != OUT_OF_VIEW {
            row.copy_from_slice(&g[cell as usize * c..(cell as usize + 1) * c]);
        }
    }
    Tensor::new(&[assign.len(), c], out)
}

fn rows_cols<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected a rank-2 tensor, got {:?}", t.shape())));
    }
    Ok((t.dim(0), t.dim(1)))
}

// channels are processed in parallel once a call carries this much work
const PAR_MIN_WORK: usize = 1 << 15;

/// Channel-first scatter: `out[ch, cell] += w·x[ch, p]`, weights optional.
fn scatter_rows<T: Real>(x: &[T], n: usize, assign: &CellAssignment, weighted: bool) -> Vec<T> {
    let hw = assign.cells;
    let c = if n == 0 { 0 } else { x.len() / n };
    let weights: Vec<T> = assign
        .inv_density
        .iter()
        .map(|&w| if weighted { T::of(w) } else { T::one() })
        .collect();
    let mut out = vec![T::zero(); c * hw];
    if hw == 0 {
        return out;
    }
    let row = |(dst, src): (&mut [T], &[T])| {
        for ((&cell, &wt), &v) in assign.cell_index.iter().zip(&weights).zip(src) {
            if cell != OUT_OF_VIEW {
                dst[cell as usize] += wt * v;
            }
        }
    };
    if c * n >= PAR_MIN_WORK {
        out.par_chunks_mut(hw).zip(x.par_chunks(n.max(1))).for_each(row);
    } else {
        out.chunks_mut(hw).zip(x.chunks(n.max(1))).for_each(row);
    }
    out
}

/// Channel-first gather: `out[ch, p] = w·g[ch, cell(p)]`, weights optional.
fn gather_rows<T: Real>(g: &[T], assign: &CellAssignment, weighted: bool) -> Vec<T> {
    let (hw, n) = (assign.cells, assign.len());
    let c = if hw == 0 { 0 } else { g.len() / hw };
    let weights: Vec<T> = assign
        .inv_density
        .iter()
        .map(|&w| if weighted { T::of(w) } else { T::one() })
        .collect();
    let mut out = vec![T::zero(); c * n];
    if n == 0 {
        return out;
    }
    let row = |(dst, src): (&mut [T], &[T])| {
        for ((d, &cell), &wt) in dst.iter_mut().zip(&assign.cell_index).zip(&weights) {
            if cell != OUT_OF_VIEW {
                *d = wt * src[cell as usize];
            }
        }
    };
    if c * n >= PAR_MIN_WORK {
        out.par_chunks_mut(n).zip(g.par_chunks(hw)).for_each(row);
    } else {
        out.chunks_mut(n).zip(g.chunks(hw)).for_each(row);
    }
    out
}

struct FlattenBack {
    assign: Arc<CellAssignment>,
    in_shape: Vec<usize>,
}

impl<T: Real> Backward<T> for FlattenBack {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let dx = gather_rows(g.data(), &self.assign, true);
        vec![Some(Tensor::new(&self.in_shape, dx).unwrap())]
    }
}

struct InflateBack {
    assign: Arc<CellAssignment>,
    grid_shape: Vec<usize>,
}

impl<T: Real> Backward<T> for InflateBack {
    fn backward(&self, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let n = self.assign.len();
        let dg = scatter_rows(g.data(), n, &self.assign, false);
        vec![Some(Tensor::new(&self.grid_shape, dg).unwrap())]
    }
}

impl<T: Real> Tape<T> {
    /// Scatter-average of `x [C, N]` into a `[C, H, W]` grid.
    pub fn flatten(&self, x: &Var<T>, assign: &Arc<CellAssignment>, dims: (usize, usize)) -> Result<Var<T>> {
        const OP: &str = "flatten";
        if x.shape().len() != 2 {
            return Err(Error::shape(OP, format!("input must be [C, N], got {:?}", x.shape())));
        }
        let (c, n) = (x.shape()[0], x.shape()[1]);
        if dims.0 * dims.1 != assign.cells() {
            return Err(Error::shape(
                OP,
                format!("grid {}x{} vs assignment over {} cells", dims.0, dims.1, assign.cells()),
            ));
        }
        assign.check(OP, n, assign.cells())?;
        let out = scatter_rows(x.data(), n, assign, true);
        Ok(self.record(Tensor::new(&[c, dims.0, dims.1], out)?, &[x], || FlattenBack {
            assign: Arc::clone(assign),
            in_shape: x.shape().to_vec(),
        }))
    }

    /// Gathers a `[C, ...]` grid back to `[C, N]` point features.
    pub fn inflate(&self, grid: &Var<T>, assign: &Arc<CellAssignment>) -> Result<Var<T>> {
        const OP: &str = "inflate";
        let s = grid.shape();
        let hw: usize = s.get(1..).map_or(0, |r| r.iter().product());
        if s.len() < 2 || hw != assign.cells() {
            return Err(Error::shape(
                OP,
                format!("grid {s:?} vs assignment over {} cells", assign.cells()),
            ));
        }
        assign.check(OP, assign.len(), hw)?;
        let out = gather_rows(grid.data(), assign, false);
        Ok(self.record(Tensor::new(&[s[0], assign.len()], out)?, &[grid], || InflateBack {
            assign: Arc::clone(assign),
            grid_shape: s.to_vec(),
        }))
    }
}

/// One timed arm of the flatten benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct FlattenTiming {
    pub arm: &'static str,
    pub n: usize,
    pub hw: usize,
    pub c: usize,
    pub millis: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FlattenBenchReport {
    pub rows: Vec<FlattenTiming>,
    /// Largest elementwise difference between the two arms' outputs.
    pub max_abs_diff: f64,
}

impl FlattenBenchReport {
    /// Plain-text `arm,N,HW,C,millis` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,N,HW,C,millis\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{:.3}\n", r.arm, r.n, r.hw, r.c, r.millis));
        }
        s
    }

    pub fn millis(&self, arm: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.arm == arm).map(|r| r.millis)
    }
}

/// Random all-in-view assignment of `n` points over `hw` cells.
pub fn random_assignment(n: usize, hw: usize, seed: u64) -> Result<CellAssignment> {
    if hw == 0 && n > 0 {
        return Err(Error::Config("cannot assign points to an empty grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = (0..n).map(|_| rng.gen_range(0..hw) as u32).collect();
    CellAssignment::from_cells(cells, hw)
}

/// Times scatter flatten against the dense matrix product on random data.
///
/// Both arms are checked for agreement first. The projection matrix is
/// built once outside the timed region, so only the product is timed.
pub fn bench_flatten<T: Real>(
    n: usize,
    hw: usize,
    c: usize,
    warmup: usize,
    reps: usize,
    seed: u64,
) -> Result<FlattenBenchReport> {
    if reps == 0 {
        return Ok(FlattenBenchReport::default());
    }
    let assign = random_assignment(n, hw, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let features: Tensor<T> = Tensor::from_fn(&[n, c], |_| T::of(rng.gen_range(-1.0..1.0)));
    let m: Tensor<T> = projection_matrix(&assign, hw, DEFAULT_ORACLE_CAP)?;

    let scatter = flatten_scatter(&features, &assign, hw)?;
    let dense = matmul(&m, &features)?;
    let max_abs_diff = scatter.max_abs_diff(&dense).as_f64();
    let tol = (T::epsilon().as_f64() * 1e3).max(1e-9);
    if !(max_abs_diff <= tol) {
        return Err(Error::Mismatch(format!(
            "scatter and dense flatten differ by {max_abs_diff:e} (tolerance {tol:e})"
        )));
    }

    let scatter_ms = time_reps(warmup, reps, || {
        std::hint::black_box(flatten_scatter(&features, &assign, hw).unwrap());
    });
    let dense_ms = time_reps(warmup, reps, || {
        std::hint::black_box(matmul(&m, &features).unwrap());
    });
    let row = |arm, ms: &[f64]| FlattenTiming {
        arm,
        n,
        hw,
        c,
        millis: median_millis(ms),
    };
    Ok(FlattenBenchReport {
        rows: vec![row("scatter", &scatter_ms), row("matmul", &dense_ms)],
        max_abs_diff,
    })
}
