//! Continuous convolution over point clouds: the plain CConv operator and
//! its momentum-conserving antisymmetric variant (ASCC).
//!
//! A filter is a 4x4x4 grid of (cin x cout) matrices evaluated at
//! continuous offsets: the offset is normalized by the radius, mapped from
//! the unit ball to the unit cube, and trilinearly interpolated over the
//! grid. A radial window attenuates contributions with distance and
//! vanishes at the radius.

use crate::error::{Error, Result};
use crate::math::{vec3, Vec3};
use crate::neighbor::NeighborIndex;

pub const GRID_RES: usize = 4;
pub const GRID_CELLS: usize = GRID_RES * GRID_RES * GRID_RES;
/// Free parameter cells of an antisymmetric grid (one point-reflection half).
pub const FREE_CELLS: usize = GRID_CELLS / 2;

/// Maps the unit ball to the unit cube by radial stretch: a point at
/// Euclidean radius rho in direction d goes to the point at Chebyshev
/// radius rho in direction d. Odd, continuous, and bijective on the ball.
pub fn ball_to_cube(r: Vec3) -> Result<Vec3> {
    let norm = r.norm();
    if norm > 1.0 + 1e-9 {
        return Err(Error::RejectedInput(format!(
            "ball_to_cube input has norm {norm} > 1"
        )));
    }
    Ok(ball_to_cube_unchecked(r))
}

fn ball_to_cube_unchecked(r: Vec3) -> Vec3 {
    let inf = r.norm_inf();
    if inf == 0.0 {
        return Vec3::ZERO;
    }
    // Componentwise clamp below absorbs tiny overshoot of the unit ball.
    let u = r * (r.norm() / inf);
    vec3(
        u.x.clamp(-1.0, 1.0),
        u.y.clamp(-1.0, 1.0),
        u.z.clamp(-1.0, 1.0),
    )
}

/// Jacobian d ball_to_cube / d r (zero at the origin, where the map is not
/// differentiable but the self offset is identically zero).
pub fn ball_to_cube_jacobian(r: Vec3) -> [[f64; 3]; 3] {
    let inf = r.norm_inf();
    let norm = r.norm();
    if inf == 0.0 || norm == 0.0 {
        return [[0.0; 3]; 3];
    }
    // s(r) = |r|_2 / |r|_inf; Lambda = r * s.
    let s = norm / inf;
    let comps = r.to_array();
    let mut axis = 0;
    for (k, c) in comps.iter().enumerate() {
        if c.abs() > comps[axis].abs() {
            axis = k;
        }
    }
    let sign = comps[axis].signum();
    // ds/dr_b = r_b / (|r|_2 |r|_inf) - |r|_2 / |r|_inf^2 * sign * [b == axis]
    let mut ds = [0.0; 3];
    for (b, d) in ds.iter_mut().enumerate() {
        *d = comps[b] / (norm * inf);
        if b == axis {
            *d -= norm / (inf * inf) * sign;
        }
    }
    let mut jac = [[0.0; 3]; 3];
    for (a, row) in jac.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            *cell = if a == b { s } else { 0.0 } + comps[a] * ds[b];
        }
    }
    jac
}

/// Radial window (1 - d^2/R^2)^3 on [0, R), zero beyond.
pub fn window(d: f64, radius: f64) -> f64 {
    debug_assert!(d >= 0.0 && radius > 0.0);
    let q = 1.0 - (d * d) / (radius * radius);
    if q <= 0.0 {
        0.0
    } else {
        q * q * q
    }
}

/// d window / d offset = factor * offset, as a function of |offset|^2.
fn window_grad_factor(d_sq: f64, radius: f64) -> f64 {
    let q = 1.0 - d_sq / (radius * radius);
    if q <= 0.0 {
        0.0
    } else {
        -6.0 * q * q / (radius * radius)
    }
}

/// Learnable filter grid: 4x4x4 cells, each a (cin x cout) matrix.
/// Storage is row-major over (cell, cin, cout), matching the flattened
/// (GRID_CELLS * cin, cout) matrix used by the gather-scatter evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrid {
    pub cin: usize,
    pub cout: usize,
    pub values: Vec<f64>,
}

impl KernelGrid {
    pub fn zeros(cin: usize, cout: usize) -> KernelGrid {
        KernelGrid {
            cin,
            cout,
            values: vec![0.0; GRID_CELLS * cin * cout],
        }
    }

    pub fn from_values(cin: usize, cout: usize, values: Vec<f64>) -> Result<KernelGrid> {
        if values.len() != GRID_CELLS * cin * cout {
            return Err(Error::Config(format!(
                "kernel grid expects {} values, got {}",
                GRID_CELLS * cin * cout,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("kernel grid has non-finite values".into()));
        }
        Ok(KernelGrid { cin, cout, values })
    }

    #[inline]
    pub fn cell_matrix(&self, cell: usize) -> &[f64] {
        let stride = self.cin * self.cout;
        &self.values[cell * stride..(cell + 1) * stride]
    }
}

/// Antisymmetric filter: 32 free cells; the materialized grid satisfies
/// grid[i,j,k] = -grid[3-i,3-j,3-k] exactly (point reflection through the
/// grid center, negated). With the linear cell index c = 16i + 4j + k the
/// mirror cell of c is 63 - c.
#[derive(Debug, Clone, PartialEq)]
pub struct AntisymKernelGrid {
    pub cin: usize,
    pub cout: usize,
    /// Parameters for cells 0..32.
    pub free: Vec<f64>,
}

impl AntisymKernelGrid {
    pub fn zeros(cin: usize, cout: usize) -> AntisymKernelGrid {
        AntisymKernelGrid {
            cin,
            cout,
            free: vec![0.0; FREE_CELLS * cin * cout],
        }
    }

    pub fn from_free(cin: usize, cout: usize, free: Vec<f64>) -> Result<AntisymKernelGrid> {
        if free.len() != FREE_CELLS * cin * cout {
            return Err(Error::Config(format!(
                "antisymmetric grid expects {} free values, got {}",
                FREE_CELLS * cin * cout,
                free.len()
            )));
        }
        Ok(AntisymKernelGrid { cin, cout, free })
    }

    pub fn materialize(&self) -> KernelGrid {
        let mut grid = KernelGrid::zeros(self.cin, self.cout);
        materialize_antisym(&self.free, self.cin, self.cout, &mut grid.values);
        grid
    }
}

/// Fills a full grid buffer from the free half: cell c < 32 copies, cell
/// 63 - c negates.
pub fn materialize_antisym(free: &[f64], cin: usize, cout: usize, out: &mut [f64]) {
    let stride = cin * cout;
    debug_assert_eq!(free.len(), FREE_CELLS * stride);
    debug_assert_eq!(out.len(), GRID_CELLS * stride);
    for c in 0..FREE_CELLS {
        let src = &free[c * stride..(c + 1) * stride];
        out[c * stride..(c + 1) * stride].copy_from_slice(src);
        let mirror = GRID_CELLS - 1 - c;
        for (o, s) in out[mirror * stride..(mirror + 1) * stride]
            .iter_mut()
            .zip(src)
        {
            *o = -s;
        }
    }
}

/// Trilinear cell lookup for a point in the closed unit cube. Cell centers
/// sit at {-0.75, -0.25, 0.25, 0.75} per axis; coordinates beyond the
/// outermost centers clamp to the nearest cell (no extrapolation).
/// Returns the 8 corner cells, their weights, and d(weight)/d(u).
pub fn trilinear(u: Vec3) -> ([usize; 8], [f64; 8], [[f64; 3]; 8]) {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    let mut dfrac = [0.0f64; 3];
    for (axis, &coord) in u.to_array().iter().enumerate() {
        // Cell-space coordinate: center of cell i is at i - 1.5.
        let t = 2.0 * coord + 1.5;
        let i0 = (t.floor() as i64).clamp(0, 2) as usize;
        let f = t - i0 as f64;
        if (0.0..=1.0).contains(&f) {
            frac[axis] = f;
            dfrac[axis] = 2.0;
        } else {
            frac[axis] = f.clamp(0.0, 1.0);
            dfrac[axis] = 0.0;
        }
        base[axis] = i0;
    }
    let mut cells = [0usize; 8];
    let mut weights = [0.0f64; 8];
    let mut dweights = [[0.0f64; 3]; 8];
    for corner in 0..8 {
        let dx = corner >> 2 & 1;
        let dy = corner >> 1 & 1;
        let dz = corner & 1;
        let ix = base[0] + dx;
        let iy = base[1] + dy;
        let iz = base[2] + dz;
        cells[corner] = ix * 16 + iy * 4 + iz;
        let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
        weights[corner] = wx * wy * wz;
        let sx = if dx == 1 { 1.0 } else { -1.0 };
        let sy = if dy == 1 { 1.0 } else { -1.0 };
        let sz = if dz == 1 { 1.0 } else { -1.0 };
        dweights[corner] = [
            sx * dfrac[0] * wy * wz,
            sy * dfrac[1] * wx * wz,
            sz * dfrac[2] * wx * wy,
        ];
    }
    (cells, weights, dweights)
}

/// Evaluates the grid at a continuous cube point: the (cin x cout) matrix
/// interpolated trilinearly.
pub fn interp(kernel: &KernelGrid, u: Vec3) -> Vec<f64> {
    let stride = kernel.cin * kernel.cout;
    let mut out = vec![0.0; stride];
    let (cells, weights, _) = trilinear(u);
    for (cell, w) in cells.iter().zip(weights.iter()) {
        if *w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(kernel.cell_matrix(*cell)) {
            *o += w * v;
        }
    }
    out
}

/// One neighbor interaction: precomputed window, interpolation cells and
/// weights, and their derivatives with respect to the offset x_i - x.
#[derive(Debug, Clone)]
pub struct ConvEdge {
    pub src: u32,
    pub window: f64,
    pub dwindow: Vec3,
    pub cells: [u16; 8],
    pub weights: [f64; 8],
    pub dweights: [Vec3; 8],
    /// window * weights, the coefficient actually applied per corner cell.
    pub coeffs: [f64; 8],
}

/// Shared per-frame geometry for every convolution over the same
/// (source, query) point pair: CSR edge lists keyed by query.
#[derive(Debug, Clone)]
pub struct ConvPlan {
    pub radius: f64,
    pub n_sources: usize,
    pub row_offsets: Vec<usize>,
    pub edges: Vec<ConvEdge>,
    /// Per-query bitmask over the 64 grid cells touched by its edges.
    pub row_masks: Vec<u64>,
}

impl ConvPlan {
    pub fn n_queries(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn edges_of(&self, q: usize) -> &[ConvEdge] {
        &self.edges[self.row_offsets[q]..self.row_offsets[q + 1]]
    }

    pub fn build(index: &NeighborIndex, queries: &[Vec3]) -> ConvPlan {
        let radius = index.radius();
        let mut row_offsets = Vec::with_capacity(queries.len() + 1);
        row_offsets.push(0);
        let mut edges = Vec::new();
        let mut row_masks = Vec::with_capacity(queries.len());
        let mut scratch = Vec::new();
        for &q in queries {
            index.query_into(q, &mut scratch);
            let mut mask = 0u64;
            for &(src, offset) in &scratch {
                let edge = make_edge(src, offset, radius);
                for cell in edge.cells {
                    mask |= 1u64 << cell;
                }
                edges.push(edge);
            }
            row_offsets.push(edges.len());
            row_masks.push(mask);
        }
        ConvPlan {
            radius,
            n_sources: index.source_positions().len(),
            row_offsets,
            edges,
            row_masks,
        }
    }
}

fn make_edge(src: u32, offset: Vec3, radius: f64) -> ConvEdge {
    let d_sq = offset.norm_sq();
    let a = window(d_sq.sqrt(), radius);
    let dwindow = offset * window_grad_factor(d_sq, radius);
    let u = ball_to_cube_unchecked(offset / radius);
    let (cells, weights, dw_du) = trilinear(u);
    // Chain rule through the ball-to-cube map and the radius scaling.
    let jac = ball_to_cube_jacobian(offset / radius);
    let mut dweights = [Vec3::ZERO; 8];
    for corner in 0..8 {
        let g = dw_du[corner];
        dweights[corner] = vec3(
            (g[0] * jac[0][0] + g[1] * jac[1][0] + g[2] * jac[2][0]) / radius,
            (g[0] * jac[0][1] + g[1] * jac[1][1] + g[2] * jac[2][1]) / radius,
            (g[0] * jac[0][2] + g[1] * jac[1][2] + g[2] * jac[2][2]) / radius,
        );
    }
    let mut cells16 = [0u16; 8];
    for (c16, c) in cells16.iter_mut().zip(cells) {
        *c16 = c as u16;
    }
    let mut coeffs = [0.0; 8];
    for (c, w) in coeffs.iter_mut().zip(weights.iter()) {
        *c = a * w;
    }
    ConvEdge {
        src,
        window: a,
        dwindow,
        cells: cells16,
        weights,
        dweights,
        coeffs,
    }
}

/// Builds the flattened scatter matrix S with rows indexed by query and
/// columns by (cell, cin). `feature_of(edge, q)` supplies the cin-vector
/// entering the kernel for that edge.
fn scatter_features(
    plan: &ConvPlan,
    cin: usize,
    mut feature_of: impl FnMut(&ConvEdge, usize, &mut Vec<f64>),
) -> Vec<f64> {
    let nq = plan.n_queries();
    let mut s = vec![0.0; nq * GRID_CELLS * cin];
    let mut feat = Vec::with_capacity(cin);
    for q in 0..nq {
        let row = &mut s[q * GRID_CELLS * cin..(q + 1) * GRID_CELLS * cin];
        for edge in plan.edges_of(q) {
            if edge.window == 0.0 {
                continue;
            }
            feature_of(edge, q, &mut feat);
            for (cell, &coeff) in edge.cells.iter().zip(edge.coeffs.iter()) {
                if coeff == 0.0 {
                    continue;
                }
                let block = &mut row[*cell as usize * cin..(*cell as usize + 1) * cin];
                for (b, f) in block.iter_mut().zip(feat.iter()) {
                    *b += coeff * f;
                }
            }
        }
    }
    s
}

fn apply_kernel(s: &[f64], kernel: &KernelGrid, nq: usize) -> Vec<f64> {
    let k = GRID_CELLS * kernel.cin;
    let cout = kernel.cout;
    let mut out = vec![0.0; nq * cout];
    for q in 0..nq {
        let row = &s[q * k..(q + 1) * k];
        let dst = &mut out[q * cout..(q + 1) * cout];
        for (j, &sv) in row.iter().enumerate() {
            if sv == 0.0 {
                continue;
            }
            let g = &kernel.values[j * cout..(j + 1) * cout];
            for (d, gv) in dst.iter_mut().zip(g) {
                *d += sv * gv;
            }
        }
    }
    out
}

/// Continuous convolution: per-query sum over neighbors of
/// window * f_i^T * kernel(Lambda((x_i - x)/R)). Features are row-major
/// (n_sources x cin); output is (n_queries x cout).
pub fn cconv_with_plan(features: &[f64], plan: &ConvPlan, kernel: &KernelGrid) -> Result<Vec<f64>> {
    if features.len() != plan.n_sources * kernel.cin {
        return Err(Error::Config(format!(
            "cconv features length {} does not match {} sources x {} channels",
            features.len(),
            plan.n_sources,
            kernel.cin
        )));
    }
    let cin = kernel.cin;
    let s = scatter_features(plan, cin, |edge, _, feat| {
        feat.clear();
        let src = edge.src as usize;
        feat.extend_from_slice(&features[src * cin..(src + 1) * cin]);
    });
    Ok(apply_kernel(&s, kernel, plan.n_queries()))
}

/// Antisymmetric continuous convolution: like `cconv_with_plan` but each
/// neighbor contributes (f_query + f_i) and the kernel is the materialized
/// antisymmetric grid, making pairwise exchanges cancel.
pub fn ascc_with_plan(
    query_features: &[f64],
    src_features: &[f64],
    plan: &ConvPlan,
    kernel: &AntisymKernelGrid,
) -> Result<Vec<f64>> {
    let cin = kernel.cin;
    if src_features.len() != plan.n_sources * cin {
        return Err(Error::Config(format!(
            "ascc source features length {} does not match {} sources x {} channels",
            src_features.len(),
            plan.n_sources,
            cin
        )));
    }
    if query_features.len() != plan.n_queries() * cin {
        return Err(Error::Config(format!(
            "ascc query features length {} does not match {} queries x {} channels",
            query_features.len(),
            plan.n_queries(),
            cin
        )));
    }
    let grid = kernel.materialize();
    let s = scatter_features(plan, cin, |edge, q, feat| {
        feat.clear();
        let src = edge.src as usize;
        for ch in 0..cin {
            feat.push(query_features[q * cin + ch] + src_features[src * cin + ch]);
        }
    });
    Ok(apply_kernel(&s, &grid, plan.n_queries()))
}

/// Convenience wrapper building the neighbor index and plan internally.
pub fn cconv(
    features: &[f64],
    positions: &[Vec3],
    queries: &[Vec3],
    kernel: &KernelGrid,
    radius: f64,
) -> Result<Vec<f64>> {
    let index = NeighborIndex::build(positions, radius)?;
    let plan = ConvPlan::build(&index, queries);
    cconv_with_plan(features, &plan, kernel)
}

/// Convenience wrapper for ASCC where queries carry their own features.
pub fn ascc(
    query_features: &[f64],
    src_features: &[f64],
    positions: &[Vec3],
    queries: &[Vec3],
    kernel: &AntisymKernelGrid,
    radius: f64,
) -> Result<Vec<f64>> {
    let index = NeighborIndex::build(positions, radius)?;
    let plan = ConvPlan::build(&index, queries);
    ascc_with_plan(query_features, src_features, &plan, kernel)
}
