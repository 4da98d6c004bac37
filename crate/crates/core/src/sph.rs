//! Ground-truth fluid solver: weakly-iterated divergence-free SPH with a
//! constant-density pressure pass, XSPH velocity smoothing, and static
//! boundary particles carrying a pseudo-mass derived from their local
//! sampling density.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::neighbor::NeighborIndex;
use crate::types::{Kind, ParticleSet, Scene, SimConfig};

/// Kernel support radius as a multiple of the particle spacing.
pub const SUPPORT_FACTOR: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct SphParams {
    /// Constant-density solve stops when max (rho - rho0)/rho0 drops below.
    pub density_tolerance: f64,
    /// Divergence solve stops when the average positive density derivative
    /// drops below this fraction of rho0 per second.
    pub divergence_tolerance: f64,
    pub max_pressure_iters: usize,
    pub xsph: f64,
    pub cfl: f64,
    pub max_substeps: usize,
    /// Upper bound on a single substep (s); smaller substeps keep the
    /// per-step gravity impulse small, which quiets pressure-solver jitter.
    pub max_substep_dt: f64,
}

impl Default for SphParams {
    fn default() -> SphParams {
        SphParams {
            density_tolerance: 0.005,
            divergence_tolerance: 0.1,
            max_pressure_iters: 50,
            xsph: 0.01,
            cfl: 0.4,
            max_substeps: 32,
            max_substep_dt: 0.005,
        }
    }
}

/// Particle state plus the per-particle quantities the pressure solver
/// maintains between frames.
#[derive(Debug, Clone)]
pub struct SphState {
    pub set: ParticleSet,
    /// Fluid particles carry the uniform sampling mass; boundary particles
    /// carry a pseudo-mass that normalizes wall contributions.
    pub masses: Vec<f64>,
    pub densities: Vec<f64>,
    alphas: Vec<f64>,
}

/// Cubic spline kernel with the given support radius (value is zero at and
/// beyond `support`). Normalized so the integral over the support ball is 1.
pub fn smoothing_kernel(r: f64, support: f64) -> f64 {
    let hk = support * 0.5;
    let q = r / hk;
    let sigma = 1.0 / (std::f64::consts::PI * hk * hk * hk);
    if q < 1.0 {
        sigma * (1.0 - 1.5 * q * q + 0.75 * q * q * q)
    } else if q < 2.0 {
        let t = 2.0 - q;
        sigma * 0.25 * t * t * t
    } else {
        0.0
    }
}

/// Gradient of the kernel with respect to its vector argument `r`.
pub fn smoothing_kernel_grad(r: Vec3, support: f64) -> Vec3 {
    let hk = support * 0.5;
    let d = r.norm();
    if d < 1e-12 {
        return Vec3::ZERO;
    }
    let q = d / hk;
    let sigma = 1.0 / (std::f64::consts::PI * hk * hk * hk);
    let dwdq = if q < 1.0 {
        sigma * (-3.0 * q + 2.25 * q * q)
    } else if q < 2.0 {
        let t = 2.0 - q;
        sigma * (-0.75 * t * t)
    } else {
        return Vec3::ZERO;
    };
    r * (dwdq / (hk * d))
}

impl SphState {
    pub fn new(set: ParticleSet, config: &SimConfig) -> Result<SphState> {
        set.validate()?;
        // Boundary particles are sampled on the same lattice as fluid and
        // act as frozen fluid, so every particle carries the lattice mass.
        let fluid_mass = config.particle_mass();
        let masses = vec![fluid_mass; set.len()];
        let n = set.len();
        Ok(SphState {
            set,
            masses,
            densities: vec![0.0; n],
            alphas: vec![0.0; n],
        })
    }

    pub fn support(&self, config: &SimConfig) -> f64 {
        SUPPORT_FACTOR * config.particle_radius
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.set
            .velocities
            .iter()
            .zip(&self.masses)
            .zip(&self.set.kinds)
            .filter(|(_, k)| **k == Kind::Fluid)
            .map(|((v, m), _)| 0.5 * m * v.norm_sq())
            .sum()
    }

    pub fn potential_energy(&self, gravity: Vec3) -> f64 {
        self.set
            .positions
            .iter()
            .zip(&self.masses)
            .zip(&self.set.kinds)
            .filter(|(_, k)| **k == Kind::Fluid)
            .map(|((p, m), _)| -m * gravity.dot(*p))
            .sum()
    }
}

/// SPH density estimate per particle: rho_i = sum_j m_j W(|x_i - x_j|).
pub fn density(
    positions: &[Vec3],
    masses: &[f64],
    index: &NeighborIndex,
    support: f64,
) -> Vec<f64> {
    let mut scratch = Vec::new();
    positions
        .iter()
        .map(|&p| {
            index.query_into(p, &mut scratch);
            scratch
                .iter()
                .map(|(j, off)| masses[*j as usize] * smoothing_kernel(off.norm(), support))
                .sum()
        })
        .collect()
}

fn compute_alphas(state: &mut SphState, index: &NeighborIndex, support: f64) {
    let n = state.set.len();
    let mut scratch = Vec::new();
    for i in 0..n {
        if state.set.kinds[i] != Kind::Fluid {
            state.alphas[i] = 0.0;
            continue;
        }
        index.query_into(state.set.positions[i], &mut scratch);
        let mut grad_sum = Vec3::ZERO;
        let mut grad_sq = 0.0;
        for &(j, off) in &scratch {
            let j = j as usize;
            if j == i {
                continue;
            }
            // Offset is x_j - x_i; the gradient w.r.t. x_i flips its sign.
            let g = smoothing_kernel_grad(-off, support) * state.masses[j];
            grad_sum += g;
            if state.set.kinds[j] == Kind::Fluid {
                grad_sq += g.norm_sq();
            }
        }
        let denom = grad_sum.norm_sq() + grad_sq;
        state.alphas[i] = if denom > 1e-12 {
            state.densities[i] / denom
        } else {
            0.0
        };
    }
}

/// Density derivative from the continuity equation, per fluid particle.
fn density_derivatives(
    state: &SphState,
    velocities: &[Vec3],
    index: &NeighborIndex,
    support: f64,
    out: &mut Vec<f64>,
) {
    let n = state.set.len();
    out.clear();
    out.resize(n, 0.0);
    let mut scratch = Vec::new();
    for i in 0..n {
        if state.set.kinds[i] != Kind::Fluid {
            continue;
        }
        index.query_into(state.set.positions[i], &mut scratch);
        let vi = velocities[i];
        let mut d = 0.0;
        for &(j, off) in &scratch {
            let j = j as usize;
            if j == i {
                continue;
            }
            let vj = if state.set.kinds[j] == Kind::Fluid {
                velocities[j]
            } else {
                Vec3::ZERO
            };
            let g = smoothing_kernel_grad(-off, support);
            d += state.masses[j] * (vi - vj).dot(g);
        }
        out[i] = d;
    }
}

/// One pressure relaxation sweep; `kappa` holds per-particle stiffness.
/// Each particle's velocity change per sweep is capped at a fraction of the
/// support per frame so a sparse neighborhood (huge stiffness factor) can
/// only nudge, never catapult.
fn apply_pressure_forces(
    state: &SphState,
    kappa: &[f64],
    velocities: &mut [Vec3],
    index: &NeighborIndex,
    support: f64,
    dt: f64,
) {
    let n = state.set.len();
    let mut scratch = Vec::new();
    let dv_cap = 0.2 * support / dt;
    for i in 0..n {
        if state.set.kinds[i] != Kind::Fluid {
            continue;
        }
        let ki = kappa[i] / state.densities[i].max(1e-12);
        index.query_into(state.set.positions[i], &mut scratch);
        let mut dv = Vec3::ZERO;
        for &(j, off) in &scratch {
            let j = j as usize;
            if j == i {
                continue;
            }
            let g = smoothing_kernel_grad(-off, support);
            let coeff = if state.set.kinds[j] == Kind::Fluid {
                ki + kappa[j] / state.densities[j].max(1e-12)
            } else {
                ki
            };
            dv += g * (state.masses[j] * coeff);
        }
        // Under-relax: with wide kernels (hundreds of neighbors) the pure
        // Jacobi update overshoots and the solve oscillates.
        let mut step = dv * (0.5 * dt);
        let mag = step.norm();
        if mag > dv_cap {
            step = step * (dv_cap / mag);
        }
        velocities[i] -= step;
    }
}

fn xsph_smooth(
    state: &SphState,
    velocities: &mut [Vec3],
    index: &NeighborIndex,
    support: f64,
    strength: f64,
) {
    let n = state.set.len();
    let mut scratch = Vec::new();
    let mut delta = vec![Vec3::ZERO; n];
    for i in 0..n {
        if state.set.kinds[i] != Kind::Fluid {
            continue;
        }
        index.query_into(state.set.positions[i], &mut scratch);
        let mut acc = Vec3::ZERO;
        for &(j, off) in &scratch {
            let j = j as usize;
            if j == i || state.set.kinds[j] != Kind::Fluid {
                continue;
            }
            let w = smoothing_kernel(off.norm(), support);
            acc += (velocities[j] - velocities[i])
                * (state.masses[j] / state.densities[j].max(1e-12) * w);
        }
        delta[i] = acc * strength;
    }
    for i in 0..n {
        velocities[i] += delta[i];
    }
}

/// Keeps fluid inside the tank: if a particle leaves the interior (or gets
/// closer to the wall than a quarter spacing), it is pushed back along the
/// signed-distance gradient and its outward velocity component is removed.
fn project_into_scene(state: &mut SphState, scene: &Scene, margin: f64) {
    for i in 0..state.set.len() {
        if state.set.kinds[i] != Kind::Fluid {
            continue;
        }
        let p = state.set.positions[i];
        let sdf = scene.interior_sdf(p);
        if sdf > -margin {
            let n = scene.sdf_gradient(p);
            state.set.positions[i] = p - n * (sdf + margin);
            let vn = state.set.velocities[i].dot(n);
            if vn > 0.0 {
                state.set.velocities[i] -= n * vn;
            }
        }
    }
}

fn substep(
    state: &mut SphState,
    scene: &Scene,
    config: &SimConfig,
    params: &SphParams,
    dt: f64,
) -> Result<()> {
    let support = SUPPORT_FACTOR * config.particle_radius;
    let index = NeighborIndex::build(&state.set.positions, support)?;
    // Only fluid densities drive the solver; static walls sit at rest.
    let mut scratch = Vec::new();
    for i in 0..state.set.len() {
        if state.set.kinds[i] != Kind::Fluid {
            state.densities[i] = config.rest_density;
            continue;
        }
        index.query_into(state.set.positions[i], &mut scratch);
        let d: f64 = scratch
            .iter()
            .map(|(j, off)| state.masses[*j as usize] * smoothing_kernel(off.norm(), support))
            .sum();
        if !(d > 0.0) {
            return Err(Error::Numerical(format!(
                "non-positive density {d} at particle {i}"
            )));
        }
        state.densities[i] = d;
    }
    compute_alphas(state, &index, support);

    let n = state.set.len();
    let gravity = Vec3::from_array(config.gravity);
    let mut velocities = state.set.velocities.clone();
    for i in 0..n {
        if state.set.kinds[i] == Kind::Fluid {
            velocities[i] += gravity * dt;
        }
    }
    xsph_smooth(state, &mut velocities, &index, support, params.xsph);

    let rho0 = config.rest_density;
    let mut drho = Vec::new();
    let mut kappa = vec![0.0; n];

    // Constant-density solve: predicted density rho + dt*drho relaxed back
    // to rest density.
    let mut first_err = None;
    for iter in 0..params.max_pressure_iters {
        density_derivatives(state, &velocities, &index, support, &mut drho);
        let mut max_err = 0.0f64;
        for i in 0..n {
            if state.set.kinds[i] != Kind::Fluid {
                continue;
            }
            let excess = (state.densities[i] + dt * drho[i] - rho0).max(0.0);
            max_err = max_err.max(excess / rho0);
            kappa[i] = excess / (dt * dt) * state.alphas[i];
        }
        if max_err < params.density_tolerance {
            break;
        }
        let base = *first_err.get_or_insert(max_err);
        if iter > 5 && max_err > 10.0 * base {
            return Err(Error::Numerical(format!(
                "constant-density solve diverging: error {max_err:.3e} from {base:.3e}"
            )));
        }
        apply_pressure_forces(state, &kappa, &mut velocities, &index, support, dt);
    }

    // Divergence-free solve on the same neighborhood.
    let mut first_err = None;
    for iter in 0..params.max_pressure_iters {
        density_derivatives(state, &velocities, &index, support, &mut drho);
        let mut sum_err = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if state.set.kinds[i] != Kind::Fluid {
                continue;
            }
            // The divergence constraint is ill-posed at the free surface;
            // only bulk particles (near rest density) participate.
            let positive = if state.densities[i] >= 0.9 * rho0 {
                drho[i].max(0.0)
            } else {
                0.0
            };
            sum_err += positive;
            count += 1;
            kappa[i] = positive / dt * state.alphas[i];
        }
        let avg = sum_err / count.max(1) as f64;
        if avg < params.divergence_tolerance * rho0 {
            break;
        }
        let base = *first_err.get_or_insert(avg);
        if iter > 5 && avg > 10.0 * base {
            return Err(Error::Numerical(format!(
                "divergence solve diverging: error {avg:.3e} from {base:.3e}"
            )));
        }
        apply_pressure_forces(state, &kappa, &mut velocities, &index, support, dt);
    }

    for i in 0..n {
        if state.set.kinds[i] == Kind::Fluid {
            state.set.positions[i] += velocities[i] * dt;
            state.set.velocities[i] = velocities[i];
        }
    }
    project_into_scene(state, scene, 0.25 * config.particle_radius);
    Ok(())
}

/// Advance one frame of length `config.dt`, internally substepping under a
/// CFL limit so fast splashes stay stable at the fixed frame rate.
pub fn dfsph_step(state: &mut SphState, scene: &Scene, config: &SimConfig) -> Result<()> {
    dfsph_step_with(state, scene, config, &SphParams::default())
}

pub fn dfsph_step_with(
    state: &mut SphState,
    scene: &Scene,
    config: &SimConfig,
    params: &SphParams,
) -> Result<()> {
    let mut remaining = config.dt;
    let floor = config.dt / params.max_substeps as f64;
    while remaining > 1e-12 {
        let vmax = state
            .set
            .velocities
            .iter()
            .zip(&state.set.kinds)
            .filter(|(_, k)| **k == Kind::Fluid)
            .map(|(v, _)| v.norm())
            .fold(0.0f64, f64::max);
        let gmag = Vec3::from_array(config.gravity).norm();
        // Include one step of gravity in the speed estimate so a fluid
        // released from rest does not take a full frame as its first step.
        let speed = (vmax + gmag * remaining).max(1e-6);
        let dt = remaining
            .min(params.cfl * config.particle_radius / speed)
            .min(params.max_substep_dt)
            .max(floor)
            .min(remaining);
        substep(state, scene, config, params, dt)?;
        remaining -= dt;
    }
    Ok(())
}

/// Worst fluid penetration depth into the boundary (0 when all inside).
pub fn max_penetration(state: &SphState, scene: &Scene) -> f64 {
    state
        .set
        .positions
        .iter()
        .zip(&state.set.kinds)
        .filter(|(_, k)| **k == Kind::Fluid)
        .map(|(p, _)| scene.interior_sdf(*p).max(0.0))
        .fold(0.0, f64::max)
}
