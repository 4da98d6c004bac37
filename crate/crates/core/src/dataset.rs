//! Ground-truth dataset construction: procedural tank sampling, lattice
//! fills, and the chained random-rotation generation loop (fill a level
//! tank, rotate it by a random pitch/roll, let the fluid flow for a fixed
//! number of frames, then carry the final frame into the next iteration).

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_frames, FrameData, FrameFile};
use crate::math::{vec3, Mat3, Vec3};
use crate::sph::{dfsph_step, SphState};
use crate::types::{
    rotate_rigid, shape_sdf, Aabb, Kind, ParticleSet, Scene, SimConfig, TankShape,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub tank: TankShape,
    pub tank_id: u32,
    /// Initial fill fraction range; clamped to [0.25, 0.75].
    pub fill_min: f64,
    pub fill_max: f64,
    /// Max |pitch| and |roll| in radians; clamped to pi/2.
    pub max_angle: f64,
    pub frames_per_iteration: usize,
    pub n_iterations: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_iteration < 1 {
            return Err(Error::Config("frames_per_iteration must be >= 1".into()));
        }
        if !(self.fill_min <= self.fill_max) {
            return Err(Error::Config("fill_min must be <= fill_max".into()));
        }
        Ok(())
    }

    fn clamped_fill(&self) -> (f64, f64) {
        (
            self.fill_min.clamp(0.25, 0.75),
            self.fill_max.clamp(0.25, 0.75),
        )
    }

    fn clamped_angle(&self) -> f64 {
        self.max_angle.clamp(0.0, FRAC_PI_2)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub file: String,
    pub pitch: f64,
    pub roll: f64,
    pub frames: u32,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tank_id: u32,
    pub seed: u64,
    pub fill_fraction: f64,
    pub iterations: Vec<IterationRecord>,
}

/// Inward surface normal of a shape at a near-surface local point, from the
/// signed-distance gradient (with a one-sided fallback where the gradient
/// degenerates, e.g. exactly on an interior rib mid-plane).
fn inward_normal(shape: &TankShape, p: Vec3, eps: f64) -> Vec3 {
    let d = |v: Vec3| shape_sdf(shape, v);
    let central = vec3(
        d(p + vec3(eps, 0.0, 0.0)) - d(p - vec3(eps, 0.0, 0.0)),
        d(p + vec3(0.0, eps, 0.0)) - d(p - vec3(0.0, eps, 0.0)),
        d(p + vec3(0.0, 0.0, eps)) - d(p - vec3(0.0, 0.0, eps)),
    );
    let g = if central.norm() > 1e-9 {
        central
    } else {
        let base = d(p);
        vec3(
            d(p + vec3(eps, 0.0, 0.0)) - base,
            d(p + vec3(0.0, eps, 0.0)) - base,
            d(p + vec3(0.0, 0.0, eps)) - base,
        )
    };
    if g.norm() > 1e-9 {
        -g.normalized()
    } else {
        vec3(0.0, 1.0, 0.0)
    }
}

/// Lattice depth of the boundary sampling, in particle spacings. The
/// ground-truth solver treats walls as frozen fluid; with a kernel support
/// of four spacings the wall must be several layers thick or near-wall
/// densities are badly off.
pub const BOUNDARY_DEPTH_FACTOR: f64 = 3.5;

/// Samples a tank's walls as boundary particles on an h lattice: every
/// lattice point on or just outside the interior (signed distance in
/// [0, 3.5h)) becomes a particle with an inward unit normal, forming a
/// volumetric shell that acts like frozen fluid in the solver.
pub fn build_tank(shape: &TankShape, h: f64) -> Result<Scene> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("particle spacing must be positive, got {h}")));
    }
    let r = shape.circumradius() + BOUNDARY_DEPTH_FACTOR * h + h;
    let n = (r / h).ceil() as i64;
    let mut boundary = ParticleSet::empty();
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                let p = vec3(i as f64 * h, j as f64 * h, k as f64 * h);
                let sdf = shape_sdf(shape, p);
                if sdf >= -1e-9 && sdf < BOUNDARY_DEPTH_FACTOR * h {
                    boundary.positions.push(p);
                    boundary.velocities.push(Vec3::ZERO);
                    boundary.kinds.push(Kind::Boundary);
                    boundary.normals.push(inward_normal(shape, p, 0.25 * h));
                }
            }
        }
    }
    if boundary.positions.is_empty() {
        return Err(Error::Config("tank sampling produced no boundary".into()));
    }
    let extent = shape.circumradius() + BOUNDARY_DEPTH_FACTOR * h + h;
    Ok(Scene {
        boundary,
        bounds: Aabb {
            min: [-extent, -extent, -extent],
            max: [extent, extent, extent],
        },
        center: Vec3::ZERO,
        shape: shape.clone(),
        orientation: Mat3::IDENTITY,
    })
}

/// Interior lattice sites (local frame) available for fluid fill, sorted
/// bottom-up. Sites share the boundary sampling lattice and keep one
/// spacing of wall clearance — the natural rest distance from a sampled
/// wall, so a fresh fill starts close to equilibrium.
fn fill_candidates(shape: &TankShape, h: f64) -> Vec<Vec3> {
    let r = shape.circumradius();
    let n = (r / h).ceil() as i64 + 1;
    let mut cells = Vec::new();
    for i in -n..n {
        for j in -n..n {
            for k in -n..n {
                let p = vec3(i as f64 * h, j as f64 * h, k as f64 * h);
                if shape_sdf(shape, p) <= -0.95 * h {
                    cells.push(p);
                }
            }
        }
    }
    cells.sort_by(|a, b| {
        (a.y, a.x, a.z)
            .partial_cmp(&(b.y, b.x, b.z))
            .expect("finite lattice coordinates")
    });
    cells
}

/// Measured fillable interior volume of a level tank (m^3).
pub fn interior_volume(shape: &TankShape, h: f64) -> f64 {
    fill_candidates(shape, h).len() as f64 * h * h * h
}

/// Fills the lowest interior cells of a level tank until `fill_fraction` of
/// the fillable volume is covered. Returns boundary + fluid (at rest).
pub fn fill_tank(scene: &Scene, fill_fraction: f64, config: &SimConfig) -> Result<ParticleSet> {
    if !(fill_fraction > 0.0 && fill_fraction < 1.0) {
        return Err(Error::RejectedInput(format!(
            "fill fraction must be in (0, 1), got {fill_fraction}"
        )));
    }
    let h = config.particle_radius;
    let cells = fill_candidates(&scene.shape, h);
    let target = (fill_fraction * cells.len() as f64).round() as usize;
    if target == 0 {
        return Err(Error::RejectedInput(format!(
            "fill fraction {fill_fraction} yields zero particles"
        )));
    }
    let mut set = scene.boundary.clone();
    for p in cells.into_iter().take(target) {
        set.positions.push(scene.center + p);
        set.velocities.push(Vec3::ZERO);
        set.kinds.push(Kind::Fluid);
        set.normals.push(Vec3::ZERO);
    }
    Ok(set)
}

fn fluid_frame(state: &SphState) -> FrameData {
    let mut positions = Vec::with_capacity(state.set.fluid_count());
    let mut velocities = Vec::with_capacity(state.set.fluid_count());
    for i in 0..state.set.len() {
        if state.set.kinds[i] == Kind::Fluid {
            positions.push(state.set.positions[i]);
            velocities.push(state.set.velocities[i]);
        }
    }
    FrameData {
        positions,
        velocities,
    }
}

/// Boundary particles of the innermost wall layer only: the learned model
/// consumes a surface sampling, while the solver's deeper frozen-fluid
/// layers are an implementation detail of the ground truth.
pub fn boundary_of(set: &ParticleSet, scene: &Scene, h: f64) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    for i in 0..set.len() {
        if set.kinds[i] == Kind::Boundary && scene.interior_sdf(set.positions[i]) < 0.9 * h {
            positions.push(set.positions[i]);
            normals.push(set.normals[i]);
        }
    }
    (positions, normals)
}

/// Runs the chained generation loop and writes one `.frames` file per
/// successful iteration plus a `manifest.toml`. Deterministic per seed. An
/// iteration whose solver aborts is skipped (logged in the manifest) and
/// the chain restarts from the last good frame.
pub fn generate(spec: &DatasetSpec, config: &SimConfig, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene0 = build_tank(&spec.tank, config.particle_radius)?;
    let (fmin, fmax) = spec.clamped_fill();
    let fill = if fmax > fmin {
        rng.gen_range(fmin..=fmax)
    } else {
        fmin
    };
    let set = fill_tank(&scene0, fill, config)?;
    let mut state = SphState::new(set, config)?;
    let mut scene = scene0;
    // Let the fresh lattice fill relax in the level tank before the first
    // recorded iteration, so iteration 0 starts from a settled state.
    for _ in 0..10 {
        dfsph_step(&mut state, &scene, config)?;
    }
    let max_angle = spec.clamped_angle();

    let mut manifest = Manifest {
        tank_id: spec.tank_id,
        seed: spec.seed,
        fill_fraction: fill,
        iterations: Vec::new(),
    };

    for k in 0..spec.n_iterations {
        let (pitch, roll) = if max_angle > 0.0 {
            (
                rng.gen_range(-max_angle..=max_angle),
                rng.gen_range(-max_angle..=max_angle),
            )
        } else {
            (0.0, 0.0)
        };
        let (rot_set, rot_scene) = rotate_rigid(&state.set, &scene, pitch, roll)?;
        let mut trial = SphState::new(rot_set, config)?;
        let mut frames = vec![fluid_frame(&trial)];
        let mut failure = None;
        for _ in 1..spec.frames_per_iteration {
            match dfsph_step(&mut trial, &rot_scene, config) {
                Ok(()) => frames.push(fluid_frame(&trial)),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let file_name = format!("tank{}_iter{}.frames", spec.tank_id, k);
        if let Some(e) = failure {
            eprintln!("iteration {k} skipped: {e}");
            manifest.iterations.push(IterationRecord {
                index: k as u32,
                file: String::new(),
                pitch,
                roll,
                frames: 0,
                skipped: true,
            });
            continue;
        }
        let (boundary_positions, boundary_normals) =
            boundary_of(&trial.set, &rot_scene, config.particle_radius);
        let n_frames = frames.len() as u32;
        write_frames(
            &out_dir.join(&file_name),
            &FrameFile {
                dt: config.dt,
                pitch,
                roll,
                fill_fraction: fill,
                boundary_positions,
                boundary_normals,
                frames,
            },
        )?;
        manifest.iterations.push(IterationRecord {
            index: k as u32,
            file: file_name,
            pitch,
            roll,
            frames: n_frames,
            skipped: false,
        });
        state = trial;
        scene = rot_scene;
    }
    crate::io::save_toml(&out_dir.join("manifest.toml"), &manifest)?;
    Ok(manifest)
}

/// Paths of all successfully written iteration files, in order.
pub fn manifest_files(manifest: &Manifest, dir: &Path) -> Vec<PathBuf> {
    manifest
        .iterations
        .iter()
        .filter(|it| !it.skipped)
        .map(|it| dir.join(&it.file))
        .collect()
}

/// Two desk-scale tanks with interior structure: a plain box and a box
/// split by a ribbed wall with a hole. Extents are multiples of the spacing
/// so walls coincide with the sampling lattice.
pub fn standard_tanks(h: f64) -> Vec<TankShape> {
    vec![
        TankShape::Box {
            half: [8.0 * h, 5.0 * h, 5.0 * h],
        },
        TankShape::RibbedBox {
            half: [8.0 * h, 5.0 * h, 5.0 * h],
            hole_radius: 2.5 * h,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_frames;
    use crate::types::default_config;

    fn small_box() -> TankShape {
        let h = default_config().particle_radius;
        TankShape::Box {
            half: [4.0 * h, 4.0 * h, 4.0 * h],
        }
    }

    #[test]
    fn tank_normals_point_inward_and_are_unit() {
        let cfg = default_config();
        let h = cfg.particle_radius;
        for shape in [
            small_box(),
            TankShape::RibbedBox {
                half: [5.0 * h, 4.0 * h, 4.0 * h],
                hole_radius: 2.0 * h,
            },
            TankShape::Cylinder {
                radius: 4.0 * h,
                half_height: 4.0 * h,
            },
            TankShape::LTank {
                half: [5.0 * h, 5.0 * h, 4.0 * h],
            },
        ] {
            let scene = build_tank(&shape, h).unwrap();
            assert!(!scene.boundary.positions.is_empty());
            for (p, n) in scene
                .boundary
                .positions
                .iter()
                .zip(&scene.boundary.normals)
            {
                assert!((n.norm() - 1.0).abs() < 1e-9);
                // A step inward decreases the signed distance.
                let here = shape_sdf(&shape, *p);
                let inward = shape_sdf(&shape, *p + *n * (0.5 * h));
                assert!(
                    inward < here + 1e-9,
                    "normal not inward at {p:?} ({here} -> {inward})"
                );
            }
        }
    }

    #[test]
    fn boundary_particles_lie_on_surface_shell() {
        let cfg = default_config();
        let h = cfg.particle_radius;
        let scene = build_tank(&small_box(), h).unwrap();
        for p in &scene.boundary.positions {
            let sdf = shape_sdf(&scene.shape, *p);
            assert!(sdf >= -1e-9 && sdf < BOUNDARY_DEPTH_FACTOR * h, "sdf {sdf}");
        }
    }

    #[test]
    fn fill_count_tracks_interior_volume() {
        let cfg = default_config();
        let h = cfg.particle_radius;
        let scene = build_tank(&small_box(), h).unwrap();
        let set = fill_tank(&scene, 0.5, &cfg).unwrap();
        let v = interior_volume(&scene.shape, h);
        let expected = (0.5 * v / (h * h * h)).round();
        // One lattice layer of slack.
        let layer = (v / (h * h * h)).powf(2.0 / 3.0);
        let got = set.fluid_count() as f64;
        assert!(
            (got - expected).abs() <= layer,
            "count {got} vs expected {expected} (layer {layer})"
        );
    }

    #[test]
    fn minimal_fill_starts_at_bottom_layer() {
        let cfg = default_config();
        let h = cfg.particle_radius;
        let scene = build_tank(&small_box(), h).unwrap();
        let cells = fill_candidates(&scene.shape, h);
        let fraction = 1.5 / cells.len() as f64;
        let set = fill_tank(&scene, fraction, &cfg).unwrap();
        assert!(set.fluid_count() >= 1);
        let min_y = cells.iter().map(|c| c.y).fold(f64::INFINITY, f64::min);
        for i in 0..set.len() {
            if set.kinds[i] == Kind::Fluid {
                assert!((set.positions[i].y - min_y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_yield_fill_rejected() {
        let cfg = default_config();
        let scene = build_tank(&small_box(), cfg.particle_radius).unwrap();
        assert!(fill_tank(&scene, 1e-9, &cfg).is_err());
        assert!(fill_tank(&scene, 0.0, &cfg).is_err());
        assert!(fill_tank(&scene, 1.0, &cfg).is_err());
    }

    #[test]
    fn level_tank_without_rotation_stays_near_static() {
        let cfg = default_config();
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            tank: small_box(),
            tank_id: 0,
            fill_min: 0.4,
            fill_max: 0.4,
            max_angle: 0.0,
            frames_per_iteration: 6,
            n_iterations: 1,
            seed: 7,
        };
        let manifest = generate(&spec, &cfg, dir.path()).unwrap();
        let files = manifest_files(&manifest, dir.path());
        assert_eq!(files.len(), 1);
        let file = read_frames(&files[0]).unwrap();
        assert_eq!(file.frames.len(), 6);
        let first = &file.frames[0].positions;
        let last = &file.frames.last().unwrap().positions;
        let h = cfg.particle_radius;
        let max_disp = first
            .iter()
            .zip(last)
            .map(|(a, b)| (*a - *b).norm())
            .fold(0.0f64, f64::max);
        assert!(max_disp < h, "fluid moved {max_disp} in a level tank");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = default_config();
        let spec = DatasetSpec {
            tank: small_box(),
            tank_id: 3,
            fill_min: 0.3,
            fill_max: 0.6,
            max_angle: FRAC_PI_2,
            frames_per_iteration: 4,
            n_iterations: 2,
            seed: 99,
        };
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let manifest = generate(&spec, &cfg, dir.path()).unwrap();
            manifest_files(&manifest, dir.path())
                .iter()
                .map(|p| std::fs::read(p).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn chaining_links_iterations_exactly() {
        let cfg = default_config();
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            tank: small_box(),
            tank_id: 1,
            fill_min: 0.4,
            fill_max: 0.5,
            max_angle: 0.5,
            frames_per_iteration: 3,
            n_iterations: 3,
            seed: 5,
        };
        let manifest = generate(&spec, &cfg, dir.path()).unwrap();
        let files = manifest_files(&manifest, dir.path());
        let mut center = Vec3::ZERO;
        // Rotation pivot is the tank center (origin for built tanks).
        for pair in files.windows(2) {
            let prev = read_frames(&pair[0]).unwrap();
            let next = read_frames(&pair[1]).unwrap();
            let m = crate::types::rotation_matrix(next.pitch, next.roll);
            let last = &prev.frames.last().unwrap().positions;
            let first = &next.frames[0].positions;
            assert_eq!(last.len(), first.len());
            for (a, b) in last.iter().zip(first) {
                let rotated = center + m.mul_vec(*a - center);
                assert!((rotated - *b).norm() < 1e-12);
            }
            center = Vec3::ZERO;
        }
    }

    #[test]
    fn sampled_parameters_respect_clamps() {
        let cfg = default_config();
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            tank: small_box(),
            tank_id: 2,
            fill_min: 0.0, // clamps to 0.25
            fill_max: 1.0, // clamps to 0.75
            max_angle: 10.0, // clamps to pi/2
            frames_per_iteration: 2,
            n_iterations: 2,
            seed: 13,
        };
        let manifest = generate(&spec, &cfg, dir.path()).unwrap();
        assert!(manifest.fill_fraction >= 0.25 && manifest.fill_fraction <= 0.75);
        for it in &manifest.iterations {
            assert!(it.pitch.abs() <= FRAC_PI_2 + 1e-12);
            assert!(it.roll.abs() <= FRAC_PI_2 + 1e-12);
        }
    }
}
