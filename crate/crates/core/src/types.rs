//! Shared domain types: particle sets, simulation configuration, and
//! rigid-scene manipulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{vec3, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Fluid,
    Boundary,
}

/// Positions, velocities, and kinds of all particles in one frame.
/// Boundary particles additionally carry a unit inward surface normal.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub kinds: Vec<Kind>,
    /// Unit normals for boundary particles; zero for fluid entries.
    pub normals: Vec<Vec3>,
}

impl ParticleSet {
    pub fn empty() -> ParticleSet {
        ParticleSet {
            positions: Vec::new(),
            velocities: Vec::new(),
            kinds: Vec::new(),
            normals: Vec::new(),
        }
    }

    pub fn fluid_at_rest(positions: Vec<Vec3>) -> ParticleSet {
        let n = positions.len();
        ParticleSet {
            positions,
            velocities: vec![Vec3::ZERO; n],
            kinds: vec![Kind::Fluid; n],
            normals: vec![Vec3::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn fluid_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k == Kind::Fluid).count()
    }

    /// Appends all particles from `other`.
    pub fn extend(&mut self, other: &ParticleSet) {
        self.positions.extend_from_slice(&other.positions);
        self.velocities.extend_from_slice(&other.velocities);
        self.kinds.extend_from_slice(&other.kinds);
        self.normals.extend_from_slice(&other.normals);
    }

    /// Checks the structural invariants: aligned lengths, finite
    /// coordinates, unit boundary normals.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.velocities.len() != n || self.kinds.len() != n || self.normals.len() != n {
            return Err(Error::RejectedInput(format!(
                "misaligned particle arrays: {} positions, {} velocities, {} kinds, {} normals",
                n,
                self.velocities.len(),
                self.kinds.len(),
                self.normals.len()
            )));
        }
        for i in 0..n {
            if !self.positions[i].is_finite() || !self.velocities[i].is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite state at particle {i}"
                )));
            }
            if self.kinds[i] == Kind::Boundary {
                let norm = self.normals[i].norm();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::RejectedInput(format!(
                        "boundary particle {i} has non-unit normal (|n| = {norm})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Core simulation constants shared by the oracle, the network, and the
/// stepper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Particle radius / lattice spacing, meters.
    pub particle_radius: f64,
    /// Convolution radius R, meters.
    pub conv_radius: f64,
    /// Frame timestep, seconds.
    pub dt: f64,
    /// Rest density, kg/m^3.
    pub rest_density: f64,
    /// External gravity, m/s^2.
    pub gravity: [f64; 3],
}

impl SimConfig {
    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::from_array(self.gravity)
    }

    /// Fluid particle mass for uniform lattice sampling, kg.
    pub fn particle_mass(&self) -> f64 {
        self.rest_density * self.particle_radius.powi(3)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.particle_radius > 0.0 && self.dt > 0.0 && self.rest_density > 0.0) {
            return Err(Error::Config(
                "particle_radius, dt, and rest_density must be positive".into(),
            ));
        }
        if self.conv_radius <= 0.0 {
            return Err(Error::Config("conv_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Defaults: h = 0.025 m, R = 4.5 h, fuel density 782.885 kg/m^3,
/// world-fixed gravity, 50 fps frames.
pub fn default_config() -> SimConfig {
    let h = 0.025;
    SimConfig {
        particle_radius: h,
        conv_radius: 4.5 * h,
        dt: 0.02,
        rest_density: 782.885,
        gravity: [0.0, -9.81, 0.0],
    }
}

/// Procedural tank geometries. Dimensions are interior half-extents in the
/// tank's local frame (y up); all shapes are closed shells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TankShape {
    /// Closed rectangular box.
    Box { half: [f64; 3] },
    /// Closed box with one interior rib (a wall at local x = 0 spanning the
    /// cross-section) pierced by a circular hole of the given radius.
    RibbedBox { half: [f64; 3], hole_radius: f64 },
    /// Closed cylinder, axis along local y.
    Cylinder { radius: f64, half_height: f64 },
    /// L-shaped tank: a box with the (+x, +y) quadrant prism removed.
    LTank { half: [f64; 3] },
}

impl TankShape {
    /// Circumscribed radius about the local origin; bounds stay valid under
    /// any rotation about the center.
    pub fn circumradius(&self) -> f64 {
        match *self {
            TankShape::Box { half } | TankShape::RibbedBox { half, .. } => {
                Vec3::from_array(half).norm()
            }
            TankShape::Cylinder {
                radius,
                half_height,
            } => (radius * radius + half_height * half_height).sqrt(),
            TankShape::LTank { half } => Vec3::from_array(half).norm(),
        }
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn contains(&self, p: Vec3, slack: f64) -> bool {
        p.x >= self.min[0] - slack
            && p.y >= self.min[1] - slack
            && p.z >= self.min[2] - slack
            && p.x <= self.max[0] + slack
            && p.y <= self.max[1] + slack
            && p.z <= self.max[2] + slack
    }
}

/// A rigid tank: its boundary particle sampling, world bounds, rotation
/// pivot, and the analytic shape it was sampled from (used for collision
/// guards in the ground-truth solver).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub boundary: ParticleSet,
    pub bounds: Aabb,
    pub center: Vec3,
    pub shape: TankShape,
    /// World-from-local rotation accumulated over `rotate_rigid` calls.
    pub orientation: Mat3,
}

impl Scene {
    /// Signed distance to the tank interior at a world-space point;
    /// negative inside.
    pub fn interior_sdf(&self, p: Vec3) -> f64 {
        let local = self.orientation.transpose().mul_vec(p - self.center);
        shape_sdf(&self.shape, local)
    }

    /// Gradient of the interior SDF (outward direction), by central
    /// differences; robust enough for collision projection.
    pub fn sdf_gradient(&self, p: Vec3) -> Vec3 {
        let e = 1e-5;
        let d = |v: Vec3| self.interior_sdf(v);
        vec3(
            d(p + vec3(e, 0.0, 0.0)) - d(p - vec3(e, 0.0, 0.0)),
            d(p + vec3(0.0, e, 0.0)) - d(p - vec3(0.0, e, 0.0)),
            d(p + vec3(0.0, 0.0, e)) - d(p - vec3(0.0, 0.0, e)),
        )
        .normalized()
    }
}

fn box_sdf(p: Vec3, half: Vec3) -> f64 {
    let q = vec3(p.x.abs() - half.x, p.y.abs() - half.y, p.z.abs() - half.z);
    let outside = q.max_componentwise(Vec3::ZERO).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

/// Interior SDF in the tank's local frame (negative inside the fluid
/// region). The rib and the removed L-quadrant are treated as solid.
pub fn shape_sdf(shape: &TankShape, p: Vec3) -> f64 {
    match *shape {
        TankShape::Box { half } => box_sdf(p, Vec3::from_array(half)),
        TankShape::RibbedBox { half, hole_radius } => {
            let outer = box_sdf(p, Vec3::from_array(half));
            // Rib: thin wall at x = 0, pierced by a hole around the local
            // (y, z) origin. Inside the hole the rib does not block.
            let rib_half_thickness = 0.5 * 0.025;
            let radial = (p.y * p.y + p.z * p.z).sqrt();
            // Negative inside the rib solid.
            let rib = (p.x.abs() - rib_half_thickness).max(hole_radius - radial);
            // Interior = box minus rib solid.
            outer.max(-rib)
        }
        TankShape::Cylinder {
            radius,
            half_height,
        } => {
            let radial = (p.x * p.x + p.z * p.z).sqrt() - radius;
            let axial = p.y.abs() - half_height;
            let outside = vec3(radial.max(0.0), axial.max(0.0), 0.0).norm();
            outside + radial.max(axial).min(0.0)
        }
        TankShape::LTank { half } => {
            let h = Vec3::from_array(half);
            let outer = box_sdf(p, h);
            // Remove the (+x, +y) quadrant: solid region where x > 0 and y > 0.
            let cut = (-p.x).max(-p.y);
            outer.max(-cut)
        }
    }
}

/// Rotates the fluid state and the scene rigidly about the scene center.
///
/// Convention: `roll` about the local z axis is applied first, then `pitch`
/// about the x axis. Positive pitch tilts +z toward +y. Velocities and
/// boundary normals rotate with the frame; gravity stays world-fixed.
pub fn rotate_rigid(
    state: &ParticleSet,
    scene: &Scene,
    pitch: f64,
    roll: f64,
) -> Result<(ParticleSet, Scene)> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    if !(pitch.abs() <= half_pi + 1e-12 && roll.abs() <= half_pi + 1e-12) {
        return Err(Error::RejectedInput(format!(
            "rotation angles out of range: pitch {pitch}, roll {roll} (max +-pi/2)"
        )));
    }
    let m = rotation_matrix(pitch, roll);
    let rot_set = |set: &ParticleSet| -> ParticleSet {
        let positions = set
            .positions
            .iter()
            .map(|&p| scene.center + m.mul_vec(p - scene.center))
            .collect();
        let velocities = set.velocities.iter().map(|&v| m.mul_vec(v)).collect();
        let normals = set.normals.iter().map(|&n| m.mul_vec(n)).collect();
        ParticleSet {
            positions,
            velocities,
            kinds: set.kinds.clone(),
            normals,
        }
    };
    let new_state = rot_set(state);
    let new_scene = Scene {
        boundary: rot_set(&scene.boundary),
        bounds: scene.bounds,
        center: scene.center,
        shape: scene.shape,
        orientation: m.mul_mat(&scene.orientation),
    };
    Ok((new_state, new_scene))
}

/// The rigid rotation used by `rotate_rigid`: roll about z, then pitch
/// about x (positive pitch sends +z toward +y).
pub fn rotation_matrix(pitch: f64, roll: f64) -> Mat3 {
    Mat3::rotation_x(-pitch).mul_mat(&Mat3::rotation_z(roll))
}
