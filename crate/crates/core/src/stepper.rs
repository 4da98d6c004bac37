//! Position-based time stepping: external forces advance the fluid to an
//! intermediate state, the network supplies a per-particle displacement,
//! and the new velocity is derived from the realized positions so that
//! x_{t+1} = x_t + dt * v_{t+1} holds by construction.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::network::{forward_on_tape, NetworkParams, ParamNodes};
use crate::types::{rotate_rigid, ParticleSet, Scene, SimConfig};

/// A rotation applied to the tank (and fluid) immediately before the given
/// frame is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationEvent {
    pub frame: usize,
    pub pitch: f64,
    pub roll: f64,
}

/// An ordered sequence of fluid snapshots at a fixed timestep, plus the
/// rotation applied before each frame (zero when none was scheduled) and
/// the tank boundary as of the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub dt: f64,
    pub frames: Vec<ParticleSet>,
    pub rotations: Vec<(f64, f64)>,
    pub boundary: ParticleSet,
}

impl FrameSequence {
    /// Builds a sequence from an on-disk iteration: fluid frames with the
    /// stored velocities, the iteration-opening rotation at frame 0, and
    /// the boundary sampling as a particle set.
    pub fn from_frame_file(file: &crate::io::FrameFile) -> Result<FrameSequence> {
        let n_boundary = file.boundary_positions.len();
        let boundary = ParticleSet {
            positions: file.boundary_positions.clone(),
            velocities: vec![Vec3::ZERO; n_boundary],
            kinds: vec![crate::types::Kind::Boundary; n_boundary],
            normals: file.boundary_normals.clone(),
        };
        boundary.validate()?;
        let frames: Vec<ParticleSet> = file
            .frames
            .iter()
            .map(|f| {
                let mut set = ParticleSet::fluid_at_rest(f.positions.clone());
                set.velocities = f.velocities.clone();
                set
            })
            .collect();
        let mut rotations = vec![(0.0, 0.0); frames.len()];
        if let Some(first) = rotations.first_mut() {
            *first = (file.pitch, file.roll);
        }
        let seq = FrameSequence {
            dt: file.dt,
            frames,
            rotations,
            boundary,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::RejectedInput("empty frame sequence".into()));
        }
        if self.rotations.len() != self.frames.len() {
            return Err(Error::RejectedInput(format!(
                "{} rotations for {} frames",
                self.rotations.len(),
                self.frames.len()
            )));
        }
        let first = &self.frames[0];
        for (k, f) in self.frames.iter().enumerate() {
            if f.len() != first.len() || f.kinds != first.kinds {
                return Err(Error::RejectedInput(format!(
                    "frame {k} differs in particle count or kinds"
                )));
            }
        }
        Ok(())
    }
}

/// Semi-implicit Euler advance under external acceleration:
/// v* = v + dt * g, x* = x + dt * v*.
pub fn predict_intermediate(
    x: &[Vec3],
    v: &[Vec3],
    gravity: Vec3,
    dt: f64,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let v_star: Vec<Vec3> = v.iter().map(|&vi| vi + gravity * dt).collect();
    let x_star: Vec<Vec3> = x.iter().zip(&v_star).map(|(&xi, &vi)| xi + vi * dt).collect();
    (x_star, v_star)
}

/// Applies the network displacement and derives the velocity from the
/// realized positions: x_{t+1} = x* + dx, v_{t+1} = (x_{t+1} - x_t) / dt.
pub fn correct(
    x_t: &[Vec3],
    x_star: &[Vec3],
    dx: &[Vec3],
    dt: f64,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let x_next: Vec<Vec3> = x_star.iter().zip(dx).map(|(&xs, &d)| xs + d).collect();
    let v_next: Vec<Vec3> = x_next
        .iter()
        .zip(x_t)
        .map(|(&xn, &xt)| (xn - xt) / dt)
        .collect();
    (x_next, v_next)
}

/// One learned step as tape operations, for gradient-carrying rollouts.
/// Returns the (n, 3) nodes of the next positions and velocities.
#[allow(clippy::too_many_arguments)]
pub fn step_on_tape(
    tape: &mut Tape,
    pn: &ParamNodes,
    x: NodeId,
    v: NodeId,
    boundary_pos: NodeId,
    boundary_feat: NodeId,
    gravity: Vec3,
    dt: f64,
    conv_radius: f64,
) -> Result<(NodeId, NodeId)> {
    let dv = tape.constant(Tensor::from_rows(1, 3, (gravity * dt).to_array().to_vec()).unwrap());
    let v_star = tape.add_bias(v, dv)?;
    let scaled = tape.affine(v_star, dt, 0.0);
    let x_star = tape.add(x, scaled)?;
    let (dx, _) = forward_on_tape(tape, pn, x_star, v_star, boundary_pos, boundary_feat, conv_radius)?;
    let x_next = tape.add(x_star, dx)?;
    let moved = tape.sub(x_next, x)?;
    let v_next = tape.affine(moved, 1.0 / dt, 0.0);
    Ok((x_next, v_next))
}

/// Rolls the learned model forward for `n_frames` frames. Frame 0 is the
/// initial state (after any rotation scheduled at frame 0); each later
/// frame applies its scheduled rotation, the external-force prediction,
/// the network correction, and the velocity update. The boundary is only
/// ever mutated by scheduled rigid rotations.
pub fn rollout(
    params: &NetworkParams,
    config: &SimConfig,
    initial: &ParticleSet,
    scene: &Scene,
    boundary: &ParticleSet,
    schedule: &[RotationEvent],
    n_frames: usize,
) -> Result<FrameSequence> {
    if n_frames == 0 {
        return Err(Error::RejectedInput("rollout needs at least one frame".into()));
    }
    initial.validate()?;
    let gravity = config.gravity_vec();
    let dt = config.dt;

    let rotation_at = |frame: usize| -> Option<(f64, f64)> {
        schedule
            .iter()
            .find(|e| e.frame == frame)
            .map(|e| (e.pitch, e.roll))
    };

    let mut state = initial.clone();
    let mut boundary = boundary.clone();
    let mut scene = scene.clone();
    let mut frames = Vec::with_capacity(n_frames);
    let mut rotations = Vec::with_capacity(n_frames);
    let mut first_boundary = None;

    for k in 0..n_frames {
        let applied = rotation_at(k).unwrap_or((0.0, 0.0));
        if applied != (0.0, 0.0) {
            let (new_state, new_scene) = rotate_rigid(&state, &scene, applied.0, applied.1)?;
            let (new_boundary, _) = rotate_rigid(&boundary, &scene, applied.0, applied.1)?;
            state = new_state;
            scene = new_scene;
            boundary = new_boundary;
        }
        if first_boundary.is_none() {
            first_boundary = Some(boundary.clone());
        }
        if k > 0 {
            let (x_star, v_star) = predict_intermediate(
                &state.positions,
                &state.velocities,
                gravity,
                dt,
            );
            let dx = params
                .predict(&x_star, &v_star, &boundary, config.conv_radius)
                .map_err(|e| Error::Numerical(format!("aborted at frame {k}: {e}")))?;
            let (x_next, v_next) = correct(&state.positions, &x_star, &dx, dt);
            state.positions = x_next;
            state.velocities = v_next;
        }
        for (i, p) in state.positions.iter().enumerate() {
            if !p.is_finite() || !state.velocities[i].is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite state at frame {k} (particle {i})"
                )));
            }
        }
        frames.push(state.clone());
        rotations.push(applied);
    }

    let seq = FrameSequence {
        dt,
        frames,
        rotations,
        boundary: first_boundary.expect("n_frames >= 1"),
    };
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{vec3, Mat3};
    use crate::network::{boundary_features, NetworkConfig};
    use crate::types::{default_config, Aabb, Kind, TankShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_boundary(n: usize, seed: u64) -> ParticleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParticleSet::empty();
        for _ in 0..n {
            b.positions.push(vec3(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            ));
            b.velocities.push(Vec3::ZERO);
            b.kinds.push(Kind::Boundary);
            b.normals.push(
                vec3(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .normalized(),
            );
        }
        b
    }

    fn toy_scene(boundary: ParticleSet) -> Scene {
        Scene {
            boundary,
            bounds: Aabb {
                min: [-1.0; 3],
                max: [1.0; 3],
            },
            center: Vec3::ZERO,
            shape: TankShape::Box { half: [0.5; 3] },
            orientation: Mat3::IDENTITY,
        }
    }

    fn toy_fluid(n: usize, seed: u64) -> ParticleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n)
            .map(|_| {
                vec3(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                )
            })
            .collect();
        ParticleSet::fluid_at_rest(pos)
    }

    #[test]
    fn predict_intermediate_statics() {
        let x = vec![vec3(0.1, 0.2, 0.3)];
        let v = vec![Vec3::ZERO];
        let (xs, vs) = predict_intermediate(&x, &v, Vec3::ZERO, 0.02);
        assert_eq!(xs, x);
        assert_eq!(vs, v);
    }

    #[test]
    fn predict_intermediate_one_gravity_step() {
        let x = vec![vec3(1.0, 2.0, 3.0)];
        let v = vec![Vec3::ZERO];
        let g = vec3(0.0, -9.81, 0.0);
        let (xs, vs) = predict_intermediate(&x, &v, g, 0.02);
        assert!((vs[0] - vec3(0.0, -0.1962, 0.0)).norm() < 1e-15);
        assert!((xs[0] - vec3(1.0, 2.0 - 0.003924, 3.0)).norm() < 1e-15);
    }

    #[test]
    fn predict_intermediate_is_linear() {
        let g = vec3(0.0, -9.81, 0.0);
        let dt = 0.02;
        let xa = vec![vec3(0.3, -0.1, 0.2)];
        let va = vec![vec3(1.0, 2.0, -1.0)];
        let xb = vec![vec3(-0.5, 0.4, 0.1)];
        let vb = vec![vec3(-2.0, 0.5, 3.0)];
        let (alpha, beta) = (0.7, 0.3);
        // Affine in (x, v): combining states with weights summing to one
        // combines the outputs the same way (the gravity term is shared).
        let xc = vec![xa[0] * alpha + xb[0] * beta];
        let vc = vec![va[0] * alpha + vb[0] * beta];
        let (xsa, vsa) = predict_intermediate(&xa, &va, g, dt);
        let (xsb, vsb) = predict_intermediate(&xb, &vb, g, dt);
        let (xsc, vsc) = predict_intermediate(&xc, &vc, g, dt);
        assert!((xsc[0] - (xsa[0] * alpha + xsb[0] * beta)).norm() < 1e-12);
        assert!((vsc[0] - (vsa[0] * alpha + vsb[0] * beta)).norm() < 1e-12);
    }

    #[test]
    fn correct_identity_and_cancellation() {
        let dt = 0.02;
        let x = vec![vec3(0.1, 0.2, 0.3)];
        let v = vec![vec3(0.5, -1.0, 0.25)];
        let (xs, vs) = predict_intermediate(&x, &v, vec3(0.0, -9.81, 0.0), dt);
        // Zero correction: the velocity comes back as v*.
        let (xn, vn) = correct(&x, &xs, &[Vec3::ZERO], dt);
        assert_eq!(xn, xs);
        assert!((vn[0] - vs[0]).norm() < 1e-12);
        // Full cancellation: back to x_t with zero velocity.
        let dx = vec![x[0] - xs[0]];
        let (xn, vn) = correct(&x, &xs, &dx, dt);
        assert!((xn[0] - x[0]).norm() < 1e-15);
        assert!(vn[0].norm() < 1e-13);
    }

    #[test]
    fn correct_satisfies_position_velocity_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dt = 0.02;
        for _ in 0..100 {
            let x = vec![vec3(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )];
            let xs = vec![x[0] + vec3(0.01, -0.02, 0.005)];
            let dx = vec![vec3(
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
            )];
            let (xn, vn) = correct(&x, &xs, &dx, dt);
            let rebuilt = x[0] + vn[0] * dt;
            assert!((rebuilt - xn[0]).norm() < 1e-15);
        }
    }

    fn zero_network() -> NetworkParams {
        NetworkParams::init(NetworkConfig::tiny(), 1).unwrap()
    }

    #[test]
    fn rollout_zero_gravity_zero_velocity_is_fixed_point() {
        let params = zero_network();
        let mut config = default_config();
        config.gravity = [0.0; 3];
        let fluid = toy_fluid(6, 2);
        let boundary = toy_boundary(5, 3);
        let scene = toy_scene(boundary.clone());
        let seq = rollout(&params, &config, &fluid, &scene, &boundary, &[], 5).unwrap();
        assert_eq!(seq.len(), 5);
        for f in &seq.frames {
            assert_eq!(f.positions, fluid.positions);
        }
    }

    #[test]
    fn rollout_ballistic_arcs_match_closed_form() {
        // Untrained (zero-displacement) network: frame k follows the
        // discrete semi-implicit arc
        // x_k = x_0 + k dt v_0 + dt^2 g k (k + 1) / 2.
        let params = zero_network();
        let config = default_config();
        let mut fluid = toy_fluid(4, 4);
        fluid.velocities[2] = vec3(0.3, 0.1, -0.2);
        let boundary = toy_boundary(5, 5);
        let scene = toy_scene(boundary.clone());
        let n = 6;
        let seq = rollout(&params, &config, &fluid, &scene, &boundary, &[], n).unwrap();
        let g = config.gravity_vec();
        let dt = config.dt;
        for k in 0..n {
            for i in 0..fluid.len() {
                let kk = k as f64;
                let want = fluid.positions[i]
                    + fluid.velocities[i] * (kk * dt)
                    + g * (dt * dt * kk * (kk + 1.0) / 2.0);
                let got = seq.frames[k].positions[i];
                assert!(
                    (got - want).norm() < 1e-12,
                    "frame {k} particle {i}: {got:?} vs {want:?}"
                );
            }
        }
    }

    #[test]
    fn rollout_is_deterministic_and_leaves_boundary_fixed() {
        let mut params = zero_network();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in params.output_head.data.iter_mut() {
            *v = rng.gen_range(-0.01..0.01);
        }
        let config = default_config();
        let fluid = toy_fluid(6, 7);
        let boundary = toy_boundary(5, 8);
        let scene = toy_scene(boundary.clone());
        let a = rollout(&params, &config, &fluid, &scene, &boundary, &[], 4).unwrap();
        let b = rollout(&params, &config, &fluid, &scene, &boundary, &[], 4).unwrap();
        assert_eq!(a, b);
        // No scheduled rotations: the stored boundary is the input boundary.
        assert_eq!(a.boundary, boundary);
    }

    #[test]
    fn rollout_applies_scheduled_rotations() {
        let params = zero_network();
        let mut config = default_config();
        config.gravity = [0.0; 3];
        let fluid = toy_fluid(5, 9);
        let boundary = toy_boundary(4, 10);
        let scene = toy_scene(boundary.clone());
        let schedule = [RotationEvent {
            frame: 0,
            pitch: 0.4,
            roll: -0.2,
        }];
        let seq = rollout(&params, &config, &fluid, &scene, &boundary, &schedule, 3).unwrap();
        assert_eq!(seq.rotations[0], (0.4, -0.2));
        assert_eq!(seq.rotations[1], (0.0, 0.0));
        // Frame 0 equals the rigidly rotated initial state.
        let (expect, _) = rotate_rigid(&fluid, &scene, 0.4, -0.2).unwrap();
        for (a, b) in seq.frames[0].positions.iter().zip(&expect.positions) {
            assert!((*a - *b).norm() < 1e-12);
        }
        // The stored boundary reflects the frame-0 rotation too.
        let (expect_b, _) = rotate_rigid(&boundary, &scene, 0.4, -0.2).unwrap();
        for (a, b) in seq.boundary.positions.iter().zip(&expect_b.positions) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }

    #[test]
    fn rollout_rejects_zero_frames() {
        let params = zero_network();
        let config = default_config();
        let fluid = toy_fluid(3, 11);
        let boundary = toy_boundary(3, 12);
        let scene = toy_scene(boundary.clone());
        assert!(rollout(&params, &config, &fluid, &scene, &boundary, &[], 0).is_err());
    }

    #[test]
    fn rollout_abort_names_the_frame() {
        // A pathologically scaled output head overflows after a few
        // feedback steps; the error must carry the frame index.
        let mut params = zero_network();
        for v in params.output_head.data.iter_mut() {
            *v = 1e155;
        }
        let config = default_config();
        let fluid = toy_fluid(5, 13);
        let boundary = toy_boundary(4, 14);
        let scene = toy_scene(boundary.clone());
        let err = rollout(&params, &config, &fluid, &scene, &boundary, &[], 10).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("frame"), "unexpected error: {msg}");
    }

    #[test]
    fn frame_file_conversion_preserves_state_and_rotation() {
        let file = crate::io::FrameFile {
            dt: 0.02,
            pitch: 0.3,
            roll: -0.1,
            fill_fraction: 0.5,
            boundary_positions: vec![vec3(1.0, 0.0, 0.0)],
            boundary_normals: vec![vec3(-1.0, 0.0, 0.0)],
            frames: vec![
                crate::io::FrameData {
                    positions: vec![vec3(0.1, 0.2, 0.3)],
                    velocities: vec![vec3(0.0, -1.0, 0.0)],
                },
                crate::io::FrameData {
                    positions: vec![vec3(0.1, 0.18, 0.3)],
                    velocities: vec![vec3(0.0, -1.2, 0.0)],
                },
            ],
        };
        let seq = FrameSequence::from_frame_file(&file).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.dt, 0.02);
        assert_eq!(seq.rotations, vec![(0.3, -0.1), (0.0, 0.0)]);
        assert_eq!(seq.frames[0].positions, file.frames[0].positions);
        assert_eq!(seq.frames[1].velocities, file.frames[1].velocities);
        assert_eq!(seq.boundary.positions, file.boundary_positions);
        assert_eq!(seq.boundary.kinds, vec![Kind::Boundary]);
    }

    #[test]
    fn tape_step_matches_plain_step() {
        let mut params = zero_network();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for v in params.output_head.data.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let config = default_config();
        let fluid = toy_fluid(6, 16);
        let boundary = toy_boundary(5, 17);
        let g = config.gravity_vec();
        let dt = config.dt;

        // Plain path.
        let (xs, vs) = predict_intermediate(&fluid.positions, &fluid.velocities, g, dt);
        let dx = params
            .predict(&xs, &vs, &boundary, config.conv_radius)
            .unwrap();
        let (x_want, v_want) = correct(&fluid.positions, &xs, &dx, dt);

        // Tape path.
        let mut tape = Tape::new();
        let pn = params.leaves(&mut tape).unwrap();
        let x = tape.leaf(Tensor::from_vec3s(&fluid.positions));
        let v = tape.leaf(Tensor::from_vec3s(&fluid.velocities));
        let bp = tape.leaf(Tensor::from_vec3s(&boundary.positions));
        let bf = tape.leaf(boundary_features(&boundary));
        let (xn, vn) = step_on_tape(&mut tape, &pn, x, v, bp, bf, g, dt, config.conv_radius)
            .unwrap();
        let x_got = tape.value(xn).to_vec3s();
        let v_got = tape.value(vn).to_vec3s();
        for i in 0..fluid.len() {
            assert!((x_got[i] - x_want[i]).norm() < 1e-13);
            assert!((v_got[i] - v_want[i]).norm() < 1e-11);
        }
    }
}
