//! Training: the neighbor-weighted position loss, gradient-carrying
//! rollouts with warm-up, and the Adam optimization loop with a learning
//! rate schedule and a warm-up curriculum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::neighbor::NeighborIndex;
use crate::network::{boundary_features, NetworkConfig, NetworkParams, ParamNodes};
use crate::stepper::{correct, predict_intermediate, rollout, step_on_tape, FrameSequence};
use crate::types::{Aabb, ParticleSet, Scene, SimConfig, TankShape};

/// Distance floor of the differentiable loss; below it the fractional
/// power's derivative would blow up. A perfectly matched frame therefore
/// scores `guard^gamma` per particle instead of exactly zero.
pub const LOSS_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Loss exponent on the position error norm.
    pub gamma: f64,
    /// Reference neighbor count of the loss weight exp(-c / c_avg).
    pub c_avg: f64,
    /// Warm-up cap: the curriculum raises warm-up frames from 0 toward
    /// this many gradient-free self-fed steps per window.
    pub warmup_max: usize,
    /// Supervised frames per window (loss-carrying steps).
    pub supervised: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps at which the learning rate is halved (cumulative).
    pub halve_at: Vec<usize>,
    pub total_steps: usize,
    pub seed: u64,
    /// Validation / logging cadence in steps.
    pub log_every: usize,
}

impl TrainConfig {
    /// Full desk-scale schedule: 3000 steps, learning rate halved at 1500
    /// and 2500.
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            gamma: 0.5,
            c_avg: 40.0,
            warmup_max: 2,
            supervised: 2,
            batch_size: 2,
            learning_rate: 0.002,
            halve_at: vec![1500, 2500],
            total_steps: 3000,
            seed,
            log_every: 250,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.supervised < 1 {
            return Err(Error::Config("supervised frames must be >= 1".into()));
        }
        if !(self.c_avg > 0.0) {
            return Err(Error::Config("c_avg must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.log_every < 1 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Warm-up frames at a given step: 0 for the first 40% of training,
    /// 1 from 40%, 2 from 70%, capped at `warmup_max`.
    pub fn warmup_at(&self, step: usize) -> usize {
        if self.total_steps == 0 {
            return 0;
        }
        let progress = step as f64 / self.total_steps as f64;
        let stage = if progress >= 0.7 {
            2
        } else if progress >= 0.4 {
            1
        } else {
            0
        };
        stage.min(self.warmup_max)
    }

    /// Learning rate at a given step: halved once per milestone passed.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let halvings = self.halve_at.iter().filter(|&&m| step >= m).count();
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// Per-particle loss weights exp(-c_i / c_avg); always in (0, 1] and
/// decreasing in the neighbor count.
pub fn loss_weights(counts: &[usize], c_avg: f64) -> Vec<f64> {
    counts
        .iter()
        .map(|&c| (-(c as f64) / c_avg).exp())
        .collect()
}

/// Neighbor count of each fluid particle among fluid and boundary
/// particles combined, within the convolution radius.
pub fn neighbor_counts(fluid: &[Vec3], boundary: &[Vec3], radius: f64) -> Result<Vec<usize>> {
    let mut all = fluid.to_vec();
    all.extend_from_slice(boundary);
    let index = NeighborIndex::build(&all, radius)?;
    Ok(index.neighbor_counts(fluid))
}

/// Position loss of one frame: sum_i exp(-c_i / c_avg) * |x_i - x^_i|^gamma.
pub fn frame_loss(
    predicted: &[Vec3],
    truth: &[Vec3],
    counts: &[usize],
    gamma: f64,
    c_avg: f64,
) -> Result<f64> {
    if predicted.len() != truth.len() || counts.len() != predicted.len() {
        return Err(Error::RejectedInput(format!(
            "misaligned frame loss inputs: {} predicted, {} truth, {} counts",
            predicted.len(),
            truth.len(),
            counts.len()
        )));
    }
    if !(gamma > 0.0 && c_avg > 0.0) {
        return Err(Error::Config("gamma and c_avg must be positive".into()));
    }
    let weights = loss_weights(counts, c_avg);
    Ok(predicted
        .iter()
        .zip(truth)
        .zip(&weights)
        .map(|((&p, &t), &w)| w * (p - t).norm().powf(gamma))
        .sum())
}

/// Tape version of `frame_loss` against a constant ground-truth frame.
/// Identical to the plain form whenever every error exceeds `LOSS_GUARD`.
pub fn frame_loss_on_tape(
    tape: &mut Tape,
    predicted: NodeId,
    truth: &[Vec3],
    counts: &[usize],
    gamma: f64,
    c_avg: f64,
) -> Result<NodeId> {
    let n = tape.value(predicted).rows;
    if truth.len() != n || counts.len() != n {
        return Err(Error::RejectedInput(format!(
            "misaligned frame loss inputs: {} predicted, {} truth, {} counts",
            n,
            truth.len(),
            counts.len()
        )));
    }
    if !(gamma > 0.0 && c_avg > 0.0) {
        return Err(Error::Config("gamma and c_avg must be positive".into()));
    }
    let truth_leaf = tape.constant(Tensor::from_vec3s(truth));
    let diff = tape.sub(predicted, truth_leaf)?;
    let norms = tape.norm_rows(diff);
    let powed = tape.pow_guard(norms, gamma);
    let weights = tape.constant(Tensor::from_rows(n, 1, loss_weights(counts, c_avg))?);
    let weighted = tape.mul(powed, weights)?;
    Ok(tape.sum_all(weighted))
}

/// Rollout loss over one window of consecutive ground-truth frames.
///
/// The window always supervises its last `supervised` frames: starting
/// from the frame `warmup + supervised` places before the end, the model
/// runs `warmup` self-fed steps without gradients, then `supervised`
/// gradient-carrying steps, and the result is the mean frame loss over the
/// supervised steps. Raising `warmup` therefore extends the window
/// backward in time without changing which frames carry loss.
#[allow(clippy::too_many_arguments)]
pub fn rollout_loss(
    tape: &mut Tape,
    params: &NetworkParams,
    nodes: &ParamNodes,
    window: &[ParticleSet],
    boundary: &ParticleSet,
    sim: &SimConfig,
    tc: &TrainConfig,
    warmup: usize,
) -> Result<NodeId> {
    tc.validate()?;
    let needed = warmup + tc.supervised + 1;
    if window.len() < needed {
        return Err(Error::RejectedInput(format!(
            "window too short: {} frames for warmup {} + supervised {} + 1",
            window.len(),
            warmup,
            tc.supervised
        )));
    }
    let start = window.len() - needed;
    let gravity = sim.gravity_vec();
    let dt = sim.dt;

    // Warm-up: feed the model its own predictions, values only.
    let mut x = window[start].positions.clone();
    let mut v = window[start].velocities.clone();
    for _ in 0..warmup {
        let (x_star, v_star) = predict_intermediate(&x, &v, gravity, dt);
        let dx = params.predict(&x_star, &v_star, boundary, sim.conv_radius)?;
        let (xn, vn) = correct(&x, &x_star, &dx, dt);
        x = xn;
        v = vn;
    }

    // Supervised steps on the tape; gradients flow only through these.
    let mut x_node = tape.constant(Tensor::from_vec3s(&x));
    let mut v_node = tape.constant(Tensor::from_vec3s(&v));
    let boundary_pos = tape.constant(Tensor::from_vec3s(&boundary.positions));
    let boundary_feat = tape.constant(boundary_features(boundary));
    let mut total: Option<NodeId> = None;
    for t in 1..=tc.supervised {
        let (xn, vn) = step_on_tape(
            tape,
            nodes,
            x_node,
            v_node,
            boundary_pos,
            boundary_feat,
            gravity,
            dt,
            sim.conv_radius,
        )?;
        x_node = xn;
        v_node = vn;
        let truth = &window[start + warmup + t];
        let counts = neighbor_counts(&truth.positions, &boundary.positions, sim.conv_radius)?;
        let loss_t = frame_loss_on_tape(
            tape,
            x_node,
            &truth.positions,
            &counts,
            tc.gamma,
            tc.c_avg,
        )?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss_t)?,
            None => loss_t,
        });
    }
    let total = total.expect("supervised >= 1");
    let mean = tape.affine(total, 1.0 / tc.supervised as f64, 0.0);
    let value = tape.value(mean).data[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite rollout loss {value}")));
    }
    Ok(mean)
}

/// Adam with bias correction; one slot pair per parameter tensor.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&mut Tensor]) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer state mismatch: {} params, {} grads, {} slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !p.same_shape(g) {
                return Err(Error::Config(format!(
                    "gradient shape {}x{} does not match parameter {}x{}",
                    g.rows, g.cols, p.rows, p.cols
                )));
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One metrics-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub warmup: usize,
    /// Validation sequence error at the last validation frame, meters.
    pub d_n: f64,
    pub max_density_error: f64,
}

/// Trained parameters plus the metrics log; `halted_at` names the step at
/// which a non-finite loss stopped training early, if any.
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub records: Vec<TrainRecord>,
    pub halted_at: Option<usize>,
}

fn validation_scene(boundary: &ParticleSet) -> Scene {
    // Rollouts without scheduled rotations never consult the analytic
    // shape, so a placeholder box is enough to satisfy the interface.
    Scene {
        boundary: boundary.clone(),
        bounds: Aabb {
            min: [-1e6; 3],
            max: [1e6; 3],
        },
        center: Vec3::ZERO,
        shape: TankShape::Box { half: [1e6; 3] },
        orientation: Mat3::IDENTITY,
    }
}

/// Validation rollout from the first frame of `seq`: d^n against ground
/// truth at the last compared frame plus the peak-density discrepancy
/// there. Numerical failures score infinity instead of aborting training.
fn validate_on(params: &NetworkParams, seq: &FrameSequence, sim: &SimConfig) -> (f64, f64) {
    let n_frames = seq.len().min(6);
    let scene = validation_scene(&seq.boundary);
    let predicted = match rollout(
        params,
        sim,
        &seq.frames[0],
        &scene,
        &seq.boundary,
        &[],
        n_frames,
    ) {
        Ok(p) => p,
        Err(_) => return (f64::INFINITY, f64::INFINITY),
    };
    let truth = FrameSequence {
        dt: seq.dt,
        frames: seq.frames[..n_frames].to_vec(),
        rotations: vec![(0.0, 0.0); n_frames],
        boundary: seq.boundary.clone(),
    };
    let d_n = crate::metrics::sequence_error(&predicted, &truth, n_frames - 1)
        .unwrap_or(f64::INFINITY);
    let e = crate::metrics::max_density_error(
        &predicted.frames[n_frames - 1].positions,
        &truth.frames[n_frames - 1].positions,
        sim,
    )
    .unwrap_or(f64::INFINITY);
    (d_n, e)
}

/// Runs the full optimization loop over the given ground-truth sequences.
/// Deterministic per seed. A non-finite loss halts training before the
/// offending update, so the returned parameters are the last good state.
pub fn train(
    net_config: NetworkConfig,
    tc: &TrainConfig,
    sim: &SimConfig,
    data: &[FrameSequence],
) -> Result<TrainOutcome> {
    tc.validate()?;
    sim.validate()?;
    if data.is_empty() {
        return Err(Error::RejectedInput("training dataset is empty".into()));
    }
    for (i, seq) in data.iter().enumerate() {
        seq.validate()
            .map_err(|e| Error::RejectedInput(format!("sequence {i}: {e}")))?;
    }
    let min_window = tc.supervised + 1;
    if !data.iter().any(|s| s.len() >= min_window) {
        return Err(Error::RejectedInput(format!(
            "no sequence has the {min_window} frames one supervised window needs"
        )));
    }

    let mut params = NetworkParams::init(net_config, tc.seed)?;
    let mut adam = Adam::new(&params.params_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut records = Vec::new();
    let mut halted_at = None;

    'steps: for step in 0..tc.total_steps {
        let warmup = tc.warmup_at(step);
        let lr = tc.learning_rate_at(step);
        let shapes: Vec<(usize, usize)> = params
            .named_params()
            .iter()
            .map(|(_, t)| (t.rows, t.cols))
            .collect();
        let mut grads: Vec<Tensor> = shapes
            .iter()
            .map(|&(r, c)| Tensor::zeros(r, c))
            .collect();
        let mut loss_sum = 0.0;

        for _ in 0..tc.batch_size {
            // Fall back to smaller warm-ups when no sequence is long
            // enough for the current one; the dataset was checked to
            // support at least warmup = 0.
            let mut w = warmup;
            let needed = loop {
                let needed = w + tc.supervised + 1;
                if data.iter().any(|s| s.len() >= needed) {
                    break needed;
                }
                w -= 1;
            };
            let eligible: Vec<usize> = (0..data.len())
                .filter(|&i| data[i].len() >= needed)
                .collect();
            let seq = &data[eligible[rng.gen_range(0..eligible.len())]];
            let start = rng.gen_range(0..=seq.len() - needed);
            let window = &seq.frames[start..start + needed];

            let mut tape = Tape::new();
            let nodes = params.leaves(&mut tape)?;
            let loss_node = match rollout_loss(
                &mut tape,
                &params,
                &nodes,
                window,
                &seq.boundary,
                sim,
                tc,
                w,
            ) {
                Ok(node) => node,
                Err(Error::Numerical(msg)) => {
                    eprintln!("training halted at step {step}: {msg}");
                    halted_at = Some(step);
                    break 'steps;
                }
                Err(e) => return Err(e),
            };
            loss_sum += tape.value(loss_node).data[0];
            tape.backward(loss_node)?;
            for (acc, &leaf) in grads.iter_mut().zip(&nodes.leaf_ids) {
                let g = tape.grad(leaf);
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
        }

        let loss = loss_sum / tc.batch_size as f64;
        let scale = 1.0 / tc.batch_size as f64;
        let mut grads_finite = true;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= scale;
                grads_finite &= v.is_finite();
            }
        }
        if !loss.is_finite() || !grads_finite {
            eprintln!("training halted at step {step}: non-finite loss or gradient");
            halted_at = Some(step);
            break;
        }

        adam.step(&mut params.params_mut(), &grads, lr)?;

        if step % tc.log_every == 0 || step + 1 == tc.total_steps {
            let (d_n, e) = validate_on(&params, data.last().expect("nonempty"), sim);
            records.push(TrainRecord {
                step,
                loss,
                learning_rate: lr,
                warmup,
                d_n,
                max_density_error: e,
            });
        }
    }

    Ok(TrainOutcome {
        params,
        records,
        halted_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::vec3;
    use crate::types::{default_config, Kind};

    fn tiny_tc() -> TrainConfig {
        TrainConfig {
            gamma: 0.5,
            c_avg: 40.0,
            warmup_max: 2,
            supervised: 2,
            batch_size: 2,
            learning_rate: 0.002,
            halve_at: vec![1500, 2500],
            total_steps: 3000,
            seed: 1,
            log_every: 1,
        }
    }

    #[test]
    fn config_invariants_are_enforced() {
        let ok = tiny_tc();
        ok.validate().unwrap();
        let mut c = tiny_tc();
        c.supervised = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_tc();
        c.c_avg = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_tc();
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_tc();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn curriculum_raises_warmup_at_40_and_70_percent() {
        let tc = tiny_tc();
        assert_eq!(tc.warmup_at(0), 0);
        assert_eq!(tc.warmup_at(1199), 0);
        assert_eq!(tc.warmup_at(1200), 1);
        assert_eq!(tc.warmup_at(2099), 1);
        assert_eq!(tc.warmup_at(2100), 2);
        assert_eq!(tc.warmup_at(2999), 2);
        let mut capped = tiny_tc();
        capped.warmup_max = 0;
        assert_eq!(capped.warmup_at(2999), 0);
    }

    #[test]
    fn learning_rate_halves_at_milestones() {
        let tc = tiny_tc();
        assert_eq!(tc.learning_rate_at(0), 0.002);
        assert_eq!(tc.learning_rate_at(1499), 0.002);
        assert_eq!(tc.learning_rate_at(1500), 0.001);
        assert_eq!(tc.learning_rate_at(2500), 0.0005);
    }

    #[test]
    fn frame_loss_matches_hand_computed_examples() {
        // Exact match scores zero.
        let p = [vec3(0.3, -0.2, 0.9)];
        assert_eq!(frame_loss(&p, &p, &[7], 0.5, 40.0).unwrap(), 0.0);
        // Isolated particle, 1 m error: exp(0) * 1^0.5 = 1.
        let t = [vec3(1.3, -0.2, 0.9)];
        assert!((frame_loss(&p, &t, &[0], 0.5, 40.0).unwrap() - 1.0).abs() < 1e-15);
        // Same error at the reference count: exp(-1) ~ 0.367879.
        let got = frame_loss(&p, &t, &[40], 0.5, 40.0).unwrap();
        assert!((got - (-1.0f64).exp()).abs() < 1e-6);
        assert!((got - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn loss_weights_bounded_and_monotone() {
        let counts: Vec<usize> = (0..200).collect();
        let w = loss_weights(&counts, 40.0);
        for pair in w.windows(2) {
            assert!(pair[0] > 0.0 && pair[0] <= 1.0);
            assert!(pair[1] < pair[0]);
        }
        assert_eq!(w[0], 1.0);
    }

    #[test]
    fn frame_loss_rejects_misaligned_inputs() {
        let p = [vec3(0.0, 0.0, 0.0)];
        let t = [vec3(0.0, 0.0, 0.0), vec3(1.0, 0.0, 0.0)];
        assert!(frame_loss(&p, &t, &[0], 0.5, 40.0).is_err());
        assert!(frame_loss(&p, &p, &[0, 1], 0.5, 40.0).is_err());
    }

    #[test]
    fn tape_frame_loss_matches_plain_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 15;
        let p: Vec<Vec3> = (0..n)
            .map(|_| {
                vec3(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let t: Vec<Vec3> = p
            .iter()
            .map(|&q| q + vec3(rng.gen_range(0.01..0.1), 0.0, 0.0))
            .collect();
        let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..80)).collect();
        let plain = frame_loss(&p, &t, &counts, 0.5, 40.0).unwrap();
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::from_vec3s(&p));
        let node = frame_loss_on_tape(&mut tape, pred, &t, &counts, 0.5, 40.0).unwrap();
        assert!((tape.value(node).data[0] - plain).abs() < 1e-12);
    }

    fn toy_boundary(n: usize, seed: u64) -> ParticleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParticleSet::empty();
        for _ in 0..n {
            b.positions.push(vec3(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
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

    fn toy_fluid(n: usize, seed: u64) -> ParticleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParticleSet::fluid_at_rest(
            (0..n)
                .map(|_| {
                    vec3(
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.2..0.2),
                    )
                })
                .collect(),
        )
    }

    /// Frames produced by rolling the given parameters forward, so the
    /// model replays the truth exactly.
    fn self_consistent_window(
        params: &NetworkParams,
        initial: &ParticleSet,
        boundary: &ParticleSet,
        sim: &SimConfig,
        n: usize,
    ) -> Vec<ParticleSet> {
        let scene = validation_scene(boundary);
        rollout(params, sim, initial, &scene, boundary, &[], n)
            .unwrap()
            .frames
    }

    #[test]
    fn perfect_model_scores_only_the_guard_floor() {
        let params = NetworkParams::init(NetworkConfig::tiny(), 3).unwrap();
        let sim = default_config();
        let fluid = toy_fluid(8, 4);
        let boundary = toy_boundary(5, 5);
        let mut tc = tiny_tc();
        tc.supervised = 2;
        let warmup = 1;
        let window = self_consistent_window(&params, &fluid, &boundary, &sim, 4);
        let mut tape = Tape::new();
        let nodes = params.leaves(&mut tape).unwrap();
        let node = rollout_loss(
            &mut tape, &params, &nodes, &window, &boundary, &sim, &tc, warmup,
        )
        .unwrap();
        let loss = tape.value(node).data[0];
        // Exact replay: every distance sits at the guard floor, so the
        // loss is at most n * guard^gamma.
        let floor = fluid.len() as f64 * LOSS_GUARD.powf(tc.gamma);
        assert!(loss <= floor * (1.0 + 1e-9), "loss {loss} vs floor {floor}");
    }

    #[test]
    fn rollout_loss_rejects_short_windows() {
        let params = NetworkParams::init(NetworkConfig::tiny(), 6).unwrap();
        let sim = default_config();
        let boundary = toy_boundary(4, 7);
        let tc = tiny_tc();
        let window = vec![toy_fluid(5, 8); 3];
        let mut tape = Tape::new();
        let nodes = params.leaves(&mut tape).unwrap();
        // warmup 1 + supervised 2 + 1 = 4 frames needed, only 3 given.
        let err = rollout_loss(
            &mut tape, &params, &nodes, &window, &boundary, &sim, &tc, 1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::RejectedInput(_)));
    }

    #[test]
    fn zero_warmup_matches_manual_two_step_supervision() {
        // W = 0, T = 2 reduces to plain two-frame supervision: stepping
        // the model by hand and averaging the frame losses gives the
        // same number.
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for v in params.output_head.data.iter_mut() {
            *v = rng.gen_range(-0.01..0.01);
        }
        let sim = default_config();
        let boundary = toy_boundary(5, 11);
        let mut tc = tiny_tc();
        tc.supervised = 2;
        // Ground truth: small random drifts away from the model's path.
        let base = toy_fluid(7, 12);
        let mut window = vec![base.clone()];
        for k in 1..3 {
            let mut f = base.clone();
            for p in f.positions.iter_mut() {
                *p += vec3(0.001 * k as f64, -0.002, 0.0005 * k as f64);
            }
            window.push(f);
        }

        let mut tape = Tape::new();
        let nodes = params.leaves(&mut tape).unwrap();
        let node = rollout_loss(
            &mut tape, &params, &nodes, &window, &boundary, &sim, &tc, 0,
        )
        .unwrap();
        let got = tape.value(node).data[0];

        // Manual: two plain steps, each scored against its truth frame.
        let g = sim.gravity_vec();
        let mut x = window[0].positions.clone();
        let mut v = window[0].velocities.clone();
        let mut losses = Vec::new();
        for truth in &window[1..3] {
            let (xs, vs) = predict_intermediate(&x, &v, g, sim.dt);
            let dx = params.predict(&xs, &vs, &boundary, sim.conv_radius).unwrap();
            let (xn, vn) = correct(&x, &xs, &dx, sim.dt);
            x = xn;
            v = vn;
            let counts =
                neighbor_counts(&truth.positions, &boundary.positions, sim.conv_radius).unwrap();
            losses
                .push(frame_loss(&x, &truth.positions, &counts, tc.gamma, tc.c_avg).unwrap());
        }
        let want = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn warmup_changes_loss_but_not_supervised_frames() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for v in params.output_head.data.iter_mut() {
            *v = rng.gen_range(-0.02..0.02);
        }
        let sim = default_config();
        let boundary = toy_boundary(5, 15);
        let mut tc = tiny_tc();
        tc.supervised = 2;
        // Five ground-truth frames with small random drift.
        let base = toy_fluid(6, 16);
        let mut window = vec![base.clone()];
        for k in 1..5 {
            let mut f = window[k - 1].clone();
            for p in f.positions.iter_mut() {
                *p += vec3(
                    rng.gen_range(-0.002..0.002),
                    rng.gen_range(-0.002..0.002),
                    rng.gen_range(-0.002..0.002),
                );
            }
            window.push(f);
        }
        let loss_for = |warmup: usize| {
            let mut tape = Tape::new();
            let nodes = params.leaves(&mut tape).unwrap();
            let node = rollout_loss(
                &mut tape, &params, &nodes, &window, &boundary, &sim, &tc, warmup,
            )
            .unwrap();
            tape.value(node).data[0]
        };
        // Both supervise frames 3 and 4 of the window; they differ only
        // through the state the warm-up drifts to.
        let l0 = loss_for(0);
        let l2 = loss_for(2);
        assert!(l0.is_finite() && l2.is_finite());
        assert!((l0 - l2).abs() > 1e-12, "warm-up had no effect");
    }

    #[test]
    fn rollout_loss_gradient_matches_finite_differences() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for v in params.output_head.data.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let sim = default_config();
        let boundary = toy_boundary(6, 19);
        let mut tc = tiny_tc();
        tc.supervised = 2;
        // No warm-up: finite differences see every dependence on the
        // parameters, while backward deliberately ignores warm-up steps.
        let warmup = 0;
        // A 20-particle window with drift so the loss sits well above the
        // guard floor.
        let base = toy_fluid(20, 20);
        let mut window = vec![base.clone()];
        for k in 1..4 {
            let mut f = window[k - 1].clone();
            for p in f.positions.iter_mut() {
                *p += vec3(
                    rng.gen_range(-0.005..0.005),
                    rng.gen_range(-0.005..0.005),
                    rng.gen_range(-0.005..0.005),
                );
            }
            window.push(f);
        }

        let eval = |params: &NetworkParams| -> f64 {
            let mut tape = Tape::new();
            let nodes = params.leaves(&mut tape).unwrap();
            let node = rollout_loss(
                &mut tape, &params.clone(), &nodes, &window, &boundary, &sim, &tc, warmup,
            )
            .unwrap();
            tape.value(node).data[0]
        };

        // Backward gradients for every leaf.
        let mut tape = Tape::new();
        let nodes = params.leaves(&mut tape).unwrap();
        let node = rollout_loss(
            &mut tape, &params, &nodes, &window, &boundary, &sim, &tc, warmup,
        )
        .unwrap();
        tape.backward(node).unwrap();
        let grads: Vec<Tensor> = nodes.leaf_ids.iter().map(|&l| tape.grad(l).clone()).collect();

        // Spot-check random entries across all parameter tensors.
        let n_tensors = grads.len();
        let mut checked = 0;
        let eps = 1e-6;
        while checked < 30 {
            let ti = rng.gen_range(0..n_tensors);
            if grads[ti].data.is_empty() {
                continue;
            }
            let ei = rng.gen_range(0..grads[ti].data.len());
            let analytic = grads[ti].data[ei];
            let mut plus = params.clone();
            plus.params_mut()[ti].data[ei] += eps;
            let mut minus = params.clone();
            minus.params_mut()[ti].data[ei] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            // Normalized conv responses push many gradients to the 1e-8
            // scale; below the central-difference noise floor (~1e-9 at
            // this eps) the comparison is absolute, not relative.
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom < 5e-3,
                "tensor {ti} entry {ei}: analytic {analytic} vs fd {fd}"
            );
            checked += 1;
        }
    }

    /// One sequence whose fluid stays frozen while gravity pulls: the
    /// network must learn a nonzero counter-displacement.
    fn frozen_dataset(n_particles: usize, n_frames: usize) -> Vec<FrameSequence> {
        let fluid = toy_fluid(n_particles, 21);
        let boundary = toy_boundary(6, 22);
        vec![FrameSequence {
            dt: default_config().dt,
            frames: vec![fluid; n_frames],
            rotations: vec![(0.0, 0.0); n_frames],
            boundary,
        }]
    }

    #[test]
    fn zero_steps_returns_the_initialization() {
        let mut tc = tiny_tc();
        tc.total_steps = 0;
        let sim = default_config();
        let out = train(NetworkConfig::tiny(), &tc, &sim, &frozen_dataset(6, 3)).unwrap();
        let init = NetworkParams::init(NetworkConfig::tiny(), tc.seed).unwrap();
        assert_eq!(out.params, init);
        assert!(out.halted_at.is_none());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let mut tc = tiny_tc();
        tc.total_steps = 4;
        tc.batch_size = 2;
        let sim = default_config();
        let data = frozen_dataset(6, 3);
        let a = train(NetworkConfig::tiny(), &tc, &sim, &data).unwrap();
        let b = train(NetworkConfig::tiny(), &tc, &sim, &data).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn overfitting_one_window_descends_monotonically_at_first() {
        let mut tc = tiny_tc();
        tc.total_steps = 50;
        tc.warmup_max = 0;
        tc.log_every = 1;
        // Gentle enough that the fixed batch descends without overshoot.
        tc.learning_rate = 0.0005;
        let sim = default_config();
        // A single 3-frame window: every batch draw is the same example.
        let data = frozen_dataset(20, 3);
        let out = train(NetworkConfig::tiny(), &tc, &sim, &data).unwrap();
        assert!(out.halted_at.is_none());
        assert_eq!(out.records.len(), 50);
        let losses: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
        for k in 0..10 {
            assert!(
                losses[k + 1] < losses[k],
                "loss rose at step {k}: {} -> {}",
                losses[k],
                losses[k + 1]
            );
        }
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn non_finite_loss_halts_with_last_good_parameters() {
        let mut tc = tiny_tc();
        tc.total_steps = 10;
        let sim = default_config();
        // Truth frames separated by ~1e300 m overflow the loss at step 0.
        let mut data = frozen_dataset(5, 3);
        for p in data[0].frames[2].positions.iter_mut() {
            p.x = 1e300;
        }
        let out = train(NetworkConfig::tiny(), &tc, &sim, &data).unwrap();
        assert_eq!(out.halted_at, Some(0));
        // No update was applied: the checkpoint is the initialization.
        let init = NetworkParams::init(NetworkConfig::tiny(), tc.seed).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn train_rejects_empty_or_too_short_data() {
        let tc = tiny_tc();
        let sim = default_config();
        assert!(train(NetworkConfig::tiny(), &tc, &sim, &[]).is_err());
        // supervised = 2 needs 3 frames; give 2.
        let data = frozen_dataset(5, 2);
        assert!(train(NetworkConfig::tiny(), &tc, &sim, &data).is_err());
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut p = Tensor::from_rows(1, 2, vec![5.0, -3.0]).unwrap();
        let mut slots = vec![&mut p];
        let mut adam = Adam::new(&slots);
        for _ in 0..2000 {
            let grads = vec![Tensor::from_rows(
                1,
                2,
                vec![
                    2.0 * (slots[0].data[0] - 1.0),
                    2.0 * (slots[0].data[1] - 2.0),
                ],
            )
            .unwrap()];
            adam.step(&mut slots, &grads, 0.01).unwrap();
        }
        assert!((slots[0].data[0] - 1.0).abs() < 1e-3);
        assert!((slots[0].data[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn validation_records_carry_finite_metrics() {
        let mut tc = tiny_tc();
        tc.total_steps = 2;
        tc.log_every = 1;
        let sim = default_config();
        let out = train(NetworkConfig::tiny(), &tc, &sim, &frozen_dataset(8, 4)).unwrap();
        assert_eq!(out.records.len(), 2);
        for r in &out.records {
            assert!(r.loss.is_finite());
            assert!(r.d_n.is_finite());
            assert!(r.max_density_error.is_finite());
            assert!(r.learning_rate > 0.0);
        }
    }
}
