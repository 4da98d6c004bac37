//! Point-set evaluation: chamfer distance, earth-mover distance, n-frame
//! sequence error, and the peak-density discrepancy between a predicted and
//! a ground-truth frame.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::neighbor::NeighborIndex;
use crate::sph;
use crate::stepper::FrameSequence;
use crate::types::{Kind, ParticleSet, SimConfig};

/// Largest set size solved exactly by the assignment solver; beyond this,
/// `emd` evaluates on a seeded random subsample of this many points (the
/// same index subset in both clouds, so identical inputs still score zero).
pub const EMD_EXACT_LIMIT: usize = 1024;

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|&a| {
            to.iter()
                .map(|&b| (a - b).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    sum / from.len() as f64
}

/// Symmetric chamfer distance between two point clouds, meters:
/// half the sum of the two directed mean nearest-neighbor distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::RejectedInput(
            "chamfer distance requires nonempty point sets".into(),
        ));
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// Minimum-cost perfect assignment on an n x n cost matrix (Hungarian
/// algorithm with row/column potentials, O(n^3)). Returns the column
/// matched to each row.
fn hungarian(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // Indices are 1-based internally; row/column 0 is the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if matched[j] > 0 {
            assign[matched[j] - 1] = j - 1;
        }
    }
    assign
}

fn emd_exact(a: &[Vec3], b: &[Vec3]) -> f64 {
    let n = a.len();
    let assign = hungarian(n, |i, j| (a[i] - b[j]).norm());
    let total: f64 = (0..n).map(|i| (a[i] - b[assign[i]]).norm()).sum();
    total / n as f64
}

/// Earth-mover distance between two equal-cardinality point clouds, meters:
/// the minimum over bijections of the mean matched distance. Exact for
/// sets up to `EMD_EXACT_LIMIT`; larger sets are subsampled.
pub fn emd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::RejectedInput(format!(
            "earth-mover distance requires equal cardinality, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::RejectedInput(
            "earth-mover distance requires nonempty point sets".into(),
        ));
    }
    if a.len() <= EMD_EXACT_LIMIT {
        return Ok(emd_exact(a, b));
    }
    let mut indices: Vec<usize> = (0..a.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e4d);
    indices.shuffle(&mut rng);
    indices.truncate(EMD_EXACT_LIMIT);
    let sa: Vec<Vec3> = indices.iter().map(|&i| a[i]).collect();
    let sb: Vec<Vec3> = indices.iter().map(|&i| b[i]).collect();
    Ok(emd_exact(&sa, &sb))
}

fn fluid_positions(set: &ParticleSet) -> Vec<Vec3> {
    set.positions
        .iter()
        .zip(&set.kinds)
        .filter(|(_, k)| **k == Kind::Fluid)
        .map(|(p, _)| *p)
        .collect()
}

/// n-frame sequence error d^n, meters: the mean distance from each
/// ground-truth fluid particle at frame `n` to its nearest predicted
/// particle. One-directional by definition (truth to prediction).
pub fn sequence_error(predicted: &FrameSequence, truth: &FrameSequence, n: usize) -> Result<f64> {
    if n >= predicted.len() || n >= truth.len() {
        return Err(Error::RejectedInput(format!(
            "frame {n} out of range (predicted has {}, truth has {})",
            predicted.len(),
            truth.len()
        )));
    }
    let pred = fluid_positions(&predicted.frames[n]);
    let gt = fluid_positions(&truth.frames[n]);
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::RejectedInput(
            "sequence error requires nonempty fluid frames".into(),
        ));
    }
    Ok(mean_nearest(&gt, &pred))
}

fn peak_density(positions: &[Vec3], config: &SimConfig) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::RejectedInput(
            "density error requires nonempty frames".into(),
        ));
    }
    let support = sph::SUPPORT_FACTOR * config.particle_radius;
    let index = NeighborIndex::build(positions, support)?;
    let masses = vec![config.particle_mass(); positions.len()];
    let rho = sph::density(positions, &masses, &index, support);
    Ok(rho.iter().fold(0.0f64, |a, &b| a.max(b)))
}

/// Peak-density discrepancy e = |1 - max rho(predicted) / max rho(truth)|,
/// dimensionless. Densities come from the ground-truth solver's kernel
/// estimator with the uniform sampling mass, evaluated on each frame
/// independently.
pub fn max_density_error(
    predicted: &[Vec3],
    truth: &[Vec3],
    config: &SimConfig,
) -> Result<f64> {
    let rho_pred = peak_density(predicted, config)?;
    let rho_truth = peak_density(truth, config)?;
    if rho_truth <= 0.0 {
        return Err(Error::RejectedInput(
            "degenerate truth frame: zero peak density".into(),
        ));
    }
    Ok((1.0 - rho_pred / rho_truth).abs())
}

/// Evaluation summary for one predicted rollout against ground truth.
/// Distances are reported in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub cd_t1_mm: f64,
    pub cd_t2_mm: f64,
    pub emd_t1_mm: f64,
    pub emd_t2_mm: f64,
    /// Sequence error d^n per frame, millimeters.
    pub d_n_mm: Vec<f64>,
    /// Peak-density discrepancy at the final frame, dimensionless.
    pub max_density_error: f64,
    /// Mean wall-clock cost of producing one predicted frame.
    pub seconds_per_frame: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut all = vec![
            self.cd_t1_mm,
            self.cd_t2_mm,
            self.emd_t1_mm,
            self.emd_t2_mm,
            self.max_density_error,
            self.seconds_per_frame,
        ];
        all.extend_from_slice(&self.d_n_mm);
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Numerical(format!(
                    "evaluation report entry {v} is not finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// One-line-per-quantity summary for terminal output.
    pub fn summary(&self) -> String {
        let last = self.d_n_mm.last().copied().unwrap_or(0.0);
        format!(
            "CD t+1 (mm)          {:>12.4}\n\
             CD t+2 (mm)          {:>12.4}\n\
             EMD t+1 (mm)         {:>12.4}\n\
             EMD t+2 (mm)         {:>12.4}\n\
             d^n final (mm)       {:>12.4}\n\
             max density error    {:>12.5}\n\
             seconds per frame    {:>12.5}",
            self.cd_t1_mm,
            self.cd_t2_mm,
            self.emd_t1_mm,
            self.emd_t2_mm,
            last,
            self.max_density_error,
            self.seconds_per_frame
        )
    }
}

const MM_PER_M: f64 = 1000.0;

/// Evaluates a predicted sequence against an aligned ground-truth sequence.
/// Both must start from the same frame 0; t+1 and t+2 metrics compare the
/// first and second predicted frames, d^n is reported for every frame, and
/// the density discrepancy is measured at the final frame.
pub fn evaluate(
    predicted: &FrameSequence,
    truth: &FrameSequence,
    config: &SimConfig,
    seconds_per_frame: f64,
) -> Result<EvalReport> {
    predicted.validate()?;
    truth.validate()?;
    if predicted.len() != truth.len() {
        return Err(Error::RejectedInput(format!(
            "sequence lengths differ: predicted {}, truth {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.len() < 3 {
        return Err(Error::RejectedInput(
            "evaluation needs at least three frames (t, t+1, t+2)".into(),
        ));
    }
    let pred1 = fluid_positions(&predicted.frames[1]);
    let pred2 = fluid_positions(&predicted.frames[2]);
    let gt1 = fluid_positions(&truth.frames[1]);
    let gt2 = fluid_positions(&truth.frames[2]);
    let d_n_mm: Vec<f64> = (0..truth.len())
        .map(|n| sequence_error(predicted, truth, n).map(|d| d * MM_PER_M))
        .collect::<Result<_>>()?;
    let last = predicted.len() - 1;
    let report = EvalReport {
        cd_t1_mm: chamfer(&pred1, &gt1)? * MM_PER_M,
        cd_t2_mm: chamfer(&pred2, &gt2)? * MM_PER_M,
        emd_t1_mm: emd(&pred1, &gt1)? * MM_PER_M,
        emd_t2_mm: emd(&pred2, &gt2)? * MM_PER_M,
        d_n_mm,
        max_density_error: max_density_error(
            &fluid_positions(&predicted.frames[last]),
            &fluid_positions(&truth.frames[last]),
            config,
        )?,
        seconds_per_frame,
    };
    report.validate()?;
    Ok(report)
}
