//! The position-correction network: type-aware input fusion over fluid and
//! tank particles, five layers that each run a continuous convolution, an
//! antisymmetric (momentum-conserving) convolution, and a dense path fused
//! by triangle feature fusion, a residual fusion joining the second layer
//! into the fourth, and a linear head emitting a per-particle displacement.
//!
//! Every fusion site follows the same rule: the two incoming feature maps
//! are concatenated with a broadcast global feature, passed through branch
//! convolutions, and blended with a sigmoid gate computed by a
//! conv-relu-conv sub-network, so the output is an elementwise convex
//! combination of the two (augmented) inputs.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::conv::{ConvPlan, FREE_CELLS, GRID_CELLS};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::neighbor::NeighborIndex;
use crate::types::ParticleSet;

/// Raw per-particle input width: a 3-vector (velocity for fluid, inward
/// normal for tank particles) plus a one-hot type flag.
pub const INPUT_WIDTH: usize = 4;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Channel widths. `widths` are the output widths of the convolution paths
/// in each of the five layers; every layer output additionally carries
/// `global_width` channels fused in from the pooled global feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Width of the type-aware input fusion output.
    pub type_width: usize,
    /// Convolution-path output widths of the five layers.
    pub widths: [usize; 5],
    /// Width of the pooled global feature concatenated at every fusion.
    pub global_width: usize,
}

impl NetworkConfig {
    /// Full-size configuration.
    pub fn desk() -> NetworkConfig {
        NetworkConfig {
            type_width: 32,
            widths: [32, 64, 64, 64, 64],
            global_width: 8,
        }
    }

    /// Small configuration for unit tests and quick experiments.
    pub fn tiny() -> NetworkConfig {
        NetworkConfig {
            type_width: 4,
            widths: [4, 4, 4, 4, 4],
            global_width: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.type_width == 0 || self.global_width == 0 || self.widths.iter().any(|w| *w == 0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if self.widths[1] != self.widths[3] {
            return Err(Error::Config(format!(
                "residual fusion requires equal widths in layers 2 and 4, got {} and {}",
                self.widths[1], self.widths[3]
            )));
        }
        Ok(())
    }

    /// Input width of layer `l` (0-based). Layer 4 receives the residual
    /// fusion output, which carries one extra global-feature block.
    pub fn layer_input_width(&self, l: usize) -> usize {
        match l {
            0 => self.type_width,
            4 => self.widths[3] + 2 * self.global_width,
            _ => self.widths[l - 1] + self.global_width,
        }
    }

    /// Output width of layer `l`: conv-path width plus the global block.
    pub fn layer_output_width(&self, l: usize) -> usize {
        self.widths[l] + self.global_width
    }
}

/// One triangle-feature-fusion module: two branch convolutions and a
/// conv-relu-conv gate ending in a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct TffModule {
    pub cin1: usize,
    pub cin2: usize,
    pub hidden: usize,
    pub out: usize,
    /// Branch convolution kernels, (GRID_CELLS * cin, hidden).
    pub branch1: Tensor,
    pub branch2: Tensor,
    /// Gate kernels and biases: conv (2*hidden -> hidden), relu,
    /// conv (hidden -> out), sigmoid.
    pub gate1: Tensor,
    pub gate1_bias: Tensor,
    pub gate2: Tensor,
    pub gate2_bias: Tensor,
}

impl TffModule {
    fn zeros(cin1: usize, cin2: usize, hidden: usize, out: usize) -> TffModule {
        TffModule {
            cin1,
            cin2,
            hidden,
            out,
            branch1: Tensor::zeros(GRID_CELLS * cin1, hidden),
            branch2: Tensor::zeros(GRID_CELLS * cin2, hidden),
            gate1: Tensor::zeros(GRID_CELLS * 2 * hidden, hidden),
            gate1_bias: Tensor::zeros(1, hidden),
            gate2: Tensor::zeros(GRID_CELLS * hidden, out),
            gate2_bias: Tensor::zeros(1, out),
        }
    }
}

/// One of the five feature layers: convolution path, antisymmetric path,
/// and a per-particle dense path.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub cin: usize,
    pub width: usize,
    /// (GRID_CELLS * cin, width)
    pub cconv: Tensor,
    /// Free half of the antisymmetric kernel, (FREE_CELLS * cin, width).
    pub ascc_free: Tensor,
    /// Dense path producing the full layer-output width so it can be fused
    /// with the (conv, global)-augmented features.
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    /// Two stacked type-aware input fusions (fluid branch vs tank branch).
    pub type_tff: Vec<TffModule>,
    pub layers: Vec<LayerParams>,
    /// One fusion module per layer, applied twice: conv/antisym first,
    /// then the result against the dense path.
    pub main_tff: Vec<TffModule>,
    /// Residual fusion of the layer-2 output into the layer-4 output.
    pub res_tff: TffModule,
    /// Global feature: dense transform, mean-pool, broadcast.
    pub global_weight: Tensor,
    pub global_bias: Tensor,
    /// Linear head to a 3-vector per particle; zero-initialized so the
    /// untrained network predicts no displacement.
    pub output_head: Tensor,
}

impl NetworkParams {
    pub fn zeros(config: NetworkConfig) -> Result<NetworkParams> {
        config.validate()?;
        let g = config.global_width;
        let tw = config.type_width;
        let type_tff = vec![
            TffModule::zeros(INPUT_WIDTH + g, INPUT_WIDTH + g, tw, tw),
            TffModule::zeros(tw + g, INPUT_WIDTH + g, tw, tw),
        ];
        let mut layers = Vec::with_capacity(5);
        let mut main_tff = Vec::with_capacity(5);
        for l in 0..5 {
            let cin = config.layer_input_width(l);
            let w = config.widths[l];
            layers.push(LayerParams {
                cin,
                width: w,
                cconv: Tensor::zeros(GRID_CELLS * cin, w),
                ascc_free: Tensor::zeros(FREE_CELLS * cin, w),
                fc_weight: Tensor::zeros(cin, w + g),
                fc_bias: Tensor::zeros(1, w + g),
            });
            main_tff.push(TffModule::zeros(w + g, w + g, w + g, w + g));
        }
        let rw = config.widths[1] + 2 * g;
        let res_tff = TffModule::zeros(rw, rw, rw, rw);
        Ok(NetworkParams {
            config,
            type_tff,
            layers,
            main_tff,
            res_tff,
            global_weight: Tensor::zeros(INPUT_WIDTH, g),
            global_bias: Tensor::zeros(1, g),
            output_head: Tensor::zeros(config.layer_output_width(4), 3),
        })
    }

    /// Random initialization: uniform in +-(6 / (fan_in + fan_out))^0.5
    /// per weight matrix (kernel cells use their per-cell matrix fans);
    /// biases and the output head start at zero.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<NetworkParams> {
        let mut p = NetworkParams::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |t: &mut Tensor, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        };
        let modules = p
            .type_tff
            .iter_mut()
            .chain(p.main_tff.iter_mut())
            .chain(std::iter::once(&mut p.res_tff));
        for m in modules {
            fill(&mut m.branch1, m.cin1, m.hidden);
            fill(&mut m.branch2, m.cin2, m.hidden);
            fill(&mut m.gate1, 2 * m.hidden, m.hidden);
            fill(&mut m.gate2, m.hidden, m.out);
        }
        for l in p.layers.iter_mut() {
            fill(&mut l.cconv, l.cin, l.width);
            fill(&mut l.ascc_free, l.cin, l.width);
            let fc_cols = l.fc_weight.cols;
            fill(&mut l.fc_weight, l.cin, fc_cols);
        }
        let g = p.global_bias.cols;
        fill(&mut p.global_weight, INPUT_WIDTH, g);
        // Output head stays zero: the untrained network is the identity step.
        Ok(p)
    }

    /// All parameter tensors in a fixed order, with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        fn push_module<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, m: &'a TffModule) {
            out.push((format!("{prefix}.branch1"), &m.branch1));
            out.push((format!("{prefix}.branch2"), &m.branch2));
            out.push((format!("{prefix}.gate1"), &m.gate1));
            out.push((format!("{prefix}.gate1_bias"), &m.gate1_bias));
            out.push((format!("{prefix}.gate2"), &m.gate2));
            out.push((format!("{prefix}.gate2_bias"), &m.gate2_bias));
        }
        let mut out = Vec::new();
        for (i, m) in self.type_tff.iter().enumerate() {
            push_module(&mut out, &format!("type_tff{i}"), m);
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.cconv"), &l.cconv));
            out.push((format!("layer{i}.ascc_free"), &l.ascc_free));
            out.push((format!("layer{i}.fc_weight"), &l.fc_weight));
            out.push((format!("layer{i}.fc_bias"), &l.fc_bias));
        }
        for (i, m) in self.main_tff.iter().enumerate() {
            push_module(&mut out, &format!("main_tff{i}"), m);
        }
        push_module(&mut out, "res_tff", &self.res_tff);
        out.push(("global_weight".into(), &self.global_weight));
        out.push(("global_bias".into(), &self.global_bias));
        out.push(("output_head".into(), &self.output_head));
        out
    }

    /// Mutable view of the parameter tensors, in the same order as
    /// `named_params`.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        fn push_module<'a>(out: &mut Vec<&'a mut Tensor>, m: &'a mut TffModule) {
            out.push(&mut m.branch1);
            out.push(&mut m.branch2);
            out.push(&mut m.gate1);
            out.push(&mut m.gate1_bias);
            out.push(&mut m.gate2);
            out.push(&mut m.gate2_bias);
        }
        let mut out: Vec<&mut Tensor> = Vec::new();
        for m in self.type_tff.iter_mut() {
            push_module(&mut out, m);
        }
        for l in self.layers.iter_mut() {
            out.push(&mut l.cconv);
            out.push(&mut l.ascc_free);
            out.push(&mut l.fc_weight);
            out.push(&mut l.fc_bias);
        }
        for m in self.main_tff.iter_mut() {
            push_module(&mut out, m);
        }
        push_module(&mut out, &mut self.res_tff);
        out.push(&mut self.global_weight);
        out.push(&mut self.global_bias);
        out.push(&mut self.output_head);
        out
    }

    /// Registers every parameter as a tape leaf and materializes the
    /// antisymmetric kernels; `leaf_ids` lines up with `named_params`.
    pub fn leaves(&self, tape: &mut Tape) -> Result<ParamNodes> {
        fn leaf(tape: &mut Tape, t: &Tensor, ids: &mut Vec<NodeId>) -> NodeId {
            let id = tape.leaf(t.clone());
            ids.push(id);
            id
        }
        fn module(tape: &mut Tape, m: &TffModule, ids: &mut Vec<NodeId>) -> TffNodes {
            TffNodes {
                branch1: leaf(tape, &m.branch1, ids),
                branch2: leaf(tape, &m.branch2, ids),
                gate1: leaf(tape, &m.gate1, ids),
                gate1_bias: leaf(tape, &m.gate1_bias, ids),
                gate2: leaf(tape, &m.gate2, ids),
                gate2_bias: leaf(tape, &m.gate2_bias, ids),
            }
        }
        let mut ids = Vec::new();
        let type_tff: Vec<TffNodes> = self
            .type_tff
            .iter()
            .map(|m| module(tape, m, &mut ids))
            .collect();
        let mut layers = Vec::new();
        for l in &self.layers {
            let cconv = leaf(tape, &l.cconv, &mut ids);
            let free = leaf(tape, &l.ascc_free, &mut ids);
            let fc_weight = leaf(tape, &l.fc_weight, &mut ids);
            let fc_bias = leaf(tape, &l.fc_bias, &mut ids);
            let ascc_full = tape.antisym_materialize(free, l.cin)?;
            layers.push(LayerNodes {
                cconv,
                ascc_full,
                fc_weight,
                fc_bias,
            });
        }
        let main_tff: Vec<TffNodes> = self
            .main_tff
            .iter()
            .map(|m| module(tape, m, &mut ids))
            .collect();
        let res_tff = module(tape, &self.res_tff, &mut ids);
        let global_weight = leaf(tape, &self.global_weight, &mut ids);
        let global_bias = leaf(tape, &self.global_bias, &mut ids);
        let output_head = leaf(tape, &self.output_head, &mut ids);
        Ok(ParamNodes {
            config: self.config,
            leaf_ids: ids,
            type_tff,
            layers,
            main_tff,
            res_tff,
            global_weight,
            global_bias,
            output_head,
        })
    }

    /// Runs the network outside of any training loop: builds a private
    /// tape and returns the per-particle displacement.
    pub fn predict(
        &self,
        x_star: &[Vec3],
        v_star: &[Vec3],
        boundary: &ParticleSet,
        conv_radius: f64,
    ) -> Result<Vec<Vec3>> {
        Ok(self.predict_traced(x_star, v_star, boundary, conv_radius)?.0)
    }

    /// Like `predict`, additionally returning the instrumentation trace.
    pub fn predict_traced(
        &self,
        x_star: &[Vec3],
        v_star: &[Vec3],
        boundary: &ParticleSet,
        conv_radius: f64,
    ) -> Result<(Vec<Vec3>, ForwardTrace)> {
        let mut tape = Tape::new();
        let nodes = self.leaves(&mut tape)?;
        let pos = tape.constant(Tensor::from_vec3s(x_star));
        let vel = tape.constant(Tensor::from_vec3s(v_star));
        let bpos = tape.constant(Tensor::from_vec3s(&boundary.positions));
        let bfeat = tape.constant(boundary_features(boundary));
        let (dx, trace) = forward_on_tape(&mut tape, &nodes, pos, vel, bpos, bfeat, conv_radius)?;
        Ok((tape.value(dx).to_vec3s(), trace))
    }

    /// Writes a versioned binary checkpoint: a manifest of named tensor
    /// shapes and byte offsets followed by little-endian f64 data.
    /// `load_checkpoint` of the result reproduces the parameters bitwise.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        // Endianness tag: readers verify the constant round-trips.
        buf.extend_from_slice(&0x0102_0304u32.to_le_bytes());
        buf.extend_from_slice(&(self.config.type_width as u32).to_le_bytes());
        for w in self.config.widths {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.config.global_width as u32).to_le_bytes());
        let named = self.named_params();
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &named {
            let bytes = name.as_bytes();
            buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(bytes);
            buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += (t.data.len() * 8) as u64;
        }
        for (_, t) in &named {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let dir = if dir.as_os_str().is_empty() {
            Path::new(".")
        } else {
            dir
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
        tmp.write_all(&buf).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor {
            buf: &buf,
            pos: 0,
            path,
        };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::corrupt(path, "bad checkpoint magic"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if cur.u32()? != 0x0102_0304 {
            return Err(Error::corrupt(path, "endianness tag mismatch"));
        }
        let type_width = cur.u32()? as usize;
        let mut widths = [0usize; 5];
        for w in widths.iter_mut() {
            *w = cur.u32()? as usize;
        }
        let global_width = cur.u32()? as usize;
        let config = NetworkConfig {
            type_width,
            widths,
            global_width,
        };
        let mut params = NetworkParams::zeros(config)
            .map_err(|e| Error::corrupt(path, format!("invalid stored config: {e}")))?;
        let n_entries = cur.u32()? as usize;
        let expected: Vec<(String, usize, usize)> = params
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.rows, t.cols))
            .collect();
        if n_entries != expected.len() {
            return Err(Error::corrupt(
                path,
                format!("{n_entries} manifest entries, expected {}", expected.len()),
            ));
        }
        let mut running = 0u64;
        for (exp_name, exp_rows, exp_cols) in &expected {
            let name_len = cur.u32()? as usize;
            if name_len > 4096 {
                return Err(Error::corrupt(path, "implausible manifest name length"));
            }
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::corrupt(path, "manifest name is not utf-8"))?;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let offset = cur.u64()?;
            if name != exp_name || rows != *exp_rows || cols != *exp_cols {
                return Err(Error::corrupt(
                    path,
                    format!(
                        "manifest entry {name} ({rows}x{cols}) does not match expected \
                         {exp_name} ({exp_rows}x{exp_cols})"
                    ),
                ));
            }
            if offset != running {
                return Err(Error::corrupt(path, "manifest offsets are not contiguous"));
            }
            running += (rows * cols * 8) as u64;
        }
        if buf.len() as u64 != cur.pos as u64 + running {
            return Err(Error::corrupt(path, "payload length mismatch"));
        }
        for t in params.params_mut() {
            for v in t.data.iter_mut() {
                let bytes: [u8; 8] = buf[cur.pos..cur.pos + 8].try_into().unwrap();
                cur.pos += 8;
                *v = f64::from_le_bytes(bytes);
            }
        }
        Ok(params)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::corrupt(self.path, "unexpected end of file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Tape node ids of one fusion module's parameters.
#[derive(Debug, Clone, Copy)]
pub struct TffNodes {
    pub branch1: NodeId,
    pub branch2: NodeId,
    pub gate1: NodeId,
    pub gate1_bias: NodeId,
    pub gate2: NodeId,
    pub gate2_bias: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub cconv: NodeId,
    /// Materialized antisymmetric kernel (gradients flow to the free half).
    pub ascc_full: NodeId,
    pub fc_weight: NodeId,
    pub fc_bias: NodeId,
}

/// All parameters registered on a tape; `leaf_ids` follows the order of
/// `NetworkParams::named_params` so optimizers can map gradients back.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub config: NetworkConfig,
    pub leaf_ids: Vec<NodeId>,
    pub type_tff: Vec<TffNodes>,
    pub layers: Vec<LayerNodes>,
    pub main_tff: Vec<TffNodes>,
    pub res_tff: TffNodes,
    pub global_weight: NodeId,
    pub global_bias: NodeId,
    pub output_head: NodeId,
}

/// Values captured during a forward pass for structural tests and
/// diagnostics (the tape owns the graph; these are plain copies).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-activation output of each of the five layers.
    pub layer_outputs: Vec<Tensor>,
    /// The two inputs tapped by the residual fusion (layer-2 and layer-4
    /// outputs, in that order).
    pub res_inputs: Vec<Tensor>,
    pub res_output: Tensor,
    /// Gate values of every fusion site, in execution order.
    pub omegas: Vec<Tensor>,
}

impl Default for ForwardTrace {
    fn default() -> ForwardTrace {
        ForwardTrace {
            layer_outputs: Vec::new(),
            res_inputs: Vec::new(),
            res_output: Tensor::zeros(0, 0),
            omegas: Vec::new(),
        }
    }
}

/// Input features of tank particles: (inward normal, 0).
pub fn boundary_features(boundary: &ParticleSet) -> Tensor {
    let n = boundary.len();
    let mut data = Vec::with_capacity(n * INPUT_WIDTH);
    for normal in &boundary.normals {
        data.extend_from_slice(&normal.to_array());
        data.push(0.0);
    }
    Tensor {
        rows: n,
        cols: INPUT_WIDTH,
        data,
    }
}

fn check_finite(tape: &Tape, node: NodeId, stage: &str) -> Result<()> {
    if tape.value(node).data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite activation in {stage}"
        )));
    }
    Ok(())
}

/// Per-query inverse neighbor count (n x 1), a constant of the current
/// particle configuration. Conv responses are sums over neighbors, so
/// without normalization their magnitude grows with sampling density
/// (hundreds of neighbors under a 4.5h radius); dividing by the count
/// keeps feature scales density-independent and trainable.
fn inverse_count_node(tape: &mut Tape, plan: &ConvPlan) -> NodeId {
    let n = plan.n_queries();
    let data: Vec<f64> = (0..n)
        .map(|q| 1.0 / plan.edges_of(q).len().max(1) as f64)
        .collect();
    tape.constant(Tensor::from_rows(n, 1, data).expect("count column"))
}

/// Scales each row of a conv response by the query's inverse neighbor
/// count (`inv` is the (n x 1) column from `inverse_count_node`).
fn normalize_response(tape: &mut Tape, response: NodeId, inv: NodeId) -> Result<NodeId> {
    let w = tape.value(response).cols;
    let ones = tape.constant(Tensor::from_rows(1, w, vec![1.0; w])?);
    let scale = tape.matmul(inv, ones)?;
    tape.mul(scale, response)
}

/// Uniform response scale for the antisymmetric path: the inverse mean
/// neighbor count. Per-query normalization would break the pairwise
/// antisymmetry that makes ASCC momentum-conserving, so the same constant
/// is applied to every query instead.
fn uniform_count_scale(plan: &ConvPlan) -> f64 {
    plan.n_queries() as f64 / (plan.edges.len() as f64).max(1.0)
}

/// Output of one fusion site on the tape.
pub struct FusionOut {
    pub out: NodeId,
    pub omega: NodeId,
    /// The (augmented) inputs actually blended by the gate.
    pub blended_1: NodeId,
    pub blended_2: NodeId,
}

/// Fusion over a single particle set: augments both inputs with the global
/// feature (if given), computes the gate from the branch convolutions, and
/// blends the augmented inputs.
#[allow(clippy::too_many_arguments)]
pub fn fuse_same_set(
    tape: &mut Tape,
    m: &TffNodes,
    f1: NodeId,
    f2: NodeId,
    f_fc: Option<NodeId>,
    pos: NodeId,
    plan: &Rc<ConvPlan>,
    stage: &str,
) -> Result<FusionOut> {
    let f1p = match f_fc {
        Some(g) => tape.concat_cols(f1, g)?,
        None => f1,
    };
    let f2p = match f_fc {
        Some(g) => tape.concat_cols(f2, g)?,
        None => f2,
    };
    let inv = inverse_count_node(tape, plan);
    let b1 = tape.cconv(f1p, m.branch1, pos, pos, plan.clone())?;
    let b1 = normalize_response(tape, b1, inv)?;
    let b2 = tape.cconv(f2p, m.branch2, pos, pos, plan.clone())?;
    let b2 = normalize_response(tape, b2, inv)?;
    let omega = gate(tape, m, b1, b2, pos, plan, inv)?;
    let out = blend(tape, omega, f1p, f2p)?;
    check_finite(tape, out, stage)?;
    Ok(FusionOut {
        out,
        omega,
        blended_1: f1p,
        blended_2: f2p,
    })
}

/// Fusion across particle sets: the branch convolutions transport both
/// inputs onto the fluid query set, and the blend acts on the transported
/// features (the inputs themselves live on different sets).
#[allow(clippy::too_many_arguments)]
pub fn fuse_cross_set(
    tape: &mut Tape,
    m: &TffNodes,
    f1_fluid: NodeId,
    f2_boundary: NodeId,
    f_fc_fluid: NodeId,
    f_fc_boundary: NodeId,
    fluid_pos: NodeId,
    boundary_pos: NodeId,
    plan_ff: &Rc<ConvPlan>,
    plan_bf: &Rc<ConvPlan>,
    stage: &str,
) -> Result<FusionOut> {
    let f1p = tape.concat_cols(f1_fluid, f_fc_fluid)?;
    let f2p = tape.concat_cols(f2_boundary, f_fc_boundary)?;
    let inv_ff = inverse_count_node(tape, plan_ff);
    let inv_bf = inverse_count_node(tape, plan_bf);
    let b1 = tape.cconv(f1p, m.branch1, fluid_pos, fluid_pos, plan_ff.clone())?;
    let b1 = normalize_response(tape, b1, inv_ff)?;
    let b2 = tape.cconv(f2p, m.branch2, boundary_pos, fluid_pos, plan_bf.clone())?;
    let b2 = normalize_response(tape, b2, inv_bf)?;
    let omega = gate(tape, m, b1, b2, fluid_pos, plan_ff, inv_ff)?;
    let out = blend(tape, omega, b1, b2)?;
    check_finite(tape, out, stage)?;
    Ok(FusionOut {
        out,
        omega,
        blended_1: b1,
        blended_2: b2,
    })
}

/// The fusion gate: sigmoid(conv(relu(conv(b1 (+) b2)))).
fn gate(
    tape: &mut Tape,
    m: &TffNodes,
    b1: NodeId,
    b2: NodeId,
    pos: NodeId,
    plan: &Rc<ConvPlan>,
    inv: NodeId,
) -> Result<NodeId> {
    let cat = tape.concat_cols(b1, b2)?;
    let z1 = tape.cconv(cat, m.gate1, pos, pos, plan.clone())?;
    let z1 = normalize_response(tape, z1, inv)?;
    let z1 = tape.add_bias(z1, m.gate1_bias)?;
    let r = tape.relu(z1);
    let z2 = tape.cconv(r, m.gate2, pos, pos, plan.clone())?;
    let z2 = normalize_response(tape, z2, inv)?;
    let z2 = tape.add_bias(z2, m.gate2_bias)?;
    Ok(tape.sigmoid(z2))
}

/// omega * a + (1 - omega) * b, elementwise.
fn blend(tape: &mut Tape, omega: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
    let wa = tape.mul(omega, a)?;
    let inv = tape.affine(omega, -1.0, 1.0);
    let wb = tape.mul(inv, b)?;
    tape.add(wa, wb)
}

/// Full forward pass on an existing tape. `fluid_pos` and `fluid_vel` are
/// (n, 3) nodes (possibly outputs of earlier rollout steps); the boundary
/// nodes are typically leaves. Returns the displacement node (n, 3) and an
/// instrumentation trace.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    tape: &mut Tape,
    pn: &ParamNodes,
    fluid_pos: NodeId,
    fluid_vel: NodeId,
    boundary_pos: NodeId,
    boundary_feat: NodeId,
    conv_radius: f64,
) -> Result<(NodeId, ForwardTrace)> {
    let n = tape.value(fluid_pos).rows;
    if n == 0 {
        return Err(Error::RejectedInput(
            "network forward requires at least one fluid particle".into(),
        ));
    }
    {
        let pt = tape.value(fluid_pos);
        let vt = tape.value(fluid_vel);
        if vt.rows != n || vt.cols != 3 || pt.cols != 3 {
            return Err(Error::Config(format!(
                "fluid positions ({}x{}) and velocities ({}x{}) must be aligned (n x 3)",
                pt.rows, pt.cols, vt.rows, vt.cols
            )));
        }
    }
    check_finite(tape, fluid_pos, "input positions")?;
    check_finite(tape, fluid_vel, "input velocities")?;
    let n_boundary = tape.value(boundary_pos).rows;
    {
        let bf = tape.value(boundary_feat);
        if bf.rows != n_boundary || bf.cols != INPUT_WIDTH {
            return Err(Error::Config(format!(
                "boundary features ({}x{}) misaligned with {} boundary particles",
                bf.rows, bf.cols, n_boundary
            )));
        }
    }

    let fluid_points = tape.value(fluid_pos).to_vec3s();
    let boundary_points = tape.value(boundary_pos).to_vec3s();
    let index_f = NeighborIndex::build(&fluid_points, conv_radius)?;
    let plan_ff = Rc::new(ConvPlan::build(&index_f, &fluid_points));
    let index_b = NeighborIndex::build(&boundary_points, conv_radius)?;
    let plan_bf = Rc::new(ConvPlan::build(&index_b, &fluid_points));

    let mut trace = ForwardTrace::default();

    // Fluid input features: (velocity, 1).
    let ones = tape.constant(Tensor::from_rows(n, 1, vec![1.0; n]).unwrap());
    let fluid_feat = tape.concat_cols(fluid_vel, ones)?;

    // Global feature: dense transform, mean-pool, broadcast. The pooled
    // vector is broadcast separately over fluid and tank particles.
    let gf = tape.matmul(fluid_feat, pn.global_weight)?;
    let gf = tape.add_bias(gf, pn.global_bias)?;
    let pooled = tape.mean_rows(gf)?;
    let f_fc = tape.broadcast_rows(pooled, n)?;
    let f_fc_boundary = if n_boundary > 0 {
        tape.broadcast_rows(pooled, n_boundary)?
    } else {
        tape.constant(Tensor::zeros(0, pn.config.global_width))
    };
    check_finite(tape, f_fc, "global feature")?;

    // Type-aware input fusion: fluid branch against the tank branch, twice.
    let mut features = fluid_feat;
    for (i, m) in pn.type_tff.iter().enumerate() {
        let fused = fuse_cross_set(
            tape,
            m,
            features,
            boundary_feat,
            f_fc,
            f_fc_boundary,
            fluid_pos,
            boundary_pos,
            &plan_ff,
            &plan_bf,
            &format!("type fusion {}", i + 1),
        )?;
        trace.omegas.push(tape.value(fused.omega).clone());
        features = fused.out;
    }

    // Five layers: conv path, antisymmetric path, dense path; the layer's
    // fusion module is applied twice, then a relu. The residual fusion
    // blends the layer-2 output into the layer-4 output, and its result
    // replaces the features entering layer 5.
    let mut layer_nodes: Vec<NodeId> = Vec::with_capacity(5);
    let inv_ff = inverse_count_node(tape, &plan_ff);
    let ascc_scale = uniform_count_scale(&plan_ff);
    for l in 0..5 {
        let layer = &pn.layers[l];
        let stage = format!("layer {}", l + 1);
        let c = tape.cconv(features, layer.cconv, fluid_pos, fluid_pos, plan_ff.clone())?;
        let c = normalize_response(tape, c, inv_ff)?;
        let a = tape.ascc(
            features,
            features,
            layer.ascc_full,
            fluid_pos,
            fluid_pos,
            plan_ff.clone(),
        )?;
        let a = tape.affine(a, ascc_scale, 0.0);
        let fc = tape.matmul(features, layer.fc_weight)?;
        let fc = tape.add_bias(fc, layer.fc_bias)?;
        let first = fuse_same_set(
            tape,
            &pn.main_tff[l],
            c,
            a,
            Some(f_fc),
            fluid_pos,
            &plan_ff,
            &format!("{stage} conv fusion"),
        )?;
        trace.omegas.push(tape.value(first.omega).clone());
        let second = fuse_same_set(
            tape,
            &pn.main_tff[l],
            first.out,
            fc,
            None,
            fluid_pos,
            &plan_ff,
            &format!("{stage} dense fusion"),
        )?;
        trace.omegas.push(tape.value(second.omega).clone());
        features = tape.relu(second.out);
        layer_nodes.push(features);
        trace.layer_outputs.push(tape.value(features).clone());

        if l == 3 {
            trace.res_inputs = vec![
                tape.value(layer_nodes[1]).clone(),
                tape.value(layer_nodes[3]).clone(),
            ];
            let res = fuse_same_set(
                tape,
                &pn.res_tff,
                layer_nodes[1],
                layer_nodes[3],
                Some(f_fc),
                fluid_pos,
                &plan_ff,
                "residual fusion",
            )?;
            trace.omegas.push(tape.value(res.omega).clone());
            trace.res_output = tape.value(res.out).clone();
            features = res.out;
        }
    }

    let dx = tape.matmul(features, pn.output_head)?;
    check_finite(tape, dx, "output head")?;
    Ok((dx, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{
        ascc as ascc_eval, cconv as cconv_eval, AntisymKernelGrid, KernelGrid,
    };
    use crate::math::vec3;
    use crate::types::Kind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RADIUS: f64 = 0.5;

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
            let raw = vec3(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            b.normals.push(raw.normalized());
        }
        b
    }

    fn toy_fluid(n: usize, seed: u64) -> (Vec<Vec3>, Vec<Vec3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n)
            .map(|_| {
                vec3(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                )
            })
            .collect();
        let vel = (0..n)
            .map(|_| {
                vec3(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        (pos, vel)
    }

    #[test]
    fn config_rejects_mismatched_residual_widths() {
        let bad = NetworkConfig {
            type_width: 4,
            widths: [4, 4, 4, 5, 4],
            global_width: 2,
        };
        assert!(bad.validate().is_err());
        assert!(NetworkConfig::tiny().validate().is_ok());
        assert!(NetworkConfig::desk().validate().is_ok());
    }

    #[test]
    fn untrained_network_predicts_zero_displacement() {
        let params = NetworkParams::init(NetworkConfig::tiny(), 7).unwrap();
        let (pos, vel) = toy_fluid(5, 1);
        let boundary = toy_boundary(4, 2);
        let dx = params.predict(&pos, &vel, &boundary, RADIUS).unwrap();
        assert!(dx.iter().all(|d| d.norm() == 0.0));
    }

    #[test]
    fn zero_paths_give_zero_displacement_even_with_nonzero_head() {
        // With every kernel, dense path, and the global feature zeroed,
        // all internal features collapse to zero, so any head maps to zero.
        let mut params = NetworkParams::zeros(NetworkConfig::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in params.output_head.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (pos, vel) = toy_fluid(6, 4);
        let boundary = toy_boundary(3, 5);
        let dx = params.predict(&pos, &vel, &boundary, RADIUS).unwrap();
        for d in dx {
            assert!(d.norm() < 1e-14);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 11).unwrap();
        randomize_head(&mut params, 12);
        let (pos, vel) = toy_fluid(7, 6);
        let boundary = toy_boundary(5, 7);
        let a = params.predict(&pos, &vel, &boundary, RADIUS).unwrap();
        let b = params.predict(&pos, &vel, &boundary, RADIUS).unwrap();
        assert_eq!(a, b);
    }

    fn randomize_head(params: &mut NetworkParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in params.output_head.data.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 21).unwrap();
        randomize_head(&mut params, 22);
        let (pos, vel) = toy_fluid(8, 8);
        let boundary = toy_boundary(6, 9);
        let base = params.predict(&pos, &vel, &boundary, RADIUS).unwrap();
        let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
        let ppos: Vec<Vec3> = perm.iter().map(|&i| pos[i]).collect();
        let pvel: Vec<Vec3> = perm.iter().map(|&i| vel[i]).collect();
        let permuted = params.predict(&ppos, &pvel, &boundary, RADIUS).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!(
                (permuted[k] - base[i]).norm() < 1e-10,
                "particle {i} moved under permutation: {:?} vs {:?}",
                permuted[k],
                base[i]
            );
        }
    }

    #[test]
    fn gates_lie_strictly_inside_unit_interval() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 31).unwrap();
        randomize_head(&mut params, 32);
        let (pos, vel) = toy_fluid(6, 10);
        let boundary = toy_boundary(4, 11);
        let (_, trace) = params
            .predict_traced(&pos, &vel, &boundary, RADIUS)
            .unwrap();
        // 2 type fusions + 2 per layer x 5 layers + 1 residual fusion.
        assert_eq!(trace.omegas.len(), 13);
        for omega in &trace.omegas {
            assert!(!omega.data.is_empty());
            for w in &omega.data {
                assert!(*w > 0.0 && *w < 1.0, "gate value {w} outside (0,1)");
            }
        }
    }

    #[test]
    fn residual_fusion_taps_layer_two_and_four_outputs() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 41).unwrap();
        randomize_head(&mut params, 42);
        let (pos, vel) = toy_fluid(5, 12);
        let boundary = toy_boundary(4, 13);
        let (_, trace) = params
            .predict_traced(&pos, &vel, &boundary, RADIUS)
            .unwrap();
        assert_eq!(trace.layer_outputs.len(), 5);
        assert_eq!(trace.res_inputs.len(), 2);
        assert_eq!(trace.res_inputs[0], trace.layer_outputs[1]);
        assert_eq!(trace.res_inputs[1], trace.layer_outputs[3]);
        // The residual output feeds layer 5, so it must carry the extra
        // global-feature block.
        let cfg = params.config;
        assert_eq!(trace.res_output.cols, cfg.layer_input_width(4));
        assert_eq!(
            trace.layer_outputs[4].cols,
            cfg.layer_output_width(4)
        );
    }

    #[test]
    fn fusion_is_convex_and_collapses_for_equal_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let module = {
            let mut m = TffModule::zeros(5, 5, 3, 5);
            for t in [&mut m.branch1, &mut m.branch2, &mut m.gate1, &mut m.gate2] {
                for v in t.data.iter_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
            m
        };
        let (pos, _) = toy_fluid(6, 14);
        let index = NeighborIndex::build(&pos, RADIUS).unwrap();
        let plan = Rc::new(ConvPlan::build(&index, &pos));
        let n = pos.len();
        let rand_t = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Tensor::from_rows(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let f1v = rand_t(&mut rng, n, 3);
        let f2v = rand_t(&mut rng, n, 3);
        let gv = rand_t(&mut rng, n, 2);

        let mut tape = Tape::new();
        let mn = TffNodes {
            branch1: tape.leaf(module.branch1.clone()),
            branch2: tape.leaf(module.branch2.clone()),
            gate1: tape.leaf(module.gate1.clone()),
            gate1_bias: tape.leaf(module.gate1_bias.clone()),
            gate2: tape.leaf(module.gate2.clone()),
            gate2_bias: tape.leaf(module.gate2_bias.clone()),
        };
        let pos_node = tape.leaf(Tensor::from_vec3s(&pos));
        let f1 = tape.leaf(f1v.clone());
        let f2 = tape.leaf(f2v.clone());
        let g = tape.leaf(gv.clone());
        let fused =
            fuse_same_set(&mut tape, &mn, f1, f2, Some(g), pos_node, &plan, "test").unwrap();
        let out = tape.value(fused.out).clone();
        let f1p = tape.value(fused.blended_1).clone();
        let f2p = tape.value(fused.blended_2).clone();
        // Augmented inputs are the concatenations with the global feature.
        for r in 0..n {
            assert_eq!(&f1p.row(r)[..3], f1v.row(r));
            assert_eq!(&f1p.row(r)[3..], gv.row(r));
        }
        // Elementwise convexity: each output lies between the inputs.
        for i in 0..out.data.len() {
            let (lo, hi) = if f1p.data[i] <= f2p.data[i] {
                (f1p.data[i], f2p.data[i])
            } else {
                (f2p.data[i], f1p.data[i])
            };
            assert!(out.data[i] >= lo - 1e-12 && out.data[i] <= hi + 1e-12);
        }

        // Equal inputs: the blend returns the augmented input exactly.
        let mut tape2 = Tape::new();
        let mn2 = TffNodes {
            branch1: tape2.leaf(module.branch1.clone()),
            branch2: tape2.leaf(module.branch2.clone()),
            gate1: tape2.leaf(module.gate1.clone()),
            gate1_bias: tape2.leaf(module.gate1_bias.clone()),
            gate2: tape2.leaf(module.gate2.clone()),
            gate2_bias: tape2.leaf(module.gate2_bias.clone()),
        };
        let pos_node2 = tape2.leaf(Tensor::from_vec3s(&pos));
        let fa = tape2.leaf(f1v.clone());
        let fb = tape2.leaf(f1v.clone());
        let g2 = tape2.leaf(gv.clone());
        let fused2 =
            fuse_same_set(&mut tape2, &mn2, fa, fb, Some(g2), pos_node2, &plan, "test").unwrap();
        let out2 = tape2.value(fused2.out).clone();
        let f1p2 = tape2.value(fused2.blended_1).clone();
        for (o, e) in out2.data.iter().zip(&f1p2.data) {
            assert!((o - e).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_fluid_rejected() {
        let params = NetworkParams::init(NetworkConfig::tiny(), 61).unwrap();
        let boundary = toy_boundary(3, 15);
        let r = params.predict(&[], &[], &boundary, RADIUS);
        assert!(matches!(r, Err(Error::RejectedInput(_))));
    }

    #[test]
    fn non_finite_input_names_the_stage() {
        let params = NetworkParams::init(NetworkConfig::tiny(), 71).unwrap();
        let (mut pos, vel) = toy_fluid(4, 16);
        let boundary = toy_boundary(3, 17);
        pos[2].y = f64::NAN;
        // The neighbor index rejects non-finite positions before any
        // network stage runs; non-finite velocities reach the stage check.
        assert!(params.predict(&pos, &vel, &boundary, RADIUS).is_err());
        let (pos, mut vel) = toy_fluid(4, 16);
        vel[1].x = f64::INFINITY;
        let err = params.predict(&pos, &vel, &boundary, RADIUS).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("input velocities"), "unexpected error: {msg}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 81).unwrap();
        randomize_head(&mut params, 82);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        params.save_checkpoint(&path).unwrap();
        let loaded = NetworkParams::load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        // Bitwise: compare raw f64 bits, not just values.
        for ((_, a), (_, b)) in params.named_params().iter().zip(loaded.named_params()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_bad_version_and_truncation() {
        let params = NetworkParams::init(NetworkConfig::tiny(), 91).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        params.save_checkpoint(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        let vpath = dir.path().join("wrong_version.ckpt");
        std::fs::write(&vpath, &wrong_version).unwrap();
        assert!(matches!(
            NetworkParams::load_checkpoint(&vpath),
            Err(Error::Version { found: 99, .. })
        ));

        let tpath = dir.path().join("truncated.ckpt");
        std::fs::write(&tpath, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            NetworkParams::load_checkpoint(&tpath),
            Err(Error::Corrupt { .. })
        ));

        let mpath = dir.path().join("bad_magic.ckpt");
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        std::fs::write(&mpath, &bad_magic).unwrap();
        assert!(matches!(
            NetworkParams::load_checkpoint(&mpath),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn global_feature_is_permutation_invariant_mean() {
        // Identical features: the pooled vector equals the per-particle
        // dense transform; two particles: the mean of their transforms.
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let w = Tensor::from_rows(
            4,
            2,
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = Tensor::from_rows(1, 2, vec![0.3, -0.2]).unwrap();
        let u = [0.5, -1.0, 2.0, 1.0];
        let v = [1.5, 0.25, -0.75, 1.0];
        let dense = |x: &[f64]| -> Vec<f64> {
            (0..2)
                .map(|c| {
                    b.data[c] + (0..4).map(|k| x[k] * w.data[k * 2 + c]).sum::<f64>()
                })
                .collect()
        };
        let mut tape = Tape::new();
        let wl = tape.leaf(w.clone());
        let bl = tape.leaf(b.clone());
        let feats = tape.leaf(Tensor::from_rows(2, 4, [u, v].concat()).unwrap());
        let t = tape.matmul(feats, wl).unwrap();
        let t = tape.add_bias(t, bl).unwrap();
        let pooled = tape.mean_rows(t).unwrap();
        let got = tape.value(pooled).data.clone();
        let du = dense(&u);
        let dv = dense(&v);
        for c in 0..2 {
            let want = 0.5 * (du[c] + dv[c]);
            assert!((got[c] - want).abs() < 1e-12);
        }
        // Swapped order pools to the same vector.
        let mut tape2 = Tape::new();
        let wl2 = tape2.leaf(w);
        let bl2 = tape2.leaf(b);
        let feats2 = tape2.leaf(Tensor::from_rows(2, 4, [v, u].concat()).unwrap());
        let t2 = tape2.matmul(feats2, wl2).unwrap();
        let t2 = tape2.add_bias(t2, bl2).unwrap();
        let pooled2 = tape2.mean_rows(t2).unwrap();
        assert_eq!(got, tape2.value(pooled2).data);
    }

    /// Plain-f64 re-implementation of the forward pass using only the
    /// convolution free functions and hand-written dense math; no tape.
    struct Scratch<'a> {
        p: &'a NetworkParams,
        fluid: Vec<Vec3>,
        boundary: Vec<Vec3>,
        radius: f64,
    }

    impl<'a> Scratch<'a> {
        fn dense(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
            let cin = w.rows;
            let cout = w.cols;
            let mut out = vec![0.0; rows * cout];
            for r in 0..rows {
                for c in 0..cout {
                    let mut acc = b.data[c];
                    for k in 0..cin {
                        acc += x[r * cin + k] * w.data[k * cout + c];
                    }
                    out[r * cout + c] = acc;
                }
            }
            out
        }

        fn concat(a: &[f64], ca: usize, b: &[f64], cb: usize, rows: usize) -> Vec<f64> {
            let mut out = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
                out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
            }
            out
        }

        // Brute-force neighbor counts of the fluid queries against `sources`
        // (closed ball, floored at one), used to normalize conv responses.
        fn counts(&self, sources: &[Vec3]) -> Vec<f64> {
            self.fluid
                .iter()
                .map(|q| {
                    sources
                        .iter()
                        .filter(|s| (**s - *q).norm() <= self.radius)
                        .count()
                        .max(1) as f64
                })
                .collect()
        }

        fn normalize(&self, mut out: Vec<f64>, sources: &[Vec3], cout: usize) -> Vec<f64> {
            let counts = self.counts(sources);
            for (r, c) in counts.iter().enumerate() {
                for v in &mut out[r * cout..(r + 1) * cout] {
                    *v /= c;
                }
            }
            out
        }

        fn conv(
            &self,
            feats: &[f64],
            sources: &[Vec3],
            kernel: &Tensor,
            cin: usize,
        ) -> Vec<f64> {
            let grid = KernelGrid::from_values(cin, kernel.cols, kernel.data.clone()).unwrap();
            let out = cconv_eval(feats, sources, &self.fluid, &grid, self.radius).unwrap();
            self.normalize(out, sources, kernel.cols)
        }

        fn fuse_same(
            &self,
            m: &TffModule,
            f1p: &[f64],
            f2p: &[f64],
            width: usize,
        ) -> (Vec<f64>, Vec<f64>) {
            let b1 = self.conv(f1p, &self.fluid, &m.branch1, width);
            let b2 = self.conv(f2p, &self.fluid, &m.branch2, width);
            let omega = self.gate(m, &b1, &b2);
            // m.out == width at every same-set site, so the blend is direct.
            assert_eq!(m.out, width);
            let blended = (0..f1p.len())
                .map(|i| omega[i] * f1p[i] + (1.0 - omega[i]) * f2p[i])
                .collect();
            (blended, omega)
        }

        fn gate(&self, m: &TffModule, b1: &[f64], b2: &[f64]) -> Vec<f64> {
            let n = self.fluid.len();
            let cat = Scratch::concat(b1, m.hidden, b2, m.hidden, n);
            let z1 = self.conv(&cat, &self.fluid, &m.gate1, 2 * m.hidden);
            let z1: Vec<f64> = z1
                .iter()
                .enumerate()
                .map(|(i, v)| (v + m.gate1_bias.data[i % m.hidden]).max(0.0))
                .collect();
            let z2 = self.conv(&z1, &self.fluid, &m.gate2, m.hidden);
            z2.iter()
                .enumerate()
                .map(|(i, v)| {
                    let z = v + m.gate2_bias.data[i % m.out];
                    1.0 / (1.0 + (-z).exp())
                })
                .collect()
        }

        fn run(&self, vel: &[Vec3], boundary_feat: &[f64]) -> Vec<Vec3> {
            let p = self.p;
            let g = p.config.global_width;
            let n = self.fluid.len();
            let nb = self.boundary.len();
            // Input features.
            let mut fluid_feat = Vec::with_capacity(n * 4);
            for v in vel {
                fluid_feat.extend_from_slice(&v.to_array());
                fluid_feat.push(1.0);
            }
            // Global feature.
            let gf = Scratch::dense(&fluid_feat, n, &p.global_weight, &p.global_bias);
            let mut pooled = vec![0.0; g];
            for r in 0..n {
                for c in 0..g {
                    pooled[c] += gf[r * g + c] / n as f64;
                }
            }
            let f_fc: Vec<f64> = (0..n).flat_map(|_| pooled.clone()).collect();
            let f_fc_b: Vec<f64> = (0..nb).flat_map(|_| pooled.clone()).collect();

            // Type fusions.
            let mut features = fluid_feat;
            let mut width = 4;
            for m in &p.type_tff {
                let f1p = Scratch::concat(&features, width, &f_fc, g, n);
                let f2p = Scratch::concat(boundary_feat, 4, &f_fc_b, g, nb);
                let b1 = self.conv(&f1p, &self.fluid, &m.branch1, width + g);
                let grid2 =
                    KernelGrid::from_values(4 + g, m.hidden, m.branch2.data.clone()).unwrap();
                let b2 =
                    cconv_eval(&f2p, &self.boundary, &self.fluid, &grid2, self.radius).unwrap();
                let b2 = self.normalize(b2, &self.boundary, m.hidden);
                let omega = self.gate(m, &b1, &b2);
                features = (0..b1.len())
                    .map(|i| omega[i] * b1[i] + (1.0 - omega[i]) * b2[i])
                    .collect();
                width = m.out;
            }

            // Layers with the residual fusion.
            let mut layer_outputs: Vec<(Vec<f64>, usize)> = Vec::new();
            for l in 0..5 {
                let layer = &p.layers[l];
                let m = &p.main_tff[l];
                let w = layer.width;
                let c = self.conv(&features, &self.fluid, &layer.cconv, layer.cin);
                let anti = AntisymKernelGrid::from_free(
                    layer.cin,
                    w,
                    layer.ascc_free.data.clone(),
                )
                .unwrap();
                let a = ascc_eval(
                    &features,
                    &features,
                    &self.fluid,
                    &self.fluid,
                    &anti,
                    self.radius,
                )
                .unwrap();
                // Uniform inverse-mean-count scale, matching the network's
                // momentum-preserving normalization of the antisymmetric path.
                let mean_count =
                    self.counts(&self.fluid).iter().sum::<f64>() / n as f64;
                let a: Vec<f64> = a.iter().map(|v| v / mean_count).collect();
                let fc = Scratch::dense(&features, n, &layer.fc_weight, &layer.fc_bias);
                let f1p = Scratch::concat(&c, w, &f_fc, g, n);
                let f2p = Scratch::concat(&a, w, &f_fc, g, n);
                let (first, _) = self.fuse_same(m, &f1p, &f2p, w + g);
                let (second, _) = self.fuse_same(m, &first, &fc, w + g);
                features = second.iter().map(|v| v.max(0.0)).collect();
                width = w + g;
                layer_outputs.push((features.clone(), width));

                if l == 3 {
                    let (l2, w2) = layer_outputs[1].clone();
                    let (l4, w4) = layer_outputs[3].clone();
                    assert_eq!(w2, w4);
                    let f1p = Scratch::concat(&l2, w2, &f_fc, g, n);
                    let f2p = Scratch::concat(&l4, w4, &f_fc, g, n);
                    let (res, _) = self.fuse_same(&p.res_tff, &f1p, &f2p, w2 + g);
                    features = res;
                }
            }

            let zero_bias = Tensor::zeros(1, 3);
            let head = Scratch::dense(&features, n, &p.output_head, &zero_bias);
            (0..n)
                .map(|r| vec3(head[r * 3], head[r * 3 + 1], head[r * 3 + 2]))
                .collect()
        }
    }

    #[test]
    fn forward_matches_scratch_implementation() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 111).unwrap();
        randomize_head(&mut params, 112);
        let (pos, vel) = toy_fluid(3, 18);
        let boundary = toy_boundary(4, 19);
        let got = params.predict(&pos, &vel, &boundary, RADIUS).unwrap();
        let scratch = Scratch {
            p: &params,
            fluid: pos,
            boundary: boundary.positions.clone(),
            radius: RADIUS,
        };
        let bfeat = boundary_features(&boundary);
        let want = scratch.run(&vel, &bfeat.data);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!(
                (*g - *w).norm() < 1e-10,
                "scratch mismatch: {g:?} vs {w:?}"
            );
        }
        // The head is random, so the outputs should be nontrivial.
        assert!(got.iter().any(|d| d.norm() > 1e-8));
    }

    #[test]
    fn gradients_flow_to_every_parameter_leaf() {
        let mut params = NetworkParams::init(NetworkConfig::tiny(), 121).unwrap();
        randomize_head(&mut params, 122);
        let (pos, vel) = toy_fluid(5, 20);
        let boundary = toy_boundary(4, 23);
        let mut tape = Tape::new();
        let nodes = params.leaves(&mut tape).unwrap();
        let p = tape.leaf(Tensor::from_vec3s(&pos));
        let v = tape.leaf(Tensor::from_vec3s(&vel));
        let bp = tape.leaf(Tensor::from_vec3s(&boundary.positions));
        let bf = tape.leaf(boundary_features(&boundary));
        let (dx, _) = forward_on_tape(&mut tape, &nodes, p, v, bp, bf, RADIUS).unwrap();
        let norms = tape.norm_rows(dx);
        let loss = tape.sum_all(norms);
        tape.backward(loss).unwrap();
        let named = params.named_params();
        assert_eq!(nodes.leaf_ids.len(), named.len());
        let mut touched = 0;
        for (id, (name, t)) in nodes.leaf_ids.iter().zip(&named) {
            let g = tape.grad(*id);
            assert_eq!(g.rows, t.rows, "grad shape for {name}");
            assert_eq!(g.cols, t.cols, "grad shape for {name}");
            if g.data.iter().any(|v| *v != 0.0) {
                touched += 1;
            }
        }
        // Most parameters receive gradient signal (relu/gating can zero a
        // few, but never the majority).
        assert!(
            touched * 2 > named.len(),
            "only {touched} of {} parameters received gradients",
            named.len()
        );
    }
}
