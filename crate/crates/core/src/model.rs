//! The thickened-2D segmentation network.
//!
//! A k-slice group enters as k channels. In the multiplexed modes the
//! channels split into k/g mini-groups of g slices; a shared-weight stem
//! maps each mini-group to a quarter-resolution feature map O_d. The maps
//! are fused by channel concatenation plus two 1x1 convolutions, a residual
//! trunk turns the fused map into full-resolution features U, and a
//! per-mini-group head emits g probability maps each, concatenated back to
//! k channels. The head can optionally reinject the pre-fusion O_d as
//! slice-sensitive cues: by concatenation, by gating (elementwise product),
//! or through a channel-attention block whose output enters U as a
//! zero-initialized residual.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Real, Tensor};

/// How the head consumes trunk features and pre-fusion cues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// All k slices enter the stem as one block; no multiplexing.
    Plain,
    /// Multiplexed stem, fused trunk, plain per-group heads.
    Esm,
    /// Heads see U concatenated with the upsampled O_d plus a 1x1 conv.
    EsmConcat,
    /// Heads see U gated by a projection of the upsampled O_d.
    EsmDot,
    /// Heads see U plus a channel-attention residual queried by O_d.
    EsmSsa,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Plain,
        FusionMode::Esm,
        FusionMode::EsmConcat,
        FusionMode::EsmDot,
        FusionMode::EsmSsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Plain => "plain",
            FusionMode::Esm => "esm",
            FusionMode::EsmConcat => "esm_concat",
            FusionMode::EsmDot => "esm_dot",
            FusionMode::EsmSsa => "esm_ssa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode '{s}'")))
    }
}

/// Architecture hyperparameters. Parameter shapes are a pure function of
/// this struct.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Total slice thickness k (input channels).
    pub k: usize,
    /// Mini-group size; must divide k in multiplexed modes.
    pub g: usize,
    /// Stem width; the stem emits 2*base_width channels.
    pub base_width: usize,
    /// Channel width of the trunk output U.
    pub trunk_width: usize,
    pub fusion_mode: FusionMode,
    /// Attention operates on ssa_pool_size^2 pooled positions.
    pub ssa_pool_size: usize,
    /// Network input is k x S x S with S = input_size.
    pub input_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 9,
            g: 3,
            base_width: 16,
            trunk_width: 32,
            fusion_mode: FusionMode::EsmSsa,
            ssa_pool_size: 8,
            input_size: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.g == 0 || self.base_width == 0 || self.trunk_width == 0 {
            return Err(Error::Config(
                "k, g and channel widths must all be positive".into(),
            ));
        }
        if self.fusion_mode != FusionMode::Plain && self.k % self.g != 0 {
            return Err(Error::Config(format!(
                "mini-group size g={} must divide k={} in mode {}",
                self.g,
                self.k,
                self.fusion_mode.name()
            )));
        }
        if self.input_size < 8 || self.input_size % 4 != 0 {
            return Err(Error::Config(format!(
                "input size must be a multiple of 4 and at least 8, got {}",
                self.input_size
            )));
        }
        if self.ssa_pool_size == 0 || self.ssa_pool_size > self.input_size {
            return Err(Error::Config(format!(
                "ssa_pool_size {} outside 1..={}",
                self.ssa_pool_size, self.input_size
            )));
        }
        if self.fusion_mode == FusionMode::EsmSsa && self.ssa_pool_size > self.input_size / 4 {
            return Err(Error::Config(format!(
                "ssa_pool_size {} exceeds the quarter-resolution extent {} of the query features",
                self.ssa_pool_size,
                self.input_size / 4
            )));
        }
        Ok(())
    }

    /// Channels per stem application: g in multiplexed modes, k in plain.
    pub fn group_size(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Plain => self.k,
            _ => self.g,
        }
    }

    /// Number of stem applications per forward pass.
    pub fn group_count(&self) -> usize {
        self.k / self.group_size()
    }

    /// Channel width of each stem output O_d.
    pub fn stem_out_width(&self) -> usize {
        2 * self.base_width
    }
}

/// Network parameters plus their configuration. Parameter order is fixed by
/// construction and shared by checkpoints and the optimizer.
#[derive(Debug, Clone)]
pub struct T2DNet {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Seeds one parameter tensor from the model seed and the parameter name,
/// so shared components initialize identically across modes that share the
/// same `family` label.
fn param_rng(seed: u64, family: &str, name: &str) -> ChaCha8Rng {
    let full = format!("{family}/{name}");
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &full))
}

struct ParamBuilder {
    seed: u64,
    family: &'static str,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamBuilder {
    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t.with_grad());
    }

    /// Kernel with fan-in-scaled uniform values plus a zero bias.
    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, kh: usize, kw: usize) {
        let name = format!("{prefix}.kernel");
        let bound = 1.0 / math::sqrt((cin * kh * kw) as Real);
        let mut rng = param_rng(self.seed, self.family, &name);
        let data = (0..cout * cin * kh * kw)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.push(name, Tensor::new(vec![cout, cin, kh, kw], data).unwrap());
        self.push(format!("{prefix}.bias"), Tensor::zeros(vec![cout]));
    }

    /// All-zero kernel and bias; used where the block must start as an
    /// identity residual.
    fn conv_zero(&mut self, prefix: &str, cout: usize, cin: usize) {
        self.push(
            format!("{prefix}.kernel"),
            Tensor::zeros(vec![cout, cin, 1, 1]),
        );
        self.push(format!("{prefix}.bias"), Tensor::zeros(vec![cout]));
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), Tensor::full(vec![c], 1.0));
        self.push(format!("{prefix}.beta"), Tensor::zeros(vec![c]));
        self.push(format!("{prefix}.lambda"), Tensor::zeros(vec![2]));
    }

    fn res_block(&mut self, prefix: &str, cin: usize, cout: usize, stride: usize) {
        self.conv(&format!("{prefix}.conv1"), cout, cin, 3, 3);
        self.norm(&format!("{prefix}.norm1"), cout);
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3, 3);
        self.norm(&format!("{prefix}.norm2"), cout);
        if stride != 1 || cin != cout {
            self.conv(&format!("{prefix}.proj"), cout, cin, 1, 1);
        }
    }
}

/// Tape handles for one residual block.
pub(crate) struct ResBlockVars {
    pub conv1: (Var, Var),
    pub norm1: (Var, Var, Var),
    pub conv2: (Var, Var),
    pub norm2: (Var, Var, Var),
    pub proj: Option<(Var, Var)>,
}

/// Post-activation residual block: conv-norm-relu-conv-norm plus a shortcut
/// (1x1 projection when stride or width changes), then a final relu. With an
/// identity shortcut and zero branch weights this is the identity on
/// non-negative inputs.
pub(crate) fn res_block(tape: &mut Tape, v: &ResBlockVars, x: Var, stride: usize) -> Result<Var> {
    let y = tape.conv2d(x, v.conv1.0, v.conv1.1, stride, 1)?;
    let y = tape.switch_norm(y, v.norm1.0, v.norm1.1, v.norm1.2)?;
    let y = tape.relu(y)?;
    let y = tape.conv2d(y, v.conv2.0, v.conv2.1, 1, 1)?;
    let y = tape.switch_norm(y, v.norm2.0, v.norm2.1, v.norm2.2)?;
    let short = match v.proj {
        Some((k, b)) => tape.conv2d(x, k, b, stride, 0)?,
        None => x,
    };
    let y = tape.add(y, short)?;
    tape.relu(y)
}

impl T2DNet {
    /// Builds a network with seeded deterministic initialization.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let family = match config.fusion_mode {
            FusionMode::Plain => "plain",
            _ => "esm",
        };
        let mut pb = ParamBuilder {
            seed: config.seed,
            family,
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let gs = config.group_size();
        let m = config.group_count();
        let bw = config.base_width;
        let so = config.stem_out_width();
        let t = config.trunk_width;

        pb.conv("stem.conv", bw, gs, 3, 3);
        pb.norm("stem.norm", bw);
        pb.res_block("stem.res", bw, so, 2);

        pb.conv("fuse.convA", m * bw, m * so, 1, 1);
        pb.norm("fuse.normA", m * bw);
        pb.conv("fuse.convB", t, m * bw, 1, 1);
        pb.norm("fuse.normB", t);

        pb.res_block("trunk.res1", t, 2 * t, 2);
        pb.res_block("trunk.res2", 2 * t, 4 * t, 2);
        pb.conv("trunk.dec.conv1", t, 4 * t, 1, 1);
        pb.norm("trunk.dec.norm1", t);
        pb.conv("trunk.dec.conv2", t, t, 3, 3);
        pb.norm("trunk.dec.norm2", t);

        match config.fusion_mode {
            FusionMode::Plain | FusionMode::Esm => {}
            FusionMode::EsmConcat => pb.conv("attn.cat", t, t + so, 1, 1),
            FusionMode::EsmDot => pb.conv("attn.dot", t, so, 1, 1),
            FusionMode::EsmSsa => {
                let ca = so;
                pb.conv("ssa.preq", ca, so, 1, 1);
                pb.conv("ssa.prek", ca, t, 1, 1);
                pb.conv("ssa.phi", ca, ca, 1, 1);
                pb.conv("ssa.psi", ca, ca, 1, 1);
                pb.conv("ssa.val", ca, ca, 1, 1);
                // attention starts as an exact no-op on U
                pb.conv_zero("ssa.proj", t, ca);
                pb.norm("ssa.norm", t);
            }
        }

        for j in 0..m {
            pb.conv(&format!("head.group{j}"), gs, t, 1, 1);
        }

        Ok(T2DNet {
            config,
            names: pb.names,
            tensors: pb.tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Replaces one parameter's values; the shape must already match.
    pub fn set_tensor(&mut self, name: &str, data: Vec<Real>) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if data.len() != self.tensors[i].numel() {
            return Err(Error::Shape(format!(
                "parameter {name} wants {} values, got {}",
                self.tensors[i].numel(),
                data.len()
            )));
        }
        self.tensors[i].data = data;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape, in storage order.
    pub fn leaf_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let mut c = t.clone();
                c.requires_grad = trainable;
                c.grad = None;
                tape.leaf(c)
            })
            .collect()
    }

    fn pv(&self, params: &[Var], name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| params[i])
            .ok_or_else(|| Error::State(format!("no parameter named {name}")))
    }

    fn apply_conv(
        &self,
        tape: &mut Tape,
        params: &[Var],
        prefix: &str,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let k = self.pv(params, &format!("{prefix}.kernel"))?;
        let b = self.pv(params, &format!("{prefix}.bias"))?;
        tape.conv2d(x, k, b, stride, pad)
    }

    fn apply_norm(&self, tape: &mut Tape, params: &[Var], prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.pv(params, &format!("{prefix}.gamma"))?;
        let beta = self.pv(params, &format!("{prefix}.beta"))?;
        let lambda = self.pv(params, &format!("{prefix}.lambda"))?;
        tape.switch_norm(x, gamma, beta, lambda)
    }

    fn res_vars(&self, params: &[Var], prefix: &str, has_proj: bool) -> Result<ResBlockVars> {
        Ok(ResBlockVars {
            conv1: (
                self.pv(params, &format!("{prefix}.conv1.kernel"))?,
                self.pv(params, &format!("{prefix}.conv1.bias"))?,
            ),
            norm1: (
                self.pv(params, &format!("{prefix}.norm1.gamma"))?,
                self.pv(params, &format!("{prefix}.norm1.beta"))?,
                self.pv(params, &format!("{prefix}.norm1.lambda"))?,
            ),
            conv2: (
                self.pv(params, &format!("{prefix}.conv2.kernel"))?,
                self.pv(params, &format!("{prefix}.conv2.bias"))?,
            ),
            norm2: (
                self.pv(params, &format!("{prefix}.norm2.gamma"))?,
                self.pv(params, &format!("{prefix}.norm2.beta"))?,
                self.pv(params, &format!("{prefix}.norm2.lambda"))?,
            ),
            proj: if has_proj {
                Some((
                    self.pv(params, &format!("{prefix}.proj.kernel"))?,
                    self.pv(params, &format!("{prefix}.proj.bias"))?,
                ))
            } else {
                None
            },
        })
    }

    /// Shared stem: 3x3 stride-2 conv + norm + relu, then a stride-2
    /// residual block. Output is at quarter resolution, 2*base_width wide.
    fn stem(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let y = self.apply_conv(tape, params, "stem.conv", x, 2, 1)?;
        let y = self.apply_norm(tape, params, "stem.norm", y)?;
        let y = tape.relu(y)?;
        let v = self.res_vars(params, "stem.res", true)?;
        res_block(tape, &v, y, 2)
    }

    /// Concatenates the stem outputs, halves the channel count, projects to
    /// trunk width.
    fn fuse(&self, tape: &mut Tape, params: &[Var], os: &[Var]) -> Result<Var> {
        let cat = if os.len() == 1 {
            os[0]
        } else {
            tape.concat_channels(os)?
        };
        let y = self.apply_conv(tape, params, "fuse.convA", cat, 1, 0)?;
        let y = self.apply_norm(tape, params, "fuse.normA", y)?;
        let y = tape.relu(y)?;
        let y = self.apply_conv(tape, params, "fuse.convB", y, 1, 0)?;
        let y = self.apply_norm(tape, params, "fuse.normB", y)?;
        tape.relu(y)
    }

    /// Two stride-2 residual stages, then a decoder that returns to full
    /// input resolution.
    fn trunk(&self, tape: &mut Tape, params: &[Var], fused: Var) -> Result<Var> {
        let quarter = (tape.value(fused).shape[1], tape.value(fused).shape[2]);
        let r1 = self.res_vars(params, "trunk.res1", true)?;
        let y = res_block(tape, &r1, fused, 2)?;
        let r2 = self.res_vars(params, "trunk.res2", true)?;
        let y = res_block(tape, &r2, y, 2)?;
        let y = self.apply_conv(tape, params, "trunk.dec.conv1", y, 1, 0)?;
        let y = self.apply_norm(tape, params, "trunk.dec.norm1", y)?;
        let y = tape.relu(y)?;
        let y = tape.bilinear_upsample(y, quarter.0, quarter.1)?;
        let y = self.apply_conv(tape, params, "trunk.dec.conv2", y, 1, 1)?;
        let y = self.apply_norm(tape, params, "trunk.dec.norm2", y)?;
        let y = tape.relu(y)?;
        let s = self.config.input_size;
        tape.bilinear_upsample(y, s, s)
    }

    /// Channel attention queried by one mini-group's stem output.
    ///
    /// Both operands are pooled to ssa_pool_size^2 positions and embedded by
    /// 1x1 convs; each embedded channel, flattened over those positions, is
    /// one attention token. The affinity between query channel p and
    /// key channel q is the dot product of their embedded vectors,
    /// softmax-normalized over q; attended values are reprojected, normed,
    /// upsampled, and returned as a residual for U.
    fn ssa_residual(&self, tape: &mut Tape, params: &[Var], u: Var, o: Var) -> Result<Var> {
        let p = self.config.ssa_pool_size;
        let q = tape.adaptive_avg_pool(o, p, p)?;
        let q = self.apply_conv(tape, params, "ssa.preq", q, 1, 0)?;
        let kv = tape.adaptive_avg_pool(u, p, p)?;
        let kv = self.apply_conv(tape, params, "ssa.prek", kv, 1, 0)?;
        let ca = tape.value(q).shape[0];
        let qe = self.apply_conv(tape, params, "ssa.phi", q, 1, 0)?;
        let ke = self.apply_conv(tape, params, "ssa.psi", kv, 1, 0)?;
        let ve = self.apply_conv(tape, params, "ssa.val", kv, 1, 0)?;
        let qm = tape.reshape(qe, vec![ca, p * p])?;
        let km = tape.reshape(ke, vec![ca, p * p])?;
        let vm = tape.reshape(ve, vec![ca, p * p])?;
        let kt = tape.transpose2(km)?;
        let aff = tape.matmul(qm, kt)?;
        let att = tape.softmax_rows(aff)?;
        let y = tape.matmul(att, vm)?;
        let y = tape.reshape(y, vec![ca, p, p])?;
        let y = self.apply_conv(tape, params, "ssa.proj", y, 1, 0)?;
        let y = self.apply_norm(tape, params, "ssa.norm", y)?;
        let s = self.config.input_size;
        tape.bilinear_upsample(y, s, s)
    }

    /// Records a full forward pass with pre-placed parameter vars; returns
    /// the k x S x S probability output.
    pub fn forward_with(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var> {
        if params.len() != self.tensors.len() {
            return Err(Error::State(format!(
                "expected {} parameter vars, got {}",
                self.tensors.len(),
                params.len()
            )));
        }
        let s = self.config.input_size;
        let k = self.config.k;
        if tape.value(input).shape != [k, s, s] {
            return Err(Error::Shape(format!(
                "input must be {k}x{s}x{s}, got {:?}",
                tape.value(input).shape
            )));
        }
        let gs = self.config.group_size();
        let m = self.config.group_count();

        let mut os = Vec::with_capacity(m);
        for j in 0..m {
            let xg = if m == 1 {
                input
            } else {
                tape.slice_channels(input, j * gs, (j + 1) * gs)?
            };
            os.push(self.stem(tape, params, xg)?);
        }
        let fused = self.fuse(tape, params, &os)?;
        let u = self.trunk(tape, params, fused)?;

        let mut preds = Vec::with_capacity(m);
        for (j, &o) in os.iter().enumerate() {
            let attended = match self.config.fusion_mode {
                FusionMode::Plain | FusionMode::Esm => u,
                FusionMode::EsmConcat => {
                    let oup = tape.bilinear_upsample(o, s, s)?;
                    let cat = tape.concat_channels(&[u, oup])?;
                    self.apply_conv(tape, params, "attn.cat", cat, 1, 0)?
                }
                FusionMode::EsmDot => {
                    let oup = tape.bilinear_upsample(o, s, s)?;
                    let gate = self.apply_conv(tape, params, "attn.dot", oup, 1, 0)?;
                    tape.mul(u, gate)?
                }
                FusionMode::EsmSsa => {
                    let r = self.ssa_residual(tape, params, u, o)?;
                    tape.add(u, r)?
                }
            };
            let logits = self.apply_conv(tape, params, &format!("head.group{j}"), attended, 1, 0)?;
            preds.push(tape.sigmoid(logits)?);
        }
        if preds.len() == 1 {
            Ok(preds[0])
        } else {
            tape.concat_channels(&preds)
        }
    }

    /// Inference convenience: fresh tape, no gradients.
    pub fn predict(&self, group: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.leaf_params(&mut tape, false);
        let x = tape.leaf(group.clone());
        let out = self.forward_with(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }

    /// Copies gradients off a finished tape into the parameter tensors.
    pub fn pull_grads(&mut self, tape: &Tape, params: &[Var]) -> Result<()> {
        if params.len() != self.tensors.len() {
            return Err(Error::State(format!(
                "expected {} parameter vars, got {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (t, &v) in self.tensors.iter_mut().zip(params) {
            let g = tape.grad(v)?;
            if g.shape != t.shape {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape, t.shape
                )));
            }
            t.grad = Some(g.data);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn small_config(mode: FusionMode, k: usize) -> ModelConfig {
        ModelConfig {
            k,
            g: 3,
            base_width: 4,
            trunk_width: 8,
            fusion_mode: mode,
            ssa_pool_size: 4,
            input_size: 16,
            seed: 11,
        }
    }

    fn random_input(k: usize, s: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..k * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![k, s, s], data).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = T2DNet::build(small_config(FusionMode::EsmSsa, 6)).unwrap();
        let b = T2DNet::build(small_config(FusionMode::EsmSsa, 6)).unwrap();
        assert_eq!(a.names(), b.names());
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn parameter_shapes_are_frozen() {
        let net = T2DNet::build(small_config(FusionMode::EsmSsa, 6)).unwrap();
        let got: Vec<String> = net
            .names()
            .iter()
            .zip(net.tensors())
            .map(|(n, t)| format!("{n} {:?}", t.shape))
            .collect();
        let want = [
            "stem.conv.kernel [4, 3, 3, 3]",
            "stem.conv.bias [4]",
            "stem.norm.gamma [4]",
            "stem.norm.beta [4]",
            "stem.norm.lambda [2]",
            "stem.res.conv1.kernel [8, 4, 3, 3]",
            "stem.res.conv1.bias [8]",
            "stem.res.norm1.gamma [8]",
            "stem.res.norm1.beta [8]",
            "stem.res.norm1.lambda [2]",
            "stem.res.conv2.kernel [8, 8, 3, 3]",
            "stem.res.conv2.bias [8]",
            "stem.res.norm2.gamma [8]",
            "stem.res.norm2.beta [8]",
            "stem.res.norm2.lambda [2]",
            "stem.res.proj.kernel [8, 4, 1, 1]",
            "stem.res.proj.bias [8]",
            "fuse.convA.kernel [8, 16, 1, 1]",
            "fuse.convA.bias [8]",
            "fuse.normA.gamma [8]",
            "fuse.normA.beta [8]",
            "fuse.normA.lambda [2]",
            "fuse.convB.kernel [8, 8, 1, 1]",
            "fuse.convB.bias [8]",
            "fuse.normB.gamma [8]",
            "fuse.normB.beta [8]",
            "fuse.normB.lambda [2]",
            "trunk.res1.conv1.kernel [16, 8, 3, 3]",
            "trunk.res1.conv1.bias [16]",
            "trunk.res1.norm1.gamma [16]",
            "trunk.res1.norm1.beta [16]",
            "trunk.res1.norm1.lambda [2]",
            "trunk.res1.conv2.kernel [16, 16, 3, 3]",
            "trunk.res1.conv2.bias [16]",
            "trunk.res1.norm2.gamma [16]",
            "trunk.res1.norm2.beta [16]",
            "trunk.res1.norm2.lambda [2]",
            "trunk.res1.proj.kernel [16, 8, 1, 1]",
            "trunk.res1.proj.bias [16]",
            "trunk.res2.conv1.kernel [32, 16, 3, 3]",
            "trunk.res2.conv1.bias [32]",
            "trunk.res2.norm1.gamma [32]",
            "trunk.res2.norm1.beta [32]",
            "trunk.res2.norm1.lambda [2]",
            "trunk.res2.conv2.kernel [32, 32, 3, 3]",
            "trunk.res2.conv2.bias [32]",
            "trunk.res2.norm2.gamma [32]",
            "trunk.res2.norm2.beta [32]",
            "trunk.res2.norm2.lambda [2]",
            "trunk.res2.proj.kernel [32, 16, 1, 1]",
            "trunk.res2.proj.bias [32]",
            "trunk.dec.conv1.kernel [8, 32, 1, 1]",
            "trunk.dec.conv1.bias [8]",
            "trunk.dec.norm1.gamma [8]",
            "trunk.dec.norm1.beta [8]",
            "trunk.dec.norm1.lambda [2]",
            "trunk.dec.conv2.kernel [8, 8, 3, 3]",
            "trunk.dec.conv2.bias [8]",
            "trunk.dec.norm2.gamma [8]",
            "trunk.dec.norm2.beta [8]",
            "trunk.dec.norm2.lambda [2]",
            "ssa.preq.kernel [8, 8, 1, 1]",
            "ssa.preq.bias [8]",
            "ssa.prek.kernel [8, 8, 1, 1]",
            "ssa.prek.bias [8]",
            "ssa.phi.kernel [8, 8, 1, 1]",
            "ssa.phi.bias [8]",
            "ssa.psi.kernel [8, 8, 1, 1]",
            "ssa.psi.bias [8]",
            "ssa.val.kernel [8, 8, 1, 1]",
            "ssa.val.bias [8]",
            "ssa.proj.kernel [8, 8, 1, 1]",
            "ssa.proj.bias [8]",
            "ssa.norm.gamma [8]",
            "ssa.norm.beta [8]",
            "ssa.norm.lambda [2]",
            "head.group0.kernel [3, 8, 1, 1]",
            "head.group0.bias [3]",
            "head.group1.kernel [3, 8, 1, 1]",
            "head.group1.bias [3]",
        ];
        assert_eq!(got, want, "parameter layout drifted");
    }

    #[test]
    fn forward_shapes_and_range_hold_in_every_mode() {
        for mode in FusionMode::ALL {
            let net = T2DNet::build(small_config(mode, 6)).unwrap();
            let out = net.predict(&random_input(6, 16, 3)).unwrap();
            assert_eq!(out.shape, vec![6, 16, 16], "mode {}", mode.name());
            assert!(
                out.data.iter().all(|&v| v > 0.0 && v < 1.0),
                "mode {} output left (0,1)",
                mode.name()
            );
        }
    }

    #[test]
    fn zero_input_at_init_predicts_exactly_half() {
        // biases start at zero, so a zero input propagates zeros through
        // every conv/norm stage and the head sees zero logits.
        for mode in [FusionMode::Plain, FusionMode::Esm, FusionMode::EsmSsa] {
            let net = T2DNet::build(small_config(mode, 6)).unwrap();
            let out = net.predict(&Tensor::zeros(vec![6, 16, 16])).unwrap();
            assert!(
                out.data.iter().all(|&v| v == 0.5),
                "mode {} broke constant propagation",
                mode.name()
            );
        }
    }

    #[test]
    fn ssa_starts_as_the_identity_on_esm() {
        let esm = T2DNet::build(small_config(FusionMode::Esm, 6)).unwrap();
        let ssa = T2DNet::build(small_config(FusionMode::EsmSsa, 6)).unwrap();
        let x = random_input(6, 16, 5);
        let a = esm.predict(&x).unwrap();
        let b = ssa.predict(&x).unwrap();
        assert_eq!(a.data, b.data, "zero-initialized attention must be a no-op");
    }

    #[test]
    fn plain_and_esm_are_distinct_parameterizations() {
        let plain = T2DNet::build(small_config(FusionMode::Plain, 3)).unwrap();
        let esm = T2DNet::build(small_config(FusionMode::Esm, 3)).unwrap();
        let x = random_input(3, 16, 9);
        let a = plain.predict(&x).unwrap();
        let b = esm.predict(&x).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn stem_parameters_do_not_grow_with_k() {
        let a = T2DNet::build(small_config(FusionMode::Esm, 3)).unwrap();
        let b = T2DNet::build(small_config(FusionMode::Esm, 12)).unwrap();
        for name in a.names().iter().filter(|n| n.starts_with("stem.")) {
            let ta = a.tensor(name).unwrap();
            let tb = b.tensor(name).unwrap();
            assert_eq!(ta.shape, tb.shape, "{name}");
            assert_eq!(ta.data, tb.data, "{name}");
        }
    }

    #[test]
    fn fusion_is_order_sensitive() {
        let net = T2DNet::build(small_config(FusionMode::Esm, 6)).unwrap();
        let x = random_input(6, 16, 13);
        let mut swapped = x.clone();
        let plane = 16 * 16;
        swapped.data.rotate_left(3 * plane);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&swapped).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn attention_node_count_scales_with_group_count() {
        // one attention invocation per mini-group: the tape grows by the
        // same node count per extra group.
        let extra = |k: usize| {
            let cfg_ssa = small_config(FusionMode::EsmSsa, k);
            let cfg_esm = small_config(FusionMode::Esm, k);
            // count wiring nodes only; parameter leaves differ between the
            // modes by a fixed amount that would skew the ratio
            let count = |cfg: ModelConfig| {
                let net = T2DNet::build(cfg).unwrap();
                let mut tape = Tape::new();
                let params = net.leaf_params(&mut tape, false);
                let x = tape.leaf(random_input(k, 16, 17));
                let base = tape.len();
                net.forward_with(&mut tape, &params, x).unwrap();
                tape.len() - base
            };
            count(cfg_ssa) as isize - count(cfg_esm) as isize
        };
        let per_two_groups = extra(6);
        let per_four_groups = extra(12);
        assert!(per_two_groups > 0);
        assert_eq!(per_four_groups, 2 * per_two_groups);
    }

    #[test]
    fn residual_block_with_zero_branch_is_identity() {
        let mut tape = Tape::new();
        let c = 3;
        let x = tape.leaf(
            Tensor::new(
                vec![c, 4, 4],
                (0..c * 16).map(|i| (i % 7) as Real * 0.25).collect(),
            )
            .unwrap(),
        );
        let zeros_k = |tape: &mut Tape| tape.leaf(Tensor::zeros(vec![c, c, 3, 3]));
        let zeros_b = |tape: &mut Tape| tape.leaf(Tensor::zeros(vec![c]));
        let ones = |tape: &mut Tape| tape.leaf(Tensor::full(vec![c], 1.0));
        let lam = |tape: &mut Tape| tape.leaf(Tensor::zeros(vec![2]));
        let v = ResBlockVars {
            conv1: (zeros_k(&mut tape), zeros_b(&mut tape)),
            norm1: (ones(&mut tape), zeros_b(&mut tape), lam(&mut tape)),
            conv2: (zeros_k(&mut tape), zeros_b(&mut tape)),
            norm2: (ones(&mut tape), zeros_b(&mut tape), lam(&mut tape)),
            proj: None,
        };
        let y = res_block(&mut tape, &v, x, 1).unwrap();
        // non-negative input: the final relu passes the shortcut through
        assert_eq!(tape.value(y).data, tape.value(x).data);
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut cfg = small_config(FusionMode::Esm, 7);
        assert!(T2DNet::build(cfg.clone()).is_err(), "7 % 3 != 0");
        cfg.k = 6;
        cfg.ssa_pool_size = 5;
        cfg.fusion_mode = FusionMode::EsmSsa;
        assert!(T2DNet::build(cfg.clone()).is_err(), "pool exceeds S/4");
        cfg.ssa_pool_size = 4;
        assert!(T2DNet::build(cfg).is_ok());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = T2DNet::build(small_config(FusionMode::Esm, 6)).unwrap();
        assert!(net.predict(&Tensor::zeros(vec![6, 8, 8])).is_err());
        assert!(net.predict(&Tensor::zeros(vec![3, 16, 16])).is_err());
    }
}
