//! Per-scale conditional normalizing flow: a stack of steps, each
//! actnorm -> invertible 1x1 channel mixing -> coupling, with a standard
//! normal base density. `log p(x) = log N(f(x)) + log |det J_f(x)|`.
//!
//! The 1x1 mixing is parameterized as `W = P * L * U'` with a fixed
//! permutation `P`, unit-lower-triangular `L`, and `U'` strictly upper plus
//! `diag(sign * exp(log_diag))`, so the log-determinant costs O(c) and the
//! inverse is two triangular solves. Couplings split channels into a
//! conditioner half `A` (first `ceil(c/2)` channels, alternating with the
//! other half on consecutive steps) and a transformed half `B`; the affine
//! variant uses `log s = tanh(raw_s)` and the additive variant has zero
//! log-determinant. The coupling network's final convolution is zero-filled,
//! so a freshly constructed flow is the identity with log-determinant zero.
//! When a split leaves either half empty (one channel), the coupling is the
//! identity and the flow's expressiveness comes from actnorm and mixing.

use crate::autodiff::{dims3, Pad, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CouplingKind {
    Affine,
    Additive,
}

impl CouplingKind {
    pub fn name(self) -> &'static str {
        match self {
            CouplingKind::Affine => "affine",
            CouplingKind::Additive => "additive",
        }
    }

    pub fn parse(s: &str) -> Result<CouplingKind> {
        match s {
            "affine" => Ok(CouplingKind::Affine),
            "additive" => Ok(CouplingKind::Additive),
            other => Err(Error::Config(format!("unknown coupling kind {other:?}"))),
        }
    }
}

/// Architecture of one level's flow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowConfig {
    pub channels: usize,
    /// Spatial extent the flow is built for; convolutions at extent 1 use
    /// 1x1 kernels, everything larger uses 3x3. Inputs of other extents are
    /// accepted (the network is fully convolutional), e.g. training patches.
    pub spatial: usize,
    pub steps: usize,
    pub conv_channels: usize,
    pub residual_blocks: usize,
    pub coupling: CouplingKind,
    /// 0 for an unconditional flow.
    pub cond_channels: usize,
}

impl FlowConfig {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("flow needs at least one channel".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("flow needs at least one step".into()));
        }
        if self.spatial == 0 || (self.spatial & (self.spatial - 1)) != 0 {
            return Err(Error::Config(format!(
                "flow spatial extent {} must be a power of two",
                self.spatial
            )));
        }
        if self.conv_channels == 0 {
            return Err(Error::Config("coupling network needs at least one channel".into()));
        }
        Ok(())
    }

    fn kernel_size(&self) -> usize {
        if self.spatial == 1 {
            1
        } else {
            3
        }
    }
}

#[derive(Clone, Debug)]
struct Actnorm {
    log_scale: Tensor,
    bias: Tensor,
}

#[derive(Clone, Debug)]
struct Mix {
    /// Permutation matrix `P` as a dense [c, c] 0/1 tensor (fixed).
    perm: Tensor,
    /// Strictly lower part learned; unit diagonal implied.
    lower: Tensor,
    /// Strictly upper part learned.
    upper: Tensor,
    log_diag: Tensor,
    /// Diagonal signs, +-1 (fixed).
    sign: Tensor,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: Tensor,
    bias: Tensor,
}

impl ConvLayer {
    fn zero(ks: usize, cin: usize, cout: usize) -> ConvLayer {
        ConvLayer { kernel: Tensor::zeros(&[ks, ks, cin, cout]), bias: Tensor::zeros(&[cout]) }
    }

    fn he<R: Rng + ?Sized>(ks: usize, cin: usize, cout: usize, rng: &mut R) -> ConvLayer {
        let fan_in = (ks * ks * cin) as f64;
        let std = (2.0 / fan_in).sqrt();
        ConvLayer {
            kernel: Tensor::randn(&[ks, ks, cin, cout], std, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

#[derive(Clone, Debug)]
struct ConvNet {
    stem: ConvLayer,
    blocks: Vec<(ConvLayer, ConvLayer)>,
    out: ConvLayer,
}

#[derive(Clone, Debug)]
struct Coupling {
    swap: bool,
    /// None when the channel split degenerates (one-channel flows).
    net: Option<ConvNet>,
}

#[derive(Clone, Debug)]
struct Step {
    actnorm: Actnorm,
    mix: Mix,
    coupling: Coupling,
}

/// One level's invertible flow over `[extent, extent, channels]` tensors.
#[derive(Clone, Debug)]
pub struct LevelFlow {
    cfg: FlowConfig,
    steps: Vec<Step>,
    actnorm_initialized: bool,
}

// ── staged (taped) views ─────────────────────────────────────────────────

struct StagedNet {
    stem: (Var, Var),
    blocks: Vec<(Var, Var, Var, Var)>,
    out: (Var, Var),
}

struct StagedStep {
    an_log_scale: Var,
    an_bias: Var,
    mx_lower: Var,
    mx_upper: Var,
    mx_log_diag: Var,
    net: Option<StagedNet>,
}

/// Parameters of a `LevelFlow` recorded on a tape, plus the flat trainable
/// list in canonical visit order.
pub struct StagedLevel {
    steps: Vec<StagedStep>,
    params: Vec<(String, Var)>,
}

impl StagedLevel {
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }
}

fn split_point(c: usize) -> usize {
    c.div_ceil(2)
}

/// Channel ranges (a_from, a_to, b_from, b_to) for the conditioner half A
/// and transformed half B of a coupling.
fn coupling_ranges(c: usize, swap: bool) -> (usize, usize, usize, usize) {
    let s = split_point(c);
    if swap {
        (s, c, 0, s)
    } else {
        (0, s, s, c)
    }
}

impl LevelFlow {
    /// Identity-initialized flow: actnorm is zero scale/bias, mixing is the
    /// identity decomposition, and the coupling output convolution is zero.
    /// Hidden coupling convolutions get He-initialized weights (they do not
    /// affect the identity property) so training has gradient signal.
    pub fn new<R: Rng + ?Sized>(cfg: FlowConfig, rng: &mut R) -> Result<LevelFlow> {
        cfg.validate()?;
        let c = cfg.channels;
        let ks = cfg.kernel_size();
        let mut steps = Vec::with_capacity(cfg.steps);
        for i in 0..cfg.steps {
            let swap = i % 2 == 1;
            let (af, at, bf, bt) = coupling_ranges(c, swap);
            let (na, nb) = (at - af, bt - bf);
            let net = if na == 0 || nb == 0 {
                None
            } else {
                let cin = na + cfg.cond_channels;
                let cout = match cfg.coupling {
                    CouplingKind::Affine => 2 * nb,
                    CouplingKind::Additive => nb,
                };
                let mut blocks = Vec::with_capacity(cfg.residual_blocks);
                for _ in 0..cfg.residual_blocks {
                    blocks.push((
                        ConvLayer::he(ks, cfg.conv_channels, cfg.conv_channels, rng),
                        ConvLayer::he(ks, cfg.conv_channels, cfg.conv_channels, rng),
                    ));
                }
                Some(ConvNet {
                    stem: ConvLayer::he(ks, cin, cfg.conv_channels, rng),
                    blocks,
                    out: ConvLayer::zero(ks, cfg.conv_channels, cout),
                })
            };
            steps.push(Step {
                actnorm: Actnorm { log_scale: Tensor::zeros(&[c]), bias: Tensor::zeros(&[c]) },
                mix: Mix {
                    perm: Tensor::eye(c),
                    lower: Tensor::zeros(&[c, c]),
                    upper: Tensor::zeros(&[c, c]),
                    log_diag: Tensor::zeros(&[c]),
                    sign: Tensor::ones(&[c]),
                },
                coupling: Coupling { swap, net },
            });
        }
        Ok(LevelFlow { cfg, steps, actnorm_initialized: false })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.actnorm_initialized
    }

    pub fn set_actnorm_initialized(&mut self, v: bool) {
        self.actnorm_initialized = v;
    }

    /// True when the Jacobian log-determinant does not depend on the input
    /// (additive couplings; actnorm and mixing are always input-independent).
    pub fn has_constant_jacobian(&self) -> bool {
        self.cfg.coupling == CouplingKind::Additive
            || self.steps.iter().all(|s| s.coupling.net.is_none())
    }

    /// Forward log-determinant for constant-Jacobian flows, per unit of
    /// spatial extent 1 (multiply by H*W for a given input).
    pub fn constant_log_det_per_pixel(&self) -> Result<f64> {
        if !self.has_constant_jacobian() {
            return Err(Error::Domain("flow's Jacobian is input-dependent".into()));
        }
        let mut ld = 0.0;
        for step in &self.steps {
            ld += step.actnorm.log_scale.data().iter().sum::<f64>();
            ld += step.mix.log_diag.data().iter().sum::<f64>();
        }
        Ok(ld)
    }

    /// Replace every mixing layer with the PLU decomposition of a fresh
    /// random orthogonal matrix (`P` stays fixed afterwards). The flow as a
    /// whole stops being the identity but stays volume-preserving in the
    /// mixing layers.
    pub fn randomize_mixing<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let c = self.cfg.channels;
        for step in &mut self.steps {
            let w = random_orthogonal(c, rng);
            step.mix = plu_decompose(&w)?;
        }
        Ok(())
    }

    /// Fully randomized flow for tests: non-identity actnorm, orthogonal-
    /// seeded mixing with perturbed log-diagonal, and perturbed coupling
    /// networks, all kernels and biases included so no pre-activation sits
    /// exactly on a relu kink. `amplitude` scales all perturbations.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, amplitude: f64) -> Result<()> {
        self.randomize_mixing(rng)?;
        let ks = self.cfg.kernel_size();
        for step in &mut self.steps {
            step.actnorm.log_scale =
                Tensor::randn(&[self.cfg.channels], 0.1 * amplitude, rng);
            step.actnorm.bias = Tensor::randn(&[self.cfg.channels], 0.3 * amplitude, rng);
            for v in step.mix.log_diag.data_mut() {
                *v += 0.1 * amplitude * rng.sample::<f64, _>(StandardNormal);
            }
            if let Some(net) = &mut step.coupling.net {
                let mut jitter = |t: &mut Tensor, std: f64| {
                    for v in t.data_mut() {
                        *v += std * rng.sample::<f64, _>(StandardNormal);
                    }
                };
                let fan = |k: &Tensor| (k.shape()[0] * k.shape()[1] * k.shape()[2]) as f64;
                let kstd = 0.2 * amplitude / fan(&net.stem.kernel).sqrt();
                jitter(&mut net.stem.kernel, kstd);
                jitter(&mut net.stem.bias, 0.1 * amplitude);
                for (c1, c2) in &mut net.blocks {
                    let s1 = 0.2 * amplitude / ((ks * ks * c1.kernel.shape()[2]) as f64).sqrt();
                    jitter(&mut c1.kernel, s1);
                    jitter(&mut c1.bias, 0.1 * amplitude);
                    let s2 = 0.2 * amplitude / ((ks * ks * c2.kernel.shape()[2]) as f64).sqrt();
                    jitter(&mut c2.kernel, s2);
                    jitter(&mut c2.bias, 0.1 * amplitude);
                }
                let cin = net.out.kernel.shape()[2];
                let cout = net.out.kernel.shape()[3];
                let std = 0.3 * amplitude / ((ks * ks * cin) as f64).sqrt();
                net.out.kernel = Tensor::randn(&[ks, ks, cin, cout], std, rng);
                net.out.bias = Tensor::randn(&[cout], 0.05 * amplitude, rng);
            }
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    /// Data-dependent actnorm initialization: each step's actnorm maps its
    /// input batch to zero mean and unit variance per channel, sequentially
    /// through the steps. Errors on a zero-variance channel.
    pub fn init_actnorm(&mut self, batch: &[Tensor], cond: &[Option<Tensor>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Train("actnorm init requires a non-empty batch".into()));
        }
        if cond.len() != batch.len() {
            return Err(Error::Train("actnorm init: cond list length mismatch".into()));
        }
        let c = self.cfg.channels;
        let mut current: Vec<Tensor> = batch.to_vec();
        for idx in 0..self.steps.len() {
            let mut mean = vec![0.0; c];
            let mut count = 0usize;
            for t in &current {
                let (h, w, _) = dims3(t)?;
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            mean[ch] += t.at3(y, x, ch);
                        }
                    }
                }
                count += h * w;
            }
            for m in &mut mean {
                *m /= count as f64;
            }
            let mut var = vec![0.0; c];
            for t in &current {
                let (h, w, _) = dims3(t)?;
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            let d = t.at3(y, x, ch) - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
            }
            for v in &mut var {
                *v /= count as f64;
            }
            let mut ls = vec![0.0; c];
            let mut b = vec![0.0; c];
            for ch in 0..c {
                if var[ch] <= 0.0 {
                    return Err(Error::Domain(format!(
                        "actnorm init: channel {ch} has zero variance"
                    )));
                }
                b[ch] = -mean[ch];
                ls[ch] = -0.5 * var[ch].ln();
            }
            self.steps[idx].actnorm.log_scale = Tensor::new(vec![c], ls)?;
            self.steps[idx].actnorm.bias = Tensor::new(vec![c], b)?;
            // Push the batch through the now-initialized step.
            let mut next = Vec::with_capacity(current.len());
            for (t, cd) in current.iter().zip(cond.iter()) {
                next.push(self.step_forward_value(idx, t, cd.as_ref())?);
            }
            current = next;
        }
        self.actnorm_initialized = true;
        Ok(())
    }

    fn step_forward_value(&self, idx: usize, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = match cond {
            Some(c) => Some(tape.constant(c.clone())),
            None => None,
        };
        let zero = tape.scalar(0.0);
        let (y, _) = self.step_forward_indexed(&mut tape, idx, &staged.steps[idx], xv, cv, zero)?;
        Ok(tape.value(y)?.clone())
    }

    // ── parameter traversal ─────────────────────────────────────────────

    /// Visit every trainable parameter in canonical order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, step) in self.steps.iter().enumerate() {
            f(&format!("step{i}.actnorm.log_scale"), &step.actnorm.log_scale);
            f(&format!("step{i}.actnorm.bias"), &step.actnorm.bias);
            f(&format!("step{i}.mix.lower"), &step.mix.lower);
            f(&format!("step{i}.mix.upper"), &step.mix.upper);
            f(&format!("step{i}.mix.log_diag"), &step.mix.log_diag);
            if let Some(net) = &step.coupling.net {
                f(&format!("step{i}.net.stem.kernel"), &net.stem.kernel);
                f(&format!("step{i}.net.stem.bias"), &net.stem.bias);
                for (j, (c1, c2)) in net.blocks.iter().enumerate() {
                    f(&format!("step{i}.net.block{j}.conv1.kernel"), &c1.kernel);
                    f(&format!("step{i}.net.block{j}.conv1.bias"), &c1.bias);
                    f(&format!("step{i}.net.block{j}.conv2.kernel"), &c2.kernel);
                    f(&format!("step{i}.net.block{j}.conv2.bias"), &c2.bias);
                }
                f(&format!("step{i}.net.out.kernel"), &net.out.kernel);
                f(&format!("step{i}.net.out.bias"), &net.out.bias);
            }
        }
    }

    /// Mutable variant of [`visit_params`], same order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, step) in self.steps.iter_mut().enumerate() {
            f(&format!("step{i}.actnorm.log_scale"), &mut step.actnorm.log_scale);
            f(&format!("step{i}.actnorm.bias"), &mut step.actnorm.bias);
            f(&format!("step{i}.mix.lower"), &mut step.mix.lower);
            f(&format!("step{i}.mix.upper"), &mut step.mix.upper);
            f(&format!("step{i}.mix.log_diag"), &mut step.mix.log_diag);
            if let Some(net) = &mut step.coupling.net {
                f(&format!("step{i}.net.stem.kernel"), &mut net.stem.kernel);
                f(&format!("step{i}.net.stem.bias"), &mut net.stem.bias);
                for (j, (c1, c2)) in net.blocks.iter_mut().enumerate() {
                    f(&format!("step{i}.net.block{j}.conv1.kernel"), &mut c1.kernel);
                    f(&format!("step{i}.net.block{j}.conv1.bias"), &mut c1.bias);
                    f(&format!("step{i}.net.block{j}.conv2.kernel"), &mut c2.kernel);
                    f(&format!("step{i}.net.block{j}.conv2.bias"), &mut c2.bias);
                }
                f(&format!("step{i}.net.out.kernel"), &mut net.out.kernel);
                f(&format!("step{i}.net.out.bias"), &mut net.out.bias);
            }
        }
    }

    /// Visit all persistent tensors: trainable parameters plus the fixed
    /// permutation and sign buffers, in a stable order for checkpoints.
    pub fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_params(&mut |name, t| f(name, t));
        for (i, step) in self.steps.iter().enumerate() {
            f(&format!("step{i}.mix.perm"), &step.mix.perm);
            f(&format!("step{i}.mix.sign"), &step.mix.sign);
        }
    }

    /// Mutable variant of [`visit_state`], same order.
    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_params_mut(&mut |name, t| f(name, t));
        for (i, step) in self.steps.iter_mut().enumerate() {
            f(&format!("step{i}.mix.perm"), &mut step.mix.perm);
            f(&format!("step{i}.mix.sign"), &mut step.mix.sign);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    // ── staging and taped execution ─────────────────────────────────────

    /// Record every parameter on `tape` (as leaves when `trainable`, else
    /// constants) and return the staged view.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedLevel {
        let mut params = Vec::new();
        let mut push = |tape: &mut Tape, name: String, t: &Tensor| -> Var {
            let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            params.push((name, v));
            v
        };
        let mut steps = Vec::with_capacity(self.steps.len());
        for (i, step) in self.steps.iter().enumerate() {
            let an_log_scale = push(tape, format!("step{i}.actnorm.log_scale"), &step.actnorm.log_scale);
            let an_bias = push(tape, format!("step{i}.actnorm.bias"), &step.actnorm.bias);
            let mx_lower = push(tape, format!("step{i}.mix.lower"), &step.mix.lower);
            let mx_upper = push(tape, format!("step{i}.mix.upper"), &step.mix.upper);
            let mx_log_diag = push(tape, format!("step{i}.mix.log_diag"), &step.mix.log_diag);
            let net = step.coupling.net.as_ref().map(|net| {
                let stem_k = push(tape, format!("step{i}.net.stem.kernel"), &net.stem.kernel);
                let stem_b = push(tape, format!("step{i}.net.stem.bias"), &net.stem.bias);
                let mut blocks = Vec::with_capacity(net.blocks.len());
                for (j, (c1, c2)) in net.blocks.iter().enumerate() {
                    let k1 = push(tape, format!("step{i}.net.block{j}.conv1.kernel"), &c1.kernel);
                    let b1 = push(tape, format!("step{i}.net.block{j}.conv1.bias"), &c1.bias);
                    let k2 = push(tape, format!("step{i}.net.block{j}.conv2.kernel"), &c2.kernel);
                    let b2 = push(tape, format!("step{i}.net.block{j}.conv2.bias"), &c2.bias);
                    blocks.push((k1, b1, k2, b2));
                }
                let out_k = push(tape, format!("step{i}.net.out.kernel"), &net.out.kernel);
                let out_b = push(tape, format!("step{i}.net.out.bias"), &net.out.bias);
                StagedNet { stem: (stem_k, stem_b), blocks, out: (out_k, out_b) }
            });
            steps.push(StagedStep { an_log_scale, an_bias, mx_lower, mx_upper, mx_log_diag, net });
        }
        StagedLevel { steps, params }
    }

    fn check_input(&self, tape: &Tape, x: Var, cond: Option<Var>) -> Result<(usize, usize)> {
        let (h, w, c) = dims3(tape.value(x)?)?;
        if h != w {
            return Err(Error::Shape(format!("flow input must be square, got {h}x{w}")));
        }
        if c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "flow expects {} channels, got {c}",
                self.cfg.channels
            )));
        }
        match (self.cfg.cond_channels, cond) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(Error::Shape("unconditional flow given conditioning input".into()))
            }
            (_, None) => {
                return Err(Error::Shape("conditional flow requires conditioning input".into()))
            }
            (cc, Some(cv)) => {
                let (ch, cw, ccc) = dims3(tape.value(cv)?)?;
                if ch != h || cw != w || ccc != cc {
                    return Err(Error::Shape(format!(
                        "conditioning shape {ch}x{cw}x{ccc} does not match input {h}x{w} with {cc} channels"
                    )));
                }
            }
        }
        Ok((h, w))
    }

    fn apply_conv(
        tape: &mut Tape,
        x: Var,
        kernel: Var,
        bias: Var,
    ) -> Result<Var> {
        let y = tape.conv2d(x, kernel, 1, Pad::SameZero)?;
        let (h, w, _) = dims3(tape.value(y)?)?;
        let b = tape.expand_hw(bias, h, w)?;
        tape.add(y, b)
    }

    fn apply_net(tape: &mut Tape, net: &StagedNet, x: Var) -> Result<Var> {
        let mut z = Self::apply_conv(tape, x, net.stem.0, net.stem.1)?;
        z = tape.relu(z)?;
        for (k1, b1, k2, b2) in &net.blocks {
            let h = Self::apply_conv(tape, z, *k1, *b1)?;
            let h = tape.relu(h)?;
            let h = Self::apply_conv(tape, h, *k2, *b2)?;
            z = tape.add(z, h)?;
        }
        z = tape.relu(z)?;
        Self::apply_conv(tape, z, net.out.0, net.out.1)
    }

    /// Reconstruct `W` on the tape from the staged PLU factors.
    fn mix_weight_on(&self, tape: &mut Tape, idx: usize, staged: &StagedStep) -> Result<Var> {
        let c = self.cfg.channels;
        let mut ml = Tensor::zeros(&[c, c]);
        let mut mu = Tensor::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..c {
                if i > j {
                    ml.data_mut()[i * c + j] = 1.0;
                } else if i < j {
                    mu.data_mut()[i * c + j] = 1.0;
                }
            }
        }
        let mask_l = tape.constant(ml);
        let mask_u = tape.constant(mu);
        let eye = tape.constant(Tensor::eye(c));
        let lm = tape.mul(staged.mx_lower, mask_l)?;
        let l_eff = tape.add(lm, eye)?;
        let um = tape.mul(staged.mx_upper, mask_u)?;
        let d = tape.exp(staged.mx_log_diag)?;
        let sign = tape.constant(self.steps[idx].mix.sign.clone());
        let ds = tape.mul(d, sign)?;
        let dmat = tape.diag_mat(ds)?;
        let u_eff = tape.add(um, dmat)?;
        let lu = tape.matmul(l_eff, u_eff)?;
        let perm = tape.constant(self.steps[idx].mix.perm.clone());
        tape.matmul(perm, lu)
    }

    fn coupling_forward_on(
        &self,
        tape: &mut Tape,
        idx: usize,
        staged: &StagedStep,
        x: Var,
        cond: Option<Var>,
        logdet: Var,
    ) -> Result<(Var, Var)> {
        let Some(net) = &staged.net else {
            return Ok((x, logdet));
        };
        let c = self.cfg.channels;
        let swap = self.steps[idx].coupling.swap;
        let (af, at, bf, bt) = coupling_ranges(c, swap);
        let nb = bt - bf;
        let xa = tape.slice_c(x, af, at)?;
        let xb = tape.slice_c(x, bf, bt)?;
        let net_in = match cond {
            Some(cv) => tape.concat_c(xa, cv)?,
            None => xa,
        };
        let raw = Self::apply_net(tape, net, net_in)?;
        let (yb, ld) = match self.cfg.coupling {
            CouplingKind::Affine => {
                let raw_s = tape.slice_c(raw, 0, nb)?;
                let t = tape.slice_c(raw, nb, 2 * nb)?;
                let log_s = tape.tanh(raw_s)?;
                let es = tape.exp(log_s)?;
                let scaled = tape.mul(xb, es)?;
                let yb = tape.add(scaled, t)?;
                let ls_sum = tape.sum_all(log_s)?;
                (yb, tape.add(logdet, ls_sum)?)
            }
            CouplingKind::Additive => (tape.add(xb, raw)?, logdet),
        };
        let y = if swap {
            tape.concat_c(yb, xa)?
        } else {
            tape.concat_c(xa, yb)?
        };
        Ok((y, ld))
    }

    /// Forward pass `f(x)` on the tape: returns `(z, log |det J_f(x)|)`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        staged: &StagedLevel,
        x: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        self.check_input(tape, x, cond)?;
        let mut cur = x;
        let mut ld = tape.scalar(0.0);
        for (idx, sstep) in staged.steps.iter().enumerate() {
            let (next, nld) = self.step_forward_indexed(tape, idx, sstep, cur, cond, ld)?;
            cur = next;
            ld = nld;
        }
        Ok((cur, ld))
    }

    fn step_forward_indexed(
        &self,
        tape: &mut Tape,
        idx: usize,
        staged: &StagedStep,
        x: Var,
        cond: Option<Var>,
        logdet: Var,
    ) -> Result<(Var, Var)> {
        let (h, w, _) = dims3(tape.value(x)?)?;
        let hw = (h * w) as f64;
        let b_hw = tape.expand_hw(staged.an_bias, h, w)?;
        let xb = tape.add(x, b_hw)?;
        let s = tape.exp(staged.an_log_scale)?;
        let s_hw = tape.expand_hw(s, h, w)?;
        let y1 = tape.mul(xb, s_hw)?;
        let ls_sum = tape.sum_all(staged.an_log_scale)?;
        let ls_term = tape.scale(ls_sum, hw)?;
        let mut ld = tape.add(logdet, ls_term)?;
        let c = self.cfg.channels;
        let wmat = self.mix_weight_on(tape, idx, staged)?;
        let wt = tape.transpose2(wmat)?;
        let kernel = tape.reshape(wt, &[1, 1, c, c])?;
        let y2 = tape.conv2d(y1, kernel, 1, Pad::Valid)?;
        let ld_sum = tape.sum_all(staged.mx_log_diag)?;
        let ld_term = tape.scale(ld_sum, hw)?;
        ld = tape.add(ld, ld_term)?;
        self.coupling_forward_on(tape, idx, staged, y2, cond, ld)
    }

    /// Inverse pass `g(y)` on the tape with parameters treated as constants:
    /// returns `(x, log |det J_g(y)|)`. The log-determinant term equals the
    /// negated forward log-determinant at `x = g(y)` and stays differentiable
    /// with respect to `y` (the input-dependent coupling terms are on tape).
    pub fn inverse_taped(
        &self,
        tape: &mut Tape,
        y: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        self.check_input(tape, y, cond)?;
        let staged = self.stage(tape, false);
        let (h, w, _) = dims3(tape.value(y)?)?;
        let hw = (h * w) as f64;
        let c = self.cfg.channels;
        let mut cur = y;
        let mut ld = tape.scalar(0.0);
        for (idx, sstep) in staged.steps.iter().enumerate().rev() {
            // coupling inverse
            if let Some(net) = &sstep.net {
                let swap = self.steps[idx].coupling.swap;
                let (af, at, bf, bt) = coupling_ranges(c, swap);
                let nb = bt - bf;
                let ya = tape.slice_c(cur, af, at)?;
                let yb = tape.slice_c(cur, bf, bt)?;
                let net_in = match cond {
                    Some(cv) => tape.concat_c(ya, cv)?,
                    None => ya,
                };
                let raw = Self::apply_net(tape, net, net_in)?;
                let xb = match self.cfg.coupling {
                    CouplingKind::Affine => {
                        let raw_s = tape.slice_c(raw, 0, nb)?;
                        let t = tape.slice_c(raw, nb, 2 * nb)?;
                        let log_s = tape.tanh(raw_s)?;
                        let neg_ls = tape.neg(log_s)?;
                        let inv_s = tape.exp(neg_ls)?;
                        let centered = tape.sub(yb, t)?;
                        let xb = tape.mul(centered, inv_s)?;
                        let ls_sum = tape.sum_all(log_s)?;
                        ld = tape.sub(ld, ls_sum)?;
                        xb
                    }
                    CouplingKind::Additive => tape.sub(yb, raw)?,
                };
                cur = if swap {
                    tape.concat_c(xb, ya)?
                } else {
                    tape.concat_c(ya, xb)?
                };
            }
            // mixing inverse via triangular solves
            let w_inv = mix_inverse_matrix(&self.steps[idx].mix)?;
            let mut kdata = vec![0.0; c * c];
            for ci in 0..c {
                for co in 0..c {
                    kdata[ci * c + co] = w_inv[co][ci];
                }
            }
            let kernel = tape.constant(Tensor::new(vec![1, 1, c, c], kdata)?);
            cur = tape.conv2d(cur, kernel, 1, Pad::Valid)?;
            let sum_ld: f64 = self.steps[idx].mix.log_diag.data().iter().sum();
            ld = tape.add_const(ld, -hw * sum_ld)?;
            // actnorm inverse
            let inv_s: Vec<f64> =
                self.steps[idx].actnorm.log_scale.data().iter().map(|v| (-v).exp()).collect();
            let inv_s = tape.constant(Tensor::new(vec![c], inv_s)?);
            let inv_s_hw = tape.expand_hw(inv_s, h, w)?;
            let scaled = tape.mul(cur, inv_s_hw)?;
            let bias = tape.constant(self.steps[idx].actnorm.bias.clone());
            let b_hw = tape.expand_hw(bias, h, w)?;
            cur = tape.sub(scaled, b_hw)?;
            let sum_ls: f64 = self.steps[idx].actnorm.log_scale.data().iter().sum();
            ld = tape.add_const(ld, -hw * sum_ls)?;
        }
        Ok((cur, ld))
    }

    /// `log p(x)` on the tape: `logN(z) + logdet` with
    /// `logN(z) = -0.5 D ln(2 pi) - 0.5 sum z^2`.
    pub fn log_prob_on(
        &self,
        tape: &mut Tape,
        staged: &StagedLevel,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let d = tape.value(x)?.numel() as f64;
        let (z, ld) = self.forward_on(tape, staged, x, cond)?;
        let zz = tape.mul(z, z)?;
        let sumsq = tape.sum_all(zz)?;
        let half = tape.scale(sumsq, -0.5)?;
        let logn = tape.add_const(half, -0.5 * d * LN_2PI)?;
        tape.add(logn, ld)
    }

    // ── plain-value wrappers ────────────────────────────────────────────

    pub fn forward(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64)> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = cond.map(|c| tape.constant(c.clone()));
        let (y, ld) = self.forward_on(&mut tape, &staged, xv, cv)?;
        Ok((tape.value(y)?.clone(), tape.value(ld)?.item()?))
    }

    pub fn inverse(&self, y: &Tensor, cond: Option<&Tensor>) -> Result<(Tensor, f64)> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let cv = cond.map(|c| tape.constant(c.clone()));
        let (x, ld) = self.inverse_taped(&mut tape, yv, cv)?;
        Ok((tape.value(x)?.clone(), tape.value(ld)?.item()?))
    }

    pub fn log_prob(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<f64> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = cond.map(|c| tape.constant(c.clone()));
        let lp = self.log_prob_on(&mut tape, &staged, xv, cv)?;
        tape.value(lp)?.item()
    }

    /// Draw `z ~ N(0, temperature^2 I)` shaped `[extent, extent, channels]`.
    pub fn sample_z<R: Rng + ?Sized>(
        &self,
        extent: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Tensor {
        Tensor::randn(&[extent, extent, self.cfg.channels], temperature, rng)
    }

    /// Draw one sample `x = g(z)`, `z ~ N(0, T^2 I)`, at the flow's native
    /// extent.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        temperature: f64,
        cond: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Tensor> {
        let z = self.sample_z(self.cfg.spatial, temperature, rng);
        Ok(self.inverse(&z, cond)?.0)
    }
}

// ── PLU helpers ──────────────────────────────────────────────────────────

fn random_orthogonal<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut m: Vec<Vec<f64>> =
        (0..c).map(|_| (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    // Gram-Schmidt with one re-orthogonalization pass for stability.
    for i in 0..c {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..c).map(|k| m[i][k] * m[j][k]).sum();
                for k in 0..c {
                    m[i][k] -= dot * m[j][k];
                }
            }
        }
        let norm: f64 = (0..c).map(|k| m[i][k] * m[i][k]).sum::<f64>().sqrt();
        for k in 0..c {
            m[i][k] /= norm;
        }
    }
    m
}

/// Decompose `w = P * L * U'` with partial pivoting; errors if singular.
fn plu_decompose(w: &[Vec<f64>]) -> Result<Mix> {
    let c = w.len();
    let mut a: Vec<Vec<f64>> = w.to_vec();
    let mut p: Vec<usize> = (0..c).collect();
    let mut lower = Tensor::zeros(&[c, c]);
    for k in 0..c {
        let mut piv = k;
        for i in k + 1..c {
            if a[i][k].abs() > a[piv][k].abs() {
                piv = i;
            }
        }
        if a[piv][k] == 0.0 {
            return Err(Error::Domain("singular matrix in PLU decomposition".into()));
        }
        a.swap(k, piv);
        p.swap(k, piv);
        for i in k + 1..c {
            let f = a[i][k] / a[k][k];
            a[i][k] = f;
            for j in k + 1..c {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    // a now holds L (strict lower, unit diag implied) and U (upper incl diag);
    // rows were permuted so that row i of LU reconstructs row p[i] of w.
    let mut upper = Tensor::zeros(&[c, c]);
    let mut log_diag = Tensor::zeros(&[c]);
    let mut sign = Tensor::ones(&[c]);
    for i in 0..c {
        for j in 0..c {
            if i > j {
                lower.data_mut()[i * c + j] = a[i][j];
            } else if i < j {
                upper.data_mut()[i * c + j] = a[i][j];
            } else {
                let d = a[i][i];
                sign.data_mut()[i] = d.signum();
                log_diag.data_mut()[i] = d.abs().ln();
            }
        }
    }
    let mut perm = Tensor::zeros(&[c, c]);
    for (i, &pi) in p.iter().enumerate() {
        // Row i of L*U' lands on row p[i] of W.
        perm.data_mut()[pi * c + i] = 1.0;
    }
    Ok(Mix { perm, lower, upper, log_diag, sign })
}

/// Dense `W` from the decomposition (used by the inverse path's oracle tests).
#[cfg(test)]
fn mix_weight_matrix(mix: &Mix) -> Vec<Vec<f64>> {
    let c = mix.log_diag.numel();
    let mut lu = vec![vec![0.0; c]; c];
    let l = |i: usize, j: usize| -> f64 {
        if i > j {
            mix.lower.data()[i * c + j]
        } else if i == j {
            1.0
        } else {
            0.0
        }
    };
    let u = |i: usize, j: usize| -> f64 {
        if i < j {
            mix.upper.data()[i * c + j]
        } else if i == j {
            mix.sign.data()[i] * mix.log_diag.data()[i].exp()
        } else {
            0.0
        }
    };
    for (i, row) in lu.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..c {
                s += l(i, k) * u(k, j);
            }
            *v = s;
        }
    }
    let mut w = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            // w[i] = sum_k perm[i][k] * lu[k]
            for k in 0..c {
                if mix.perm.data()[i * c + k] == 1.0 {
                    w[i][j] = lu[k][j];
                }
            }
        }
    }
    w
}

/// `W^{-1}` via the permutation and two triangular solves per basis vector
/// (never forms and inverts the dense `W`).
fn mix_inverse_matrix(mix: &Mix) -> Result<Vec<Vec<f64>>> {
    let c = mix.log_diag.numel();
    // p_cols[i] = k such that perm[i][k] == 1, i.e. row i of W is row k of LU.
    let mut p_cols = vec![0usize; c];
    for i in 0..c {
        let mut found = None;
        for k in 0..c {
            if mix.perm.data()[i * c + k] == 1.0 {
                found = Some(k);
                break;
            }
        }
        p_cols[i] = found
            .ok_or_else(|| Error::Checkpoint("mixing permutation matrix is malformed".into()))?;
    }
    let l = |i: usize, j: usize| -> f64 {
        if i > j {
            mix.lower.data()[i * c + j]
        } else if i == j {
            1.0
        } else {
            0.0
        }
    };
    let u = |i: usize, j: usize| -> f64 {
        if i < j {
            mix.upper.data()[i * c + j]
        } else if i == j {
            mix.sign.data()[i] * mix.log_diag.data()[i].exp()
        } else {
            0.0
        }
    };
    let mut w_inv = vec![vec![0.0; c]; c];
    for col in 0..c {
        // Solve W x = e_col: first y = P^T e_col, then L z = y, then U' x = z.
        let mut y = vec![0.0; c];
        for (i, &pc) in p_cols.iter().enumerate() {
            // (P^T e)[k] = e[i] where perm[i][k] = 1
            if i == col {
                y[pc] = 1.0;
            }
        }
        let mut z = vec![0.0; c];
        for i in 0..c {
            let mut s = y[i];
            for j in 0..i {
                s -= l(i, j) * z[j];
            }
            z[i] = s;
        }
        let mut x = vec![0.0; c];
        for i in (0..c).rev() {
            let mut s = z[i];
            for j in i + 1..c {
                s -= u(i, j) * x[j];
            }
            x[i] = s / u(i, i);
        }
        for i in 0..c {
            w_inv[i][col] = x[i];
        }
    }
    Ok(w_inv)
}
