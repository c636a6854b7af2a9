//! Annealed sampling. The tempered model `p^gamma` (gamma = 1/T^2) is
//! reparameterized through the flow inverse `g` so the MCMC target is
//!
//! `log pi(z) = gamma * log N(z; 0, I) + (1 - gamma) * log |det H(z)|`
//!
//! with `H` the Jacobian of `g`; at T=1 this is exactly the standard normal,
//! and for constant-Jacobian flows the correction term is a constant (both
//! cases short-circuit to a closed form, otherwise the log-determinant and
//! its gradient come off a taped inverse pass). Sampling is levelwise: one
//! No-U-Turn chain per level, each conditioned on the synthesis of all
//! coarser levels, exactly as the model factorizes.

use crate::autodiff::{Tape, Tensor};
use crate::flow::LevelFlow;
use crate::model::WaveletFlowModel;
use crate::wavelet::{haar_synthesize, DetailPlane, ImagePlane};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

const LN_2PI: f64 = 1.8378770664093453;
const DIVERGENCE_ENERGY: f64 = 1000.0;
const MIN_STEP_SIZE: f64 = 1e-10;

/// Temperature in (0, 1] with its annealing exponent gamma = 1/T^2 >= 1.
#[derive(Copy, Clone, Debug)]
pub struct AnnealSpec {
    temperature: f64,
    gamma: f64,
}

impl AnnealSpec {
    pub fn new(temperature: f64) -> Result<AnnealSpec> {
        if !(temperature > 0.0 && temperature <= 1.0) {
            return Err(Error::Config(format!(
                "temperature must lie in (0, 1], got {temperature}"
            )));
        }
        Ok(AnnealSpec { temperature, gamma: 1.0 / (temperature * temperature) })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

#[derive(Clone, Debug)]
pub struct NutsConfig {
    /// Transitions taken before the sample is eligible.
    pub min_steps: usize,
    /// Dual-averaging adaptation window; the step size is frozen afterwards.
    pub adapt_steps: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub initial_step_size: f64,
    pub seed: u64,
}

impl Default for NutsConfig {
    fn default() -> NutsConfig {
        NutsConfig {
            min_steps: 30,
            adapt_steps: 10,
            target_accept: 0.8,
            max_tree_depth: 10,
            initial_step_size: 0.1,
            seed: 0,
        }
    }
}

impl NutsConfig {
    fn validate(&self) -> Result<()> {
        if self.min_steps < self.adapt_steps {
            return Err(Error::Config(format!(
                "min_steps {} must be at least adapt_steps {}",
                self.min_steps, self.adapt_steps
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if self.max_tree_depth == 0 || self.initial_step_size <= 0.0 {
            return Err(Error::Config("tree depth and step size must be positive".into()));
        }
        Ok(())
    }
}

/// An unnormalized log-density with gradient over flat coordinates.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// The reparameterized annealed target for one level's flow.
pub struct AnnealedTarget<'a> {
    flow: &'a LevelFlow,
    cond: Option<Tensor>,
    shape: Vec<usize>,
    gamma: f64,
    /// Constant `log |det H|` when the flow's Jacobian is input-independent.
    constant_logdet_h: Option<f64>,
    force_taped: bool,
}

impl<'a> AnnealedTarget<'a> {
    pub fn new(
        flow: &'a LevelFlow,
        extent: usize,
        cond: Option<Tensor>,
        gamma: f64,
    ) -> Result<AnnealedTarget<'a>> {
        if gamma < 1.0 {
            return Err(Error::Config(format!("gamma must be >= 1, got {gamma}")));
        }
        let shape = vec![extent, extent, flow.config().channels];
        let constant_logdet_h = if flow.has_constant_jacobian() {
            Some(-flow.constant_log_det_per_pixel()? * (extent * extent) as f64)
        } else {
            None
        };
        Ok(AnnealedTarget { flow, cond, shape, gamma, constant_logdet_h, force_taped: false })
    }

    /// Always evaluate through the taped inverse, even when a closed form
    /// exists (used to cross-check the two paths).
    pub fn force_taped(mut self) -> Self {
        self.force_taped = true;
        self
    }

    fn dim_f(&self) -> f64 {
        self.shape.iter().product::<usize>() as f64
    }

    fn eval_analytic(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let sumsq: f64 = z.iter().map(|v| v * v).sum();
        let logn = -0.5 * self.dim_f() * LN_2PI - 0.5 * sumsq;
        let correction = match self.constant_logdet_h {
            Some(c) => (1.0 - self.gamma) * c,
            // Only reachable when gamma == 1, where the exponent vanishes.
            None => 0.0,
        };
        let value = self.gamma * logn + correction;
        let grad = z.iter().map(|v| -self.gamma * v).collect();
        (value, grad)
    }

    fn eval_taped(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let zt = Tensor::new(self.shape.clone(), z.to_vec())?;
        let zv = tape.leaf(zt);
        let cv = self.cond.as_ref().map(|c| tape.constant(c.clone()));
        let (_, logdet_h) = self.flow.inverse_taped(&mut tape, zv, cv)?;
        let zz = tape.mul(zv, zv)?;
        let sumsq = tape.sum_all(zz)?;
        let half = tape.scale(sumsq, -0.5)?;
        let logn = tape.add_const(half, -0.5 * self.dim_f() * LN_2PI)?;
        let a = tape.scale(logn, self.gamma)?;
        let b = tape.scale(logdet_h, 1.0 - self.gamma)?;
        let value = tape.add(a, b)?;
        let val = tape.value(value)?.item()?;
        let grads = tape.backward(value)?;
        let grad = grads
            .wrt(zv)
            .ok_or_else(|| Error::Tape("annealed target gradient missing".into()))?
            .data()
            .to_vec();
        Ok((val, grad))
    }
}

impl LogDensity for AnnealedTarget<'_> {
    fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        if !self.force_taped && (self.gamma == 1.0 || self.constant_logdet_h.is_some()) {
            Ok(self.eval_analytic(z))
        } else {
            self.eval_taped(z)
        }
    }
}

// ── No-U-Turn sampler ────────────────────────────────────────────────────

#[derive(Clone)]
struct Point {
    theta: Vec<f64>,
    r: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

/// One leapfrog step; non-finite targets come back with `logp = -inf` so the
/// caller registers a divergence instead of propagating NaN.
fn leapfrog<T: LogDensity + ?Sized>(target: &T, p: &Point, h: f64) -> Result<Point> {
    let d = p.theta.len();
    let mut r = p.r.clone();
    for i in 0..d {
        r[i] += 0.5 * h * p.grad[i];
    }
    let mut theta = p.theta.clone();
    for i in 0..d {
        theta[i] += h * r[i];
    }
    let (logp, grad) = match target.eval(&theta) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
        Ok(_) => (f64::NEG_INFINITY, vec![0.0; d]),
        Err(_) => (f64::NEG_INFINITY, vec![0.0; d]),
    };
    for i in 0..d {
        r[i] += 0.5 * h * grad[i];
    }
    Ok(Point { theta, r, grad, logp })
}

fn hamiltonian(p: &Point) -> f64 {
    let k: f64 = p.r.iter().map(|v| 0.5 * v * v).sum();
    -p.logp + k
}

fn uturn(minus: &Point, plus: &Point) -> bool {
    let mut dot_minus = 0.0;
    let mut dot_plus = 0.0;
    for i in 0..minus.theta.len() {
        let d = plus.theta[i] - minus.theta[i];
        dot_minus += d * minus.r[i];
        dot_plus += d * plus.r[i];
    }
    dot_minus < 0.0 || dot_plus < 0.0
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        b
    } else if b == f64::NEG_INFINITY {
        a
    } else {
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

struct Subtree {
    minus: Point,
    plus: Point,
    proposal: Point,
    log_weight: f64,
    turned: bool,
    diverged: bool,
    leapfrogs: usize,
    sum_alpha: f64,
    n_alpha: usize,
}

fn build_tree<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    from: &Point,
    dir: f64,
    depth: usize,
    h0: f64,
    eps: f64,
    rng: &mut R,
) -> Result<Subtree> {
    if depth == 0 {
        let p = leapfrog(target, from, dir * eps)?;
        let delta = hamiltonian(&p) - h0;
        let diverged = !(delta <= DIVERGENCE_ENERGY);
        let log_weight = if diverged { f64::NEG_INFINITY } else { -delta };
        let alpha = if delta.is_nan() { 0.0 } else { (-delta).exp().min(1.0) };
        return Ok(Subtree {
            minus: p.clone(),
            plus: p.clone(),
            proposal: p,
            log_weight,
            turned: false,
            diverged,
            leapfrogs: 1,
            sum_alpha: alpha,
            n_alpha: 1,
        });
    }
    let first = build_tree(target, from, dir, depth - 1, h0, eps, rng)?;
    if first.diverged || first.turned {
        return Ok(first);
    }
    let from2 = if dir > 0.0 { first.plus.clone() } else { first.minus.clone() };
    let second = build_tree(target, &from2, dir, depth - 1, h0, eps, rng)?;
    let log_weight = logaddexp(first.log_weight, second.log_weight);
    let u: f64 = rng.gen();
    let proposal = if u.ln() < second.log_weight - log_weight {
        second.proposal
    } else {
        first.proposal
    };
    let (minus, plus) = if dir > 0.0 {
        (first.minus, second.plus)
    } else {
        (second.minus, first.plus)
    };
    let turned = second.turned || uturn(&minus, &plus);
    Ok(Subtree {
        minus,
        plus,
        proposal,
        log_weight,
        turned,
        diverged: second.diverged,
        leapfrogs: first.leapfrogs + second.leapfrogs,
        sum_alpha: first.sum_alpha + second.sum_alpha,
        n_alpha: first.n_alpha + second.n_alpha,
    })
}

struct TransitionInfo {
    depth: usize,
    divergent: bool,
    accept_stat: f64,
}

fn transition<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    current: &mut Point,
    eps: f64,
    max_depth: usize,
    rng: &mut R,
) -> Result<TransitionInfo> {
    let d = current.theta.len();
    let r0: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    current.r = r0;
    let h0 = hamiltonian(current);
    let mut minus = current.clone();
    let mut plus = current.clone();
    let mut proposal = current.clone();
    let mut log_weight = 0.0f64;
    let mut depth = 0usize;
    let mut divergent = false;
    let mut sum_alpha = 0.0;
    let mut n_alpha = 0usize;
    while depth < max_depth {
        let dir: f64 = if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 };
        let from = if dir > 0.0 { plus.clone() } else { minus.clone() };
        let sub = build_tree(target, &from, dir, depth, h0, eps, rng)?;
        sum_alpha += sub.sum_alpha;
        n_alpha += sub.n_alpha;
        if sub.diverged {
            divergent = true;
            break;
        }
        if sub.turned {
            break;
        }
        let u: f64 = rng.gen();
        if u.ln() < sub.log_weight - log_weight {
            proposal = sub.proposal.clone();
        }
        log_weight = logaddexp(log_weight, sub.log_weight);
        if dir > 0.0 {
            plus = sub.plus;
        } else {
            minus = sub.minus;
        }
        depth += 1;
        if uturn(&minus, &plus) {
            break;
        }
    }
    *current = proposal;
    let accept_stat = if n_alpha == 0 { 0.0 } else { sum_alpha / n_alpha as f64 };
    Ok(TransitionInfo { depth, divergent, accept_stat })
}

/// Dual-averaging state (Hoffman & Gelman): mu = ln(10 eps0), gamma = 0.05,
/// t0 = 10, kappa = 0.75.
struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    fn new(eps0: f64) -> DualAveraging {
        DualAveraging { mu: (10.0 * eps0).ln(), h_bar: 0.0, log_eps_bar: 0.0, t: 0.0 }
    }

    fn update(&mut self, accept_stat: f64, target: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let frac = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (target - accept_stat);
        let log_eps = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let eta = self.t.powf(-KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn frozen(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub divergences: usize,
    pub mean_tree_depth: f64,
    pub accept_rate: f64,
    pub transitions: usize,
    #[serde(skip)]
    pub step_size_trace: Vec<f64>,
}

struct ChainState {
    point: Point,
    eps: f64,
    da: DualAveraging,
    divergences: usize,
    depth_sum: usize,
    alpha_sum: f64,
    transitions: usize,
    trace: Vec<f64>,
}

impl ChainState {
    fn init<T: LogDensity + ?Sized>(target: &T, z0: &[f64], cfg: &NutsConfig) -> Result<ChainState> {
        cfg.validate()?;
        if z0.len() != target.dim() {
            return Err(Error::Shape(format!(
                "chain initialized with {} coordinates for a {}-dim target",
                z0.len(),
                target.dim()
            )));
        }
        if z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampler("chain initialization is not finite".into()));
        }
        let (logp, grad) = target.eval(z0)?;
        if !logp.is_finite() {
            return Err(Error::Sampler("log-density at the chain start is not finite".into()));
        }
        Ok(ChainState {
            point: Point { theta: z0.to_vec(), r: vec![0.0; z0.len()], grad, logp },
            eps: cfg.initial_step_size,
            da: DualAveraging::new(cfg.initial_step_size),
            divergences: 0,
            depth_sum: 0,
            alpha_sum: 0.0,
            transitions: 0,
            trace: Vec::new(),
        })
    }

    fn step<T: LogDensity + ?Sized, R: Rng + ?Sized>(
        &mut self,
        target: &T,
        cfg: &NutsConfig,
        rng: &mut R,
    ) -> Result<()> {
        if self.eps < MIN_STEP_SIZE {
            return Err(Error::Sampler(format!(
                "step size underflow ({:.3e}): the sampler diverges everywhere",
                self.eps
            )));
        }
        self.trace.push(self.eps);
        let info = transition(target, &mut self.point, self.eps, cfg.max_tree_depth, rng)?;
        self.transitions += 1;
        self.depth_sum += info.depth;
        self.alpha_sum += info.accept_stat;
        if info.divergent {
            self.divergences += 1;
        }
        if self.transitions <= cfg.adapt_steps {
            self.eps = self.da.update(info.accept_stat, cfg.target_accept);
            if self.eps < MIN_STEP_SIZE {
                return Err(Error::Sampler(format!(
                    "step size underflow ({:.3e}): the sampler diverges everywhere",
                    self.eps
                )));
            }
            if self.transitions == cfg.adapt_steps {
                self.eps = self.da.frozen();
            }
        }
        Ok(())
    }

    fn stats(&self) -> ChainStats {
        ChainStats {
            step_size: self.eps,
            divergences: self.divergences,
            mean_tree_depth: self.depth_sum as f64 / self.transitions.max(1) as f64,
            accept_rate: self.alpha_sum / self.transitions.max(1) as f64,
            transitions: self.transitions,
            step_size_trace: self.trace.clone(),
        }
    }
}

/// Run a NUTS chain for `steps` transitions, returning every post-transition
/// state.
pub fn nuts_chain<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    z0: &[f64],
    steps: usize,
    cfg: &NutsConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, ChainStats)> {
    let mut chain = ChainState::init(target, z0, cfg)?;
    let mut states = Vec::with_capacity(steps);
    for _ in 0..steps {
        chain.step(target, cfg, rng)?;
        states.push(chain.point.theta.clone());
    }
    Ok((states, chain.stats()))
}

/// One-sample chain: at least `min_steps` transitions, then the next
/// transition whose proposal moves the chain is the sample.
pub fn nuts_sample_one<T: LogDensity + ?Sized, R: Rng + ?Sized>(
    target: &T,
    z0: &[f64],
    cfg: &NutsConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, ChainStats)> {
    let mut chain = ChainState::init(target, z0, cfg)?;
    for _ in 0..cfg.min_steps {
        chain.step(target, cfg, rng)?;
    }
    let limit = cfg.min_steps.saturating_mul(10).max(cfg.min_steps + 1);
    loop {
        let before = chain.point.theta.clone();
        chain.step(target, cfg, rng)?;
        if chain.point.theta != before {
            break;
        }
        if chain.transitions >= limit {
            return Err(Error::Sampler(format!(
                "no accepted proposal within {limit} transitions"
            )));
        }
    }
    Ok((chain.point.theta.clone(), chain.stats()))
}

// ── levelwise annealed sampling ──────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub step_size: f64,
    pub divergences: usize,
    pub mean_tree_depth: f64,
}

impl LevelDiagnostics {
    fn from_stats(level: usize, s: &ChainStats) -> LevelDiagnostics {
        LevelDiagnostics {
            level,
            step_size: s.step_size,
            divergences: s.divergences,
            mean_tree_depth: s.mean_tree_depth,
        }
    }
}

/// Draw one image from the annealed model: a NUTS chain per level on the
/// reparameterized target, initialized from the scaled Gaussian, conditioned
/// on the synthesis of all coarser levels.
pub fn annealed_sample<R: Rng + ?Sized>(
    model: &WaveletFlowModel,
    anneal: &AnnealSpec,
    cfg: &NutsConfig,
    rng: &mut R,
) -> Result<(ImagePlane, Vec<LevelDiagnostics>)> {
    annealed_sample_with(model, anneal, cfg, false, rng)
}

/// As [`annealed_sample`], optionally forcing the taped target evaluation
/// even where a closed form exists.
#[allow(clippy::type_complexity)]
pub fn annealed_sample_with<R: Rng + ?Sized>(
    model: &WaveletFlowModel,
    anneal: &AnnealSpec,
    cfg: &NutsConfig,
    force_taped: bool,
    rng: &mut R,
) -> Result<(ImagePlane, Vec<LevelDiagnostics>)> {
    let t = anneal.temperature();
    let gamma = anneal.gamma();
    let mut diagnostics = Vec::with_capacity(model.num_levels());
    // Base level.
    let base = model.level(0)?;
    let z_hat = base.sample_z(1, t, rng);
    let mut target = AnnealedTarget::new(base, 1, None, gamma)?;
    if force_taped {
        target = target.force_taped();
    }
    let (z, stats) = nuts_sample_one(&target, z_hat.data(), cfg, rng)?;
    diagnostics.push(LevelDiagnostics::from_stats(0, &stats));
    let x0 = base.inverse(&Tensor::new(z_hat.shape().to_vec(), z)?, None)?.0;
    let mut cur = ImagePlane::from_tensor(x0)?;
    // Detail levels.
    for i in 0..model.n() {
        let flow = model.level(i + 1)?;
        let extent = 1usize << i;
        let cond = model.normalize_cond(&cur);
        let z_hat = flow.sample_z(extent, t, rng);
        let mut target = AnnealedTarget::new(flow, extent, Some(cond.clone()), gamma)?;
        if force_taped {
            target = target.force_taped();
        }
        let (z, stats) = nuts_sample_one(&target, z_hat.data(), cfg, rng)?;
        diagnostics.push(LevelDiagnostics::from_stats(i + 1, &stats));
        let d = flow.inverse(&Tensor::new(z_hat.shape().to_vec(), z)?, Some(&cond))?.0;
        let det = DetailPlane::from_tensor(d, model.channels())?;
        cur = haar_synthesize(&cur, &det)?;
    }
    Ok((cur, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{CouplingKind, FlowConfig, LevelFlow};
    use crate::model::{LevelSpec, WaveletFlowModel};
    use crate::numcheck::{finite_diff, mean_var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn flow(
        channels: usize,
        spatial: usize,
        coupling: CouplingKind,
        cond_channels: usize,
        amplitude: f64,
        rng: &mut ChaCha12Rng,
    ) -> LevelFlow {
        let cfg = FlowConfig {
            channels,
            spatial,
            steps: 3,
            conv_channels: 8,
            residual_blocks: 1,
            coupling,
            cond_channels,
        };
        let mut f = LevelFlow::new(cfg, rng).unwrap();
        f.randomize_mixing(rng).unwrap();
        if amplitude > 0.0 {
            f.randomize(rng, amplitude).unwrap();
        }
        f
    }

    fn std_normal_logp(z: &[f64]) -> f64 {
        let d = z.len() as f64;
        -0.5 * d * LN_2PI - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn anneal_spec_validates_temperature() {
        assert!(AnnealSpec::new(0.0).is_err());
        assert!(AnnealSpec::new(1.5).is_err());
        assert!(AnnealSpec::new(-0.3).is_err());
        let a = AnnealSpec::new(1.0).unwrap();
        assert_eq!(a.gamma(), 1.0);
        let b = AnnealSpec::new(0.5).unwrap();
        assert!((b.gamma() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_one_target_is_standard_normal_even_taped() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let f = flow(2, 4, CouplingKind::Affine, 0, 0.5, &mut rng);
        let target = AnnealedTarget::new(&f, 4, None, 1.0).unwrap().force_taped();
        for _ in 0..5 {
            let z: Vec<f64> = (0..32).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let (v, g) = target.eval(&z).unwrap();
            assert!((v - std_normal_logp(&z)).abs() < 1e-8);
            for (gi, zi) in g.iter().zip(&z) {
                assert!((gi + zi).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn analytic_and_taped_paths_agree() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let f = flow(3, 2, CouplingKind::Additive, 1, 0.5, &mut rng);
        let cond = Tensor::randn(&[2, 2, 1], 1.0, &mut rng);
        let gamma = 1.0 / (0.7f64 * 0.7);
        let analytic = AnnealedTarget::new(&f, 2, Some(cond.clone()), gamma).unwrap();
        let taped = AnnealedTarget::new(&f, 2, Some(cond), gamma).unwrap().force_taped();
        for _ in 0..5 {
            let z: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let (va, ga) = analytic.eval(&z).unwrap();
            let (vt, gt) = taped.eval(&z).unwrap();
            assert!((va - vt).abs() < 1e-8, "value mismatch: {va} vs {vt}");
            for (a, t) in ga.iter().zip(&gt) {
                assert!((a - t).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn taped_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let f = flow(2, 2, CouplingKind::Affine, 2, 0.4, &mut rng);
        let cond = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);
        let gamma = 1.0 / (0.8f64 * 0.8);
        let target = AnnealedTarget::new(&f, 2, Some(cond), gamma).unwrap();
        let z: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (_, grad) = target.eval(&z).unwrap();
        let fd = finite_diff(|x| target.eval(x).map(|(v, _)| v), &z, 1e-5).unwrap();
        for (g, f) in grad.iter().zip(&fd) {
            assert!(
                crate::numcheck::rel_err(*g, *f) < 1e-4,
                "gradient {g} vs finite difference {f}"
            );
        }
    }

    #[test]
    fn reparameterization_identity_holds() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let f = flow(2, 2, CouplingKind::Affine, 0, 0.5, &mut rng);
        let gamma = 1.0 / (0.97f64 * 0.97);
        for _ in 0..5 {
            let z = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);
            let (x, logdet_h) = f.inverse(&z, None).unwrap();
            let (z2, logdet_f) = f.forward(&x, None).unwrap();
            let lhs = gamma * std_normal_logp(z2.data()) + gamma * logdet_f + logdet_h;
            let rhs = gamma * std_normal_logp(z.data()) + (1.0 - gamma) * logdet_h;
            assert!((lhs - rhs).abs() < 1e-8, "identity violated: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn nuts_recovers_standard_normal_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let f = flow(1, 4, CouplingKind::Affine, 0, 0.0, &mut rng);
        let target = AnnealedTarget::new(&f, 4, None, 1.0).unwrap();
        let cfg = NutsConfig::default();
        let z0 = vec![0.0; 16];
        let (states, stats) = nuts_chain(&target, &z0, 10_000, &cfg, &mut rng).unwrap();
        assert_eq!(states.len(), 10_000);
        assert!(stats.accept_rate > 0.5, "accept rate {}", stats.accept_rate);
        for d in 0..16 {
            let coords: Vec<f64> = states.iter().map(|s| s[d]).collect();
            let (m, v) = mean_var(&coords);
            assert!(m.abs() < 0.05, "dim {d} mean {m}");
            assert!((0.9..=1.1).contains(&v), "dim {d} var {v}");
        }
    }

    #[test]
    fn tempered_target_scales_standard_deviation() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let f = flow(1, 4, CouplingKind::Affine, 0, 0.0, &mut rng);
        let gamma = 4.0;
        let target = AnnealedTarget::new(&f, 4, None, gamma).unwrap();
        let cfg = NutsConfig::default();
        let (states, _) = nuts_chain(&target, &vec![0.0; 16], 10_000, &cfg, &mut rng).unwrap();
        let all: Vec<f64> = states.iter().flatten().copied().collect();
        let (_, v) = mean_var(&all);
        let std = v.sqrt();
        assert!((std - 0.5).abs() < 0.025, "tempered std {std}, want 0.5");
    }

    struct Quadratic;

    impl LogDensity for Quadratic {
        fn dim(&self) -> usize {
            3
        }
        fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
            let v = -0.5 * z.iter().map(|x| x * x).sum::<f64>();
            Ok((v, z.iter().map(|x| -x).collect()))
        }
    }

    #[test]
    fn leapfrog_conserves_energy_at_small_step() {
        let t = Quadratic;
        let theta = vec![0.3, -1.1, 0.7];
        let (logp, grad) = t.eval(&theta).unwrap();
        let p = Point { theta, r: vec![0.5, 0.2, -0.9], grad, logp };
        let h0 = hamiltonian(&p);
        let p2 = leapfrog(&t, &p, 1e-4).unwrap();
        assert!((hamiltonian(&p2) - h0).abs() < 1e-6);
    }

    #[test]
    fn step_size_frozen_after_adaptation() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let t = Quadratic;
        let cfg = NutsConfig { min_steps: 30, adapt_steps: 10, ..NutsConfig::default() };
        let (_, stats) = nuts_chain(&t, &[0.1, 0.2, 0.3], 200, &cfg, &mut rng).unwrap();
        let trace = &stats.step_size_trace;
        assert_eq!(trace.len(), 200);
        let frozen = trace[cfg.adapt_steps];
        for (i, eps) in trace.iter().enumerate().skip(cfg.adapt_steps) {
            assert_eq!(*eps, frozen, "step size changed after adaptation at {i}");
        }
        assert!(trace[..cfg.adapt_steps].iter().any(|e| *e != frozen));
        assert_eq!(stats.step_size, frozen);
    }

    /// A well so narrow (length scale 1e-15) that every reachable step size
    /// diverges, so adaptation must underflow.
    struct Needle;

    impl LogDensity for Needle {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
            let v = -5e29 * z.iter().map(|x| x * x).sum::<f64>();
            Ok((v, z.iter().map(|x| -1e30 * x).collect()))
        }
    }

    #[test]
    fn divergent_target_underflows_step_size() {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let t = Needle;
        let cfg = NutsConfig::default();
        let err = nuts_chain(&t, &[0.5, -0.5], 100, &cfg, &mut rng).unwrap_err();
        match err {
            Error::Sampler(msg) => assert!(msg.contains("step size"), "{msg}"),
            other => panic!("expected sampler error, got {other:?}"),
        }
    }

    #[test]
    fn nuts_sample_one_takes_min_steps_then_moves() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let t = Quadratic;
        let cfg = NutsConfig::default();
        let z0 = [2.0, -2.0, 1.0];
        let (z, stats) = nuts_sample_one(&t, &z0, &cfg, &mut rng).unwrap();
        assert!(stats.transitions > cfg.min_steps);
        assert_ne!(z.as_slice(), z0.as_slice());
    }

    /// Equal mixture of two axis-separated Gaussians in 2-D.
    struct Bimodal {
        mu: f64,
        sigma: f64,
    }

    impl Bimodal {
        fn density(&self, x: f64, y: f64) -> f64 {
            let s2 = self.sigma * self.sigma;
            let norm = 1.0 / (2.0 * std::f64::consts::PI * s2);
            let g = |cx: f64| (-((x - cx).powi(2) + y * y) / (2.0 * s2)).exp();
            0.5 * norm * (g(self.mu) + g(-self.mu))
        }
    }

    impl LogDensity for Bimodal {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
            let s2 = self.sigma * self.sigma;
            let l1 = -((z[0] - self.mu).powi(2) + z[1] * z[1]) / (2.0 * s2);
            let l2 = -((z[0] + self.mu).powi(2) + z[1] * z[1]) / (2.0 * s2);
            let v = logaddexp(l1, l2);
            let w1 = (l1 - v).exp();
            let w2 = (l2 - v).exp();
            let gx = -(w1 * (z[0] - self.mu) + w2 * (z[0] + self.mu)) / s2;
            let gy = -z[1] / s2;
            Ok((v, vec![gx, gy]))
        }
    }

    #[test]
    fn bimodal_histogram_matches_density() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let t = Bimodal { mu: 1.25, sigma: 0.5 };
        let cfg = NutsConfig::default();
        let n = 100_000;
        let (states, stats) = nuts_chain(&t, &[1.25, 0.0], n, &cfg, &mut rng).unwrap();
        assert!(stats.divergences < n / 100);
        let lo = -3.5;
        let hi = 3.5;
        let bins = 14usize;
        let w = (hi - lo) / bins as f64;
        let mut counts = vec![0.0f64; bins * bins + 1];
        for s in &states {
            let bx = ((s[0] - lo) / w).floor();
            let by = ((s[1] - lo) / w).floor();
            if bx < 0.0 || by < 0.0 || bx >= bins as f64 || by >= bins as f64 {
                counts[bins * bins] += 1.0;
            } else {
                counts[(by as usize) * bins + bx as usize] += 1.0;
            }
        }
        for c in counts.iter_mut() {
            *c /= n as f64;
        }
        // Cell masses by midpoint quadrature on an 8x8 subgrid.
        let mut mass = vec![0.0f64; bins * bins + 1];
        let sub = 8;
        let sw = w / sub as f64;
        let mut total = 0.0;
        for by in 0..bins {
            for bx in 0..bins {
                let mut m = 0.0;
                for sy in 0..sub {
                    for sx in 0..sub {
                        let x = lo + bx as f64 * w + (sx as f64 + 0.5) * sw;
                        let y = lo + by as f64 * w + (sy as f64 + 0.5) * sw;
                        m += t.density(x, y) * sw * sw;
                    }
                }
                mass[by * bins + bx] = m;
                total += m;
            }
        }
        mass[bins * bins] = (1.0 - total).max(0.0);
        let tv: f64 =
            0.5 * counts.iter().zip(&mass).map(|(c, m)| (c - m).abs()).sum::<f64>();
        assert!(tv < 0.05, "total variation {tv}");
    }

    fn identity_model(n: usize, rng: &mut ChaCha12Rng) -> WaveletFlowModel {
        let spec = LevelSpec { steps: 2, conv_channels: 4, residual_blocks: 1, ..LevelSpec::default() };
        WaveletFlowModel::new(n, 1, &vec![spec; n + 1], rng).unwrap()
    }

    #[test]
    fn annealed_sampling_scales_identity_model_pixels() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let model = identity_model(1, &mut rng);
        let cfg = NutsConfig::default();
        let collect = |temp: f64, seed: u64| -> f64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let anneal = AnnealSpec::new(temp).unwrap();
            let mut vals = Vec::new();
            for _ in 0..2000 {
                let (img, diags) = annealed_sample(&model, &anneal, &cfg, &mut rng).unwrap();
                assert_eq!(diags.len(), 2);
                vals.extend_from_slice(img.tensor().data());
            }
            let (_, v) = mean_var(&vals);
            v.sqrt()
        };
        let full = collect(1.0, 100);
        let half = collect(0.5, 101);
        let ratio = half / full;
        assert!((ratio - 0.5).abs() < 0.025, "std ratio {ratio}, want 0.5");
    }

    #[test]
    fn annealed_sampling_matches_direct_for_additive_model() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let spec = LevelSpec {
            steps: 2,
            conv_channels: 4,
            residual_blocks: 1,
            coupling: CouplingKind::Additive,
            ..LevelSpec::default()
        };
        let mut model = WaveletFlowModel::new(1, 1, &[spec.clone(), spec], &mut rng).unwrap();
        for i in 0..2 {
            model.level_mut(i).unwrap().randomize_mixing(&mut rng).unwrap();
            model.level_mut(i).unwrap().randomize(&mut rng, 0.4).unwrap();
        }
        let temp = 0.7;
        assert!(model.is_sampling_exact(temp));
        let anneal = AnnealSpec::new(temp).unwrap();
        let cfg = NutsConfig::default();
        let count = 800;
        let mut mcmc_vals = Vec::new();
        let mut direct_vals = Vec::new();
        for _ in 0..count {
            let (img, _) = annealed_sample(&model, &anneal, &cfg, &mut rng).unwrap();
            mcmc_vals.extend_from_slice(img.tensor().data());
            let img = model.sample_direct(temp, &mut rng).unwrap();
            direct_vals.extend_from_slice(img.tensor().data());
        }
        let (m1, v1) = mean_var(&mcmc_vals);
        let (m2, v2) = mean_var(&direct_vals);
        let se = (v1 / mcmc_vals.len() as f64).sqrt() + (v2 / direct_vals.len() as f64).sqrt();
        assert!((m1 - m2).abs() < 4.0 * se, "means {m1} vs {m2} (se {se})");
        let (s1, s2) = (v1.sqrt(), v2.sqrt());
        assert!((s1 - s2).abs() / s2 < 0.1, "stds {s1} vs {s2}");
    }

    #[test]
    fn diagnostics_report_every_level() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let model = identity_model(2, &mut rng);
        let anneal = AnnealSpec::new(0.97).unwrap();
        let cfg = NutsConfig::default();
        let (img, diags) = annealed_sample(&model, &anneal, &cfg, &mut rng).unwrap();
        assert_eq!(img.size(), 4);
        assert_eq!(diags.len(), 3);
        for (i, d) in diags.iter().enumerate() {
            assert_eq!(d.level, i);
            assert!(d.step_size > 0.0);
            assert!(d.mean_tree_depth > 0.0);
        }
        let json = serde_json::to_string(&diags[0]).unwrap();
        assert!(json.contains("\"level\":0"));
        assert!(json.contains("step_size"));
        assert!(json.contains("divergences"));
        assert!(json.contains("mean_tree_depth"));
    }
}
