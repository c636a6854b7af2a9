//! Per-level training: dequantization, grid-aligned patch extraction, the
//! Adamax optimizer, and an early-stopping training loop over one level's
//! flow. Levels never share parameters, so each level trains in isolation
//! and the full model is assembled afterwards.
//!
//! Determinism: every random choice (dequantization noise, shuffling, patch
//! offsets) comes from seeded ChaCha streams in a fixed order, and batch
//! gradients are computed per item (possibly in parallel) but reduced
//! sequentially in item order, so a seed pins the trained parameters bit for
//! bit regardless of thread count.

use crate::autodiff::{Tape, Tensor};
use crate::flow::LevelFlow;
use crate::io::RawImage;
use crate::model::cond_scale;
use crate::wavelet::{DetailPlane, ImagePlane};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Add i.i.d. U[0,1) noise to every 8-bit intensity (noise drawn in
/// row-major pixel order).
pub fn dequantize<R: Rng + ?Sized>(img: &RawImage, rng: &mut R) -> Result<ImagePlane> {
    if img.width != img.height {
        return Err(Error::Shape(format!(
            "image must be square, got {}x{}",
            img.width, img.height
        )));
    }
    let data: Vec<f64> = img.data.iter().map(|&b| b as f64 + rng.gen::<f64>()).collect();
    ImagePlane::new(img.width, img.channels, data)
}

/// Low-pass of a full-resolution U[0,1) noise field down to level `k`: the
/// dequantization noise consistent with evaluating a level-`k` low-pass of
/// byte data. Per-coefficient mean is `0.5 * 2^(n-k)`.
pub fn filtered_noise<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    channels: usize,
    rng: &mut R,
) -> Result<ImagePlane> {
    if k > n {
        return Err(Error::Config(format!("level {k} exceeds the pyramid depth {n}")));
    }
    let full = 1usize << n;
    let data: Vec<f64> = (0..full * full * channels).map(|_| rng.gen::<f64>()).collect();
    let noise = ImagePlane::new(full, channels, data)?;
    crate::wavelet::lowpass_to_level(&noise, k)
}

/// Dequantize a level-`k` low-pass plane of an `n`-level byte image by
/// adding [`filtered_noise`]. At `k == n` this is plain [`dequantize`].
pub fn dequantize_filtered<R: Rng + ?Sized>(
    low: &ImagePlane,
    n: usize,
    rng: &mut R,
) -> Result<ImagePlane> {
    let k = low.levels();
    let noise = filtered_noise(n, k, low.channels(), rng)?;
    let data: Vec<f64> = low
        .tensor()
        .data()
        .iter()
        .zip(noise.tensor().data())
        .map(|(a, b)| a + b)
        .collect();
    ImagePlane::new(low.size(), low.channels(), data)
}

/// Crop an aligned `(detail, cond)` patch pair at a random offset on the
/// patch grid (offsets are multiples of `patch_size`).
pub fn extract_patches<R: Rng + ?Sized>(
    detail: &DetailPlane,
    cond: &ImagePlane,
    patch_size: usize,
    rng: &mut R,
) -> Result<(DetailPlane, ImagePlane)> {
    let extent = detail.size();
    if cond.size() != extent {
        return Err(Error::Shape(format!(
            "detail extent {extent} and conditioning extent {} differ",
            cond.size()
        )));
    }
    if patch_size == 0 || patch_size > extent {
        return Err(Error::Shape(format!(
            "patch size {patch_size} invalid for extent {extent}"
        )));
    }
    if extent % patch_size != 0 {
        return Err(Error::Shape(format!(
            "patch size {patch_size} does not divide extent {extent}"
        )));
    }
    if patch_size == extent {
        return Ok((detail.clone(), cond.clone()));
    }
    let grid = extent / patch_size;
    let oy = patch_size * rng.gen_range(0..grid);
    let ox = patch_size * rng.gen_range(0..grid);
    let dc = 3 * detail.channels();
    let mut ddata = Vec::with_capacity(patch_size * patch_size * dc);
    for y in 0..patch_size {
        for x in 0..patch_size {
            for c in 0..detail.channels() {
                for o in 0..3 {
                    ddata.push(detail.at(oy + y, ox + x, c, o));
                }
            }
        }
    }
    let mut cdata = Vec::with_capacity(patch_size * patch_size * cond.channels());
    for y in 0..patch_size {
        for x in 0..patch_size {
            for c in 0..cond.channels() {
                cdata.push(cond.at(oy + y, ox + x, c));
            }
        }
    }
    Ok((
        DetailPlane::new(patch_size, detail.channels(), ddata)?,
        ImagePlane::new(patch_size, cond.channels(), cdata)?,
    ))
}

// ── optimizer ────────────────────────────────────────────────────────────

/// Adamax: `m <- b1 m + (1-b1) g`, `u <- max(b2 u, |g|)`,
/// `theta <- theta - lr / (1 - b1^t) * m / (u + eps)`.
#[derive(Clone, Debug)]
pub struct Adamax {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    u: Vec<Tensor>,
}

impl Adamax {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Adamax {
        Adamax { learning_rate, beta1, beta2, eps: 1e-8, t: 0, m: Vec::new(), u: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over parameters given gradients in the same order. Errors
    /// on a non-finite gradient (the training loop aborts rather than skips).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Train(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.u = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::Train(format!("gradient {i} shape mismatch")));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient in parameter {i}; aborting training"
                )));
            }
        }
        self.t += 1;
        let bias = 1.0 - self.beta1.powi(self.t as i32);
        let lr_t = self.learning_rate / bias;
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let u = self.u[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..g.numel() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                u[j] = (self.beta2 * u[j]).max(gj.abs());
                p[j] -= lr_t * m[j] / (u[j] + self.eps);
            }
        }
        Ok(())
    }
}

// ── level datasets ───────────────────────────────────────────────────────

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Dequant {
    /// Add U[0,1) noise per intensity (byte sources only).
    Uniform,
    /// Use source values as they are (continuous sources).
    None,
}

#[derive(Clone, Debug)]
pub enum SourceImages<'a> {
    Bytes(&'a [RawImage]),
    Planes(&'a [ImagePlane]),
}

impl SourceImages<'_> {
    pub fn len(&self) -> usize {
        match self {
            SourceImages::Bytes(v) => v.len(),
            SourceImages::Planes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Produces `(x, cond)` training pairs for one model level from full-
/// resolution images: dequantize (optionally), build the wavelet pyramid,
/// take this level's plane, and crop a grid-aligned patch.
#[derive(Clone, Debug)]
pub struct LevelSource<'a> {
    images: SourceImages<'a>,
    level: usize,
    n: usize,
    intensity_max: f64,
    dequant: Dequant,
    patch_size: usize,
}

impl<'a> LevelSource<'a> {
    pub fn new(
        images: SourceImages<'a>,
        level: usize,
        n: usize,
        intensity_max: f64,
        dequant: Dequant,
        patch_size: usize,
    ) -> Result<LevelSource<'a>> {
        if level > n {
            return Err(Error::Config(format!("level {level} out of range for n={n}")));
        }
        if level > 0 {
            let extent = 1usize << (level - 1);
            if patch_size == 0 || patch_size > extent || extent % patch_size != 0 {
                return Err(Error::Config(format!(
                    "patch size {patch_size} invalid for level extent {extent}"
                )));
            }
        }
        if matches!(images, SourceImages::Planes(_)) && dequant == Dequant::Uniform {
            return Err(Error::Config(
                "uniform dequantization applies to byte sources, not continuous planes".into(),
            ));
        }
        Ok(LevelSource { images, level, n, intensity_max, dequant, patch_size })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The level plane extent after patching.
    pub fn item_extent(&self) -> usize {
        if self.level == 0 {
            1
        } else {
            self.patch_size
        }
    }

    fn full_plane(&self, i: usize, rng: &mut ChaCha12Rng) -> Result<ImagePlane> {
        match (&self.images, self.dequant) {
            (SourceImages::Bytes(v), Dequant::Uniform) => dequantize(&v[i], rng),
            (SourceImages::Bytes(v), Dequant::None) => v[i].to_plane(),
            (SourceImages::Planes(v), _) => Ok(v[i].clone()),
        }
    }

    /// Materialize item `i`. Draws (in order) dequantization noise, then the
    /// patch row offset, then the column offset.
    pub fn item(&self, i: usize, rng: &mut ChaCha12Rng) -> Result<(Tensor, Option<Tensor>)> {
        let plane = self.full_plane(i, rng)?;
        if plane.levels() != self.n {
            return Err(Error::Shape(format!(
                "source image extent {} does not match n={}",
                plane.size(),
                self.n
            )));
        }
        let (lows, dets) = crate::model::pyramid_with_lows(&plane)?;
        if self.level == 0 {
            return Ok((lows[0].tensor().clone(), None));
        }
        let i_det = self.level - 1;
        let (dp, cp) = extract_patches(&dets[i_det], &lows[i_det], self.patch_size, rng)?;
        let scale = cond_scale(self.n, self.intensity_max, i_det);
        let mut cond = cp.into_tensor();
        for v in cond.data_mut() {
            *v = *v * scale - 1.0;
        }
        Ok((dp.into_tensor(), Some(cond)))
    }

    /// Materialize the whole dataset in index order.
    pub fn materialize_all(&self, rng: &mut ChaCha12Rng) -> Result<Vec<(Tensor, Option<Tensor>)>> {
        (0..self.len()).map(|i| self.item(i, rng)).collect()
    }
}

// ── training loop ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            epochs: 20,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll_per_dim: f64,
    pub val_nll_per_dim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_nll_per_dim: f64,
}

fn snapshot(flow: &LevelFlow) -> Vec<Tensor> {
    let mut out = Vec::new();
    flow.visit_params(&mut |_, t| out.push(t.clone()));
    out
}

fn restore(flow: &mut LevelFlow, snap: &[Tensor]) {
    let mut i = 0;
    flow.visit_params_mut(&mut |_, t| {
        *t = snap[i].clone();
        i += 1;
    });
}

/// Negative log-likelihood per dimension and its parameter gradients for one
/// item, on a fresh tape.
fn item_grad(
    flow: &LevelFlow,
    x: &Tensor,
    cond: Option<&Tensor>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let staged = flow.stage(&mut tape, true);
    let xv = tape.constant(x.clone());
    let cv = cond.map(|c| tape.constant(c.clone()));
    let lp = flow.log_prob_on(&mut tape, &staged, xv, cv)?;
    let d = x.numel() as f64;
    let loss = tape.scale(lp, -1.0 / d)?;
    let loss_val = tape.value(loss)?.item()?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::with_capacity(staged.params().len());
    for (name, v) in staged.params() {
        let g = grads
            .wrt(*v)
            .ok_or_else(|| Error::Train(format!("missing gradient for {name}")))?;
        out.push(g.clone());
    }
    Ok((loss_val, out))
}

fn mean_val_nll(flow: &LevelFlow, items: &[(Tensor, Option<Tensor>)]) -> Result<f64> {
    let vals: Vec<f64> = items
        .par_iter()
        .map(|(x, c)| -> Result<f64> {
            Ok(-flow.log_prob(x, c.as_ref())? / x.numel() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Train one level's flow by mean NLL/dim with Adamax and early stopping.
/// Returns the per-epoch history; the flow holds the best-validation
/// parameters on return.
pub fn train_level(
    flow: &mut LevelFlow,
    train: &LevelSource,
    val: &LevelSource,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::Train("training dataset is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Train("validation dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Train("batch size must be positive".into()));
    }
    if flow.config().spatial > 1 && train.item_extent() < 2 {
        return Err(Error::Train(
            "patch size must be at least 2 for levels with 3x3 convolutions".into(),
        ));
    }
    let mut master = ChaCha12Rng::seed_from_u64(cfg.seed);
    let init_seed = master.next_u64();
    let val_seed = master.next_u64();
    let epoch_seeds: Vec<u64> = (0..cfg.epochs).map(|_| master.next_u64()).collect();

    // Fresh flows get orthogonal-seeded mixing layers, then data-dependent
    // actnorm initialization from the first batch. Flows that were already
    // initialized (resumed or pre-randomized) are left untouched.
    if !flow.actnorm_initialized() {
        let mut rng = ChaCha12Rng::seed_from_u64(init_seed);
        flow.randomize_mixing(&mut rng)?;
        let count = cfg.batch_size.min(train.len());
        let mut batch = Vec::with_capacity(count);
        let mut conds = Vec::with_capacity(count);
        for i in 0..count {
            let (x, c) = train.item(i, &mut rng)?;
            batch.push(x);
            conds.push(c);
        }
        flow.init_actnorm(&batch, &conds)?;
    }

    // Fixed validation noise: materialized once, reused every epoch.
    let val_items = {
        let mut rng = ChaCha12Rng::seed_from_u64(val_seed);
        val.materialize_all(&mut rng)?
    };

    let mut opt = Adamax::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = snapshot(flow);
    let mut stale = 0usize;

    for (epoch, &eseed) in epoch_seeds.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(eseed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut items = Vec::with_capacity(order.len());
        for &i in &order {
            items.push(train.item(i, &mut rng)?);
        }
        let mut loss_sum = 0.0;
        for batch in items.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|(x, c)| item_grad(flow, x, c.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut total: Vec<Tensor> = results[0].1.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::Train("non-finite loss; aborting training".into()));
                }
                loss_sum += *loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
            for t in &mut total {
                for v in t.data_mut() {
                    *v *= scale;
                }
            }
            let mut params = snapshot(flow);
            opt.step(&mut params, &total)?;
            restore(flow, &params);
        }
        let train_nll = loss_sum / items.len() as f64;
        let val_nll = mean_val_nll(flow, &val_items)?;
        history.push(EpochStats { epoch, train_nll_per_dim: train_nll, val_nll_per_dim: val_nll });
        if val_nll < best_val {
            best_val = val_nll;
            best_epoch = epoch;
            best_params = snapshot(flow);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    restore(flow, &best_params);
    Ok(TrainHistory { epochs: history, best_epoch, best_val_nll_per_dim: best_val })
}
