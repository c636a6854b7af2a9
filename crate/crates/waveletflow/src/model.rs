//! The full generative model over `2^n x 2^n` images: an unconditional base
//! flow on the 1x1 wavelet root plus one conditional detail flow per scale.
//! The wavelet transform is orthonormal, so the image log-density is exactly
//! the sum of the per-level flow log-densities, each level is trainable in
//! isolation, and dropping the top levels yields a valid model of the
//! low-passed image.

use crate::flow::{CouplingKind, FlowConfig, LevelFlow};
use crate::wavelet::{haar_analyze, haar_synthesize, DetailPlane, ImagePlane};
use crate::autodiff::Tensor;
use crate::{Error, Result};
use rand::Rng;

/// Architecture knobs for one level's flow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    pub steps: usize,
    pub conv_channels: usize,
    pub residual_blocks: usize,
    pub coupling: CouplingKind,
}

impl Default for LevelSpec {
    fn default() -> LevelSpec {
        LevelSpec { steps: 4, conv_channels: 32, residual_blocks: 1, coupling: CouplingKind::Affine }
    }
}

/// Wavelet flow over `2^n x 2^n` images with `channels` color channels.
/// Level 0 is the base flow on the 1x1 root; level `j >= 1` is the detail
/// flow at extent `2^(j-1)` whose synthesis output has extent `2^j`.
#[derive(Clone, Debug)]
pub struct WaveletFlowModel {
    n: usize,
    channels: usize,
    /// Exclusive upper bound of full-resolution intensities (256 for byte
    /// images). Truncation rescales this so that conditioning normalization
    /// is unchanged on the shared levels.
    intensity_max: f64,
    base: LevelFlow,
    details: Vec<LevelFlow>,
}

/// Flow architecture for model level `idx` (0 = base, `j >= 1` = the detail
/// flow producing extent `2^j`).
pub fn level_config(n: usize, channels: usize, idx: usize, spec: &LevelSpec) -> Result<FlowConfig> {
    if idx > n {
        return Err(Error::Config(format!("level index {idx} out of range for n={n}")));
    }
    let cfg = if idx == 0 {
        FlowConfig {
            channels,
            spatial: 1,
            steps: spec.steps,
            conv_channels: spec.conv_channels,
            residual_blocks: spec.residual_blocks,
            coupling: spec.coupling,
            cond_channels: 0,
        }
    } else {
        FlowConfig {
            channels: 3 * channels,
            spatial: 1 << (idx - 1),
            steps: spec.steps,
            conv_channels: spec.conv_channels,
            residual_blocks: spec.residual_blocks,
            coupling: spec.coupling,
            cond_channels: channels,
        }
    };
    Ok(cfg)
}

/// Multiplier applied to a level-`i` low-pass before the `-1` shift when it
/// conditions the detail flow at that level; see
/// [`WaveletFlowModel::normalize_cond`].
pub fn cond_scale(n: usize, intensity_max: f64, level: usize) -> f64 {
    (2f64).powi(level as i32 - n as i32) * 2.0 / intensity_max
}

/// All low-pass images `I_0 .. I_n` (by extent) and details `D_0 .. D_(n-1)`
/// of `img`, computed by repeated analysis.
pub fn pyramid_with_lows(img: &ImagePlane) -> Result<(Vec<ImagePlane>, Vec<DetailPlane>)> {
    let mut lows = vec![img.clone()];
    let mut dets = Vec::new();
    let mut cur = img.clone();
    while cur.size() > 1 {
        let (lo, de) = haar_analyze(&cur)?;
        dets.push(de);
        lows.push(lo.clone());
        cur = lo;
    }
    lows.reverse();
    dets.reverse();
    Ok((lows, dets))
}

impl WaveletFlowModel {
    /// Model of byte-scale images (intensities in `[0, 256)`).
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        channels: usize,
        specs: &[LevelSpec],
        rng: &mut R,
    ) -> Result<WaveletFlowModel> {
        WaveletFlowModel::with_intensity_max(n, channels, 256.0, specs, rng)
    }

    /// Model whose full-resolution intensities live in `[0, intensity_max)`;
    /// a model trained directly on level-`m` wavelet-scale data of a byte
    /// image uses `256 * 2^(n_orig - m)`.
    pub fn with_intensity_max<R: Rng + ?Sized>(
        n: usize,
        channels: usize,
        intensity_max: f64,
        specs: &[LevelSpec],
        rng: &mut R,
    ) -> Result<WaveletFlowModel> {
        if specs.len() != n + 1 {
            return Err(Error::Config(format!(
                "model with n={n} needs {} level specs, got {}",
                n + 1,
                specs.len()
            )));
        }
        if channels == 0 {
            return Err(Error::Config("model needs at least one channel".into()));
        }
        if !intensity_max.is_finite() || intensity_max <= 0.0 {
            return Err(Error::Config(format!(
                "intensity_max must be positive and finite, got {intensity_max}"
            )));
        }
        let base = LevelFlow::new(level_config(n, channels, 0, &specs[0])?, rng)?;
        let mut details = Vec::with_capacity(n);
        for j in 1..=n {
            details.push(LevelFlow::new(level_config(n, channels, j, &specs[j])?, rng)?);
        }
        Ok(WaveletFlowModel { n, channels, intensity_max, base, details })
    }

    pub fn intensity_max(&self) -> f64 {
        self.intensity_max
    }

    /// Scale the conditioning image at the flows' input: a low-pass image at
    /// level `i` holds values in `[0, intensity_max * 2^(n-i))`, mapped to
    /// `[-1, 1)` (for byte images this is `x * 2^(i-n) / 128 - 1`).
    pub fn normalize_cond(&self, low: &ImagePlane) -> Tensor {
        let scale = cond_scale(self.n, self.intensity_max, low.levels());
        let mut t = low.tensor().clone();
        for v in t.data_mut() {
            *v = *v * scale - 1.0;
        }
        t
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> usize {
        1 << self.n
    }

    pub fn num_levels(&self) -> usize {
        self.n + 1
    }

    /// Level 0 is the base flow; level `j >= 1` the detail flow at extent
    /// `2^(j-1)`.
    pub fn level(&self, idx: usize) -> Result<&LevelFlow> {
        if idx == 0 {
            Ok(&self.base)
        } else {
            self.details
                .get(idx - 1)
                .ok_or_else(|| Error::Config(format!("level index {idx} out of range")))
        }
    }

    pub fn level_mut(&mut self, idx: usize) -> Result<&mut LevelFlow> {
        if idx == 0 {
            Ok(&mut self.base)
        } else {
            self.details
                .get_mut(idx - 1)
                .ok_or_else(|| Error::Config(format!("level index {idx} out of range")))
        }
    }

    /// Swap in a flow for one level (e.g. loaded from a checkpoint). The
    /// architecture must match the slot exactly.
    pub fn replace_level(&mut self, idx: usize, flow: LevelFlow) -> Result<()> {
        let slot = self.level(idx)?;
        if slot.config() != flow.config() {
            return Err(Error::Checkpoint(format!(
                "level {idx} architecture mismatch: expected {:?}, got {:?}",
                slot.config(),
                flow.config()
            )));
        }
        *self.level_mut(idx)? = flow;
        Ok(())
    }

    fn check_image(&self, img: &ImagePlane) -> Result<()> {
        if img.size() != self.resolution() || img.channels() != self.channels {
            return Err(Error::Shape(format!(
                "model expects {0}x{0}x{1} images, got {2}x{2}x{3}",
                self.resolution(),
                self.channels,
                img.size(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// Per-level log-likelihood terms: `[base, detail_0, .., detail_(n-1)]`.
    pub fn log_prob_terms(&self, img: &ImagePlane) -> Result<Vec<f64>> {
        self.check_image(img)?;
        let (lows, dets) = pyramid_with_lows(img)?;
        let mut terms = Vec::with_capacity(self.n + 1);
        terms.push(self.base.log_prob(lows[0].tensor(), None)?);
        for i in 0..self.n {
            let cond = self.normalize_cond(&lows[i]);
            terms.push(self.details[i].log_prob(dets[i].tensor(), Some(&cond))?);
        }
        Ok(terms)
    }

    /// Total log-likelihood: the in-order sum of the per-level terms.
    pub fn log_prob(&self, img: &ImagePlane) -> Result<f64> {
        Ok(self.log_prob_terms(img)?.iter().sum())
    }

    /// Bits per dimension on the wavelet-scale intensity grid:
    /// `-log2 p / D` with `D` the pixel count.
    pub fn bits_per_dim(&self, img: &ImagePlane) -> Result<f64> {
        let d = img.tensor().numel() as f64;
        Ok(-self.log_prob(img)? / (d * std::f64::consts::LN_2))
    }

    /// The embedded model of `2^m x 2^m` low-passed images: the base flow and
    /// the first `m` detail flows, cloned bit-exactly.
    pub fn truncate(&self, m: usize) -> Result<WaveletFlowModel> {
        if m > self.n {
            return Err(Error::Config(format!(
                "cannot truncate model with n={} to {m} levels",
                self.n
            )));
        }
        Ok(WaveletFlowModel {
            n: m,
            channels: self.channels,
            intensity_max: self.intensity_max * (2f64).powi((self.n - m) as i32),
            base: self.base.clone(),
            details: self.details[..m].to_vec(),
        })
    }

    /// Whether direct latent-space sampling at this temperature produces
    /// exact samples of the tempered model (always true at T=1; true at
    /// other temperatures only when every level's Jacobian is constant).
    pub fn is_sampling_exact(&self, temperature: f64) -> bool {
        temperature == 1.0
            || (self.base.has_constant_jacobian()
                && self.details.iter().all(|f| f.has_constant_jacobian()))
    }

    /// Draw one image by sampling every level's latent at `temperature` and
    /// synthesizing upward. See [`is_sampling_exact`](Self::is_sampling_exact)
    /// for when this is exact rather than approximate tempering.
    pub fn sample_direct<R: Rng + ?Sized>(
        &self,
        temperature: f64,
        rng: &mut R,
    ) -> Result<ImagePlane> {
        let z = self.base.sample_z(1, temperature, rng);
        let x0 = self.base.inverse(&z, None)?.0;
        let mut cur = ImagePlane::from_tensor(x0)?;
        for i in 0..self.n {
            let cond = self.normalize_cond(&cur);
            let z = self.details[i].sample_z(1 << i, temperature, rng);
            let d = self.details[i].inverse(&z, Some(&cond))?.0;
            let det = DetailPlane::from_tensor(d, self.channels)?;
            cur = haar_synthesize(&cur, &det)?;
        }
        Ok(cur)
    }

    /// Super-resolve a wavelet-scale low-pass image from its own level up to
    /// level `to`, sampling the missing details at `temperature`. The result
    /// low-passes back to the input exactly.
    pub fn super_resolve<R: Rng + ?Sized>(
        &self,
        low: &ImagePlane,
        to: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<ImagePlane> {
        let from = low.levels();
        if to > self.n {
            return Err(Error::Config(format!(
                "target level {to} exceeds the model's {} levels",
                self.n
            )));
        }
        if from > to {
            return Err(Error::Config(format!(
                "input is already at level {from}, above the target {to}"
            )));
        }
        if low.channels() != self.channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, got {}",
                self.channels,
                low.channels()
            )));
        }
        let mut cur = low.clone();
        for i in from..to {
            let cond = self.normalize_cond(&cur);
            let z = self.details[i].sample_z(1 << i, temperature, rng);
            let d = self.details[i].inverse(&z, Some(&cond))?.0;
            let det = DetailPlane::from_tensor(d, self.channels)?;
            cur = haar_synthesize(&cur, &det)?;
        }
        Ok(cur)
    }
}
