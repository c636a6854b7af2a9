//! Orthonormal 2-D Haar transform and the image pyramid built from it.
//!
//! One analysis step maps an image of extent `2s` to a low-pass image of
//! extent `s` plus three detail orientations per source channel, via the four
//! stride-2 filters with entries +-1/2:
//!
//! ```text
//!   low   +.5 +.5   horiz +.5 +.5   vert +.5 -.5   diag +.5 -.5
//!         +.5 +.5         -.5 -.5        +.5 -.5        -.5 +.5
//! ```
//!
//! The transform is orthonormal, so it preserves energy, has a unit Jacobian
//! determinant, and its inverse is the transpose. The low-pass of a constant
//! image `c` is the constant `2c`: each analysis step is effectively two
//! times a box downsample.

use crate::autodiff::{dims3, Pad, Tape, Tensor, Var};
use crate::{Error, Result};

/// Filter taps in `[ky][kx]` order for (low, horizontal, vertical, diagonal).
const HAAR: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

fn is_power_of_two(n: usize) -> bool {
    n != 0 && (n & (n - 1)) == 0
}

/// Square image with power-of-two extent, values `[size, size, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    size: usize,
    channels: usize,
    data: Tensor,
}

/// Wavelet detail coefficients at one scale: three orientations per source
/// channel, ordered (horizontal, vertical, diagonal) within each channel, so
/// the tensor is `[size, size, 3 * channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailPlane {
    size: usize,
    channels: usize,
    data: Tensor,
}

impl ImagePlane {
    pub fn new(size: usize, channels: usize, data: Vec<f64>) -> Result<ImagePlane> {
        if !is_power_of_two(size) {
            return Err(Error::Shape(format!("image extent {size} is not a power of two")));
        }
        if channels == 0 {
            return Err(Error::Shape("image must have at least one channel".into()));
        }
        let t = Tensor::new(vec![size, size, channels], data)?;
        Ok(ImagePlane { size, channels, data: t })
    }

    pub fn from_tensor(t: Tensor) -> Result<ImagePlane> {
        let (h, w, c) = dims3(&t)?;
        if h != w {
            return Err(Error::Shape(format!("image must be square, got {h}x{w}")));
        }
        ImagePlane::new(h, c, t.data().to_vec())
    }

    pub fn constant(size: usize, channels: usize, v: f64) -> Result<ImagePlane> {
        ImagePlane::new(size, channels, vec![v; size * size * channels])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of analysis steps down to 1x1.
    pub fn levels(&self) -> usize {
        self.size.trailing_zeros() as usize
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data.at3(y, x, c)
    }
}

impl DetailPlane {
    pub fn new(size: usize, channels: usize, data: Vec<f64>) -> Result<DetailPlane> {
        if !is_power_of_two(size) {
            return Err(Error::Shape(format!("detail extent {size} is not a power of two")));
        }
        let t = Tensor::new(vec![size, size, 3 * channels], data)?;
        Ok(DetailPlane { size, channels, data: t })
    }

    pub fn from_tensor(t: Tensor, channels: usize) -> Result<DetailPlane> {
        let (h, w, c) = dims3(&t)?;
        if h != w || c != 3 * channels {
            return Err(Error::Shape(format!(
                "detail tensor {h}x{w}x{c} does not match extent with {channels} source channels"
            )));
        }
        DetailPlane::new(h, channels, t.data().to_vec())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Source-image channel count (the tensor itself has `3 *` this).
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Orientation `o` (0 horizontal, 1 vertical, 2 diagonal) of channel `c`.
    pub fn at(&self, y: usize, x: usize, c: usize, o: usize) -> f64 {
        self.data.at3(y, x, 3 * c + o)
    }
}

/// Full wavelet pyramid of an image of extent `2^n`: a 1x1 base plus details
/// at extents `1, 2, ..., 2^(n-1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub base: ImagePlane,
    pub details: Vec<DetailPlane>,
}

impl Pyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Total coefficient count, equal to the pixel count of the source image.
    pub fn coefficient_count(&self) -> usize {
        self.base.tensor().numel()
            + self.details.iter().map(|d| d.tensor().numel()).sum::<usize>()
    }
}

/// One analysis step: image of extent `2s` to (low-pass, details) at `s`.
/// Errors on a 1x1 input.
pub fn haar_analyze(img: &ImagePlane) -> Result<(ImagePlane, DetailPlane)> {
    if img.size < 2 {
        return Err(Error::Shape("cannot analyze a 1x1 image".into()));
    }
    let s = img.size / 2;
    let c = img.channels;
    let mut low = vec![0.0; s * s * c];
    let mut det = vec![0.0; s * s * 3 * c];
    for oy in 0..s {
        for ox in 0..s {
            for ch in 0..c {
                // Accumulate in the same tap order as the taped convolution
                // (ky, kx) so both paths produce bit-identical sums.
                let mut acc = [0.0f64; 4];
                for (f, a) in HAAR.iter().zip(acc.iter_mut()) {
                    let mut s4 = img.at(2 * oy, 2 * ox, ch) * f[0];
                    s4 += img.at(2 * oy, 2 * ox + 1, ch) * f[1];
                    s4 += img.at(2 * oy + 1, 2 * ox, ch) * f[2];
                    s4 += img.at(2 * oy + 1, 2 * ox + 1, ch) * f[3];
                    *a = s4;
                }
                low[(oy * s + ox) * c + ch] = acc[0];
                let base = (oy * s + ox) * 3 * c + 3 * ch;
                det[base] = acc[1];
                det[base + 1] = acc[2];
                det[base + 2] = acc[3];
            }
        }
    }
    Ok((ImagePlane::new(s, c, low)?, DetailPlane::new(s, c, det)?))
}

/// Inverse of one analysis step (the transpose of the orthonormal filter
/// bank): (low, details) at extent `s` back to an image at `2s`.
pub fn haar_synthesize(low: &ImagePlane, det: &DetailPlane) -> Result<ImagePlane> {
    if low.size != det.size || low.channels != det.channels {
        return Err(Error::Shape(format!(
            "synthesize mismatch: low {}x{} ch {}, detail {}x{} ch {}",
            low.size, low.size, low.channels, det.size, det.size, det.channels
        )));
    }
    let s = low.size;
    let c = low.channels;
    let out_size = 2 * s;
    let mut out = vec![0.0; out_size * out_size * c];
    for oy in 0..s {
        for ox in 0..s {
            for ch in 0..c {
                let coef = [
                    low.at(oy, ox, ch),
                    det.at(oy, ox, ch, 0),
                    det.at(oy, ox, ch, 1),
                    det.at(oy, ox, ch, 2),
                ];
                for (tap, f) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .zip([0usize, 1, 2, 3].iter())
                {
                    let (dy, dx) = *tap;
                    let mut v = coef[0] * HAAR[0][*f];
                    v += coef[1] * HAAR[1][*f];
                    v += coef[2] * HAAR[2][*f];
                    v += coef[3] * HAAR[3][*f];
                    out[(((2 * oy + dy) * out_size) + 2 * ox + dx) * c + ch] = v;
                }
            }
        }
    }
    ImagePlane::new(out_size, c, out)
}

/// Decompose an image all the way to its 1x1 base.
pub fn build_pyramid(img: &ImagePlane) -> Result<Pyramid> {
    let mut details = Vec::with_capacity(img.levels());
    let mut cur = img.clone();
    while cur.size > 1 {
        let (low, det) = haar_analyze(&cur)?;
        details.push(det);
        cur = low;
    }
    details.reverse();
    Ok(Pyramid { base: cur, details })
}

/// Exact inverse of `build_pyramid`.
pub fn collapse_pyramid(p: &Pyramid) -> Result<ImagePlane> {
    let mut cur = p.base.clone();
    for det in &p.details {
        cur = haar_synthesize(&cur, det)?;
    }
    Ok(cur)
}

/// Repeatedly analyze, keeping only the low-pass, down to extent `2^k`.
/// `k` equal to the current level is the identity (clone).
pub fn lowpass_to_level(img: &ImagePlane, k: usize) -> Result<ImagePlane> {
    if k > img.levels() {
        return Err(Error::Shape(format!(
            "cannot low-pass a {}x{} image up to level {k}",
            img.size, img.size
        )));
    }
    let mut cur = img.clone();
    while cur.levels() > k {
        let (low, _) = haar_analyze(&cur)?;
        cur = low;
    }
    Ok(cur)
}

// ── taped variants ───────────────────────────────────────────────────────

/// Constant `[2, 2, 1, 4]` kernel producing (low, h, v, d) for one channel.
fn haar_kernel() -> Tensor {
    let mut data = vec![0.0; 2 * 2 * 4];
    for (f, filter) in HAAR.iter().enumerate() {
        for ky in 0..2 {
            for kx in 0..2 {
                data[((ky * 2 + kx) * 1) * 4 + f] = filter[ky * 2 + kx];
            }
        }
    }
    Tensor::new(vec![2, 2, 1, 4], data).expect("haar kernel shape")
}

/// One analysis step recorded on a tape, for differentiating through the
/// transform. Returns (low `[s,s,C]`, detail `[s,s,3C]`) with the same
/// channel ordering as [`haar_analyze`].
pub fn haar_analyze_taped(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let (h, w, c) = dims3(tape.value(x)?)?;
    if h != w || h < 2 {
        return Err(Error::Shape(format!("taped analyze expects square extent >= 2, got {h}x{w}")));
    }
    let kernel = tape.constant(haar_kernel());
    let mut low: Option<Var> = None;
    let mut det: Option<Var> = None;
    for ch in 0..c {
        let xi = tape.slice_c(x, ch, ch + 1)?;
        let bands = tape.conv2d(xi, kernel, 2, Pad::Valid)?;
        let l = tape.slice_c(bands, 0, 1)?;
        let d = tape.slice_c(bands, 1, 4)?;
        low = Some(match low {
            None => l,
            Some(acc) => tape.concat_c(acc, l)?,
        });
        det = Some(match det {
            None => d,
            Some(acc) => tape.concat_c(acc, d)?,
        });
    }
    Ok((low.expect("at least one channel"), det.expect("at least one channel")))
}

/// Full pyramid recorded on a tape: returns (base, details lowest-first),
/// matching [`build_pyramid`]'s ordering.
pub fn build_pyramid_taped(tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
    let (h, _, _) = dims3(tape.value(x)?)?;
    let mut details = Vec::new();
    let mut cur = x;
    let mut size = h;
    while size > 1 {
        let (low, det) = haar_analyze_taped(tape, cur)?;
        details.push(det);
        cur = low;
        size /= 2;
    }
    details.reverse();
    Ok((cur, details))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{jacobian_rows, log_abs_det};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(rng: &mut ChaCha12Rng, size: usize, channels: usize) -> ImagePlane {
        let data = (0..size * size * channels).map(|_| rng.gen_range(0.0..256.0)).collect();
        ImagePlane::new(size, channels, data).unwrap()
    }

    #[test]
    fn worked_2x2_example() {
        let img = ImagePlane::new(2, 1, vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let (low, det) = haar_analyze(&img).unwrap();
        assert_eq!(low.at(0, 0, 0), 5.0);
        assert_eq!(det.at(0, 0, 0, 0), -1.0);
        assert_eq!(det.at(0, 0, 0, 1), -2.0);
        assert_eq!(det.at(0, 0, 0, 2), 0.0);
        let back = haar_synthesize(&low, &det).unwrap();
        assert_eq!(back.tensor().data(), img.tensor().data());
    }

    #[test]
    fn constant_image_gives_double_low_and_zero_details() {
        let img = ImagePlane::constant(8, 3, 7.25).unwrap();
        let (low, det) = haar_analyze(&img).unwrap();
        for &v in low.tensor().data() {
            assert_eq!(v, 14.5);
        }
        for &v in det.tensor().data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn analyze_rejects_1x1() {
        let img = ImagePlane::constant(1, 1, 3.0).unwrap();
        assert!(haar_analyze(&img).is_err());
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert!(ImagePlane::new(3, 1, vec![0.0; 9]).is_err());
    }

    #[test]
    fn energy_preserved_by_one_step() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 16, 3);
        let (low, det) = haar_analyze(&img).unwrap();
        let e_in: f64 = img.tensor().data().iter().map(|v| v * v).sum();
        let e_out: f64 = low.tensor().data().iter().map(|v| v * v).sum::<f64>()
            + det.tensor().data().iter().map(|v| v * v).sum::<f64>();
        assert!((e_in - e_out).abs() < 1e-8 * e_in.max(1.0));
    }

    #[test]
    fn pyramid_roundtrip_and_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for &(size, c) in &[(4usize, 1usize), (8, 3), (32, 1)] {
            let img = random_image(&mut rng, size, c);
            let pyr = build_pyramid(&img).unwrap();
            assert_eq!(pyr.levels(), img.levels());
            assert_eq!(pyr.coefficient_count(), img.tensor().numel());
            assert_eq!(pyr.base.size(), 1);
            for (i, d) in pyr.details.iter().enumerate() {
                assert_eq!(d.size(), 1 << i);
            }
            let back = collapse_pyramid(&pyr).unwrap();
            let max_err = img
                .tensor()
                .data()
                .iter()
                .zip(back.tensor().data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-10, "roundtrip error {max_err}");
        }
    }

    #[test]
    fn lowpass_to_level_matches_pyramid_prefix() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 16, 1);
        let low2 = lowpass_to_level(&img, 2).unwrap();
        assert_eq!(low2.size(), 4);
        let same = lowpass_to_level(&img, 4).unwrap();
        assert_eq!(same, img);
        assert!(lowpass_to_level(&img, 5).is_err());
        // Prefix property: pyramid of the low-pass equals the bottom of the
        // pyramid of the original.
        let p_full = build_pyramid(&img).unwrap();
        let p_low = build_pyramid(&low2).unwrap();
        assert_eq!(p_low.base, p_full.base);
        for i in 0..2 {
            assert_eq!(p_low.details[i], p_full.details[i]);
        }
    }

    #[test]
    fn taped_analyze_matches_plain_bit_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 8, 3);
        let (low, det) = haar_analyze(&img).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(img.tensor().clone());
        let (lv, dv) = haar_analyze_taped(&mut tape, x).unwrap();
        assert_eq!(tape.value(lv).unwrap().data(), low.tensor().data());
        assert_eq!(tape.value(dv).unwrap().data(), det.tensor().data());
    }

    #[test]
    fn transform_jacobian_has_unit_determinant() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 4, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(img.tensor().clone());
        let (base, details) = build_pyramid_taped(&mut tape, x).unwrap();
        let mut outputs = vec![base];
        outputs.extend(details);
        let rows = jacobian_rows(&mut tape, &outputs, x).unwrap();
        assert_eq!(rows.len(), 16);
        let ld = log_abs_det(&rows).unwrap();
        assert!(ld.abs() < 1e-8, "|log det| = {}", ld.abs());
    }

    #[test]
    fn orthonormality_of_filter_rows() {
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|k| HAAR[i][k] * HAAR[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-15);
            }
        }
    }
}
