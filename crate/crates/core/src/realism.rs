//! Realism control: low-pass size, antialiased resize filter, and the
//! per-step latent refinement against a noised reference.

use serde::{Deserialize, Serialize};

use crate::error::{DissError, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::schedule::{q_sample_unchecked, NoiseSchedule};

pub const DEFAULT_DIVISOR: f64 = 8.0;
pub const OBJECT_OFFSET: u32 = 0;
pub const SCENE_OFFSET: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealismConfig {
    pub s_realism: f64,
    #[serde(default = "default_divisor")]
    pub divisor: f64,
    #[serde(default)]
    pub offset: u32,
}

fn default_divisor() -> f64 {
    DEFAULT_DIVISOR
}

impl Default for RealismConfig {
    fn default() -> Self {
        RealismConfig {
            s_realism: 0.5,
            divisor: DEFAULT_DIVISOR,
            offset: OBJECT_OFFSET,
        }
    }
}

impl RealismConfig {
    pub fn new(s_realism: f64) -> Self {
        RealismConfig {
            s_realism,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.s_realism) {
            return Err(DissError::range("s_realism", format!("must lie in [0, 1], got {}", self.s_realism)));
        }
        if !(self.divisor.is_finite() && self.divisor > 0.0) {
            return Err(DissError::range("divisor", format!("must be positive, got {}", self.divisor)));
        }
        Ok(())
    }

    /// Low-pass size for an image of side `m`.
    pub fn size_for(&self, m: usize) -> Result<usize> {
        self.validate()?;
        compute_n(self.s_realism, m, self.divisor, self.offset)
    }
}

/// `round_half_up(-s (m/d - 1) + m/d + k)`, clamped to `[1, m]`.
pub fn compute_n(s_realism: f64, m: usize, d: f64, k: u32) -> Result<usize> {
    if !(0.0..=1.0).contains(&s_realism) {
        return Err(DissError::range("s_realism", format!("must lie in [0, 1], got {s_realism}")));
    }
    if m < 2 {
        return Err(DissError::range("m", format!("image side must be >= 2, got {m}")));
    }
    if !(d.is_finite() && d > 0.0 && d <= m as f64) {
        // beyond m the slope flips sign and realism would run backwards
        return Err(DissError::range("divisor", format!("must lie in (0, {m}], got {d}")));
    }
    let base = m as f64 / d;
    let raw = -s_realism * (base - 1.0) + base + k as f64;
    let n = (raw + 0.5).floor();
    Ok(n.clamp(1.0, m as f64) as usize)
}

/// Half-sample symmetric reflection of `i` into `[0, n)`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let r = i.rem_euclid(2 * n);
    (if r >= n { 2 * n - 1 - r } else { r }) as usize
}

/// Dense `out x inp` matrix of normalized triangle-kernel weights.
///
/// When shrinking, the kernel is stretched by `inp / out` so it averages over
/// every input sample that falls inside an output cell.
pub fn resize_weights(inp: usize, out: usize) -> Vec<f64> {
    let scale = out as f64 / inp as f64;
    let k = scale.min(1.0);
    let radius = 1.0 / k;
    let mut w = vec![0.0; out * inp];
    for j in 0..out {
        let center = (j as f64 + 0.5) / scale - 0.5;
        let lo = (center - radius).floor() as i64;
        let hi = (center + radius).ceil() as i64;
        let row = &mut w[j * inp..(j + 1) * inp];
        for i in lo..=hi {
            let tap = (1.0 - ((i as f64 - center) * k).abs()).max(0.0);
            if tap > 0.0 {
                row[reflect(i, inp)] += tap;
            }
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    w
}

/// Separable resize of one plane with precomputed weights.
fn resize_plane(src: &[f64], h: usize, w: usize, wy: &[f64], oh: usize, wx: &[f64], ow: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let s = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let k = &wx[x * w..(x + 1) * w];
            rows[y * ow + x] = s.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let k = &wy[y * h..(y + 1) * h];
        for (yy, &kv) in k.iter().enumerate() {
            if kv != 0.0 {
                let r = &rows[yy * ow..(yy + 1) * ow];
                for x in 0..ow {
                    out[y * ow + x] += kv * r[x];
                }
            }
        }
    }
    out
}

/// Antialiased bilinear resize of every channel to `oh x ow`.
pub fn resize<T: Scalar>(x: &Image<T>, oh: usize, ow: usize) -> Image<T> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let wy = resize_weights(h, oh);
    let wx = resize_weights(w, ow);
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane: Vec<f64> = x.plane(ch).iter().map(|v| v.to_f64_lossy()).collect();
        data.extend(resize_plane(&plane, h, w, &wy, oh, &wx, ow).into_iter().map(T::from_f64_lossy));
    }
    Image::from_vec(c, oh, ow, data).expect("resize output shape")
}

/// Down to `n x n` and back to the original size.
pub fn lowpass<T: Scalar>(x: &Image<T>, n: usize) -> Result<Image<T>> {
    let (h, w) = (x.height(), x.width());
    let m = h.min(w);
    if n < 1 || n > m {
        return Err(DissError::range("N", format!("must lie in [1, {m}], got {n}")));
    }
    if n == h && n == w {
        return Ok(x.clone());
    }
    Ok(resize(&resize(x, n, n), h, w))
}

/// Noised reference at level `t - 1`; at `t = 1` the clean reference.
pub fn noised_reference<T: Scalar>(
    c_ref: &Image<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Image<T>,
) -> Result<Image<T>> {
    sched.check_t(t)?;
    c_ref.ensure_same_shape(noise, "reference noise")?;
    if t == 1 {
        return Ok(c_ref.clone());
    }
    Ok(q_sample_unchecked(c_ref, sched.alpha_bar(t - 1), noise))
}

/// `x - LP(x) + LP(reference)` with an already-noised reference.
pub fn swap_low_band<T: Scalar>(x_tilde: &Image<T>, reference: &Image<T>, n: usize) -> Result<Image<T>> {
    x_tilde.ensure_same_shape(reference, "refinement reference")?;
    let lx = lowpass(x_tilde, n)?;
    let lr = lowpass(reference, n)?;
    let mut out = x_tilde.clone();
    for ((o, a), b) in out.data_mut().iter_mut().zip(lx.data()).zip(lr.data()) {
        *o = *o - *a + *b;
    }
    Ok(out)
}

/// One refinement step producing the `t - 1` latent.
pub fn ilvr_refine<T: Scalar>(
    x_tilde: &Image<T>,
    c_comb: &Image<T>,
    t: usize,
    n: usize,
    sched: &NoiseSchedule,
    noise: &Image<T>,
) -> Result<Image<T>> {
    x_tilde.ensure_same_shape(c_comb, "refinement reference")?;
    let reference = noised_reference(c_comb, t, sched, noise)?;
    swap_low_band(x_tilde, &reference, n)
}
