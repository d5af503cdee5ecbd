//! Two-directional classifier-free guidance over sketch and stroke.

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiseQuery, NoisePredictor, Prediction};
use crate::error::{DissError, Result};
use crate::image::{Image, Shape};
use crate::scalar::Scalar;

pub const DEFAULT_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub s_sketch: f64,
    pub s_stroke: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        GuidanceScales {
            s_sketch: DEFAULT_SCALE,
            s_stroke: DEFAULT_SCALE,
        }
    }
}

impl GuidanceScales {
    pub fn new(s_sketch: f64, s_stroke: f64) -> Result<Self> {
        let s = GuidanceScales { s_sketch, s_stroke };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_sketch", self.s_sketch), ("s_stroke", self.s_stroke)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DissError::range(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The empty condition: all zeros in model space (mid-gray on disk).
pub fn null_condition<T: Scalar>(channels: usize, size: usize) -> Result<Image<T>> {
    if channels != 1 && channels != 3 {
        return Err(DissError::range("channels", format!("must be 1 or 3, got {channels}")));
    }
    Ok(Image::zeros(channels, size, size))
}

/// `u + s_a (a - u) + s_b (b - u)`, elementwise.
///
/// Generic over any numeric ring so the arithmetic can be checked exactly.
pub fn combine<N: Num + Copy>(uncond: N, sketch: N, stroke: N, s_sketch: N, s_stroke: N) -> N {
    uncond + s_sketch * (sketch - uncond) + s_stroke * (stroke - uncond)
}

pub fn combine_slices<N: Num + Copy>(
    uncond: &[N],
    sketch: &[N],
    stroke: &[N],
    s_sketch: N,
    s_stroke: N,
    out: &mut [N],
) {
    assert!(uncond.len() == sketch.len() && sketch.len() == stroke.len() && stroke.len() == out.len());
    for i in 0..out.len() {
        out[i] = combine(uncond[i], sketch[i], stroke[i], s_sketch, s_stroke);
    }
}

/// Guided noise estimate from exactly three predictor evaluations, issued as
/// one batch in the order `(null, null)`, `(sketch, null)`, `(null, stroke)`.
/// The variance output comes from the unconditional evaluation.
pub fn guided_epsilon<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    net: &P,
    x_t: &Image<T>,
    t: usize,
    c_sketch: &Image<T>,
    c_stroke: &Image<T>,
    scales: GuidanceScales,
) -> Result<Prediction<T>> {
    scales.validate()?;
    let (h, w) = (x_t.height(), x_t.width());
    x_t.ensure_shape(Shape::new(3, h, w), "guided latent")?;
    c_sketch.ensure_shape(Shape::new(1, h, w), "sketch condition")?;
    c_stroke.ensure_shape(Shape::new(3, h, w), "stroke condition")?;
    let null_sketch = Image::zeros(1, h, w);
    let null_stroke = Image::zeros(3, h, w);
    let queries = [
        DenoiseQuery {
            x_t,
            t,
            sketch: &null_sketch,
            stroke: &null_stroke,
        },
        DenoiseQuery {
            x_t,
            t,
            sketch: c_sketch,
            stroke: &null_stroke,
        },
        DenoiseQuery {
            x_t,
            t,
            sketch: &null_sketch,
            stroke: c_stroke,
        },
    ];
    let mut preds = net.predict_batch(&queries)?;
    if preds.len() != 3 {
        return Err(DissError::shape("guidance batch", "3 predictions", preds.len().to_string()));
    }
    let e_stroke = preds.pop().unwrap().eps;
    let e_sketch = preds.pop().unwrap().eps;
    let Prediction { eps: e_null, v } = preds.pop().unwrap();
    let mut eps = Image::zeros_like(&e_null);
    combine_slices(
        e_null.data(),
        e_sketch.data(),
        e_stroke.data(),
        T::from_f64_lossy(scales.s_sketch),
        T::from_f64_lossy(scales.s_stroke),
        eps.data_mut(),
    );
    Ok(Prediction { eps, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Returns a constant per condition combination and counts evaluations.
    struct Stub {
        null: f64,
        sketch: f64,
        stroke: f64,
        calls: AtomicUsize,
    }

    impl NoisePredictor<f64> for Stub {
        fn predict_batch(&self, qs: &[DenoiseQuery<'_, f64>]) -> Result<Vec<Prediction<f64>>> {
            self.calls.fetch_add(qs.len(), Ordering::SeqCst);
            Ok(qs
                .iter()
                .map(|q| {
                    let has_sk = q.sketch.data().iter().any(|&v| v != 0.0);
                    let has_st = q.stroke.data().iter().any(|&v| v != 0.0);
                    let val = match (has_sk, has_st) {
                        (false, false) => self.null,
                        (true, false) => self.sketch,
                        (false, true) => self.stroke,
                        (true, true) => f64::NAN,
                    };
                    Prediction {
                        eps: Image::filled(3, q.x_t.height(), q.x_t.width(), val),
                        v: Image::filled(3, q.x_t.height(), q.x_t.width(), if has_sk || has_st { 9.0 } else { 0.25 }),
                    }
                })
                .collect())
        }
    }

    fn stub(null: f64, sketch: f64, stroke: f64) -> Stub {
        Stub {
            null,
            sketch,
            stroke,
            calls: AtomicUsize::new(0),
        }
    }

    fn run(net: &Stub, s: (f64, f64)) -> Prediction<f64> {
        let x = Image::filled(3, 2, 2, 0.1);
        let sk = Image::filled(1, 2, 2, -1.0);
        let st = Image::filled(3, 2, 2, 0.5);
        guided_epsilon(net, &x, 3, &sk, &st, GuidanceScales::new(s.0, s.1).unwrap()).unwrap()
    }

    #[test]
    fn null_condition_is_zero_and_gray_on_disk() {
        let n: Image<f32> = null_condition(1, 32).unwrap();
        assert_eq!(n.shape(), Shape::new(1, 32, 32));
        assert!(n.data().iter().all(|&v| v == 0.0));
        let n: Image<f32> = null_condition(3, 32).unwrap();
        assert!(n.to_bytes().iter().all(|&b| b == 128));
        assert!(null_condition::<f32>(2, 8).is_err());
    }

    #[test]
    fn stub_arithmetic() {
        let net = stub(0.0, 1.0, 2.0);
        let p = run(&net, (1.5, 2.0));
        assert!(p.eps.data().iter().all(|&v| v == 5.5));
        assert!(p.v.data().iter().all(|&v| v == 0.25));
        assert_eq!(net.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn reductions_are_exact() {
        let net = stub(0.3, -0.7, 1.9);
        assert!(run(&net, (0.0, 0.0)).eps.data().iter().all(|&v| v == 0.3));
        assert!(run(&net, (1.0, 0.0)).eps.data().iter().all(|&v| v == -0.7));
        assert!(run(&net, (0.0, 1.0)).eps.data().iter().all(|&v| v == 1.9));
        assert_eq!(net.calls.load(Ordering::SeqCst), 9);
    }

    #[test]
    fn symmetric_roles() {
        let a = combine(0.2, 0.9, -0.4, 1.5, 2.5);
        let b = combine(0.2, -0.4, 0.9, 2.5, 1.5);
        assert_eq!(a, b);
    }

    #[test]
    fn superposition_is_exact_over_rationals() {
        type Q = Ratio<i64>;
        let q = |n, d| Q::new(n, d);
        let (u, a, b) = (q(1, 3), q(-5, 7), q(11, 4));
        let f = |s1: Q, s2: Q| combine(u, a, b, s1, s2);
        let (s1, s2, r1, r2) = (q(3, 2), q(2, 1), q(-1, 5), q(7, 3));
        let lam = q(2, 9);
        let one = Q::from_integer(1);
        // affine: f(λx + (1-λ)y) = λ f(x) + (1-λ) f(y)
        let lhs = f(lam * s1 + (one - lam) * r1, lam * s2 + (one - lam) * r2);
        let rhs = lam * f(s1, s2) + (one - lam) * f(r1, r2);
        assert_eq!(lhs, rhs);
        // separable: f(s1, s2) - f(0,0) = (f(s1,0) - f(0,0)) + (f(0,s2) - f(0,0))
        let z = Q::from_integer(0);
        assert_eq!(f(s1, s2) - f(z, z), (f(s1, z) - f(z, z)) + (f(z, s2) - f(z, z)));
    }

    #[test]
    fn rejects_bad_scales_and_shapes() {
        assert!(GuidanceScales::new(-0.1, 1.0).is_err());
        assert!(GuidanceScales::new(1.0, f64::NAN).is_err());
        let net = stub(0.0, 0.0, 0.0);
        let x = Image::filled(3, 2, 2, 0.1);
        let sk = Image::filled(1, 3, 3, -1.0);
        let st = Image::filled(3, 2, 2, 0.5);
        assert!(guided_epsilon(&net, &x, 1, &sk, &st, GuidanceScales::default()).is_err());
    }
}
