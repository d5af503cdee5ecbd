//! Noise predictors: the conditional UNet and an analytic Gaussian oracle.

use crate::error::{DissError, Result};
use crate::image::{Image, Shape};
use crate::nn::{Tensor, UNet, IN_CHANNELS, OUT_CHANNELS};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// One network evaluation request.
#[derive(Clone, Copy, Debug)]
pub struct DenoiseQuery<'a, T> {
    pub x_t: &'a Image<T>,
    pub t: usize,
    pub sketch: &'a Image<T>,
    pub stroke: &'a Image<T>,
}

/// Noise estimate and raw variance-interpolation output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub eps: Image<T>,
    pub v: Image<T>,
}

/// Anything that maps `(x_t, t, c_sketch, c_stroke)` to `(eps_hat, v)`.
pub trait NoisePredictor<T: Scalar>: Send + Sync {
    /// Evaluates a batch of queries; result order matches the input.
    fn predict_batch(&self, queries: &[DenoiseQuery<'_, T>]) -> Result<Vec<Prediction<T>>>;

    fn predict(&self, query: DenoiseQuery<'_, T>) -> Result<Prediction<T>> {
        Ok(self
            .predict_batch(std::slice::from_ref(&query))?
            .pop()
            .expect("one prediction per query"))
    }
}

impl<T: Scalar, P: NoisePredictor<T> + ?Sized> NoisePredictor<T> for &P {
    fn predict_batch(&self, queries: &[DenoiseQuery<'_, T>]) -> Result<Vec<Prediction<T>>> {
        (**self).predict_batch(queries)
    }
}

/// Validates query shapes against a model resolution.
pub fn check_query<T: Scalar>(q: &DenoiseQuery<'_, T>, size: usize) -> Result<()> {
    q.x_t.ensure_shape(Shape::new(3, size, size), "denoiser latent")?;
    q.sketch.ensure_shape(Shape::new(1, size, size), "denoiser sketch")?;
    q.stroke.ensure_shape(Shape::new(3, size, size), "denoiser stroke")?;
    if q.t == 0 {
        return Err(DissError::TimestepOutOfRange {
            t: 0,
            min: 1,
            max: usize::MAX,
        });
    }
    Ok(())
}

/// Packs queries into the `[n, 7, s, s]` network input.
pub fn pack_inputs<T: Scalar>(queries: &[DenoiseQuery<'_, T>], size: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(queries.len() * IN_CHANNELS * size * size);
    for q in queries {
        data.extend_from_slice(q.x_t.data());
        data.extend_from_slice(q.sketch.data());
        data.extend_from_slice(q.stroke.data());
    }
    Tensor::from_vec([queries.len(), IN_CHANNELS, size, size], data)
}

/// Splits `[n, 6, s, s]` network output into predictions.
pub fn unpack_outputs<T: Scalar>(out: &Tensor<T>) -> Vec<Prediction<T>> {
    let [n, c, h, w] = out.shape();
    debug_assert_eq!(c, OUT_CHANNELS);
    let plane = h * w;
    (0..n)
        .map(|i| {
            let s = out.sample(i);
            Prediction {
                eps: Image::from_vec(3, h, w, s[..3 * plane].to_vec()).expect("eps shape"),
                v: Image::from_vec(3, h, w, s[3 * plane..].to_vec()).expect("v shape"),
            }
        })
        .collect()
}

impl<T: Scalar> NoisePredictor<T> for UNet<T> {
    fn predict_batch(&self, queries: &[DenoiseQuery<'_, T>]) -> Result<Vec<Prediction<T>>> {
        let size = self.config().image_size;
        for q in queries {
            check_query(q, size)?;
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let ts: Vec<usize> = queries.iter().map(|q| q.t).collect();
        let out = self.run(pack_inputs(queries, size), &ts);
        if !out.is_finite() {
            return Err(DissError::NumericDivergence {
                step: ts[0],
                detail: "non-finite network output".into(),
            });
        }
        Ok(unpack_outputs(&out))
    }
}

/// Exact noise predictor for data distributed as `N(mu0, sigma0^2 I)`.
///
/// Ignores both conditions. Its `v` output encodes the exact reverse-step
/// variance, so the reverse chain it drives is the true one.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianDenoiser {
    mu0: Image<f64>,
    sigma0: f64,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu0: Image<f64>, sigma0: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(DissError::range("sigma0", format!("must be positive, got {sigma0}")));
        }
        Ok(AnalyticGaussianDenoiser { mu0, sigma0, schedule })
    }

    pub fn mu0(&self) -> &Image<f64> {
        &self.mu0
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    /// Variance-interpolation output giving the exact reverse variance at `t`.
    fn exact_v(&self, t: usize) -> f64 {
        let s = &self.schedule;
        if t < 2 {
            return -1.0;
        }
        let ab = s.alpha_bar(t);
        let s2 = self.sigma0 * self.sigma0;
        let post_var_x0 = s2 * (1.0 - ab) / (ab * s2 + 1.0 - ab);
        let (c0, _) = s.posterior_mean_coefficients(t);
        let var = s.posterior_beta(t) + c0 * c0 * post_var_x0;
        let (lo, hi) = (s.posterior_log_beta_clipped(t), s.beta(t).ln());
        let w = ((var.ln() - lo) / (hi - lo)).clamp(0.0, 1.0);
        2.0 * w - 1.0
    }
}

/// `E[eps | x_t]` under Gaussian data `N(mu0, sigma0^2 I)`.
pub fn analytic_gaussian_eps<T: Scalar>(
    x_t: &Image<T>,
    t: usize,
    oracle: &AnalyticGaussianDenoiser,
    sched: &NoiseSchedule,
) -> Result<Image<T>> {
    sched.check_t(t)?;
    oracle.mu0.ensure_shape(x_t.shape(), "analytic oracle mean")?;
    let ab = sched.alpha_bar(t);
    let sa = ab.sqrt();
    let s2 = oracle.sigma0 * oracle.sigma0;
    let gain = sa * s2 / (ab * s2 + 1.0 - ab);
    let denom = (1.0 - ab).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(oracle.mu0.data())
        .map(|(&x, &m)| {
            let x = x.to_f64_lossy();
            let x0_mean = m + gain * (x - sa * m);
            T::from_f64_lossy((x - sa * x0_mean) / denom)
        })
        .collect();
    Image::from_vec(x_t.channels(), x_t.height(), x_t.width(), data)
}

impl<T: Scalar> NoisePredictor<T> for AnalyticGaussianDenoiser {
    fn predict_batch(&self, queries: &[DenoiseQuery<'_, T>]) -> Result<Vec<Prediction<T>>> {
        queries
            .iter()
            .map(|q| {
                let eps = analytic_gaussian_eps(q.x_t, q.t, self, &self.schedule)?;
                let v = Image::filled(eps.channels(), eps.height(), eps.width(), T::from_f64_lossy(self.exact_v(q.t)));
                Ok(Prediction { eps, v })
            })
            .collect()
    }
}
