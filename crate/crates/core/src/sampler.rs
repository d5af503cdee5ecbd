//! Guided reverse chains: full sampling, local editing, and region fill.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataprep::compose_comb;
use crate::denoiser::NoisePredictor;
use crate::error::{DissError, Result};
use crate::guidance::{guided_epsilon, GuidanceScales};
use crate::image::{model_to_byte, Image, Shape};
use crate::realism::{noised_reference, swap_low_band, RealismConfig};
use crate::scalar::Scalar;
use crate::schedule::{ddpm_step, model_variance, posterior_mean_from_eps, NoiseSchedule};

/// Default refinement cutoff as a fraction of the chain length.
pub const DEFAULT_CUTOFF_FRACTION: f64 = 0.2;

/// Byte tolerance for "white" when deriving the stroke mask.
pub const WHITE_TOLERANCE: u8 = 2;

#[derive(Clone, Debug)]
pub struct SampleRequest<T> {
    pub c_sketch: Image<T>,
    pub c_stroke: Image<T>,
    /// Refinement reference; composed from sketch and stroke when absent.
    pub c_comb: Option<Image<T>>,
    pub scales: GuidanceScales,
    /// `None` skips refinement entirely.
    pub realism: Option<RealismConfig>,
    pub seed: u64,
}

impl<T: Scalar> SampleRequest<T> {
    pub fn new(c_sketch: Image<T>, c_stroke: Image<T>, seed: u64) -> Self {
        SampleRequest {
            c_sketch,
            c_stroke,
            c_comb: None,
            scales: GuidanceScales::default(),
            realism: Some(RealismConfig::default()),
            seed,
        }
    }

    pub fn size(&self) -> usize {
        self.c_stroke.height()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.size();
        self.c_stroke.ensure_shape(Shape::new(3, s, s), "stroke condition")?;
        self.c_sketch.ensure_shape(Shape::new(1, s, s), "sketch condition")?;
        if let Some(c) = &self.c_comb {
            c.ensure_shape(Shape::new(3, s, s), "combined reference")?;
        }
        self.scales.validate()?;
        if let Some(r) = &self.realism {
            r.size_for(s)?;
        }
        Ok(())
    }

    pub fn reference(&self) -> Image<T> {
        match &self.c_comb {
            Some(c) => c.clone(),
            None => compose_comb(&self.c_sketch, &self.c_stroke).expect("validated shapes"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EditRequest<T> {
    pub sample: SampleRequest<T>,
    /// Refinement is applied only while `t > cutoff`.
    pub cutoff: usize,
}

impl<T: Scalar> EditRequest<T> {
    pub fn with_default_cutoff(sample: SampleRequest<T>, steps: usize) -> Self {
        EditRequest {
            sample,
            cutoff: default_cutoff(steps),
        }
    }
}

pub fn default_cutoff(steps: usize) -> usize {
    (DEFAULT_CUTOFF_FRACTION * steps as f64).round() as usize
}

/// 1 on uncolored (free) pixels, 0 on colored (pinned) pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct StrokeMask<T> {
    mask: Image<T>,
}

impl<T: Scalar> StrokeMask<T> {
    pub fn image(&self) -> &Image<T> {
        &self.mask
    }

    pub fn is_free(&self, y: usize, x: usize) -> bool {
        self.mask.get(0, y, x) == T::one()
    }

    pub fn colored_fraction(&self) -> f64 {
        let n = self.mask.len();
        self.mask.data().iter().filter(|&&v| v == T::zero()).count() as f64 / n as f64
    }
}

/// A pixel is colored when its bytes carry any saturation, or when its
/// brightest channel sits more than [`WHITE_TOLERANCE`] below white.
pub fn stroke_mask<T: Scalar>(c_stroke: &Image<T>) -> Result<StrokeMask<T>> {
    if c_stroke.channels() != 3 {
        return Err(DissError::shape("stroke mask", "3 channels", c_stroke.channels().to_string()));
    }
    let (h, w) = (c_stroke.height(), c_stroke.width());
    let mut mask = Image::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let b: [u8; 3] = std::array::from_fn(|c| model_to_byte(c_stroke.get(c, y, x).to_f64_lossy()));
            let hi = *b.iter().max().unwrap();
            let lo = *b.iter().min().unwrap();
            let colored = hi != lo || 255 - hi > WHITE_TOLERANCE;
            mask.set(0, y, x, if colored { T::zero() } else { T::one() });
        }
    }
    Ok(StrokeMask { mask })
}

/// Per-step intermediate values, reported to an observer.
#[derive(Debug)]
pub struct StepTrace<'a, T> {
    pub t: usize,
    /// Output of the reverse transition, before any refinement.
    pub x_tilde: &'a Image<T>,
    /// Region fill only: the latent after pinning colored pixels.
    pub appended: Option<&'a Image<T>>,
    /// Noised reference used this step, if refinement ran.
    pub reference: Option<&'a Image<T>>,
    /// Latent carried to the next step.
    pub latent: &'a Image<T>,
}

#[derive(Clone, Copy)]
enum Mode<'m, T> {
    Refine,
    Fill(&'m StrokeMask<T>),
}

fn run_chain<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    req: &SampleRequest<T>,
    cutoff: usize,
    mode: Mode<'_, T>,
    net: &P,
    sched: &NoiseSchedule,
    observer: &mut dyn FnMut(&StepTrace<'_, T>),
) -> Result<Image<T>> {
    req.validate()?;
    let steps = sched.steps();
    if cutoff > steps {
        return Err(DissError::range("cutoff", format!("must lie in [0, {steps}], got {cutoff}")));
    }
    let s = req.size();
    let n = match &req.realism {
        Some(r) => Some(r.size_for(s)?),
        None => None,
    };
    let reference_image = match mode {
        Mode::Refine => req.reference(),
        Mode::Fill(_) => req.c_stroke.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut x: Image<T> = Image::randn(3, s, s, &mut rng);
    for t in (1..=steps).rev() {
        let pred = guided_epsilon(net, &x, sched.model_timestep(t), &req.c_sketch, &req.c_stroke, req.scales)?;
        let mu = posterior_mean_from_eps(&x, &pred.eps, t, sched)?;
        let x_tilde = if t > 1 {
            let var = model_variance(&pred.v, t, sched)?;
            let z = Image::randn(3, s, s, &mut rng);
            ddpm_step(&mu, &var, t, &z)?
        } else {
            mu
        };
        let active = t > cutoff;
        let pin = matches!(mode, Mode::Fill(_)) && active;
        let refine = n.is_some() && active;
        let (next, appended, reference) = if pin || refine {
            let noise = Image::randn(3, s, s, &mut rng);
            let reference = noised_reference(&reference_image, t, sched, &noise)?;
            let appended = match mode {
                Mode::Fill(mask) if pin => Some(pin_colored(&x_tilde, &reference, mask)),
                _ => None,
            };
            let base = appended.as_ref().unwrap_or(&x_tilde);
            let next = match n {
                Some(n) if refine => swap_low_band(base, &reference, n)?,
                _ => base.clone(),
            };
            (next, appended, Some(reference))
        } else {
            (x_tilde.clone(), None, None)
        };
        if !next.is_finite() {
            return Err(DissError::NumericDivergence {
                step: t,
                detail: "latent contains non-finite values".into(),
            });
        }
        observer(&StepTrace {
            t,
            x_tilde: &x_tilde,
            appended: appended.as_ref(),
            reference: reference.as_ref(),
            latent: &next,
        });
        x = next;
    }
    Ok(x.clamp(-T::one(), T::one()))
}

/// Free pixels keep the latent; colored pixels take the noised stroke.
fn pin_colored<T: Scalar>(x: &Image<T>, noised: &Image<T>, mask: &StrokeMask<T>) -> Image<T> {
    let (h, w) = (x.height(), x.width());
    let mut out = x.clone();
    for y in 0..h {
        for xx in 0..w {
            if !mask.is_free(y, xx) {
                for c in 0..x.channels() {
                    out.set(c, y, xx, noised.get(c, y, xx));
                }
            }
        }
    }
    out
}

/// Full guided sampling with refinement at every step.
pub fn sample_diss<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    req: &SampleRequest<T>,
    net: &P,
    sched: &NoiseSchedule,
) -> Result<Image<T>> {
    run_chain(req, 0, Mode::Refine, net, sched, &mut |_| {})
}

pub fn sample_diss_traced<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    req: &SampleRequest<T>,
    net: &P,
    sched: &NoiseSchedule,
    observer: &mut dyn FnMut(&StepTrace<'_, T>),
) -> Result<Image<T>> {
    run_chain(req, 0, Mode::Refine, net, sched, observer)
}

/// Local editing: refinement against the overlaid image only while `t > R`.
pub fn local_edit<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    req: &EditRequest<T>,
    net: &P,
    sched: &NoiseSchedule,
) -> Result<Image<T>> {
    local_edit_traced(req, net, sched, &mut |_| {})
}

pub fn local_edit_traced<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    req: &EditRequest<T>,
    net: &P,
    sched: &NoiseSchedule,
    observer: &mut dyn FnMut(&StepTrace<'_, T>),
) -> Result<Image<T>> {
    run_chain(&req.sample, req.cutoff, Mode::Refine, net, sched, observer)
}

/// Region-sensitive fill: colored stroke pixels are pinned to the noised
/// stroke, and refinement uses the stroke alone, while `t > R`.
pub fn region_fill<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    req: &EditRequest<T>,
    net: &P,
    sched: &NoiseSchedule,
) -> Result<Image<T>> {
    region_fill_traced(req, net, sched, &mut |_| {})
}

pub fn region_fill_traced<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    req: &EditRequest<T>,
    net: &P,
    sched: &NoiseSchedule,
    observer: &mut dyn FnMut(&StepTrace<'_, T>),
) -> Result<Image<T>> {
    req.sample.validate()?;
    let mask = stroke_mask(&req.sample.c_stroke)?;
    run_chain(&req.sample, req.cutoff, Mode::Fill(&mask), net, sched, observer)
}

/// Which inference procedure a stored job ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Sample,
    Edit,
    Fill,
}
