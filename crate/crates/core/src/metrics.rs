//! Consistency metrics: edge maps, Chamfer sketch distance, low-band stroke
//! distance, and the realism sweep.

use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::error::{DissError, Result};
use crate::image::{Image, Shape};
use crate::realism::{lowpass, RealismConfig};
use crate::sampler::{sample_diss, SampleRequest};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Fraction of gradient magnitudes below the edge threshold.
pub const EDGE_PERCENTILE: f64 = 0.9;

/// The realism sweep used for the trade-off curve.
pub const DEFAULT_SWEEP: [f64; 6] = [1.0, 0.8, 0.6, 0.4, 0.2, 0.0];

fn luma_plane<T: Scalar>(img: &Image<T>) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    (0..h * w)
        .map(|i| {
            0.299 * img.plane(0)[i].to_f64_lossy()
                + 0.587 * img.plane(1)[i].to_f64_lossy()
                + 0.114 * img.plane(2)[i].to_f64_lossy()
        })
        .collect()
}

/// Binary edge map (1 on edges): Sobel magnitude on luma, kept where it
/// reaches the 90th percentile, thinned by non-maximum suppression.
pub fn edge_map<T: Scalar>(img: &Image<T>) -> Result<Image<T>> {
    let (h, w) = (img.height(), img.width());
    img.ensure_shape(Shape::new(3, h, w), "edge map input")?;
    let l = luma_plane(img);
    let at = |y: i64, x: i64| l[(y.clamp(0, h as i64 - 1) as usize) * w + x.clamp(0, w as i64 - 1) as usize];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let sx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let sy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            gx[i] = sx;
            gy[i] = sy;
            mag[i] = (sx * sx + sy * sy).sqrt();
        }
    }
    let mut sorted = mag.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((EDGE_PERCENTILE * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    let threshold = sorted[idx];
    let m_at = |y: i64, x: i64| {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut out = Image::zeros(1, h, w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m <= 0.0 || m < threshold {
                continue;
            }
            // gradient direction quantized to 0, 45, 90, 135 degrees
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            // ties resolve toward the lower-index side
            if m > m_at(y - dy, x - dx) && m >= m_at(y + dy, x + dx) {
                out.set(0, y as usize, x as usize, T::one());
            }
        }
    }
    Ok(out)
}

fn points_where<T: Scalar>(img: &Image<T>, pred: impl Fn(T) -> bool) -> Vec<(f64, f64)> {
    let (h, w) = (img.height(), img.width());
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if pred(img.get(0, y, x)) {
                pts.push((y as f64, x as f64));
            }
        }
    }
    pts
}

fn mean_nearest(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| (y - v) * (y - v) + (x - u) * (x - u))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric mean Chamfer distance in pixels between two point sets.
/// Zero when both are empty; `diagonal` when exactly one is.
pub fn chamfer(a: &[(f64, f64)], b: &[(f64, f64)], diagonal: f64) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => diagonal,
        _ => 0.5 * (mean_nearest(a, b) + mean_nearest(b, a)),
    }
}

/// Line pixels of a sketch: anything darker than mid-gray.
pub fn sketch_points<T: Scalar>(sketch: &Image<T>) -> Vec<(f64, f64)> {
    points_where(sketch, |v| v < T::zero())
}

/// Chamfer distance between the edges of `output` and the sketch lines.
pub fn sketch_consistency<T: Scalar>(output: &Image<T>, c_sketch: &Image<T>) -> Result<f64> {
    let (h, w) = (output.height(), output.width());
    c_sketch.ensure_shape(Shape::new(1, h, w), "sketch for consistency")?;
    let edges = points_where(&edge_map(output)?, |v| v > T::zero());
    let lines = sketch_points(c_sketch);
    Ok(chamfer(&edges, &lines, ((h * h + w * w) as f64).sqrt()))
}

/// RMS difference of the `m/8` low bands of `output` and `c_comb`.
pub fn stroke_distance<T: Scalar>(output: &Image<T>, c_comb: &Image<T>) -> Result<f64> {
    output.ensure_same_shape(c_comb, "stroke distance")?;
    let n = (output.height() / 8).max(1);
    Ok(lowpass(output, n)?.rms_diff(&lowpass(c_comb, n)?))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Ranks starting at 1 with ties given their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(DissError::range("spearman input", "needs two equal-length series of length >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Number of adjacent pairs where the series goes up.
pub fn count_increases(series: &[f64]) -> usize {
    series.windows(2).filter(|w| w[1] > w[0]).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub seed: u64,
    pub s_realism: f64,
    pub sketch_distance: f64,
    pub stroke_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub s_realism: f64,
    pub n: usize,
    pub median_sketch: f64,
    pub median_stroke: f64,
    pub mean_sketch: f64,
    pub mean_stroke: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub samples: Vec<SampleScore>,
    pub points: Vec<SweepPoint>,
}

impl ConsistencyReport {
    /// Spearman correlation between realism scale and stroke distance over
    /// every sample.
    pub fn stroke_spearman(&self) -> Result<f64> {
        let s: Vec<f64> = self.samples.iter().map(|r| r.s_realism).collect();
        let d: Vec<f64> = self.samples.iter().map(|r| r.stroke_distance).collect();
        spearman(&s, &d)
    }

    /// Increases of the median stroke distance along the sweep order.
    pub fn stroke_inversions(&self) -> usize {
        let med: Vec<f64> = self.points.iter().map(|p| p.median_stroke).collect();
        count_increases(&med)
    }

    /// One JSON record per sample followed by one per sweep point.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        for p in &self.points {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Samples `request` at each realism scale (sorted descending) and seed.
pub fn realism_tradeoff_curve<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    net: &P,
    request: &SampleRequest<T>,
    s_values: &[f64],
    seeds: &[u64],
    sched: &NoiseSchedule,
) -> Result<ConsistencyReport> {
    if s_values.windows(2).any(|w| w[1] > w[0]) {
        return Err(DissError::range("s_values", "must be sorted in descending order"));
    }
    if seeds.is_empty() || s_values.is_empty() {
        return Err(DissError::Empty("realism sweep"));
    }
    let base = request.realism.unwrap_or_default();
    let reference = request.reference();
    let mut samples = Vec::new();
    let mut points = Vec::new();
    for &s in s_values {
        let realism = RealismConfig { s_realism: s, ..base };
        let n = realism.size_for(request.size())?;
        let mut sk = Vec::new();
        let mut st = Vec::new();
        for &seed in seeds {
            let req = SampleRequest {
                realism: Some(realism),
                seed,
                ..request.clone()
            };
            let out = sample_diss(&req, net, sched)?;
            let score = SampleScore {
                seed,
                s_realism: s,
                sketch_distance: sketch_consistency(&out, &request.c_sketch)?,
                stroke_distance: stroke_distance(&out, &reference)?,
            };
            sk.push(score.sketch_distance);
            st.push(score.stroke_distance);
            samples.push(score);
        }
        points.push(SweepPoint {
            s_realism: s,
            n,
            median_sketch: median(&sk),
            median_stroke: median(&st),
            mean_sketch: mean(&sk),
            mean_stroke: mean(&st),
        });
    }
    Ok(ConsistencyReport { samples, points })
}
