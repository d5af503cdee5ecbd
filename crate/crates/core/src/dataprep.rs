//! Synthetic training data, drawing decomposition, and PNG plumbing.

use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DissError, Result};
use crate::image::{byte_to_model, Image, Shape};
use crate::scalar::Scalar;

pub const MIN_SYNTH_SIZE: usize = 16;
/// Gray level (0..=255) at or below which a drawing pixel is a sketch line.
pub const LINE_THRESHOLD: f64 = 50.0;
/// Stroke cells per image side.
pub const STROKE_GRID: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample<T> {
    pub photo: Image<T>,
    pub sketch: Image<T>,
    pub stroke: Image<T>,
    pub comb: Image<T>,
}

impl<T: Scalar> TrainingExample<T> {
    pub fn size(&self) -> usize {
        self.photo.height()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.size();
        self.photo.ensure_shape(Shape::new(3, s, s), "photo")?;
        self.sketch.ensure_shape(Shape::new(1, s, s), "sketch")?;
        self.stroke.ensure_shape(Shape::new(3, s, s), "stroke")?;
        self.comb.ensure_shape(Shape::new(3, s, s), "comb")
    }

    pub fn cast<U: Scalar>(&self) -> TrainingExample<U> {
        TrainingExample {
            photo: self.photo.cast(),
            sketch: self.sketch.cast(),
            stroke: self.stroke.cast(),
            comb: self.comb.cast(),
        }
    }
}

/// Standard luma on 0..=255 values.
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Hexcone saturation in [0, 1].
pub fn saturation(rgb: [u8; 3]) -> f64 {
    let hi = *rgb.iter().max().unwrap();
    let lo = *rgb.iter().min().unwrap();
    if hi == 0 {
        0.0
    } else {
        (hi - lo) as f64 / hi as f64
    }
}

fn pixel_bytes<T: Scalar>(img: &Image<T>, y: usize, x: usize) -> [u8; 3] {
    std::array::from_fn(|c| crate::image::model_to_byte(img.get(c, y, x).to_f64_lossy()))
}

/// Black sketch lines over the stroke. Soft sketch values blend linearly.
pub fn compose_comb<T: Scalar>(sketch: &Image<T>, stroke: &Image<T>) -> Result<Image<T>> {
    let (h, w) = (stroke.height(), stroke.width());
    stroke.ensure_shape(Shape::new(3, h, w), "stroke for composition")?;
    sketch.ensure_shape(Shape::new(1, h, w), "sketch for composition")?;
    let half = T::from_f64_lossy(0.5);
    let mut out = stroke.clone();
    for c in 0..3 {
        for (o, &s) in out.plane_mut(c).iter_mut().zip(sketch.plane(0)) {
            let ink = (T::one() - s) * half;
            if ink > T::zero() {
                *o = -ink + (T::one() - ink) * *o;
            }
        }
    }
    Ok(out)
}

/// Splits a drawing into a binary sketch and a stroke map.
///
/// Pixels with gray level at most [`LINE_THRESHOLD`] become sketch lines.
/// Pixels with any saturation keep their color in the stroke; everything
/// else in the stroke is white.
pub fn extract_sketch_stroke<T: Scalar>(comb: &Image<T>) -> Result<(Image<T>, Image<T>)> {
    let (h, w) = (comb.height(), comb.width());
    comb.ensure_shape(Shape::new(3, h, w), "drawing")?;
    let mut sketch = Image::filled(1, h, w, T::one());
    let mut stroke = Image::filled(3, h, w, T::one());
    for y in 0..h {
        for x in 0..w {
            let b = pixel_bytes(comb, y, x);
            if luma(b.map(f64::from)) <= LINE_THRESHOLD {
                sketch.set(0, y, x, -T::one());
            }
            if saturation(b) > 0.0 {
                for c in 0..3 {
                    stroke.set(c, y, x, T::from_f64_lossy(byte_to_model(b[c])));
                }
            }
        }
    }
    Ok((sketch, stroke))
}

/// Paints every non-white drawing pixel over `original`. Used for local
/// editing, where the user draws on top of an existing image.
pub fn overlay_drawing<T: Scalar>(original: &Image<T>, drawing: &Image<T>) -> Result<Image<T>> {
    let (h, w) = (drawing.height(), drawing.width());
    drawing.ensure_shape(Shape::new(3, h, w), "drawing")?;
    original.ensure_shape(Shape::new(3, h, w), "original image")?;
    let mut out = original.clone();
    for y in 0..h {
        for x in 0..w {
            let b = pixel_bytes(drawing, y, x);
            let (hi, lo) = (*b.iter().max().unwrap(), *b.iter().min().unwrap());
            if hi != lo || 255 - hi > crate::sampler::WHITE_TOLERANCE {
                for c in 0..3 {
                    out.set(c, y, x, drawing.get(c, y, x));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum Primitive {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Primitive {
    fn random<R: Rng>(rng: &mut R, size: f64) -> Self {
        let cx = rng.gen_range(0.25..0.75) * size;
        let cy = rng.gen_range(0.25..0.75) * size;
        if rng.gen_bool(0.5) {
            Primitive::Ellipse {
                cx,
                cy,
                rx: rng.gen_range(0.14..0.32) * size,
                ry: rng.gen_range(0.14..0.32) * size,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        } else {
            let n = rng.gen_range(3..=6);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // spread vertices so the polygon is not a sliver
            for (i, a) in angles.iter_mut().enumerate() {
                *a = 0.5 * *a + 0.5 * (i as f64 / n as f64) * std::f64::consts::TAU;
            }
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pts = angles
                .into_iter()
                .map(|a| {
                    let r = rng.gen_range(0.18..0.36) * size;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            Primitive::Polygon(pts)
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Primitive::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Primitive::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Saturated fill color (0..=255) whose luma lies well between the line
/// threshold and the light background.
fn shape_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let rgb = hsv_to_rgb(rng.gen(), rng.gen_range(0.55..1.0), rng.gen_range(0.45..0.95)).map(|c| c * 255.0);
        let l = luma(rgb);
        if (70.0..=150.0).contains(&l) {
            return rgb;
        }
    }
}

/// Renders one random training example.
pub fn synth_example<T: Scalar, R: Rng>(rng: &mut R, size: usize) -> Result<TrainingExample<T>> {
    if size < MIN_SYNTH_SIZE {
        return Err(DissError::range("size", format!("must be >= {MIN_SYNTH_SIZE}, got {size}")));
    }
    let sf = size as f64;
    let count = rng.gen_range(1..=3);
    let shapes: Vec<Primitive> = (0..count).map(|_| Primitive::random(rng, sf)).collect();
    let colors: Vec<[f64; 3]> = (0..count).map(|_| shape_color(rng)).collect();

    // light textured background: tint, linear gradient, faint ripple
    let base = 205.0 + rng.gen_range(-10.0..10.0);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-8.0..8.0));
    let (gx, gy) = (rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0));
    let (fx, fy, phase) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..6.3));
    let background = |x: f64, y: f64| -> [f64; 3] {
        let (u, v) = (x / sf - 0.5, y / sf - 0.5);
        let ripple = 3.0 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
        std::array::from_fn(|c| base + tint[c] + gx * u + gy * v + ripple)
    };

    // topmost shape index at a point, or None for background
    let label_at = |x: f64, y: f64| -> Option<usize> { (0..count).rev().find(|&i| shapes[i].contains(x, y)) };

    const SS: usize = 4;
    let mut photo = vec![[0.0f64; 3]; size * size];
    let mut labels = vec![usize::MAX; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let c = match label_at(px, py) {
                        Some(i) => colors[i],
                        None => background(px, py),
                    };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            photo[y * size + x] = acc.map(|v| v / (SS * SS) as f64);
            labels[y * size + x] = label_at(x as f64 + 0.5, y as f64 + 0.5).unwrap_or(usize::MAX);
        }
    }

    // outlines: pixels whose 4-neighbourhood crosses a label boundary
    let mut sketch = Image::filled(1, size, size, T::one());
    for y in 0..size {
        for x in 0..size {
            let l = labels[y * size + x];
            let differs = |yy: usize, xx: usize| labels[yy * size + xx] != l;
            let edge = (x > 0 && differs(y, x - 1))
                || (x + 1 < size && differs(y, x + 1))
                || (y > 0 && differs(y - 1, x))
                || (y + 1 < size && differs(y + 1, x));
            if edge {
                sketch.set(0, y, x, -T::one());
            }
        }
    }

    // stroke: per grid cell, mean photo color if shapes cover most of it
    let cell_of = |i: usize| i * STROKE_GRID / size;
    let mut sums = vec![([0.0f64; 3], 0usize, 0usize); STROKE_GRID * STROKE_GRID];
    for y in 0..size {
        for x in 0..size {
            let cell = &mut sums[cell_of(y) * STROKE_GRID + cell_of(x)];
            for k in 0..3 {
                cell.0[k] += photo[y * size + x][k];
            }
            cell.1 += 1;
            if labels[y * size + x] != usize::MAX {
                cell.2 += 1;
            }
        }
    }
    let mut stroke = Image::filled(3, size, size, T::one());
    for y in 0..size {
        for x in 0..size {
            let (sum, n, covered) = sums[cell_of(y) * STROKE_GRID + cell_of(x)];
            if 2 * covered > n {
                for k in 0..3 {
                    let byte = (sum[k] / n as f64).round().clamp(0.0, 255.0) as u8;
                    stroke.set(k, y, x, T::from_f64_lossy(byte_to_model(byte)));
                }
            }
        }
    }

    let mut photo_img = Image::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            for k in 0..3 {
                let byte = photo[y * size + x][k].round().clamp(0.0, 255.0) as u8;
                photo_img.set(k, y, x, T::from_f64_lossy(byte_to_model(byte)));
            }
        }
    }
    let comb = compose_comb(&sketch, &stroke)?;
    Ok(TrainingExample {
        photo: photo_img,
        sketch,
        stroke,
        comb,
    })
}

/// Generator for example `index` of a dataset seeded with `seed`.
pub fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn synth_dataset<T: Scalar>(seed: u64, count: usize, size: usize) -> Result<Vec<TrainingExample<T>>> {
    (0..count).map(|i| synth_example(&mut example_rng(seed, i), size)).collect()
}

// ---- PNG ----

pub fn encode_png_bytes<T: Scalar>(img: &Image<T>) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(DissError::UnsupportedImage(format!("cannot encode {c}-channel image"))),
    };
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let planar = img.to_bytes();
    let mut interleaved = vec![0u8; planar.len()];
    for ch in 0..c {
        for i in 0..h * w {
            interleaved[i * c + ch] = planar[ch * h * w + i];
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| DissError::Decode(e.to_string()))?;
        writer.write_image_data(&interleaved).map_err(|e| DissError::Decode(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit PNG. Alpha is composited over white; palette and
/// sub-byte gray are expanded. Returns 1 channel for gray, else 3.
pub fn decode_png_bytes<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| DissError::Decode(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| DissError::Decode(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(DissError::UnsupportedImage(format!("bit depth {:?} (only 8-bit is supported)", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let (src_ch, out_ch, alpha) = match info.color_type {
        png::ColorType::Grayscale => (1, 1, false),
        png::ColorType::GrayscaleAlpha => (2, 1, true),
        png::ColorType::Rgb => (3, 3, false),
        png::ColorType::Rgba => (4, 3, true),
        other => return Err(DissError::UnsupportedImage(format!("color type {other:?}"))),
    };
    let mut planar = vec![0u8; out_ch * h * w];
    for y in 0..h {
        let row = &buf[y * stride..y * stride + w * src_ch];
        for x in 0..w {
            let px = &row[x * src_ch..(x + 1) * src_ch];
            let a = if alpha { px[src_ch - 1] as f64 / 255.0 } else { 1.0 };
            for c in 0..out_ch {
                let v = px[c] as f64 * a + 255.0 * (1.0 - a);
                planar[c * h * w + y * w + x] = v.round() as u8;
            }
        }
    }
    Image::from_bytes(out_ch, h, w, &planar)
}

pub fn encode_png<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_png_bytes(img)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn decode_png<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    decode_png_bytes(&fs::read(path)?)
}

/// Gray drawing inputs become three equal channels.
pub fn to_rgb<T: Scalar>(img: Image<T>) -> Result<Image<T>> {
    match img.channels() {
        3 => Ok(img),
        1 => Image::concat_channels(&[&img, &img, &img]),
        c => Err(DissError::UnsupportedImage(format!("{c}-channel image"))),
    }
}

/// Single-channel view of a sketch image; RGB input is reduced by luma.
pub fn to_gray<T: Scalar>(img: Image<T>) -> Result<Image<T>> {
    match img.channels() {
        1 => Ok(img),
        3 => {
            let (h, w) = (img.height(), img.width());
            let mut out = Image::zeros(1, h, w);
            for y in 0..h {
                for x in 0..w {
                    let v: [f64; 3] = std::array::from_fn(|c| img.get(c, y, x).to_f64_lossy());
                    out.set(0, y, x, T::from_f64_lossy(luma(v)));
                }
            }
            Ok(out)
        }
        c => Err(DissError::UnsupportedImage(format!("{c}-channel image"))),
    }
}

// ---- dataset directories ----

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub count: usize,
    /// SHA-256 over every PNG in index order (photo, sketch, stroke).
    pub content_hash: String,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub manifest: Manifest,
    pub examples: Vec<TrainingExample<T>>,
}

fn example_paths(dir: &Path, i: usize) -> [PathBuf; 3] {
    let name = format!("{i:04}.png");
    [
        dir.join("photo").join(&name),
        dir.join("sketch").join(&name),
        dir.join("stroke").join(&name),
    ]
}

/// Generates and writes `dir/{manifest.json, photo/, sketch/, stroke/}`.
pub fn write_dataset(dir: impl AsRef<Path>, seed: u64, count: usize, size: usize) -> Result<Manifest> {
    let dir = dir.as_ref();
    if count == 0 {
        return Err(DissError::Empty("dataset"));
    }
    for sub in ["photo", "sketch", "stroke"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut hasher = Sha256::new();
    for i in 0..count {
        let ex: TrainingExample<f32> = synth_example(&mut example_rng(seed, i), size)?;
        let paths = example_paths(dir, i);
        for (img, path) in [&ex.photo, &ex.sketch, &ex.stroke].into_iter().zip(&paths) {
            let bytes = encode_png_bytes(img)?;
            hasher.update(&bytes);
            fs::write(path, &bytes)?;
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        size,
        count,
        content_hash: hex::encode(hasher.finalize()),
    };
    crate::fsio::write_atomic(dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads and schema-checks a dataset directory, verifying its content hash.
pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.count == 0 {
        return Err(DissError::Empty("dataset"));
    }
    let mut hasher = Sha256::new();
    let mut examples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let [p, s, k] = example_paths(dir, i);
        let mut read = |path: &Path| -> Result<Image<T>> {
            let bytes = fs::read(path)?;
            hasher.update(&bytes);
            decode_png_bytes(&bytes)
        };
        let photo = read(&p)?;
        let sketch = read(&s)?;
        let stroke = read(&k)?;
        let comb = compose_comb(&sketch, &stroke)?;
        let ex = TrainingExample {
            photo,
            sketch,
            stroke,
            comb,
        };
        ex.validate()?;
        if ex.size() != manifest.size {
            return Err(DissError::shape("dataset example", manifest.size.to_string(), ex.size().to_string()));
        }
        examples.push(ex);
    }
    let hash = hex::encode(hasher.finalize());
    if hash != manifest.content_hash {
        return Err(DissError::Decode(format!(
            "dataset content hash {hash} does not match manifest {}",
            manifest.content_hash
        )));
    }
    Ok(Dataset { manifest, examples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(seed: u64) -> TrainingExample<f64> {
        synth_example(&mut example_rng(seed, 0), 32).unwrap()
    }

    fn gray_pixel(v: u8) -> Image<f64> {
        Image::from_bytes(3, 1, 1, &[v, v, v]).unwrap()
    }

    #[test]
    fn overlay_keeps_original_under_white() {
        let original = Image::<f64>::from_bytes(3, 1, 3, &[10, 20, 30, 40, 50, 60, 70, 80, 90]).unwrap();
        let drawing = Image::<f64>::from_bytes(3, 1, 3, &[255, 0, 254, 255, 0, 254, 255, 0, 254]).unwrap();
        let out = overlay_drawing(&original, &drawing).unwrap();
        // pixel 0 white, pixel 1 black, pixel 2 within the white tolerance
        assert_eq!(out.to_bytes(), vec![10, 0, 30, 40, 0, 60, 70, 0, 90]);
    }

    #[test]
    fn extraction_rules() {
        let (s, k) = extract_sketch_stroke(&gray_pixel(40)).unwrap();
        assert_eq!(s.data(), &[-1.0]);
        assert_eq!(k.data(), &[1.0, 1.0, 1.0]);
        let (s, k) = extract_sketch_stroke(&gray_pixel(60)).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(k.data(), &[1.0, 1.0, 1.0]);
        let red = Image::<f64>::from_bytes(3, 1, 1, &[255, 0, 0]).unwrap();
        let (s, k) = extract_sketch_stroke(&red).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(k, red);
        // luma of pure red sits just above the threshold
        assert!((luma([255.0, 0.0, 0.0]) - 76.245).abs() < 1e-9);
    }

    #[test]
    fn composition_cases() {
        let e = ex(1);
        let blank = Image::filled(1, 32, 32, 1.0);
        assert_eq!(compose_comb(&blank, &e.stroke).unwrap(), e.stroke);
        let white = Image::filled(3, 32, 32, 1.0);
        let c = compose_comb(&e.sketch, &white).unwrap();
        for ch in 0..3 {
            assert_eq!(c.plane(ch), e.sketch.plane(0));
        }
        assert!(compose_comb(&Image::filled(1, 8, 8, 1.0), &white).is_err());
    }

    #[test]
    fn round_trip_recovers_conditions() {
        for seed in 0..10 {
            let e = ex(seed);
            let (s, k) = extract_sketch_stroke(&e.comb).unwrap();
            assert_eq!(s, e.sketch);
            for y in 0..32 {
                for x in 0..32 {
                    if e.sketch.get(0, y, x) > 0.0 {
                        for c in 0..3 {
                            assert_eq!(k.get(c, y, x), e.stroke.get(c, y, x));
                        }
                    }
                }
            }
            // idempotent on its own outputs
            let again = extract_sketch_stroke(&compose_comb(&s, &k).unwrap()).unwrap();
            assert!(again.0.max_abs_diff(&s) <= 2.0 / 255.0);
            assert!(again.1.max_abs_diff(&k) <= 2.0 / 255.0);
        }
    }

    #[test]
    fn example_invariants() {
        for seed in 0..20 {
            let e = ex(seed);
            e.validate().unwrap();
            assert!(e.sketch.data().iter().all(|&v| v == 1.0 || v < -0.6));
            assert!(e.sketch.data().iter().any(|&v| v < 0.0));
            // uncolored stroke cells are exactly white
            for y in 0..32 {
                for x in 0..32 {
                    let b = pixel_bytes(&e.stroke, y, x);
                    assert!(b == [255; 3] || saturation(b) > 0.0, "{b:?}");
                }
            }
        }
        assert!(synth_example::<f64, _>(&mut example_rng(0, 0), 15).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(ex(3), ex(3));
        assert_ne!(ex(3).photo, ex(4).photo);
    }

    #[test]
    fn outlines_sit_on_color_gradients() {
        for seed in 0..10 {
            let e = ex(seed);
            let s = 32;
            // strong local color change: max byte difference to a 4-neighbour
            let mut strong = vec![false; s * s];
            for y in 0..s {
                for x in 0..s {
                    let p = pixel_bytes(&e.photo, y, x);
                    let mut best = 0i32;
                    for (dy, dx) in [(0i32, 1i32), (1, 0), (0, -1), (-1, 0)] {
                        let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < s && (xx as usize) < s {
                            let q = pixel_bytes(&e.photo, yy as usize, xx as usize);
                            for c in 0..3 {
                                best = best.max((p[c] as i32 - q[c] as i32).abs());
                            }
                        }
                    }
                    strong[y * s + x] = best >= 24;
                }
            }
            let (mut total, mut near) = (0, 0);
            for y in 0..s {
                for x in 0..s {
                    if e.sketch.get(0, y, x) < 0.0 {
                        total += 1;
                        let hit = (y.saturating_sub(2)..(y + 3).min(s))
                            .any(|yy| (x.saturating_sub(2)..(x + 3).min(s)).any(|xx| strong[yy * s + xx]));
                        near += hit as usize;
                    }
                }
            }
            assert!(near as f64 >= 0.9 * total as f64, "seed {seed}: {near}/{total}");
        }
    }

    #[test]
    fn stroke_matches_photo_on_interior_cells() {
        for seed in 0..10 {
            let e = ex(seed);
            let (mut sq, mut n) = (0.0, 0);
            for cy in 0..8 {
                for cx in 0..8 {
                    let cell: Vec<(usize, usize)> =
                        (0..4).flat_map(|dy| (0..4).map(move |dx| (cy * 4 + dy, cx * 4 + dx))).collect();
                    // interior: stroke colored and no outline in the cell
                    let colored = |y: usize, x: usize| (0..3).any(|c| e.stroke.get(c, y, x) < 1.0);
                    let interior = cell.iter().all(|&(y, x)| colored(y, x) && e.sketch.get(0, y, x) > 0.0);
                    if !interior {
                        continue;
                    }
                    for c in 0..3 {
                        let mean = |img: &Image<f64>| cell.iter().map(|&(y, x)| img.get(c, y, x)).sum::<f64>() / 16.0;
                        sq += (mean(&e.stroke) - mean(&e.photo)).powi(2);
                        n += 1;
                    }
                }
            }
            if n > 0 {
                assert!((sq / n as f64).sqrt() < 0.1, "seed {seed}");
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let e = ex(2);
        for img in [&e.photo, &e.sketch] {
            let back: Image<f64> = decode_png_bytes(&encode_png_bytes(img).unwrap()).unwrap();
            assert_eq!(&back, img);
        }
        let gray = gray_pixel(128);
        let back: Image<f64> = decode_png_bytes(&encode_png_bytes(&gray).unwrap()).unwrap();
        assert!(back.data().iter().all(|v| v.abs() <= 1.0 / 255.0));
    }

    #[test]
    fn png_rejects_sixteen_bit_and_composites_alpha() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            enc.write_header().unwrap().write_image_data(&[0, 0]).unwrap();
        }
        assert!(matches!(decode_png_bytes::<f32>(&out), Err(DissError::UnsupportedImage(_))));
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[0, 0, 0, 0]).unwrap();
        }
        let img: Image<f64> = decode_png_bytes(&out).unwrap();
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
        assert!(decode_png_bytes::<f32>(b"not a png").is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_dataset(dir.path().join("a"), 5, 4, 16).unwrap();
        let b = write_dataset(dir.path().join("b"), 5, 4, 16).unwrap();
        assert_eq!(a, b);
        let c = write_dataset(dir.path().join("c"), 6, 4, 16).unwrap();
        assert_ne!(a.content_hash, c.content_hash);
        let ds: Dataset<f32> = load_dataset(dir.path().join("a")).unwrap();
        assert_eq!(ds.examples.len(), 4);
        let direct: Vec<TrainingExample<f32>> = synth_dataset(5, 4, 16).unwrap();
        assert_eq!(ds.examples, direct);
        // tampering is detected
        fs::write(dir.path().join("a/photo/0001.png"), encode_png_bytes(&direct[0].photo).unwrap()).unwrap();
        assert!(load_dataset::<f32>(dir.path().join("a")).is_err());
    }
}
