//! Procedural domains with a single known style axis.
//!
//! Content (shape geometry, texture, base colours) depends only on the content
//! seed and the image index. The style parameter is applied afterwards as an
//! exact HSV hue rotation or a brightness offset, so two specs that differ
//! only in `theta` render pixel-aligned pairs.
//!
//! Base palette: a textured background around hue 0 and shapes around hue
//! 180 sharing the same value texture, so colour is the only cue separating
//! them. The background covers most pixels, which puts the chroma-weighted
//! mean hue of an unstyled domain at 0.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_io::{save_image, save_label, LabelMap};
use super::manifest::DatasetManifest;
use super::style::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_CLASS: u8 = 1;
pub const BACKGROUND_CLASS: u8 = 0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleKind {
    /// `theta` in degrees, added to every pixel's hue.
    #[default]
    Hue,
    /// `theta` in `[-1, 1]` tensor units, added to every channel.
    Brightness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticStyleSpec {
    pub theta: f64,
    #[serde(default)]
    pub kind: StyleKind,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    #[serde(default)]
    pub blur: f64,
    pub content_seed: u64,
    pub count: usize,
    pub size: usize,
}

impl SyntheticStyleSpec {
    pub fn hue(theta: f64, content_seed: u64, count: usize, size: usize) -> Self {
        Self {
            theta,
            kind: StyleKind::Hue,
            blur: 0.0,
            content_seed,
            count,
            size,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 || self.size < 8 {
            return Err(Error::arg("synthetic domains need count >= 1 and size >= 8"));
        }
        if !self.theta.is_finite() || self.blur.is_nan() || self.blur < 0.0 {
            return Err(Error::arg("theta must be finite and blur non-negative"));
        }
        if self.kind == StyleKind::Brightness && !(-1.0..=1.0).contains(&self.theta) {
            return Err(Error::arg("brightness offset must lie in [-1, 1]"));
        }
        Ok(())
    }
}

enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                // convex, counter-clockwise: inside when left of every edge
                pts.iter()
                    .zip(pts.iter().cycle().skip(1))
                    .all(|(a, b)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0)
            }
        }
    }
}

struct Content {
    hue: Vec<f64>,
    sat: Vec<f64>,
    val: Vec<f64>,
    mask: Vec<u8>,
}

fn render_content(seed: u64, index: usize, size: usize) -> Content {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let s = size as f64;

    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.15..0.6);
            let dir = rng.random_range(0.0..PI);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let bg_hue = rng.random_range(-10.0..10.0);
    let bg_sat = rng.random_range(0.55..0.8);

    let n_shapes = rng.random_range(1..=3);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cx = rng.random_range(0.2 * s..0.8 * s);
        let cy = rng.random_range(0.2 * s..0.8 * s);
        let r = rng.random_range(0.1 * s..0.25 * s);
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                cx,
                cy,
                rx: r,
                ry: r * rng.random_range(0.5..1.0),
                angle: rng.random_range(0.0..PI),
            }
        } else {
            let sides = rng.random_range(3..=5);
            let start = rng.random_range(0.0..2.0 * PI);
            let pts = (0..sides)
                .map(|k| {
                    let a = start + 2.0 * PI * k as f64 / sides as f64;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            Shape::Polygon(pts)
        };
        let hue = 180.0 + rng.random_range(-40.0..40.0);
        let sat = rng.random_range(0.6..0.95);
        shapes.push((shape, hue, sat));
    }

    let n = size * size;
    let mut c = Content {
        hue: vec![bg_hue; n],
        sat: vec![bg_sat; n],
        val: vec![0.0; n],
        mask: vec![BACKGROUND_CLASS; n],
    };
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex: f64 = waves.iter().map(|(a, b, p)| (a * fx + b * fy + p).sin()).sum::<f64>() / 4.0;
            c.val[i] = 0.65 + 0.25 * tex;
            for (shape, hue, sat) in &shapes {
                if shape.contains(fx, fy) {
                    c.hue[i] = *hue;
                    c.sat[i] = *sat;
                    c.mask[i] = SHAPE_CLASS;
                }
            }
        }
    }
    c
}

fn gaussian_blur(data: &mut [f64], size: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let sample = |src: &[f64], i: isize| src[i.clamp(0, size as isize - 1) as usize];
    let mut tmp = vec![0.0; size];
    for plane in data.chunks_mut(size * size) {
        for row in 0..size {
            let line: Vec<f64> = plane[row * size..(row + 1) * size].to_vec();
            for (x, t) in tmp.iter_mut().enumerate() {
                *t = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * sample(&line, x as isize + k as isize - radius))
                    .sum::<f64>()
                    / norm;
            }
            plane[row * size..(row + 1) * size].copy_from_slice(&tmp);
        }
        for col in 0..size {
            let line: Vec<f64> = (0..size).map(|y| plane[y * size + col]).collect();
            for (y, t) in tmp.iter_mut().enumerate() {
                *t = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * sample(&line, y as isize + k as isize - radius))
                    .sum::<f64>()
                    / norm;
            }
            for y in 0..size {
                plane[y * size + col] = tmp[y];
            }
        }
    }
}

/// Renders sample `index` of a styled domain as a `(1, 3, S, S)` tensor and
/// its shape/background label map.
pub fn render_sample(spec: &SyntheticStyleSpec, index: usize) -> (Tensor, LabelMap) {
    let size = spec.size;
    let content = render_content(spec.content_seed, index, size);
    let n = size * size;
    let mut rgb = vec![0.0; 3 * n];
    for i in 0..n {
        let hue = match spec.kind {
            StyleKind::Hue => content.hue[i] + spec.theta,
            StyleKind::Brightness => content.hue[i],
        };
        let (r, g, b) = hsv_to_rgb(hue, content.sat[i], content.val[i]);
        let offset = match spec.kind {
            StyleKind::Hue => 0.0,
            StyleKind::Brightness => spec.theta / 2.0,
        };
        for (c, v) in [r, g, b].into_iter().enumerate() {
            rgb[c * n + i] = (v + offset).clamp(0.0, 1.0);
        }
    }
    if spec.blur > 0.0 {
        gaussian_blur(&mut rgb, size, spec.blur);
    }
    // quantize like a PNG round trip so in-memory and on-disk samples agree
    let data = rgb
        .into_iter()
        .map(|v| super::image_io::byte_to_unit(super::image_io::unit_to_byte(v * 2.0 - 1.0)))
        .collect();
    let image = Tensor::from_vec(&[1, 3, size, size], data).expect("sized buffer");
    let label = LabelMap {
        width: size,
        height: size,
        classes: content.mask,
    };
    (image, label)
}

/// Renders a whole domain in memory.
pub fn render_domain(spec: &SyntheticStyleSpec) -> Result<(Vec<Tensor>, Vec<LabelMap>)> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| render_sample(spec, i)).unzip())
}

/// Writes one domain under `out_dir/name` with images, labels and a manifest.
pub fn generate_domain(spec: &SyntheticStyleSpec, out_dir: &Path, name: &str) -> Result<DatasetManifest> {
    spec.validate()?;
    let root = out_dir.join(name);
    let mut images = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (img, label) = render_sample(spec, i);
        let img_rel = Path::new("images").join(format!("{i:05}.png"));
        let label_rel = Path::new("labels").join(format!("{i:05}.png"));
        save_image(&root.join(&img_rel), &img)?;
        save_label(&root.join(&label_rel), &label)?;
        images.push(img_rel);
        labels.push(label_rel);
    }
    let manifest = DatasetManifest {
        root,
        domain: name.to_string(),
        width: spec.size,
        height: spec.size,
        images,
        labels: Some(labels),
    };
    manifest.save()?;
    Ok(manifest)
}

/// Writes paired `source` and `target` domains that share content geometry.
pub fn generate_synthetic_domains(
    source: &SyntheticStyleSpec,
    target: &SyntheticStyleSpec,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if source.content_seed != target.content_seed || source.count != target.count || source.size != target.size {
        return Err(Error::arg(
            "source and target specs must share content seed, count and size",
        ));
    }
    Ok((
        generate_domain(source, out_dir, "source")?,
        generate_domain(target, out_dir, "target")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::style::{measure_style_statistic, wrap_degrees, StatisticKind};

    #[test]
    fn theta_changes_style_not_geometry() {
        let a = SyntheticStyleSpec::hue(0.0, 7, 4, 32);
        let b = SyntheticStyleSpec {
            theta: 120.0,
            ..a.clone()
        };
        for i in 0..4 {
            let (ia, la) = render_sample(&a, i);
            let (ib, lb) = render_sample(&b, i);
            assert_eq!(la, lb);
            assert!(ia.max_abs_diff(&ib) > 0.1);
            assert!(la.classes.contains(&SHAPE_CLASS) && la.classes.contains(&BACKGROUND_CLASS));
        }
        assert_eq!(render_domain(&a).unwrap(), render_domain(&a.clone()).unwrap());
    }

    #[test]
    fn measured_hue_tracks_theta() {
        for theta in [0.0, 120.0, 240.0] {
            let spec = SyntheticStyleSpec::hue(theta, 3, 100, 32);
            let (images, _) = render_domain(&spec).unwrap();
            let hue = measure_style_statistic(&images, StatisticKind::MeanHue).unwrap();
            assert!(wrap_degrees(hue - theta).abs() < 2.0, "theta {theta}: {hue}");
        }
    }

    #[test]
    fn brightness_and_blur() {
        let mut spec = SyntheticStyleSpec::hue(0.0, 1, 3, 16);
        let (plain, _) = render_domain(&spec).unwrap();
        spec.kind = StyleKind::Brightness;
        spec.theta = 0.3;
        let (bright, _) = render_domain(&spec).unwrap();
        let b0 = measure_style_statistic(&plain, StatisticKind::MeanBrightness).unwrap();
        let b1 = measure_style_statistic(&bright, StatisticKind::MeanBrightness).unwrap();
        assert!(b1 > b0 + 0.2);
        spec.theta = 0.0;
        spec.blur = 1.0;
        let (blurred, _) = render_domain(&spec).unwrap();
        assert!(blurred[0].max_abs_diff(&plain[0]) > 0.0);
        spec.theta = 2.0;
        assert!(render_domain(&spec).is_err());
    }

    #[test]
    fn domains_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = SyntheticStyleSpec::hue(0.0, 5, 3, 16);
        let t = SyntheticStyleSpec {
            theta: 0.0,
            ..s.clone()
        };
        let (ms, mt) = generate_synthetic_domains(&s, &t, dir.path()).unwrap();
        ms.validate().unwrap();
        assert_eq!(ms.len(), 3);
        for i in 0..3 {
            assert_eq!(ms.load_image(i).unwrap(), mt.load_image(i).unwrap());
            assert_eq!(ms.load_image(i).unwrap(), render_sample(&s, i).0);
            assert_eq!(ms.load_label(i).unwrap(), render_sample(&s, i).1);
        }
        let other = SyntheticStyleSpec {
            content_seed: 6,
            ..s.clone()
        };
        assert!(generate_synthetic_domains(&s, &other, dir.path()).is_err());
    }
}
