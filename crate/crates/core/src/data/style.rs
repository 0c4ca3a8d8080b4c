//! Colour-space helpers and the scalar style statistics used as oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    /// Chroma-weighted circular mean of HSV hue, degrees in `(-180, 180]`.
    MeanHue,
    /// Mean of the RGB channel average, in tensor units `[-1, 1]`.
    MeanBrightness,
}

impl std::str::FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-hue" => Ok(StatisticKind::MeanHue),
            "mean-brightness" => Ok(StatisticKind::MeanBrightness),
            other => Err(Error::arg(format!(
                "unknown statistic '{other}' (expected mean-hue or mean-brightness)"
            ))),
        }
    }
}

/// `(h, s, v)` with `h` in degrees `[0, 360)` from RGB in `[0, 1]`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let h = if c == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { c / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Wraps an angle difference into `(-180, 180]`.
pub fn wrap_degrees(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Sum over all pixels of `chroma * (cos h, sin h)`, and the pixel count.
pub fn chroma_vector_sum(images: &[Tensor]) -> Result<([f64; 2], usize)> {
    let mut acc = [0.0, 0.0];
    let mut count = 0;
    for img in images {
        let (n, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::arg("hue statistics need RGB images"));
        }
        let d = img.data();
        let plane = h * w;
        for s in 0..n {
            let base = s * 3 * plane;
            for i in 0..plane {
                let rgb = [d[base + i], d[base + plane + i], d[base + 2 * plane + i]]
                    .map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
                let (hue, _, _) = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
                let chroma = rgb[0].max(rgb[1]).max(rgb[2]) - rgb[0].min(rgb[1]).min(rgb[2]);
                let rad = hue.to_radians();
                acc[0] += chroma * rad.cos();
                acc[1] += chroma * rad.sin();
            }
            count += plane;
        }
    }
    Ok((acc, count))
}

/// Per-pixel mean of the chroma-weighted hue vector.
pub fn mean_chroma_vector(images: &[Tensor]) -> Result<[f64; 2]> {
    if images.is_empty() {
        return Err(Error::arg("style statistic of an empty image set"));
    }
    let (acc, count) = chroma_vector_sum(images)?;
    Ok([acc[0] / count as f64, acc[1] / count as f64])
}

pub fn measure_style_statistic(images: &[Tensor], kind: StatisticKind) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::arg("style statistic of an empty image set"));
    }
    match kind {
        StatisticKind::MeanHue => {
            let (acc, _) = chroma_vector_sum(images)?;
            if acc[0].hypot(acc[1]) < 1e-12 {
                return Err(Error::arg("mean hue is undefined for achromatic images"));
            }
            Ok(wrap_degrees(acc[1].atan2(acc[0]).to_degrees()))
        }
        StatisticKind::MeanBrightness => {
            let (mut sum, mut count) = (0.0, 0usize);
            for img in images {
                img.dims4()?;
                sum += img.sum();
                count += img.len();
            }
            Ok(sum / count as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn solid(r: f64, g: f64, b: f64) -> Tensor {
        let mut data = Vec::new();
        for v in [r, g, b] {
            data.extend(std::iter::repeat_n(v * 2.0 - 1.0, 16));
        }
        Tensor::from_vec(&[1, 3, 4, 4], data).unwrap()
    }

    #[test]
    fn gray_brightness_is_zero() {
        let gray = Tensor::zeros(&[2, 3, 4, 4]);
        assert_eq!(
            measure_style_statistic(std::slice::from_ref(&gray), StatisticKind::MeanBrightness).unwrap(),
            0.0
        );
        assert!(measure_style_statistic(&[gray], StatisticKind::MeanHue).is_err());
        assert!(measure_style_statistic(&[], StatisticKind::MeanBrightness).is_err());
    }

    #[test]
    fn red_and_green_hues() {
        let red = measure_style_statistic(&[solid(1.0, 0.0, 0.0)], StatisticKind::MeanHue).unwrap();
        let green = measure_style_statistic(&[solid(0.0, 1.0, 0.0)], StatisticKind::MeanHue).unwrap();
        assert!(red.abs() < 1e-9);
        assert!((green - 120.0).abs() < 1e-9);
        let mixed =
            measure_style_statistic(&[solid(1.0, 0.0, 0.0), solid(0.0, 1.0, 0.0)], StatisticKind::MeanHue).unwrap();
        assert!(mixed > red && mixed < green);
        assert!((mixed - 60.0).abs() < 1e-9);
    }

    #[test]
    fn hue_wraps_around_zero() {
        let a = solid(1.0, 0.0, 0.2);
        let b = solid(1.0, 0.2, 0.0);
        let m = measure_style_statistic(&[a, b], StatisticKind::MeanHue).unwrap();
        assert!(m.abs() < 1e-9, "{m}");
    }

    #[test]
    fn hsv_reference_values() {
        assert_eq!(rgb_to_hsv(0.0, 0.0, 1.0), (240.0, 1.0, 1.0));
        let (r, g, b) = hsv_to_rgb(300.0, 0.5, 0.8);
        assert!((r - 0.8).abs() < 1e-12 && (g - 0.4).abs() < 1e-12 && (b - 0.8).abs() < 1e-12);
        assert_eq!(wrap_degrees(350.0), -10.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
    }

    proptest! {
        #[test]
        fn hsv_round_trip(h in 0.0..360.0f64, s in 0.0..=1.0f64, v in 0.0..=1.0f64) {
            let (r, g, b) = hsv_to_rgb(h, s, v);
            let (h2, s2, v2) = rgb_to_hsv(r, g, b);
            prop_assert!((v - v2).abs() < 1e-9);
            if v > 1e-6 {
                prop_assert!((s - s2).abs() < 1e-9);
            }
            if s * v > 1e-6 {
                prop_assert!(wrap_degrees(h - h2).abs() < 1e-6);
            }
        }
    }
}
