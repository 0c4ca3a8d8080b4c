//! PNG encoding at the tensor boundary: 8-bit RGB maps linearly onto `[-1, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn byte_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// `(1, 3, H, W)` tensor from an RGB image.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = byte_to_unit(p[c]);
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("sized buffer")
}

/// RGB image from the first sample of an `(N, 3, H, W)` tensor.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (_, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape {
            expected: vec![1, 3, h, w],
            actual: t.shape().to_vec(),
        });
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([
            unit_to_byte(d[i]),
            unit_to_byte(d[h * w + i]),
            unit_to_byte(d[2 * h * w + i]),
        ])
    }))
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let img = tensor_to_rgb(t)?;
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(buf)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    ensure_parent(path)?;
    tensor_to_rgb(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn as_indices(&self) -> Vec<usize> {
        self.classes.iter().map(|&c| c as usize).collect()
    }
}

pub fn load_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    Ok(LabelMap {
        width: img.width() as usize,
        height: img.height() as usize,
        classes: img.into_raw(),
    })
}

pub fn save_label(path: &Path, label: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let img = GrayImage::from_raw(label.width as u32, label.height as u32, label.classes.clone())
        .ok_or_else(|| Error::arg("label buffer does not match its size"))?;
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// Bilinear resize with half-pixel centers, per sample and channel.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("resize target must be non-empty"));
    }
    let src = t.data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    let axis = |o: usize, out_len: usize, in_len: usize| {
        let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|y| axis(y, out_h, h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, out_w, w)).collect();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bottom = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                o[y * out_w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::from_vec(&[n, c, out_h, out_w], out)
}

/// Nearest-neighbour resize for label maps.
pub fn resize_label(label: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let mut classes = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (y * label.height / out_h).min(label.height - 1);
        for x in 0..out_w {
            let sx = (x * label.width / out_w).min(label.width - 1);
            classes.push(label.classes[sy * label.width + sx]);
        }
    }
    LabelMap {
        width: out_w,
        height: out_h,
        classes,
    }
}

/// Crops `(top, left, size_h, size_w)` from every sample.
pub fn crop(t: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if top + ch > h || left + cw > w {
        return Err(Error::arg(format!("crop {ch}x{cw} at ({top}, {left}) exceeds {h}x{w}")));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(n * c * ch * cw);
    for plane in 0..n * c {
        for y in top..top + ch {
            let row = plane * h * w + y * w;
            out.extend_from_slice(&src[row + left..row + left + cw]);
        }
    }
    Tensor::from_vec(&[n, c, ch, cw], out)
}

pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[s.len() - 1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Tiles single-image tensors `(1, C, H, W)` into one image, one row per
/// inner vector, with a `gap`-pixel border of `-1` (black).
pub fn tile_grid(rows: &[Vec<Tensor>], gap: usize) -> Result<Tensor> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::arg("empty image grid"))?;
    let (_, c, h, w) = first.dims4()?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + gap) + gap, cols * (w + gap) + gap);
    let mut grid = Tensor::full(&[1, c, gh, gw], -1.0);
    for (r, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            if img.dims4()? != (1, c, h, w) {
                return Err(Error::Shape {
                    expected: vec![1, c, h, w],
                    actual: img.shape().to_vec(),
                });
            }
            let (top, left) = (gap + r * (h + gap), gap + k * (w + gap));
            let (src, dst) = (img.data(), grid.data_mut());
            for ch in 0..c {
                for y in 0..h {
                    let s = (ch * h + y) * w;
                    let d = (ch * gh + top + y) * gw + left;
                    dst[d..d + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout() {
        let a = Tensor::full(&[1, 1, 2, 2], 0.5);
        let g = tile_grid(&[vec![a.clone(), a.clone()], vec![a]], 1).unwrap();
        assert_eq!(g.shape(), &[1, 1, 7, 7]);
        assert_eq!(g.data()[8], 0.5);
        assert_eq!(g.data()[0], -1.0);
        // second row, second column is empty
        assert_eq!(g.data()[4 * 7 + 4], -1.0);
        assert!(tile_grid(&[], 1).is_err());
    }

    #[test]
    fn byte_mapping_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(p)), p);
        }
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(unit_to_byte(7.0), 255);
    }

    #[test]
    fn png_round_trip_in_memory_and_on_disk() {
        let img = RgbImage::from_fn(6, 4, |x, y| image::Rgb([x as u8 * 40, y as u8 * 60, 200]));
        let t = rgb_to_tensor(&img);
        assert_eq!(t.shape(), [1, 3, 4, 6]);
        let bytes = encode_png(&t).unwrap();
        assert_eq!(decode_png(&bytes).unwrap(), t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/a.png");
        save_image(&path, &t).unwrap();
        assert_eq!(load_image(&path).unwrap(), t);
        assert!(decode_png(b"not a png").is_err());
    }

    #[test]
    fn label_round_trip() {
        let label = LabelMap {
            width: 3,
            height: 2,
            classes: vec![0, 1, 1, 0, 2, 0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        save_label(&path, &label).unwrap();
        assert_eq!(load_label(&path).unwrap(), label);
        let big = resize_label(&label, 4, 6);
        assert_eq!(big.classes[..6], [0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let t = Tensor::full(&[1, 3, 5, 7], 0.25);
        let r = resize_bilinear(&t, 9, 4).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(resize_bilinear(&x, 2, 2).unwrap(), x);
        let up = resize_bilinear(&x, 4, 4).unwrap();
        // half-pixel centers: corners clamp, the (1, 1) sample sits a quarter in
        assert_eq!(up.data()[0], 0.0);
        assert!((up.data()[5] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn crop_and_flip() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let c = crop(&x, 1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), [4.0, 5.0, 7.0, 8.0]);
        assert!(crop(&x, 2, 0, 2, 2).is_err());
        let f = flip_horizontal(&x);
        assert_eq!(f.data()[..3], [2.0, 1.0, 0.0]);
        assert_eq!(flip_horizontal(&f), x);
    }
}
