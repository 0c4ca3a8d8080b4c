//! Transport-independent request handling for the translation service.
//!
//! Models are loaded once into an immutable registry; every handler takes
//! `&self`, so one registry can serve concurrent requests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_model;
use crate::data::image_io::{crop, decode_png, encode_png, resize_bilinear};
use crate::domainness::{validate_vector, Domainness, DomainnessValue};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::translation::Generator;

/// One loaded source-to-target generator with its metadata.
#[derive(Debug)]
pub struct ModelEntry {
    pub id: String,
    pub generator: Generator,
    pub source_name: String,
    /// Target domain names, one per domainness component.
    pub domain_names: Vec<String>,
    pub image_size: usize,
    pub checkpoint_hash: String,
    pub path: PathBuf,
}

impl ModelEntry {
    pub fn k(&self) -> usize {
        self.domain_names.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub k: usize,
    pub source_name: String,
    pub domain_names: Vec<String>,
    pub image_size: usize,
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub models: Vec<ModelInfo>,
}

/// A scalar for two-domain models or a `K`-vector for multi-target models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZInput {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateRequest {
    /// May be omitted when exactly one model is loaded.
    #[serde(default)]
    pub model: Option<String>,
    /// Base64-encoded PNG.
    pub image: String,
    pub z: ZInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    #[serde(default)]
    pub model: Option<String>,
    pub image: String,
    pub grid: Vec<ZInput>,
}

/// How the input was fitted to the model's square input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizeInfo {
    pub original_width: usize,
    pub original_height: usize,
    pub model_size: usize,
    pub scaled_width: usize,
    pub scaled_height: usize,
    pub pad_left: usize,
    pub pad_top: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslateResponse {
    pub model: String,
    /// Base64-encoded PNG with the input's dimensions.
    pub image: String,
    pub z: ZInput,
    pub width: usize,
    pub height: usize,
    pub resize: Option<ResizeInfo>,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub model: String,
    pub results: Vec<TranslateResponse>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    BadRequest,
    NotFound,
    InvalidDomainness,
    Internal,
}

impl ErrorKind {
    pub fn status(self) -> u16 {
        match self {
            ErrorKind::BadRequest => 400,
            ErrorKind::NotFound => 404,
            ErrorKind::InvalidDomainness => 422,
            ErrorKind::Internal => 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ServiceError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn status(&self) -> u16 {
        self.kind.status()
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.message, self.status())
    }
}

impl std::error::Error for ServiceError {}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Default)]
pub struct ServiceState {
    models: BTreeMap<String, ModelEntry>,
}

impl ServiceState {
    /// Loads checkpoints, keyed by file stem. Duplicate stems are an error.
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut state = Self::default();
        for path in paths {
            state.insert(entry_from_checkpoint(path)?)?;
        }
        Ok(state)
    }

    pub fn insert(&mut self, entry: ModelEntry) -> Result<()> {
        if self.models.contains_key(&entry.id) {
            return Err(Error::arg(format!("model id '{}' is loaded twice", entry.id)));
        }
        self.models.insert(entry.id.clone(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn model(&self, id: Option<&str>) -> ServiceResult<&ModelEntry> {
        match id {
            Some(id) => self
                .models
                .get(id)
                .ok_or_else(|| ServiceError::new(ErrorKind::NotFound, format!("unknown model '{id}'"))),
            None if self.models.len() == 1 => Ok(self.models.values().next().expect("one model")),
            None if self.models.is_empty() => Err(ServiceError::new(ErrorKind::NotFound, "no models are loaded")),
            None => Err(ServiceError::new(
                ErrorKind::BadRequest,
                "several models are loaded; name one in the 'model' field",
            )),
        }
    }

    pub fn handle_info(&self) -> InfoResponse {
        InfoResponse {
            models: self
                .models
                .values()
                .map(|m| ModelInfo {
                    id: m.id.clone(),
                    k: m.k(),
                    source_name: m.source_name.clone(),
                    domain_names: m.domain_names.clone(),
                    image_size: m.image_size,
                    checkpoint_hash: m.checkpoint_hash.clone(),
                })
                .collect(),
        }
    }

    pub fn handle_translate(&self, req: &TranslateRequest) -> ServiceResult<TranslateResponse> {
        let start = Instant::now();
        let model = self.model(req.model.as_deref())?;
        let z = validate_z(model, &req.z)?;
        let image = decode_request_image(&req.image)?;
        let mut resp = translate_one(model, &image, &z, &req.z)?;
        resp.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(resp)
    }

    /// Translates one image at every grid point, in grid order. The whole
    /// grid is validated before any translation runs.
    pub fn sweep(&self, req: &SweepRequest) -> ServiceResult<SweepResponse> {
        let model = self.model(req.model.as_deref())?;
        let zs = req
            .grid
            .iter()
            .map(|z| validate_z(model, z))
            .collect::<ServiceResult<Vec<_>>>()?;
        let image = decode_request_image(&req.image)?;
        let mut results = Vec::with_capacity(zs.len());
        for (z, raw) in zs.iter().zip(&req.grid) {
            let start = Instant::now();
            let mut resp = translate_one(model, &image, z, raw)?;
            resp.latency_ms = start.elapsed().as_secs_f64() * 1e3;
            results.push(resp);
        }
        Ok(SweepResponse {
            model: model.id.clone(),
            results,
        })
    }
}

/// Builds a registry entry from a training checkpoint.
pub fn entry_from_checkpoint(path: &Path) -> Result<ModelEntry> {
    let loaded = load_model(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::arg(format!("cannot derive a model id from {}", path.display())))?;
    let mut names = loaded.state.config.resolved_domain_names();
    let source_name = names.remove(0);
    Ok(ModelEntry {
        id,
        image_size: loaded.state.config.crop_size,
        generator: loaded.state.models.g_st,
        source_name,
        domain_names: names,
        checkpoint_hash: loaded.hash,
        path: loaded.path,
    })
}

fn invalid_z(message: impl Into<String>) -> ServiceError {
    ServiceError::new(ErrorKind::InvalidDomainness, message)
}

fn validate_z(model: &ModelEntry, z: &ZInput) -> ServiceResult<Domainness> {
    match (model.k(), z) {
        (1, ZInput::Scalar(v)) => DomainnessValue::new(*v)
            .map(Domainness::from)
            .map_err(|e| invalid_z(format!("range: {e}"))),
        (1, ZInput::Vector(v)) => Err(invalid_z(format!(
            "model '{}' takes a scalar z, got a vector of length {}",
            model.id,
            v.len()
        ))),
        (k, ZInput::Scalar(_)) => Err(invalid_z(format!(
            "model '{}' takes a {k}-component z vector, got a scalar",
            model.id
        ))),
        (k, ZInput::Vector(v)) if v.len() != k => Err(invalid_z(format!(
            "model '{}' takes a {k}-component z vector, got {} components",
            model.id,
            v.len()
        ))),
        (_, ZInput::Vector(v)) => validate_vector(v)
            .map(Domainness::from)
            .map_err(|e| invalid_z(e.to_string())),
    }
}

fn decode_request_image(b64: &str) -> ServiceResult<Tensor> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ServiceError::new(ErrorKind::BadRequest, format!("image is not valid base64: {e}")))?;
    decode_png(&bytes)
        .map_err(|e| ServiceError::new(ErrorKind::BadRequest, format!("image is not a decodable PNG: {e}")))
}

fn internal(e: Error) -> ServiceError {
    ServiceError::new(ErrorKind::Internal, e.to_string())
}

/// Aspect-preserving resize into a `size x size` canvas padded with zeros.
pub fn letterbox(image: &Tensor, size: usize) -> Result<(Tensor, ResizeInfo)> {
    let (_, c, h, w) = image.dims4()?;
    let scale = size as f64 / h.max(w) as f64;
    let sh = ((h as f64 * scale).round() as usize).clamp(1, size);
    let sw = ((w as f64 * scale).round() as usize).clamp(1, size);
    let scaled = resize_bilinear(image, sh, sw)?;
    let (top, left) = ((size - sh) / 2, (size - sw) / 2);
    let mut canvas = Tensor::zeros(&[1, c, size, size]);
    {
        let (src, dst) = (scaled.data(), canvas.data_mut());
        for ch in 0..c {
            for y in 0..sh {
                let s = (ch * sh + y) * sw;
                let d = (ch * size + top + y) * size + left;
                dst[d..d + sw].copy_from_slice(&src[s..s + sw]);
            }
        }
    }
    let info = ResizeInfo {
        original_width: w,
        original_height: h,
        model_size: size,
        scaled_width: sw,
        scaled_height: sh,
        pad_left: left,
        pad_top: top,
    };
    Ok((canvas, info))
}

/// Inverse of [`letterbox`]: crops the padding and resizes back.
pub fn unletterbox(output: &Tensor, info: &ResizeInfo) -> Result<Tensor> {
    let inner = crop(
        output,
        info.pad_top,
        info.pad_left,
        info.scaled_height,
        info.scaled_width,
    )?;
    resize_bilinear(&inner, info.original_height, info.original_width)
}

fn translate_one(model: &ModelEntry, image: &Tensor, z: &Domainness, raw: &ZInput) -> ServiceResult<TranslateResponse> {
    let (_, _, h, w) = image.dims4().map_err(internal)?;
    let size = model.image_size;
    let (input, resize) = if h == size && w == size {
        (image.clone(), None)
    } else {
        let (t, info) = letterbox(image, size).map_err(internal)?;
        (t, Some(info))
    };
    let out = model.generator.translate(&input, z).map_err(internal)?;
    let out = match &resize {
        Some(info) => unletterbox(&out, info).map_err(internal)?,
        None => out,
    };
    let png = encode_png(&out).map_err(internal)?;
    Ok(TranslateResponse {
        model: model.id.clone(),
        image: B64.encode(png),
        z: raw.clone(),
        width: w,
        height: h,
        resize,
        latency_ms: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image_io::decode_png;
    use crate::translation::GeneratorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, k: usize) -> ModelEntry {
        let mut cfg = GeneratorConfig::miniature(3);
        cfg.cond_dim = k;
        ModelEntry {
            id: id.into(),
            generator: Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)),
            source_name: "photo".into(),
            domain_names: (0..k).map(|i| format!("style{i}")).collect(),
            image_size: 16,
            checkpoint_hash: "00".into(),
            path: PathBuf::new(),
        }
    }

    fn png_b64(h: usize, w: usize) -> String {
        let t = Tensor::from_vec(
            &[1, 3, h, w],
            (0..3 * h * w).map(|i| ((i % 17) as f64) / 8.5 - 1.0).collect(),
        )
        .unwrap();
        B64.encode(encode_png(&t).unwrap())
    }

    fn state() -> ServiceState {
        let mut s = ServiceState::default();
        s.insert(entry("two", 1)).unwrap();
        s.insert(entry("four", 4)).unwrap();
        s
    }

    #[test]
    fn translate_keeps_dimensions_and_is_deterministic() {
        let s = state();
        let req = TranslateRequest {
            model: Some("two".into()),
            image: png_b64(12, 20),
            z: ZInput::Scalar(0.5),
        };
        let a = s.handle_translate(&req).unwrap();
        let b = s.handle_translate(&req).unwrap();
        assert_eq!(a.image, b.image);
        let img = decode_png(&B64.decode(&a.image).unwrap()).unwrap();
        assert_eq!(img.shape(), &[1, 3, 12, 20]);
        let r = a.resize.unwrap();
        assert_eq!((r.scaled_width, r.scaled_height, r.pad_left, r.pad_top), (16, 10, 0, 3));
        let exact = s
            .handle_translate(&TranslateRequest {
                image: png_b64(16, 16),
                ..req
            })
            .unwrap();
        assert!(exact.resize.is_none());
    }

    #[test]
    fn invalid_domainness_is_422_with_constraint() {
        let s = state();
        let req = |z| TranslateRequest {
            model: Some("four".into()),
            image: png_b64(16, 16),
            z,
        };
        let e = s
            .handle_translate(&req(ZInput::Vector(vec![0.5, 0.5, 0.5, -0.5])))
            .unwrap_err();
        assert_eq!(e.status(), 422);
        assert!(
            e.message.contains("range") || e.message.contains("sum"),
            "{}",
            e.message
        );
        let e = s
            .handle_translate(&req(ZInput::Vector(vec![0.5, 0.5, 0.5, 0.5])))
            .unwrap_err();
        assert!(e.message.contains("sum"), "{}", e.message);
        assert_eq!(s.handle_translate(&req(ZInput::Scalar(0.5))).unwrap_err().status(), 422);
        assert!(s.handle_translate(&req(ZInput::Vector(vec![0.25; 4]))).is_ok());
        let e = s
            .handle_translate(&TranslateRequest {
                model: Some("two".into()),
                image: png_b64(16, 16),
                z: ZInput::Scalar(1.5),
            })
            .unwrap_err();
        assert_eq!(e.status(), 422);
    }

    #[test]
    fn unknown_model_and_bad_image() {
        let s = state();
        let mut req = TranslateRequest {
            model: Some("nope".into()),
            image: png_b64(16, 16),
            z: ZInput::Scalar(0.0),
        };
        assert_eq!(s.handle_translate(&req).unwrap_err().status(), 404);
        req.model = None;
        assert_eq!(s.handle_translate(&req).unwrap_err().status(), 400);
        req.model = Some("two".into());
        req.image = B64.encode(b"not a png");
        assert_eq!(s.handle_translate(&req).unwrap_err().status(), 400);
        req.image = "%%%".into();
        assert_eq!(s.handle_translate(&req).unwrap_err().status(), 400);
    }

    #[test]
    fn sweep_equals_composed_translations() {
        let s = state();
        let image = png_b64(16, 8);
        let grid: Vec<ZInput> = [0.0, 0.3, 0.6, 0.8, 1.0].into_iter().map(ZInput::Scalar).collect();
        let sweep = s
            .sweep(&SweepRequest {
                model: Some("two".into()),
                image: image.clone(),
                grid: grid.clone(),
            })
            .unwrap();
        assert_eq!(sweep.results.len(), 5);
        for (r, z) in sweep.results.iter().zip(grid) {
            let single = s
                .handle_translate(&TranslateRequest {
                    model: Some("two".into()),
                    image: image.clone(),
                    z: z.clone(),
                })
                .unwrap();
            assert_eq!(r.image, single.image);
            assert_eq!(r.z, z);
        }
        let empty = s
            .sweep(&SweepRequest {
                model: Some("two".into()),
                image,
                grid: vec![],
            })
            .unwrap();
        assert!(empty.results.is_empty());
    }

    #[test]
    fn info_lists_models() {
        assert!(ServiceState::default().handle_info().models.is_empty());
        let info = state().handle_info();
        let four = info.models.iter().find(|m| m.id == "four").unwrap();
        assert_eq!(four.k, 4);
        assert_eq!(four.domain_names.len(), 4);
        let mut s = state();
        assert!(s.insert(entry("two", 1)).is_err());
    }

    #[test]
    fn letterbox_round_trip_on_constant_image() {
        let img = Tensor::full(&[1, 3, 6, 10], 0.25);
        let (boxed, info) = letterbox(&img, 20).unwrap();
        assert_eq!((info.scaled_height, info.scaled_width, info.pad_top), (12, 20, 4));
        assert_eq!(boxed.data()[0], 0.0);
        let back = unletterbox(&boxed, &info).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-12);
    }
}
