//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `DLOWCKPT`, a little-endian `u32` format version,
//! a `u64` manifest length, the JSON manifest, then every tensor listed in
//! the manifest as little-endian `f64` values in manifest order.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::objectives::FlowModels;
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::training::{FakePool, TrainConfig, TrainState};
use crate::translation::{Discriminator, Generator};

pub const MAGIC: &[u8; 8] = b"DLOWCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::arg(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::arg("rng seed must be 32 bytes"))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::arg("rng word position is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub iteration: u64,
    pub config: TrainConfig,
    pub domain_names: Vec<String>,
    pub rng: RngState,
    pub optimizers: Vec<(String, AdamState)>,
    pub pool_target: Vec<f64>,
    pub pool_source: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
}

fn modules(m: &FlowModels) -> Vec<(String, &dyn Module)> {
    let mut out: Vec<(String, &dyn Module)> = vec![
        ("g_st".into(), &m.g_st),
        ("g_ts".into(), &m.g_ts),
        ("d_source".into(), &m.d_source),
    ];
    for (k, d) in m.d_targets.iter().enumerate() {
        out.push((format!("d_target{k}"), d));
    }
    out
}

fn modules_mut(m: &mut FlowModels) -> Vec<(String, &mut dyn Module)> {
    let mut out: Vec<(String, &mut dyn Module)> = vec![
        ("g_st".into(), &mut m.g_st),
        ("g_ts".into(), &mut m.g_ts),
        ("d_source".into(), &mut m.d_source),
    ];
    for (k, d) in m.d_targets.iter_mut().enumerate() {
        out.push((format!("d_target{k}"), d));
    }
    out
}

fn optimizers(s: &TrainState) -> Vec<&Adam> {
    let mut out = vec![&s.opt_g_st, &s.opt_g_ts, &s.opt_d_source];
    out.extend(s.opt_d_targets.iter());
    out
}

fn optimizers_mut(s: &mut TrainState) -> Vec<&mut Adam> {
    let mut out = vec![&mut s.opt_g_st, &mut s.opt_g_ts, &mut s.opt_d_source];
    out.extend(s.opt_d_targets.iter_mut());
    out
}

/// Named tensors in checkpoint order.
fn collect_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    let mods = modules(&state.models);
    for (prefix, module) in &mods {
        for (name, t) in module.parameters() {
            out.push((format!("{prefix}.{name}"), t));
        }
    }
    for ((prefix, module), opt) in mods.iter().zip(optimizers(state)) {
        let names: Vec<String> = module.parameters().into_iter().map(|(n, _)| n).collect();
        for (n, (m, v)) in names.iter().zip(opt.m.iter().zip(&opt.v)) {
            out.push((format!("adam.{prefix}.m.{n}"), m));
            out.push((format!("adam.{prefix}.v.{n}"), v));
        }
    }
    for (i, (t, _)) in state.pool_target.items.iter().enumerate() {
        out.push((format!("pool.target.{i}"), t));
    }
    for (i, (t, _)) in state.pool_source.items.iter().enumerate() {
        out.push((format!("pool.source.{i}"), t));
    }
    out
}

/// Serializes the state to bytes.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let tensors = collect_tensors(state);
    let manifest = Manifest {
        iteration: state.iteration,
        config: state.config.clone(),
        domain_names: state.config.resolved_domain_names(),
        rng: RngState::capture(&state.rng),
        optimizers: modules(&state.models)
            .into_iter()
            .map(|(n, _)| n)
            .zip(optimizers(state))
            .map(|(n, o)| {
                (
                    n,
                    AdamState {
                        lr: o.lr,
                        beta1: o.beta1,
                        beta2: o.beta2,
                        eps: o.eps,
                        step: o.step,
                    },
                )
            })
            .collect(),
        pool_target: state.pool_target.items.iter().map(|(_, z)| *z).collect(),
        pool_source: state.pool_source.items.iter().map(|(_, z)| *z).collect(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    encode_container(MAGIC, &manifest, &tensors)
}

/// Writes the state atomically (temporary file, then rename).
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    crate::data::image_io::ensure_parent(path)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Encodes a manifest and named tensors into the container layout.
pub fn encode_container<M: Serialize>(magic: &[u8; 8], manifest: &M, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a container into its JSON manifest bytes and tensor payload,
/// checking magic and format version.
pub fn split_container<'a>(bytes: &'a [u8], magic: &[u8; 8], path: &Path) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(corrupt(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(
            path,
            format!("format version {version} is not supported; this build reads version {FORMAT_VERSION}"),
        ));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + len)
        .ok_or_else(|| corrupt(path, "truncated manifest"))?;
    Ok((json, &bytes[20 + len..]))
}

/// Decodes `entries` tensors from a payload, requiring an exact size match.
pub fn decode_tensors(
    payload: &[u8],
    entries: &[TensorEntry],
    path: &Path,
) -> Result<std::collections::HashMap<String, Tensor>> {
    let expected: usize = entries.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
    if payload.len() != expected {
        return Err(corrupt(
            path,
            format!("payload holds {} bytes, manifest describes {expected}", payload.len()),
        ));
    }
    let mut offset = 0;
    let mut tensors = std::collections::HashMap::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let data = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
    }
    Ok(tensors)
}

pub(crate) fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Splits a checkpoint into its manifest and tensor payload.
pub fn read_manifest<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    let (json, payload) = split_container(bytes, MAGIC, path)?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(path, format!("manifest: {e}")))?;
    Ok((manifest, payload))
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let (manifest, payload) = read_manifest(bytes, path)?;
    let mut tensors = decode_tensors(payload, &manifest.tensors, path)?;
    let take =
        |tensors: &mut std::collections::HashMap<String, Tensor>, name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| corrupt(path, format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(corrupt(
                    path,
                    format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape()),
                ));
            }
            Ok(t)
        };

    let config = manifest.config.clone();
    config.validate()?;
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let g_cfg = config.generator_config();
    let d_cfg = config.discriminator_config();
    let models = FlowModels {
        g_st: Generator::new(g_cfg.clone(), &mut init),
        g_ts: Generator::new(g_cfg, &mut init),
        d_source: Discriminator::new(d_cfg.clone(), &mut init),
        d_targets: (0..config.num_targets)
            .map(|_| Discriminator::new(d_cfg.clone(), &mut init))
            .collect(),
    };
    let mut state = TrainState::from_models(config, models, manifest.rng.restore()?);
    state.iteration = manifest.iteration;

    let mut names = Vec::new();
    for (prefix, module) in modules_mut(&mut state.models) {
        let mut list = Vec::new();
        for (name, p) in module.parameters_mut() {
            *p = take(&mut tensors, &format!("{prefix}.{name}"), p.shape())?;
            list.push(name);
        }
        names.push((prefix, list));
    }
    if manifest.optimizers.len() != names.len() {
        return Err(corrupt(path, "optimizer count does not match the model"));
    }
    for ((opt, (prefix, list)), (_, saved)) in optimizers_mut(&mut state)
        .into_iter()
        .zip(&names)
        .zip(&manifest.optimizers)
    {
        opt.lr = saved.lr;
        opt.beta1 = saved.beta1;
        opt.beta2 = saved.beta2;
        opt.eps = saved.eps;
        opt.step = saved.step;
        for (i, n) in list.iter().enumerate() {
            let shape = opt.m[i].shape().to_vec();
            opt.m[i] = take(&mut tensors, &format!("adam.{prefix}.m.{n}"), &shape)?;
            opt.v[i] = take(&mut tensors, &format!("adam.{prefix}.v.{n}"), &shape)?;
        }
    }
    let mut pool = |name: &str, zs: &[f64], capacity: usize| -> Result<FakePool> {
        let mut p = FakePool::new(capacity);
        for (i, &z) in zs.iter().enumerate() {
            let key = format!("pool.{name}.{i}");
            let t = tensors
                .remove(&key)
                .ok_or_else(|| corrupt(path, format!("missing tensor {key}")))?;
            p.items.push((t, z));
        }
        Ok(p)
    };
    let capacity = state.config.pool_size;
    state.pool_target = pool("target", &manifest.pool_target, capacity)?;
    state.pool_source = pool("source", &manifest.pool_source, capacity)?;
    if !tensors.is_empty() {
        let mut extra: Vec<_> = tensors.keys().cloned().collect();
        extra.sort();
        return Err(corrupt(path, format!("unexpected tensors: {}", extra.join(", "))));
    }
    Ok(state)
}

pub fn restore(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(path, format!("cannot read: {e}")))?;
    from_bytes(&bytes, path)
}

/// Hex SHA-256 of a checkpoint file; identifies a model.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(path, format!("cannot read: {e}")))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A checkpoint loaded for inference, with its identity.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub path: PathBuf,
    pub hash: String,
    pub state: TrainState,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(path, format!("cannot read: {e}")))?;
    let state = from_bytes(&bytes, path)?;
    Ok(LoadedModel {
        path: path.to_path_buf(),
        hash: hex::encode(Sha256::digest(&bytes)),
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domainness::DomainnessValue;
    use crate::training::run;
    use crate::training::tests::{tiny_config, tiny_data};

    #[test]
    fn round_trip_is_bit_exact() {
        let config = TrainConfig {
            pool_size: 2,
            ..tiny_config(20)
        };
        let data = tiny_data(&config, 1);
        let mut state = TrainState::new(config).unwrap();
        run(&mut state, &data, Some(4), |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&state, &path).unwrap();
        let back = restore(&path).unwrap();
        assert_eq!(back, state);
        let x = data.source[0].clone();
        let z = DomainnessValue::new(0.3).unwrap().into();
        assert_eq!(
            back.models.g_st.translate(&x, &z).unwrap(),
            state.models.g_st.translate(&x, &z).unwrap()
        );
        assert_eq!(file_hash(&path).unwrap(), load_model(&path).unwrap().hash);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let config = tiny_config(10);
        let data = tiny_data(&config, 2);
        let mut straight = TrainState::new(config.clone()).unwrap();
        run(&mut straight, &data, Some(10), |_, _| Ok(())).unwrap();

        let mut first = TrainState::new(config).unwrap();
        run(&mut first, &data, Some(5), |_, _| Ok(())).unwrap();
        let bytes = to_bytes(&first).unwrap();
        let mut resumed = from_bytes(&bytes, Path::new("mem")).unwrap();
        run(&mut resumed, &data, Some(5), |_, _| Ok(())).unwrap();
        assert_eq!(resumed, straight);
    }

    #[test]
    fn rejects_bad_files() {
        let state = TrainState::new(tiny_config(3)).unwrap();
        let mut bytes = to_bytes(&state).unwrap();
        let p = Path::new("x.ckpt");
        let err = from_bytes(b"garbage", p).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
        bytes[8] = 9;
        let err = from_bytes(&bytes, p).unwrap_err().to_string();
        assert!(err.contains("version 9") && err.contains("version 1"), "{err}");
        bytes[8] = 1;
        bytes.truncate(bytes.len() - 8);
        assert!(from_bytes(&bytes, p).is_err());
        assert!(restore(Path::new("/nonexistent/x.ckpt")).is_err());
    }
}
