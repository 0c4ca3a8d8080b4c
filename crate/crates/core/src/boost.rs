//! Domain adaptation with DLOW-translated source data.
//!
//! A small segmentation network is trained on translated source images
//! `x̃ᵢ = G_ST(xᵢ, zᵢ)`, optionally aligned to the target domain in output
//! space with an adversarial loss weighted per sample by `√(1−zᵢ)`.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{decode_tensors, encode_container, split_container, TensorEntry};
use crate::data::image_io::{load_image, load_label, resize_bilinear, resize_label, LabelMap};
use crate::data::manifest::DatasetManifest;
use crate::data::translate::read_index;
use crate::domainness::DomainnessValue;
use crate::error::{Error, Result};
use crate::nn::{prefixed, prefixed_mut, Conv2d, Module};
use crate::objectives::{boost_weight, discriminator_objective, real_terms, weighted_mean, GanLossKind};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::translation::{Discriminator, DiscriminatorConfig};

pub const SEG_MAGIC: &[u8; 8] = b"DLOWSEGM";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
}

impl SegConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            channels: 3,
            num_classes,
            base_channels: 8,
        }
    }
}

/// Three-level U-Net without normalization. Decoder stages upsample,
/// concatenate the matching encoder map and apply a 3x3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    config: SegConfig,
    convs: Vec<Conv2d>,
}

fn he_conv<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Conv2d {
    let mut c = Conv2d::new(cin, cout, k, stride, pad, true, rng);
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    c.weight = Tensor::randn(c.weight.shape(), std, rng);
    c
}

const LEAK: f64 = 0.1;

impl SegModel {
    pub fn new<R: Rng + ?Sized>(config: SegConfig, rng: &mut R) -> Self {
        let b = config.base_channels;
        let (c1, c2, c3, c4) = (b, 2 * b, 4 * b, 4 * b);
        let convs = vec![
            he_conv(config.channels, c1, 3, 1, 1, rng),
            he_conv(c1, c2, 4, 2, 1, rng),
            he_conv(c2, c3, 4, 2, 1, rng),
            he_conv(c3, c4, 4, 2, 1, rng),
            he_conv(c4 + c3, c3, 3, 1, 1, rng),
            he_conv(c3 + c2, c2, 3, 1, 1, rng),
            he_conv(c2 + c1, c1, 3, 1, 1, rng),
            he_conv(c1, config.num_classes, 1, 1, 0, rng),
        ];
        Self { config, convs }
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    /// Class logits `(N, C, H, W)`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let c = &self.convs;
        let e1 = c[0].forward(tape, x).leaky_relu(LEAK);
        let e2 = c[1].forward(tape, e1).leaky_relu(LEAK);
        let e3 = c[2].forward(tape, e2).leaky_relu(LEAK);
        let e4 = c[3].forward(tape, e3).leaky_relu(LEAK);
        let u3 = c[4].forward(tape, e4.upsample2x().concat_channels(e3)).leaky_relu(LEAK);
        let u2 = c[5].forward(tape, u3.upsample2x().concat_channels(e2)).leaky_relu(LEAK);
        let u1 = c[6].forward(tape, u2.upsample2x().concat_channels(e1)).leaky_relu(LEAK);
        c[7].forward(tape, u1)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.config.channels {
            return Err(Error::Shape {
                expected: vec![n, self.config.channels, h, w],
                actual: x.shape().to_vec(),
            });
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::arg(format!(
                "segmentation input must be a positive multiple of 8 on each side, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Per-pixel argmax labels, `N * H * W` in row-major order.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.check_input(x)?;
        let tape = Tape::inference();
        let logits = self.forward(&tape, tape.constant(x.clone())).value();
        let (n, c, h, w) = logits.dims4()?;
        let hw = h * w;
        let d = logits.data();
        let mut out = Vec::with_capacity(n * hw);
        for i in 0..n {
            for p in 0..hw {
                let best = (0..c)
                    .max_by(|&a, &b| d[(i * c + a) * hw + p].total_cmp(&d[(i * c + b) * hw + p]))
                    .unwrap_or(0);
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct SegManifest<'a> {
            config: &'a SegConfig,
            tensors: Vec<TensorEntry>,
        }
        let params = self.parameters();
        let manifest = SegManifest {
            config: &self.config,
            tensors: params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let bytes = encode_container(SEG_MAGIC, &manifest, &params)?;
        crate::data::image_io::ensure_parent(path)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct SegManifest {
            config: SegConfig,
            tensors: Vec<TensorEntry>,
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let (json, payload) = split_container(&bytes, SEG_MAGIC, path)?;
        let manifest: SegManifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("manifest: {e}"),
        })?;
        let mut tensors = decode_tensors(payload, &manifest.tensors, path)?;
        let mut model = SegModel::new(manifest.config, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, p) in model.parameters_mut() {
            let t = tensors.remove(&name).ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("missing tensor {name}"),
            })?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    message: format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), p.shape()),
                });
            }
            *p = t;
        }
        Ok(model)
    }
}

impl Module for SegModel {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| prefixed(&format!("conv{i}"), c.parameters()))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| prefixed_mut(&format!("conv{i}"), c.parameters_mut()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    /// Segmentation loss only.
    #[default]
    None,
    /// Output-space adversarial alignment with unit weights.
    Unweighted,
    /// Alignment with per-sample weight `√(1−zᵢ)`; requires z for every sample.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub lambda_adv: f64,
    pub gan_loss: GanLossKind,
    pub alignment: Alignment,
    /// Apply the per-sample weights to the discriminator update as well.
    pub weight_discriminator: bool,
    pub num_classes: usize,
    pub seg_base_channels: usize,
    pub disc_base_channels: usize,
    pub disc_downsample: usize,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            batch_size: 4,
            learning_rate: 1e-3,
            disc_learning_rate: 1e-4,
            lambda_adv: 0.01,
            gan_loss: GanLossKind::Log,
            alignment: Alignment::None,
            weight_discriminator: true,
            num_classes: 2,
            seg_base_channels: 8,
            disc_base_channels: 16,
            disc_downsample: 3,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("disc_learning_rate", self.disc_learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lambda_adv.is_finite() && self.lambda_adv >= 0.0) {
            return bad(format!("lambda_adv must be non-negative, got {}", self.lambda_adv));
        }
        if self.seg_base_channels == 0 || self.disc_base_channels == 0 || self.disc_downsample == 0 {
            return bad("network widths and depths must be positive".into());
        }
        Ok(())
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig {
            channels: 3,
            num_classes: self.num_classes,
            base_channels: self.seg_base_channels,
        }
    }

    pub fn disc_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: self.num_classes,
            base_channels: self.disc_base_channels,
            n_downsample: self.disc_downsample,
        }
    }
}

/// One training batch. Source sample `i` is paired with target sample `i`
/// for the alignment term.
#[derive(Clone, Debug)]
pub struct BoostBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub z: Option<Vec<f64>>,
    pub target: Option<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoostLosses {
    pub seg: f64,
    pub adv: f64,
    pub disc: f64,
}

/// Per-sample alignment weights for a batch under `config`.
pub fn alignment_weights(config: &BoostConfig, batch: &BoostBatch) -> Result<Vec<f64>> {
    let n = batch.images.dims4()?.0;
    match config.alignment {
        Alignment::None => Ok(vec![0.0; n]),
        Alignment::Unweighted => Ok(vec![1.0; n]),
        Alignment::Weighted => {
            let z = batch
                .z
                .as_ref()
                .ok_or_else(|| Error::arg("weighted alignment needs a domainness value for every sample"))?;
            if z.len() != n {
                return Err(Error::arg(format!("{} domainness values for {n} samples", z.len())));
            }
            z.iter().map(|&z| Ok(boost_weight(DomainnessValue::new(z)?))).collect()
        }
    }
}

/// Weighted generator-side alignment loss: target predictions are pushed
/// toward the discriminator's source label.
pub fn alignment_loss<'t>(
    tape: &'t Tape,
    model: &SegModel,
    disc: &Discriminator,
    target: &Tensor,
    weights: &[f64],
    kind: GanLossKind,
) -> Var<'t> {
    let probs = model.forward(tape, tape.constant(target.clone())).softmax_channels();
    weighted_mean(real_terms(disc.forward(tape, probs), kind), weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoostState {
    pub config: BoostConfig,
    pub iteration: u64,
    pub model: SegModel,
    pub disc: Discriminator,
    pub opt_model: Adam,
    pub opt_disc: Adam,
}

impl BoostState {
    pub fn new(config: BoostConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SegModel::new(config.seg_config(), &mut rng);
        let disc = Discriminator::new(config.disc_config(), &mut rng);
        let opt_model = Adam::new(&model, config.learning_rate, 0.9, 0.99);
        let opt_disc = Adam::new(&disc, config.disc_learning_rate, 0.9, 0.99);
        Ok(Self {
            config,
            iteration: 0,
            model,
            disc,
            opt_model,
            opt_disc,
        })
    }
}

/// One alternating update: the segmentation model on cross-entropy plus the
/// weighted alignment term, then the discriminator on source (label 1) versus
/// target (label 0) predictions.
pub fn boosted_da_step(state: &mut BoostState, batch: &BoostBatch) -> Result<BoostLosses> {
    let cfg = state.config.clone();
    state.model.check_input(&batch.images)?;
    let (n, _, h, w) = batch.images.dims4()?;
    if batch.labels.len() != n * h * w {
        return Err(Error::arg(format!(
            "{} labels for {n} images of {h}x{w}",
            batch.labels.len()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::arg(format!(
            "label {bad} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let weights = alignment_weights(&cfg, batch)?;
    let align = cfg.alignment != Alignment::None && cfg.lambda_adv > 0.0;
    let target = match (align, &batch.target) {
        (true, Some(t)) => {
            state.model.check_input(t)?;
            if t.dims4()?.0 != n {
                return Err(Error::arg("target batch must match the source batch size"));
            }
            Some(t)
        }
        (true, None) => return Err(Error::arg("alignment needs a target batch")),
        (false, _) => None,
    };

    let mut losses = BoostLosses::default();
    let tape = Tape::new();
    let logits = state.model.forward(&tape, tape.constant(batch.images.clone()));
    let source_probs = logits.softmax_channels().value();
    let seg = logits.cross_entropy(&batch.labels);
    losses.seg = seg.item();
    let mut total = seg;
    let mut target_probs = None;
    if let Some(t) = target {
        if weights.iter().any(|&w| w != 0.0) {
            let adv = alignment_loss(&tape, &state.model, &state.disc, t, &weights, cfg.gan_loss);
            losses.adv = adv.item();
            total = total.add(adv.scale(cfg.lambda_adv));
        }
        let probe = Tape::inference();
        target_probs = Some(
            (*state
                .model
                .forward(&probe, probe.constant(t.clone()))
                .softmax_channels()
                .value())
            .clone(),
        );
    }
    if !total.value().all_finite() {
        return Err(Error::NonFinite(format!(
            "segmentation loss at step {}",
            state.iteration
        )));
    }
    let grads = tape.backward(total);
    state.opt_model.step(&mut state.model, &grads)?;

    if let Some(tp) = target_probs {
        let d_weights = if cfg.weight_discriminator {
            weights
        } else {
            vec![1.0; n]
        };
        let tape = Tape::new();
        if let Some(d) = discriminator_objective(&tape, &state.disc, &source_probs, &[(&tp, &d_weights)], cfg.gan_loss)?
        {
            losses.disc = d.item();
            let grads = tape.backward(d);
            state.opt_disc.step(&mut state.disc, &grads)?;
        }
    }
    state.iteration += 1;
    Ok(losses)
}

/// Images with per-pixel labels and optional per-sample domainness.
#[derive(Clone, Debug, Default)]
pub struct SegData {
    pub images: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
    pub z: Option<Vec<f64>>,
}

impl SegData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads a labelled manifest, resizing to `size x size`.
    pub fn from_manifest(manifest: &DatasetManifest, size: usize) -> Result<Self> {
        if manifest.labels.is_none() {
            return Err(Error::arg(format!("dataset '{}' has no labels", manifest.domain)));
        }
        let mut data = SegData::default();
        for i in 0..manifest.len() {
            data.images.push(resize_bilinear(&manifest.load_image(i)?, size, size)?);
            data.labels.push(resize_label(&manifest.load_label(i)?, size, size));
        }
        Ok(data)
    }

    /// Loads a translated dataset through its sidecar index.
    pub fn from_index(index: &Path, size: usize) -> Result<Self> {
        let rows = read_index(index)?;
        let mut data = SegData {
            z: Some(Vec::with_capacity(rows.len())),
            ..Default::default()
        };
        for row in rows {
            let label = row
                .label
                .as_ref()
                .ok_or_else(|| Error::arg(format!("{} has no label", row.image.display())))?;
            data.images.push(resize_bilinear(&load_image(&row.image)?, size, size)?);
            data.labels.push(resize_label(&load_label(label)?, size, size));
            data.z.as_mut().expect("set above").push(row.z.get());
        }
        Ok(data)
    }
}

/// Trains from scratch for `config.iterations` steps. Each step draws a
/// source batch and, when aligning, an independent target batch.
pub fn train_segmenter(
    config: BoostConfig,
    source: &SegData,
    target: &[Tensor],
    mut on_step: impl FnMut(u64, &BoostLosses),
) -> Result<BoostState> {
    if source.is_empty() || source.labels.len() != source.len() {
        return Err(Error::arg("source data needs one label map per image"));
    }
    if config.alignment != Alignment::None && target.is_empty() {
        return Err(Error::arg("alignment needs target images"));
    }
    let mut state = BoostState::new(config)?;
    state.model.check_input(&source.images[0])?;
    if state.config.alignment != Alignment::None {
        let (_, _, h, w) = target[0].dims4()?;
        state.model.check_input(&target[0])?;
        state
            .disc
            .check_input(&Tensor::zeros(&[1, state.config.num_classes, h, w]))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ 0x5eed);
    let idx: Vec<usize> = (0..source.len()).collect();
    let tidx: Vec<usize> = (0..target.len()).collect();
    let bs = state.config.batch_size;
    for t in 0..state.config.iterations {
        let pick: Vec<usize> = (0..bs).map(|_| *idx.choose(&mut rng).expect("non-empty")).collect();
        let images = Tensor::stack(&pick.iter().map(|&i| source.images[i].clone()).collect::<Vec<_>>())?;
        let labels = pick.iter().flat_map(|&i| source.labels[i].as_indices()).collect();
        let z = source.z.as_ref().map(|z| pick.iter().map(|&i| z[i]).collect());
        let target = if tidx.is_empty() {
            None
        } else {
            let parts: Vec<Tensor> = (0..bs)
                .map(|_| target[*tidx.choose(&mut rng).expect("non-empty")].clone())
                .collect();
            Some(Tensor::stack(&parts)?)
        };
        let batch = BoostBatch {
            images,
            labels,
            z,
            target,
        };
        let losses = boosted_da_step(&mut state, &batch)?;
        on_step(t, &losses);
    }
    Ok(state)
}

/// Row `g`, column `p`: pixels of ground-truth class `g` predicted as `p`.
pub fn confusion_matrix(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::arg(format!(
                "class index out of range for {num_classes} classes"
            )));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from the ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU per class present in the ground truth, and their mean.
pub fn miou_from_confusion(m: &[Vec<u64>]) -> Result<MiouReport> {
    let c = m.len();
    let mut per_class = Vec::with_capacity(c);
    for (k, row) in m.iter().enumerate() {
        let tp = row[k];
        let fn_: u64 = row.iter().sum::<u64>() - tp;
        let fp: u64 = (0..c).map(|g| m[g][k]).sum::<u64>() - tp;
        per_class.push((tp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::arg("ground truth is empty"));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, miou })
}

/// Dataset-level mean IoU of `model` on labelled images.
pub fn evaluate_miou(model: &SegModel, images: &[Tensor], labels: &[LabelMap]) -> Result<MiouReport> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::arg("evaluation needs one label map per image"));
    }
    let c = model.config().num_classes;
    let mut total = vec![vec![0u64; c]; c];
    for (img, label) in images.iter().zip(labels) {
        let pred = model.predict(img)?;
        let m = confusion_matrix(&pred, &label.as_indices(), c)?;
        for (row, add) in total.iter_mut().zip(m) {
            for (a, b) in row.iter_mut().zip(add) {
                *a += b;
            }
        }
    }
    miou_from_confusion(&total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{render_domain, SyntheticStyleSpec};
    use proptest::prelude::*;

    fn small_config(alignment: Alignment) -> BoostConfig {
        BoostConfig {
            iterations: 3,
            batch_size: 2,
            alignment,
            seg_base_channels: 2,
            disc_base_channels: 2,
            disc_downsample: 1,
            lambda_adv: 1.0,
            ..Default::default()
        }
    }

    fn batch(z: Option<Vec<f64>>, seed: u64) -> BoostBatch {
        let (images, labels) = render_domain(&SyntheticStyleSpec::hue(0.0, seed, 2, 16)).unwrap();
        let (target, _) = render_domain(&SyntheticStyleSpec::hue(120.0, seed + 1, 2, 16)).unwrap();
        BoostBatch {
            images: Tensor::stack(&images).unwrap(),
            labels: labels.iter().flat_map(|l| l.as_indices()).collect(),
            z,
            target: Some(Tensor::stack(&target).unwrap()),
        }
    }

    fn alignment_grads(state: &BoostState, b: &BoostBatch, weights: &[f64]) -> Vec<Tensor> {
        let tape = Tape::new();
        let loss = alignment_loss(
            &tape,
            &state.model,
            &state.disc,
            b.target.as_ref().unwrap(),
            weights,
            GanLossKind::Log,
        );
        let g = tape.backward(loss);
        state
            .model
            .parameters()
            .iter()
            .map(|(_, p)| g.wrt(p).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    #[test]
    fn forward_shapes_and_input_checks() {
        let model = SegModel::new(SegConfig::new(3), &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::inference();
        let out = model.forward(&tape, tape.constant(Tensor::zeros(&[2, 3, 16, 24])));
        assert_eq!(out.value().shape(), &[2, 3, 16, 24]);
        assert!(model.check_input(&Tensor::zeros(&[1, 3, 12, 16])).is_err());
        assert!(model.check_input(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
    }

    #[test]
    fn unit_domainness_gives_zero_alignment_gradient() {
        let state = BoostState::new(small_config(Alignment::Weighted)).unwrap();
        let b = batch(Some(vec![1.0, 1.0]), 1);
        let w = alignment_weights(&state.config, &b).unwrap();
        assert_eq!(w, vec![0.0, 0.0]);
        for g in alignment_grads(&state, &b, &w) {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_domainness_matches_unweighted_step() {
        let b = batch(Some(vec![0.0, 0.0]), 2);
        let mut weighted = BoostState::new(small_config(Alignment::Weighted)).unwrap();
        let mut plain = BoostState::new(small_config(Alignment::Unweighted)).unwrap();
        plain.config.alignment = Alignment::Unweighted;
        let lw = boosted_da_step(&mut weighted, &b).unwrap();
        let lp = boosted_da_step(&mut plain, &b).unwrap();
        assert_eq!(lw, lp);
        assert_eq!(weighted.model, plain.model);
        assert_eq!(weighted.disc, plain.disc);
    }

    #[test]
    fn mixed_domainness_weights_halve_the_second_sample() {
        let state = BoostState::new(small_config(Alignment::Weighted)).unwrap();
        let b = batch(Some(vec![0.0, 0.75]), 3);
        let w = alignment_weights(&state.config, &b).unwrap();
        assert_eq!(w, vec![1.0, 0.5]);
        let tape = Tape::inference();
        let t = b.target.as_ref().unwrap();
        let per_sample: Vec<f64> = (0..2)
            .map(|i| alignment_loss(&tape, &state.model, &state.disc, &t.sample(i), &[1.0], GanLossKind::Log).item())
            .collect();
        let got = alignment_loss(&tape, &state.model, &state.disc, t, &w, GanLossKind::Log).item();
        let want = (per_sample[0] + 0.5 * per_sample[1]) / 2.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn weighted_alignment_requires_domainness() {
        let mut state = BoostState::new(small_config(Alignment::Weighted)).unwrap();
        let err = boosted_da_step(&mut state, &batch(None, 4)).unwrap_err();
        assert!(matches!(err, Error::Argument(_)), "{err}");
        assert_eq!(state.iteration, 0);
    }

    #[test]
    fn segmentation_only_ignores_target() {
        let mut state = BoostState::new(small_config(Alignment::None)).unwrap();
        let disc = state.disc.clone();
        let mut b = batch(None, 5);
        b.target = None;
        let l = boosted_da_step(&mut state, &b).unwrap();
        assert!(l.seg > 0.0 && l.adv == 0.0 && l.disc == 0.0);
        assert_eq!(state.disc, disc);
    }

    #[test]
    fn too_small_inputs_are_rejected_before_training() {
        let (images, labels) = render_domain(&SyntheticStyleSpec::hue(0.0, 7, 2, 16)).unwrap();
        let data = SegData {
            images: images.clone(),
            labels,
            z: None,
        };
        let config = BoostConfig {
            alignment: Alignment::Unweighted,
            ..Default::default()
        };
        let err = train_segmenter(config, &data, &images, |_, _| {}).unwrap_err();
        assert!(err.to_string().contains("at least 32x32"), "{err}");
    }

    #[test]
    fn training_learns_the_source_task() {
        let (images, labels) = render_domain(&SyntheticStyleSpec::hue(0.0, 7, 16, 16)).unwrap();
        let data = SegData {
            images,
            labels,
            z: None,
        };
        let config = BoostConfig {
            iterations: 150,
            seg_base_channels: 4,
            ..Default::default()
        };
        let state = train_segmenter(config, &data, &[], |_, _| {}).unwrap();
        let report = evaluate_miou(&state.model, &data.images, &data.labels).unwrap();
        assert!(report.miou > 0.8, "{report:?}");
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = SegModel::new(SegConfig::new(2), &mut ChaCha8Rng::seed_from_u64(3));
        let path = dir.path().join("seg.bin");
        model.save(&path).unwrap();
        assert_eq!(SegModel::load(&path).unwrap(), model);
        std::fs::write(&path, b"DLOWCKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(SegModel::load(&path).is_err());
    }

    fn brute_miou(pred: &[usize], gt: &[usize], c: usize) -> f64 {
        let mut ious = Vec::new();
        for k in 0..c {
            if !gt.contains(&k) {
                continue;
            }
            let inter = pred.iter().zip(gt).filter(|(p, g)| **p == k && **g == k).count();
            let union = pred.iter().zip(gt).filter(|(p, g)| **p == k || **g == k).count();
            ious.push(inter as f64 / union as f64);
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    #[test]
    fn miou_known_values() {
        let gt = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let r = miou_from_confusion(&confusion_matrix(&pred, &gt, 3).unwrap()).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0), None]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    proptest! {
        #[test]
        fn miou_matches_brute_force(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let r = miou_from_confusion(&confusion_matrix(&pred, &gt, 4).unwrap()).unwrap();
            prop_assert!((r.miou - brute_miou(&pred, &gt, 4)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.miou));
        }

        #[test]
        fn miou_is_invariant_to_class_relabelling(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..100),
            perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        ) {
            let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let a = miou_from_confusion(&confusion_matrix(&pred, &gt, 3).unwrap()).unwrap().miou;
            let pp: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
            let gp: Vec<usize> = gt.iter().map(|&g| perm[g]).collect();
            let b = miou_from_confusion(&confusion_matrix(&pp, &gp, 3).unwrap()).unwrap().miou;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
