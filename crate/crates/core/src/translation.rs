//! Domainness-conditioned generator and patch discriminator.
//!
//! The generator is a ResNet-style encoder/residual/decoder. Domainness enters
//! only through conditional instance normalization: a single linear embedding
//! maps the conditioning input to a 16-wide code, and every normalization
//! site owns a pair of affine heads mapping that code to per-channel scale
//! and shift. Layer shapes therefore do not depend on `z`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::domainness::Domainness;
use crate::error::{Error, Result};
use crate::nn::{prefixed, prefixed_mut, CondInstanceNorm, Conv2d, Linear, Module, NORM_EPS};
use crate::tensor::Tensor;

/// Width of the domainness embedding, shaped `(1, 16, 1, 1)` per sample.
pub const EMBED_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub base_channels: usize,
    pub n_downsample: usize,
    pub n_residual: usize,
    /// Width of the conditioning input: 1 for a scalar `z`, `K` for vectors.
    pub cond_dim: usize,
    pub stem_kernel: usize,
    /// Condition every normalization site; when false only the residual
    /// blocks are conditioned and the rest use plain instance norm.
    pub condition_all: bool,
}

impl GeneratorConfig {
    /// Desk-scale default for 64x64 RGB images.
    pub fn desk(cond_dim: usize) -> Self {
        Self {
            channels: 3,
            base_channels: 8,
            n_downsample: 2,
            n_residual: 4,
            cond_dim,
            stem_kernel: 7,
            condition_all: true,
        }
    }

    /// Two-conv model for finite-difference checks.
    pub fn miniature(channels: usize) -> Self {
        Self {
            channels,
            base_channels: 2,
            n_downsample: 0,
            n_residual: 0,
            cond_dim: 1,
            stem_kernel: 3,
            condition_all: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Norm {
    Conditional(CondInstanceNorm),
    Plain,
}

impl Norm {
    fn new<R: Rng + ?Sized>(conditional: bool, channels: usize, rng: &mut R) -> Self {
        if conditional {
            Norm::Conditional(CondInstanceNorm::new(EMBED_DIM, channels, rng))
        } else {
            Norm::Plain
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, embedding: Var<'t>) -> Var<'t> {
        match self {
            Norm::Conditional(cin) => cin.forward(tape, x, embedding),
            Norm::Plain => x.instance_norm(NORM_EPS),
        }
    }

    fn parameters(&self) -> Vec<(String, &Tensor)> {
        match self {
            Norm::Conditional(cin) => cin.parameters(),
            Norm::Plain => Vec::new(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Norm::Conditional(cin) => cin.parameters_mut(),
            Norm::Plain => Vec::new(),
        }
    }
}

/// Padding applied before a convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Pad {
    Reflect(usize),
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvNormRelu {
    pad: Pad,
    upsample: bool,
    conv: Conv2d,
    norm: Norm,
    relu: bool,
}

impl ConvNormRelu {
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, embedding: Var<'t>) -> Var<'t> {
        let mut h = if self.upsample { x.upsample2x() } else { x };
        if let Pad::Reflect(p) = self.pad {
            h = h.reflect_pad(p);
        }
        let h = self.norm.forward(tape, self.conv.forward(tape, h), embedding);
        if self.relu {
            h.relu()
        } else {
            h
        }
    }

    fn parameters(&self) -> Vec<(String, &Tensor)> {
        prefixed("conv", self.conv.parameters())
            .chain(prefixed("norm", self.norm.parameters()))
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed_mut("conv", self.conv.parameters_mut())
            .chain(prefixed_mut("norm", self.norm.parameters_mut()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    /// The 1x1 "deconvolution" from the conditioning input to the embedding;
    /// on a 1x1 grid it is exactly a linear map.
    embed: Linear,
    layers: Vec<(String, ConvNormRelu)>,
    residual: Vec<(ConvNormRelu, ConvNormRelu)>,
    decoder: Vec<(String, ConvNormRelu)>,
    head: Conv2d,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Self {
        let all = config.condition_all;
        let ngf = config.base_channels;
        let k = config.stem_kernel;
        let embed = Linear::new(config.cond_dim, EMBED_DIM, 1.0, rng);

        let mut layers = vec![(
            "stem".to_string(),
            ConvNormRelu {
                pad: Pad::Reflect(k / 2),
                upsample: false,
                conv: Conv2d::new(config.channels, ngf, k, 1, 0, false, rng),
                norm: Norm::new(all, ngf, rng),
                relu: true,
            },
        )];
        let mut ch = ngf;
        for i in 0..config.n_downsample {
            layers.push((
                format!("down{i}"),
                ConvNormRelu {
                    pad: Pad::Zero,
                    upsample: false,
                    conv: Conv2d::new(ch, ch * 2, 3, 2, 1, false, rng),
                    norm: Norm::new(all, ch * 2, rng),
                    relu: true,
                },
            ));
            ch *= 2;
        }
        let residual = (0..config.n_residual)
            .map(|_| {
                let mut half = |relu| ConvNormRelu {
                    pad: Pad::Reflect(1),
                    upsample: false,
                    conv: Conv2d::new(ch, ch, 3, 1, 0, false, rng),
                    norm: Norm::new(true, ch, rng),
                    relu,
                };
                (half(true), half(false))
            })
            .collect();
        let mut decoder = Vec::new();
        for i in 0..config.n_downsample {
            decoder.push((
                format!("up{i}"),
                ConvNormRelu {
                    pad: Pad::Zero,
                    upsample: true,
                    conv: Conv2d::new(ch, ch / 2, 3, 1, 1, false, rng),
                    norm: Norm::new(all, ch / 2, rng),
                    relu: true,
                },
            ));
            ch /= 2;
        }
        let head = Conv2d::new(ch, config.channels, k, 1, 0, true, rng);
        Self {
            config,
            embed,
            layers,
            residual,
            decoder,
            head,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.config.n_downsample
    }

    /// Embeds an `(N, cond_dim)` conditioning batch to `(N, 16)`.
    pub fn embed<'t>(&self, tape: &'t Tape, cond: Var<'t>) -> Var<'t> {
        self.embed.forward(tape, cond)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, cond: Var<'t>) -> Var<'t> {
        let e = self.embed(tape, cond);
        let mut h = x;
        for (_, layer) in &self.layers {
            h = layer.forward(tape, h, e);
        }
        for (a, b) in &self.residual {
            let r = b.forward(tape, a.forward(tape, h, e), e);
            h = h.add(r);
        }
        for (_, layer) in &self.decoder {
            h = layer.forward(tape, h, e);
        }
        let pad = self.config.stem_kernel / 2;
        self.head.forward(tape, h.reflect_pad(pad)).tanh()
    }

    /// Stacks one conditioning row per sample into `(N, cond_dim)`.
    pub fn condition(&self, zs: &[Domainness]) -> Result<Tensor> {
        let dim = self.config.cond_dim;
        let mut data = Vec::with_capacity(zs.len() * dim);
        for z in zs {
            if z.dim() != dim {
                return Err(Error::arg(format!(
                    "generator expects a {dim}-wide domainness, got {}",
                    z.dim()
                )));
            }
            data.extend(z.features());
        }
        Tensor::from_vec(&[zs.len(), dim], data)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.size_multiple();
        if c != self.config.channels {
            return Err(Error::Shape {
                expected: vec![x.shape()[0], self.config.channels, h, w],
                actual: x.shape().to_vec(),
            });
        }
        if h % m != 0 || w % m != 0 || h <= self.config.stem_kernel / 2 || w <= self.config.stem_kernel / 2 {
            return Err(Error::arg(format!(
                "image {h}x{w} must be a multiple of {m} and larger than the stem padding"
            )));
        }
        Ok(())
    }

    /// `G(x, z)`: one conditioning value applied to the whole batch.
    pub fn translate(&self, x: &Tensor, z: &Domainness) -> Result<Tensor> {
        let n = x.dims4()?.0;
        self.translate_each(x, &vec![z.clone(); n])
    }

    /// `G(x_i, z_i)` with a per-sample domainness.
    pub fn translate_each(&self, x: &Tensor, zs: &[Domainness]) -> Result<Tensor> {
        self.check_input(x)?;
        if zs.len() != x.shape()[0] {
            return Err(Error::arg(format!(
                "{} domainness values for a batch of {}",
                zs.len(),
                x.shape()[0]
            )));
        }
        let cond = self.condition(zs)?;
        let tape = Tape::inference();
        let out = self.forward(&tape, tape.constant(x.clone()), tape.constant(cond));
        Ok((*out.value()).clone())
    }

    /// The `(1, 16, 1, 1)` embedding of a single domainness value.
    pub fn embed_domainness(&self, z: &Domainness) -> Result<Tensor> {
        let cond = self.condition(std::slice::from_ref(z))?;
        let tape = Tape::inference();
        let e = self.embed(&tape, tape.constant(cond));
        (*e.value()).clone().reshape(&[1, EMBED_DIM, 1, 1])
    }

    pub fn embedding_parameters(&self) -> [&Tensor; 2] {
        [&self.embed.weight, &self.embed.bias]
    }
}

impl Module for Generator {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = prefixed("embed", self.embed.parameters()).collect();
        for (name, layer) in &self.layers {
            out.extend(prefixed(name, layer.parameters()));
        }
        for (i, (a, b)) in self.residual.iter().enumerate() {
            out.extend(prefixed(&format!("res{i}.a"), a.parameters()));
            out.extend(prefixed(&format!("res{i}.b"), b.parameters()));
        }
        for (name, layer) in &self.decoder {
            out.extend(prefixed(name, layer.parameters()));
        }
        out.extend(prefixed("head", self.head.parameters()));
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<_> = prefixed_mut("embed", self.embed.parameters_mut()).collect();
        for (name, layer) in &mut self.layers {
            out.extend(prefixed_mut(name, layer.parameters_mut()));
        }
        for (i, (a, b)) in self.residual.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("res{i}.a"), a.parameters_mut()));
            out.extend(prefixed_mut(&format!("res{i}.b"), b.parameters_mut()));
        }
        for (name, layer) in &mut self.decoder {
            out.extend(prefixed_mut(name, layer.parameters_mut()));
        }
        out.extend(prefixed_mut("head", self.head.parameters_mut()));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 convolutions.
    pub n_downsample: usize,
}

impl DiscriminatorConfig {
    pub fn desk(channels: usize) -> Self {
        Self {
            channels,
            base_channels: 16,
            n_downsample: 3,
        }
    }

    pub fn miniature(channels: usize) -> Self {
        Self {
            channels,
            base_channels: 2,
            n_downsample: 1,
        }
    }

    /// Side length of the score map for a square input of side `size`.
    pub fn output_size(&self, size: usize) -> usize {
        let mut s = size;
        for _ in 0..self.n_downsample {
            s = (s + 2 - 4) / 2 + 1;
        }
        // two stride-1 kernel-4 convolutions with padding 1
        s - 2
    }
}

/// Patch discriminator: stride-2 kernel-4 convolutions with leaky ReLU, then
/// two stride-1 convolutions down to a one-channel score map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Self {
        let ndf = config.base_channels;
        let cap = ndf * 8;
        let mut convs = vec![Conv2d::new(config.channels, ndf, 4, 2, 1, true, rng)];
        let mut ch = ndf;
        for _ in 1..config.n_downsample {
            let next = (ch * 2).min(cap);
            convs.push(Conv2d::new(ch, next, 4, 2, 1, true, rng));
            ch = next;
        }
        let next = (ch * 2).min(cap);
        convs.push(Conv2d::new(ch, next, 4, 1, 1, true, rng));
        convs.push(Conv2d::new(next, 1, 4, 1, 1, true, rng));
        Self { config, convs }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h);
            if i == last {
                break;
            }
            if i > 0 {
                h = h.instance_norm(NORM_EPS);
            }
            h = h.leaky_relu(0.2);
        }
        h
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.config.channels {
            return Err(Error::Shape {
                expected: vec![n, self.config.channels, h, w],
                actual: x.shape().to_vec(),
            });
        }
        let min = (1usize << self.config.n_downsample) * 4;
        if h < min || w < min {
            return Err(Error::arg(format!(
                "discriminator needs inputs of at least {min}x{min}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Patch score map `(N, 1, h', w')`.
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let tape = Tape::inference();
        let out = self.forward(&tape, tape.constant(x.clone()));
        Ok((*out.value()).clone())
    }
}

impl Module for Discriminator {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domainness::DomainnessValue;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn z(v: f64) -> Domainness {
        DomainnessValue::new(v).unwrap().into()
    }

    fn desk_generator(seed: u64) -> Generator {
        Generator::new(GeneratorConfig::desk(1), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let g = desk_generator(0);
        let e = g.embed_domainness(&z(0.3)).unwrap();
        assert_eq!(e.shape(), [1, 16, 1, 1]);
        assert_eq!(e, g.embed_domainness(&z(0.3)).unwrap());
        let a = g.embed_domainness(&z(0.2)).unwrap();
        let b = g.embed_domainness(&z(0.8)).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn translate_preserves_shape_and_is_deterministic() {
        let g = desk_generator(1);
        let x = Tensor::uniform(&[2, 3, 64, 64], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let y = g.translate(&x, &z(0.4)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y, g.translate(&x, &z(0.4)).unwrap());
        assert!(y.min() >= -1.0 && y.max() <= 1.0);
    }

    #[test]
    fn conditioning_is_live_at_init() {
        let g = desk_generator(3);
        let x = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let a = g.translate(&x, &z(0.1)).unwrap();
        let b = g.translate(&x, &z(0.9)).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn per_sample_domainness_matches_single_calls() {
        let g = desk_generator(5);
        let x = Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let batch = g.translate_each(&x, &[z(0.2), z(0.7)]).unwrap();
        let first = g.translate(&x.sample(0), &z(0.2)).unwrap();
        let second = g.translate(&x.sample(1), &z(0.7)).unwrap();
        assert!(batch.sample(0).max_abs_diff(&first) < 1e-12);
        assert!(batch.sample(1).max_abs_diff(&second) < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let g = desk_generator(7);
        assert!(g.translate(&Tensor::zeros(&[1, 1, 64, 64]), &z(0.5)).is_err());
        assert!(g.translate(&Tensor::zeros(&[1, 3, 62, 64]), &z(0.5)).is_err());
        assert!(g.translate(&Tensor::zeros(&[3, 64, 64]), &z(0.5)).is_err());
        let vector = Domainness::Vector(crate::domainness::DomainnessVector::one_hot(3, 0).unwrap());
        assert!(g.translate(&Tensor::zeros(&[1, 3, 64, 64]), &vector).is_err());
    }

    #[test]
    fn parameter_layout_is_independent_of_z() {
        let g = desk_generator(8);
        let names: Vec<_> = g
            .parameters()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        assert_eq!(names[0].0, "embed.weight");
        assert_eq!(names[0].1, [1, 16]);
        assert!(names.iter().any(|(n, _)| n == "res3.b.norm.shift.bias"));
        // every one of the 2 + 2 * 4 + 2 normalization sites is conditioned
        let heads = names.iter().filter(|(n, _)| n.ends_with("norm.scale.weight")).count();
        assert_eq!(heads, 1 + 2 + 2 * 4 + 2);
    }

    #[test]
    fn partial_conditioning_keeps_residual_heads_only() {
        let mut cfg = GeneratorConfig::desk(1);
        cfg.condition_all = false;
        let g = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let heads = g
            .parameters()
            .iter()
            .filter(|(n, _)| n.ends_with("norm.scale.weight"))
            .count();
        assert_eq!(heads, 8);
    }

    #[test]
    fn discriminator_patch_map_size() {
        let d = Discriminator::new(DiscriminatorConfig::desk(3), &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::uniform(&[1, 3, 64, 64], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let s = d.discriminate(&x).unwrap();
        assert_eq!(s.shape(), [1, 1, 6, 6]);
        assert_eq!(DiscriminatorConfig::desk(3).output_size(64), 6);
        assert_eq!(s, d.discriminate(&x).unwrap());
        let batch = Tensor::stack(&[x.clone(), x.clone(), x]).unwrap();
        assert_eq!(d.discriminate(&batch).unwrap().shape(), [3, 1, 6, 6]);
        assert!(d.discriminate(&Tensor::zeros(&[1, 2, 64, 64])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn generator_output_bounded(seed in any::<u64>(), scale in 0.1f64..1e3, zv in 0.0f64..=1.0) {
            let g = Generator::new(
                GeneratorConfig { base_channels: 4, n_residual: 1, ..GeneratorConfig::desk(1) },
                &mut ChaCha8Rng::seed_from_u64(seed),
            );
            let x = Tensor::uniform(&[1, 3, 16, 16], -scale, scale, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let y = g.translate(&x, &z(zv)).unwrap();
            prop_assert!(y.all_finite());
            prop_assert!(y.min() >= -1.0 && y.max() <= 1.0);
        }
    }
}
