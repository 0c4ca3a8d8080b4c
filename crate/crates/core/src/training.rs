//! Alternating optimization of the generators and discriminators.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::image_io::{crop, flip_horizontal, resize_bilinear};
use crate::domainness::{sample_vector, BetaSchedule, DomainnessValue, DomainnessVector};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::objectives::{
    discriminator_objective, generator_objective, multi_target_objective, target_side_weights, FlowModels, GanLossKind,
    LossBreakdown, MultiTargetBreakdown, ObjectiveConfig,
};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::translation::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};

fn default_lr() -> f64 {
    2e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_lambda() -> f64 {
    10.0
}
fn default_one() -> usize {
    1
}
fn default_size() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_gen_channels() -> usize {
    8
}
fn default_gen_down() -> usize {
    2
}
fn default_gen_res() -> usize {
    4
}
fn default_stem() -> usize {
    7
}
fn default_disc_channels() -> usize {
    16
}
fn default_disc_down() -> usize {
    3
}

/// Flat training configuration; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iterations: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_lambda")]
    pub lambda_cyc: f64,
    #[serde(default)]
    pub identity_weight: f64,
    #[serde(default = "default_one")]
    pub batch_size: usize,
    /// Images are resized to this side length before cropping.
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default = "default_size")]
    pub crop_size: usize,
    #[serde(default = "default_true")]
    pub flip: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_one")]
    pub num_targets: usize,
    /// Period of the multi-target `z` schedule: `K` vertex steps followed by
    /// random simplex draws. Defaults to `K + 1`.
    #[serde(default)]
    pub style_gen_cycle: Option<u64>,
    #[serde(default)]
    pub gan_loss: GanLossKind,
    /// Sample `z ~ U(0, 1)` instead of the Beta curriculum.
    #[serde(default)]
    pub uniform_z: bool,
    /// Draw one `z` per batch instead of one per image.
    #[serde(default)]
    pub shared_z: bool,
    #[serde(default)]
    pub weighted_reconstruction: bool,
    /// History buffer of past fakes for the discriminators; 0 disables it.
    #[serde(default)]
    pub pool_size: usize,
    #[serde(default = "default_gen_channels")]
    pub gen_base_channels: usize,
    #[serde(default = "default_gen_down")]
    pub gen_downsample: usize,
    #[serde(default = "default_gen_res")]
    pub gen_residual_blocks: usize,
    #[serde(default = "default_stem")]
    pub gen_stem_kernel: usize,
    #[serde(default = "default_true")]
    pub condition_all: bool,
    #[serde(default = "default_disc_channels")]
    pub disc_base_channels: usize,
    #[serde(default = "default_disc_down")]
    pub disc_downsample: usize,
    /// Source name followed by one name per target; generated when empty.
    #[serde(default)]
    pub domain_names: Vec<String>,
}

impl TrainConfig {
    pub fn new(total_iterations: u64) -> Self {
        toml::from_str(&format!("total_iterations = {total_iterations}")).expect("defaults")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_iterations == 0 {
            return fail("total_iterations must be at least 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if [self.lambda_cyc, self.identity_weight]
            .iter()
            .any(|w| w.is_nan() || *w < 0.0)
        {
            return fail("loss weights must be non-negative".into());
        }
        let multiple = 1usize << self.gen_downsample;
        if self.crop_size > self.image_size || !self.crop_size.is_multiple_of(multiple) {
            return fail(format!(
                "crop_size {} must be at most image_size {} and a multiple of {multiple}",
                self.crop_size, self.image_size
            ));
        }
        if self.num_targets == 0 {
            return fail("num_targets must be at least 1".into());
        }
        if let Some(p) = self.style_gen_cycle {
            if p < self.num_targets as u64 + 1 {
                return fail(format!(
                    "style_gen_cycle {p} must cover the {} vertices plus a random step",
                    self.num_targets
                ));
            }
        }
        if self.num_targets > 1 && self.pool_size > 0 {
            return fail("the fake pool is only supported for single-target training".into());
        }
        if !self.domain_names.is_empty() && self.domain_names.len() != self.num_targets + 1 {
            return fail(format!(
                "{} domain names for a source and {} targets",
                self.domain_names.len(),
                self.num_targets
            ));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            channels: 3,
            base_channels: self.gen_base_channels,
            n_downsample: self.gen_downsample,
            n_residual: self.gen_residual_blocks,
            cond_dim: self.num_targets,
            stem_kernel: self.gen_stem_kernel,
            condition_all: self.condition_all,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: 3,
            base_channels: self.disc_base_channels,
            n_downsample: self.disc_downsample,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_cyc: self.lambda_cyc,
            gan_loss_kind: self.gan_loss,
            identity_weight: self.identity_weight,
            weighted_reconstruction: self.weighted_reconstruction,
            ..Default::default()
        }
    }

    pub fn schedule(&self) -> BetaSchedule {
        BetaSchedule {
            total_iterations: self.total_iterations,
            beta: 1.0,
            rng_seed: self.seed,
            uniform: self.uniform_z,
        }
    }

    pub fn resolved_domain_names(&self) -> Vec<String> {
        if !self.domain_names.is_empty() {
            return self.domain_names.clone();
        }
        let mut names = vec!["source".to_string()];
        if self.num_targets == 1 {
            names.push("target".into());
        } else {
            names.extend((1..=self.num_targets).map(|k| format!("target{k}")));
        }
        names
    }

    pub fn style_period(&self) -> u64 {
        self.style_gen_cycle.unwrap_or(self.num_targets as u64 + 1)
    }
}

/// `z` for step `t` of multi-target training: the `K` vertices in order, then
/// uniform simplex draws for the rest of the period.
pub fn multi_target_z<R: Rng + ?Sized>(step: u64, k: usize, period: u64, rng: &mut R) -> Result<DomainnessVector> {
    if k < 2 {
        return Err(Error::arg(format!("multi-target schedule needs K >= 2, got {k}")));
    }
    let phase = step % period.max(k as u64 + 1);
    if (phase as usize) < k {
        DomainnessVector::one_hot(k, phase as usize)
    } else {
        sample_vector(k, rng)
    }
}

/// History of generated images with the domainness they were made at.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FakePool {
    pub capacity: usize,
    pub items: Vec<(Tensor, f64)>,
}

impl FakePool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::new(),
        }
    }

    /// Returns a batch mixing new fakes and stored ones: while filling, new
    /// samples pass through; afterwards each is swapped with a random stored
    /// one half the time.
    pub fn query<R: Rng + ?Sized>(&mut self, fakes: &Tensor, zs: &[f64], rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        if self.capacity == 0 {
            return Ok((fakes.clone(), zs.to_vec()));
        }
        let n = fakes.dims4()?.0;
        let mut out = Vec::with_capacity(n);
        let mut out_z = Vec::with_capacity(n);
        for (i, &z) in zs.iter().enumerate().take(n) {
            let sample = fakes.sample(i);
            if self.items.len() < self.capacity {
                self.items.push((sample.clone(), z));
                out.push(sample);
                out_z.push(z);
            } else if rng.random_bool(0.5) {
                let j = rng.random_range(0..self.capacity);
                let (old, old_z) = std::mem::replace(&mut self.items[j], (sample, z));
                out.push(old);
                out_z.push(old_z);
            } else {
                out.push(sample);
                out_z.push(z);
            }
        }
        Ok((Tensor::stack(&out)?, out_z))
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub iteration: u64,
    pub models: FlowModels,
    pub opt_g_st: Adam,
    pub opt_g_ts: Adam,
    pub opt_d_source: Adam,
    pub opt_d_targets: Vec<Adam>,
    pub rng: ChaCha8Rng,
    pub pool_target: FakePool,
    pub pool_source: FakePool,
}

impl PartialEq for TrainState {
    /// Random generators compare by seed, stream and position, which fixes
    /// their future output regardless of internal buffering.
    fn eq(&self, other: &Self) -> bool {
        let rng_key = |r: &ChaCha8Rng| (r.get_seed(), r.get_stream(), r.get_word_pos());
        self.config == other.config
            && self.iteration == other.iteration
            && self.models == other.models
            && self.opt_g_st == other.opt_g_st
            && self.opt_g_ts == other.opt_g_ts
            && self.opt_d_source == other.opt_d_source
            && self.opt_d_targets == other.opt_d_targets
            && rng_key(&self.rng) == rng_key(&other.rng)
            && self.pool_target == other.pool_target
            && self.pool_source == other.pool_source
    }
}

/// Losses and domainness of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    /// Per-sample `z` for single-target steps, the shared vector otherwise.
    pub z: Vec<f64>,
    pub adv_source: f64,
    pub adv_target: f64,
    pub cycle: f64,
    pub total: f64,
    pub d_source: f64,
    pub d_target: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g_cfg = config.generator_config();
        let d_cfg = config.discriminator_config();
        let models = FlowModels {
            g_st: Generator::new(g_cfg.clone(), &mut rng),
            g_ts: Generator::new(g_cfg, &mut rng),
            d_source: Discriminator::new(d_cfg.clone(), &mut rng),
            d_targets: (0..config.num_targets)
                .map(|_| Discriminator::new(d_cfg.clone(), &mut rng))
                .collect(),
        };
        Ok(Self::from_models(config, models, rng))
    }

    /// Wraps existing networks with fresh optimizer state.
    pub fn from_models(config: TrainConfig, models: FlowModels, rng: ChaCha8Rng) -> Self {
        let adam = |m: &dyn Module| Adam::new(m, config.learning_rate, config.beta1, config.beta2);
        Self {
            opt_g_st: adam(&models.g_st),
            opt_g_ts: adam(&models.g_ts),
            opt_d_source: adam(&models.d_source),
            opt_d_targets: models.d_targets.iter().map(|d| adam(d)).collect(),
            pool_target: FakePool::new(config.pool_size),
            pool_source: FakePool::new(config.pool_size),
            iteration: 0,
            models,
            rng,
            config,
        }
    }

    fn check_not_done(&self) -> Result<()> {
        if self.iteration >= self.config.total_iterations {
            return Err(Error::arg(format!(
                "training already reached its {} iterations",
                self.config.total_iterations
            )));
        }
        Ok(())
    }

    /// One step with `z` drawn from the curriculum for every sample.
    pub fn train_step(&mut self, xs: &Tensor, xt: &Tensor) -> Result<StepReport> {
        self.check_not_done()?;
        let n = xs.dims4()?.0;
        let schedule = self.config.schedule();
        let draws = if self.config.shared_z { 1 } else { n };
        let mut zs = (0..draws)
            .map(|_| schedule.sample_scalar(self.iteration, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        zs.resize(n, zs[0]);
        self.train_step_with_z(xs, xt, &zs)
    }

    /// One generator update followed by one update per discriminator, at the
    /// given per-sample domainness.
    pub fn train_step_with_z(&mut self, xs: &Tensor, xt: &Tensor, zs: &[DomainnessValue]) -> Result<StepReport> {
        self.check_not_done()?;
        if self.models.num_targets() != 1 {
            return Err(Error::arg("single-target step on a multi-target model"));
        }
        let objective = self.config.objective();
        let (breakdown, fake_t, fake_s) = {
            let tape = Tape::new();
            let pass = generator_objective(&tape, &self.models, xs, xt, zs, &objective)?;
            let grads = tape.backward(pass.total);
            self.opt_g_st.step(&mut self.models.g_st, &grads)?;
            self.opt_g_ts.step(&mut self.models.g_ts, &grads)?;
            let fake_t = pass.fake_target.expect("both directions");
            let fake_s = pass.fake_source.expect("both directions");
            (pass.breakdown, fake_t, fake_s)
        };

        let z: Vec<f64> = zs.iter().map(|z| z.get()).collect();
        let (fake_t, zt) = self.pool_target.query(&fake_t, &z, &mut self.rng)?;
        let (fake_s, zsrc) = self.pool_source.query(&fake_s, &z, &mut self.rng)?;
        let one_minus = |v: &[f64]| v.iter().map(|z| 1.0 - z).collect::<Vec<_>>();
        let (wt_s, wt_t) = (one_minus(&zt), zt.clone());
        let (ws_s, ws_t) = (zsrc.clone(), one_minus(&zsrc));

        let kind = self.config.gan_loss;
        let tape = Tape::new();
        let d_s = discriminator_objective(
            &tape,
            &self.models.d_source,
            xs,
            &[(&fake_t, &wt_s), (&fake_s, &ws_s)],
            kind,
        )?;
        let d_t = discriminator_objective(
            &tape,
            &self.models.d_targets[0],
            xt,
            &[(&fake_t, &wt_t), (&fake_s, &ws_t)],
            kind,
        )?;
        let d_source = d_s.map_or(0.0, |v| v.item());
        let d_target = d_t.map_or(0.0, |v| v.item());
        if !(d_source.is_finite() && d_target.is_finite()) {
            return Err(Error::NonFinite(format!(
                "discriminator losses {d_source}, {d_target} at iteration {}; generator {breakdown:?}",
                self.iteration
            )));
        }
        let total = match (d_s, d_t) {
            (Some(a), Some(b)) => Some(a.add(b)),
            (a, b) => a.or(b),
        };
        if let Some(total) = total {
            let grads = tape.backward(total);
            self.opt_d_source.step(&mut self.models.d_source, &grads)?;
            self.opt_d_targets[0].step(&mut self.models.d_targets[0], &grads)?;
        }
        drop(tape);

        let report = self.report(&breakdown, z, d_source, d_target);
        self.iteration += 1;
        Ok(report)
    }

    fn report(&self, b: &LossBreakdown, z: Vec<f64>, d_source: f64, d_target: f64) -> StepReport {
        StepReport {
            iteration: self.iteration,
            z,
            adv_source: b.adv_source,
            adv_target: b.adv_target,
            cycle: b.cycle,
            total: b.total,
            d_source,
            d_target,
        }
    }

    /// One step of `K`-target training with the vertex-plus-random schedule.
    pub fn train_multi_target_step(&mut self, xs: &Tensor, xts: &[Tensor]) -> Result<StepReport> {
        self.check_not_done()?;
        let k = self.models.num_targets();
        let z = multi_target_z(self.iteration, k, self.config.style_period(), &mut self.rng)?;
        self.train_multi_target_step_with_z(xs, xts, &z)
    }

    pub fn train_multi_target_step_with_z(
        &mut self,
        xs: &Tensor,
        xts: &[Tensor],
        z: &DomainnessVector,
    ) -> Result<StepReport> {
        self.check_not_done()?;
        let objective = self.config.objective();
        let n = xs.dims4()?.0;
        let (breakdown, fake_t, fake_sources) = {
            let tape = Tape::new();
            let pass = multi_target_objective(&tape, &self.models, xs, xts, z, &objective)?;
            let grads = tape.backward(pass.total);
            self.opt_g_st.step(&mut self.models.g_st, &grads)?;
            self.opt_g_ts.step(&mut self.models.g_ts, &grads)?;
            (pass.breakdown, pass.fake_target, pass.fake_sources)
        };

        let kind = self.config.gan_loss;
        let tape = Tape::new();
        let mut d_target = 0.0;
        let mut target_losses = Vec::new();
        for (i, d) in self.models.d_targets.iter().enumerate() {
            let w = vec![z.values()[i]; n];
            if let Some(v) = discriminator_objective(&tape, d, &xts[i], &[(&fake_t, &w)], kind)? {
                d_target += v.item();
                target_losses.push(v);
            }
        }
        let weights: Vec<(usize, f64)> = target_side_weights(z, objective.weighted_reconstruction);
        let source_weights: Vec<Vec<f64>> = weights.iter().map(|&(_, w)| vec![w; n]).collect();
        let fakes: Vec<(&Tensor, &[f64])> = fake_sources
            .iter()
            .zip(&source_weights)
            .map(|((_, t), w)| (t, w.as_slice()))
            .collect();
        let d_s = discriminator_objective(&tape, &self.models.d_source, xs, &fakes, kind)?;
        let d_source = d_s.map_or(0.0, |v| v.item());
        if !(d_source.is_finite() && d_target.is_finite()) {
            return Err(Error::NonFinite(format!(
                "discriminator losses {d_source}, {d_target} at iteration {}; generator {breakdown:?}",
                self.iteration
            )));
        }
        let total = target_losses.into_iter().chain(d_s).reduce(|a, b| a.add(b));
        if let Some(total) = total {
            let grads = tape.backward(total);
            self.opt_d_source.step(&mut self.models.d_source, &grads)?;
            for (d, opt) in self.models.d_targets.iter_mut().zip(self.opt_d_targets.iter_mut()) {
                opt.step(d, &grads)?;
            }
        }
        drop(tape);

        let MultiTargetBreakdown {
            adv_targets,
            adv_source,
            cycle,
            total,
            ..
        } = breakdown;
        let report = StepReport {
            iteration: self.iteration,
            z: z.values().to_vec(),
            adv_source,
            adv_target: adv_targets,
            cycle,
            total,
            d_source,
            d_target,
        };
        self.iteration += 1;
        Ok(report)
    }

    pub fn parameters_finite(&self) -> bool {
        let m = &self.models;
        let mut all: Vec<&dyn Module> = vec![&m.g_st, &m.g_ts, &m.d_source];
        all.extend(m.d_targets.iter().map(|d| d as &dyn Module));
        all.iter()
            .all(|module| module.parameters().iter().all(|(_, t)| t.all_finite()))
    }
}

/// In-memory training images, resized once to the configured size.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<Tensor>,
    pub targets: Vec<Vec<Tensor>>,
}

impl TrainData {
    pub fn new(source: Vec<Tensor>, targets: Vec<Vec<Tensor>>, config: &TrainConfig) -> Result<Self> {
        if source.is_empty() || targets.is_empty() || targets.iter().any(|t| t.is_empty()) {
            return Err(Error::arg("every domain needs at least one image"));
        }
        if targets.len() != config.num_targets {
            return Err(Error::arg(format!(
                "{} target domains for num_targets = {}",
                targets.len(),
                config.num_targets
            )));
        }
        let s = config.image_size;
        let resize = |v: Vec<Tensor>| -> Result<Vec<Tensor>> { v.iter().map(|t| resize_bilinear(t, s, s)).collect() };
        Ok(Self {
            source: resize(source)?,
            targets: targets.into_iter().map(resize).collect::<Result<_>>()?,
        })
    }

    /// Batches for iteration `t`. Sampling depends only on the seed and `t`,
    /// so a resumed run sees the same data as an uninterrupted one.
    pub fn batch(&self, t: u64, config: &TrainConfig) -> Result<(Tensor, Vec<Tensor>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(t + 1);
        let draw = |pool: &[Tensor], rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let parts = (0..config.batch_size)
                .map(|_| augment(&pool[rng.random_range(0..pool.len())], config, rng))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&parts)
        };
        let xs = draw(&self.source, &mut rng)?;
        let xts = self.targets.iter().map(|t| draw(t, &mut rng)).collect::<Result<_>>()?;
        Ok((xs, xts))
    }
}

/// Random crop to `crop_size` and optional horizontal flip.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, config: &TrainConfig, rng: &mut R) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4()?;
    let c = config.crop_size;
    let top = rng.random_range(0..=h - c);
    let left = rng.random_range(0..=w - c);
    let mut out = crop(img, top, left, c, c)?;
    if config.flip && rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    Ok(out)
}

/// Runs steps until `total_iterations` or `max_steps` more steps, whichever
/// comes first, calling `on_step` after each.
pub fn run(
    state: &mut TrainState,
    data: &TrainData,
    max_steps: Option<u64>,
    mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
) -> Result<()> {
    let end = match max_steps {
        Some(n) => (state.iteration + n).min(state.config.total_iterations),
        None => state.config.total_iterations,
    };
    while state.iteration < end {
        let (xs, xts) = data.batch(state.iteration, &state.config)?;
        let report = if state.config.num_targets == 1 {
            state.train_step(&xs, &xts[0])?
        } else {
            state.train_multi_target_step(&xs, &xts)?
        };
        on_step(state, &report)?;
    }
    Ok(())
}

/// Append-only metrics CSV: `iteration,z,adv_source,adv_target,cycle,total`.
/// Vector or per-sample `z` values are joined with `;`.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub const HEADER: [&'static str; 6] = ["iteration", "z", "adv_source", "adv_target", "cycle", "total"];

    pub fn open(path: &Path) -> Result<Self> {
        crate::data::image_io::ensure_parent(path)?;
        let exists = path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut writer = csv::Writer::from_writer(file);
        if !exists {
            writer.write_record(Self::HEADER)?;
            writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, r: &StepReport) -> Result<()> {
        let z = r.z.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";");
        self.writer.write_record([
            r.iteration.to_string(),
            z,
            r.adv_source.to_string(),
            r.adv_target.to_string(),
            r.cycle.to_string(),
            r.total.to_string(),
        ])?;
        self.writer
            .flush()
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }

    /// Reads `(iteration, z values)` back from a metrics file.
    pub fn read_z(path: &Path) -> Result<Vec<(u64, Vec<f64>)>> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let it = rec[0].parse().map_err(|_| Error::arg("bad iteration in metrics"))?;
            let z = rec[1]
                .split(';')
                .map(|v| v.parse::<f64>().map_err(|_| Error::arg("bad z in metrics")))
                .collect::<Result<_>>()?;
            out.push((it, z));
        }
        Ok(out)
    }
}
