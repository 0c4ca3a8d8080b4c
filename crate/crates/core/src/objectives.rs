//! Loss functions for domain-flow training.
//!
//! Every loss has a tape-level form (used by training and gradient checks)
//! and, where it is useful on its own, a plain numeric wrapper evaluated on an
//! inference tape so both share one implementation.
//!
//! Adversarial weighting: `G_ST(x, z)` targets the intermediate domain at
//! domainness `z`, so its terms against the source and target discriminators
//! are weighted `(1 - z)` and `z`. `G_TS(x, z)` targets domainness `1 - z`
//! and the weights swap. Discriminators maximize the same weighted objective,
//! so their per-pair losses carry the same weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::domainness::{DomainnessValue, DomainnessVector};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::translation::{Discriminator, Generator};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanLossKind {
    /// `(D - 1)^2` / `D^2` targets on raw scores.
    #[default]
    LeastSquares,
    /// Binary cross-entropy on logits (non-saturating generator form).
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
    #[default]
    Both,
}

impl Direction {
    fn forward(self) -> bool {
        matches!(self, Direction::SourceToTarget | Direction::Both)
    }

    fn backward(self) -> bool {
        matches!(self, Direction::TargetToSource | Direction::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda_cyc: f64,
    pub gan_loss_kind: GanLossKind,
    pub direction: Direction,
    /// Weight of the identity term relative to `lambda_cyc`; 0 disables it.
    pub identity_weight: f64,
    /// Multi-target only: weight each target's reconstruction and source-side
    /// adversarial term by its `z_k` instead of averaging over targets.
    pub weighted_reconstruction: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            gan_loss_kind: GanLossKind::LeastSquares,
            direction: Direction::Both,
            identity_weight: 0.0,
            weighted_reconstruction: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_cyc, self.identity_weight]
            .iter()
            .any(|w| w.is_nan() || *w < 0.0)
        {
            return Err(Error::arg("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Scalar summary of one generator-side evaluation.
///
/// `total = combined_adv + lambda_cyc * (cycle + identity_weight * identity)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_source: f64,
    pub adv_target: f64,
    pub combined_adv: f64,
    pub cycle: f64,
    pub identity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.adv_source,
            self.adv_target,
            self.combined_adv,
            self.cycle,
            self.identity,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn recomputed_total(&self, config: &ObjectiveConfig) -> f64 {
        self.combined_adv + config.lambda_cyc * (self.cycle + config.identity_weight * self.identity)
    }
}

/// Per-sample loss pushing scores toward the real label, shape `(N)`.
pub fn real_terms<'t>(scores: Var<'t>, kind: GanLossKind) -> Var<'t> {
    match kind {
        GanLossKind::LeastSquares => scores.add_scalar(-1.0).square().mean_per_sample(),
        GanLossKind::Log => scores.scale(-1.0).softplus().mean_per_sample(),
    }
}

/// Per-sample loss pushing scores toward the fake label, shape `(N)`.
pub fn fake_terms<'t>(scores: Var<'t>, kind: GanLossKind) -> Var<'t> {
    match kind {
        GanLossKind::LeastSquares => scores.square().mean_per_sample(),
        GanLossKind::Log => scores.softplus().mean_per_sample(),
    }
}

/// Per-sample adversarial loss, shape `(N)`.
///
/// Generator role ignores `real` and pushes fake scores to the real label;
/// discriminator role averages the real-to-1 and fake-to-0 terms.
pub fn adversarial_terms<'t>(fake: Var<'t>, real: Option<Var<'t>>, role: Role, kind: GanLossKind) -> Var<'t> {
    match role {
        Role::Generator => real_terms(fake, kind),
        Role::Discriminator => {
            let real = real.expect("discriminator loss needs real scores");
            real_terms(real, kind).add(fake_terms(fake, kind)).scale(0.5)
        }
    }
}

/// Mean over the batch of per-sample losses times constant weights.
pub fn weighted_mean<'t>(per_sample: Var<'t>, weights: &[f64]) -> Var<'t> {
    let w = Tensor::from_vec(&[weights.len()], weights.to_vec()).expect("weights length");
    per_sample.mul_const(&w).mean()
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("{what} contains non-finite scores")));
    }
    Ok(())
}

/// Batch-mean adversarial loss for one pair of score maps.
pub fn adversarial_pair(
    fake_scores: &Tensor,
    real_scores: Option<&Tensor>,
    role: Role,
    kind: GanLossKind,
) -> Result<f64> {
    check_finite(fake_scores, "fake score map")?;
    if let Some(r) = real_scores {
        check_finite(r, "real score map")?;
        if r.shape()[0] != fake_scores.shape()[0] {
            return Err(Error::arg("real and fake batches differ in size"));
        }
    }
    if role == Role::Discriminator && real_scores.is_none() {
        return Err(Error::arg("discriminator role needs real scores"));
    }
    let tape = Tape::inference();
    let fake = tape.constant(fake_scores.clone());
    let real = real_scores.map(|r| tape.constant(r.clone()));
    Ok(adversarial_terms(fake, real, role, kind).mean().item())
}

/// `(1 - z) * adv_source + z * adv_target`.
pub fn combined_adversarial(adv_source: f64, adv_target: f64, z: DomainnessValue) -> f64 {
    let z = z.get();
    (1.0 - z) * adv_source + z * adv_target
}

/// Mean absolute error, the round-trip reconstruction loss.
pub fn cycle_loss(x: &Tensor, x_roundtrip: &Tensor) -> Result<f64> {
    if x.shape() != x_roundtrip.shape() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            actual: x_roundtrip.shape().to_vec(),
        });
    }
    let tape = Tape::inference();
    Ok(l1(tape.constant(x.clone()), tape.constant(x_roundtrip.clone())).item())
}

fn l1<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a.sub(b).abs().mean()
}

/// `sum_k z_k * loss_k` over `K` target domains.
pub fn multi_target_adversarial(per_target: &[f64], z: &DomainnessVector) -> Result<f64> {
    if per_target.len() != z.k() {
        return Err(Error::arg(format!(
            "{} per-target losses for a {}-dim domainness vector",
            per_target.len(),
            z.k()
        )));
    }
    Ok(per_target.iter().zip(z.values()).map(|(l, w)| l * w).sum())
}

/// Multi-target loss from raw weights, validating them first.
pub fn multi_target_adversarial_raw(per_target: &[f64], z: &[f64]) -> Result<f64> {
    let z = crate::domainness::validate_vector(z)?;
    multi_target_adversarial(per_target, &z)
}

/// Adversarial weight of a translated sample in the boosted adaptation loss.
pub fn boost_weight(z: DomainnessValue) -> f64 {
    (1.0 - z.get()).sqrt()
}

/// Networks of a domain-flow model. `d_targets` has one entry per target domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModels {
    pub g_st: Generator,
    pub g_ts: Generator,
    pub d_source: Discriminator,
    pub d_targets: Vec<Discriminator>,
}

impl FlowModels {
    pub fn num_targets(&self) -> usize {
        self.d_targets.len()
    }
}

/// The generator-side objective on one batch pair, kept on the tape.
pub struct GeneratorPass<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    /// `G_ST(x_s, z)`, detached, for the discriminator update.
    pub fake_target: Option<Tensor>,
    /// `G_TS(x_t, z)`, detached.
    pub fake_source: Option<Tensor>,
}

fn scalar_weights(zs: &[DomainnessValue]) -> (Vec<f64>, Vec<f64>) {
    let z: Vec<f64> = zs.iter().map(|z| z.get()).collect();
    let one_minus = z.iter().map(|v| 1.0 - v).collect();
    (z, one_minus)
}

fn check_batches(xs: &Tensor, xt: &Tensor, zs: &[DomainnessValue]) -> Result<()> {
    let (ns, ..) = xs.dims4()?;
    let (nt, ..) = xt.dims4()?;
    if ns == 0 || ns != nt || zs.len() != ns {
        return Err(Error::arg(format!(
            "batches of {ns} source, {nt} target images with {} domainness values",
            zs.len()
        )));
    }
    if xs.shape() != xt.shape() {
        return Err(Error::Shape {
            expected: xs.shape().to_vec(),
            actual: xt.shape().to_vec(),
        });
    }
    Ok(())
}

/// Builds the full two-domain objective `L_adv + lambda * L_cyc` for the
/// generators with one domainness value per sample.
pub fn generator_objective<'t>(
    tape: &'t Tape,
    models: &FlowModels,
    xs: &Tensor,
    xt: &Tensor,
    zs: &[DomainnessValue],
    config: &ObjectiveConfig,
) -> Result<GeneratorPass<'t>> {
    check_batches(xs, xt, zs)?;
    let d_target = models
        .d_targets
        .first()
        .ok_or_else(|| Error::arg("model has no target discriminator"))?;
    let kind = config.gan_loss_kind;
    let conds: Vec<_> = zs.iter().map(|&z| z.into()).collect::<Vec<_>>();
    let cond = tape.constant(models.g_st.condition(&conds)?);
    let (w_t, w_s) = scalar_weights(zs);
    let x_s = tape.constant(xs.clone());
    let x_t = tape.constant(xt.clone());

    let mut combined: Option<Var<'t>> = None;
    let mut cycle: Option<Var<'t>> = None;
    let mut breakdown = LossBreakdown::default();
    let accumulate = |acc: &mut Option<Var<'t>>, v: Var<'t>| {
        *acc = Some(match acc.take() {
            Some(a) => a.add(v),
            None => v,
        });
    };
    let mut fake_target = None;
    let mut fake_source = None;

    if config.direction.forward() {
        let fake = models.g_st.forward(tape, x_s, cond);
        let adv_s = adversarial_terms(models.d_source.forward(tape, fake), None, Role::Generator, kind);
        let adv_t = adversarial_terms(d_target.forward(tape, fake), None, Role::Generator, kind);
        breakdown.adv_source += adv_s.value().mean();
        breakdown.adv_target += adv_t.value().mean();
        accumulate(
            &mut combined,
            weighted_mean(adv_s, &w_s).add(weighted_mean(adv_t, &w_t)),
        );
        let rec = models.g_ts.forward(tape, fake, cond);
        accumulate(&mut cycle, l1(rec, x_s));
        fake_target = Some((*fake.value()).clone());
    }
    if config.direction.backward() {
        let fake = models.g_ts.forward(tape, x_t, cond);
        let adv_s = adversarial_terms(models.d_source.forward(tape, fake), None, Role::Generator, kind);
        let adv_t = adversarial_terms(d_target.forward(tape, fake), None, Role::Generator, kind);
        breakdown.adv_source += adv_s.value().mean();
        breakdown.adv_target += adv_t.value().mean();
        accumulate(
            &mut combined,
            weighted_mean(adv_s, &w_t).add(weighted_mean(adv_t, &w_s)),
        );
        let rec = models.g_st.forward(tape, fake, cond);
        accumulate(&mut cycle, l1(rec, x_t));
        fake_source = Some((*fake.value()).clone());
    }
    let combined = combined.expect("at least one direction");
    let cycle = cycle.expect("at least one direction");
    let mut total = combined.add(cycle.scale(config.lambda_cyc));

    if config.identity_weight > 0.0 {
        // G_ST(., 1) should leave target images alone and G_TS(., 1) source images.
        let one = tape.constant(Tensor::full(&[zs.len(), 1], 1.0));
        let idt = l1(models.g_st.forward(tape, x_t, one), x_t).add(l1(models.g_ts.forward(tape, x_s, one), x_s));
        breakdown.identity = idt.item();
        total = total.add(idt.scale(config.lambda_cyc * config.identity_weight));
    }

    breakdown.combined_adv = combined.item();
    breakdown.cycle = cycle.item();
    breakdown.total = total.item();
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!("generator objective: {breakdown:?}")));
    }
    Ok(GeneratorPass {
        total,
        breakdown,
        fake_target,
        fake_source,
    })
}

/// Evaluates the full objective without recording gradients.
pub fn full_objective(
    xs: &Tensor,
    xt: &Tensor,
    zs: &[DomainnessValue],
    models: &FlowModels,
    config: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let tape = Tape::inference();
    Ok(generator_objective(&tape, models, xs, xt, zs, config)?.breakdown)
}

/// Weighted discriminator-role loss for one discriminator.
///
/// Each fake batch comes with per-sample weights; the real batch is scored
/// once with the summed weights, which equals the sum of the per-pair
/// losses `w * 0.5 * (real + fake)`. Fake batches whose weights are all zero
/// are skipped. Returns `None` when every weight is zero.
pub fn discriminator_objective<'t>(
    tape: &'t Tape,
    d: &Discriminator,
    real: &Tensor,
    fakes: &[(&Tensor, &[f64])],
    kind: GanLossKind,
) -> Result<Option<Var<'t>>> {
    let n = real.dims4()?.0;
    let mut real_weights = vec![0.0; n];
    let mut total: Option<Var<'t>> = None;
    for (fake, weights) in fakes {
        if weights.len() != n || fake.dims4()?.0 != n {
            return Err(Error::arg("fake batch and weights must match the real batch"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        for (acc, w) in real_weights.iter_mut().zip(weights.iter()) {
            *acc += w;
        }
        let f = d.forward(tape, tape.constant((*fake).clone()));
        let term = weighted_mean(fake_terms(f, kind), weights).scale(0.5);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    let Some(fake_total) = total else {
        return Ok(None);
    };
    let r = d.forward(tape, tape.constant(real.clone()));
    let real_total = weighted_mean(real_terms(r, kind), &real_weights).scale(0.5);
    Ok(Some(real_total.add(fake_total)))
}

/// Per-target breakdown for `K`-target training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiTargetBreakdown {
    pub per_target: Vec<f64>,
    pub adv_targets: f64,
    pub adv_source: f64,
    pub cycle: f64,
    pub total: f64,
}

pub struct MultiTargetPass<'t> {
    pub total: Var<'t>,
    pub breakdown: MultiTargetBreakdown,
    pub fake_target: Tensor,
    /// `G_TS(x_{t_k}, z)` for every target `k` that was evaluated.
    pub fake_sources: Vec<(usize, Tensor)>,
}

/// Which target-side terms a multi-target step evaluates, with their weights.
pub fn target_side_weights(z: &DomainnessVector, weighted: bool) -> Vec<(usize, f64)> {
    let k = z.k();
    if weighted {
        z.values()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| (i, w))
            .collect()
    } else {
        (0..k).map(|i| (i, 1.0 / k as f64)).collect()
    }
}

/// Generator objective for `K` target domains sharing one domainness vector:
/// `sum_k z_k * adv(G_ST, D_{T_k})` plus cycle terms in both directions.
pub fn multi_target_objective<'t>(
    tape: &'t Tape,
    models: &FlowModels,
    xs: &Tensor,
    xts: &[Tensor],
    z: &DomainnessVector,
    config: &ObjectiveConfig,
) -> Result<MultiTargetPass<'t>> {
    let k = models.num_targets();
    if z.k() != k || xts.len() != k {
        return Err(Error::arg(format!(
            "model has {k} targets; got a {}-dim domainness and {} target batches",
            z.k(),
            xts.len()
        )));
    }
    let n = xs.dims4()?.0;
    for xt in xts {
        if xt.shape() != xs.shape() {
            return Err(Error::Shape {
                expected: xs.shape().to_vec(),
                actual: xt.shape().to_vec(),
            });
        }
    }
    let kind = config.gan_loss_kind;
    let cond = tape.constant(models.g_st.condition(&vec![z.clone().into(); n])?);
    let x_s = tape.constant(xs.clone());

    let fake = models.g_st.forward(tape, x_s, cond);
    let mut per_target = Vec::with_capacity(k);
    let mut adv_targets: Option<Var<'t>> = None;
    for (d, &w) in models.d_targets.iter().zip(z.values()) {
        let term = adversarial_terms(d.forward(tape, fake), None, Role::Generator, kind).mean();
        per_target.push(term.item());
        let weighted = term.scale(w);
        adv_targets = Some(match adv_targets {
            Some(a) => a.add(weighted),
            None => weighted,
        });
    }
    let adv_targets = adv_targets.expect("K >= 1");
    let mut cycle = l1(models.g_ts.forward(tape, fake, cond), x_s);

    let mut adv_source: Option<Var<'t>> = None;
    let mut fake_sources = Vec::new();
    for (i, w) in target_side_weights(z, config.weighted_reconstruction) {
        let x_t = tape.constant(xts[i].clone());
        let back = models.g_ts.forward(tape, x_t, cond);
        let adv = adversarial_terms(models.d_source.forward(tape, back), None, Role::Generator, kind)
            .mean()
            .scale(w);
        adv_source = Some(match adv_source {
            Some(a) => a.add(adv),
            None => adv,
        });
        cycle = cycle.add(l1(models.g_st.forward(tape, back, cond), x_t).scale(w));
        fake_sources.push((i, (*back.value()).clone()));
    }
    let adv_source = adv_source.expect("at least one target-side term");
    let total = adv_targets.add(adv_source).add(cycle.scale(config.lambda_cyc));
    let breakdown = MultiTargetBreakdown {
        adv_targets: multi_target_adversarial(&per_target, z)?,
        per_target,
        adv_source: adv_source.item(),
        cycle: cycle.item(),
        total: total.item(),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("multi-target objective: {breakdown:?}")));
    }
    Ok(MultiTargetPass {
        total,
        breakdown,
        fake_target: (*fake.value()).clone(),
        fake_sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translation::{DiscriminatorConfig, GeneratorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn z(v: f64) -> DomainnessValue {
        DomainnessValue::new(v).unwrap()
    }

    fn full(v: f64) -> Tensor {
        Tensor::full(&[2, 1, 3, 3], v)
    }

    #[test]
    fn least_squares_examples() {
        let ls = GanLossKind::LeastSquares;
        let d = adversarial_pair(&full(0.0), Some(&full(1.0)), Role::Discriminator, ls).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(adversarial_pair(&full(1.0), None, Role::Generator, ls).unwrap(), 0.0);
        let d = adversarial_pair(&full(0.5), Some(&full(0.5)), Role::Discriminator, ls).unwrap();
        assert!((d - 0.25).abs() < 1e-15);
    }

    #[test]
    fn log_loss_examples() {
        let log = GanLossKind::Log;
        let d = adversarial_pair(&full(0.0), Some(&full(0.0)), Role::Discriminator, log).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        let g = adversarial_pair(&full(40.0), None, Role::Generator, log).unwrap();
        assert!(g < 1e-15);
    }

    #[test]
    fn adversarial_pair_rejects_non_finite() {
        let mut bad = full(0.0);
        bad.data_mut()[3] = f64::NAN;
        let err = adversarial_pair(&bad, None, Role::Generator, GanLossKind::LeastSquares);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(adversarial_pair(&full(0.0), None, Role::Discriminator, GanLossKind::Log).is_err());
    }

    #[test]
    fn combined_examples_and_affinity() {
        assert_eq!(combined_adversarial(3.5, 9.0, z(0.0)), 3.5);
        assert_eq!(combined_adversarial(3.5, 9.0, z(1.0)), 9.0);
        assert!((combined_adversarial(2.0, 1.0, z(0.3)) - 1.7).abs() < 1e-12);
        for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let got = combined_adversarial(-1.25, 4.0, z(v));
            assert!((got - ((1.0 - v) * -1.25 + v * 4.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn cycle_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        assert_eq!(cycle_loss(&x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.5);
        assert!((cycle_loss(&x, &shifted).unwrap() - 0.5).abs() < 1e-12);
        let y = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let mut brute = 0.0;
        for i in 0..x.len() {
            brute += (x.data()[i] - y.data()[i]).abs();
        }
        brute /= x.len() as f64;
        assert!((cycle_loss(&x, &y).unwrap() - brute).abs() < 1e-12);
        assert!(cycle_loss(&x, &Tensor::zeros(&[1, 3, 4, 4])).is_err());
    }

    #[test]
    fn multi_target_examples() {
        let one_hot = DomainnessVector::one_hot(4, 2).unwrap();
        assert_eq!(multi_target_adversarial(&[4.0, 2.0, 1.5, 1.0], &one_hot).unwrap(), 1.5);
        let uniform = DomainnessVector::new(vec![0.25; 4]).unwrap();
        assert_eq!(multi_target_adversarial(&[4.0, 2.0, 1.0, 1.0], &uniform).unwrap(), 2.0);
        assert!(multi_target_adversarial(&[1.0, 2.0], &uniform).is_err());
        assert!(multi_target_adversarial_raw(&[1.0, 2.0], &[0.7, 0.7]).is_err());
        let single = DomainnessVector::new(vec![1.0]).unwrap();
        assert_eq!(multi_target_adversarial(&[0.37], &single).unwrap(), 0.37);
    }

    #[test]
    fn boost_weight_examples() {
        assert_eq!(boost_weight(z(0.0)), 1.0);
        assert_eq!(boost_weight(z(1.0)), 0.0);
        assert_eq!(boost_weight(z(0.75)), 0.5);
        let grid: Vec<f64> = (0..=100).map(|i| boost_weight(z(i as f64 / 100.0))).collect();
        assert!(grid.windows(2).all(|w| w[1] < w[0]));
    }

    /// With `d_S = m^2` and `d_T = (1 - m)^2`, minimizing the weighted sum over
    /// `m` lands at `m = z`, where `d_S / d_T = (z / (1 - z))^2`; the
    /// grid search is independent of that closed form.
    #[test]
    fn weighted_distance_minimizer_tracks_domainness() {
        for zv in [0.2, 0.5, 0.8] {
            let (mut best, mut best_m) = (f64::INFINITY, 0.0);
            for i in 0..=100_000 {
                let m = i as f64 / 100_000.0;
                let loss = combined_adversarial(m * m, (1.0 - m) * (1.0 - m), z(zv));
                if loss < best {
                    best = loss;
                    best_m = m;
                }
            }
            assert!((best_m - zv).abs() < 1e-4, "z {zv}: minimizer {best_m}");
            let ratio = (best_m * best_m) / ((1.0 - best_m) * (1.0 - best_m));
            assert!((ratio.sqrt() - zv / (1.0 - zv)).abs() < 1e-3);
        }
    }

    pub(crate) fn tiny_models(seed: u64, k: usize) -> FlowModels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = |rng: &mut ChaCha8Rng| {
            Generator::new(
                GeneratorConfig {
                    cond_dim: if k == 1 { 1 } else { k },
                    ..GeneratorConfig::miniature(1)
                },
                rng,
            )
        };
        FlowModels {
            g_st: g(&mut rng),
            g_ts: g(&mut rng),
            d_source: Discriminator::new(DiscriminatorConfig::miniature(1), &mut rng),
            d_targets: (0..k)
                .map(|_| Discriminator::new(DiscriminatorConfig::miniature(1), &mut rng))
                .collect(),
        }
    }

    #[test]
    fn breakdown_totals_are_consistent() {
        let models = tiny_models(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = Tensor::uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
        let xt = Tensor::uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
        let zs = [z(rng.random()), z(rng.random())];
        for lambda in [0.0, 10.0] {
            for direction in [Direction::SourceToTarget, Direction::TargetToSource, Direction::Both] {
                let cfg = ObjectiveConfig {
                    lambda_cyc: lambda,
                    direction,
                    ..Default::default()
                };
                let b = full_objective(&xs, &xt, &zs, &models, &cfg).unwrap();
                assert!((b.total - b.recomputed_total(&cfg)).abs() < 1e-6);
                assert!(b.cycle >= 0.0);
                if lambda == 0.0 {
                    assert_eq!(b.total, b.combined_adv);
                }
            }
        }
        let b = LossBreakdown {
            combined_adv: 0.4,
            cycle: 0.1,
            total: 0.0,
            ..Default::default()
        };
        assert!((b.recomputed_total(&ObjectiveConfig::default()) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn single_direction_combination_matches_scalar_formula() {
        let models = tiny_models(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let xt = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let cfg = ObjectiveConfig {
            direction: Direction::SourceToTarget,
            ..Default::default()
        };
        for v in [0.0, 0.3, 1.0] {
            let b = full_objective(&xs, &xt, &[z(v)], &models, &cfg).unwrap();
            let expected = combined_adversarial(b.adv_source, b.adv_target, z(v));
            assert!((b.combined_adv - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn target_to_source_swaps_weights() {
        let models = tiny_models(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let xt = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let cfg = ObjectiveConfig {
            direction: Direction::TargetToSource,
            ..Default::default()
        };
        let b = full_objective(&xs, &xt, &[z(0.3)], &models, &cfg).unwrap();
        assert!((b.combined_adv - (0.3 * b.adv_source + 0.7 * b.adv_target)).abs() < 1e-12);
    }

    #[test]
    fn objective_rejects_mismatched_batches() {
        let models = tiny_models(7, 1);
        let xs = Tensor::zeros(&[2, 1, 8, 8]);
        let xt = Tensor::zeros(&[1, 1, 8, 8]);
        let cfg = ObjectiveConfig::default();
        assert!(full_objective(&xs, &xt, &[z(0.5), z(0.5)], &models, &cfg).is_err());
        assert!(full_objective(&xs, &xs, &[z(0.5)], &models, &cfg).is_err());
    }

    #[test]
    fn multi_target_one_hot_matches_single_term() {
        let models = tiny_models(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let xts: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng))
            .collect();
        let cfg = ObjectiveConfig {
            weighted_reconstruction: true,
            ..Default::default()
        };
        for k in 0..3 {
            let zk = DomainnessVector::one_hot(3, k).unwrap();
            let tape = Tape::inference();
            let pass = multi_target_objective(&tape, &models, &xs, &xts, &zk, &cfg).unwrap();
            assert!((pass.breakdown.adv_targets - pass.breakdown.per_target[k]).abs() < 1e-6);
            assert_eq!(pass.fake_sources.len(), 1);
            assert_eq!(pass.fake_sources[0].0, k);
        }
        let unweighted = ObjectiveConfig::default();
        let tape = Tape::inference();
        let zk = DomainnessVector::one_hot(3, 1).unwrap();
        let pass = multi_target_objective(&tape, &models, &xs, &xts, &zk, &unweighted).unwrap();
        assert_eq!(pass.fake_sources.len(), 3);
    }

    #[test]
    fn embedding_receives_gradient() {
        let models = tiny_models(10, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let xt = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let pass = generator_objective(&tape, &models, &xs, &xt, &[z(0.4)], &ObjectiveConfig::default()).unwrap();
        let grads = tape.backward(pass.total);
        for p in models.g_st.embedding_parameters() {
            let g = grads.wrt(p).expect("embedding gradient");
            assert!(g.data().iter().any(|v| *v != 0.0));
        }
    }
}
