//! The domainness variable: a scalar in `[0, 1]` placing an image between the
//! source (0) and target (1) domains, or a point on the probability simplex
//! mixing `K` target domains.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Absolute tolerance on the simplex sum constraint.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DomainnessValue(f64);

impl DomainnessValue {
    pub const SOURCE: DomainnessValue = DomainnessValue(0.0);
    pub const TARGET: DomainnessValue = DomainnessValue(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Validation(format!("domainness {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for DomainnessValue {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<DomainnessValue> for f64 {
    fn from(z: DomainnessValue) -> f64 {
        z.0
    }
}

/// A point on the `(K-1)`-simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DomainnessVector(Vec<f64>);

impl DomainnessVector {
    /// Validates `values`; sums within [`SIMPLEX_TOLERANCE`] of one are renormalized.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_vector(&values)
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::arg(format!("vertex {index} out of range for K = {k}")));
        }
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for DomainnessVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        validate_vector(&values)
    }
}

impl From<DomainnessVector> for Vec<f64> {
    fn from(v: DomainnessVector) -> Vec<f64> {
        v.0
    }
}

/// Conditioning input for a generator: a scalar for two-domain models, a
/// simplex point for `K`-target models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Domainness {
    Scalar(DomainnessValue),
    Vector(DomainnessVector),
}

impl Domainness {
    /// Width of the generator's conditioning input.
    pub fn dim(&self) -> usize {
        match self {
            Domainness::Scalar(_) => 1,
            Domainness::Vector(v) => v.k(),
        }
    }

    /// The raw conditioning features fed to the embedding layer.
    pub fn features(&self) -> Vec<f64> {
        match self {
            Domainness::Scalar(z) => vec![z.get()],
            Domainness::Vector(v) => v.values().to_vec(),
        }
    }

    pub fn scalar(&self) -> Option<DomainnessValue> {
        match self {
            Domainness::Scalar(z) => Some(*z),
            Domainness::Vector(v) if v.k() == 1 => Some(DomainnessValue(v.values()[0])),
            Domainness::Vector(_) => None,
        }
    }
}

impl From<DomainnessValue> for Domainness {
    fn from(z: DomainnessValue) -> Self {
        Domainness::Scalar(z)
    }
}

impl From<DomainnessVector> for Domainness {
    fn from(v: DomainnessVector) -> Self {
        Domainness::Vector(v)
    }
}

/// Checks the range constraint on every component, then the sum constraint.
pub fn validate_vector(values: &[f64]) -> Result<DomainnessVector> {
    if values.is_empty() {
        return Err(Error::Validation("domainness vector is empty".into()));
    }
    for (i, &v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("range: component {i} = {v} outside [0, 1]")));
        }
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Validation(format!(
            "sum: components sum to {sum}, expected 1 within {SIMPLEX_TOLERANCE:e}"
        )));
    }
    Ok(DomainnessVector(values.iter().map(|v| v / sum).collect()))
}

/// Curriculum for sampling `z` during training: `z ~ Beta(alpha(t), 1)` with
/// `alpha(t) = exp((t - T/2) / (T/4))`, so early draws favour the source end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub total_iterations: u64,
    pub beta: f64,
    pub rng_seed: u64,
    /// Ablation switch: sample `U(0, 1)` at every step instead.
    #[serde(default)]
    pub uniform: bool,
}

impl BetaSchedule {
    pub fn new(total_iterations: u64, rng_seed: u64) -> Result<Self> {
        if total_iterations == 0 {
            return Err(Error::arg("total_iterations must be positive"));
        }
        Ok(Self {
            total_iterations,
            beta: 1.0,
            rng_seed,
            uniform: false,
        })
    }

    pub fn alpha_at(&self, t: u64) -> Result<f64> {
        if t > self.total_iterations {
            return Err(Error::arg(format!(
                "iteration {t} outside [0, {}]",
                self.total_iterations
            )));
        }
        let total = self.total_iterations as f64;
        Ok(((t as f64 - 0.5 * total) / (0.25 * total)).exp())
    }

    /// Draws `z` for iteration `t`. With `beta = 1` the inverse CDF is
    /// `u^(1/alpha)`.
    pub fn sample_scalar<R: Rng + ?Sized>(&self, t: u64, rng: &mut R) -> Result<DomainnessValue> {
        let alpha = self.alpha_at(t)?;
        let u: f64 = rng.random();
        if self.uniform {
            return DomainnessValue::new(u);
        }
        DomainnessValue::new(u.powf(1.0 / alpha))
    }

    pub fn mean_at(&self, t: u64) -> Result<f64> {
        if self.uniform {
            return Ok(0.5);
        }
        let alpha = self.alpha_at(t)?;
        Ok(alpha / (alpha + self.beta))
    }
}

/// Beta density `z^(a-1) (1-z)^(b-1) / B(a, b)`.
pub fn beta_pdf(z: DomainnessValue, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::arg(format!(
            "Beta shape parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    let z = z.get();
    let ln_b = ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta);
    let term = |x: f64, p: f64| {
        if p == 1.0 {
            1.0
        } else {
            x.powf(p - 1.0)
        }
    };
    Ok(term(z, alpha) * term(1.0 - z, beta) / ln_b.exp())
}

/// Uniform draw on the `(K-1)`-simplex via normalized exponential spacings.
pub fn sample_vector<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<DomainnessVector> {
    if k < 2 {
        return Err(Error::arg(format!("sample_vector needs K >= 2, got {k}")));
    }
    let e: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.random();
            -(1.0 - u).ln()
        })
        .collect();
    let sum: f64 = e.iter().sum();
    Ok(DomainnessVector(e.into_iter().map(|v| v / sum).collect()))
}

/// Style-generalization schedule: the `K` one-hot vertices in order, then one
/// uniform simplex draw; period `K + 1`.
pub fn vertex_cycle<R: Rng + ?Sized>(step: u64, k: usize, rng: &mut R) -> Result<DomainnessVector> {
    if k < 2 {
        return Err(Error::arg(format!("vertex cycle needs K >= 2, got {k}")));
    }
    let phase = (step % (k as u64 + 1)) as usize;
    if phase < k {
        DomainnessVector::one_hot(k, phase)
    } else {
        sample_vector(k, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule() -> BetaSchedule {
        BetaSchedule::new(1000, 42).unwrap()
    }

    #[test]
    fn alpha_endpoints() {
        let s = schedule();
        assert_eq!(s.alpha_at(500).unwrap(), 1.0);
        assert!((s.alpha_at(0).unwrap() - 0.1353352832366127).abs() < 1e-12);
        assert!((s.alpha_at(1000).unwrap() - 7.38905609893065).abs() < 1e-12);
        assert!(s.alpha_at(1001).is_err());
    }

    #[test]
    fn alpha_strictly_increasing() {
        let s = schedule();
        let alphas: Vec<f64> = (0..=1000).map(|t| s.alpha_at(t).unwrap()).collect();
        assert!(alphas.windows(2).all(|w| w[1] > w[0]));
        assert!(alphas.iter().all(|&a| a > 0.0));
    }

    #[test]
    fn beta_pdf_examples() {
        let half = DomainnessValue::new(0.5).unwrap();
        assert!((beta_pdf(half, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((beta_pdf(half, 2.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(beta_pdf(DomainnessValue::SOURCE, 2.0, 1.0).unwrap(), 0.0);
        assert!(beta_pdf(half, 0.0, 1.0).is_err());
        assert!(beta_pdf(half, 1.0, -1.0).is_err());
    }

    /// Tanh-sinh quadrature on `[0, 1]`; tolerant of integrable endpoint
    /// singularities such as `z^(alpha - 1)` for `alpha < 1`.
    fn tanh_sinh(f: impl Fn(f64) -> f64, points: usize) -> f64 {
        let h = 9.0 / points as f64;
        let mut acc = 0.0;
        for i in 0..points {
            let t = -4.5 + (i as f64 + 0.5) * h;
            let u = std::f64::consts::FRAC_PI_2 * t.sinh();
            // x = (1 + tanh u) / 2 and 1 - x, computed without cancellation
            let x = 1.0 / (1.0 + (-2.0 * u).exp());
            let one_minus_x = 1.0 / (1.0 + (2.0 * u).exp());
            let w = std::f64::consts::FRAC_PI_2 * t.cosh() / (2.0 * u.cosh().powi(2));
            if x > 0.0 && one_minus_x > 0.0 {
                acc += w * h * f(x);
            }
        }
        acc
    }

    #[test]
    fn beta_pdf_integrates_to_one() {
        for alpha in [0.2, 1.0, 2.0, 7.39] {
            let integral = tanh_sinh(
                |z| {
                    let z = DomainnessValue::new(z.clamp(0.0, 1.0)).unwrap();
                    beta_pdf(z, alpha, 1.0).unwrap()
                },
                1000,
            );
            assert!((integral - 1.0).abs() < 1e-4, "alpha {alpha}: {integral}");
        }
    }

    #[test]
    fn sample_means_follow_schedule() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed);
        for (t, expected) in [(500, 0.5), (1000, 0.8807970779778823)] {
            let n = 100_000;
            let mean = (0..n).map(|_| s.sample_scalar(t, &mut rng).unwrap().get()).sum::<f64>() / n as f64;
            assert!((mean - expected).abs() < 0.01, "t {t}: mean {mean}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = schedule();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed);
            (0..50)
                .map(|t| s.sample_scalar(t * 20, &mut rng).unwrap().get())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn uniform_simplex_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut sums = [0.0; 4];
        for _ in 0..n {
            let v = sample_vector(4, &mut rng).unwrap();
            assert!((v.values().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (s, x) in sums.iter_mut().zip(v.values()) {
                *s += x;
            }
        }
        for s in sums {
            assert!((s / n as f64 - 0.25).abs() < 0.01);
        }
        assert!(sample_vector(1, &mut rng).is_err());
    }

    #[test]
    fn two_simplex_is_uniform_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let firsts: Vec<f64> = (0..20_000)
            .map(|_| {
                let v = sample_vector(2, &mut rng).unwrap();
                assert!((v.values()[0] + v.values()[1] - 1.0).abs() < 1e-12);
                v.values()[0]
            })
            .collect();
        // U(0,1): each quartile holds a quarter of the mass
        for q in 0..4 {
            let lo = q as f64 / 4.0;
            let frac = firsts.iter().filter(|&&v| v >= lo && v < lo + 0.25).count() as f64 / firsts.len() as f64;
            assert!((frac - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn validation_examples() {
        assert!(validate_vector(&[1.0, 0.0, 0.0, 0.0]).is_ok());
        assert!(validate_vector(&[0.25; 4]).is_ok());
        let err = validate_vector(&[0.5, 0.5, 0.5, -0.5]).unwrap_err();
        assert!(err.to_string().contains("range"), "{err}");
        let err = validate_vector(&[0.5, 0.6]).unwrap_err();
        assert!(err.to_string().contains("sum"), "{err}");
        let v = validate_vector(&[0.5, 0.5 + 5e-7]).unwrap();
        assert!((v.values().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn vertex_cycle_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for step in 0..4 {
            let v = vertex_cycle(step, 4, &mut rng).unwrap();
            assert_eq!(v, DomainnessVector::one_hot(4, step as usize).unwrap());
        }
        let random = vertex_cycle(4, 4, &mut rng).unwrap();
        assert!(random.values().iter().all(|&x| x < 1.0));
        assert_eq!(vertex_cycle(5, 4, &mut rng).unwrap().values(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(vertex_cycle(2, 2, &mut rng).unwrap().k(), 2);
        assert_eq!(vertex_cycle(3, 2, &mut rng).unwrap().values(), &[1.0, 0.0]);
    }

    #[test]
    fn single_target_vector_degenerates_to_scalar() {
        let v = validate_vector(&[1.0]).unwrap();
        assert_eq!(Domainness::from(v).scalar(), Some(DomainnessValue::TARGET));
    }

    #[test]
    fn scalar_rejects_out_of_range() {
        assert!(DomainnessValue::new(-0.01).is_err());
        assert!(DomainnessValue::new(1.01).is_err());
        assert!(DomainnessValue::new(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn sampled_vectors_validate(k in 2usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = sample_vector(k, &mut rng).unwrap();
            prop_assert!(validate_vector(v.values()).is_ok());
        }

        #[test]
        fn samples_lie_in_unit_interval(t in 0u64..=1000, seed in any::<u64>()) {
            let s = schedule();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = s.sample_scalar(t, &mut rng).unwrap().get();
            prop_assert!((0.0..=1.0).contains(&z));
        }
    }
}
