//! Token-level budget allocation, the clipped Gaussian mechanism on input
//! embeddings, and composed accounting over noised exposures.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::l2_norm;
use crate::model::InputPerturbation;
use crate::sensitivity::TokenSensitivity;

/// Which ℓ₂ sensitivity the noise scale is calibrated to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityVariant {
    /// Δ = C
    MainText,
    /// Δ = 2C, the bound for two arbitrary clipped embeddings.
    #[default]
    Appendix,
}

impl SensitivityVariant {
    pub fn multiplier(self) -> f64 {
        match self {
            SensitivityVariant::MainText => 1.0,
            SensitivityVariant::Appendix => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub eps_lower: f64,
    pub eps_upper: f64,
    pub delta: f64,
    /// δ′ for composition.
    pub delta_prime: f64,
    pub clip_norm: f64,
    pub variant: SensitivityVariant,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            eps_lower: 1.0,
            eps_upper: 10.0,
            delta: 1e-6,
            delta_prime: 1e-6,
            clip_norm: 1.0,
            variant: SensitivityVariant::Appendix,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("eps_lower", self.eps_lower),
            ("eps_upper", self.eps_upper),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, format!("must be a positive number, got {v}")));
            }
        }
        if self.eps_lower > self.eps_upper {
            return Err(Error::config(
                "eps_lower",
                format!("eps_lower ({}) exceeds eps_upper ({})", self.eps_lower, self.eps_upper),
            ));
        }
        for (key, v) in [("delta", self.delta), ("delta_prime", self.delta_prime)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(key, format!("must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

/// ε_i = ε_lower + (ε_upper − ε_lower)·(1 − score)².
pub fn allocate_budget(score: f64, config: &PrivacyConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::InvalidArgument(format!("score must lie in [0,1], got {score}")));
    }
    let keep = 1.0 - score;
    Ok(config.eps_lower + (config.eps_upper - config.eps_lower) * keep * keep)
}

/// Factor that maps `e` into the ℓ₂ ball of radius `c` (1 inside the ball).
pub fn clip_scale(e: &[f64], c: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("clip norm must be positive, got {c}")));
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding has a non-finite entry".into()));
    }
    let norm = l2_norm(e);
    Ok(if norm <= c { 1.0 } else { c / norm })
}

/// Projects `e` onto the ℓ₂ ball of radius `c`.
pub fn clip(e: &[f64], c: f64) -> Result<Vec<f64>> {
    let s = clip_scale(e, c)?;
    Ok(if s == 1.0 { e.to_vec() } else { e.iter().map(|v| v * s).collect() })
}

/// σ_i = k·C·√(2 ln(1.25/δ)) / ε_i with k = 1 (main text) or 2 (appendix).
pub fn noise_sigma(epsilon: f64, delta: f64, c: f64, variant: SensitivityVariant) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("clip norm must be positive, got {c}")));
    }
    Ok(variant.multiplier() * c * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Seeded i.i.d. standard-normal stream for embedding noise.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn gaussian(&mut self, dim: usize, sigma: f64) -> Vec<f64> {
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                sigma * z
            })
            .collect()
    }
}

/// One noised exposure of one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub sequence_id: usize,
    pub position: usize,
    pub epoch: usize,
    pub epsilon: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrivacyLedger {
    pub delta: f64,
    pub delta_prime: f64,
    records: Vec<LedgerRecord>,
}

impl PrivacyLedger {
    pub fn new(delta: f64, delta_prime: f64) -> Self {
        Self {
            delta,
            delta_prime,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: LedgerRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of a single sequence, in exposure order.
    pub fn for_sequence(&self, sequence_id: usize) -> Vec<&LedgerRecord> {
        self.records.iter().filter(|r| r.sequence_id == sequence_id).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(LEDGER_COLUMNS).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            w.write_record([
                r.sequence_id.to_string(),
                r.position.to_string(),
                r.epoch.to_string(),
                r.epsilon.to_string(),
                r.sigma.to_string(),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, delta: f64, delta_prime: f64) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(raw.as_bytes());
        let headers = rdr.headers().map_err(|e| csv_io(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != LEDGER_COLUMNS {
            return Err(Error::Data(format!(
                "{}: expected ledger columns {:?}",
                path.display(),
                LEDGER_COLUMNS
            )));
        }
        let mut ledger = Self::new(delta, delta_prime);
        for (i, row) in rdr.deserialize::<LedgerRecord>().enumerate() {
            let rec = row.map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })?;
            ledger.push(rec);
        }
        Ok(ledger)
    }
}

pub const LEDGER_COLUMNS: [&str; 5] = ["sequence_id", "position", "epoch", "epsilon", "sigma"];

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Where a perturbation happens, for the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exposure {
    pub sequence_id: usize,
    pub position: usize,
    pub epoch: usize,
}

/// Clipped Gaussian mechanism with explicit σ. Returns the perturbed vector and
/// the clip factor / noise pair that produced it.
pub fn gaussian_mechanism(
    e: &[f64],
    sigma: f64,
    c: f64,
    noise: &mut NoiseSource,
) -> Result<(Vec<f64>, InputPerturbation)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
    }
    let scale = clip_scale(e, c)?;
    let n = noise.gaussian(e.len(), sigma);
    let out = e.iter().zip(&n).map(|(v, z)| v * scale + z).collect();
    Ok((
        out,
        InputPerturbation {
            clip_scale: scale,
            noise: n,
        },
    ))
}

/// Applies the mechanism to one token embedding according to its profile entry.
///
/// Zero-score tokens pass through untouched and leave no ledger record.
pub fn perturb_embedding(
    e: &[f64],
    entry: &TokenSensitivity,
    config: &PrivacyConfig,
    noise: &mut NoiseSource,
    ledger: &mut PrivacyLedger,
    exposure: Exposure,
) -> Result<Option<(Vec<f64>, InputPerturbation)>> {
    if entry.score <= 0.0 {
        return Ok(None);
    }
    let (epsilon, sigma) = match (entry.epsilon, entry.sigma) {
        (Some(eps), Some(s)) => (eps, s),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "token at position {} has score {} but no noise scale",
                exposure.position, entry.score
            )))
        }
    };
    let out = gaussian_mechanism(e, sigma, config.clip_norm, noise)?;
    ledger.push(LedgerRecord {
        sequence_id: exposure.sequence_id,
        position: exposure.position,
        epoch: exposure.epoch,
        epsilon,
        sigma,
    });
    Ok(Some(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Composition {
    pub epsilon_total: f64,
    pub delta_total: f64,
    pub count: usize,
}

/// ε_total = Σ ε_i + √(2L·ln(1/δ′))·max ε_i and δ_total = δ + δ′ over the given budgets.
pub fn compose_epsilons(epsilons: &[f64], delta: f64, delta_prime: f64) -> Result<Composition> {
    if epsilons.is_empty() {
        return Err(Error::InvalidArgument("nothing to compose: empty ledger".into()));
    }
    if !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(Error::InvalidArgument(format!("delta' must lie in (0,1), got {delta_prime}")));
    }
    let l = epsilons.len() as f64;
    let sum: f64 = epsilons.iter().sum();
    let max = epsilons.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Composition {
        epsilon_total: sum + (2.0 * l * (1.0 / delta_prime).ln()).sqrt() * max,
        delta_total: delta + delta_prime,
        count: epsilons.len(),
    })
}

/// Composes every record in the ledger.
pub fn compose_sequence(ledger: &PrivacyLedger, delta_prime: f64) -> Result<Composition> {
    let eps: Vec<f64> = ledger.records.iter().map(|r| r.epsilon).collect();
    compose_epsilons(&eps, ledger.delta, delta_prime)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn budget_examples() {
        let c = PrivacyConfig::default();
        assert_eq!(allocate_budget(0.0, &c).unwrap(), 10.0);
        assert_eq!(allocate_budget(1.0, &c).unwrap(), 1.0);
        assert_eq!(allocate_budget(0.5, &c).unwrap(), 3.25);
        assert!(allocate_budget(1.2, &c).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(&[0.3, 0.4], 1.0).unwrap(), vec![0.3, 0.4]);
        let c = clip(&[3.0, 4.0], 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&c, 1.0).unwrap(), c);
        assert!(clip(&[f64::NAN], 1.0).is_err());
        assert!(clip(&[1.0], 0.0).is_err());
    }

    #[test]
    fn sigma_examples() {
        let main = noise_sigma(1.0, 1e-6, 1.0, SensitivityVariant::MainText).unwrap();
        assert!((main - (2.0 * 1.25e6f64.ln()).sqrt()).abs() < 1e-12);
        assert!((main - 5.299).abs() < 1e-3);
        let app = noise_sigma(1.0, 1e-6, 1.0, SensitivityVariant::Appendix).unwrap();
        assert_eq!(app, 2.0 * main);
        assert!(noise_sigma(0.0, 1e-6, 1.0, SensitivityVariant::Appendix).is_err());
        assert!(noise_sigma(1.0, 1.0, 1.0, SensitivityVariant::Appendix).is_err());
    }

    fn entry(score: f64) -> TokenSensitivity {
        let cfg = PrivacyConfig::default();
        let (epsilon, sigma) = if score > 0.0 {
            let e = allocate_budget(score, &cfg).unwrap();
            (Some(e), Some(noise_sigma(e, cfg.delta, cfg.clip_norm, cfg.variant).unwrap()))
        } else {
            (None, None)
        };
        TokenSensitivity {
            token: 3,
            score1: 0.0,
            score2: 0.0,
            score,
            epsilon,
            sigma,
            is_stopword: score == 0.0,
        }
    }

    #[test]
    fn zero_score_bypass() {
        let mut ledger = PrivacyLedger::new(1e-6, 1e-6);
        let mut noise = NoiseSource::new(1);
        let before = noise.clone().gaussian(1, 1.0);
        let exp = Exposure {
            sequence_id: 0,
            position: 1,
            epoch: 0,
        };
        let out = perturb_embedding(&[5.0, 1.0], &entry(0.0), &PrivacyConfig::default(), &mut noise, &mut ledger, exp).unwrap();
        assert!(out.is_none());
        assert!(ledger.is_empty());
        assert_eq!(noise.gaussian(1, 1.0), before);
    }

    #[test]
    fn positive_score_records_and_needs_sigma() {
        let mut ledger = PrivacyLedger::new(1e-6, 1e-6);
        let mut noise = NoiseSource::new(1);
        let exp = Exposure {
            sequence_id: 4,
            position: 2,
            epoch: 1,
        };
        let cfg = PrivacyConfig::default();
        perturb_embedding(&[5.0, 1.0], &entry(0.4), &cfg, &mut noise, &mut ledger, exp).unwrap().unwrap();
        assert_eq!(ledger.len(), 1);
        assert_eq!(ledger.records()[0].sequence_id, 4);
        let mut broken = entry(0.4);
        broken.sigma = None;
        assert!(perturb_embedding(&[1.0], &broken, &cfg, &mut noise, &mut ledger, exp).is_err());
    }

    #[test]
    fn noiseless_limit_is_clip() {
        let mut noise = NoiseSource::new(3);
        let (out, _) = gaussian_mechanism(&[3.0, 4.0], 0.0, 1.0, &mut noise).unwrap();
        assert_eq!(out, clip(&[3.0, 4.0], 1.0).unwrap());
    }

    #[test]
    fn compose_examples() {
        let one = compose_epsilons(&[2.0], 1e-6, 1e-6).unwrap();
        assert!((one.epsilon_total - (2.0 + (2.0 * 1e6f64.ln()).sqrt() * 2.0)).abs() < 1e-12);
        assert!((one.epsilon_total - 12.513).abs() < 1e-3);
        let two = compose_epsilons(&[1.0, 2.0], 1e-6, 1e-6).unwrap();
        assert!((two.epsilon_total - 17.867).abs() < 1e-3);
        assert_eq!(two.delta_total, 2e-6);
        assert_eq!(two.count, 2);
        assert!(compose_epsilons(&[], 1e-6, 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn budget_in_range_and_decreasing(s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0) {
            let c = PrivacyConfig::default();
            let e1 = allocate_budget(s1, &c).unwrap();
            prop_assert!((c.eps_lower..=c.eps_upper).contains(&e1));
            if s1 < s2 {
                prop_assert!(e1 > allocate_budget(s2, &c).unwrap());
            }
        }

        #[test]
        fn clip_inside_ball(v in prop::collection::vec(-100.0f64..100.0, 1..16), c in 0.01f64..10.0) {
            let out = clip(&v, c).unwrap();
            prop_assert!(l2_norm(&out) <= c * (1.0 + 1e-12));
            prop_assert_eq!(clip(&out, c).unwrap().len(), v.len());
        }

        #[test]
        fn composition_grows_with_records(eps in prop::collection::vec(0.5f64..10.0, 1..30), extra in 0.5f64..10.0) {
            let a = compose_epsilons(&eps, 1e-6, 1e-6).unwrap();
            let mut more = eps.clone();
            more.push(extra);
            prop_assert!(compose_epsilons(&more, 1e-6, 1e-6).unwrap().epsilon_total > a.epsilon_total);
        }
    }
}
