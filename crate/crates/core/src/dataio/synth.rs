//! Synthetic two-modality embeddings with a tunable split between shared and
//! complementary class information.
//!
//! Each sample has a class sign `y = -1` (bonafide) or `+1` (deepfake) and a
//! nuisance `z ~ N(0, 1)` shared by both modalities. Along a fixed random
//! unit direction `u_m` per modality:
//!
//! ```text
//! a = (cos(t/2) * delta * y + sin(t/2) * zeta * z) * u_a + sigma * e_a
//! b = (cos(t/2) * delta * y - sin(t/2) * zeta * z) * u_b + sigma * e_b
//! ```
//!
//! At `t = 0` both modalities carry the same clean class signal. As `t`
//! grows each modality alone is contaminated by `z`, which enters the two
//! with opposite signs, so only a combination of both cancels it. The
//! single-modality Bayes error is
//! `Phi(-delta cos(t/2) / sqrt(zeta^2 sin^2(t/2) + sigma^2))`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{pair, EmbeddingDataset, PairedDataset};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::rng;

/// Smallest accepted embedding width per modality.
pub const MIN_SYNTH_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub dims: (usize, usize),
    /// Complementarity angle in radians, `0..=pi`.
    pub theta: f64,
    /// Isotropic noise scale.
    pub sigma: f64,
    /// Class-mean offset `delta` along each modality's direction.
    pub separation: f64,
    /// Scale `zeta` of the shared nuisance.
    pub nuisance: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 1000,
            dims: (32, 32),
            theta: 0.0,
            sigma: 0.5,
            separation: 2.0,
            nuisance: 2.0,
            seed: 0,
        }
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Config("n per class must be positive".into()));
        }
        if self.dims.0 < MIN_SYNTH_DIM || self.dims.1 < MIN_SYNTH_DIM {
            return Err(Error::Config(format!(
                "dims {:?} below the minimum of {MIN_SYNTH_DIM}",
                self.dims
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.theta) {
            return Err(Error::Config(format!("theta {} outside [0, pi]", self.theta)));
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::Config(format!("separation must be > 0, got {}", self.separation)));
        }
        if !(self.nuisance.is_finite() && self.nuisance >= 0.0) {
            return Err(Error::Config(format!("nuisance must be >= 0, got {}", self.nuisance)));
        }
        Ok(())
    }

    /// Per-class offset of the class mean along the modality direction.
    pub fn class_offset(&self) -> f64 {
        (self.theta / 2.0).cos() * self.separation
    }

    /// Bayes error of an optimal classifier that sees one modality only.
    pub fn single_branch_bayes_error(&self) -> f64 {
        let spread = ((self.nuisance * (self.theta / 2.0).sin()).powi(2) + self.sigma.powi(2)).sqrt();
        standard_normal().cdf(-self.class_offset() / spread)
    }

    /// Noise scale giving the requested single-modality Bayes error, or
    /// `None` when the nuisance alone already exceeds it.
    pub fn sigma_for_single_branch_error(theta: f64, separation: f64, nuisance: f64, target: f64) -> Option<f64> {
        if !(target > 0.0 && target < 0.5) {
            return None;
        }
        let q = -standard_normal().inverse_cdf(target);
        let spread = (theta / 2.0).cos() * separation / q;
        let var = spread.powi(2) - (nuisance * (theta / 2.0).sin()).powi(2);
        (var > 0.0).then(|| var.sqrt())
    }

    /// The unit class directions `(u_a, u_b)`, fixed by the seed.
    pub fn directions(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = rng::numbered(self.seed, 0);
        let mut unit = |d: usize| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<_>>()
        };
        let a = unit(self.dims.0);
        let b = unit(self.dims.1);
        (a, b)
    }

    /// Class means `(mean_a, mean_b)` for `label`.
    pub fn class_means(&self, label: Label) -> (Vec<f64>, Vec<f64>) {
        let sign = match label {
            Label::Bonafide => -1.0,
            Label::Deepfake => 1.0,
        };
        let offset = sign * self.class_offset();
        let (ua, ub) = self.directions();
        (
            ua.iter().map(|u| u * offset).collect(),
            ub.iter().map(|u| u * offset).collect(),
        )
    }
}

fn generate_portion(cfg: &SynthConfig, portion: u64, prefix: &str) -> Result<PairedDataset> {
    cfg.validate()?;
    let (ua, ub) = cfg.directions();
    let mut rng = rng::numbered(cfg.seed, 1 + portion);
    let half = cfg.theta / 2.0;
    let n = 2 * cfg.n_per_class;
    let (mut va, mut vb) = (Vec::with_capacity(n * ua.len()), Vec::with_capacity(n * ub.len()));
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Deepfake };
        let y = if label == Label::Deepfake { 1.0 } else { -1.0 };
        let z: f64 = rng.sample(StandardNormal);
        let shared = half.cos() * cfg.separation * y;
        let mixed = half.sin() * cfg.nuisance * z;
        for (u, coef, out) in [(&ua, shared + mixed, &mut va), (&ub, shared - mixed, &mut vb)] {
            for &ui in u.iter() {
                let e: f64 = rng.sample(StandardNormal);
                out.push((coef * ui + cfg.sigma * e) as f32);
            }
        }
        ids.push(format!("{prefix}-{i:06}"));
        labels.push(label);
    }
    let a = EmbeddingDataset::new(cfg.dims.0, va, ids.clone(), labels.clone(), "synth-a")?;
    let b = EmbeddingDataset::new(cfg.dims.1, vb, ids, labels, "synth-b")?;
    pair(&a, &b)
}

/// One synthetic set of `2 * n_per_class` utterances, classes alternating.
pub fn synth_generate(cfg: &SynthConfig) -> Result<PairedDataset> {
    generate_portion(cfg, 0, "syn")
}

/// Independent train and eval sets drawn around the same class directions.
pub fn synth_generate_split(cfg: &SynthConfig) -> Result<(PairedDataset, PairedDataset)> {
    Ok((generate_portion(cfg, 1, "train")?, generate_portion(cfg, 2, "eval")?))
}
