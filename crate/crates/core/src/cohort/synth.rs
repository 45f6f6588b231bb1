//! Synthetic multi-cancer cohorts with planted, transferable prognostic
//! signal and known ground-truth risks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Cohort, InstanceBag};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::survival::SurvivalLabel;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_cancers: usize,
    /// Instance feature dimension.
    #[serde(default = "default_d")]
    pub d: usize,
    /// Inclusive range for instances per bag.
    #[serde(default = "default_m_range")]
    pub m_range: (usize, usize),
    /// Discrete time bins.
    #[serde(default = "default_t")]
    pub t_bins: usize,
    /// Feature indices carrying prognostic signal, one set per cancer.
    pub signal_dims: Vec<Vec<usize>>,
    /// Fraction of labels censored, in [0, 1).
    pub censor_rate: f64,
    /// Patients per cancer.
    pub n_patients: usize,
    /// Prognostic-instance prevalence: base + slope * risk.
    #[serde(default = "default_prevalence")]
    pub prevalence: (f64, f64),
    /// Additive amplitude on signal dims: base + slope * risk.
    #[serde(default = "default_amplitude")]
    pub amplitude: (f64, f64),
    /// Standard deviation of the event-time noise around the risk-linear
    /// mean bin; larger values weaken the label signal.
    #[serde(default = "default_time_noise")]
    pub time_noise_sd: f64,
    /// Fraction of patients contributing two slides.
    #[serde(default = "default_multi_slide")]
    pub multi_slide_rate: f64,
    pub seed: u64,
}

fn default_d() -> usize {
    32
}
fn default_m_range() -> (usize, usize) {
    (20, 200)
}
fn default_t() -> usize {
    10
}
fn default_prevalence() -> (f64, f64) {
    (0.15, 0.45)
}
fn default_amplitude() -> (f64, f64) {
    (1.0, 1.5)
}
fn default_time_noise() -> f64 {
    1.0
}
fn default_multi_slide() -> f64 {
    0.1
}

impl SynthSpec {
    /// Desk-scale spec with disjoint 4-dim signal blocks per cancer.
    pub fn desk(n_cancers: usize, n_patients: usize, seed: u64) -> Self {
        let signal_dims = (0..n_cancers).map(|c| (c * 4..(c + 1) * 4).collect()).collect();
        SynthSpec {
            n_cancers,
            d: default_d(),
            m_range: (20, 60),
            t_bins: default_t(),
            signal_dims,
            censor_rate: 0.3,
            n_patients,
            prevalence: default_prevalence(),
            amplitude: default_amplitude(),
            time_noise_sd: default_time_noise(),
            multi_slide_rate: default_multi_slide(),
            seed,
        }
    }

    pub fn shared_dims(&self, s: usize, t: usize) -> Vec<usize> {
        self.signal_dims[s]
            .iter()
            .filter(|d| self.signal_dims[t].contains(d))
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cancers == 0 || self.signal_dims.len() != self.n_cancers {
            return Err(Error::Contract(
                "signal_dims must list one index set per cancer".into(),
            ));
        }
        for dims in &self.signal_dims {
            if dims.iter().any(|&i| i >= self.d) {
                return Err(Error::Contract("signal dim outside [0, d)".into()));
            }
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::Contract("censor_rate must lie in [0, 1)".into()));
        }
        if self.m_range.0 == 0 || self.m_range.0 > self.m_range.1 {
            return Err(Error::Contract("invalid m_range".into()));
        }
        Ok(())
    }
}

/// Per-bag generator bookkeeping for oracle evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagTruth {
    pub bag_id: String,
    pub patient_id: String,
    pub cancer_code: String,
    pub latent_risk: f64,
    /// Row indices of instances carrying planted signal.
    pub prognostic_rows: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bags: Vec<BagTruth>,
}

impl GroundTruth {
    pub fn risk_of(&self, bag_id: &str) -> Option<f64> {
        self.bags
            .iter()
            .find(|b| b.bag_id == bag_id)
            .map(|b| b.latent_risk)
    }
}

pub fn cancer_code(idx: usize) -> String {
    format!("SYN{idx:02}")
}

/// Generate one cohort per cancer. Deterministic for a given spec.
pub fn synth_cohorts(spec: &SynthSpec) -> Result<(Vec<Cohort>, GroundTruth)> {
    spec.validate()?;
    let mut truth = GroundTruth::default();
    let mut cohorts = Vec::with_capacity(spec.n_cancers);
    for c in 0..spec.n_cancers {
        let code = cancer_code(c);
        if spec.signal_dims[c].is_empty() {
            eprintln!("warning: cancer {code} has empty signal_dims; cohort is pure noise");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b9).wrapping_add(c as u64));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut bags = Vec::new();
        let mut labels = Vec::new();
        for p in 0..spec.n_patients {
            let patient_id = format!("{code}-p{p:05}");
            let risk: f64 = rng.gen_range(0.0..1.0);
            let label = sample_label(spec, risk, &mut rng);
            let n_slides = if rng.gen_bool(spec.multi_slide_rate) { 2 } else { 1 };
            for s in 0..n_slides {
                let bag_id = format!("{patient_id}-s{s}");
                let m = rng.gen_range(spec.m_range.0..=spec.m_range.1);
                let mut features = DenseMatrix::zeros(m, spec.d);
                let mut prognostic_rows = Vec::new();
                let prevalence = (spec.prevalence.0 + spec.prevalence.1 * risk).clamp(0.0, 1.0);
                let amplitude = spec.amplitude.0 + spec.amplitude.1 * risk;
                for row in 0..m {
                    for col in 0..spec.d {
                        features.set(row, col, normal.sample(&mut rng));
                    }
                    if rng.gen_bool(prevalence) && !spec.signal_dims[c].is_empty() {
                        prognostic_rows.push(row);
                        for &col in &spec.signal_dims[c] {
                            let v = features.get(row, col) * 0.3 + amplitude;
                            features.set(row, col, v);
                        }
                    }
                }
                truth.bags.push(BagTruth {
                    bag_id: bag_id.clone(),
                    patient_id: patient_id.clone(),
                    cancer_code: code.clone(),
                    latent_risk: risk,
                    prognostic_rows,
                });
                bags.push(InstanceBag {
                    bag_id,
                    patient_id: patient_id.clone(),
                    cancer_code: code.clone(),
                    features,
                });
                labels.push(label);
            }
        }
        let cohort = Cohort {
            cancer_code: code,
            bags,
            labels,
            t_bins: spec.t_bins,
        };
        cohort.validate()?;
        cohorts.push(cohort);
    }
    Ok((cohorts, truth))
}

/// Event bin: risk-linear mean (high risk -> early bin) plus Gaussian
/// noise, clamped to the bin range. The implied discrete event-time
/// distribution has hazard increasing in risk.
fn sample_label<R: Rng>(spec: &SynthSpec, risk: f64, rng: &mut R) -> SurvivalLabel {
    let noise = Normal::new(0.0, spec.time_noise_sd.max(1e-9)).expect("finite sd");
    let mean = (1.0 - risk) * (spec.t_bins - 1) as f64;
    let event_bin = (mean + noise.sample(rng))
        .round()
        .clamp(0.0, (spec.t_bins - 1) as f64) as usize;
    if rng.gen_bool(spec.censor_rate) {
        SurvivalLabel::new(rng.gen_range(0..=event_bin), false)
    } else {
        SurvivalLabel::new(event_bin, true)
    }
}

/// Oracle risk read directly from bag content over a set of signal dims:
/// the bag mean over those feature columns.
pub fn signal_oracle_risk(bag: &InstanceBag, dims: &[usize]) -> f64 {
    if dims.is_empty() {
        return 0.0;
    }
    let m = bag.n_instances();
    let mut sum = 0.0;
    for row in 0..m {
        for &col in dims {
            sum += bag.features.get(row, col);
        }
    }
    sum / (m * dims.len()) as f64
}
