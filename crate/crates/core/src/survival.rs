//! Discrete-time survival machinery: hazard curves, the NLL loss, C-Index,
//! Kaplan-Meier estimation, and restricted mean survival time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HAZARD_EPS: f64 = 1e-7;

/// Discrete time bin plus event indicator. `event == false` means censored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time_bin: usize,
    pub event: bool,
}

impl SurvivalLabel {
    pub fn new(time_bin: usize, event: bool) -> Self {
        SurvivalLabel { time_bin, event }
    }
}

/// Per-bin conditional event probabilities, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct HazardCurve {
    hazards: Vec<f64>,
}

impl HazardCurve {
    pub fn new(hazards: Vec<f64>) -> Result<Self> {
        if hazards.is_empty() {
            return Err(Error::Contract("hazard curve must be nonempty".into()));
        }
        if hazards.iter().any(|&h| !(h > 0.0 && h < 1.0)) {
            return Err(Error::Contract(
                "hazards must lie strictly in (0, 1)".into(),
            ));
        }
        Ok(HazardCurve { hazards })
    }

    /// Clamp raw sigmoid outputs into [eps, 1-eps]; returns whether any
    /// value actually hit the clamp.
    pub fn clamped(raw: &[f64]) -> (Self, bool) {
        let mut flagged = false;
        let hazards = raw
            .iter()
            .map(|&h| {
                let c = h.clamp(HAZARD_EPS, 1.0 - HAZARD_EPS);
                if c != h {
                    flagged = true;
                }
                c
            })
            .collect();
        (HazardCurve { hazards }, flagged)
    }

    pub fn len(&self) -> usize {
        self.hazards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hazards.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.hazards
    }
}

/// Higher value means worse prognosis.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RiskScore(pub f64);

/// S(t) = prod_{s<=t} (1 - h_s).
pub fn survival_from_hazards(h: &HazardCurve) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.len());
    let mut acc = 1.0;
    for &hz in h.values() {
        acc *= 1.0 - hz;
        out.push(acc);
    }
    out
}

/// Negative log-likelihood of one discrete-time label under a hazard curve.
///
/// Event at bin t:    -[log h_t + sum_{s<t} log(1 - h_s)]
/// Censored at bin t: -sum_{s<=t} log(1 - h_s)
pub fn nll_loss(h: &HazardCurve, y: &SurvivalLabel) -> Result<f64> {
    if y.time_bin >= h.len() {
        return Err(Error::Contract(format!(
            "time_bin {} out of range for {} hazard bins",
            y.time_bin,
            h.len()
        )));
    }
    let hz = h.values();
    let mut loss = 0.0;
    if y.event {
        loss -= hz[y.time_bin].ln();
        for &v in &hz[..y.time_bin] {
            loss -= (1.0 - v).ln();
        }
    } else {
        for &v in &hz[..=y.time_bin] {
            loss -= (1.0 - v).ln();
        }
    }
    Ok(loss)
}

/// Negated expected survival mass: -sum_t S(t). Monotone increasing in each h_t.
pub fn risk_score(h: &HazardCurve) -> RiskScore {
    let s: f64 = survival_from_hazards(h).iter().sum();
    RiskScore(-s)
}

/// Harrell's concordance over comparable pairs {(i, j): t_i < t_j, event_i}.
/// Ties in risk count 0.5.
pub fn c_index(risks: &[RiskScore], labels: &[SurvivalLabel]) -> Result<f64> {
    if risks.len() != labels.len() {
        return Err(Error::Contract("risks and labels length mismatch".into()));
    }
    let mut comparable = 0u64;
    let mut concordant = 0.0f64;
    for i in 0..labels.len() {
        if !labels[i].event {
            continue;
        }
        for j in 0..labels.len() {
            if labels[i].time_bin < labels[j].time_bin {
                comparable += 1;
                if risks[i].0 > risks[j].0 {
                    concordant += 1.0;
                } else if risks[i].0 == risks[j].0 {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric(
            "no comparable pairs for C-Index".into(),
        ));
    }
    Ok(concordant / comparable as f64)
}

/// Kaplan-Meier estimate over discrete bins. Returns S(t) per bin; censored
/// subjects leave the risk set after their bin.
pub fn km_curve(labels: &[SurvivalLabel]) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Contract("km_curve requires a nonempty cohort".into()));
    }
    let t_max = labels.iter().map(|l| l.time_bin).max().unwrap() + 1;
    let mut events = vec![0usize; t_max];
    let mut leaving = vec![0usize; t_max];
    for l in labels {
        leaving[l.time_bin] += 1;
        if l.event {
            events[l.time_bin] += 1;
        }
    }
    let mut at_risk = labels.len();
    let mut acc = 1.0;
    let mut out = Vec::with_capacity(t_max);
    for t in 0..t_max {
        if at_risk > 0 {
            acc *= 1.0 - events[t] as f64 / at_risk as f64;
        }
        out.push(acc);
        at_risk -= leaving[t];
    }
    Ok(out)
}

/// Left-endpoint integral of the survival curve with S before bin 0 taken as 1:
/// RMST(h) = 1 + sum_{t=0}^{h-2} S(t).
pub fn rmst(curve: &[f64], horizon_years: usize) -> Result<f64> {
    if horizon_years == 0 {
        return Err(Error::Contract("rmst horizon must be positive".into()));
    }
    if horizon_years > curve.len() {
        return Err(Error::Contract(format!(
            "rmst horizon {} exceeds curve length {}",
            horizon_years,
            curve.len()
        )));
    }
    Ok(1.0 + curve[..horizon_years - 1].iter().sum::<f64>())
}
