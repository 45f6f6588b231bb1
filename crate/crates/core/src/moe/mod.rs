//! Top-K mixture-of-experts prognosis: an attention-MIL (or mean-MIL)
//! router over frozen expert encoders with trainable adapters, a mixed
//! representation head, and the load-balance / z auxiliary losses.

pub mod combiner;
pub mod train;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abmil::{load_checkpoint, params_checksum, save_checkpoint, AbmilModel};
use crate::cohort::InstanceBag;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softmax_rows, DenseMatrix, GradientTape, NodeId, ParamSet};
use crate::survival::{risk_score, HazardCurve, RiskScore};

pub use combiner::{CombinerKind, CombinerModel};
pub use train::{
    ablation_suite, default_variants, filter_experts, fit_moe, train_moe_cv, AblationReport,
    AblationRow, AblationVariant, MoeCvOutcome, MoeFoldOutcome, RoutingLogRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterKind {
    AttentionMil,
    MeanMil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertSubset {
    All,
    PositiveOnly,
    ExcludeTarget,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub k: usize,
    pub coef_lb: f64,
    pub coef_lz: f64,
    pub router_kind: RouterKind,
    pub expert_subset: ExpertSubset,
    pub adapter_hidden: usize,
    #[serde(default = "default_router_embed")]
    pub router_embed: usize,
    #[serde(default = "default_router_attn")]
    pub router_attn: usize,
    /// Evaluation-only variant: uniform weights over the selected set
    /// instead of renormalized routing scores.
    #[serde(default)]
    pub hard_uniform: bool,
}

fn default_router_embed() -> usize {
    128
}

fn default_router_attn() -> usize {
    64
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            k: 5,
            coef_lb: 0.01,
            coef_lz: 0.01,
            router_kind: RouterKind::AttentionMil,
            expert_subset: ExpertSubset::All,
            adapter_hidden: 512,
            router_embed: default_router_embed(),
            router_attn: default_router_attn(),
            hard_uniform: false,
        }
    }
}

impl MoeConfig {
    /// Small dims for desk-scale synthetic cohorts.
    pub fn desk(k: usize) -> Self {
        MoeConfig {
            k,
            adapter_hidden: 32,
            router_embed: 16,
            router_attn: 8,
            ..MoeConfig::default()
        }
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.k == 0 || self.k > n_experts {
            return Err(Error::Contract(format!(
                "K={} must satisfy 1 <= K <= {n_experts} experts",
                self.k
            )));
        }
        if self.coef_lb < 0.0 || self.coef_lz < 0.0 {
            return Err(Error::Contract("auxiliary coefficients must be >= 0".into()));
        }
        Ok(())
    }
}

/// A frozen encoder with its registry code. Only the shared adapters/head
/// in [`MoeModel::params`] are trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub code: String,
    pub encoder: AbmilModel,
}

/// Per-bag routing outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Raw router logits, one per expert.
    pub logits: Vec<f64>,
    /// Softmax scores w, one per expert.
    pub scores: Vec<f64>,
    /// Selected expert indices in registry order.
    pub selected: Vec<usize>,
    /// Renormalized weights aligned with `selected`.
    pub weights: Vec<f64>,
}

/// Cache of frozen encoder outputs keyed by (bag, expert). Encoder
/// checksums recorded at construction guard against stale reuse.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    entries: HashMap<(String, usize), DenseMatrix>,
    checksums: Vec<String>,
}

impl FeatureCache {
    pub fn new(experts: &[Expert]) -> Self {
        FeatureCache {
            entries: HashMap::new(),
            checksums: experts
                .iter()
                .map(|e| params_checksum(&e.encoder.params))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Verify that the experts still match the encoders this cache was
    /// built for.
    pub fn validate(&self, experts: &[Expert]) -> Result<()> {
        if experts.len() != self.checksums.len() {
            return Err(Error::Integrity(format!(
                "cache built for {} experts, got {}",
                self.checksums.len(),
                experts.len()
            )));
        }
        for (i, expert) in experts.iter().enumerate() {
            if params_checksum(&expert.encoder.params) != self.checksums[i] {
                return Err(Error::Integrity(format!(
                    "stale feature cache: encoder of expert {} changed since caching",
                    expert.code
                )));
            }
        }
        Ok(())
    }

    pub fn get_or_encode(
        &mut self,
        expert_idx: usize,
        expert: &Expert,
        bag: &InstanceBag,
    ) -> Result<DenseMatrix> {
        let key = (bag.bag_id.clone(), expert_idx);
        if let Some(z) = self.entries.get(&key) {
            return Ok(z.clone());
        }
        let z = expert.encoder.encode(bag)?;
        self.entries.insert(key, z.clone());
        Ok(z)
    }
}

#[derive(Debug, Clone)]
pub struct MoeModel {
    pub config: MoeConfig,
    pub d_in: usize,
    pub d_embed: usize,
    pub t_bins: usize,
    pub experts: Vec<Expert>,
    /// Trainable parameters: router, per-expert adapters, head.
    pub params: ParamSet,
}

// router parameter indices
const P_R_W1: usize = 0;
const P_R_B1: usize = 1;
const P_R_V: usize = 2;
const P_R_U: usize = 3;
const P_R_W: usize = 4;
const P_R_OUT: usize = 5;
const P_R_OUT_B: usize = 6;
const ROUTER_PARAMS: usize = 7;
const ADAPTER_PARAMS: usize = 4;

fn adapter_base(expert: usize) -> usize {
    ROUTER_PARAMS + ADAPTER_PARAMS * expert
}

impl MoeModel {
    pub fn head_w_index(&self) -> usize {
        adapter_base(self.experts.len())
    }

    pub fn head_b_index(&self) -> usize {
        self.head_w_index() + 1
    }

    pub fn init(config: MoeConfig, experts: Vec<Expert>, seed: u64) -> Result<Self> {
        config.validate(experts.len())?;
        let first = experts
            .first()
            .ok_or_else(|| Error::Contract("at least one expert required".into()))?;
        let d_in = first.encoder.config.d_in;
        let d_embed = first.encoder.config.d_embed;
        let t_bins = first.encoder.config.t_bins;
        for e in &experts {
            if e.encoder.config.d_in != d_in
                || e.encoder.config.d_embed != d_embed
                || e.encoder.config.t_bins != t_bins
            {
                return Err(Error::Contract(format!(
                    "expert {} dimensions differ from the registry head",
                    e.code
                )));
            }
        }
        let n = experts.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.push("router.w1", DenseMatrix::glorot(d_in, config.router_embed, &mut rng));
        p.push("router.b1", DenseMatrix::zeros(1, config.router_embed));
        p.push("router.v", DenseMatrix::glorot(config.router_embed, config.router_attn, &mut rng));
        p.push("router.u", DenseMatrix::glorot(config.router_embed, config.router_attn, &mut rng));
        p.push("router.w", DenseMatrix::glorot(config.router_attn, 1, &mut rng));
        p.push("router.out", DenseMatrix::glorot(config.router_embed, n, &mut rng));
        p.push("router.out_b", DenseMatrix::zeros(1, n));
        for tau in 0..n {
            p.push(
                format!("adapter{tau}.w1"),
                DenseMatrix::glorot(d_embed, config.adapter_hidden, &mut rng),
            );
            p.push(format!("adapter{tau}.b1"), DenseMatrix::zeros(1, config.adapter_hidden));
            p.push(
                format!("adapter{tau}.w2"),
                DenseMatrix::glorot(config.adapter_hidden, d_embed, &mut rng),
            );
            p.push(format!("adapter{tau}.b2"), DenseMatrix::zeros(1, d_embed));
        }
        p.push("head.w", DenseMatrix::glorot(d_embed, t_bins, &mut rng));
        p.push("head.b", DenseMatrix::zeros(1, t_bins));
        Ok(MoeModel {
            config,
            d_in,
            d_embed,
            t_bins,
            experts,
            params: p,
        })
    }

    /// Pooled router representation (1 x router_embed) for a bag.
    fn router_pooled(&self, bag: &InstanceBag) -> Result<DenseMatrix> {
        if bag.dim() != self.d_in {
            return Err(Error::Contract(format!(
                "bag {} has d={}, router expects {}",
                bag.bag_id,
                bag.dim(),
                self.d_in
            )));
        }
        let p = &self.params;
        let mut h = bag.features.matmul(p.value(P_R_W1));
        for r in 0..h.rows() {
            for c in 0..h.cols() {
                let v = (h.get(r, c) + p.value(P_R_B1).get(0, c)).max(0.0);
                h.set(r, c, v);
            }
        }
        match self.config.router_kind {
            RouterKind::AttentionMil => {
                let gate = h.matmul(p.value(P_R_V)).map(f64::tanh);
                let g = h.matmul(p.value(P_R_U)).map(sigmoid);
                let gated = gate.zip(&g, |a, b| a * b);
                let logits = gated.matmul(p.value(P_R_W));
                let attention = softmax_rows(&logits.transpose());
                Ok(attention.matmul(&h))
            }
            RouterKind::MeanMil => {
                let m = h.rows() as f64;
                let mut pooled = DenseMatrix::zeros(1, h.cols());
                for r in 0..h.rows() {
                    for c in 0..h.cols() {
                        pooled.set(0, c, pooled.get(0, c) + h.get(r, c) / m);
                    }
                }
                Ok(pooled)
            }
        }
    }

    pub fn router_logits(&self, bag: &InstanceBag) -> Result<Vec<f64>> {
        let pooled = self.router_pooled(bag)?;
        let p = &self.params;
        let mut logits = pooled.matmul(p.value(P_R_OUT));
        for c in 0..logits.cols() {
            let v = logits.get(0, c) + p.value(P_R_OUT_B).get(0, c);
            logits.set(0, c, v);
        }
        Ok(logits.values().to_vec())
    }

    /// Route a bag: softmax scores, deterministic top-K with registry-order
    /// tie-break, renormalized weights over the selected set.
    pub fn route(&self, bag: &InstanceBag) -> Result<RoutingDecision> {
        let logits = self.router_logits(bag)?;
        let scores_m = softmax_rows(&DenseMatrix::from_vec(1, logits.len(), logits.clone())?);
        let scores = scores_m.values().to_vec();
        let selected = top_k(&scores, self.config.k)?;
        let weights = renormalize(&scores, &selected, self.config.hard_uniform);
        Ok(RoutingDecision {
            logits,
            scores,
            selected,
            weights,
        })
    }

    /// z_mix = sum over selected experts of w-hat * adapter(E(bag));
    /// hazards = sigmoid(head(z_mix)).
    pub fn forward(
        &self,
        bag: &InstanceBag,
        cache: Option<&mut FeatureCache>,
    ) -> Result<(HazardCurve, RoutingDecision)> {
        if let Some(c) = &cache {
            c.validate(&self.experts)?;
        }
        let decision = self.route(bag)?;
        let mut cache = cache;
        let mut z_mix = DenseMatrix::zeros(1, self.d_embed);
        for (pos, &tau) in decision.selected.iter().enumerate() {
            let z = match &mut cache {
                Some(c) => c.get_or_encode(tau, &self.experts[tau], bag)?,
                None => self.experts[tau].encoder.encode(bag)?,
            };
            let adapted = self.adapter_value(tau, &z);
            let w = decision.weights[pos];
            for i in 0..self.d_embed {
                z_mix.set(0, i, z_mix.get(0, i) + w * adapted.get(0, i));
            }
        }
        let raw = self.head_value(&z_mix);
        let (hazards, _) = HazardCurve::clamped(&raw);
        Ok((hazards, decision))
    }

    /// Dense soft mixture over all experts (weights w / sum(w)); the K = n
    /// top-K forward is bitwise-equal to this.
    pub fn dense_mixture_forward(
        &self,
        bag: &InstanceBag,
        cache: Option<&mut FeatureCache>,
    ) -> Result<HazardCurve> {
        let logits = self.router_logits(bag)?;
        let scores_m = softmax_rows(&DenseMatrix::from_vec(1, logits.len(), logits)?);
        let scores = scores_m.values().to_vec();
        let all: Vec<usize> = (0..scores.len()).collect();
        let weights = renormalize(&scores, &all, self.config.hard_uniform);
        let mut cache = cache;
        let mut z_mix = DenseMatrix::zeros(1, self.d_embed);
        for (&tau, &w) in all.iter().zip(&weights) {
            let z = match &mut cache {
                Some(c) => c.get_or_encode(tau, &self.experts[tau], bag)?,
                None => self.experts[tau].encoder.encode(bag)?,
            };
            let adapted = self.adapter_value(tau, &z);
            for i in 0..self.d_embed {
                z_mix.set(0, i, z_mix.get(0, i) + w * adapted.get(0, i));
            }
        }
        let raw = self.head_value(&z_mix);
        Ok(HazardCurve::clamped(&raw).0)
    }

    fn adapter_value(&self, tau: usize, z: &DenseMatrix) -> DenseMatrix {
        let base = adapter_base(tau);
        let p = &self.params;
        let mut h = z.matmul(p.value(base));
        for c in 0..h.cols() {
            h.set(0, c, (h.get(0, c) + p.value(base + 1).get(0, c)).max(0.0));
        }
        let mut out = h.matmul(p.value(base + 2));
        for c in 0..out.cols() {
            out.set(0, c, out.get(0, c) + p.value(base + 3).get(0, c));
        }
        out
    }

    fn head_value(&self, z_mix: &DenseMatrix) -> Vec<f64> {
        let p = &self.params;
        let mut raw = z_mix.matmul(p.value(self.head_w_index()));
        for c in 0..raw.cols() {
            raw.set(0, c, raw.get(0, c) + p.value(self.head_b_index()).get(0, c));
        }
        raw.values().iter().map(|&v| sigmoid(v)).collect()
    }

    pub fn risk(&self, bag: &InstanceBag, cache: Option<&mut FeatureCache>) -> Result<RiskScore> {
        Ok(risk_score(&self.forward(bag, cache)?.0))
    }

    /// Tape forward for training. Expert encodings enter as constants, so
    /// no gradient can reach the frozen encoders. The top-K selection is
    /// taken from `decision` (piecewise constant in the parameters).
    pub fn forward_tape(
        &self,
        tape: &mut GradientTape,
        bag: &InstanceBag,
        decision: &RoutingDecision,
        cache: &mut FeatureCache,
    ) -> Result<MoeNodes> {
        let p = &self.params;
        let x = tape.constant(bag.features.clone());
        let w1 = tape.param(P_R_W1, p.value(P_R_W1).clone());
        let b1 = tape.param(P_R_B1, p.value(P_R_B1).clone());
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let pooled = match self.config.router_kind {
            RouterKind::AttentionMil => {
                let v = tape.param(P_R_V, p.value(P_R_V).clone());
                let u = tape.param(P_R_U, p.value(P_R_U).clone());
                let w = tape.param(P_R_W, p.value(P_R_W).clone());
                let gate = tape.matmul(h, v)?;
                let gate = tape.tanh(gate);
                let gu = tape.matmul(h, u)?;
                let gu = tape.sigmoid(gu);
                let gated = tape.hadamard(gate, gu)?;
                let logits = tape.matmul(gated, w)?;
                let row = tape.transpose(logits);
                let attention = tape.softmax_rows(row);
                tape.matmul(attention, h)?
            }
            RouterKind::MeanMil => tape.mean_rows(h),
        };
        let out_w = tape.param(P_R_OUT, p.value(P_R_OUT).clone());
        let out_b = tape.param(P_R_OUT_B, p.value(P_R_OUT_B).clone());
        let logits = tape.matmul(pooled, out_w)?;
        let logits = tape.add_row(logits, out_b)?;
        let scores = tape.softmax_rows(logits);

        // renormalized weights over the frozen selected set
        let entries: Vec<NodeId> = decision
            .selected
            .iter()
            .map(|&tau| tape.entry(scores, 0, tau))
            .collect::<Result<_>>()?;
        let mut sum = entries[0];
        for &e in &entries[1..] {
            sum = tape.add(sum, e)?;
        }
        let inv = tape.recip(sum);

        let mut z_mix: Option<NodeId> = None;
        for (pos, &tau) in decision.selected.iter().enumerate() {
            let z_val = cache.get_or_encode(tau, &self.experts[tau], bag)?;
            let z = tape.constant(z_val);
            let base = adapter_base(tau);
            let aw1 = tape.param(base, p.value(base).clone());
            let ab1 = tape.param(base + 1, p.value(base + 1).clone());
            let aw2 = tape.param(base + 2, p.value(base + 2).clone());
            let ab2 = tape.param(base + 3, p.value(base + 3).clone());
            let a = tape.matmul(z, aw1)?;
            let a = tape.add_row(a, ab1)?;
            let a = tape.relu(a);
            let a = tape.matmul(a, aw2)?;
            let a = tape.add_row(a, ab2)?;
            let scaled = if self.config.hard_uniform {
                let w = tape.constant(DenseMatrix::from_vec(
                    1,
                    1,
                    vec![1.0 / decision.selected.len() as f64],
                )?);
                tape.scale_by(a, w)?
            } else {
                let w_hat = tape.hadamard(entries[pos], inv)?;
                tape.scale_by(a, w_hat)?
            };
            z_mix = Some(match z_mix {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
        let z_mix = z_mix.expect("selected set nonempty");
        let hw = tape.param(self.head_w_index(), p.value(self.head_w_index()).clone());
        let hb = tape.param(self.head_b_index(), p.value(self.head_b_index()).clone());
        let head = tape.matmul(z_mix, hw)?;
        let head = tape.add_row(head, hb)?;
        let hazards = tape.sigmoid(head);
        Ok(MoeNodes {
            logits,
            scores,
            hazards,
        })
    }
}

pub struct MoeNodes {
    pub logits: NodeId,
    pub scores: NodeId,
    pub hazards: NodeId,
}

/// Indices of the K largest scores, ties broken toward lower registry
/// index, returned in ascending registry order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "K={k} out of range for {} experts",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

fn renormalize(scores: &[f64], selected: &[usize], hard_uniform: bool) -> Vec<f64> {
    if hard_uniform {
        return vec![1.0 / selected.len() as f64; selected.len()];
    }
    let sum: f64 = selected.iter().map(|&i| scores[i]).sum();
    selected.iter().map(|&i| scores[i] / sum).collect()
}

/// L_B = n * sum_tau f_tau * p-bar_tau over a window of routing decisions,
/// where f_tau is the fraction of bags whose top-K set contains tau divided
/// by K and p-bar_tau is the mean routing score.
pub fn load_balance_loss(decisions: &[RoutingDecision]) -> Result<f64> {
    let first = decisions
        .first()
        .ok_or_else(|| Error::Contract("load_balance_loss needs a nonempty window".into()))?;
    let n = first.scores.len();
    let w = decisions.len() as f64;
    let k = first.selected.len() as f64;
    let mut f = vec![0.0; n];
    let mut p_bar = vec![0.0; n];
    for d in decisions {
        for &tau in &d.selected {
            f[tau] += 1.0 / (w * k);
        }
        for (tau, &s) in d.scores.iter().enumerate() {
            p_bar[tau] += s / w;
        }
    }
    Ok(n as f64 * f.iter().zip(&p_bar).map(|(a, b)| a * b).sum::<f64>())
}

/// Per-expert selection fractions f_tau for a window, as used inside the
/// training loss.
pub fn selection_fractions(decisions: &[RoutingDecision], n: usize) -> Vec<f64> {
    let w = decisions.len() as f64;
    let mut f = vec![0.0; n];
    if decisions.is_empty() {
        return f;
    }
    let k = decisions[0].selected.len() as f64;
    for d in decisions {
        for &tau in &d.selected {
            f[tau] += 1.0 / (w * k);
        }
    }
    f
}

/// L_Z = mean over bags of (log sum_tau exp(logit_tau))^2.
pub fn z_loss(logits_per_bag: &[Vec<f64>]) -> Result<f64> {
    if logits_per_bag.is_empty() {
        return Err(Error::Contract("z_loss needs a nonempty window".into()));
    }
    let mut total = 0.0;
    for logits in logits_per_bag {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse * lse;
    }
    Ok(total / logits_per_bag.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MoeHeader {
    config: MoeConfig,
    d_in: usize,
    d_embed: usize,
    t_bins: usize,
    expert_codes: Vec<String>,
    expert_checksums: Vec<String>,
}

/// MoE checkpoint: the shared checkpoint container with a MoE header that
/// references expert encoders by checksum instead of embedding them.
pub fn save_moe(path: &Path, model: &MoeModel) -> Result<()> {
    let header = MoeHeader {
        config: model.config.clone(),
        d_in: model.d_in,
        d_embed: model.d_embed,
        t_bins: model.t_bins,
        expert_codes: model.experts.iter().map(|e| e.code.clone()).collect(),
        expert_checksums: model
            .experts
            .iter()
            .map(|e| params_checksum(&e.encoder.params))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    save_checkpoint(path, &json, &model.params)
}

/// Load a MoE checkpoint, re-binding the supplied experts. Codes and
/// encoder checksums must match the ones recorded at save time.
pub fn load_moe(path: &Path, experts: Vec<Expert>) -> Result<MoeModel> {
    let (json, params) = load_checkpoint(path)?;
    let header: MoeHeader = serde_json::from_slice(&json)?;
    if experts.len() != header.expert_codes.len() {
        return Err(Error::Integrity(format!(
            "checkpoint references {} experts, {} supplied",
            header.expert_codes.len(),
            experts.len()
        )));
    }
    for (i, e) in experts.iter().enumerate() {
        if e.code != header.expert_codes[i] {
            return Err(Error::Integrity(format!(
                "expert {} is {}, checkpoint expects {}",
                i, e.code, header.expert_codes[i]
            )));
        }
        let sum = params_checksum(&e.encoder.params);
        if sum != header.expert_checksums[i] {
            return Err(Error::Integrity(format!(
                "encoder checksum mismatch for expert {}",
                e.code
            )));
        }
    }
    Ok(MoeModel {
        config: header.config,
        d_in: header.d_in,
        d_embed: header.d_embed,
        t_bins: header.t_bins,
        experts,
        params,
    })
}

/// Routing-dynamics CSV: one row per (epoch, expert) with the mean routing
/// score over the epoch's training bags.
pub fn routing_log_csv(rows: &[RoutingLogRow]) -> String {
    let mut out = String::from("epoch,expert,mean_score\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6}\n", r.epoch, r.expert, r.mean_score));
    }
    out
}

pub fn write_routing_log(path: &Path, rows: &[RoutingLogRow]) -> Result<()> {
    fs::write(path, routing_log_csv(rows)).map_err(|e| Error::io(path.display().to_string(), e))
}
