//! Combination-strategy baselines over fixed expert features. Each variant
//! keeps the frozen encoders, per-expert adapters, and hazard head of the
//! mixture model and replaces only the routing/combination step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Expert, FeatureCache, MoeConfig};
use crate::abmil::{nll_on_tape, TrainConfig};
use crate::cohort::{assert_no_leakage, std_dev, Cohort, FoldAssignment, InstanceBag};
use crate::error::{Error, Result};
use crate::numerics::{
    adamw_step, AdamWState, DenseMatrix, GradientTape, LrSchedule, NodeId, ParamSet,
};
use crate::survival::{c_index, risk_score, HazardCurve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinerKind {
    /// Mean of the adapted expert features.
    Mean,
    /// Attention pooling over the adapted expert features.
    Attention,
    /// Gated attention pooling.
    GatedAttention,
    /// Sequential GRU-style recurrence over the experts in registry order.
    Recurrent,
    /// Single-head self-attention followed by mean pooling.
    SelfAttention,
}

#[derive(Debug, Clone)]
pub struct CombinerModel {
    pub kind: CombinerKind,
    pub d_embed: usize,
    pub t_bins: usize,
    pub adapter_hidden: usize,
    pub experts: Vec<Expert>,
    pub params: ParamSet,
}

const ADAPTER_PARAMS: usize = 4;

impl CombinerModel {
    fn adapter_base(tau: usize) -> usize {
        ADAPTER_PARAMS * tau
    }

    fn head_w_index(&self) -> usize {
        ADAPTER_PARAMS * self.experts.len()
    }

    fn head_b_index(&self) -> usize {
        self.head_w_index() + 1
    }

    fn combiner_base(&self) -> usize {
        self.head_b_index() + 1
    }

    pub fn init(
        kind: CombinerKind,
        experts: Vec<Expert>,
        adapter_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::Contract("at least one expert required".into()))?;
        let d_embed = first.encoder.config.d_embed;
        let t_bins = first.encoder.config.t_bins;
        for e in &experts {
            if e.encoder.config.d_embed != d_embed || e.encoder.config.t_bins != t_bins {
                return Err(Error::Contract(format!(
                    "expert {} dimensions differ from the registry head",
                    e.code
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        for tau in 0..experts.len() {
            p.push(
                format!("adapter{tau}.w1"),
                DenseMatrix::glorot(d_embed, adapter_hidden, &mut rng),
            );
            p.push(format!("adapter{tau}.b1"), DenseMatrix::zeros(1, adapter_hidden));
            p.push(
                format!("adapter{tau}.w2"),
                DenseMatrix::glorot(adapter_hidden, d_embed, &mut rng),
            );
            p.push(format!("adapter{tau}.b2"), DenseMatrix::zeros(1, d_embed));
        }
        p.push("head.w", DenseMatrix::glorot(d_embed, t_bins, &mut rng));
        p.push("head.b", DenseMatrix::zeros(1, t_bins));
        let attn = (d_embed / 2).max(2);
        match kind {
            CombinerKind::Mean => {}
            CombinerKind::Attention => {
                p.push("comb.v", DenseMatrix::glorot(d_embed, attn, &mut rng));
                p.push("comb.w", DenseMatrix::glorot(attn, 1, &mut rng));
            }
            CombinerKind::GatedAttention => {
                p.push("comb.v", DenseMatrix::glorot(d_embed, attn, &mut rng));
                p.push("comb.u", DenseMatrix::glorot(d_embed, attn, &mut rng));
                p.push("comb.w", DenseMatrix::glorot(attn, 1, &mut rng));
            }
            CombinerKind::Recurrent => {
                for gate in ["r", "z", "h"] {
                    p.push(format!("comb.wx{gate}"), DenseMatrix::glorot(d_embed, d_embed, &mut rng));
                    p.push(format!("comb.wh{gate}"), DenseMatrix::glorot(d_embed, d_embed, &mut rng));
                    p.push(format!("comb.b{gate}"), DenseMatrix::zeros(1, d_embed));
                }
            }
            CombinerKind::SelfAttention => {
                p.push("comb.wq", DenseMatrix::glorot(d_embed, d_embed, &mut rng));
                p.push("comb.wk", DenseMatrix::glorot(d_embed, d_embed, &mut rng));
                p.push("comb.wv", DenseMatrix::glorot(d_embed, d_embed, &mut rng));
            }
        }
        Ok(CombinerModel {
            kind,
            d_embed,
            t_bins,
            adapter_hidden,
            experts,
            params: p,
        })
    }

    /// Tape forward: adapted expert features combined per strategy, then
    /// the hazard head. Expert encodings enter as constants (frozen).
    pub fn forward_tape(
        &self,
        tape: &mut GradientTape,
        bag: &InstanceBag,
        cache: &mut FeatureCache,
    ) -> Result<NodeId> {
        let p = &self.params;
        let mut adapted = Vec::with_capacity(self.experts.len());
        for (tau, expert) in self.experts.iter().enumerate() {
            let z_val = cache.get_or_encode(tau, expert, bag)?;
            let z = tape.constant(z_val);
            let base = Self::adapter_base(tau);
            let aw1 = tape.param(base, p.value(base).clone());
            let ab1 = tape.param(base + 1, p.value(base + 1).clone());
            let aw2 = tape.param(base + 2, p.value(base + 2).clone());
            let ab2 = tape.param(base + 3, p.value(base + 3).clone());
            let a = tape.matmul(z, aw1)?;
            let a = tape.add_row(a, ab1)?;
            let a = tape.relu(a);
            let a = tape.matmul(a, aw2)?;
            let a = tape.add_row(a, ab2)?;
            adapted.push(a);
        }
        let cb = self.combiner_base();
        let z_mix = match self.kind {
            CombinerKind::Mean => {
                let stacked = tape.concat_rows(&adapted)?;
                tape.mean_rows(stacked)
            }
            CombinerKind::Attention => {
                let stacked = tape.concat_rows(&adapted)?;
                let v = tape.param(cb, p.value(cb).clone());
                let w = tape.param(cb + 1, p.value(cb + 1).clone());
                let gate = tape.matmul(stacked, v)?;
                let gate = tape.tanh(gate);
                let logits = tape.matmul(gate, w)?;
                let row = tape.transpose(logits);
                let attention = tape.softmax_rows(row);
                tape.matmul(attention, stacked)?
            }
            CombinerKind::GatedAttention => {
                let stacked = tape.concat_rows(&adapted)?;
                let v = tape.param(cb, p.value(cb).clone());
                let u = tape.param(cb + 1, p.value(cb + 1).clone());
                let w = tape.param(cb + 2, p.value(cb + 2).clone());
                let gate = tape.matmul(stacked, v)?;
                let gate = tape.tanh(gate);
                let gu = tape.matmul(stacked, u)?;
                let gu = tape.sigmoid(gu);
                let gated = tape.hadamard(gate, gu)?;
                let logits = tape.matmul(gated, w)?;
                let row = tape.transpose(logits);
                let attention = tape.softmax_rows(row);
                tape.matmul(attention, stacked)?
            }
            CombinerKind::Recurrent => {
                // GRU over the experts in registry order; z_mix = final state
                let wxr = tape.param(cb, p.value(cb).clone());
                let whr = tape.param(cb + 1, p.value(cb + 1).clone());
                let br = tape.param(cb + 2, p.value(cb + 2).clone());
                let wxz = tape.param(cb + 3, p.value(cb + 3).clone());
                let whz = tape.param(cb + 4, p.value(cb + 4).clone());
                let bz = tape.param(cb + 5, p.value(cb + 5).clone());
                let wxh = tape.param(cb + 6, p.value(cb + 6).clone());
                let whh = tape.param(cb + 7, p.value(cb + 7).clone());
                let bh = tape.param(cb + 8, p.value(cb + 8).clone());
                let mut h = tape.constant(DenseMatrix::zeros(1, self.d_embed));
                for &x in &adapted {
                    let xr = tape.matmul(x, wxr)?;
                    let hr = tape.matmul(h, whr)?;
                    let r = tape.add(xr, hr)?;
                    let r = tape.add(r, br)?;
                    let r = tape.sigmoid(r);
                    let xz = tape.matmul(x, wxz)?;
                    let hz = tape.matmul(h, whz)?;
                    let zg = tape.add(xz, hz)?;
                    let zg = tape.add(zg, bz)?;
                    let zg = tape.sigmoid(zg);
                    let rh = tape.hadamard(r, h)?;
                    let xh = tape.matmul(x, wxh)?;
                    let hh = tape.matmul(rh, whh)?;
                    let cand = tape.add(xh, hh)?;
                    let cand = tape.add(cand, bh)?;
                    let cand = tape.tanh(cand);
                    let keep = tape.affine(zg, -1.0, 1.0);
                    let kept = tape.hadamard(keep, h)?;
                    let new = tape.hadamard(zg, cand)?;
                    h = tape.add(kept, new)?;
                }
                h
            }
            CombinerKind::SelfAttention => {
                let stacked = tape.concat_rows(&adapted)?;
                let wq = tape.param(cb, p.value(cb).clone());
                let wk = tape.param(cb + 1, p.value(cb + 1).clone());
                let wv = tape.param(cb + 2, p.value(cb + 2).clone());
                let q = tape.matmul(stacked, wq)?;
                let k = tape.matmul(stacked, wk)?;
                let v = tape.matmul(stacked, wv)?;
                let kt = tape.transpose(k);
                let s = tape.matmul(q, kt)?;
                let s = tape.affine(s, 1.0 / (self.d_embed as f64).sqrt(), 0.0);
                let a = tape.softmax_rows(s);
                let o = tape.matmul(a, v)?;
                tape.mean_rows(o)
            }
        };
        let hw = tape.param(self.head_w_index(), p.value(self.head_w_index()).clone());
        let hb = tape.param(self.head_b_index(), p.value(self.head_b_index()).clone());
        let head = tape.matmul(z_mix, hw)?;
        let head = tape.add_row(head, hb)?;
        Ok(tape.sigmoid(head))
    }

    /// Value forward through a throwaway tape.
    pub fn forward(&self, bag: &InstanceBag, cache: &mut FeatureCache) -> Result<HazardCurve> {
        cache.validate(&self.experts)?;
        let mut tape = GradientTape::new();
        let hazards = self.forward_tape(&mut tape, bag, cache)?;
        Ok(HazardCurve::clamped(tape.value(hazards).values()).0)
    }
}

/// Pure-NLL training of a combiner baseline, same optimizer/schedule and
/// accumulation as the mixture. Returns per-epoch mean loss.
pub fn fit_combiner(
    model: &mut CombinerModel,
    cohort: &Cohort,
    train_idx: &[usize],
    cfg: &TrainConfig,
    cache: &mut FeatureCache,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.epochs == 0 || train_idx.is_empty() {
        return Ok(Vec::new());
    }
    cache.validate(&model.experts)?;
    let updates_per_epoch = train_idx.len().div_ceil(cfg.accumulation_steps) as u64;
    let total_updates = updates_per_epoch * cfg.epochs as u64;
    let schedule = LrSchedule::new(
        cfg.lr,
        updates_per_epoch * cfg.warmup_epochs as u64,
        total_updates,
    )?;
    let mut state = AdamWState::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xab53);
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut update = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for window in order.chunks(cfg.accumulation_steps) {
            let mut acc: Vec<Option<DenseMatrix>> = vec![None; model.params.len()];
            let scale = 1.0 / window.len() as f64;
            for &i in window {
                let bag = &cohort.bags[i];
                let mut tape = GradientTape::new();
                let hazards = model.forward_tape(&mut tape, bag, cache)?;
                let loss = nll_on_tape(&mut tape, hazards, &cohort.labels[i])?;
                let loss_val = tape.value(loss).scalar();
                if !loss_val.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at update {update}, bag {}",
                        bag.bag_id
                    )));
                }
                epoch_loss += loss_val;
                let grads = tape.backward(loss)?;
                for (pi, g) in grads.take().into_iter().enumerate() {
                    if let Some(g) = g {
                        match &mut acc[pi] {
                            Some(a) => a.add_assign_scaled(&g, scale),
                            slot => {
                                let mut scaled = g;
                                for v in scaled.values_mut() {
                                    *v *= scale;
                                }
                                *slot = Some(scaled);
                            }
                        }
                    }
                }
            }
            let lr = schedule.lr_at(update)?;
            adamw_step(&mut model.params, &acc, &mut state, lr)?;
            update += 1;
        }
        epoch_losses.push(epoch_loss / order.len() as f64);
    }
    Ok(epoch_losses)
}

/// Cross-validated combiner baseline; returns (mean, sigma) test C-Index.
pub fn train_combiner_cv(
    target: &Cohort,
    folds: &FoldAssignment,
    experts_per_fold: &[Vec<Expert>],
    kind: CombinerKind,
    base_cfg: &MoeConfig,
    train_cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if experts_per_fold.len() != folds.k {
        return Err(Error::Contract(format!(
            "need one expert registry per fold: {} registries for k={}",
            experts_per_fold.len(),
            folds.k
        )));
    }
    let mut cs = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let (train_idx, test_idx) = folds.split_bags(target, fold);
        assert_no_leakage(target, folds, fold, &train_idx)?;
        let mut model = CombinerModel::init(
            kind,
            experts_per_fold[fold].clone(),
            base_cfg.adapter_hidden,
            train_cfg.seed.wrapping_add(fold as u64 * 4001),
        )?;
        let mut cache = FeatureCache::new(&model.experts);
        fit_combiner(&mut model, target, &train_idx, train_cfg, &mut cache)?;
        let mut risks = Vec::with_capacity(test_idx.len());
        let mut labels = Vec::with_capacity(test_idx.len());
        for &i in &test_idx {
            risks.push(risk_score(&model.forward(&target.bags[i], &mut cache)?));
            labels.push(target.labels[i]);
        }
        cs.push(c_index(&risks, &labels)?);
    }
    Ok((cs.iter().sum::<f64>() / cs.len() as f64, std_dev(&cs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abmil::{AbmilConfig, AbmilModel};
    use crate::survival::SurvivalLabel;

    fn tiny_experts(n: usize, seed: u64) -> Vec<Expert> {
        (0..n)
            .map(|i| Expert {
                code: format!("SYN{i:02}"),
                encoder: AbmilModel::init(
                    AbmilConfig {
                        d_in: 8,
                        d_embed: 6,
                        d_attn: 4,
                        t_bins: 3,
                        gated: true,
                    },
                    seed + i as u64,
                ),
            })
            .collect()
    }

    fn tiny_bag(seed: u64) -> InstanceBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InstanceBag {
            bag_id: format!("b{seed}"),
            patient_id: format!("p{seed}"),
            cancer_code: "SYN00".into(),
            features: DenseMatrix::glorot(4, 8, &mut rng),
        }
    }

    #[test]
    fn mean_combiner_matches_manual_average() {
        let model = CombinerModel::init(CombinerKind::Mean, tiny_experts(3, 1), 5, 2).unwrap();
        let bag = tiny_bag(3);
        let mut cache = FeatureCache::new(&model.experts);
        let hazards = model.forward(&bag, &mut cache).unwrap();

        // manual: average the adapted features, then the head
        let p = &model.params;
        let mut z_mix = DenseMatrix::zeros(1, 6);
        for (tau, expert) in model.experts.iter().enumerate() {
            let z = expert.encoder.encode(&bag).unwrap();
            let base = CombinerModel::adapter_base(tau);
            let mut h = z.matmul(p.value(base));
            for c in 0..h.cols() {
                h.set(0, c, (h.get(0, c) + p.value(base + 1).get(0, c)).max(0.0));
            }
            let mut a = h.matmul(p.value(base + 2));
            for c in 0..a.cols() {
                a.set(0, c, a.get(0, c) + p.value(base + 3).get(0, c));
            }
            for c in 0..6 {
                z_mix.set(0, c, z_mix.get(0, c) + a.get(0, c) / 3.0);
            }
        }
        let mut raw = z_mix.matmul(p.value(model.head_w_index()));
        for c in 0..raw.cols() {
            raw.set(0, c, raw.get(0, c) + p.value(model.head_b_index()).get(0, c));
        }
        for (h, r) in hazards.values().iter().zip(raw.values()) {
            let expect = crate::numerics::sigmoid(*r);
            assert!((h - expect).abs() < 1e-12);
        }
    }

    /// Central finite differences over every combiner variant's full graph.
    #[test]
    fn combiner_finite_difference_all_kinds() {
        let label = SurvivalLabel::new(1, true);
        let bag = tiny_bag(7);
        for kind in [
            CombinerKind::Mean,
            CombinerKind::Attention,
            CombinerKind::GatedAttention,
            CombinerKind::Recurrent,
            CombinerKind::SelfAttention,
        ] {
            let model = CombinerModel::init(kind, tiny_experts(3, 11), 5, 12).unwrap();
            let eval = |m: &CombinerModel| -> (f64, Vec<DenseMatrix>) {
                let mut cache = FeatureCache::new(&m.experts);
                let mut tape = GradientTape::new();
                let hazards = m.forward_tape(&mut tape, &bag, &mut cache).unwrap();
                let loss = nll_on_tape(&mut tape, hazards, &label).unwrap();
                let val = tape.value(loss).scalar();
                let grads = tape.backward(loss).unwrap();
                let g = (0..m.params.len())
                    .map(|i| {
                        grads.get(i).cloned().unwrap_or_else(|| {
                            DenseMatrix::zeros(m.params.value(i).rows(), m.params.value(i).cols())
                        })
                    })
                    .collect();
                (val, g)
            };
            let (_, analytic) = eval(&model);
            let h = 1e-5;
            let mut max_rel = 0.0f64;
            for pi in 0..model.params.len() {
                for i in 0..model.params.value(pi).values().len() {
                    let mut plus = model.clone();
                    plus.params.value_mut(pi).values_mut()[i] += h;
                    let mut minus = model.clone();
                    minus.params.value_mut(pi).values_mut()[i] -= h;
                    let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                    let an = analytic[pi].values()[i];
                    let rel = (fd - an).abs() / an.abs().max(1e-6);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-4, "{kind:?}: max relative error {max_rel}");
        }
    }

    #[test]
    fn forward_is_deterministic_per_kind() {
        for kind in [
            CombinerKind::Attention,
            CombinerKind::Recurrent,
            CombinerKind::SelfAttention,
        ] {
            let model = CombinerModel::init(kind, tiny_experts(4, 21), 5, 22).unwrap();
            let bag = tiny_bag(23);
            let mut c1 = FeatureCache::new(&model.experts);
            let mut c2 = FeatureCache::new(&model.experts);
            let h1 = model.forward(&bag, &mut c1).unwrap();
            let h2 = model.forward(&bag, &mut c2).unwrap();
            assert_eq!(h1.values(), h2.values());
        }
    }
}
