//! Mixture training with the auxiliary losses, cross-validated evaluation,
//! routing-dynamics logging, and the ablation suite.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::combiner::{train_combiner_cv, CombinerKind};
use super::{
    selection_fractions, Expert, ExpertSubset, FeatureCache, MoeConfig, MoeModel, RouterKind,
};
use crate::abmil::{nll_on_tape, TrainConfig};
use crate::cohort::{assert_no_leakage, std_dev, Cohort, FoldAssignment};
use crate::error::{Error, Result};
use crate::numerics::{adamw_step, AdamWState, DenseMatrix, GradientTape, LrSchedule};
use crate::survival::c_index;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingLogRow {
    pub epoch: usize,
    /// Expert registry code.
    pub expert: String,
    /// Mean routing score over the epoch's training bags.
    pub mean_score: f64,
}

#[derive(Debug, Clone)]
pub struct MoeFoldOutcome {
    pub fold: usize,
    pub model: MoeModel,
    pub test_c_index: f64,
    pub epoch_losses: Vec<f64>,
    pub routing_log: Vec<RoutingLogRow>,
}

#[derive(Debug, Clone)]
pub struct MoeCvOutcome {
    pub folds: Vec<MoeFoldOutcome>,
    pub mean_c_index: f64,
    pub sigma_c_index: f64,
}

/// One-bag-per-step training over accumulation windows. Each window first
/// routes every bag to fix the selection fractions f_tau, then replays the
/// bags on the tape with loss = NLL + coef_lb*L_B + coef_lz*L_Z terms and
/// averaged gradients, so the window's mean gradient matches the window
/// objective. Returns per-epoch mean loss and the routing-dynamics log.
pub fn fit_moe(
    model: &mut MoeModel,
    cohort: &Cohort,
    train_idx: &[usize],
    cfg: &TrainConfig,
    cache: &mut FeatureCache,
) -> Result<(Vec<f64>, Vec<RoutingLogRow>)> {
    cfg.validate()?;
    if cfg.epochs == 0 || train_idx.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    cache.validate(&model.experts)?;
    let n = model.experts.len();
    let updates_per_epoch = train_idx.len().div_ceil(cfg.accumulation_steps) as u64;
    let total_updates = updates_per_epoch * cfg.epochs as u64;
    let schedule = LrSchedule::new(
        cfg.lr,
        updates_per_epoch * cfg.warmup_epochs as u64,
        total_updates,
    )?;
    let mut state = AdamWState::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xab52);
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut update = 0u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut routing_log = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut score_sums = vec![0.0; n];
        let mut n_routed = 0usize;
        for window in order.chunks(cfg.accumulation_steps) {
            // pass 1: routing decisions fix f_tau for this window
            let mut decisions = Vec::with_capacity(window.len());
            for &i in window {
                let d = model.route(&cohort.bags[i])?;
                for (tau, &s) in d.scores.iter().enumerate() {
                    score_sums[tau] += s;
                }
                decisions.push(d);
            }
            n_routed += window.len();
            let f = selection_fractions(&decisions, n);
            let mut f_row = DenseMatrix::zeros(1, n);
            for tau in 0..n {
                f_row.set(0, tau, f[tau] * n as f64);
            }

            // pass 2: averaged gradients of the per-bag total loss
            let mut acc: Vec<Option<DenseMatrix>> = vec![None; model.params.len()];
            let scale = 1.0 / window.len() as f64;
            for (&i, decision) in window.iter().zip(&decisions) {
                let bag = &cohort.bags[i];
                let mut tape = GradientTape::new();
                let nodes = model.forward_tape(&mut tape, bag, decision, cache)?;
                let nll = nll_on_tape(&mut tape, nodes.hazards, &cohort.labels[i])?;
                let mut loss = nll;
                if model.config.coef_lb > 0.0 {
                    let lb = tape.hadamard_const(nodes.scores, f_row.clone())?;
                    let lb = tape.sum_all(lb);
                    let lb = tape.affine(lb, model.config.coef_lb, 0.0);
                    loss = tape.add(loss, lb)?;
                }
                if model.config.coef_lz > 0.0 {
                    let e = tape.exp(nodes.logits);
                    let s = tape.sum_all(e);
                    let ls = tape.log(s);
                    let lz = tape.hadamard(ls, ls)?;
                    let lz = tape.affine(lz, model.config.coef_lz, 0.0);
                    loss = tape.add(loss, lz)?;
                }
                let loss_val = tape.value(loss).scalar();
                if !loss_val.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at update {update}, bag {}, routing {:?}",
                        bag.bag_id, decision.selected
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
        for (tau, sum) in score_sums.iter().enumerate() {
            routing_log.push(RoutingLogRow {
                epoch,
                expert: model.experts[tau].code.clone(),
                mean_score: sum / n_routed as f64,
            });
        }
    }
    Ok((epoch_losses, routing_log))
}

pub fn eval_moe_c_index(
    model: &MoeModel,
    cohort: &Cohort,
    indices: &[usize],
    cache: &mut FeatureCache,
) -> Result<f64> {
    let mut risks = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        risks.push(model.risk(&cohort.bags[i], Some(cache))?);
        labels.push(cohort.labels[i]);
    }
    c_index(&risks, &labels)
}

/// Cross-validated mixture training on a target cohort. `experts_per_fold`
/// holds one registry per fold so the target's own expert comes from the
/// matching fold (the off-target encoders are typically shared).
pub fn train_moe_cv(
    target: &Cohort,
    folds: &FoldAssignment,
    experts_per_fold: &[Vec<Expert>],
    cfg: &MoeConfig,
    train_cfg: &TrainConfig,
) -> Result<MoeCvOutcome> {
    if experts_per_fold.len() != folds.k {
        return Err(Error::Contract(format!(
            "need one expert registry per fold: {} registries for k={}",
            experts_per_fold.len(),
            folds.k
        )));
    }
    train_cfg.validate()?;
    target.validate()?;
    let mut outcomes = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let experts = experts_per_fold[fold].clone();
        cfg.validate(experts.len())?;
        let (train_idx, test_idx) = folds.split_bags(target, fold);
        assert_no_leakage(target, folds, fold, &train_idx)?;
        let mut model = MoeModel::init(
            cfg.clone(),
            experts,
            train_cfg.seed.wrapping_add(fold as u64 * 6007),
        )?;
        let frozen_before: Vec<String> = model
            .experts
            .iter()
            .map(|e| crate::abmil::params_checksum(&e.encoder.params))
            .collect();
        let mut cache = FeatureCache::new(&model.experts);
        let (epoch_losses, routing_log) =
            fit_moe(&mut model, target, &train_idx, train_cfg, &mut cache)?;
        for (e, before) in model.experts.iter().zip(&frozen_before) {
            if crate::abmil::params_checksum(&e.encoder.params) != *before {
                return Err(Error::Integrity(format!(
                    "frozen encoder of expert {} changed during training",
                    e.code
                )));
            }
        }
        let test_c_index = eval_moe_c_index(&model, target, &test_idx, &mut cache)?;
        outcomes.push(MoeFoldOutcome {
            fold,
            model,
            test_c_index,
            epoch_losses,
            routing_log,
        });
    }
    let cs: Vec<f64> = outcomes.iter().map(|o| o.test_c_index).collect();
    Ok(MoeCvOutcome {
        mean_c_index: cs.iter().sum::<f64>() / cs.len() as f64,
        sigma_c_index: std_dev(&cs),
        folds: outcomes,
    })
}

/// Apply an expert-subset policy. `positive_sources` are the source codes
/// with positive transfer onto the target.
pub fn filter_experts(
    experts: &[Expert],
    subset: ExpertSubset,
    target_code: &str,
    positive_sources: &BTreeSet<String>,
) -> Vec<Expert> {
    experts
        .iter()
        .filter(|e| match subset {
            ExpertSubset::All => true,
            // the target's own expert always stays in the mixture
            ExpertSubset::PositiveOnly => {
                e.code == target_code || positive_sources.contains(&e.code)
            }
            ExpertSubset::ExcludeTarget => e.code != target_code,
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum AblationVariant {
    Subset(ExpertSubset),
    Router(RouterKind),
    K(usize),
    ZCoef(f64),
    Combiner(CombinerKind),
}

impl AblationVariant {
    pub fn label(&self) -> String {
        match self {
            AblationVariant::Subset(s) => format!("subset={s:?}"),
            AblationVariant::Router(r) => format!("router={r:?}"),
            AblationVariant::K(k) => format!("K={k}"),
            AblationVariant::ZCoef(c) => format!("coef_lz={c}"),
            AblationVariant::Combiner(c) => format!("combiner={c:?}"),
        }
    }
}

/// The full sweep grid: expert subsets, router kinds, K in {3,5,7,n},
/// L_Z coefficients, and the combination-strategy baselines.
pub fn default_variants(n_experts: usize) -> Vec<AblationVariant> {
    let mut out = vec![
        AblationVariant::Subset(ExpertSubset::All),
        AblationVariant::Subset(ExpertSubset::PositiveOnly),
        AblationVariant::Subset(ExpertSubset::ExcludeTarget),
        AblationVariant::Router(RouterKind::AttentionMil),
        AblationVariant::Router(RouterKind::MeanMil),
    ];
    let mut ks: Vec<usize> = [3, 5, 7, n_experts]
        .into_iter()
        .filter(|&k| k >= 1 && k <= n_experts)
        .collect();
    ks.dedup();
    out.extend(ks.into_iter().map(AblationVariant::K));
    for c in [0.0, 0.001, 0.005, 0.01] {
        out.push(AblationVariant::ZCoef(c));
    }
    for kind in [
        CombinerKind::Mean,
        CombinerKind::Attention,
        CombinerKind::GatedAttention,
        CombinerKind::Recurrent,
        CombinerKind::SelfAttention,
    ] {
        out.push(AblationVariant::Combiner(kind));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_c_index: f64,
    pub sigma_c_index: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub target: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean_c_index,sigma\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4}\n",
                r.variant, r.mean_c_index, r.sigma_c_index
            ));
        }
        out
    }
}

/// Run one cross-validated training per requested variant; each variant
/// changes exactly one knob relative to the base configuration.
pub fn ablation_suite(
    target: &Cohort,
    folds: &FoldAssignment,
    experts_per_fold: &[Vec<Expert>],
    base_cfg: &MoeConfig,
    train_cfg: &TrainConfig,
    variants: &[AblationVariant],
    positive_sources: &BTreeSet<String>,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let (mean, sigma) = match variant {
            AblationVariant::Combiner(kind) => {
                train_combiner_cv(target, folds, experts_per_fold, *kind, base_cfg, train_cfg)?
            }
            _ => {
                let mut cfg = base_cfg.clone();
                let mut registries: Vec<Vec<Expert>> = experts_per_fold.to_vec();
                match variant {
                    AblationVariant::Subset(s) => {
                        cfg.expert_subset = *s;
                        for registry in registries.iter_mut() {
                            *registry = filter_experts(
                                registry,
                                *s,
                                &target.cancer_code,
                                positive_sources,
                            );
                        }
                    }
                    AblationVariant::Router(r) => cfg.router_kind = *r,
                    AblationVariant::K(k) => cfg.k = *k,
                    AblationVariant::ZCoef(c) => cfg.coef_lz = *c,
                    AblationVariant::Combiner(_) => unreachable!(),
                }
                let n = registries
                    .first()
                    .map(|r| r.len())
                    .ok_or_else(|| Error::Contract("no expert registries".into()))?;
                cfg.k = cfg.k.min(n);
                let cv = train_moe_cv(target, folds, &registries, &cfg, train_cfg)?;
                (cv.mean_c_index, cv.sigma_c_index)
            }
        };
        rows.push(AblationRow {
            variant: variant.label(),
            mean_c_index: mean,
            sigma_c_index: sigma,
        });
    }
    Ok(AblationReport {
        target: target.cancer_code.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abmil::{params_checksum, AbmilConfig, AbmilModel};
    use crate::cohort::synth::{synth_cohorts, SynthSpec};
    use crate::cohort::stratified_kfold;
    use crate::moe::routing_log_csv;

    fn desk_experts(cohort_d: usize, t_bins: usize, codes: &[&str], seed: u64) -> Vec<Expert> {
        codes
            .iter()
            .enumerate()
            .map(|(i, code)| Expert {
                code: code.to_string(),
                encoder: AbmilModel::init(
                    AbmilConfig {
                        d_in: cohort_d,
                        d_embed: 8,
                        d_attn: 4,
                        t_bins,
                        gated: true,
                    },
                    seed + i as u64,
                ),
            })
            .collect()
    }

    fn quick_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn small_setup() -> (Cohort, FoldAssignment, Vec<Vec<Expert>>) {
        let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 30, 77)).unwrap();
        let cohort = cohorts.into_iter().next().unwrap();
        let folds = stratified_kfold(&cohort, 2, 0).unwrap();
        let experts: Vec<Vec<Expert>> = (0..2)
            .map(|f| desk_experts(32, 10, &["SYN00", "SYN01", "SYN02"], 300 + f))
            .collect();
        (cohort, folds, experts)
    }

    #[test]
    fn frozen_encoders_bitwise_unchanged_and_log_structure() {
        let (cohort, folds, experts) = small_setup();
        let before: Vec<String> = experts[0]
            .iter()
            .map(|e| params_checksum(&e.encoder.params))
            .collect();
        let cfg = MoeConfig {
            k: 2,
            ..MoeConfig::desk(2)
        };
        let cv = train_moe_cv(&cohort, &folds, &experts, &cfg, &quick_train_cfg()).unwrap();
        for (e, b) in cv.folds[0].model.experts.iter().zip(&before) {
            assert_eq!(&params_checksum(&e.encoder.params), b);
        }
        // routing log: one row per (epoch, expert)
        let log = &cv.folds[0].routing_log;
        assert_eq!(log.len(), 2 * 3);
        let csv = routing_log_csv(log);
        assert!(csv.starts_with("epoch,expert,mean_score\n"));
        assert_eq!(csv.lines().count(), 1 + 6);
        // mean scores per epoch sum to 1
        for epoch in 0..2 {
            let s: f64 = log
                .iter()
                .filter(|r| r.epoch == epoch)
                .map(|r| r.mean_score)
                .sum();
            assert!((s - 1.0).abs() < 1e-9, "epoch {epoch} scores sum {s}");
        }
    }

    #[test]
    fn zero_coefficients_reduce_to_pure_nll() {
        let (cohort, folds, experts) = small_setup();
        let cfg = MoeConfig {
            k: 2,
            coef_lb: 0.0,
            coef_lz: 0.0,
            ..MoeConfig::desk(2)
        };
        let cv = train_moe_cv(&cohort, &folds, &experts, &cfg, &quick_train_cfg()).unwrap();
        assert_eq!(cv.folds.len(), 2);
        assert!(cv.folds.iter().all(|f| f.epoch_losses.len() == 2));
        assert!(cv.mean_c_index.is_finite());
    }

    #[test]
    fn registry_count_must_match_folds() {
        let (cohort, folds, experts) = small_setup();
        let cfg = MoeConfig {
            k: 2,
            ..MoeConfig::desk(2)
        };
        let one = vec![experts[0].clone()];
        assert!(train_moe_cv(&cohort, &folds, &one, &cfg, &quick_train_cfg()).is_err());
    }

    #[test]
    fn filter_experts_policies() {
        let experts = desk_experts(32, 10, &["SYN00", "SYN01", "SYN02"], 1);
        let positive: BTreeSet<String> = ["SYN01".to_string()].into();
        let all = filter_experts(&experts, ExpertSubset::All, "SYN00", &positive);
        assert_eq!(all.len(), 3);
        let pos = filter_experts(&experts, ExpertSubset::PositiveOnly, "SYN00", &positive);
        let codes: Vec<&str> = pos.iter().map(|e| e.code.as_str()).collect();
        assert_eq!(codes, vec!["SYN00", "SYN01"]);
        let excl = filter_experts(&experts, ExpertSubset::ExcludeTarget, "SYN00", &positive);
        let codes: Vec<&str> = excl.iter().map(|e| e.code.as_str()).collect();
        assert_eq!(codes, vec!["SYN01", "SYN02"]);
    }

    #[test]
    fn ablation_emits_one_row_per_variant() {
        let (cohort, folds, experts) = small_setup();
        let cfg = MoeConfig {
            k: 2,
            ..MoeConfig::desk(2)
        };
        let train_cfg = TrainConfig {
            epochs: 1,
            seed: 9,
            ..TrainConfig::default()
        };
        let variants = vec![
            AblationVariant::K(2),
            AblationVariant::K(3),
            AblationVariant::Router(RouterKind::MeanMil),
            AblationVariant::ZCoef(0.0),
            AblationVariant::Combiner(CombinerKind::Mean),
        ];
        let positive: BTreeSet<String> = BTreeSet::new();
        let report = ablation_suite(
            &cohort, &folds, &experts, &cfg, &train_cfg, &variants, &positive,
        )
        .unwrap();
        assert_eq!(report.rows.len(), variants.len());
        let labels: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
        assert!(labels.contains(&"K=3"));
        assert!(labels.contains(&"combiner=Mean"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + variants.len());
    }

    #[test]
    fn default_variant_grid_structure() {
        let vs = default_variants(13);
        // 3 subsets + 2 routers + K {3,5,7,13} + 4 z coefs + 5 combiners
        assert_eq!(vs.len(), 3 + 2 + 4 + 4 + 5);
        let vs_small = default_variants(3);
        assert!(vs_small.contains(&AblationVariant::K(3)));
        assert!(!vs_small.contains(&AblationVariant::K(5)));
    }
}
