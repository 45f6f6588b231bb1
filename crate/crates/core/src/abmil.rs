//! Gated-attention MIL prognostic model: forward, encoding, training,
//! attention export, and checkpointing.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{assert_no_leakage, Cohort, FoldAssignment, InstanceBag};
use crate::error::{Error, Result};
use crate::numerics::{
    adamw_step, sigmoid, softmax_rows, AdamWState, DenseMatrix, GradientTape, LrSchedule, NodeId,
    ParamSet,
};
use crate::survival::{c_index, risk_score, HazardCurve, RiskScore, HAZARD_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbmilConfig {
    pub d_in: usize,
    pub d_embed: usize,
    pub d_attn: usize,
    pub t_bins: usize,
    pub gated: bool,
}

impl AbmilConfig {
    pub fn new(d_in: usize, t_bins: usize) -> Self {
        AbmilConfig {
            d_in,
            d_embed: 512,
            d_attn: 256,
            t_bins,
            gated: true,
        }
    }

    /// Small dims for desk-scale synthetic cohorts.
    pub fn desk(d_in: usize, t_bins: usize) -> Self {
        AbmilConfig {
            d_in,
            d_embed: 32,
            d_attn: 16,
            t_bins,
            gated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbmilModel {
    pub config: AbmilConfig,
    pub params: ParamSet,
}

// parameter layout indices
const P_EMBED_W1: usize = 0;
const P_EMBED_B1: usize = 1;
const P_EMBED_W2: usize = 2;
const P_EMBED_B2: usize = 3;
const P_ATTN_V: usize = 4;
const P_ATTN_U: usize = 5;
const P_ATTN_W: usize = 6;
const P_HEAD_W: usize = 7;
const P_HEAD_B: usize = 8;

impl AbmilModel {
    pub fn init(config: AbmilConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.push("embed.w1", DenseMatrix::glorot(config.d_in, config.d_embed, &mut rng));
        p.push("embed.b1", DenseMatrix::zeros(1, config.d_embed));
        p.push("embed.w2", DenseMatrix::glorot(config.d_embed, config.d_embed, &mut rng));
        p.push("embed.b2", DenseMatrix::zeros(1, config.d_embed));
        p.push("attn.v", DenseMatrix::glorot(config.d_embed, config.d_attn, &mut rng));
        p.push("attn.u", DenseMatrix::glorot(config.d_embed, config.d_attn, &mut rng));
        p.push("attn.w", DenseMatrix::glorot(config.d_attn, 1, &mut rng));
        p.push("head.w", DenseMatrix::glorot(config.d_embed, config.t_bins, &mut rng));
        p.push("head.b", DenseMatrix::zeros(1, config.t_bins));
        AbmilModel { config, params: p }
    }

    fn check_bag(&self, bag: &InstanceBag) -> Result<()> {
        if bag.dim() != self.config.d_in {
            return Err(Error::Contract(format!(
                "bag {} has d={}, model expects {}",
                bag.bag_id,
                bag.dim(),
                self.config.d_in
            )));
        }
        Ok(())
    }

    /// Pure forward pass: hazards, per-instance attention, and the pre-head
    /// representation z.
    pub fn forward(&self, bag: &InstanceBag) -> Result<AbmilOutput> {
        self.check_bag(bag)?;
        let p = &self.params;
        let x = &bag.features;
        let h1 = x
            .matmul(p.value(P_EMBED_W1))
            .zip_row(p.value(P_EMBED_B1))
            .map(|v| if v > 0.0 { v } else { 0.0 });
        let h = h1.matmul(p.value(P_EMBED_W2)).zip_row(p.value(P_EMBED_B2));
        let gate_in = h.matmul(p.value(P_ATTN_V)).map(f64::tanh);
        let gated = if self.config.gated {
            let g = h.matmul(p.value(P_ATTN_U)).map(sigmoid);
            gate_in.zip(&g, |a, b| a * b)
        } else {
            gate_in
        };
        let logits = gated.matmul(p.value(P_ATTN_W)); // M x 1
        let attention = softmax_rows(&logits.transpose()); // 1 x M
        let z = attention.matmul(&h); // 1 x d_embed
        let raw = z.matmul(p.value(P_HEAD_W)).zip_row(p.value(P_HEAD_B));
        let raw: Vec<f64> = raw.values().iter().map(|&v| sigmoid(v)).collect();
        let (hazards, _) = HazardCurve::clamped(&raw);
        Ok(AbmilOutput {
            hazards,
            attention: attention.values().to_vec(),
            z,
        })
    }

    /// The frozen-encoder view E_c: the pre-head representation z.
    pub fn encode(&self, bag: &InstanceBag) -> Result<DenseMatrix> {
        Ok(self.forward(bag)?.z)
    }

    pub fn risk(&self, bag: &InstanceBag) -> Result<RiskScore> {
        Ok(risk_score(&self.forward(bag)?.hazards))
    }

    /// Tape forward for training. Returns the hazard node (post-sigmoid,
    /// pre-clamp) along with attention and z nodes.
    pub fn forward_tape(&self, tape: &mut GradientTape, bag: &InstanceBag) -> Result<AbmilNodes> {
        self.check_bag(bag)?;
        let p = &self.params;
        let x = tape.constant(bag.features.clone());
        let w1 = tape.param(P_EMBED_W1, p.value(P_EMBED_W1).clone());
        let b1 = tape.param(P_EMBED_B1, p.value(P_EMBED_B1).clone());
        let w2 = tape.param(P_EMBED_W2, p.value(P_EMBED_W2).clone());
        let b2 = tape.param(P_EMBED_B2, p.value(P_EMBED_B2).clone());
        let v = tape.param(P_ATTN_V, p.value(P_ATTN_V).clone());
        let w = tape.param(P_ATTN_W, p.value(P_ATTN_W).clone());
        let hw = tape.param(P_HEAD_W, p.value(P_HEAD_W).clone());
        let hb = tape.param(P_HEAD_B, p.value(P_HEAD_B).clone());

        let h1 = tape.matmul(x, w1)?;
        let h1 = tape.add_row(h1, b1)?;
        let h1 = tape.relu(h1);
        let h = tape.matmul(h1, w2)?;
        let h = tape.add_row(h, b2)?;
        let av = tape.matmul(h, v)?;
        let av = tape.tanh(av);
        let gated = if self.config.gated {
            let u = tape.param(P_ATTN_U, p.value(P_ATTN_U).clone());
            let gu = tape.matmul(h, u)?;
            let gu = tape.sigmoid(gu);
            tape.hadamard(av, gu)?
        } else {
            av
        };
        let logits = tape.matmul(gated, w)?;
        let logits_row = tape.transpose(logits);
        let attention = tape.softmax_rows(logits_row);
        let z = tape.matmul(attention, h)?;
        let head = tape.matmul(z, hw)?;
        let head = tape.add_row(head, hb)?;
        let hazards = tape.sigmoid(head);
        Ok(AbmilNodes {
            attention,
            z,
            hazards,
        })
    }
}

/// f32-safe broadcast add of a bias row; local helper on DenseMatrix.
trait ZipRow {
    fn zip_row(&self, row: &DenseMatrix) -> DenseMatrix;
}

impl ZipRow for DenseMatrix {
    fn zip_row(&self, row: &DenseMatrix) -> DenseMatrix {
        let mut out = self.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + row.get(0, c);
                out.set(r, c, v);
            }
        }
        out
    }
}

pub struct AbmilOutput {
    pub hazards: HazardCurve,
    pub attention: Vec<f64>,
    pub z: DenseMatrix,
}

pub struct AbmilNodes {
    pub attention: NodeId,
    pub z: NodeId,
    pub hazards: NodeId,
}

/// Discrete-time NLL on the tape given a raw hazard node.
pub fn nll_on_tape(
    tape: &mut GradientTape,
    hazards: NodeId,
    label: &crate::survival::SurvivalLabel,
) -> Result<NodeId> {
    let t_bins = tape.value(hazards).cols();
    if label.time_bin >= t_bins {
        return Err(Error::Contract(format!(
            "label time_bin {} beyond T={}",
            label.time_bin, t_bins
        )));
    }
    let hc = tape.clamp(hazards, HAZARD_EPS, 1.0 - HAZARD_EPS);
    let one_minus = tape.affine(hc, -1.0, 1.0);
    let log1m = tape.log(one_minus);
    let mut prior_mask = DenseMatrix::zeros(1, t_bins);
    let upper = if label.event {
        label.time_bin
    } else {
        label.time_bin + 1
    };
    for s in 0..upper {
        prior_mask.set(0, s, 1.0);
    }
    let survive_term = tape.hadamard_const(log1m, prior_mask)?;
    let survive_sum = tape.sum_all(survive_term);
    let total = if label.event {
        let log_h = tape.log(hc);
        let mut onehot = DenseMatrix::zeros(1, t_bins);
        onehot.set(0, label.time_bin, 1.0);
        let event_term = tape.hadamard_const(log_h, onehot)?;
        let event_sum = tape.sum_all(event_term);
        tape.add(survive_sum, event_sum)?
    } else {
        survive_sum
    };
    Ok(tape.affine(total, -1.0, 0.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub accumulation_steps: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            weight_decay: 1e-5,
            epochs: 20,
            accumulation_steps: 16,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accumulation_steps == 0 || self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Contract("invalid training configuration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub model: AbmilModel,
    pub test_c_index: f64,
    /// Mean NLL per epoch over training bags.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub mean_c_index: f64,
    pub sigma_c_index: f64,
}

impl CvOutcome {
    pub fn per_fold_c(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.test_c_index).collect()
    }
}

/// Train one model per fold on the remaining folds; report test-fold C-Index.
pub fn train_cancer_specific(
    cohort: &Cohort,
    folds: &FoldAssignment,
    model_cfg: &AbmilConfig,
    cfg: &TrainConfig,
) -> Result<CvOutcome> {
    cfg.validate()?;
    cohort.validate()?;
    let mut outcomes = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        outcomes.push(train_single_fold(cohort, folds, fold, model_cfg, cfg)?);
    }
    let cs: Vec<f64> = outcomes.iter().map(|o| o.test_c_index).collect();
    let mean = cs.iter().sum::<f64>() / cs.len() as f64;
    let sigma = crate::cohort::std_dev(&cs);
    Ok(CvOutcome {
        folds: outcomes,
        mean_c_index: mean,
        sigma_c_index: sigma,
    })
}

pub fn train_single_fold(
    cohort: &Cohort,
    folds: &FoldAssignment,
    fold: usize,
    model_cfg: &AbmilConfig,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    let (train_idx, test_idx) = folds.split_bags(cohort, fold);
    assert_no_leakage(cohort, folds, fold, &train_idx)?;
    let mut model = AbmilModel::init(*model_cfg, cfg.seed.wrapping_add(fold as u64 * 7919));
    let epoch_losses = fit_abmil(&mut model, cohort, &train_idx, cfg)?;
    let test_c_index = eval_c_index(&model, cohort, &test_idx)?;
    Ok(FoldOutcome {
        fold,
        model,
        test_c_index,
        epoch_losses,
    })
}

/// One-bag-per-step training with averaged gradient accumulation and the
/// cosine-warmup schedule. Returns mean NLL per epoch.
pub fn fit_abmil(
    model: &mut AbmilModel,
    cohort: &Cohort,
    train_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.epochs == 0 || train_idx.is_empty() {
        return Ok(Vec::new());
    }
    let updates_per_epoch = train_idx.len().div_ceil(cfg.accumulation_steps) as u64;
    let total_updates = updates_per_epoch * cfg.epochs as u64;
    let schedule = LrSchedule::new(
        cfg.lr,
        updates_per_epoch * cfg.warmup_epochs as u64,
        total_updates,
    )?;
    let mut state = AdamWState::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xab51);
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
                let nodes = model.forward_tape(&mut tape, bag)?;
                let loss = nll_on_tape(&mut tape, nodes.hazards, &cohort.labels[i])?;
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

pub fn eval_c_index(model: &AbmilModel, cohort: &Cohort, indices: &[usize]) -> Result<f64> {
    let mut risks = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        risks.push(model.risk(&cohort.bags[i])?);
        labels.push(cohort.labels[i]);
    }
    c_index(&risks, &labels)
}

/// CSV of (instance index, attention score) rows.
pub fn attention_dump(model: &AbmilModel, bag: &InstanceBag, path: &Path) -> Result<()> {
    let out = model.forward(bag)?;
    let sum: f64 = out.attention.iter().sum();
    debug_assert!((sum - 1.0).abs() < 1e-9);
    let mut csv = String::from("instance_index,attention\n");
    for (i, a) in out.attention.iter().enumerate() {
        csv.push_str(&format!("{i},{a:.17e}\n"));
    }
    fs::write(path, csv).map_err(|e| Error::io(path.display().to_string(), e))
}

const CKPT_MAGIC: &[u8; 4] = b"PKTM";

/// Checkpoint: magic, u32 config-JSON length, config JSON, u32 param count,
/// then per parameter a u16-length name and rows/cols u32 plus f64 LE payload.
pub fn save_checkpoint(path: &Path, config_json: &[u8], params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(value.cols() as u32).to_le_bytes());
        for &v in value.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<u8>, ParamSet)> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |offset: usize, detail: &str| Error::Parse {
        offset: offset as u64,
        detail: detail.to_string(),
    };
    if data.len() < 8 || &data[..4] != CKPT_MAGIC {
        return Err(err(0, "malformed checkpoint header"));
    }
    let mut pos = 4;
    let read_u32 = |data: &[u8], pos: &mut usize| -> Result<u32> {
        if *pos + 4 > data.len() {
            return Err(Error::Parse {
                offset: *pos as u64,
                detail: "truncated checkpoint".into(),
            });
        }
        let v = u32::from_le_bytes(data[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let json_len = read_u32(&data, &mut pos)? as usize;
    if pos + json_len > data.len() {
        return Err(err(pos, "truncated config JSON"));
    }
    let config_json = data[pos..pos + json_len].to_vec();
    pos += json_len;
    let n_params = read_u32(&data, &mut pos)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        if pos + 2 > data.len() {
            return Err(err(pos, "truncated parameter name"));
        }
        let name_len = u16::from_le_bytes(data[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        if pos + name_len > data.len() {
            return Err(err(pos, "truncated parameter name"));
        }
        let name = String::from_utf8(data[pos..pos + name_len].to_vec())
            .map_err(|_| err(pos, "invalid parameter name"))?;
        pos += name_len;
        let rows = read_u32(&data, &mut pos)? as usize;
        let cols = read_u32(&data, &mut pos)? as usize;
        let n = rows * cols * 8;
        if pos + n > data.len() {
            return Err(err(pos, "truncated parameter payload"));
        }
        let values: Vec<f64> = data[pos..pos + n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += n;
        params.push(name, DenseMatrix::from_vec(rows, cols, values)?);
    }
    Ok((config_json, params))
}

pub fn save_abmil(path: &Path, model: &AbmilModel) -> Result<()> {
    let json = serde_json::to_vec(&model.config)?;
    save_checkpoint(path, &json, &model.params)
}

pub fn load_abmil(path: &Path) -> Result<AbmilModel> {
    let (json, params) = load_checkpoint(path)?;
    let config: AbmilConfig = serde_json::from_slice(&json)?;
    Ok(AbmilModel { config, params })
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex_digest(&data))
}

pub fn hex_digest(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Checksum over a parameter set's payload, used for cache staleness checks.
pub fn params_checksum(params: &ParamSet) -> String {
    let mut hasher = Sha256::new();
    for (name, value) in params.iter() {
        hasher.update(name.as_bytes());
        for &v in value.values() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::synth::{synth_cohorts, SynthSpec};
    use tempfile::tempdir;

    fn tiny_bag(m: usize, d: usize, seed: u64) -> InstanceBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        InstanceBag {
            bag_id: "b0".into(),
            patient_id: "p0".into(),
            cancer_code: "SYN00".into(),
            features: DenseMatrix::glorot(m, d, &mut rng),
        }
    }

    fn tiny_config(d: usize, t: usize) -> AbmilConfig {
        AbmilConfig {
            d_in: d,
            d_embed: 6,
            d_attn: 4,
            t_bins: t,
            gated: true,
        }
    }

    #[test]
    fn singleton_bag_attention_is_one() {
        let model = AbmilModel::init(tiny_config(8, 3), 1);
        let out = model.forward(&tiny_bag(1, 8, 2)).unwrap();
        assert_eq!(out.attention, vec![1.0]);
    }

    #[test]
    fn identical_instances_share_attention() {
        let model = AbmilModel::init(tiny_config(8, 3), 1);
        let one = tiny_bag(1, 8, 2);
        let mut values = one.features.values().to_vec();
        values.extend_from_slice(one.features.values());
        let two = InstanceBag {
            features: DenseMatrix::from_vec(2, 8, values).unwrap(),
            ..one
        };
        let out = model.forward(&two).unwrap();
        assert!((out.attention[0] - 0.5).abs() < 1e-12);
        assert!((out.attention[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let model = AbmilModel::init(tiny_config(8, 4), 3);
        let bag = tiny_bag(7, 8, 5);
        let out = model.forward(&bag).unwrap();
        // reverse instance order
        let mut rev_values = Vec::new();
        for r in (0..7).rev() {
            rev_values.extend_from_slice(bag.features.row(r));
        }
        let rev = InstanceBag {
            features: DenseMatrix::from_vec(7, 8, rev_values).unwrap(),
            ..bag.clone()
        };
        let out_rev = model.forward(&rev).unwrap();
        for (a, b) in out.hazards.values().iter().zip(out_rev.hazards.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (i, a) in out.attention.iter().enumerate() {
            assert!((a - out_rev.attention[6 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_matches_forward_z() {
        let model = AbmilModel::init(tiny_config(8, 3), 4);
        let bag = tiny_bag(5, 8, 6);
        assert_eq!(model.encode(&bag).unwrap(), model.forward(&bag).unwrap().z);
        // singleton bag: z = MLP(x_1)
        let single = tiny_bag(1, 8, 7);
        let z = model.encode(&single).unwrap();
        let p = &model.params;
        let h1 = single
            .features
            .matmul(p.value(P_EMBED_W1))
            .zip_row(p.value(P_EMBED_B1))
            .map(|v| if v > 0.0 { v } else { 0.0 });
        let h = h1.matmul(p.value(P_EMBED_W2)).zip_row(p.value(P_EMBED_B2));
        for (a, b) in z.values().iter().zip(h.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_value_forward() {
        let model = AbmilModel::init(tiny_config(8, 4), 9);
        let bag = tiny_bag(6, 8, 10);
        let out = model.forward(&bag).unwrap();
        let mut tape = GradientTape::new();
        let nodes = model.forward_tape(&mut tape, &bag).unwrap();
        for (a, b) in tape.value(nodes.hazards).values().iter().zip(out.hazards.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(nodes.attention).values().iter().zip(&out.attention) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_finite_difference_check() {
        let config = tiny_config(8, 3);
        let model = AbmilModel::init(config, 12);
        let bag = tiny_bag(5, 8, 13);
        let label = crate::survival::SurvivalLabel::new(1, true);

        let eval = |m: &AbmilModel| -> (f64, Vec<DenseMatrix>) {
            let mut tape = GradientTape::new();
            let nodes = m.forward_tape(&mut tape, &bag).unwrap();
            let loss = nll_on_tape(&mut tape, nodes.hazards, &label).unwrap();
            let val = tape.value(loss).scalar();
            let grads = tape.backward(loss).unwrap();
            let g = grads
                .take()
                .into_iter()
                .map(|g| g.unwrap_or_else(|| DenseMatrix::zeros(1, 1)))
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
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn attention_dump_normalized_and_reproducible() {
        let model = AbmilModel::init(tiny_config(8, 3), 20);
        let bag = tiny_bag(9, 8, 21);
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a1.csv");
        let p2 = dir.path().join("a2.csv");
        attention_dump(&model, &bag, &p1).unwrap();
        attention_dump(&model, &bag, &p2).unwrap();
        let c1 = std::fs::read_to_string(&p1).unwrap();
        assert_eq!(c1, std::fs::read_to_string(&p2).unwrap());
        let sum: f64 = c1
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = AbmilModel::init(tiny_config(8, 3), 30);
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_abmil(&path, &model).unwrap();
        let loaded = load_abmil(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn zero_epochs_leaves_initialization() {
        let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 30, 40)).unwrap();
        let cohort = &cohorts[0];
        let cfg = TrainConfig {
            epochs: 0,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut model = AbmilModel::init(tiny_config(32, 10), 41);
        let reference = model.clone();
        let idx: Vec<usize> = (0..cohort.bags.len()).collect();
        fit_abmil(&mut model, cohort, &idx, &cfg).unwrap();
        assert_eq!(model, reference);
    }
}
