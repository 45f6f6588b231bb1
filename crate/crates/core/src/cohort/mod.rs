//! Bag/label data model, patient-level stratified splitting, inclusion
//! criteria, and the synthetic multi-cancer generator.

pub mod io;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::survival::SurvivalLabel;

pub use synth::{synth_cohorts, GroundTruth, SynthSpec};

/// One preprocessed slide: M instance feature vectors of dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBag {
    pub bag_id: String,
    pub patient_id: String,
    pub cancer_code: String,
    pub features: DenseMatrix,
}

impl InstanceBag {
    pub fn n_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub cancer_code: String,
    pub bags: Vec<InstanceBag>,
    pub labels: Vec<SurvivalLabel>,
    /// Discrete time-bin count T.
    pub t_bins: usize,
}

impl Cohort {
    pub fn validate(&self) -> Result<()> {
        if self.bags.len() != self.labels.len() {
            return Err(Error::Contract("bags and labels must align".into()));
        }
        let d = self.dim();
        for (bag, label) in self.bags.iter().zip(&self.labels) {
            if bag.cancer_code != self.cancer_code {
                return Err(Error::Contract(format!(
                    "bag {} has cancer code {} in cohort {}",
                    bag.bag_id, bag.cancer_code, self.cancer_code
                )));
            }
            if bag.dim() != d {
                return Err(Error::Dimension {
                    op_index: 0,
                    detail: format!("bag {} has d={}, cohort d={}", bag.bag_id, bag.dim(), d),
                });
            }
            if label.time_bin >= self.t_bins {
                return Err(Error::Contract(format!(
                    "label time_bin {} beyond T={}",
                    label.time_bin, self.t_bins
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bags.first().map(|b| b.dim()).unwrap_or(0)
    }

    pub fn patient_ids(&self) -> BTreeSet<&str> {
        self.bags.iter().map(|b| b.patient_id.as_str()).collect()
    }

    pub fn event_ratio(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|l| l.event).count() as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InclusionVerdict {
    Included,
    Rare,
}

/// Included iff distinct patients > 200 and event ratio > 0.05, both strict.
pub fn check_inclusion(cohort: &Cohort) -> Result<InclusionVerdict> {
    if cohort.bags.is_empty() {
        return Err(Error::Contract("inclusion check on empty cohort".into()));
    }
    let patients = cohort.patient_ids().len();
    if patients > 200 && cohort.event_ratio() > 0.05 {
        Ok(InclusionVerdict::Included)
    } else {
        Ok(InclusionVerdict::Rare)
    }
}

/// Patient-level fold assignment: every bag of a patient shares a fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub by_patient: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of_bag(&self, bag: &InstanceBag) -> usize {
        self.by_patient[&bag.patient_id]
    }

    /// Indices of bags whose patient is in fold `fold` / not in fold `fold`.
    pub fn split_bags(&self, cohort: &Cohort, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut test = Vec::new();
        let mut train = Vec::new();
        for (i, bag) in cohort.bags.iter().enumerate() {
            if self.fold_of_bag(bag) == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// Patient-level K-fold split stratified by (time_bin, event).
///
/// Within each stratum, patient counts per fold differ by at most one.
/// Strata smaller than k are distributed round-robin.
pub fn stratified_kfold(cohort: &Cohort, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Contract("k must be at least 2".into()));
    }
    // One label per patient: take the first bag's label.
    let mut patient_label: BTreeMap<&str, SurvivalLabel> = BTreeMap::new();
    for (bag, label) in cohort.bags.iter().zip(&cohort.labels) {
        patient_label
            .entry(bag.patient_id.as_str())
            .or_insert(*label);
    }
    if patient_label.len() < k {
        return Err(Error::Contract(format!(
            "need at least {k} patients, got {}",
            patient_label.len()
        )));
    }
    let mut strata: BTreeMap<(usize, bool), Vec<&str>> = BTreeMap::new();
    for (pid, label) in &patient_label {
        strata
            .entry((label.time_bin, label.event))
            .or_default()
            .push(pid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_patient = BTreeMap::new();
    let mut next_fold = 0usize;
    for patients in strata.values_mut() {
        patients.shuffle(&mut rng);
        for pid in patients.iter() {
            by_patient.insert((*pid).to_string(), next_fold);
            next_fold = (next_fold + 1) % k;
        }
    }
    Ok(FoldAssignment { k, by_patient })
}

/// Try `max_seeds` candidate splits and keep the one whose per-fold CV
/// C-Index standard deviation is smallest.
pub fn resplit_until_stable<F>(
    cohort: &Cohort,
    k: usize,
    mut trainer: F,
    max_seeds: u64,
) -> Result<(FoldAssignment, u64)>
where
    F: FnMut(&Cohort, &FoldAssignment) -> Result<Vec<f64>>,
{
    if max_seeds == 0 {
        return Err(Error::Contract("max_seeds must be positive".into()));
    }
    let mut best: Option<(f64, FoldAssignment, u64)> = None;
    for seed in 0..max_seeds {
        let folds = stratified_kfold(cohort, k, seed)?;
        let per_fold = trainer(cohort, &folds)?;
        let sigma = std_dev(&per_fold);
        if best.as_ref().map(|(s, _, _)| sigma < *s).unwrap_or(true) {
            best = Some((sigma, folds, seed));
        }
    }
    let (_, folds, seed) = best.expect("max_seeds > 0");
    Ok((folds, seed))
}

pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Leakage check: no bag of a test-fold patient may appear among training bags.
pub fn assert_no_leakage(
    cohort: &Cohort,
    folds: &FoldAssignment,
    fold: usize,
    train_indices: &[usize],
) -> Result<()> {
    let test_patients: BTreeSet<&str> = cohort
        .bags
        .iter()
        .filter(|b| folds.fold_of_bag(b) == fold)
        .map(|b| b.patient_id.as_str())
        .collect();
    for &i in train_indices {
        if test_patients.contains(cohort.bags[i].patient_id.as_str()) {
            return Err(Error::Integrity(format!(
                "bag {} of test-fold patient {} appears in training inputs",
                cohort.bags[i].bag_id, cohort.bags[i].patient_id
            )));
        }
    }
    Ok(())
}

/// Per-fold stratum counts, used by the balance tests.
pub fn stratum_fold_counts(
    cohort: &Cohort,
    folds: &FoldAssignment,
) -> HashMap<(usize, bool), Vec<usize>> {
    let mut patient_label: BTreeMap<&str, SurvivalLabel> = BTreeMap::new();
    for (bag, label) in cohort.bags.iter().zip(&cohort.labels) {
        patient_label
            .entry(bag.patient_id.as_str())
            .or_insert(*label);
    }
    let mut counts: HashMap<(usize, bool), Vec<usize>> = HashMap::new();
    for (pid, label) in &patient_label {
        let fold = folds.by_patient[*pid];
        counts
            .entry((label.time_bin, label.event))
            .or_insert_with(|| vec![0; folds.k])[fold] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(pid: &str, idx: usize, d: usize) -> InstanceBag {
        InstanceBag {
            bag_id: format!("{pid}-b{idx}"),
            patient_id: pid.to_string(),
            cancer_code: "SYNTH0".into(),
            features: DenseMatrix::zeros(3, d),
        }
    }

    fn cohort_with(n_patients: usize, event_every: usize) -> Cohort {
        let bags: Vec<InstanceBag> = (0..n_patients).map(|i| bag(&format!("p{i:04}"), 0, 4)).collect();
        let labels: Vec<SurvivalLabel> = (0..n_patients)
            .map(|i| SurvivalLabel::new(i % 5, i % event_every == 0))
            .collect();
        Cohort {
            cancer_code: "SYNTH0".into(),
            bags,
            labels,
            t_bins: 10,
        }
    }

    #[test]
    fn inclusion_criteria() {
        // 201 patients, ~20% events -> included
        assert_eq!(
            check_inclusion(&cohort_with(201, 5)).unwrap(),
            InclusionVerdict::Included
        );
        // 150 patients, 50% events -> rare (patient count fails)
        assert_eq!(
            check_inclusion(&cohort_with(150, 2)).unwrap(),
            InclusionVerdict::Rare
        );
        // 500 patients, exactly 5.0% events -> rare (strict inequality)
        assert_eq!(
            check_inclusion(&cohort_with(500, 20)).unwrap(),
            InclusionVerdict::Rare
        );
    }

    #[test]
    fn patient_bags_share_a_fold() {
        let mut c = cohort_with(30, 3);
        // give one patient a second bag
        c.bags.push(bag("p0003", 1, 4));
        c.labels.push(c.labels[3]);
        let folds = stratified_kfold(&c, 5, 1).unwrap();
        let f: Vec<usize> = c
            .bags
            .iter()
            .filter(|b| b.patient_id == "p0003")
            .map(|b| folds.fold_of_bag(b))
            .collect();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0], f[1]);
    }

    #[test]
    fn uniform_strata_balance() {
        // 100 patients over uniform strata -> 20 per fold
        let c = cohort_with(100, 2);
        let folds = stratified_kfold(&c, 5, 7).unwrap();
        let mut per_fold = vec![0usize; 5];
        for f in folds.by_patient.values() {
            per_fold[*f] += 1;
        }
        assert_eq!(per_fold, vec![20; 5]);
    }

    #[test]
    fn stratum_imbalance_at_most_one() {
        let c = cohort_with(173, 3);
        for seed in 0..5 {
            let folds = stratified_kfold(&c, 5, seed).unwrap();
            for counts in stratum_fold_counts(&c, &folds).values() {
                let max = counts.iter().max().unwrap();
                let min = counts.iter().min().unwrap();
                assert!(max - min <= 1, "stratum imbalance {counts:?}");
            }
        }
    }

    #[test]
    fn folds_partition_patients() {
        let c = cohort_with(87, 4);
        let folds = stratified_kfold(&c, 5, 11).unwrap();
        assert_eq!(folds.by_patient.len(), 87);
        for pid in c.patient_ids() {
            assert!(folds.by_patient.contains_key(pid));
        }
    }

    #[test]
    fn split_is_deterministic_given_seed() {
        let c = cohort_with(60, 3);
        let a = stratified_kfold(&c, 5, 13).unwrap();
        let b = stratified_kfold(&c, 5, 13).unwrap();
        assert_eq!(a.by_patient, b.by_patient);
    }

    #[test]
    fn resplit_degenerate_and_argmin() {
        let c = cohort_with(40, 3);
        // max_seeds = 1 returns that split
        let (_, seed) = resplit_until_stable(&c, 4, |_, _| Ok(vec![0.6, 0.7]), 1).unwrap();
        assert_eq!(seed, 0);
        // fold sigma 0.08 for seed 0 vs 0.02 for seed 1 -> seed 1 selected
        let (_, seed) = resplit_until_stable(
            &c,
            4,
            |_, f| {
                let s = stratified_kfold(&c, 4, 0).unwrap();
                if f.by_patient == s.by_patient {
                    Ok(vec![0.6, 0.76])
                } else {
                    Ok(vec![0.66, 0.70])
                }
            },
            2,
        )
        .unwrap();
        assert_eq!(seed, 1);
        assert!(resplit_until_stable(&c, 4, |_, _| Ok(vec![]), 0).is_err());
    }

    #[test]
    fn resplit_matches_exhaustive_oracle() {
        let c = cohort_with(50, 3);
        let score = |folds: &FoldAssignment| -> Vec<f64> {
            // deterministic pseudo-scores derived from the assignment
            (0..folds.k)
                .map(|f| {
                    folds
                        .by_patient
                        .values()
                        .filter(|&&v| v == f)
                        .count() as f64
                        * 0.01
                        + (f as f64 * 0.1).sin().abs()
                })
                .collect()
        };
        let (picked, seed) = resplit_until_stable(&c, 5, |_, f| Ok(score(f)), 6).unwrap();
        // oracle: re-evaluate all candidates
        let mut best = (f64::INFINITY, 0u64);
        for s in 0..6 {
            let f = stratified_kfold(&c, 5, s).unwrap();
            let sigma = std_dev(&score(&f));
            if sigma < best.0 {
                best = (sigma, s);
            }
        }
        assert_eq!(seed, best.1);
        assert_eq!(picked.by_patient, stratified_kfold(&c, 5, best.1).unwrap().by_patient);
    }
}
