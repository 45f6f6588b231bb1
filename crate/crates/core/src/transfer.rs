//! Cross-cohort transfer evaluation: P_{S->T} grids, positive-transfer
//! classification, and nearest-source selection.

use serde::{Deserialize, Serialize};

use crate::abmil::{eval_c_index, AbmilModel};
use crate::cohort::{Cohort, FoldAssignment};
use crate::error::{Error, Result};

/// One cell of the grid: mean test-fold C-Index plus fold spread when the
/// target has folds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TransferCell {
    pub mean: f64,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// Row-major over (source, target).
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn cell(&self, source: &str, target: &str) -> Option<&TransferCell> {
        let si = self.sources.iter().position(|s| s == source)?;
        let ti = self.targets.iter().position(|t| t == target)?;
        self.cells.get(si * self.targets.len() + ti)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in &self.targets {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (si, s) in self.sources.iter().enumerate() {
            out.push_str(s);
            for ti in 0..self.targets.len() {
                let cell = &self.cells[si * self.targets.len() + ti];
                match cell.sigma {
                    Some(sig) => out.push_str(&format!(",{:.4}±{:.4}", cell.mean, sig)),
                    None => out.push_str(&format!(",{:.4}", cell.mean)),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferVerdict {
    pub source: String,
    pub target: String,
    pub performance: f64,
    pub positive: bool,
}

impl TransferVerdict {
    /// Positive transfer requires performance strictly above 0.5.
    pub fn classify(source: &str, target: &str, performance: f64) -> Self {
        TransferVerdict {
            source: source.to_string(),
            target: target.to_string(),
            performance,
            positive: performance > 0.5,
        }
    }
}

/// Score every test-fold bag of the target with a frozen source model and
/// return the mean test-fold C-Index (and fold sigma).
pub fn eval_transfer(
    model: &AbmilModel,
    target: &Cohort,
    folds: Option<&FoldAssignment>,
) -> Result<TransferCell> {
    match folds {
        Some(folds) => {
            let mut per_fold = Vec::new();
            for fold in 0..folds.k {
                let (_, test_idx) = folds.split_bags(target, fold);
                match eval_c_index(model, target, &test_idx) {
                    Ok(c) => per_fold.push(c),
                    Err(Error::UndefinedMetric(msg)) => {
                        eprintln!(
                            "warning: fold {fold} of {} skipped: {msg}",
                            target.cancer_code
                        );
                    }
                    Err(e) => return Err(e),
                }
            }
            if per_fold.is_empty() {
                return Err(Error::UndefinedMetric(format!(
                    "C-Index undefined on every fold of {}",
                    target.cancer_code
                )));
            }
            let mean = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
            Ok(TransferCell {
                mean,
                sigma: Some(crate::cohort::std_dev(&per_fold)),
            })
        }
        None => {
            // rare-pool target: the whole cohort is one held-out test set
            let idx: Vec<usize> = (0..target.bags.len()).collect();
            Ok(TransferCell {
                mean: eval_c_index(model, target, &idx)?,
                sigma: None,
            })
        }
    }
}

/// Full P_{S->T} grid. The diagonal (when a source equals a target) is the
/// target model's own CV performance supplied by the caller.
pub fn transfer_matrix(
    sources: &[(String, AbmilModel)],
    targets: &[(String, Cohort, Option<FoldAssignment>)],
    own_cv: &[(String, TransferCell)],
) -> Result<TransferMatrix> {
    let mut cells = Vec::with_capacity(sources.len() * targets.len());
    for (s_code, model) in sources {
        for (t_code, cohort, folds) in targets {
            if s_code == t_code {
                let own = own_cv
                    .iter()
                    .find(|(c, _)| c == t_code)
                    .map(|(_, cell)| *cell)
                    .ok_or_else(|| {
                        Error::MissingPrerequisite(format!(
                            "own CV result for diagonal cell {s_code}->{t_code}"
                        ))
                    })?;
                cells.push(own);
            } else {
                if model.config.d_in != cohort.dim() {
                    return Err(Error::Dimension {
                        op_index: 0,
                        detail: format!(
                            "cell {s_code}->{t_code}: model d_in {} vs cohort d {}",
                            model.config.d_in,
                            cohort.dim()
                        ),
                    });
                }
                cells.push(eval_transfer(model, cohort, folds.as_ref())?);
            }
        }
    }
    Ok(TransferMatrix {
        sources: sources.iter().map(|(c, _)| c.clone()).collect(),
        targets: targets.iter().map(|(c, _, _)| c.clone()).collect(),
        cells,
    })
}

/// Best source for a target: argmax over sources != target, ties broken by
/// registry order.
pub fn nearest_source(matrix: &TransferMatrix, target: &str) -> Result<String> {
    if !matrix.targets.iter().any(|t| t == target) {
        return Err(Error::Contract(format!(
            "target {target} not present in matrix"
        )));
    }
    let mut best: Option<(f64, &str)> = None;
    for source in &matrix.sources {
        if source == target {
            continue;
        }
        let cell = matrix.cell(source, target).expect("complete grid");
        if best.map(|(b, _)| cell.mean > b).unwrap_or(true) {
            best = Some((cell.mean, source));
        }
    }
    best.map(|(_, s)| s.to_string())
        .ok_or_else(|| Error::Contract("no candidate sources".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_3x3(values: [[f64; 3]; 3]) -> TransferMatrix {
        let codes = ["A", "B", "C"].map(String::from);
        TransferMatrix {
            sources: codes.to_vec(),
            targets: codes.to_vec(),
            cells: values
                .iter()
                .flatten()
                .map(|&v| TransferCell {
                    mean: v,
                    sigma: None,
                })
                .collect(),
        }
    }

    #[test]
    fn positive_transfer_is_strict() {
        assert!(!TransferVerdict::classify("A", "B", 0.5).positive);
        assert!(TransferVerdict::classify("A", "B", 0.5001).positive);
        assert!(!TransferVerdict::classify("A", "B", 0.49).positive);
    }

    #[test]
    fn nearest_source_excludes_self() {
        let m = matrix_3x3([[0.8, 0.61, 0.5], [0.55, 0.9, 0.5], [0.4, 0.55, 0.7]]);
        // column B: A 0.61, C 0.55, self 0.9 excluded
        assert_eq!(nearest_source(&m, "B").unwrap(), "A");
    }

    #[test]
    fn nearest_source_tie_break_registry_order() {
        let m = matrix_3x3([[0.7, 0.6, 0.6], [0.6, 0.7, 0.6], [0.6, 0.6, 0.7]]);
        assert_eq!(nearest_source(&m, "C").unwrap(), "A");
    }

    #[test]
    fn nearest_source_matches_linear_scan_oracle() {
        let m = matrix_3x3([[0.8, 0.52, 0.61], [0.57, 0.9, 0.66], [0.4, 0.58, 0.7]]);
        for target in ["A", "B", "C"] {
            let picked = nearest_source(&m, target).unwrap();
            let mut best = (f64::NEG_INFINITY, String::new());
            for s in &m.sources {
                if s == target {
                    continue;
                }
                let v = m.cell(s, target).unwrap().mean;
                if v > best.0 {
                    best = (v, s.clone());
                }
            }
            assert_eq!(picked, best.1);
        }
    }

    #[test]
    fn missing_target_is_error() {
        let m = matrix_3x3([[0.7; 3]; 3]);
        assert!(nearest_source(&m, "Z").is_err());
    }

    #[test]
    fn csv_layout() {
        let mut m = matrix_3x3([[0.8, 0.6, 0.5], [0.5, 0.9, 0.5], [0.4, 0.5, 0.7]]);
        m.cells[0].sigma = Some(0.02);
        let csv = m.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "source,A,B,C");
        assert!(lines.next().unwrap().starts_with("A,0.8000±0.0200,"));
    }
}
