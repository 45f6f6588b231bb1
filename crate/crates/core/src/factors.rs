//! Intra-task and inter-task transfer factors, Pearson correlation, and OLS
//! multivariate analysis with adjusted R^2, Gaussian NLL, and p-values.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::survival::{km_curve, rmst};
use crate::transfer::TransferMatrix;

pub const RMST_HORIZON: usize = 10;

/// One ordered (source, target) observation for the regression table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorRow {
    pub source: String,
    pub target: String,
    pub p_s: f64,
    pub p_t: f64,
    pub c_rmst: f64,
    pub c_dist: f64,
    pub p_st: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OlsReport {
    /// Coefficients for each predictor, intercept last.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub nll: f64,
}

/// RMST-based closeness: 1 - |RMST_S(10) - RMST_T(10)| / 10, from the
/// population Kaplan-Meier curves.
pub fn rmst_closeness(cohort_s: &Cohort, cohort_t: &Cohort) -> Result<f64> {
    let a = cohort_rmst(cohort_s, RMST_HORIZON)?;
    let b = cohort_rmst(cohort_t, RMST_HORIZON)?;
    Ok(1.0 - (a - b).abs() / RMST_HORIZON as f64)
}

pub fn cohort_rmst(cohort: &Cohort, horizon: usize) -> Result<f64> {
    if horizon > cohort.t_bins {
        return Err(Error::Contract(format!(
            "RMST horizon {horizon} exceeds cohort bin count {}",
            cohort.t_bins
        )));
    }
    let mut curve = km_curve(&cohort.labels)?;
    // KM is flat beyond the last observed bin
    let last = *curve.last().expect("nonempty curve");
    while curve.len() < horizon {
        curve.push(last);
    }
    rmst(&curve, horizon)
}

/// Pairwise distribution closeness over cohorts.
///
/// Slide feature = mean of its instance features; all slides are projected
/// to 2D along the top two principal axes; per-cohort centroids give L2
/// distances D, and C = 1 - D / max(D).
pub fn dist_closeness(cohorts: &[Cohort]) -> Result<DenseMatrix> {
    if cohorts.len() < 2 {
        return Err(Error::Contract("dist_closeness needs at least 2 cohorts".into()));
    }
    let d = cohorts[0].dim();
    let mut slides: Vec<Vec<f64>> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    for (ci, cohort) in cohorts.iter().enumerate() {
        if cohort.dim() != d {
            return Err(Error::Dimension {
                op_index: 0,
                detail: format!("cohort {} has d={}, expected {}", cohort.cancer_code, cohort.dim(), d),
            });
        }
        for bag in &cohort.bags {
            let m = bag.n_instances() as f64;
            let mut mean = vec![0.0; d];
            for r in 0..bag.n_instances() {
                for (mv, &x) in mean.iter_mut().zip(bag.features.row(r)) {
                    *mv += x / m;
                }
            }
            slides.push(mean);
            owners.push(ci);
        }
    }
    let projected = project_2d(&slides)?;
    let mut centroids = vec![[0.0f64; 2]; cohorts.len()];
    let mut counts = vec![0usize; cohorts.len()];
    for (p, &o) in projected.iter().zip(&owners) {
        centroids[o][0] += p[0];
        centroids[o][1] += p[1];
        counts[o] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c[0] /= n as f64;
        c[1] /= n as f64;
    }
    let n = cohorts.len();
    let mut dist = DenseMatrix::zeros(n, n);
    let mut max_d = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let dx = centroids[i][0] - centroids[j][0];
            let dy = centroids[i][1] - centroids[j][1];
            let v = (dx * dx + dy * dy).sqrt();
            dist.set(i, j, v);
            max_d = max_d.max(v);
        }
    }
    if max_d == 0.0 {
        return Err(Error::Contract("all cohort centroids coincide".into()));
    }
    Ok(dist.map(|v| 1.0 - v / max_d))
}

/// Deterministic top-2 principal-component projection via power iteration
/// with deflation.
fn project_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();
    let total_var: f64 = centered
        .iter()
        .flat_map(|r| r.iter().map(|v| v * v))
        .sum();
    if total_var < 1e-24 {
        return Err(Error::Contract(
            "zero-variance features; 2D projection undefined".into(),
        ));
    }
    // covariance * v computed covariance-free: (1/n) X^T (X v)
    let cov_apply = |v: &[f64], deflate: Option<(&[f64], f64)>| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for row in &centered {
            let dot: f64 = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * dot / n as f64;
            }
        }
        if let Some((u, lambda)) = deflate {
            let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
            for (o, &ui) in out.iter_mut().zip(u) {
                *o -= lambda * ui * dot;
            }
        }
        out
    };
    let power = |deflate: Option<(&[f64], f64)>| -> (Vec<f64>, f64) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64) * 1e-3).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let mut next = cov_apply(&v, deflate);
            let norm = normalize(&mut next);
            let delta: f64 = next
                .iter()
                .zip(&v)
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            lambda = norm;
            if delta < 1e-13 {
                break;
            }
        }
        // deterministic sign: largest-magnitude component positive
        let pivot = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if v[pivot] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        (v, lambda)
    };
    let (v1, l1) = power(None);
    let (v2, _) = power(Some((&v1, l1)));
    Ok(centered
        .iter()
        .map(|row| {
            let a: f64 = row.iter().zip(&v1).map(|(&x, &u)| x * u).sum();
            let b: f64 = row.iter().zip(&v2).map(|(&x, &u)| x * u).sum();
            [a, b]
        })
        .collect())
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(
            "pearson needs two equal-length series of length >= 2".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in pearson input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// OLS with intercept via the normal equations. `x_cols` are the predictor
/// columns (without the intercept column).
pub fn ols_fit(x_cols: &[Vec<f64>], y: &[f64]) -> Result<OlsReport> {
    let n = y.len();
    let p = x_cols.len();
    let cols = p + 1;
    if n <= cols {
        return Err(Error::Contract(format!(
            "OLS needs more rows ({n}) than columns ({cols})"
        )));
    }
    for (i, col) in x_cols.iter().enumerate() {
        if col.len() != n {
            return Err(Error::Contract(format!("predictor column {i} length mismatch")));
        }
    }
    // design matrix with trailing intercept column
    let mut x = DenseMatrix::zeros(n, cols);
    for r in 0..n {
        for c in 0..p {
            x.set(r, c, x_cols[c][r]);
        }
        x.set(r, p, 1.0);
    }
    let xt = x.transpose();
    let xtx = xt.matmul(&x);
    let mut xty = vec![0.0; cols];
    for c in 0..cols {
        for r in 0..n {
            xty[c] += x.get(r, c) * y[r];
        }
    }
    let xtx_inv = invert(&xtx).map_err(|e| match e {
        Error::Singular(col) => Error::Singular(format!(
            "design column {col} is linearly dependent on the others"
        )),
        other => other,
    })?;
    let mut beta = vec![0.0; cols];
    for r in 0..cols {
        for c in 0..cols {
            beta[r] += xtx_inv.get(r, c) * xty[c];
        }
    }
    let mut rss = 0.0;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut tss = 0.0;
    for r in 0..n {
        let mut fit = 0.0;
        for c in 0..cols {
            fit += x.get(r, c) * beta[c];
        }
        rss += (y[r] - fit).powi(2);
        tss += (y[r] - my).powi(2);
    }
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let dof = (n - p - 1) as f64;
    let adj_r_squared = 1.0 - (1.0 - r_squared) * (n as f64 - 1.0) / dof;
    let sigma2_mle = rss / n as f64;
    let nll = 0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2_mle).ln() + 1.0);
    let sigma2_unbiased = rss / dof;
    let t_dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Contract(format!("invalid t distribution: {e}")))?;
    let mut std_errors = Vec::with_capacity(cols);
    let mut t_stats = Vec::with_capacity(cols);
    let mut p_values = Vec::with_capacity(cols);
    for c in 0..cols {
        let se = (sigma2_unbiased * xtx_inv.get(c, c)).sqrt();
        let t = if se > 0.0 { beta[c] / se } else { f64::INFINITY };
        let pv = if t.is_finite() {
            2.0 * (1.0 - t_dist.cdf(t.abs()))
        } else {
            0.0
        };
        std_errors.push(se);
        t_stats.push(t);
        p_values.push(pv.clamp(0.0, 1.0));
    }
    Ok(OlsReport {
        coefficients: beta[..p].to_vec(),
        intercept: beta[p],
        std_errors,
        t_stats,
        p_values,
        r_squared,
        adj_r_squared,
        nll,
    })
}

/// Gauss-Jordan inversion with partial pivoting.
fn invert(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut aug = DenseMatrix::zeros(n, 2 * n);
    for r in 0..n {
        for c in 0..n {
            aug.set(r, c, a.get(r, c));
        }
        aug.set(r, n + r, 1.0);
    }
    let scale: f64 = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max).max(1.0);
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if aug.get(r, col).abs() > aug.get(pivot, col).abs() {
                pivot = r;
            }
        }
        if aug.get(pivot, col).abs() < 1e-10 * scale {
            return Err(Error::Singular(format!("{col}")));
        }
        if pivot != col {
            for c in 0..2 * n {
                let tmp = aug.get(col, c);
                aug.set(col, c, aug.get(pivot, c));
                aug.set(pivot, c, tmp);
            }
        }
        let pv = aug.get(col, col);
        for c in 0..2 * n {
            aug.set(col, c, aug.get(col, c) / pv);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = aug.get(r, col);
            if factor == 0.0 {
                continue;
            }
            for c in 0..2 * n {
                let v = aug.get(r, c) - factor * aug.get(col, c);
                aug.set(r, c, v);
            }
        }
    }
    let mut inv = DenseMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            inv.set(r, c, aug.get(r, n + c));
        }
    }
    Ok(inv)
}

pub const FACTOR_SUBSETS: [(&str, [bool; 4]); 6] = [
    ("P_S", [true, false, false, false]),
    ("P_T", [false, true, false, false]),
    ("P_S+P_T", [true, true, false, false]),
    ("P_S+P_T+C_RMST", [true, true, true, false]),
    ("P_S+P_T+C_Dist", [true, true, false, true]),
    ("all", [true, true, true, true]),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetCorrelation {
    pub target: String,
    pub rmst_vs_gain: f64,
    pub dist_vs_gain: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorAnalysis {
    pub rows: Vec<FactorRow>,
    pub subset_reports: Vec<(String, OlsReport)>,
    pub per_target: Vec<TargetCorrelation>,
}

impl FactorAnalysis {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("source,target,p_s,p_t,c_rmst,c_dist,p_st\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.source, r.target, r.p_s, r.p_t, r.c_rmst, r.c_dist, r.p_st
            ));
        }
        out
    }
}

/// Build the per-pair factor table (diagonal excluded) and run the six
/// OLS factor-subset regressions plus per-target univariate correlations
/// of each inter-task factor against the transfer gain P_ST - P_S.
pub fn factor_analysis(matrix: &TransferMatrix, cohorts: &[Cohort]) -> Result<FactorAnalysis> {
    let codes: Vec<&str> = cohorts.iter().map(|c| c.cancer_code.as_str()).collect();
    for code in &matrix.sources {
        if !codes.contains(&code.as_str()) {
            return Err(Error::MissingPrerequisite(format!(
                "cohort {code} required for factor analysis"
            )));
        }
    }
    let closeness = dist_closeness(cohorts)?;
    let idx_of = |code: &str| codes.iter().position(|c| *c == code).unwrap();

    let mut rows = Vec::new();
    for s in &matrix.sources {
        for t in &matrix.sources {
            if s == t {
                continue;
            }
            let (si, ti) = (idx_of(s), idx_of(t));
            rows.push(FactorRow {
                source: s.clone(),
                target: t.clone(),
                p_s: matrix.cell(s, s).expect("diagonal").mean,
                p_t: matrix.cell(t, t).expect("diagonal").mean,
                c_rmst: rmst_closeness(&cohorts[si], &cohorts[ti])?,
                c_dist: closeness.get(si, ti),
                p_st: matrix.cell(s, t).expect("complete grid").mean,
            });
        }
    }

    let y: Vec<f64> = rows.iter().map(|r| r.p_st).collect();
    let all_cols: [Vec<f64>; 4] = [
        rows.iter().map(|r| r.p_s).collect(),
        rows.iter().map(|r| r.p_t).collect(),
        rows.iter().map(|r| r.c_rmst).collect(),
        rows.iter().map(|r| r.c_dist).collect(),
    ];
    let mut subset_reports = Vec::new();
    for (label, mask) in FACTOR_SUBSETS {
        let cols: Vec<Vec<f64>> = all_cols
            .iter()
            .zip(mask)
            .filter(|(_, keep)| *keep)
            .map(|(c, _)| c.clone())
            .collect();
        subset_reports.push((label.to_string(), ols_fit(&cols, &y)?));
    }

    let mut per_target = Vec::new();
    for t in &matrix.sources {
        let sel: Vec<&FactorRow> = rows.iter().filter(|r| &r.target == t).collect();
        let gain: Vec<f64> = sel.iter().map(|r| r.p_st - r.p_s).collect();
        let rm: Vec<f64> = sel.iter().map(|r| r.c_rmst).collect();
        let ds: Vec<f64> = sel.iter().map(|r| r.c_dist).collect();
        per_target.push(TargetCorrelation {
            target: t.clone(),
            rmst_vs_gain: pearson(&rm, &gain).unwrap_or(f64::NAN),
            dist_vs_gain: pearson(&ds, &gain).unwrap_or(f64::NAN),
        });
    }

    Ok(FactorAnalysis {
        rows,
        subset_reports,
        per_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::synth::{synth_cohorts, SynthSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmst_closeness_identity_and_formula() {
        let (cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 100, 5)).unwrap();
        let c = &cohorts[0];
        assert_eq!(rmst_closeness(c, c).unwrap(), 1.0);
        // direct formula: RMST 8 vs 6 -> 0.8
        assert!((1.0 - (8.0f64 - 6.0).abs() / 10.0 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rmst_closeness_matches_pipeline_oracle() {
        let (cohorts, _) = synth_cohorts(&SynthSpec::desk(2, 150, 6)).unwrap();
        let got = rmst_closeness(&cohorts[0], &cohorts[1]).unwrap();
        let oracle = |c: &Cohort| {
            let mut curve = km_curve(&c.labels).unwrap();
            let last = *curve.last().unwrap();
            while curve.len() < 10 {
                curve.push(last);
            }
            rmst(&curve, 10).unwrap()
        };
        let expect = 1.0 - (oracle(&cohorts[0]) - oracle(&cohorts[1])).abs() / 10.0;
        assert!((got - expect).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&got));
        // symmetry
        let rev = rmst_closeness(&cohorts[1], &cohorts[0]).unwrap();
        assert!((got - rev).abs() < 1e-15);
    }

    #[test]
    fn rmst_horizon_contract() {
        let (mut cohorts, _) = synth_cohorts(&SynthSpec::desk(1, 50, 7)).unwrap();
        cohorts[0].t_bins = 5;
        for l in cohorts[0].labels.iter_mut() {
            l.time_bin = l.time_bin.min(4);
        }
        assert!(cohort_rmst(&cohorts[0], 10).is_err());
    }

    #[test]
    fn dist_closeness_diagonal_and_extremes() {
        let mut spec = SynthSpec::desk(3, 60, 8);
        // shift cancer 2 far away in feature space
        spec.signal_dims[2] = (0..16).collect();
        spec.amplitude = (2.0, 1.0);
        let (cohorts, _) = synth_cohorts(&spec).unwrap();
        let c = dist_closeness(&cohorts).unwrap();
        for i in 0..3 {
            assert_eq!(c.get(i, i), 1.0);
        }
        // symmetry, range, and an exact zero for the max-distance pair
        let mut saw_zero = false;
        for i in 0..3 {
            for j in 0..3 {
                assert!((c.get(i, j) - c.get(j, i)).abs() < 1e-9);
                assert!((-1e-12..=1.0 + 1e-12).contains(&c.get(i, j)));
                if i != j && c.get(i, j).abs() < 1e-12 {
                    saw_zero = true;
                }
            }
        }
        assert!(saw_zero);
    }

    #[test]
    fn dist_closeness_reflects_construction() {
        // cancers 0 and 1 share signal dims; cancer 2 is shifted elsewhere
        let mut spec = SynthSpec::desk(3, 80, 9);
        spec.signal_dims[1] = spec.signal_dims[0].clone();
        spec.signal_dims[2] = (20..28).collect();
        spec.amplitude = (2.5, 0.5);
        let (cohorts, _) = synth_cohorts(&spec).unwrap();
        let c = dist_closeness(&cohorts).unwrap();
        assert!(c.get(0, 1) > c.get(0, 2));
        assert!(c.get(0, 1) > c.get(1, 2));
    }

    #[test]
    fn pearson_fixtures() {
        let x = vec![1.0, 2.0, 4.0, 3.5, 7.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &nx).unwrap() + 1.0).abs() < 1e-12);
        let flat = vec![2.0; 5];
        assert!(matches!(
            pearson(&x, &flat),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn pearson_matches_covariance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..40).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..40).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let got = pearson(&x, &y).unwrap();
        // direct covariance formula
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov = x.iter().zip(&y).map(|(&a, &b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let vx = x.iter().map(|&a| (a - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|&b| (b - my).powi(2)).sum::<f64>() / n;
        assert!((got - cov / (vx * vy).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ols_exact_linear_fit() {
        let x = vec![vec![0.0, 1.0, 2.0, 3.0, 4.0]];
        let y: Vec<f64> = x[0].iter().map(|v| 2.0 * v + 1.0).collect();
        let report = ols_fit(&x, &y).unwrap();
        assert!((report.coefficients[0] - 2.0).abs() < 1e-10);
        assert!((report.intercept - 1.0).abs() < 1e-10);
        assert!((report.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_noise_has_nonpositive_adj_r2() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = vec![(0..30).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()];
        let y: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = ols_fit(&x, &y).unwrap();
        // uncorrelated predictor: adjusted R^2 at or below zero up to noise
        assert!(report.adj_r_squared < 0.1);
    }

    #[test]
    fn ols_matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 30;
        let p = 3;
        let x_cols: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                1.5 * x_cols[0][i] - 0.7 * x_cols[1][i] + 0.2 * x_cols[2][i] + 0.5
                    + rng.gen_range(-0.1..0.1)
            })
            .collect();
        let report = ols_fit(&x_cols, &y).unwrap();

        // independent oracle: explicit (X'X)^-1 X'y via Cramer-style solve
        let cols = p + 1;
        let mut xtx = vec![vec![0.0; cols]; cols];
        let mut xty = vec![0.0; cols];
        let col = |c: usize, r: usize| if c < p { x_cols[c][r] } else { 1.0 };
        for a in 0..cols {
            for b in 0..cols {
                for r in 0..n {
                    xtx[a][b] += col(a, r) * col(b, r);
                }
            }
            for r in 0..n {
                xty[a] += col(a, r) * y[r];
            }
        }
        // gaussian elimination on the oracle side
        for c in 0..cols {
            let piv = (c..cols).max_by(|&i, &j| xtx[i][c].abs().partial_cmp(&xtx[j][c].abs()).unwrap()).unwrap();
            xtx.swap(c, piv);
            xty.swap(c, piv);
            for r in 0..cols {
                if r == c {
                    continue;
                }
                let f = xtx[r][c] / xtx[c][c];
                for k in 0..cols {
                    xtx[r][k] -= f * xtx[c][k];
                }
                xty[r] -= f * xty[c];
            }
        }
        let beta: Vec<f64> = (0..cols).map(|c| xty[c] / xtx[c][c]).collect();
        for c in 0..p {
            assert!((report.coefficients[c] - beta[c]).abs() < 1e-10);
        }
        assert!((report.intercept - beta[p]).abs() < 1e-10);
        // residual orthogonality to design columns
        for c in 0..cols {
            let mut dot = 0.0;
            for r in 0..n {
                let fit: f64 = (0..p).map(|k| x_cols[k][r] * report.coefficients[k]).sum::<f64>()
                    + report.intercept;
                dot += (y[r] - fit) * col(c, r);
            }
            assert!(dot.abs() < 1e-9, "residuals not orthogonal to column {c}");
        }
    }

    #[test]
    fn ols_duplicate_column_is_singular() {
        let c: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let x = vec![c.clone(), c];
        let y: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        assert!(matches!(ols_fit(&x, &y), Err(Error::Singular(_))));
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            seed in 0u64..300,
            a in 0.1..5.0f64,
            b in -3.0..3.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xt: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
            if let (Ok(r1), Ok(r2)) = (pearson(&x, &y), pearson(&xt, &y)) {
                prop_assert!((r1 - r2).abs() < 1e-10);
            }
        }

        #[test]
        fn r2_never_decreases_with_extra_predictor(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 25;
            let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let small = ols_fit(&[x1.clone()], &y).unwrap();
            let big = ols_fit(&[x1, x2], &y).unwrap();
            prop_assert!(big.r_squared >= small.r_squared - 1e-12);
        }
    }
}
