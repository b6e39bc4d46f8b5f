//! Downstream evaluation: k-means clustering with NMI/ARI, and Lasso
//! popularity regression under K-fold cross-validation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_text, RegionRegistry};

pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_FOLDS: usize = 5;
const MAX_LLOYD_ITERS: usize = 300;
const LASSO_TOL: f64 = 1e-7;
const LASSO_MAX_SWEEPS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub objective: f64,
    /// Objective after each assignment step of the winning restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp<R: Rng + ?Sized>(x: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centers.row(c)));
        }
    }
    centers
}

fn assign(x: &Array2<f64>, centers: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    (0..x.nrows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..centers.nrows() {
                let d = sq_dist(x.row(i), centers.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn lloyd(x: &Array2<f64>, mut centers: Array2<f64>) -> KMeansResult {
    let k = centers.nrows();
    let mut history = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    loop {
        let (labels, dists) = assign(x, &centers);
        history.push(dists.iter().sum());
        if prev.as_ref() == Some(&labels) || history.len() >= MAX_LLOYD_ITERS {
            return KMeansResult {
                assignment: labels,
                centroids: centers,
                objective: *history.last().expect("nonempty"),
                history,
            };
        }
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &x.row(i));
            counts[c] += 1;
        }
        let mut far: Vec<(usize, f64)> = dists.iter().copied().enumerate().collect();
        far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut far = far.into_iter();
        for c in 0..k {
            if counts[c] > 0 {
                let row = sums.row(c).mapv(|v| v / counts[c] as f64);
                centers.row_mut(c).assign(&row);
            } else if let Some((i, _)) = far.next() {
                centers.row_mut(c).assign(&x.row(i));
            }
        }
        prev = Some(labels);
    }
}

/// k-means++ seeding and Lloyd iterations; best of `restarts` by objective.
pub fn kmeans<R: Rng + ?Sized>(x: &Array2<f64>, k: usize, restarts: usize, rng: &mut R) -> Result<KMeansResult> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::contract(format!("k-means needs 1 <= k <= N, got k = {k} with N = {n}")));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(x, kmeans_pp(x, k, rng));
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn contingency(a: &[usize], b: &[usize]) -> (BTreeMap<(usize, usize), f64>, BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let mut joint = BTreeMap::new();
    let mut ma = BTreeMap::new();
    let mut mb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *ma.entry(x).or_insert(0.0) += 1.0;
        *mb.entry(y).or_insert(0.0) += 1.0;
    }
    (joint, ma, mb)
}

fn entropy(counts: &BTreeMap<usize, f64>, n: f64) -> f64 {
    counts.values().map(|&c| -(c / n) * (c / n).ln()).sum()
}

/// `I(a; b) / sqrt(H(a) H(b))`, with 0/0 taken as 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let n = a.len() as f64;
    let (joint, ma, mb) = contingency(a, b);
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| (c / n) * ((c * n) / (ma[&x] * mb[&y])).ln())
        .sum();
    let denom = (entropy(&ma, n) * entropy(&mb, n)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(c: f64) -> f64 {
    c * (c - 1.0) / 2.0
}

/// Adjusted Rand index by pair counting. When the chance-corrected range is
/// empty (both labelings trivial) the labelings agree and the score is 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (joint, ma, mb) = contingency(a, b);
    let index: f64 = joint.values().map(|&c| pairs(c)).sum();
    let sa: f64 = ma.values().map(|&c| pairs(c)).sum();
    let sb: f64 = mb.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub sweeps: usize,
    /// Penalized objective after each coordinate sweep (fitting space).
    pub objective_history: Vec<f64>,
}

impl LassoFit {
    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| self.intercept + r.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on `(1/2n)‖y − Xβ − β₀‖² + λ‖β‖₁`.
///
/// With `standardize`, columns are centered and scaled to unit population
/// variance before fitting (the penalty applies on that scale) and the
/// coefficients are mapped back. Constant columns get coefficient 0.
pub fn lasso_fit(x: &Array2<f64>, y: &[f64], lambda: f64, standardize: bool) -> Result<LassoFit> {
    Ok(lasso_path(x, y, &[lambda], standardize)?.pop().expect("one penalty"))
}

/// Fits every penalty in `lambdas`, warm-starting each solve from the
/// previous solution in descending-penalty order. Results follow input order.
pub fn lasso_path(x: &Array2<f64>, y: &[f64], lambdas: &[f64], standardize: bool) -> Result<Vec<LassoFit>> {
    let (n, p) = x.dim();
    if n < 2 || y.len() != n {
        return Err(Error::contract(format!("lasso needs n >= 2 rows matching y, got {n} rows and {} targets", y.len())));
    }
    if lambdas.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::contract("lasso penalty must be nonnegative"));
    }
    let nf = n as f64;
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let mut scale = vec![1.0; p];
    // column-major copy of the centred design
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| x.column(j).iter().map(|v| v - mean[j]).collect()).collect();
    let mut active = vec![true; p];
    for (j, col) in cols.iter_mut().enumerate() {
        let var = col.iter().map(|v| v * v).sum::<f64>() / nf;
        if var <= 1e-24 {
            active[j] = false;
            col.fill(0.0);
        } else if standardize {
            scale[j] = var.sqrt();
            col.iter_mut().for_each(|v| *v /= scale[j]);
        }
    }
    let active: Vec<usize> = (0..p).filter(|&j| active[j]).collect();
    let col_sq: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut beta = vec![0.0; p];

    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let mut fits: Vec<Option<LassoFit>> = vec![None; lambdas.len()];
    for idx in order {
        let lambda = lambdas[idx];
        let mut history = Vec::new();
        let mut sweeps = 0;
        while sweeps < LASSO_MAX_SWEEPS {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for &j in &active {
                let col = &cols[j];
                let rho = col.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / nf + col_sq[j] * beta[j];
                let new = soft_threshold(rho, lambda) / col_sq[j];
                let delta = new - beta[j];
                if delta != 0.0 {
                    resid.iter_mut().zip(col).for_each(|(r, a)| *r -= a * delta);
                    beta[j] = new;
                }
                max_change = max_change.max(delta.abs());
            }
            let rss: f64 = resid.iter().map(|r| r * r).sum();
            history.push(rss / (2.0 * nf) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>());
            if max_change < LASSO_TOL {
                break;
            }
        }
        let coefficients: Vec<f64> = (0..p).map(|j| beta[j] / scale[j]).collect();
        let intercept = y_mean - coefficients.iter().zip(mean.iter()).map(|(b, m)| b * m).sum::<f64>();
        fits[idx] = Some(LassoFit {
            coefficients,
            intercept,
            sweeps,
            objective_history: history,
        });
    }
    Ok(fits.into_iter().map(|f| f.expect("every penalty solved")).collect())
}

/// `count` points spaced evenly in log10 between `lo` and `hi`.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| {
            let t = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
            10f64.powf(a + t * (b - a))
        })
        .collect()
}

pub fn default_lambda_grid() -> Vec<f64> {
    logspace(1e-4, 1e1, 13)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

pub fn regression_metrics(truth: &[f64], pred: &[f64]) -> FoldMetrics {
    let n = truth.len() as f64;
    let mae = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    FoldMetrics {
        mae,
        rmse: (ss_res / n).sqrt(),
        r2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionResult {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub lambda: f64,
    pub folds: Vec<FoldMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopularityOptions {
    pub lambdas: Vec<f64>,
    pub folds: usize,
    /// Fit on `log1p(y)` and score `expm1` predictions on the raw scale.
    pub log1p: bool,
}

impl Default for PopularityOptions {
    fn default() -> Self {
        Self {
            lambdas: default_lambda_grid(),
            folds: DEFAULT_FOLDS,
            log1p: false,
        }
    }
}

/// Seeded shuffle split into `k` folds; fold `f` holds shuffled positions
/// congruent to `f` mod `k`.
pub fn fold_assignment<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

fn select_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Grid-searched Lasso under K-fold CV; folds are shared across the grid and
/// the λ with the lowest mean RMSE is reported.
pub fn evaluate_popularity<R: Rng + ?Sized>(
    e: &Array2<f64>,
    y: &[f64],
    opts: &PopularityOptions,
    rng: &mut R,
) -> Result<RegressionResult> {
    let n = e.nrows();
    if y.len() != n {
        return Err(Error::contract(format!("{} targets for {n} embedding rows", y.len())));
    }
    if opts.folds < 2 || n < opts.folds {
        return Err(Error::contract(format!("{}-fold CV needs at least {} regions, got {n}", opts.folds, opts.folds)));
    }
    if opts.lambdas.is_empty() {
        return Err(Error::contract("empty lambda grid"));
    }
    let fold = fold_assignment(n, opts.folds, rng);
    let target: Vec<f64> = if opts.log1p { y.iter().map(|v| v.ln_1p()).collect() } else { y.to_vec() };
    let mut per_lambda: Vec<Vec<FoldMetrics>> = vec![Vec::with_capacity(opts.folds); opts.lambdas.len()];
    for f in 0..opts.folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        let fits = lasso_path(
            &select_rows(e, &train),
            &train.iter().map(|&i| target[i]).collect::<Vec<_>>(),
            &opts.lambdas,
            true,
        )?;
        let x_test = select_rows(e, &test);
        let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        for (li, fit) in fits.iter().enumerate() {
            let mut pred = fit.predict(&x_test);
            if opts.log1p {
                pred.iter_mut().for_each(|p| *p = p.exp_m1());
            }
            per_lambda[li].push(regression_metrics(&truth, &pred));
        }
    }
    let mut best: Option<RegressionResult> = None;
    for (&lambda, folds) in opts.lambdas.iter().zip(per_lambda) {
        let k = folds.len() as f64;
        let res = RegressionResult {
            mae: folds.iter().map(|m| m.mae).sum::<f64>() / k,
            rmse: folds.iter().map(|m| m.rmse).sum::<f64>() / k,
            r2: folds.iter().map(|m| m.r2).sum::<f64>() / k,
            lambda,
            folds,
        };
        if best.as_ref().is_none_or(|b| res.rmse < b.rmse) {
            best = Some(res);
        }
    }
    Ok(best.expect("nonempty grid"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringResult {
    pub assignment: Vec<usize>,
    pub objective: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn evaluate_clustering<R: Rng + ?Sized>(
    e: &Array2<f64>,
    labels: &[usize],
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<ClusteringResult> {
    if labels.len() != e.nrows() {
        return Err(Error::contract(format!("{} labels for {} embedding rows", labels.len(), e.nrows())));
    }
    let km = kmeans(e, k, restarts, rng)?;
    Ok(ClusteringResult {
        nmi: nmi(&km.assignment, labels)?,
        ari: ari(&km.assignment, labels)?,
        objective: km.objective,
        assignment: km.assignment,
    })
}

/// JSON metrics report. Fields that do not apply to a task are `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub variant: String,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl MetricsReport {
    pub fn clustering(variant: &str, seed: u64, c: &ClusteringResult) -> Self {
        Self {
            task: "cluster".into(),
            variant: variant.into(),
            nmi: Some(c.nmi),
            ari: Some(c.ari),
            seed,
            ..Default::default()
        }
    }

    pub fn popularity(variant: &str, seed: u64, r: &RegressionResult) -> Self {
        Self {
            task: "popularity".into(),
            variant: variant.into(),
            mae: Some(r.mae),
            rmse: Some(r.rmse),
            r2: Some(r.r2),
            lambda: Some(r.lambda),
            seed,
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

pub fn write_clusters(path: impl AsRef<Path>, reg: &RegionRegistry, assignment: &[usize]) -> Result<()> {
    let mut out = String::from("region_id,cluster\n");
    for (i, c) in assignment.iter().enumerate() {
        out.push_str(&format!("{},{c}\n", reg.id(i)));
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_deadzone() {
        assert_eq!(soft_threshold(0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(-0.7, 0.5), -0.19999999999999996);
        assert_eq!(soft_threshold(2.0, 0.5), 1.5);
    }

    #[test]
    fn logspace_grid_endpoints() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 13);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[12] - 10.0).abs() < 1e-12);
        let ratio = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
    }

    #[test]
    fn folds_are_balanced() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let f = fold_assignment(12, 5, &mut rng);
        let mut counts = [0; 5];
        f.iter().for_each(|&i| counts[i] += 1);
        assert_eq!(counts, [3, 3, 2, 2, 2]);
    }
}
