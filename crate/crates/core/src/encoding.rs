//! Voxelwise encoding models: HRF-convolved design matrices, ridge
//! regression, and nested leave-one-run-out cross-validated Pearson R.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, Tensor, BOLD_MAGIC};
use crate::error::{Error, Result};
use crate::masking::string_enum;

const GAMMA_6: f64 = 120.0;
const GAMMA_16: f64 = 1_307_674_368_000.0;

fn double_gamma(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let g6 = (5.0 * t.ln() - t).exp() / GAMMA_6;
    let g16 = (15.0 * t.ln() - t).exp() / GAMMA_16;
    g6 - g16 / 6.0
}

/// Peak location and height of the unnormalised double gamma.
fn hrf_peak() -> (f64, f64) {
    static PEAK: OnceLock<(f64, f64)> = OnceLock::new();
    *PEAK.get_or_init(|| {
        // golden-section search; the curve is unimodal on [1, 10]
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (1.0f64, 10.0f64);
        while b - a > 1e-12 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if double_gamma(c) > double_gamma(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let t = 0.5 * (a + b);
        (t, double_gamma(t))
    })
}

/// Canonical double-gamma HRF (shapes 6 and 16, unit scale, undershoot
/// ratio 1/6), scaled to a peak of 1.
pub fn hrf(t: f64) -> Result<f64> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::Argument(format!("hrf evaluated at negative time {t}")));
    }
    Ok(hrf_causal(t))
}

fn hrf_causal(t: f64) -> f64 {
    double_gamma(t) / hrf_peak().1
}

/// Time stamp assigned to scan `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanReference {
    Start,
    #[default]
    End,
    Middle,
}
string_enum!(ScanReference { Start => "start", End => "end", Middle => "middle" });

impl ScanReference {
    pub fn time(self, scan: usize, tr: f64) -> f64 {
        let k = scan as f64;
        match self {
            ScanReference::Start => k * tr,
            ScanReference::End => (k + 1.0) * tr,
            ScanReference::Middle => (k + 0.5) * tr,
        }
    }
}

/// Superpose one HRF per word, scaled by that word's features.
/// `features` is `[n_words × d]`; the result is `[n_scans × d]`.
pub fn convolve(
    features: &DMatrix<f64>,
    word_offsets: &[f64],
    tr: f64,
    n_scans: usize,
    scan_ref: ScanReference,
) -> Result<DMatrix<f64>> {
    if !(tr > 0.0) {
        return Err(Error::Argument(format!("TR must be positive, got {tr}")));
    }
    if features.nrows() != word_offsets.len() {
        return Err(Error::Data(format!(
            "{} embedding rows for {} annotated words",
            features.nrows(),
            word_offsets.len()
        )));
    }
    let duration = n_scans as f64 * tr;
    if let Some(row) = word_offsets.iter().position(|&o| !(0.0..duration).contains(&o)) {
        return Err(Error::Data(format!(
            "word row {row} has offset {} outside [0, {duration})",
            word_offsets[row]
        )));
    }
    let kernel = DMatrix::from_fn(n_scans, word_offsets.len(), |k, w| {
        hrf_causal(scan_ref.time(k, tr) - word_offsets[w])
    });
    Ok(kernel * features)
}

/// Z-score every column in place (population sd); constant columns become 0.
pub fn zscore_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let ss = col.norm_squared();
        let scale = col.amax().max(mean.abs());
        if ss <= (1e-12 * scale).powi(2) * n || ss == 0.0 {
            col.fill(0.0);
        } else {
            col /= (ss / n).sqrt();
        }
    }
}

/// HRF-convolved, per-run z-scored design matrix.
pub fn build_design(
    features: &DMatrix<f64>,
    word_offsets: &[f64],
    tr: f64,
    n_scans: usize,
    scan_ref: ScanReference,
) -> Result<DMatrix<f64>> {
    let mut x = convolve(features, word_offsets, tr, n_scans, scan_ref)?;
    zscore_columns(&mut x);
    Ok(x)
}

/// Row-major `f32` embeddings as an `f64` matrix.
pub fn embedding_matrix(rows: usize, cols: usize, data: &[f32]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |r, c| f64::from(data[r * cols + c]))
}

/// Principal-component projection fitted on stacked feature rows.
#[derive(Debug, Clone)]
pub struct Pca {
    mean: DVector<f64>,
    /// `[d × k]`, columns ordered by decreasing variance.
    components: DMatrix<f64>,
}

impl Pca {
    pub fn fit(blocks: &[&DMatrix<f64>], k: usize) -> Result<Self> {
        let d = blocks.first().map(|b| b.ncols()).unwrap_or(0);
        if k == 0 || k > d {
            return Err(Error::Config(format!("PCA dimension {k} outside 1..={d}")));
        }
        let n: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut mean = DVector::zeros(d);
        for b in blocks {
            for row in b.row_iter() {
                mean += row.transpose();
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for b in blocks {
            for row in b.row_iter() {
                let c = row.transpose() - &mean;
                cov += &c * c.transpose();
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = DMatrix::zeros(d, k);
        for (j, &src) in order.iter().take(k).enumerate() {
            let mut v = eig.eigenvectors.column(src).into_owned();
            let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v = -v;
            }
            components.set_column(j, &v);
        }
        Ok(Pca { mean, components })
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * &self.components
    }
}

/// Remove a polynomial trend of degree `order` from every column.
pub fn detrend(y: &mut DMatrix<f64>, order: usize) {
    let n = y.nrows();
    if n == 0 {
        return;
    }
    let basis = DMatrix::from_fn(n, order + 1, |k, p| {
        let t = if n > 1 { 2.0 * k as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
        t.powi(p as i32)
    });
    let q = basis.qr().q();
    let fitted = &q * (q.transpose() * &*y);
    *y -= fitted;
}

/// `(XᵀX + λI)⁻¹ XᵀY` through a Cholesky solve.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Argument(format!("ridge penalty must be >= 0, got {lambda}")));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::Argument(format!(
            "design has {} rows, targets {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite design entry".into()));
    }
    let mut a = x.transpose() * x;
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let b = x.transpose() * y;
    let singular = || {
        Error::Numeric(format!(
            "ridge system is singular at lambda={lambda}; use a positive penalty"
        ))
    };
    let chol = a.clone().cholesky().ok_or_else(singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo * lo <= hi * hi * f64::EPSILON * a.nrows() as f64 {
        return Err(singular());
    }
    Ok(chol.solve(&b))
}

/// Sample Pearson correlation; 0 when either side has zero variance.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Argument("need at least two observations".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let raw_a: f64 = a.iter().map(|v| v * v).sum();
    let raw_b: f64 = b.iter().map(|v| v * v).sum();
    Ok(correlation(sab, saa, sbb, raw_a, raw_b))
}

/// Covariance over the geometric mean of variances, with zero-variance
/// detection relative to the raw second moments.
fn correlation(cov: f64, var_a: f64, var_b: f64, raw_a: f64, raw_b: f64) -> f64 {
    const REL: f64 = 1e-20;
    if var_a <= REL * raw_a || var_b <= REL * raw_b || var_a <= 0.0 || var_b <= 0.0 {
        return 0.0;
    }
    (cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0)
}

/// Ten log-spaced penalties from 1e-1 to 1e5.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..10).map(|k| 10f64.powf(-1.0 + 6.0 * k as f64 / 9.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldInfo {
    pub held_out_run: usize,
    pub lambda: f64,
    pub inner_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RScoreMap {
    /// Per-voxel R averaged over outer folds.
    pub r: Vec<f64>,
    /// Per-voxel R of the concatenated held-out predictions.
    pub pooled_r: Vec<f64>,
    pub folds: Vec<FoldInfo>,
}

/// Per-run sufficient statistics, enough to fit on any union of runs and to
/// score any run without materialising predictions.
struct RunStats {
    n: f64,
    gram: DMatrix<f64>,
    colsum: DVector<f64>,
    /// `Xᵀ Y` with raw targets.
    xty: DMatrix<f64>,
    /// `Xᵀ (Y - ȳ)`.
    xty_centered: DMatrix<f64>,
    y_mean: DVector<f64>,
    y_var: DVector<f64>,
    y_raw_ss: DVector<f64>,
}

impl RunStats {
    fn new(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let xt = x.transpose();
        let colsum = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum()));
        let y_mean = DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.sum() / n));
        let mut centered = y.clone();
        for (mut col, m) in centered.column_iter_mut().zip(y_mean.iter()) {
            col.add_scalar_mut(-m);
        }
        RunStats {
            n,
            gram: &xt * x,
            colsum,
            xty: &xt * y,
            xty_centered: &xt * &centered,
            y_var: DVector::from_iterator(y.ncols(), centered.column_iter().map(|c| c.norm_squared())),
            y_raw_ss: DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.norm_squared())),
            y_mean,
        }
    }

    /// Per-voxel Pearson R of `X w_v` against `y_v` on this run.
    fn score(&self, w: &DMatrix<f64>) -> Vec<f64> {
        let gw = &self.gram * w;
        let sw = w.transpose() * &self.colsum;
        (0..w.ncols())
            .map(|v| {
                let wv = w.column(v);
                let cov = wv.dot(&self.xty_centered.column(v));
                let pp = wv.dot(&gw.column(v));
                let var_p = pp - sw[v] * sw[v] / self.n;
                correlation(cov, var_p, self.y_var[v], pp, self.y_raw_ss[v])
            })
            .collect()
    }
}

/// Ridge solutions for a whole penalty grid from one eigendecomposition.
struct RidgePath {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    /// `Qᵀ Xᵀ Y`.
    projected: DMatrix<f64>,
}

impl RidgePath {
    fn new(stats: &[&RunStats]) -> Self {
        let mut gram = stats[0].gram.clone();
        let mut xty = stats[0].xty.clone();
        for s in &stats[1..] {
            gram += &s.gram;
            xty += &s.xty;
        }
        let eig = SymmetricEigen::new(gram);
        RidgePath {
            projected: eig.eigenvectors.transpose() * xty,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        }
    }

    fn weights(&self, lambda: f64) -> Result<DMatrix<f64>> {
        let max = self.eigenvalues.amax();
        let mut scaled = self.projected.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            let denom = self.eigenvalues[i].max(0.0) + lambda;
            if denom <= max * f64::EPSILON * self.eigenvalues.len() as f64 || denom <= 0.0 {
                return Err(Error::Numeric(format!(
                    "ridge system is singular at lambda={lambda}; use a positive penalty"
                )));
            }
            row /= denom;
        }
        Ok(&self.eigenvectors * scaled)
    }
}

fn pooled(parts: &[(DMatrix<f64>, &RunStats)], n_voxels: usize) -> Vec<f64> {
    (0..n_voxels)
        .map(|v| {
            let (mut n, mut sp, mut spp, mut sy, mut syy, mut spy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (w, s) in parts {
                let wv = w.column(v);
                let swv = wv.dot(&s.colsum);
                n += s.n;
                sp += swv;
                spp += wv.dot(&(&s.gram * wv));
                sy += s.n * s.y_mean[v];
                syy += s.y_raw_ss[v];
                spy += wv.dot(&s.xty.column(v));
            }
            correlation(spy - sp * sy / n, spp - sp * sp / n, syy - sy * sy / n, spp, syy)
        })
        .collect()
}

/// Nested leave-one-run-out cross-validation. For each held-out run, the
/// penalty is chosen by an inner leave-one-run-out loop over the remaining
/// runs (mean R over voxels), refitted on all remaining runs and scored on
/// the held-out run.
pub fn cross_validated_r(
    runs: &[(DMatrix<f64>, DMatrix<f64>)],
    lambda_grid: &[f64],
) -> Result<RScoreMap> {
    if runs.len() < 3 {
        return Err(Error::Config(format!(
            "cross-validation needs at least 3 runs, got {}",
            runs.len()
        )));
    }
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Config("lambda grid must be non-empty and non-negative".into()));
    }
    let (d, v) = (runs[0].0.ncols(), runs[0].1.ncols());
    for (i, (x, y)) in runs.iter().enumerate() {
        if x.ncols() != d || y.ncols() != v || x.nrows() != y.nrows() {
            return Err(Error::Data(format!(
                "run {i}: design {}x{} / bold {}x{} inconsistent with {d} features, {v} voxels",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
    }
    let stats: Vec<RunStats> = runs.iter().map(|(x, y)| RunStats::new(x, y)).collect();

    let mut r_sum = vec![0.0; v];
    let mut folds = Vec::with_capacity(runs.len());
    let mut held_out_fits = Vec::with_capacity(runs.len());
    for outer in 0..runs.len() {
        let train: Vec<usize> = (0..runs.len()).filter(|&i| i != outer).collect();
        let mut scores = vec![0.0; lambda_grid.len()];
        for &inner in &train {
            let fit_on: Vec<&RunStats> = train.iter().filter(|&&i| i != inner).map(|&i| &stats[i]).collect();
            let path = RidgePath::new(&fit_on);
            for (score, &lambda) in scores.iter_mut().zip(lambda_grid) {
                let r = stats[inner].score(&path.weights(lambda)?);
                *score += r.iter().sum::<f64>() / v as f64;
            }
        }
        let best = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .expect("non-empty grid");
        let fit_on: Vec<&RunStats> = train.iter().map(|&i| &stats[i]).collect();
        let w = RidgePath::new(&fit_on).weights(lambda_grid[best])?;
        for (acc, r) in r_sum.iter_mut().zip(stats[outer].score(&w)) {
            *acc += r;
        }
        folds.push(FoldInfo {
            held_out_run: outer,
            lambda: lambda_grid[best],
            inner_score: scores[best] / train.len() as f64,
        });
        held_out_fits.push((w, &stats[outer]));
    }
    Ok(RScoreMap {
        r: r_sum.into_iter().map(|s| s / runs.len() as f64).collect(),
        pooled_r: pooled(&held_out_fits, v),
        folds,
    })
}

/// One BOLD run: `[n_scans × n_voxels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldRun {
    pub data: DMatrix<f64>,
    pub tr_seconds: f64,
    pub run_id: u64,
    pub subject_id: String,
}

impl BoldRun {
    pub fn validate(&self) -> Result<()> {
        if self.data.nrows() < 10 {
            return Err(Error::Data(format!(
                "run {} has {} scans, need at least 10",
                self.run_id,
                self.data.nrows()
            )));
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::Data(format!("run {} contains NaN", self.run_id)));
        }
        if !(self.tr_seconds > 0.0) {
            return Err(Error::Data(format!("run {} has non-positive TR", self.run_id)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, v) = self.data.shape();
        let data = (0..n)
            .flat_map(|r| (0..v).map(move |c| (r, c)))
            .map(|(r, c)| self.data[(r, c)] as f32)
            .collect();
        let mut c = Container::new(BOLD_MAGIC);
        c.insert_field("tr_seconds", json!(self.tr_seconds));
        c.insert_field("run_id", json!(self.run_id));
        c.insert_field("subject_id", json!(self.subject_id));
        c.insert_tensor("bold", Tensor::new(vec![n, v], data)?);
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::read(path, BOLD_MAGIC)?;
        let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
        let tr_seconds = c.field("tr_seconds")?.as_f64().ok_or_else(|| bad("tr_seconds"))?;
        let run_id = c.field("run_id")?.as_u64().ok_or_else(|| bad("run_id"))?;
        let subject_id = match c.field("subject_id")? {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let t = c.take_tensor("bold")?;
        let [n, v] = t.shape[..] else {
            return Err(bad("bold tensor must be 2-D"));
        };
        let run = BoldRun {
            data: embedding_matrix(n, v, &t.data),
            tr_seconds,
            run_id,
            subject_id,
        };
        run.validate()?;
        Ok(run)
    }
}
