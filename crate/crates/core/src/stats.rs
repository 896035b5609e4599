//! Parcel-level statistics: ROI scores, per-subject slopes over context
//! size, a group t-test with Benjamini-Hochberg correction, and the maximal
//! context size of each sensitive parcel.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::string_enum;

#[derive(Debug, Clone, PartialEq)]
pub struct Parcel {
    pub id: String,
    /// Sparse `(voxel index, loading)` pairs.
    pub loadings: Vec<(usize, f64)>,
    pub hemisphere: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParcelAtlas {
    pub parcels: Vec<Parcel>,
}

impl ParcelAtlas {
    /// Read `parcel_id,voxel_index,loading[,hemisphere]` triplets. Parcels
    /// keep the order of their first appearance.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .clone();
        let names: Vec<&str> = headers.iter().collect();
        let with_hemi = match names[..] {
            ["parcel_id", "voxel_index", "loading"] => false,
            ["parcel_id", "voxel_index", "loading", "hemisphere"] => true,
            _ => {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: 1,
                    message: format!("unexpected atlas header {names:?}"),
                })
            }
        };
        let mut atlas = ParcelAtlas::default();
        let mut index: HashMap<String, usize> = HashMap::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let parse_err = |message: String| Error::Parse {
                path: path.to_owned(),
                line,
                message,
            };
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let id = rec[0].to_owned();
            let voxel: usize = rec[1].parse().map_err(|e| parse_err(format!("voxel_index: {e}")))?;
            let loading: f64 = rec[2].parse().map_err(|e| parse_err(format!("loading: {e}")))?;
            if !(loading >= 0.0) || !loading.is_finite() {
                return Err(parse_err(format!("loading {loading} is negative or not finite")));
            }
            let hemisphere = with_hemi.then(|| rec[3].to_owned()).filter(|h| !h.is_empty());
            let slot = *index.entry(id.clone()).or_insert_with(|| {
                atlas.parcels.push(Parcel {
                    id,
                    loadings: Vec::new(),
                    hemisphere: hemisphere.clone(),
                });
                atlas.parcels.len() - 1
            });
            atlas.parcels[slot].loadings.push((voxel, loading));
        }
        for p in &atlas.parcels {
            if !p.loadings.iter().any(|&(_, l)| l > 0.0) {
                return Err(Error::Data(format!("parcel {} has no non-zero loading", p.id)));
            }
        }
        Ok(atlas)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let with_hemi = self.parcels.iter().any(|p| p.hemisphere.is_some());
        let mut out = String::from(if with_hemi {
            "parcel_id,voxel_index,loading,hemisphere\n"
        } else {
            "parcel_id,voxel_index,loading\n"
        });
        for p in &self.parcels {
            for &(v, l) in &p.loadings {
                write!(out, "{},{v},{l}", p.id).unwrap();
                if with_hemi {
                    write!(out, ",{}", p.hemisphere.as_deref().unwrap_or("")).unwrap();
                }
                out.push('\n');
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn has_hemispheres(&self) -> bool {
        self.parcels.iter().any(|p| p.hemisphere.is_some())
    }
}

/// Smallest set of highest-loading voxels carrying at least 90% of the
/// parcel's non-zero loading mass. Ties break by ascending voxel index.
pub fn select_roi_voxels(loadings: &[(usize, f64)]) -> Result<Vec<usize>> {
    let mut nonzero: Vec<(usize, f64)> = loadings.iter().copied().filter(|&(_, l)| l > 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Data("parcel has no non-zero loading".into()));
    }
    nonzero.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: f64 = nonzero.iter().map(|&(_, l)| l).sum();
    let target = 0.9 * total * (1.0 - 1e-12);
    let mut cumulative = 0.0;
    let mut chosen = Vec::new();
    for (voxel, l) in nonzero {
        chosen.push(voxel);
        cumulative += l;
        if cumulative >= target {
            break;
        }
    }
    Ok(chosen)
}

/// Median of `r` over `voxels`; even counts average the two central values.
pub fn roi_score(r: &[f64], voxels: &[usize]) -> Result<f64> {
    if voxels.is_empty() {
        return Err(Error::Argument("empty voxel set".into()));
    }
    let mut values = voxels
        .iter()
        .map(|&v| {
            r.get(v)
                .copied()
                .ok_or_else(|| Error::Range(format!("voxel {v} outside map of {}", r.len())))
        })
        .collect::<Result<Vec<f64>>>()?;
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Ok(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

/// Ordinary least-squares slope of y on x.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<f64> {
    let n = points.len() as f64;
    if points.is_empty() {
        return Err(Error::Degenerate("no points to fit".into()));
    }
    // shift y by its first value so constant inputs give an exact zero
    let y0 = points[0].1;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1 - y0).sum::<f64>() / n;
    let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), &(x, y)| {
        (sxy + (x - mx) * (y - y0 - my), sxx + (x - mx) * (x - mx))
    });
    if sxx == 0.0 {
        return Err(Error::Degenerate("all context sizes are equal".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// H1: mean slope > 0.
    #[default]
    One,
    Two,
}
string_enum!(Tail { One => "one", Two => "two" });

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t_stat: f64,
    pub p_value: f64,
    pub df: f64,
    /// Set when the slopes had zero variance and p was assigned by rule.
    pub degenerate: bool,
}

/// One-sample t-test of the slopes against 0.
pub fn group_ttest(slopes: &[f64], tail: Tail) -> Result<TTest> {
    if slopes.len() < 3 {
        return Err(Error::Argument(format!(
            "t-test needs at least 3 subjects, got {}",
            slopes.len()
        )));
    }
    let n = slopes.len() as f64;
    let mean = slopes.iter().sum::<f64>() / n;
    let ss: f64 = slopes.iter().map(|s| (s - mean) * (s - mean)).sum();
    let var = ss / (n - 1.0);
    let df = n - 1.0;
    let scale = slopes.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if var <= (1e-14 * scale).powi(2) {
        log::warn!("slopes have zero variance (mean {mean}); p assigned by sign");
        let (t_stat, p_value) = match (tail, mean) {
            (_, 0.0) => (0.0, 1.0),
            (Tail::One, m) if m < 0.0 => (f64::NEG_INFINITY, 1.0),
            (_, m) => (m.signum() * f64::INFINITY, 0.0),
        };
        return Ok(TTest {
            t_stat,
            p_value,
            df,
            degenerate: true,
        });
    }
    let t_stat = mean / (var / n).sqrt();
    // P(T > |t|) = I_{df/(df+t²)}(df/2, 1/2) / 2
    let upper = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t_stat * t_stat));
    let p_value = match tail {
        Tail::One if t_stat >= 0.0 => upper,
        Tail::One => 1.0 - upper,
        Tail::Two => (2.0 * upper).min(1.0),
    };
    Ok(TTest {
        t_stat,
        p_value,
        df,
        degenerate: false,
    })
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = COEF[1..]
        .iter()
        .enumerate()
        .fold(COEF[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by continued fraction.
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 / guard(1.0 + even * d);
        c = guard(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 / guard(1.0 + odd * d);
        c = guard(1.0 + odd / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Benjamini-Hochberg step-up procedure at level `q`.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<Vec<bool>> {
    if p_values.is_empty() {
        return Err(Error::Argument("no p-values".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Argument(format!("FDR level {q} outside (0, 1)")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Argument(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let k = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 * q / m as f64)
        .unwrap_or(0);
    let mut rejected = vec![false; m];
    for &i in &order[..k] {
        rejected[i] = true;
    }
    Ok(rejected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxContextRule {
    /// Mean of per-subject centered curves; last size below `max - sd`.
    #[default]
    Figure,
    /// Mean of uncentered curves; last size within one sd of the maximum.
    Methods,
}
string_enum!(MaxContextRule { Figure => "figure", Methods => "methods" });

#[derive(Debug, Clone, PartialEq)]
pub struct RoiCurve {
    pub subject_id: String,
    pub parcel_id: String,
    /// `(context_size, roi_score)` for every scheduled size.
    pub points: Vec<(usize, f64)>,
}

/// Subject-averaged curve, optionally centering each subject first.
fn average_curve(curves: &[RoiCurve], center: bool) -> Result<Vec<(usize, f64)>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::Data("no curves for parcel".into()))?;
    let sizes: Vec<usize> = first.points.iter().map(|p| p.0).collect();
    let mut acc = vec![0.0; sizes.len()];
    for c in curves {
        if c.points.len() != sizes.len() || c.points.iter().zip(&sizes).any(|(p, s)| p.0 != *s) {
            return Err(Error::Data(format!(
                "subject {} has a different context schedule for parcel {}",
                c.subject_id, c.parcel_id
            )));
        }
        let mean = if center {
            c.points.iter().map(|p| p.1).sum::<f64>() / sizes.len() as f64
        } else {
            0.0
        };
        for (a, p) in acc.iter_mut().zip(&c.points) {
            *a += p.1 - mean;
        }
    }
    let n = curves.len() as f64;
    Ok(sizes.into_iter().zip(acc).map(|(s, a)| (s, a / n)).collect())
}

fn population_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Last scheduled size at which the averaged curve is still below its
/// saturation level, per `rule`.
pub fn max_context_size(curves: &[RoiCurve], rule: MaxContextRule) -> Result<usize> {
    let s = average_curve(curves, rule == MaxContextRule::Figure)?;
    let values: Vec<f64> = s.iter().map(|p| p.1).collect();
    let sd = population_sd(&values);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = max - sd;
    let hit = match rule {
        MaxContextRule::Figure => s.iter().rev().find(|p| p.1 < threshold),
        MaxContextRule::Methods => s.iter().rev().find(|p| p.1 > threshold),
    };
    Ok(hit.unwrap_or(&s[0]).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextResult {
    pub parcel_id: String,
    pub mean_slope: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub significant: bool,
    pub max_context_size: Option<usize>,
    pub hemisphere: Option<String>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub fdr_q: f64,
    pub tail: Tail,
    pub rule: MaxContextRule,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            fdr_q: 0.01,
            tail: Tail::One,
            rule: MaxContextRule::Figure,
        }
    }
}

/// ROI scores indexed `[subject][size][parcel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiScores {
    pub subjects: Vec<String>,
    pub sizes: Vec<usize>,
    pub parcels: Vec<String>,
    pub scores: Vec<Vec<Vec<f64>>>,
}

impl RoiScores {
    /// Reduce voxel R maps (`[subject][size] -> r per voxel`) with the atlas.
    pub fn from_maps(
        atlas: &ParcelAtlas,
        subjects: Vec<String>,
        sizes: Vec<usize>,
        maps: &[Vec<Vec<f64>>],
    ) -> Result<Self> {
        let selections = atlas
            .parcels
            .iter()
            .map(|p| select_roi_voxels(&p.loadings).map_err(|e| Error::Data(format!("parcel {}: {e}", p.id))))
            .collect::<Result<Vec<_>>>()?;
        let scores = maps
            .iter()
            .map(|per_size| {
                per_size
                    .iter()
                    .map(|r| selections.iter().map(|sel| roi_score(r, sel)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RoiScores {
            subjects,
            sizes,
            parcels: atlas.parcels.iter().map(|p| p.id.clone()).collect(),
            scores,
        })
    }

    pub fn curves(&self, parcel: usize) -> Vec<RoiCurve> {
        self.subjects
            .iter()
            .zip(&self.scores)
            .map(|(subject, per_size)| RoiCurve {
                subject_id: subject.clone(),
                parcel_id: self.parcels[parcel].clone(),
                points: self.sizes.iter().zip(per_size).map(|(&s, row)| (s, row[parcel])).collect(),
            })
            .collect()
    }
}

/// Slopes, group tests, FDR and maximal context sizes for every parcel.
pub fn analyze(roi: &RoiScores, atlas: &ParcelAtlas, options: AnalysisOptions) -> Result<Vec<ContextResult>> {
    let xs: Vec<f64> = roi.sizes.iter().map(|&s| s as f64).collect();
    let mut tests = Vec::with_capacity(roi.parcels.len());
    let mut mean_slopes = Vec::with_capacity(roi.parcels.len());
    for parcel in 0..roi.parcels.len() {
        let slopes = roi
            .curves(parcel)
            .iter()
            .map(|c| fit_slope(&xs.iter().zip(&c.points).map(|(&x, p)| (x, p.1)).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        mean_slopes.push(slopes.iter().sum::<f64>() / slopes.len() as f64);
        tests.push(group_ttest(&slopes, options.tail)?);
    }
    let p: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let flags = bh_fdr(&p, options.fdr_q)?;
    (0..roi.parcels.len())
        .map(|i| {
            let max_context_size = if flags[i] {
                Some(max_context_size(&roi.curves(i), options.rule)?)
            } else {
                None
            };
            Ok(ContextResult {
                parcel_id: roi.parcels[i].clone(),
                mean_slope: mean_slopes[i],
                t_stat: tests[i].t_stat,
                p_value: tests[i].p_value,
                significant: flags[i],
                max_context_size,
                hemisphere: atlas.parcels.get(i).and_then(|p| p.hemisphere.clone()),
                degenerate: tests[i].degenerate,
            })
        })
        .collect()
}

pub fn results_csv(results: &[ContextResult]) -> String {
    let mut out = String::from("parcel_id,mean_slope,t_stat,p_value,significant,max_context_size\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.parcel_id,
            r.mean_slope,
            r.t_stat,
            r.p_value,
            r.significant,
            r.max_context_size.map(|m| m.to_string()).unwrap_or_default()
        )
        .unwrap();
    }
    out
}

/// Parse a results file written by [`results_csv`].
pub fn parse_results(text: &str) -> Result<Vec<ContextResult>> {
    let mut lines = text.lines();
    if lines.next() != Some("parcel_id,mean_slope,t_stat,p_value,significant,max_context_size") {
        return Err(Error::Data("unexpected results header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::Data(format!("results row {}: bad {what}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("field count"));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
            Ok(ContextResult {
                parcel_id: f[0].to_owned(),
                mean_slope: num(f[1], "mean_slope")?,
                t_stat: num(f[2], "t_stat")?,
                p_value: num(f[3], "p_value")?,
                significant: f[4].parse().map_err(|_| bad("significant"))?,
                max_context_size: if f[5].is_empty() {
                    None
                } else {
                    Some(f[5].parse().map_err(|_| bad("max_context_size"))?)
                },
                hemisphere: None,
                degenerate: false,
            })
        })
        .collect()
}

/// `parcel_id,context_size,mean_centered_score,sem` for every parcel.
pub fn curves_csv(roi: &RoiScores) -> String {
    let mut out = String::from("parcel_id,context_size,mean_centered_score,sem\n");
    for parcel in 0..roi.parcels.len() {
        let curves = roi.curves(parcel);
        let centered: Vec<Vec<f64>> = curves
            .iter()
            .map(|c| {
                let mean = c.points.iter().map(|p| p.1).sum::<f64>() / c.points.len() as f64;
                c.points.iter().map(|p| p.1 - mean).collect()
            })
            .collect();
        let n = centered.len() as f64;
        for (k, &size) in roi.sizes.iter().enumerate() {
            let values: Vec<f64> = centered.iter().map(|c| c[k]).collect();
            let mean = values.iter().sum::<f64>() / n;
            let sem = if values.len() > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            writeln!(out, "{},{size},{mean},{sem}", roi.parcels[parcel]).unwrap();
        }
    }
    out
}

/// Counts of maximal context sizes among significant parcels, split by
/// hemisphere label when every significant parcel carries one.
pub fn histogram_csv(results: &[ContextResult]) -> (String, bool) {
    let significant: Vec<&ContextResult> = results.iter().filter(|r| r.max_context_size.is_some()).collect();
    let split = !significant.is_empty() && significant.iter().all(|r| r.hemisphere.is_some());
    let mut bins: Vec<((String, usize), usize)> = Vec::new();
    for r in &significant {
        let key = (
            if split { r.hemisphere.clone().unwrap() } else { "all".to_owned() },
            r.max_context_size.unwrap(),
        );
        match bins.iter_mut().find(|(k, _)| *k == key) {
            Some((_, count)) => *count += 1,
            None => bins.push((key, 1)),
        }
    }
    bins.sort();
    let mut out = String::from("hemisphere,max_context_size,count\n");
    for ((hemi, size), count) in bins {
        writeln!(out, "{hemi},{size},{count}").unwrap();
    }
    (out, split)
}
