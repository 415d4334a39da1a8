//! Accuracy metrics, magnitude-binned error curves and report rendering.
//!
//! Force magnitude error is `| |f_pred| - |f_true| |` per frame (torque alike).
//! R² is pooled over every evaluated frame, contact and rest alike.

use crate::datagen::DataFile;
use crate::mechanics::Wrench;
use crate::model::{ModelError, TrainedModel};
use crate::pipeline::{ProcessedDataset, NUM_LABELS};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction/truth length mismatch: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid bin edges: {0}")]
    InvalidBins(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("report csv line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Row labels in report order.
pub const ROW_NAMES: [&str; 8] = ["Fx", "Fy", "Fz", "Fmag", "Tx", "Ty", "Tz", "Tmag"];
const ROW_TITLES: [&str; 8] = [
    "Force x (N)",
    "Force y (N)",
    "Force z (N)",
    "Force magnitude (N)",
    "Torque x (N·mm)",
    "Torque y (N·mm)",
    "Torque z (N·mm)",
    "Torque magnitude (N·mm)",
];
/// Axis tags used for per-axis trace files.
pub const AXIS_TAGS: [&str; NUM_LABELS] = ["fx", "fy", "fz", "tx", "ty", "tz"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub mae: f64,
    /// Population standard deviation of the absolute error.
    pub std: f64,
    /// Undefined when the truth has no variance.
    pub r2: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` flags an empty bin.
    pub mae: Option<f64>,
    pub rel_err_pct: Option<f64>,
}

impl CurveBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub force_bin_width: f64,
    pub force_max: f64,
    pub torque_bin_width: f64,
    pub torque_max: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            force_bin_width: 0.25,
            force_max: 2.5,
            torque_bin_width: 12.5,
            torque_max: 250.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        uniform_edges(self.force_bin_width, self.force_max)?;
        uniform_edges(self.torque_bin_width, self.torque_max)?;
        Ok(())
    }

    pub fn force_edges(&self) -> Vec<f64> {
        uniform_edges(self.force_bin_width, self.force_max).unwrap_or_default()
    }

    pub fn torque_edges(&self) -> Vec<f64> {
        uniform_edges(self.torque_bin_width, self.torque_max).unwrap_or_default()
    }
}

/// `0, w, 2w, …, max`.
pub fn uniform_edges(width: f64, max: f64) -> Result<Vec<f64>, EvalError> {
    if !(width > 0.0 && max > 0.0 && width.is_finite() && max.is_finite()) {
        return Err(EvalError::InvalidBins(format!("width {width}, max {max}")));
    }
    let n = (max / width).round() as usize;
    if n == 0 || ((n as f64) * width - max).abs() > 1e-9 * max {
        return Err(EvalError::InvalidBins(format!(
            "max {max} is not a multiple of width {width}"
        )));
    }
    Ok((0..=n).map(|i| i as f64 * width).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub force_curve: Vec<CurveBin>,
    pub torque_curve: Vec<CurveBin>,
}

impl MetricsReport {
    pub fn row(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Truth spread (N or N·mm) below which R² is reported as undefined. Axes
/// that are zero by construction still pick up rounding noise.
pub const DEGENERATE_STD: f64 = 1e-9;

fn metric_row(name: &str, pred: &[f64], truth: &[f64]) -> MetricRow {
    let n = pred.len() as f64;
    let abs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let std = (abs.iter().map(|a| (a - mae) * (a - mae)).sum::<f64>() / n).sqrt();
    let mean_t = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    let ss_res: f64 = abs.iter().map(|a| a * a).sum();
    let r2 = ((ss_tot / n).sqrt() > DEGENERATE_STD).then(|| 1.0 - ss_res / ss_tot);
    MetricRow {
        name: name.to_string(),
        mae,
        std,
        r2,
        count: pred.len(),
    }
}

fn force_norm(w: &Wrench) -> f64 {
    w.force.norm()
}

fn torque_norm(w: &Wrench) -> f64 {
    w.torque.norm()
}

fn check_lengths(pred: &[Wrench], truth: &[Wrench]) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.len() < 2 {
        return Err(EvalError::TooFewSamples(pred.len()));
    }
    Ok(())
}

/// Per-axis and magnitude metrics plus the default binned curves.
pub fn compute_metrics(
    pred: &[Wrench],
    truth: &[Wrench],
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    check_lengths(pred, truth)?;
    cfg.validate()?;
    let column = |ws: &[Wrench], k: usize| -> Vec<f64> { ws.iter().map(|w| w.as_array()[k]).collect() };
    let pf: Vec<f64> = pred.iter().map(force_norm).collect();
    let tf: Vec<f64> = truth.iter().map(force_norm).collect();
    let pt: Vec<f64> = pred.iter().map(torque_norm).collect();
    let tt: Vec<f64> = truth.iter().map(torque_norm).collect();
    let mut rows = Vec::with_capacity(8);
    for k in 0..3 {
        rows.push(metric_row(ROW_NAMES[k], &column(pred, k), &column(truth, k)));
    }
    rows.push(metric_row("Fmag", &pf, &tf));
    for k in 3..6 {
        rows.push(metric_row(ROW_NAMES[k + 1], &column(pred, k), &column(truth, k)));
    }
    rows.push(metric_row("Tmag", &pt, &tt));
    Ok(MetricsReport {
        rows,
        force_curve: binned_error_curve(&pf, &tf, &cfg.force_edges())?,
        torque_curve: binned_error_curve(&pt, &tt, &cfg.torque_edges())?,
    })
}

/// Bins frames by true magnitude; reports per-bin MAE of the magnitude error
/// and its ratio to the bin center. Bins are `[lo, hi)` except the last,
/// which is closed; frames outside the edges are not counted.
pub fn binned_error_curve(
    pred_mag: &[f64],
    truth_mag: &[f64],
    edges: &[f64],
) -> Result<Vec<CurveBin>, EvalError> {
    if pred_mag.len() != truth_mag.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred_mag.len(),
            truth: truth_mag.len(),
        });
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(EvalError::InvalidBins("edges must be strictly increasing".into()));
    }
    let nb = edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for (p, t) in pred_mag.iter().zip(truth_mag) {
        if *t < edges[0] || *t > edges[nb] {
            continue;
        }
        let b = edges.partition_point(|e| e <= t).saturating_sub(1).min(nb - 1);
        sums[b] += (p - t).abs();
        counts[b] += 1;
    }
    Ok((0..nb)
        .map(|b| {
            let (lo, hi) = (edges[b], edges[b + 1]);
            let mae = (counts[b] > 0).then(|| sums[b] / counts[b] as f64);
            let center = 0.5 * (lo + hi);
            CurveBin {
                lo,
                hi,
                count: counts[b],
                mae,
                rel_err_pct: mae.map(|m| 100.0 * m / center),
            }
        })
        .collect())
}

/// Three significant figures, leading zero dropped (`0.0560` → `.0560`).
pub fn format_sig3(v: f64) -> String {
    if !v.is_finite() {
        return "n/a".into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (2 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // Rounding can carry into a new digit (0.09996 → 0.100); redo with the new magnitude.
    let rounded: f64 = s.parse().unwrap_or(v);
    let s = if rounded != 0.0 && rounded.abs().log10().floor() as i32 != mag {
        let decimals = (2 - (mag + 1)).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        s
    };
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

/// Human-readable table in report row order.
pub fn render_report(m: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str("# magnitude error = | |pred| - |true| | per frame; R² pooled over all frames\n");
    let _ = writeln!(
        out,
        "{:<26}{:>16}{:>12}{:>10}",
        "", "Mean Abs. Error", "Std. Dev.", "R²"
    );
    for (row, title) in m.rows.iter().zip(ROW_TITLES) {
        let r2 = row.r2.map(format_sig3).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "{:<26}{:>16}{:>12}{:>10}",
            title,
            format_sig3(row.mae),
            format_sig3(row.std),
            r2
        );
    }
    out
}

const REPORT_HEADER: &str = "axis,mae,std,r2,count";

/// Machine-readable report; full precision, empty `r2` when undefined.
pub fn report_csv(m: &MetricsReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in &m.rows {
        let r2 = r.r2.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.name, r.mae, r.std, r2, r.count);
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<MetricRow>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == REPORT_HEADER => {}
        _ => {
            return Err(EvalError::Parse {
                line: 1,
                msg: format!("expected header `{REPORT_HEADER}`"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| EvalError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        rows.push(MetricRow {
            name: f[0].to_string(),
            mae: num(f[1])?,
            std: num(f[2])?,
            r2: if f[3].is_empty() { None } else { Some(num(f[3])?) },
            count: f[4].parse().map_err(|e| bad(format!("{:?}: {e}", f[4])))?,
        });
    }
    Ok(rows)
}

/// Curve CSV: `bin_center_<unit>,mae_<unit>,rel_err_pct,count`; empty bins leave
/// the error fields blank.
pub fn curve_csv(curve: &[CurveBin], unit: &str) -> String {
    let mut out = format!("bin_center_{unit},mae_{unit},rel_err_pct,count\n");
    for b in curve {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            b.center(),
            opt(b.mae),
            opt(b.rel_err_pct),
            b.count
        );
    }
    out
}

/// Predictions and physical-unit truth for every row of a processed dataset.
/// The dataset must have been normalized with the model's own normalizer.
pub fn predict_dataset(
    model: &TrainedModel,
    ds: &ProcessedDataset,
) -> Result<(Vec<Wrench>, Vec<Wrench>), EvalError> {
    if ds.feature_width != model.input_width() {
        return Err(ModelError::ShapeMismatch {
            expected: model.input_width(),
            actual: ds.feature_width,
        }
        .into());
    }
    const CHUNK: usize = 4096;
    let w = ds.feature_width;
    let mut pred = Vec::with_capacity(ds.rows());
    for chunk in ds.features.chunks(CHUNK * w) {
        let x = ArrayView2::from_shape((chunk.len() / w, w), chunk).expect("row-major features");
        pred.extend(model.predict_normalized(x)?);
    }
    let mut labels = ds.labels.clone();
    model.normalizer.denormalize_labels(&mut labels);
    let truth = labels
        .chunks_exact(NUM_LABELS)
        .map(|r| Wrench::from_array([r[0], r[1], r[2], r[3], r[4], r[5]]))
        .collect();
    Ok((pred, truth))
}

/// Time stamp of each dataset row; files are laid end to end.
pub fn row_times(ds: &ProcessedDataset, files: &[DataFile]) -> Vec<f64> {
    let mut offsets = Vec::with_capacity(files.len());
    let mut acc = 0.0;
    for f in files {
        offsets.push(acc);
        acc += f.meta.frames as f64 / f.meta.sample_rate;
    }
    ds.provenance
        .iter()
        .map(|s| offsets[s.file] + s.frame as f64 / files[s.file].meta.sample_rate)
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `report.txt`, `report.csv`, the two curves and one trace per axis.
pub fn write_reports(
    dir: &Path,
    report: &MetricsReport,
    times: &[f64],
    pred: &[Wrench],
    truth: &[Wrench],
) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join("report.txt"), &render_report(report))?;
    write_file(&dir.join("report.csv"), &report_csv(report))?;
    write_file(&dir.join("curve_force.csv"), &curve_csv(&report.force_curve, "N"))?;
    write_file(&dir.join("curve_torque.csv"), &curve_csv(&report.torque_curve, "Nmm"))?;
    for (k, tag) in AXIS_TAGS.iter().enumerate() {
        let mut out = String::from("t,truth,prediction\n");
        for ((t, p), y) in times.iter().zip(pred).zip(truth) {
            let _ = writeln!(out, "{},{},{}", t, y.as_array()[k], p.as_array()[k]);
        }
        write_file(&dir.join(format!("trace_{tag}.csv")), &out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wrenches(n: usize, seed: u64) -> Vec<Wrench> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Wrench::from_array(std::array::from_fn(|k| {
                    let scale = if k < 3 { 2.0 } else { 150.0 };
                    rng.random_range(-scale..scale)
                }))
            })
            .collect()
    }

    fn oracle(pred: &[f64], truth: &[f64]) -> (f64, f64, f64) {
        let n = pred.len() as f64;
        let mut mae = 0.0;
        for i in 0..pred.len() {
            mae += (pred[i] - truth[i]).abs();
        }
        mae /= n;
        let mut var = 0.0;
        for i in 0..pred.len() {
            let d = (pred[i] - truth[i]).abs() - mae;
            var += d * d;
        }
        let mut mean = 0.0;
        for t in truth {
            mean += t;
        }
        mean /= n;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..pred.len() {
            num += (truth[i] - pred[i]).powi(2);
            den += (truth[i] - mean).powi(2);
        }
        (mae, (var / n).sqrt(), 1.0 - num / den)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn perfect_predictions() {
        let w = random_wrenches(50, 1);
        let m = compute_metrics(&w, &w, &EvalConfig::default()).unwrap();
        for r in &m.rows {
            assert_eq!(r.mae, 0.0);
            assert_eq!(r.std, 0.0);
            assert_eq!(r.r2, Some(1.0));
        }
        for b in m.force_curve.iter().chain(&m.torque_curve) {
            if b.count > 0 {
                assert_eq!(b.rel_err_pct, Some(0.0));
            }
        }
    }

    #[test]
    fn constant_mean_prediction_has_zero_r2() {
        let truth: Vec<Wrench> = (0..8)
            .map(|i| Wrench::from_array([i as f64, 1.0 - i as f64, 0.5, 3.0, -2.0 * i as f64, 1.0]))
            .collect();
        let mean = truth.iter().copied().sum::<Wrench>() * (1.0 / 8.0);
        let pred = vec![mean; 8];
        let m = compute_metrics(&pred, &truth, &EvalConfig::default()).unwrap();
        for name in ["Fx", "Fy", "Ty"] {
            assert!(m.row(name).unwrap().r2.unwrap().abs() < 1e-12, "{name}");
        }
        // Constant truth columns have undefined R².
        for name in ["Fz", "Tx", "Tz"] {
            assert_eq!(m.row(name).unwrap().r2, None, "{name}");
        }
        // Rounding-level spread counts as constant.
        let mut t2 = truth.clone();
        t2[0] = Wrench::from_array([0.0, 1.0, 0.5, 3.0, 0.0, 1.0 + 1e-15]);
        let m = compute_metrics(&pred, &t2, &EvalConfig::default()).unwrap();
        assert_eq!(m.row("Tz").unwrap().r2, None);
    }

    #[test]
    fn matches_definitional_oracle() {
        let truth = random_wrenches(100, 2);
        let pred: Vec<Wrench> = truth
            .iter()
            .zip(random_wrenches(100, 3))
            .map(|(t, n)| *t + n * 0.1)
            .collect();
        let m = compute_metrics(&pred, &truth, &EvalConfig::default()).unwrap();
        for k in 0..6 {
            let p: Vec<f64> = pred.iter().map(|w| w.as_array()[k]).collect();
            let t: Vec<f64> = truth.iter().map(|w| w.as_array()[k]).collect();
            let (mae, std, r2) = oracle(&p, &t);
            let row = &m.rows[if k < 3 { k } else { k + 1 }];
            assert!(rel_close(row.mae, mae, 1e-12));
            assert!(rel_close(row.std, std, 1e-12));
            assert!(rel_close(row.r2.unwrap(), r2, 1e-12));
        }
        let p: Vec<f64> = pred.iter().map(|w| w.force.norm()).collect();
        let t: Vec<f64> = truth.iter().map(|w| w.force.norm()).collect();
        let (mae, std, r2) = oracle(&p, &t);
        let row = m.row("Fmag").unwrap();
        assert!(rel_close(row.mae, mae, 1e-12));
        assert!(rel_close(row.std, std, 1e-12));
        assert!(rel_close(row.r2.unwrap(), r2, 1e-12));
    }

    #[test]
    fn rejects_bad_lengths() {
        let w = random_wrenches(3, 0);
        assert!(matches!(
            compute_metrics(&w, &w[..2], &EvalConfig::default()),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            compute_metrics(&w[..1], &w[..1], &EvalConfig::default()),
            Err(EvalError::TooFewSamples(1))
        ));
    }

    #[test]
    fn single_bin_equals_global_magnitude_mae() {
        let truth: Vec<Wrench> = random_wrenches(60, 4)
            .into_iter()
            .map(|w| Wrench::new(w.force.normalize() * 1.1, w.torque))
            .collect();
        let pred: Vec<Wrench> = truth
            .iter()
            .zip(random_wrenches(60, 5))
            .map(|(t, n)| *t + n * 0.05)
            .collect();
        let pm: Vec<f64> = pred.iter().map(|w| w.force.norm()).collect();
        let tm: Vec<f64> = truth.iter().map(|w| w.force.norm()).collect();
        let curve = binned_error_curve(&pm, &tm, &[1.0, 1.25]).unwrap();
        let m = compute_metrics(&pred, &truth, &EvalConfig::default()).unwrap();
        assert_eq!(curve[0].count, 60);
        assert!(rel_close(curve[0].mae.unwrap(), m.row("Fmag").unwrap().mae, 1e-12));
    }

    #[test]
    fn empty_bins_are_flagged() {
        let curve = binned_error_curve(&[0.1, 0.2], &[0.1, 0.1], &[0.0, 0.25, 0.5]).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0].count, 2);
        assert_eq!(curve[1].count, 0);
        assert_eq!(curve[1].mae, None);
        assert_eq!(curve[1].rel_err_pct, None);
        assert!((curve[0].rel_err_pct.unwrap() - 100.0 * 0.05 / 0.125).abs() < 1e-12);
        assert!(binned_error_curve(&[0.0], &[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn uniform_edges_defaults() {
        let cfg = EvalConfig::default();
        let f = cfg.force_edges();
        assert_eq!(f.len(), 11);
        assert_eq!(f[10], 2.5);
        let t = cfg.torque_edges();
        assert_eq!(t.len(), 21);
        assert_eq!(t[20], 250.0);
        assert!(uniform_edges(0.3, 1.0).is_err());
    }

    #[test]
    fn sig3_literals() {
        assert_eq!(format_sig3(0.0560), ".0560");
        assert_eq!(format_sig3(0.0714), ".0714");
        assert_eq!(format_sig3(0.990), ".990");
        assert_eq!(format_sig3(0.99996), "1.00");
        assert_eq!(format_sig3(12.345), "12.3");
        assert_eq!(format_sig3(123.4), "123");
        assert_eq!(format_sig3(-0.5), "-.500");
        assert_eq!(format_sig3(0.0), "0");
    }

    fn reference_like_report() -> MetricsReport {
        let row = |name: &str, mae, std, r2| MetricRow {
            name: name.into(),
            mae,
            std,
            r2,
            count: 10,
        };
        MetricsReport {
            rows: vec![
                row("Fx", 0.0560, 0.0714, Some(0.990)),
                row("Fy", 0.0533, 0.07, Some(0.993)),
                row("Fz", 0.01, 0.02, None),
                row("Fmag", 0.06, 0.05, Some(0.98)),
                row("Tx", 5.0, 4.0, Some(0.97)),
                row("Ty", 5.5, 4.5, Some(0.96)),
                row("Tz", 0.1, 0.2, None),
                row("Tmag", 6.0, 5.0, Some(0.95)),
            ],
            force_curve: vec![],
            torque_curve: vec![],
        }
    }

    #[test]
    fn renders_table_literals_in_order() {
        let text = render_report(&reference_like_report());
        let lines: Vec<&str> = text.lines().skip(2).collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].starts_with("Force x (N)"));
        let fx: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(&fx[fx.len() - 3..], &[".0560", ".0714", ".990"]);
        for (line, title) in lines.iter().zip(ROW_TITLES) {
            assert!(line.starts_with(title));
        }
        assert!(lines[2].trim_end().ends_with("n/a"));
    }

    #[test]
    fn report_csv_round_trips() {
        let truth = random_wrenches(40, 8);
        let pred = random_wrenches(40, 9);
        let mut m = compute_metrics(&pred, &truth, &EvalConfig::default()).unwrap();
        m.rows[2].r2 = None;
        let back = parse_report_csv(&report_csv(&m)).unwrap();
        assert_eq!(back.len(), m.rows.len());
        for (a, b) in back.iter().zip(&m.rows) {
            assert_eq!(a.name, b.name);
            assert!((a.mae - b.mae).abs() <= 1e-12 * b.mae.abs().max(1.0));
            assert!((a.std - b.std).abs() <= 1e-12 * b.std.abs().max(1.0));
            assert_eq!(a.r2.is_some(), b.r2.is_some());
            if let (Some(x), Some(y)) = (a.r2, b.r2) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            assert_eq!(a.count, b.count);
        }
        assert!(matches!(
            parse_report_csv("axis,mae,std,r2,count\nFx,1,oops,,3\n"),
            Err(EvalError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn curve_csv_layout() {
        let curve = binned_error_curve(&[0.1, 0.2], &[0.1, 0.1], &[0.0, 0.25, 0.5]).unwrap();
        let text = curve_csv(&curve, "N");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bin_center_N,mae_N,rel_err_pct,count");
        assert_eq!(lines[2], "0.375,,,0");
    }

    proptest! {
        #[test]
        fn shift_invariance(seed in 0u64..1000, c in -50.0f64..50.0) {
            let truth = random_wrenches(30, seed);
            let pred = random_wrenches(30, seed + 7);
            let shift = Wrench::new(Vector3::repeat(c), Vector3::repeat(c));
            let ts: Vec<Wrench> = truth.iter().map(|w| *w + shift).collect();
            let ps: Vec<Wrench> = pred.iter().map(|w| *w + shift).collect();
            let a = compute_metrics(&pred, &truth, &EvalConfig::default()).unwrap();
            let b = compute_metrics(&ps, &ts, &EvalConfig::default()).unwrap();
            for k in [0usize, 1, 2, 4, 5, 6] {
                prop_assert!((a.rows[k].mae - b.rows[k].mae).abs() < 1e-9);
                prop_assert!((a.rows[k].std - b.rows[k].std).abs() < 1e-9);
            }
        }

        #[test]
        fn curve_weighted_mean_matches_global(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..2.5)).collect();
            let pred: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-0.2..0.2)).collect();
            let edges = EvalConfig::default().force_edges();
            let curve = binned_error_curve(&pred, &truth, &edges).unwrap();
            let total: usize = curve.iter().map(|b| b.count).sum();
            prop_assert_eq!(total, 200);
            let weighted: f64 = curve.iter().map(|b| b.mae.unwrap_or(0.0) * b.count as f64).sum::<f64>() / 200.0;
            let global = pred.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / 200.0;
            prop_assert!((weighted - global).abs() < 1e-9);
        }

        #[test]
        fn r2_at_most_one(seed in 0u64..1000) {
            let truth = random_wrenches(20, seed);
            let pred = random_wrenches(20, seed + 1);
            let m = compute_metrics(&pred, &truth, &EvalConfig::default()).unwrap();
            for r in &m.rows {
                prop_assert!(r.mae >= 0.0);
                if let Some(r2) = r.r2 {
                    prop_assert!(r2 <= 1.0);
                }
            }
        }
    }
}
