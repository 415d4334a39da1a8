//! Preprocessing from raw data files to normalized, window-stacked training rows.

use crate::datagen::{DataFile, LabeledFrame};
use crate::geometry::NUM_RECEIVERS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

pub const NUM_LABELS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid median filter width {width} for series of length {len}")]
    InvalidWidth { width: usize, len: usize },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("file {file}: {have} frames, need at least {need}")]
    InsufficientFrames { file: String, have: usize, need: usize },
    #[error("preprocessing produced no rows")]
    EmptyOutput,
    #[error("normalizer expects {expected} features, data has {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub signal_filter_width: usize,
    pub label_filter_width: usize,
    /// Filtered force magnitude below which a frame counts as no-contact, N.
    pub no_contact_threshold: f64,
    /// Cap on the share of no-contact rows in training data.
    pub no_contact_fraction: f64,
    pub baseline_frames: usize,
    pub window: usize,
    pub dropped_channels: Vec<usize>,
    /// Seed of the no-contact downsampling stream.
    pub downsample_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            signal_filter_width: 45,
            label_filter_width: 13,
            no_contact_threshold: 0.1,
            no_contact_fraction: 0.10,
            baseline_frames: 50,
            window: 4,
            dropped_channels: vec![3, 9, 14, 20],
            downsample_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        for (name, w) in [
            ("signal_filter_width", self.signal_filter_width),
            ("label_filter_width", self.label_filter_width),
        ] {
            if w == 0 || w % 2 == 0 {
                return bad(format!("{name} must be odd and >= 1, got {w}"));
            }
        }
        if !(self.no_contact_fraction > 0.0 && self.no_contact_fraction <= 1.0) {
            return bad(format!(
                "no_contact_fraction must be in (0, 1], got {}",
                self.no_contact_fraction
            ));
        }
        if self.window == 0 || self.baseline_frames == 0 {
            return bad("window and baseline_frames must be >= 1".into());
        }
        if let Some(c) = self.dropped_channels.iter().find(|&&c| c >= NUM_RECEIVERS) {
            return bad(format!("dropped channel {c} is not a receiver id"));
        }
        if self.kept_channels().is_empty() {
            return bad("all channels dropped".into());
        }
        Ok(())
    }

    pub fn kept_channels(&self) -> Vec<usize> {
        (0..NUM_RECEIVERS)
            .filter(|c| !self.dropped_channels.contains(c))
            .collect()
    }

    pub fn feature_width(&self) -> usize {
        self.window * self.kept_channels().len()
    }
}

/// Centered running median with edge replication. Output length equals input length.
pub fn median_filter(series: &[f64], width: usize) -> Result<Vec<f64>, PipelineError> {
    let n = series.len();
    if width == 0 || width % 2 == 0 || width > 2 * n {
        return Err(PipelineError::InvalidWidth { width, len: n });
    }
    if width == 1 {
        return Ok(series.to_vec());
    }
    let h = (width / 2) as isize;
    let at = |j: isize| series[j.clamp(0, n as isize - 1) as usize];
    let mut window: Vec<f64> = (-h..=h).map(at).collect();
    window.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(n);
    out.push(window[h as usize]);
    for i in 1..n as isize {
        let leaving = at(i - h - 1);
        let pos = window.partition_point(|v| v.total_cmp(&leaving).is_lt());
        window.remove(pos);
        let entering = at(i + h);
        let pos = window.partition_point(|v| v.total_cmp(&entering).is_lt());
        window.insert(pos, entering);
        out.push(window[h as usize]);
    }
    Ok(out)
}

/// Per-channel mean of the first `n` raw frames.
pub fn compute_baseline(
    frames: &[LabeledFrame],
    n: usize,
) -> Result<[f64; NUM_RECEIVERS], PipelineError> {
    if n == 0 || frames.len() < n {
        return Err(PipelineError::InsufficientFrames {
            file: String::new(),
            have: frames.len(),
            need: n.max(1),
        });
    }
    let mut sum = [0.0; NUM_RECEIVERS];
    for lf in &frames[..n] {
        for (s, &v) in sum.iter_mut().zip(&lf.frame.signals) {
            *s += f64::from(v);
        }
    }
    Ok(sum.map(|s| s / n as f64))
}

/// Per-feature and per-label standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: Vec<f64>,
    pub label_std: Vec<f64>,
}

/// Columns with (near) zero spread keep unit scale.
const MIN_STD: f64 = 1e-12;

fn column_stats(data: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = data.len() / cols;
    let mut mean = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / rows as f64).sqrt();
            if sd > MIN_STD {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(data: &mut [f64], mean: &[f64], std: &[f64]) {
    for row in data.chunks_exact_mut(mean.len()) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

impl Normalizer {
    pub fn fit(features: &[f64], feature_cols: usize, labels: &[f64]) -> Self {
        let (feature_mean, feature_std) = column_stats(features, feature_cols);
        let (label_mean, label_std) = column_stats(labels, NUM_LABELS);
        Self {
            feature_mean,
            feature_std,
            label_mean,
            label_std,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn normalize_features(&self, data: &mut [f64]) {
        standardize(data, &self.feature_mean, &self.feature_std);
    }

    pub fn normalize_labels(&self, data: &mut [f64]) {
        standardize(data, &self.label_mean, &self.label_std);
    }

    /// Maps normalized label rows back to physical units.
    pub fn denormalize_labels(&self, data: &mut [f64]) {
        for row in data.chunks_exact_mut(NUM_LABELS) {
            for ((v, m), s) in row.iter_mut().zip(&self.label_mean).zip(&self.label_std) {
                *v = *v * s + m;
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        self.feature_mean.len() == self.feature_std.len()
            && self.label_mean.len() == NUM_LABELS
            && self.label_std.len() == NUM_LABELS
            && self
                .feature_std
                .iter()
                .chain(&self.label_std)
                .all(|s| s.is_finite() && *s > MIN_STD)
            && self
                .feature_mean
                .iter()
                .chain(&self.label_mean)
                .all(|m| m.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSource {
    pub file: usize,
    pub frame: usize,
}

/// Row-major feature and label matrices in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedDataset {
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    pub feature_width: usize,
    pub provenance: Vec<RowSource>,
    /// Rows whose filtered force fell below the no-contact threshold.
    pub no_contact: Vec<bool>,
}

impl ProcessedDataset {
    pub fn rows(&self) -> usize {
        self.provenance.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_width..(i + 1) * self.feature_width]
    }

    pub fn label_row(&self, i: usize) -> &[f64] {
        &self.labels[i * NUM_LABELS..(i + 1) * NUM_LABELS]
    }

    /// Header `f000..,fx,fy,fz,tx,ty,tz`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut cols: Vec<String> = (0..self.feature_width).map(|i| format!("f{i:03}")).collect();
        cols.extend(["fx", "fy", "fz", "tx", "ty", "tz"].map(String::from));
        writeln!(w, "{}", cols.join(","))?;
        for i in 0..self.rows() {
            let vals: Vec<String> = self
                .feature_row(i)
                .iter()
                .chain(self.label_row(i))
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{}", vals.join(","))?;
        }
        Ok(())
    }
}

/// Median-filtered, baseline-subtracted signals of the kept channels,
/// row-major `frames × kept`.
pub fn delta_signals(file: &DataFile, cfg: &PipelineConfig) -> Result<Vec<f64>, PipelineError> {
    let n = file.frames.len();
    let baseline = compute_baseline(&file.frames, cfg.baseline_frames).map_err(|_| {
        PipelineError::InsufficientFrames {
            file: file.id().to_string(),
            have: n,
            need: cfg.baseline_frames,
        }
    })?;
    let kept = cfg.kept_channels();
    let mut out = vec![0.0; n * kept.len()];
    for (k, &ch) in kept.iter().enumerate() {
        let series: Vec<f64> = file
            .frames
            .iter()
            .map(|lf| f64::from(lf.frame.signals[ch]))
            .collect();
        let filtered = median_filter(&series, cfg.signal_filter_width)?;
        for (i, v) in filtered.into_iter().enumerate() {
            out[i * kept.len() + k] = v - baseline[ch];
        }
    }
    Ok(out)
}

/// Median-filtered labels with no-contact frames zeroed; returns labels
/// (row-major `frames × 6`) and the no-contact mask.
pub fn filtered_labels(
    file: &DataFile,
    cfg: &PipelineConfig,
) -> Result<(Vec<f64>, Vec<bool>), PipelineError> {
    let n = file.frames.len();
    let mut labels = vec![0.0; n * NUM_LABELS];
    for axis in 0..NUM_LABELS {
        let series: Vec<f64> = file.frames.iter().map(|lf| lf.wrench.as_array()[axis]).collect();
        let filtered = median_filter(&series, cfg.label_filter_width)?;
        for (i, v) in filtered.into_iter().enumerate() {
            labels[i * NUM_LABELS + axis] = v;
        }
    }
    let mut mask = Vec::with_capacity(n);
    for row in labels.chunks_exact_mut(NUM_LABELS) {
        let fmag = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        let rest = fmag < cfg.no_contact_threshold;
        if rest {
            row.fill(0.0);
        }
        mask.push(rest);
    }
    Ok((labels, mask))
}

struct FileStage {
    deltas: Vec<f64>,
    labels: Vec<f64>,
    rest: Vec<bool>,
}

/// Runs the full preprocessing chain.
///
/// Without a normalizer the call is in training mode: no-contact rows are
/// downsampled to at most `no_contact_fraction` of the output and a fresh
/// normalizer is fitted on the resulting rows. With a normalizer the rows
/// are kept as-is and the supplied statistics are applied.
pub fn preprocess(
    files: &[DataFile],
    cfg: &PipelineConfig,
    normalizer: Option<&Normalizer>,
) -> Result<(ProcessedDataset, Normalizer), PipelineError> {
    cfg.validate()?;
    let need = cfg.baseline_frames.max(cfg.window).max(cfg.signal_filter_width.div_ceil(2));
    let stages: Vec<FileStage> = files
        .par_iter()
        .map(|f| {
            if f.frames.len() < need {
                return Err(PipelineError::InsufficientFrames {
                    file: f.id().to_string(),
                    have: f.frames.len(),
                    need,
                });
            }
            let deltas = delta_signals(f, cfg)?;
            let (labels, rest) = filtered_labels(f, cfg)?;
            Ok(FileStage { deltas, labels, rest })
        })
        .collect::<Result<_, _>>()?;

    let mut rows: Vec<RowSource> = Vec::new();
    let mut rest_rows: Vec<usize> = Vec::new();
    for (fi, st) in stages.iter().enumerate() {
        for frame in (cfg.window - 1)..st.rest.len() {
            if st.rest[frame] {
                rest_rows.push(rows.len());
            }
            rows.push(RowSource { file: fi, frame });
        }
    }

    if normalizer.is_none() {
        let n_rest = rest_rows.len();
        let n_contact = rows.len() - n_rest;
        let f = cfg.no_contact_fraction;
        let keep = if f >= 1.0 {
            n_rest
        } else {
            ((f * n_contact as f64 / (1.0 - f)).floor() as usize).min(n_rest)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.downsample_seed);
        let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, n_rest, keep).into_vec();
        chosen.sort_unstable();
        let mut drop = vec![false; rows.len()];
        for &r in &rest_rows {
            drop[r] = true;
        }
        for &c in &chosen {
            drop[rest_rows[c]] = false;
        }
        let mut it = drop.into_iter();
        rows.retain(|_| !it.next().expect("same length"));
    }
    if rows.is_empty() {
        return Err(PipelineError::EmptyOutput);
    }

    let kept = cfg.kept_channels().len();
    let width = cfg.window * kept;
    let mut features = Vec::with_capacity(rows.len() * width);
    let mut labels = Vec::with_capacity(rows.len() * NUM_LABELS);
    let mut no_contact = Vec::with_capacity(rows.len());
    for r in &rows {
        let st = &stages[r.file];
        let first = r.frame + 1 - cfg.window;
        features.extend_from_slice(&st.deltas[first * kept..(r.frame + 1) * kept]);
        labels.extend_from_slice(&st.labels[r.frame * NUM_LABELS..(r.frame + 1) * NUM_LABELS]);
        no_contact.push(st.rest[r.frame]);
    }

    let norm = match normalizer {
        Some(n) => {
            if n.feature_width() != width {
                return Err(PipelineError::ShapeMismatch {
                    expected: n.feature_width(),
                    actual: width,
                });
            }
            n.clone()
        }
        None => Normalizer::fit(&features, width, &labels),
    };
    norm.normalize_features(&mut features);
    norm.normalize_labels(&mut labels);
    Ok((
        ProcessedDataset {
            features,
            labels,
            feature_width: width,
            provenance: rows,
            no_contact,
        },
        norm,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        generate_schedule, synthesize_file, FileMeta, ProtocolConfig, ScheduledFile, SensorTwin, Split,
    };
    use crate::geometry::Displacement6;
    use crate::mechanics::Wrench;
    use crate::optics::{irradiance_vector, NoiseModel, SignalFrame};
    use rand::Rng;

    /// Sort-based reference with replicated edges.
    fn median_oracle(x: &[f64], width: usize) -> Vec<f64> {
        let n = x.len() as isize;
        let h = (width / 2) as isize;
        (0..n)
            .map(|i| {
                let mut w: Vec<f64> = (i - h..=i + h).map(|j| x[j.clamp(0, n - 1) as usize]).collect();
                w.sort_by(f64::total_cmp);
                w[h as usize]
            })
            .collect()
    }

    #[test]
    fn median_examples() {
        let x = [1.0, 5.0, 2.0, 4.0, 3.0];
        assert_eq!(median_filter(&x, 1).unwrap(), x.to_vec());
        assert_eq!(median_filter(&x, 3).unwrap(), vec![1.0, 2.0, 4.0, 3.0, 3.0]);
        assert_eq!(median_oracle(&x, 3), vec![1.0, 2.0, 4.0, 3.0, 3.0]);
    }

    #[test]
    fn median_width_errors() {
        let x = [1.0, 2.0, 3.0];
        assert!(median_filter(&x, 2).is_err());
        assert!(median_filter(&x, 0).is_err());
        assert!(median_filter(&x, 7).is_err());
        assert!(median_filter(&x, 5).is_ok());
        assert!(median_filter(&[], 1).is_err());
    }

    #[test]
    fn median_matches_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n: usize = rng.random_range(1..200);
            // Integer-valued series exercise ties.
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64).collect();
            let max_w = (2 * n).min(61);
            let w = 2 * rng.random_range(0..max_w.div_ceil(2)) + 1;
            let got = median_filter(&x, w).unwrap();
            assert_eq!(got, median_oracle(&x, w));
            let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(got.iter().all(|&v| v >= lo && v <= hi));
        }
    }

    fn constant_file(n: usize, value: u16) -> DataFile {
        DataFile {
            meta: FileMeta {
                schedule: ScheduledFile {
                    id: "c".into(),
                    split: Split::Train,
                    location: 0,
                    azimuth: 0.0,
                    contacts: vec![],
                },
                seed: 0,
                sample_rate: 500.0,
                frames: n,
            },
            frames: (0..n)
                .map(|i| LabeledFrame {
                    frame: SignalFrame {
                        t: i as f64 / 500.0,
                        signals: [value; NUM_RECEIVERS],
                    },
                    wrench: Wrench::zero(),
                })
                .collect(),
        }
    }

    #[test]
    fn baseline_examples() {
        let f = constant_file(100, 1234);
        assert_eq!(compute_baseline(&f.frames, 50).unwrap(), [1234.0; NUM_RECEIVERS]);
        let mut g = constant_file(3, 0);
        g.frames[0].frame.signals[5] = 77;
        assert_eq!(compute_baseline(&g.frames, 1).unwrap()[5], 77.0);
        assert!(compute_baseline(&g.frames, 4).is_err());
    }

    #[test]
    fn baseline_of_noiseless_file_is_rest_frame() {
        let mut twin = SensorTwin::default_twin();
        twin.noise = NoiseModel::noiseless();
        let p = ProtocolConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sched = generate_schedule(&p, &twin.finger, Split::Test, &mut rng).unwrap();
        let f = synthesize_file(&sched[0], &p, &twin, 1).unwrap();
        let rest = irradiance_vector(&twin.layout, &Displacement6::zero(), &twin.medium).unwrap();
        let b = compute_baseline(&f.frames, 50).unwrap();
        for (x, r) in b.iter().zip(rest) {
            assert_eq!(*x, r.round_ties_even());
        }
    }

    #[test]
    fn contact_free_training_file_yields_nothing() {
        let f = constant_file(500, 1000);
        let err = preprocess(&[f], &PipelineConfig::default(), None).unwrap_err();
        assert_eq!(err, PipelineError::EmptyOutput);
    }

    #[test]
    fn test_mode_keeps_rest_rows_and_normalizer() {
        let f = constant_file(500, 1000);
        let norm = Normalizer {
            feature_mean: vec![0.0; 80],
            feature_std: vec![2.0; 80],
            label_mean: vec![0.0; 6],
            label_std: vec![1.0; 6],
        };
        let before = norm.clone();
        let (ds, out) = preprocess(&[f], &PipelineConfig::default(), Some(&norm)).unwrap();
        assert_eq!(norm, before);
        assert_eq!(out, before);
        assert_eq!(ds.rows(), 497);
        assert_eq!(ds.feature_width, 80);
        assert!(ds.no_contact.iter().all(|&r| r));
        assert!(ds.features.iter().all(|&v| v == 0.0));
    }

    fn small_dataset() -> Vec<DataFile> {
        let twin = SensorTwin::default_twin();
        let p = ProtocolConfig {
            n_locations: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sched = generate_schedule(&p, &twin.finger, Split::Test, &mut rng).unwrap();
        sched
            .iter()
            .enumerate()
            .map(|(i, s)| synthesize_file(s, &p, &twin, i as u64).unwrap())
            .collect()
    }

    #[test]
    fn training_mode_properties() {
        let files = small_dataset();
        let cfg = PipelineConfig::default();
        let (ds, norm) = preprocess(&files, &cfg, None).unwrap();
        assert!(norm.is_valid());
        assert_eq!(ds.feature_width, 80);
        assert!(ds.features.iter().chain(&ds.labels).all(|v| v.is_finite()));

        // No-contact share capped.
        let rest = ds.no_contact.iter().filter(|&&r| r).count();
        let cap = cfg.no_contact_fraction * ds.rows() as f64;
        assert!(rest as f64 <= cap + 1.0, "{rest} rest rows of {}", ds.rows());
        assert!(rest > 0);

        // Standardized columns.
        let cols = ds.feature_width;
        for c in 0..cols {
            let col: Vec<f64> = (0..ds.rows()).map(|r| ds.feature_row(r)[c]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-9, "col {c} mean {m}");
            assert!((sd - 1.0).abs() < 1e-9, "col {c} std {sd}");
        }

        // Rest labels are exactly zero before normalization.
        let mut phys = ds.labels.clone();
        norm.denormalize_labels(&mut phys);
        for (r, &is_rest) in ds.no_contact.iter().enumerate() {
            if is_rest {
                assert!(phys[r * 6..r * 6 + 6].iter().all(|v| v.abs() < 1e-9));
            }
        }

        // Deterministic.
        let (ds2, norm2) = preprocess(&files, &cfg, None).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(norm, norm2);
    }

    #[test]
    fn windows_are_causal() {
        let files = small_dataset();
        let cfg = PipelineConfig::default();
        let norm = {
            let (_, n) = preprocess(&files, &cfg, None).unwrap();
            n
        };
        let (ds, _) = preprocess(&files, &cfg, Some(&norm)).unwrap();
        let deltas: Vec<Vec<f64>> = files.iter().map(|f| delta_signals(f, &cfg).unwrap()).collect();
        for (r, src) in ds.provenance.iter().enumerate().step_by(331) {
            assert!(src.frame >= 3);
            let mut expect = deltas[src.file][(src.frame - 3) * 20..(src.frame + 1) * 20].to_vec();
            norm.normalize_features(&mut expect);
            for (a, b) in ds.feature_row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // First 3 frames of every file produce no row.
        for (fi, f) in files.iter().enumerate() {
            let n = ds.provenance.iter().filter(|s| s.file == fi).count();
            assert_eq!(n, f.frames.len() - 3);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = PipelineConfig::default();
        c.signal_filter_width = 44;
        assert!(c.validate().is_err());
        c = PipelineConfig::default();
        c.no_contact_fraction = 0.0;
        assert!(c.validate().is_err());
        c = PipelineConfig::default();
        c.dropped_channels = (0..24).collect();
        assert!(c.validate().is_err());
        c = PipelineConfig::default();
        c.dropped_channels.clear();
        assert_eq!(c.feature_width(), 96);
    }
}
