//! Synthetic data collection: contact schedules in the style of the manual
//! collection protocol, and labeled 500 Hz data files produced by the twin.

use crate::geometry::{build_layout, LayoutConfig, SensorLayout, NUM_RECEIVERS};
use crate::mechanics::{ComplianceModel, ContactEvent, ContactHeight, FingerConfig, MechanicsError, Wrench};
use crate::optics::{frame_signals, MediumModel, NoiseModel, OpticsError, SignalFrame};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid protocol config: {0}")]
    InvalidProtocol(String),
    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),
    #[error("train and test schedules share contact {0}")]
    SharedContact(String),
    #[error("file {file}: {source}")]
    Mechanics {
        file: String,
        #[source]
        source: MechanicsError,
    },
    #[error("file {file}: {source}")]
    Optics {
        file: String,
        #[source]
        source: OpticsError,
    },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("{path}: row {row}: {msg}")]
    CsvRow { path: PathBuf, row: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceGroup {
    /// Below 1 N.
    Low,
    /// Around 1 N.
    Mid,
    /// Around 2 N.
    High,
    /// Extended-range training push, 2–10 N.
    Extended,
}

impl ForceGroup {
    pub const PROTOCOL: [ForceGroup; 3] = [Self::Low, Self::Mid, Self::High];

    /// Uniform draw interval for the peak force, N.
    pub fn range(self) -> (f64, f64) {
        match self {
            Self::Low => (0.2, 0.8),
            Self::Mid => (0.8, 1.2),
            Self::High => (1.6, 2.4),
            Self::Extended => (2.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_locations: usize,
    pub contacts_per_location: usize,
    /// Contacts per force group collected before the randomly split remainder.
    pub group_quota: usize,
    /// s
    pub file_duration: f64,
    pub contacts_per_file: usize,
    /// Hz
    pub sample_rate: f64,
    /// Fraction of training contacts redrawn in the extended 2–10 N range.
    pub high_force_fraction: f64,
    pub test_contacts_per_location_per_group: usize,
    /// Force ramp-up and ramp-down time, s.
    pub ramp: f64,
    pub hold_min: f64,
    pub hold_max: f64,
    /// Minimum contact-free time before the first contact and between contacts, s.
    pub min_gap: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_locations: 10,
            contacts_per_location: 15,
            group_quota: 3,
            file_duration: 20.0,
            contacts_per_file: 3,
            sample_rate: 500.0,
            high_force_fraction: 0.05,
            test_contacts_per_location_per_group: 1,
            ramp: 0.3,
            hold_min: 2.0,
            hold_max: 5.0,
            min_gap: 1.0,
        }
    }
}

/// Frames at the start of every file that must be contact-free.
pub const MIN_QUIET_FRAMES: usize = 50;

impl ProtocolConfig {
    pub fn frames_per_file(&self) -> usize {
        (self.sample_rate * self.file_duration).round() as usize
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidProtocol(m));
        if self.n_locations == 0 || self.contacts_per_file == 0 {
            return bad("n_locations and contacts_per_file must be > 0".into());
        }
        if 3 * self.group_quota > self.contacts_per_location {
            return bad(format!(
                "group quotas (3 × {}) exceed contacts_per_location {}",
                self.group_quota, self.contacts_per_location
            ));
        }
        if !(self.sample_rate > 0.0 && self.file_duration > 0.0) {
            return bad("sample_rate and file_duration must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.high_force_fraction) {
            return bad(format!(
                "high_force_fraction {} outside [0, 1]",
                self.high_force_fraction
            ));
        }
        if !(self.ramp >= 0.0 && self.min_gap >= 0.0) {
            return bad("ramp and min_gap must be >= 0".into());
        }
        if !(2.0 <= self.hold_min && self.hold_min <= self.hold_max && self.hold_max <= 5.0) {
            return bad(format!(
                "hold range [{}, {}] must lie within [2, 5] s",
                self.hold_min, self.hold_max
            ));
        }
        let quiet = (self.min_gap * self.sample_rate).floor() as usize;
        if quiet < MIN_QUIET_FRAMES {
            return bad(format!(
                "min_gap gives {quiet} quiet frames, need {MIN_QUIET_FRAMES}"
            ));
        }
        let worst = self.required_time(&vec![self.hold_max; self.contacts_per_file]);
        if worst > self.file_duration {
            return Err(DatagenError::InfeasibleSchedule(format!(
                "{} contacts with {} s holds need {worst:.2} s, file is {} s",
                self.contacts_per_file, self.hold_max, self.file_duration
            )));
        }
        Ok(())
    }

    fn required_time(&self, holds: &[f64]) -> f64 {
        let n = holds.len() as f64;
        let active: f64 = holds.iter().map(|h| h + 2.0 * self.ramp).sum();
        self.min_gap * n + active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledContact {
    pub event: ContactEvent,
    pub group: ForceGroup,
    pub height: ContactHeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledFile {
    pub id: String,
    pub split: Split,
    pub location: usize,
    pub azimuth: f64,
    pub contacts: Vec<ScheduledContact>,
}

/// Sidecar metadata stored next to every data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMeta {
    pub schedule: ScheduledFile,
    pub seed: u64,
    pub sample_rate: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub frame: SignalFrame,
    pub wrench: Wrench,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataFile {
    pub meta: FileMeta,
    pub frames: Vec<LabeledFrame>,
}

impl DataFile {
    pub fn id(&self) -> &str {
        &self.meta.schedule.id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<DataFile>,
    pub test: Vec<DataFile>,
}

/// Everything needed to turn displacements into frames.
#[derive(Debug, Clone)]
pub struct SensorTwin {
    pub layout: SensorLayout,
    pub medium: MediumModel,
    pub noise: NoiseModel,
    pub compliance: ComplianceModel,
    pub finger: FingerConfig,
}

impl SensorTwin {
    pub fn new(
        geometry: &LayoutConfig,
        medium: MediumModel,
        noise: NoiseModel,
        compliance: ComplianceModel,
        finger: FingerConfig,
    ) -> Result<Self, String> {
        let layout = build_layout(geometry).map_err(|e| e.to_string())?;
        medium.validate().map_err(|e| e.to_string())?;
        noise.validate().map_err(|e| e.to_string())?;
        compliance.validate().map_err(|e| e.to_string())?;
        finger.validate().map_err(|e| e.to_string())?;
        Ok(Self {
            layout,
            medium,
            noise,
            compliance,
            finger,
        })
    }

    pub fn default_twin() -> Self {
        Self::new(
            &LayoutConfig::default(),
            MediumModel::default(),
            NoiseModel::default(),
            ComplianceModel::default(),
            FingerConfig::default(),
        )
        .expect("default twin is valid")
    }

    /// Translation beyond which the plates would collide, mm.
    pub fn max_translation(&self) -> f64 {
        0.9 * self.layout.plate_gap
    }
}

/// SplitMix64 finalizer over `master` and a string tag; used to derive
/// independent per-file streams.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn draw_force<R: Rng + ?Sized>(group: ForceGroup, rng: &mut R) -> f64 {
    let (lo, hi) = group.range();
    rng.random_range(lo..hi)
}

/// Places the contacts of one file: holds in `[hold_min, hold_max]`,
/// at least `min_gap` of rest before each contact, slack spread randomly.
fn place_contacts<R: Rng + ?Sized>(
    p: &ProtocolConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>, DatagenError> {
    let holds: Vec<f64> = (0..n).map(|_| rng.random_range(p.hold_min..=p.hold_max)).collect();
    let required = p.required_time(&holds);
    let slack = p.file_duration - required;
    if slack < 0.0 {
        return Err(DatagenError::InfeasibleSchedule(format!(
            "holds {holds:?} need {required:.2} s in a {} s file",
            p.file_duration
        )));
    }
    // n + 1 random shares of the slack: before each contact and trailing.
    let mut cuts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=slack)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut t = 0.0;
    let mut prev_cut = 0.0;
    let mut out = Vec::with_capacity(n);
    for (hold, cut) in holds.into_iter().zip(cuts) {
        t += p.min_gap + (cut - prev_cut);
        prev_cut = cut;
        out.push((t, hold));
        t += hold + 2.0 * p.ramp;
    }
    Ok(out)
}

fn build_files<R: Rng + ?Sized>(
    p: &ProtocolConfig,
    finger: &FingerConfig,
    split: Split,
    location: usize,
    plan: &[(ForceGroup, ContactHeight)],
    first_index: usize,
    rng: &mut R,
) -> Result<Vec<ScheduledFile>, DatagenError> {
    let azimuth = TAU * location as f64 / p.n_locations as f64;
    plan.chunks(p.contacts_per_file)
        .enumerate()
        .map(|(k, chunk)| {
            let timing = place_contacts(p, chunk.len(), rng)?;
            let contacts = chunk
                .iter()
                .zip(timing)
                .map(|(&(group, height), (t_start, hold))| ScheduledContact {
                    event: ContactEvent {
                        azimuth,
                        height: finger.height(height),
                        peak_force: draw_force(group, rng),
                        t_start,
                        ramp: p.ramp,
                        hold,
                        finger_radius: finger.radius,
                    },
                    group,
                    height,
                })
                .collect();
            Ok(ScheduledFile {
                id: format!("{}_{:03}", split.as_str(), first_index + k),
                split,
                location,
                azimuth,
                contacts,
            })
        })
        .collect()
}

/// Contact schedule for one split, grouped into files.
///
/// Training: per location, `group_quota` contacts of each force group in
/// order, then the remainder with random groups; every file of three cycles
/// through top/middle/bottom heights. A `high_force_fraction` of the random
/// remainder is redrawn in the extended range. Test: one contact per group
/// (times `test_contacts_per_location_per_group`) per location, heights
/// assigned by random permutation.
pub fn generate_schedule<R: Rng + ?Sized>(
    p: &ProtocolConfig,
    finger: &FingerConfig,
    split: Split,
    rng: &mut R,
) -> Result<Vec<ScheduledFile>, DatagenError> {
    p.validate()?;
    let mut plans: Vec<Vec<(ForceGroup, ContactHeight)>> = Vec::with_capacity(p.n_locations);
    match split {
        Split::Train => {
            let n_random = p.contacts_per_location - 3 * p.group_quota;
            let mut random_slots = Vec::new();
            for loc in 0..p.n_locations {
                let mut groups: Vec<ForceGroup> = ForceGroup::PROTOCOL
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, p.group_quota))
                    .collect();
                for _ in 0..n_random {
                    random_slots.push((loc, groups.len()));
                    groups.push(*ForceGroup::PROTOCOL.choose(rng).expect("non-empty"));
                }
                let plan = groups
                    .into_iter()
                    .enumerate()
                    .map(|(i, g)| (g, ContactHeight::ALL[(i % p.contacts_per_file) % 3]))
                    .collect();
                plans.push(plan);
            }
            let total = p.n_locations * p.contacts_per_location;
            let n_high = ((p.high_force_fraction * total as f64).round() as usize).min(random_slots.len());
            for &(loc, idx) in random_slots.choose_multiple(rng, n_high) {
                plans[loc][idx].0 = ForceGroup::Extended;
            }
        }
        Split::Test => {
            for _ in 0..p.n_locations {
                let mut groups: Vec<ForceGroup> = ForceGroup::PROTOCOL
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, p.test_contacts_per_location_per_group))
                    .collect();
                groups.shuffle(rng);
                let mut plan = Vec::with_capacity(groups.len());
                for chunk in groups.chunks(p.contacts_per_file) {
                    let mut heights = ContactHeight::ALL.to_vec();
                    heights.shuffle(rng);
                    plan.extend(chunk.iter().zip(heights.iter().cycle()).map(|(&g, &h)| (g, h)));
                }
                plans.push(plan);
            }
        }
    }
    let mut files = Vec::new();
    for (loc, plan) in plans.iter().enumerate() {
        let first = files.len();
        files.extend(build_files(p, finger, split, loc, plan, first, rng)?);
    }
    Ok(files)
}

/// Runs the twin over one scheduled file at `sample_rate`.
pub fn synthesize_file(
    schedule: &ScheduledFile,
    p: &ProtocolConfig,
    twin: &SensorTwin,
    seed: u64,
) -> Result<DataFile, DatagenError> {
    let n = p.frames_per_file();
    let dt = 1.0 / p.sample_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(n);
    let mut state = None;
    let id = &schedule.id;
    for i in 0..n {
        let t = i as f64 / p.sample_rate;
        let wrench: Wrench = schedule.contacts.iter().map(|c| c.event.wrench_at(t)).sum();
        let fmag = wrench.force.norm();
        if fmag > twin.finger.overload_force {
            return Err(DatagenError::Mechanics {
                file: id.clone(),
                source: MechanicsError::Overload(format!(
                    "force {fmag:.2} N exceeds {} N at t = {t} s",
                    twin.finger.overload_force
                )),
            });
        }
        let target = twin
            .compliance
            .displacement_from_wrench(&wrench, twin.max_translation())
            .map_err(|source| DatagenError::Mechanics {
                file: id.clone(),
                source,
            })?;
        let disp = match state {
            None => target,
            Some(prev) => twin.compliance.relax_step(&prev, &target, dt),
        };
        state = Some(disp);
        let frame = frame_signals(&twin.layout, &disp, &twin.medium, &twin.noise, &mut rng, t)
            .map_err(|source| DatagenError::Optics {
                file: id.clone(),
                source,
            })?;
        frames.push(LabeledFrame { frame, wrench });
    }
    Ok(DataFile {
        meta: FileMeta {
            schedule: schedule.clone(),
            seed,
            sample_rate: p.sample_rate,
            frames: n,
        },
        frames,
    })
}

fn contact_key(c: &ContactEvent) -> [u64; 4] {
    [
        c.azimuth.to_bits(),
        c.height.to_bits(),
        c.peak_force.to_bits(),
        c.t_start.to_bits(),
    ]
}

/// Both schedules and all files, with streams derived from `seed`.
pub fn generate_schedules(
    p: &ProtocolConfig,
    finger: &FingerConfig,
    seed: u64,
) -> Result<(Vec<ScheduledFile>, Vec<ScheduledFile>), DatagenError> {
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "schedule/train"));
    let mut test_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "schedule/test"));
    let train = generate_schedule(p, finger, Split::Train, &mut train_rng)?;
    let test = generate_schedule(p, finger, Split::Test, &mut test_rng)?;
    let seen: std::collections::HashSet<[u64; 4]> = train
        .iter()
        .flat_map(|f| f.contacts.iter().map(|c| contact_key(&c.event)))
        .collect();
    if let Some(c) = test
        .iter()
        .flat_map(|f| &f.contacts)
        .find(|c| seen.contains(&contact_key(&c.event)))
    {
        return Err(DatagenError::SharedContact(format!("{:?}", c.event)));
    }
    Ok((train, test))
}

pub fn generate_dataset(
    p: &ProtocolConfig,
    twin: &SensorTwin,
    seed: u64,
) -> Result<Dataset, DatagenError> {
    let (train, test) = generate_schedules(p, &twin.finger, seed)?;
    let synth = |files: &[ScheduledFile]| -> Result<Vec<DataFile>, DatagenError> {
        files
            .par_iter()
            .map(|f| synthesize_file(f, p, twin, derive_seed(seed, &format!("file/{}", f.id))))
            .collect()
    };
    Ok(Dataset {
        train: synth(&train)?,
        test: synth(&test)?,
    })
}

pub fn csv_header() -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..NUM_RECEIVERS).map(|i| format!("s{i:02}")));
    cols.extend(["fx", "fy", "fz", "tx", "ty", "tz"].map(String::from));
    cols.join(",")
}

/// One row per frame: `t,s00..s23,fx,fy,fz,tx,ty,tz`.
pub fn write_frames_csv<W: Write>(mut w: W, frames: &[LabeledFrame]) -> std::io::Result<()> {
    let mut line = String::with_capacity(256);
    writeln!(w, "{}", csv_header())?;
    for lf in frames {
        use std::fmt::Write as _;
        line.clear();
        let _ = write!(line, "{}", lf.frame.t);
        for s in lf.frame.signals {
            let _ = write!(line, ",{s}");
        }
        for v in lf.wrench.as_array() {
            let _ = write!(line, ",{v}");
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Parses frames written by [`write_frames_csv`]; rows are numbered from 1
/// after the header in error messages.
pub fn read_frames_csv<R: Read>(r: R, path: &Path) -> Result<Vec<LabeledFrame>, DatagenError> {
    let row_err = |row: usize, msg: String| DatagenError::CsvRow {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers().map_err(|e| row_err(0, e.to_string()))?;
    let expected = csv_header();
    if header.iter().collect::<Vec<_>>().join(",") != expected {
        return Err(row_err(0, "unexpected header".into()));
    }
    let mut frames = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| row_err(row, e.to_string()))?;
        if rec.len() != 1 + NUM_RECEIVERS + 6 {
            return Err(row_err(row, format!("expected 31 fields, got {}", rec.len())));
        }
        let num = |j: usize| -> Result<f64, DatagenError> {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| row_err(row, format!("column {j}: bad number {:?}", &rec[j])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(row_err(row, format!("column {j}: non-finite value")))
            }
        };
        let t = num(0)?;
        if t <= last_t {
            return Err(row_err(row, "timestamps must strictly increase".into()));
        }
        last_t = t;
        let mut signals = [0u16; NUM_RECEIVERS];
        for (k, s) in signals.iter_mut().enumerate() {
            *s = rec[1 + k]
                .trim()
                .parse()
                .map_err(|_| row_err(row, format!("column {}: bad ADC count {:?}", 1 + k, &rec[1 + k])))?;
        }
        let mut w = [0.0; 6];
        for (k, v) in w.iter_mut().enumerate() {
            *v = num(1 + NUM_RECEIVERS + k)?;
        }
        frames.push(LabeledFrame {
            frame: SignalFrame { t, signals },
            wrench: Wrench::from_array(w),
        });
    }
    Ok(frames)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `<dir>/<id>.csv` and `<dir>/<id>.json`; returns the CSV path.
pub fn save_data_file(dir: &Path, file: &DataFile) -> Result<PathBuf, DatagenError> {
    let csv_path = dir.join(format!("{}.csv", file.id()));
    let meta_path = dir.join(format!("{}.json", file.id()));
    let mut buf = Vec::with_capacity(file.frames.len() * 160);
    write_frames_csv(&mut buf, &file.frames).map_err(io_err(&csv_path))?;
    std::fs::write(&csv_path, buf).map_err(io_err(&csv_path))?;
    let meta = serde_json::to_string_pretty(&file.meta).expect("metadata serializes");
    std::fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;
    Ok(csv_path)
}

pub fn load_data_file(dir: &Path, id: &str) -> Result<DataFile, DatagenError> {
    let csv_path = dir.join(format!("{id}.csv"));
    let meta_path = dir.join(format!("{id}.json"));
    let meta_text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: FileMeta = serde_json::from_str(&meta_text).map_err(|e| DatagenError::CsvRow {
        path: meta_path.clone(),
        row: e.line(),
        msg: e.to_string(),
    })?;
    let reader = std::fs::File::open(&csv_path).map_err(io_err(&csv_path))?;
    let frames = read_frames_csv(std::io::BufReader::new(reader), &csv_path)?;
    Ok(DataFile { meta, frames })
}
