//! Recordings, windows and software reference features.
//!
//! A [`Dataset`] holds per-subject multi-channel recordings with per-sample
//! labels. [`make_windows`] cuts it into non-overlapping windows, a
//! [`Normalizer`] fitted on training subjects maps every channel into
//! `[0, 1]`, and [`reference_features`] computes the ideal Min/Max/Mean/Sum
//! statistics the analog extractors approximate.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Statistic computed by one extractor circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureKind {
    Min,
    Max,
    Mean,
    Sum,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::Min,
        FeatureKind::Max,
        FeatureKind::Mean,
        FeatureKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Min => "Min",
            FeatureKind::Max => "Max",
            FeatureKind::Mean => "Mean",
            FeatureKind::Sum => "Sum",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(FeatureKind::Min),
            "max" => Ok(FeatureKind::Max),
            "mean" => Ok(FeatureKind::Mean),
            "sum" => Ok(FeatureKind::Sum),
            other => Err(Error::Config(format!("unknown feature kind `{other}`"))),
        }
    }
}

/// One candidate feature: a statistic on a channel.
///
/// The derived ordering (channel first, then kind) is the canonical feature
/// order; gate index `i` always refers to the `i`-th id in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureId {
    pub channel: usize,
    pub kind: FeatureKind,
}

impl FeatureId {
    pub fn new(channel: usize, kind: FeatureKind) -> Self {
        FeatureId { channel, kind }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}:{}", self.channel, self.kind)
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    /// Parses the `ch<N>:<Kind>` form produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad feature id `{s}` (expected ch<N>:<Kind>)"));
        let (ch, kind) = s.split_once(':').ok_or_else(bad)?;
        let channel = ch
            .trim()
            .strip_prefix("ch")
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        Ok(FeatureId {
            channel,
            kind: kind.trim().parse()?,
        })
    }
}

/// All `(channel, kind)` pairs in canonical order.
pub fn candidate_features(num_channels: usize, kinds: &[FeatureKind]) -> Vec<FeatureId> {
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    (0..num_channels)
        .flat_map(|c| kinds.iter().map(move |&k| FeatureId::new(c, k)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Channel-major samples; every channel has the same length.
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    channels: Vec<String>,
    sample_rate_hz: f64,
    num_classes: usize,
    subjects: Vec<Subject>,
}

impl Dataset {
    pub fn new(
        channels: Vec<String>,
        sample_rate_hz: f64,
        num_classes: usize,
        subjects: Vec<Subject>,
    ) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!(
                "sample_rate_hz must be positive, got {sample_rate_hz}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if channels.is_empty() {
            return Err(Error::Config("dataset has no channels".into()));
        }
        for s in &subjects {
            if s.samples.len() != channels.len() {
                return Err(Error::Format(format!(
                    "subject {} has {} channels, expected {}",
                    s.id,
                    s.samples.len(),
                    channels.len()
                )));
            }
            for (c, ch) in s.samples.iter().enumerate() {
                if ch.len() != s.labels.len() {
                    return Err(Error::Format(format!(
                        "subject {}: channel {} has {} samples but {} labels",
                        s.id,
                        channels[c],
                        ch.len(),
                        s.labels.len()
                    )));
                }
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Format(format!(
                    "subject {}: label {bad} out of range for {num_classes} classes",
                    s.id
                )));
            }
        }
        Ok(Dataset {
            channels,
            sample_rate_hz,
            num_classes,
            subjects,
        })
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub subject_column: String,
    pub label_column: String,
    /// Channel columns in the order they should appear in the dataset.
    /// `None` takes every other column in header order.
    pub channels: Option<Vec<String>>,
    pub sample_rate_hz: f64,
    /// Number of classes; inferred as `max(label) + 1` (at least 2) if unset.
    pub num_classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            subject_column: "subject_id".into(),
            label_column: "label".into(),
            channels: None,
            sample_rate_hz: 4.0,
            num_classes: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Parses `subject_id,<ch1>,...,<chN>,label` rows, one sample per row.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format(format!("cannot read header: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    };
    let subject_idx = find(&schema.subject_column)?;
    let label_idx = find(&schema.label_column)?;
    let channel_names: Vec<String> = match &schema.channels {
        Some(chs) => chs.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != subject_idx && *i != label_idx)
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    if channel_names.is_empty() {
        return Err(Error::Schema("<channel>".into()));
    }
    let channel_idx = channel_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut by_subject: BTreeMap<String, Subject> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        let field = |idx: usize| rec.get(idx).unwrap_or("");
        let sid = field(subject_idx).to_string();
        if sid.is_empty() {
            return Err(Error::Parse {
                row,
                msg: "empty subject_id".into(),
            });
        }
        let label: usize = field(label_idx).parse().map_err(|_| Error::Parse {
            row,
            msg: format!("label `{}` is not a class index", field(label_idx)),
        })?;
        let subject = by_subject.entry(sid.clone()).or_insert_with(|| {
            order.push(sid.clone());
            Subject {
                id: sid.clone(),
                samples: vec![Vec::new(); channel_idx.len()],
                labels: Vec::new(),
            }
        });
        for (c, &idx) in channel_idx.iter().enumerate() {
            let raw = field(idx);
            if raw.is_empty() {
                // A missing cell leaves this channel short; caught below.
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                msg: format!("non-numeric sample `{raw}` in column {}", channel_names[c]),
            })?;
            subject.samples[c].push(v);
        }
        subject.labels.push(label);
    }

    let subjects: Vec<Subject> = order
        .iter()
        .map(|id| by_subject.remove(id).expect("subject recorded in order"))
        .collect();
    for s in &subjects {
        let lens: Vec<usize> = s.samples.iter().map(Vec::len).collect();
        if lens.iter().any(|&l| l != s.labels.len()) {
            return Err(Error::Format(format!(
                "subject {}: ragged channel lengths {:?} (rows: {})",
                s.id,
                lens,
                s.labels.len()
            )));
        }
    }
    let inferred = subjects
        .iter()
        .flat_map(|s| s.labels.iter().copied())
        .max()
        .map_or(2, |m| (m + 1).max(2));
    let num_classes = schema.num_classes.unwrap_or(inferred);
    Dataset::new(channel_names, schema.sample_rate_hz, num_classes, subjects)
}

/// Writes the dataset in the same layout [`read_csv`] accepts.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Format(format!("csv write failed: {e}"));
    let mut header = vec!["subject_id".to_string()];
    header.extend(dataset.channels.iter().cloned());
    header.push("label".into());
    w.write_record(&header).map_err(to_err)?;
    for s in &dataset.subjects {
        for t in 0..s.len() {
            let mut row = Vec::with_capacity(dataset.num_channels() + 2);
            row.push(s.id.clone());
            for ch in &s.samples {
                row.push(format!("{}", ch[t]));
            }
            row.push(s.labels[t].to_string());
            w.write_record(&row).map_err(to_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Parameters of the synthetic stand-in for real physiological recordings.
///
/// Every segment of `window_s` seconds carries one label. Each informative
/// feature draws a latent level `l ~ U(0, 1)` per segment and shapes its
/// channel so that the feature's window statistic is an affine function of
/// `l` plus bounded noise. The label is the quantile bin of the mean latent
/// level, so all informative features are needed for full accuracy. Other
/// channels carry label-independent segments of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_subjects: usize,
    pub num_channels: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub num_classes: usize,
    pub informative_features: Vec<FeatureId>,
    /// Segment length; labels are constant within a segment.
    pub window_s: f64,
    /// Half-width of the uniform per-sample noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_subjects: 10,
            num_channels: 3,
            sample_rate_hz: 8.0,
            duration_s: 240.0,
            num_classes: 2,
            informative_features: vec![
                FeatureId::new(0, FeatureKind::Max),
                FeatureId::new(1, FeatureKind::Min),
            ],
            window_s: 1.0,
            noise: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.informative_features.is_empty() {
            return Err(Error::Config("synthetic spec needs an informative feature".into()));
        }
        if let Some(f) = self
            .informative_features
            .iter()
            .find(|f| f.channel >= self.num_channels)
        {
            return Err(Error::Config(format!(
                "informative feature {f} references channel {} but only {} channels exist",
                f.channel, self.num_channels
            )));
        }
        if self.num_subjects == 0 || self.num_channels == 0 {
            return Err(Error::Config("synthetic spec needs subjects and channels".into()));
        }
        if !(self.window_s > 0.0 && self.sample_rate_hz > 0.0 && self.duration_s > 0.0) {
            return Err(Error::Config(
                "window_s, sample_rate_hz and duration_s must be positive".into(),
            ));
        }
        if (self.window_s * self.sample_rate_hz).round() < 1.0 {
            return Err(Error::Config("synthetic segment shorter than one sample".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic spec needs at least 2 classes".into()));
        }
        if !(0.0..0.1).contains(&self.noise) {
            return Err(Error::Config("synthetic noise must lie in [0, 0.1)".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let seg_len = (spec.window_s * spec.sample_rate_hz).round() as usize;
    let total = (spec.duration_s * spec.sample_rate_hz).round() as usize;
    let n_segments = total.div_ceil(seg_len);
    let n_informative = spec.informative_features.len();

    // Per-channel raw units, so normalization has real work to do.
    let units: Vec<(f64, f64)> = (0..spec.num_channels)
        .map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(0.5..3.0)))
        .collect();

    let mut subjects = Vec::with_capacity(spec.num_subjects);
    for s in 0..spec.num_subjects {
        let offsets: Vec<f64> = (0..spec.num_channels)
            .map(|_| rng.gen_range(-0.02..0.02))
            .collect();
        let mut samples = vec![Vec::with_capacity(total); spec.num_channels];
        let mut labels = Vec::with_capacity(total);
        for _ in 0..n_segments {
            let latent: Vec<f64> = (0..n_informative).map(|_| rng.gen::<f64>()).collect();
            let score = latent.iter().sum::<f64>() / n_informative as f64;
            let label = class_of_score(score, n_informative, spec.num_classes);
            let take = seg_len.min(total - labels.len());
            for (c, ch_samples) in samples.iter_mut().enumerate() {
                let level = |kind: FeatureKind| {
                    spec.informative_features
                        .iter()
                        .position(|f| f.channel == c && f.kind == kind)
                        .map(|i| latent[i])
                };
                let mean_level = level(FeatureKind::Mean).or(level(FeatureKind::Sum));
                let informative_channel =
                    spec.informative_features.iter().any(|f| f.channel == c);
                let center = match mean_level {
                    Some(l) => 0.25 + 0.5 * l,
                    None if informative_channel => rng.gen_range(0.45..0.55),
                    None => rng.gen_range(0.25..0.75),
                };
                let peak = level(FeatureKind::Max).unwrap_or_else(|| rng.gen());
                let valley = level(FeatureKind::Min).unwrap_or_else(|| rng.gen());
                let mut seg: Vec<f64> = (0..seg_len)
                    .map(|_| center + rng.gen_range(-spec.noise..=spec.noise))
                    .collect();
                if seg_len >= 2 {
                    let mut idx: Vec<usize> = (0..seg_len).collect();
                    idx.shuffle(&mut rng);
                    seg[idx[0]] = center + 0.1 + 0.4 * peak;
                    seg[idx[1]] = center - 0.1 - 0.4 * valley;
                } else {
                    seg[0] = center + 0.4 * (peak - valley);
                }
                let (off, scale) = units[c];
                ch_samples.extend(
                    seg.iter()
                        .take(take)
                        .map(|v| off + scale * (v + offsets[c])),
                );
            }
            labels.extend(std::iter::repeat_n(label, take));
        }
        subjects.push(Subject {
            id: format!("s{s:02}"),
            samples,
            labels,
        });
    }
    let channels = (0..spec.num_channels).map(|c| format!("ch{c}")).collect();
    Dataset::new(channels, spec.sample_rate_hz, spec.num_classes, subjects)
}

/// Bins the mean of `m` uniform latents into `classes` near-equiprobable
/// classes. Thresholds come from the Irwin-Hall CDF of the mean.
fn class_of_score(score: f64, m: usize, classes: usize) -> usize {
    let p = mean_of_uniforms_cdf(score, m);
    ((p * classes as f64).floor() as usize).min(classes - 1)
}

fn mean_of_uniforms_cdf(mean: f64, m: usize) -> f64 {
    let x = (mean * m as f64).clamp(0.0, m as f64);
    let mut acc = 0.0;
    let mut binom = 1.0;
    let mut fact = 1.0;
    for i in 1..=m {
        fact *= i as f64;
    }
    for k in 0..=m {
        if (k as f64) > x {
            break;
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * binom * (x - k as f64).powi(m as i32);
        binom = binom * (m - k) as f64 / (k + 1) as f64;
    }
    (acc / fact).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub subject_id: String,
    /// `num_channels x samples_per_window`.
    pub samples: Vec<Vec<f64>>,
    pub label: usize,
    pub t_step_s: f64,
}

impl Window {
    pub fn num_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * self.t_step_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSet {
    pub channels: Vec<String>,
    pub num_classes: usize,
    pub window_s: f64,
    pub samples_per_window: usize,
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Windows belonging to the given subjects, original order preserved.
    pub fn for_subjects(&self, ids: &[String]) -> WindowSet {
        WindowSet {
            windows: self
                .windows
                .iter()
                .filter(|w| ids.contains(&w.subject_id))
                .cloned()
                .collect(),
            ..self.header()
        }
    }

    fn header(&self) -> WindowSet {
        WindowSet {
            channels: self.channels.clone(),
            num_classes: self.num_classes,
            window_s: self.window_s,
            samples_per_window: self.samples_per_window,
            windows: Vec::new(),
        }
    }
}

pub fn samples_per_window(window_s: f64, sample_rate_hz: f64) -> Result<usize> {
    if !(window_s > 0.0) {
        return Err(Error::Config(format!("window_s must be positive, got {window_s}")));
    }
    let n = (window_s * sample_rate_hz).round();
    if n < 1.0 {
        return Err(Error::Config(format!(
            "window of {window_s} s at {sample_rate_hz} Hz holds no samples"
        )));
    }
    Ok(n as usize)
}

/// Cuts each subject into non-overlapping windows, dropping any trailing
/// partial window. The window label is the majority sample label, ties going
/// to the lowest class index.
pub fn make_windows(dataset: &Dataset, window_s: f64) -> Result<WindowSet> {
    let n = samples_per_window(window_s, dataset.sample_rate_hz)?;
    let t_step_s = 1.0 / dataset.sample_rate_hz;
    let mut windows = Vec::new();
    for s in &dataset.subjects {
        for start in (0..s.len() / n).map(|w| w * n) {
            windows.push(Window {
                subject_id: s.id.clone(),
                samples: s
                    .samples
                    .iter()
                    .map(|ch| ch[start..start + n].to_vec())
                    .collect(),
                label: majority_label(&s.labels[start..start + n], dataset.num_classes),
                t_step_s,
            });
        }
    }
    Ok(WindowSet {
        channels: dataset.channels.clone(),
        num_classes: dataset.num_classes,
        window_s,
        samples_per_window: n,
        windows,
    })
}

pub fn majority_label(labels: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes.max(1)];
    for &l in labels {
        if l >= counts.len() {
            counts.resize(l + 1, 0);
        }
        counts[l] += 1;
    }
    // max_by_key keeps the last maximum; scan manually for the first.
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel min/max scaling into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn fit_normalizer(train: &WindowSet) -> Result<Normalizer> {
    let first = train
        .windows
        .first()
        .ok_or_else(|| Error::Usage("cannot fit a normalizer on an empty window set".into()))?;
    let c = first.num_channels();
    let mut min = vec![f64::INFINITY; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for w in &train.windows {
        for (ch, xs) in w.samples.iter().enumerate() {
            for &x in xs {
                min[ch] = min[ch].min(x);
                max[ch] = max[ch].max(x);
            }
        }
    }
    Ok(Normalizer { min, max })
}

impl Normalizer {
    pub fn value(&self, channel: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[channel], self.max[channel]);
        if hi > lo {
            ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }

    pub fn apply(&self, window: &Window) -> Window {
        Window {
            samples: window
                .samples
                .iter()
                .enumerate()
                .map(|(c, xs)| xs.iter().map(|&x| self.value(c, x)).collect())
                .collect(),
            ..window.clone()
        }
    }

    pub fn apply_set(&self, set: &WindowSet) -> WindowSet {
        WindowSet {
            windows: set.windows.iter().map(|w| self.apply(w)).collect(),
            ..set.header()
        }
    }
}

pub fn apply_normalizer(n: &Normalizer, w: &Window) -> Window {
    n.apply(w)
}

// ---------------------------------------------------------------------------
// Reference features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub id: FeatureId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector {
    pub entries: Vec<FeatureValue>,
}

impl FeatureVector {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn get(&self, id: FeatureId) -> Option<f64> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.value)
    }
}

/// Ideal statistic of one channel's samples.
pub fn statistic(samples: &[f64], kind: FeatureKind) -> f64 {
    match kind {
        FeatureKind::Min => samples.iter().copied().fold(f64::INFINITY, f64::min),
        FeatureKind::Max => samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        FeatureKind::Mean => samples.iter().sum::<f64>() / samples.len() as f64,
        FeatureKind::Sum => samples.iter().sum(),
    }
}

/// Software Min/Max/Mean/Sum for every channel and requested kind.
pub fn reference_features(window: &Window, kinds: &[FeatureKind]) -> FeatureVector {
    let ids = candidate_features(window.num_channels(), kinds);
    reference_features_for(window, &ids)
}

/// Reference features for an explicit selection, emitted in canonical order.
pub fn reference_features_for(window: &Window, selection: &[FeatureId]) -> FeatureVector {
    let mut ids = selection.to_vec();
    ids.sort();
    ids.dedup();
    FeatureVector {
        entries: ids
            .into_iter()
            .map(|id| FeatureValue {
                id,
                value: statistic(&window.samples[id.channel], id.kind),
            })
            .collect(),
    }
}

/// Scales a feature into the classifier's `[0, 1]` input range. Sum spans
/// `[0, n]` on normalized samples and is divided by the window length; the
/// others already lie in `[0, 1]`.
pub fn model_input(kind: FeatureKind, value: f64, samples_per_window: usize) -> f64 {
    match kind {
        FeatureKind::Sum => value / samples_per_window as f64,
        _ => value,
    }
}

// ---------------------------------------------------------------------------
// Subject-level folds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
}

pub fn kfold_split(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    kfold_split_ids(&dataset.subject_ids(), k, seed)
}

/// Shuffles subjects with `seed` and deals them into `k` near-equal test
/// groups; each fold trains on every subject outside its test group.
pub fn kfold_split_ids(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!(
            "{k} folds need at least {k} subjects, got {}",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::seeded(seed));
    let base = shuffled.len() / k;
    let extra = shuffled.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test: Vec<String> = shuffled[start..start + size].to_vec();
        let train = shuffled
            .iter()
            .filter(|id| !test.contains(id))
            .cloned()
            .collect();
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(FoldPlan { k, folds })
}

/// Carves a subject-disjoint validation group (`fraction` of the subjects,
/// at least one when two or more are available) out of a training list.
pub fn split_validation(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    if ids.len() < 2 || fraction <= 0.0 {
        return (ids.to_vec(), Vec::new());
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::seeded(seed));
    let n_val = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let val = shuffled.split_off(ids.len() - n_val);
    (shuffled, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(samples: Vec<Vec<f64>>) -> Window {
        Window {
            subject_id: "s".into(),
            samples,
            label: 0,
            t_step_s: 0.25,
        }
    }

    fn csv_dataset(text: &str) -> Result<Dataset> {
        read_csv(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn csv_two_subjects_three_channels() {
        let mut text = String::from("subject_id,a,b,c,label\n");
        for s in ["s1", "s2"] {
            for t in 0..8 {
                text.push_str(&format!("{s},{t},{},{},{}\n", t * 2, t * 3, t % 2));
            }
        }
        let ds = csv_dataset(&text).unwrap();
        assert_eq!(ds.subjects().len(), 2);
        assert_eq!(ds.channels(), &["a", "b", "c"]);
        assert!(ds.subjects().iter().all(|s| s.samples.iter().all(|c| c.len() == 8)));
        assert_eq!(ds.subjects()[1].samples[2][3], 9.0);
    }

    #[test]
    fn csv_missing_label_column() {
        let err = csv_dataset("subject_id,a,b\ns1,1,2\n").unwrap_err();
        assert!(matches!(&err, Error::Schema(c) if c == "label"), "{err}");
    }

    #[test]
    fn csv_non_numeric_sample_reports_row() {
        let err = csv_dataset("subject_id,a,b,label\ns1,0.1,0.2,0\ns1, 0.5, abc, 0\n").unwrap_err();
        match err {
            Error::Parse { row, msg } => {
                assert_eq!(row, 2);
                assert!(msg.contains("abc"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn csv_ragged_channels() {
        let err = csv_dataset("subject_id,a,b,label\ns1,1,2,0\ns1,1,,0\n").unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn csv_write_then_read() {
        let spec = SyntheticSpec {
            num_subjects: 2,
            duration_s: 5.0,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, 3).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let schema = CsvSchema {
            sample_rate_hz: spec.sample_rate_hz,
            num_classes: Some(2),
            ..CsvSchema::default()
        };
        let back = read_csv(buf.as_slice(), &schema).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(
            generate_synthetic(&spec, 11).unwrap(),
            generate_synthetic(&spec, 11).unwrap()
        );
        assert_ne!(
            generate_synthetic(&spec, 11).unwrap(),
            generate_synthetic(&spec, 12).unwrap()
        );
    }

    #[test]
    fn synthetic_rejects_unknown_channel() {
        let spec = SyntheticSpec {
            num_channels: 2,
            informative_features: vec![FeatureId::new(2, FeatureKind::Mean)],
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_single_feature_threshold_oracle() {
        let spec = SyntheticSpec {
            informative_features: vec![FeatureId::new(0, FeatureKind::Mean)],
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, 5).unwrap();
        let ws = make_windows(&ds, spec.window_s).unwrap();
        let norm = fit_normalizer(&ws).unwrap();
        let mut pts: Vec<(f64, usize)> = ws
            .windows
            .iter()
            .map(|w| (statistic(&norm.apply(w).samples[0], FeatureKind::Mean), w.label))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Best single threshold over every cut point, either polarity.
        let total = pts.len();
        let ones = pts.iter().filter(|p| p.1 == 1).count();
        let mut best = 0usize;
        let mut ones_below = 0usize;
        for cut in 0..=total {
            if cut > 0 && pts[cut - 1].1 == 1 {
                ones_below += 1;
            }
            let zeros_below = cut - ones_below;
            let above_one = ones - ones_below;
            let correct = zeros_below + above_one;
            best = best.max(correct).max(total - correct);
        }
        let acc = best as f64 / total as f64;
        assert!(acc > 0.9, "threshold oracle accuracy {acc}");
    }

    #[test]
    fn windows_count_and_truncation() {
        let make = |n: usize| {
            Dataset::new(
                vec!["x".into()],
                4.0,
                2,
                vec![Subject {
                    id: "a".into(),
                    samples: vec![(0..n).map(|i| i as f64).collect()],
                    labels: vec![0; n],
                }],
            )
            .unwrap()
        };
        let ws = make_windows(&make(40), 1.0).unwrap();
        assert_eq!(ws.len(), 10);
        assert!(ws.windows.iter().all(|w| w.len() == 4));
        assert_eq!(make_windows(&make(42), 1.0).unwrap().len(), 10);
    }

    #[test]
    fn window_label_tie_goes_low() {
        assert_eq!(majority_label(&[0, 0, 1, 1], 2), 0);
        assert_eq!(majority_label(&[2, 1, 1, 2, 2], 3), 2);
    }

    #[test]
    fn window_rejects_sub_sample_duration() {
        let ds = generate_synthetic(&SyntheticSpec::default(), 0).unwrap();
        assert!(make_windows(&ds, 0.01).is_err());
        assert!(make_windows(&ds, 0.0).is_err());
    }

    #[test]
    fn normalizer_rules() {
        let train = WindowSet {
            channels: vec!["a".into(), "b".into()],
            num_classes: 2,
            window_s: 1.0,
            samples_per_window: 2,
            windows: vec![window(vec![vec![2.0, 4.0], vec![7.0, 7.0]])],
        };
        let n = fit_normalizer(&train).unwrap();
        assert_eq!(n.value(0, 3.0), 0.5);
        assert_eq!(n.value(0, 5.0), 1.0);
        assert_eq!(n.value(0, 1.0), 0.0);
        assert_eq!(n.value(1, 7.0), 0.5);
        assert_eq!(n.value(1, -100.0), 0.5);
    }

    #[test]
    fn reference_feature_examples() {
        let fv = reference_features(&window(vec![vec![0.2, 0.8, 0.5, 0.5]]), &FeatureKind::ALL);
        assert_eq!(fv.values(), vec![0.2, 0.8, 0.5, 2.0]);
        let c = 0.3;
        let fv = reference_features(&window(vec![vec![c; 4]]), &FeatureKind::ALL);
        assert_eq!(fv.values()[..3], [c, c, c]);
        assert!((fv.values()[3] - 4.0 * c).abs() < 1e-15);
        let fv = reference_features(&window(vec![vec![0.7]]), &FeatureKind::ALL);
        assert_eq!(fv.values(), vec![0.7; 4]);
    }

    #[test]
    fn kfold_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let plan = kfold_split_ids(&ids, 5, 1).unwrap();
        assert_eq!(plan.folds.len(), 5);
        assert!(plan.folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));
        let plan = kfold_split_ids(&ids[..5], 5, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 1));
        assert!(matches!(kfold_split_ids(&ids[..3], 5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn validation_split_is_disjoint() {
        let ids: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        let (fit, val) = split_validation(&ids, 0.2, 4);
        assert_eq!(val.len(), 2);
        assert_eq!(fit.len(), 6);
        assert!(val.iter().all(|v| !fit.contains(v)));
    }

    #[test]
    fn irwin_hall_cdf_symmetry() {
        for m in 1..5 {
            assert!((mean_of_uniforms_cdf(0.5, m) - 0.5).abs() < 1e-12);
            assert_eq!(mean_of_uniforms_cdf(1.0, m), 1.0);
            assert_eq!(mean_of_uniforms_cdf(0.0, m), 0.0);
        }
        assert!((mean_of_uniforms_cdf(0.25, 2) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn feature_id_text_form() {
        let id = FeatureId::new(3, FeatureKind::Sum);
        assert_eq!(id.to_string().parse::<FeatureId>().unwrap(), id);
        assert!("x3:Sum".parse::<FeatureId>().is_err());
    }

    proptest! {
        #[test]
        fn windowing_reproduces_truncated_series(
            n in 1usize..80, rate in 1u32..9, win in 1u32..4,
        ) {
            let rate = rate as f64;
            let xs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let ds = Dataset::new(
                vec!["x".into()], rate, 2,
                vec![Subject { id: "a".into(), samples: vec![xs.clone()], labels: vec![0; n] }],
            ).unwrap();
            let ws = make_windows(&ds, win as f64).unwrap();
            let joined: Vec<f64> = ws.windows.iter().flat_map(|w| w.samples[0].clone()).collect();
            let per = ws.samples_per_window;
            prop_assert_eq!(&joined[..], &xs[..(n / per) * per]);
        }

        #[test]
        fn folds_partition_subjects(n in 2usize..30, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let plan = kfold_split_ids(&ids, k, seed).unwrap();
            let mut all: Vec<String> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
            all.sort();
            let mut expect = ids.clone();
            expect.sort();
            prop_assert_eq!(all, expect);
            for f in &plan.folds {
                prop_assert!(f.test.iter().all(|t| !f.train.contains(t)));
                prop_assert_eq!(f.test.len() + f.train.len(), n);
            }
        }

        #[test]
        fn reference_features_permutation_invariant(
            mut xs in prop::collection::vec(0.0f64..1.0, 1..20), seed in any::<u64>(),
        ) {
            let a = reference_features(&window(vec![xs.clone()]), &FeatureKind::ALL);
            xs.shuffle(&mut rng::seeded(seed));
            let b = reference_features(&window(vec![xs]), &FeatureKind::ALL);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalized_values_in_unit_interval(
            train in prop::collection::vec(-5.0f64..5.0, 1..20), x in -20.0f64..20.0,
        ) {
            let set = WindowSet {
                channels: vec!["a".into()], num_classes: 2, window_s: 1.0,
                samples_per_window: train.len(), windows: vec![window(vec![train])],
            };
            let v = fit_normalizer(&set).unwrap().value(0, x);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
