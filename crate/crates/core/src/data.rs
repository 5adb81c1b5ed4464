//! Instances, panel datasets and their on-disk formats.
//!
//! Two formats are understood by [`load_dataset`], detected from the first
//! bytes of the file:
//!
//! * **MFNR** (canonical, little-endian): `b"MFNR"`, version `u32 = 1`,
//!   `n_instances u64`, `d_f u32`, `d_n u32`, `horizon u32`, then per instance
//!   `stock_id u32`, `timestamp i64`, `split u8` (0/1/2 = train/val/test),
//!   `target f32`, `d_f × f32` factors, `d_n × f32` embedding. A CRC-32 of
//!   everything before it closes the file.
//! * **CSV** with header `stock_id,timestamp,split,target,f0..f{d_f-1},n0..n{d_n-1}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MFNR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
const TRAILER_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported MFNR version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Corrupt { stored: u32, computed: u32 },
    #[error("non-finite {field} in instance {index}")]
    NonFinite { index: usize, field: &'static str },
    #[error("invalid split tag {0}")]
    SplitTag(u8),
    #[error("instance {index}: {field} has length {found}, dataset expects {expected}")]
    DimMismatch {
        index: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("duplicate instance for stock {stock_id} at timestamp {timestamp}")]
    Duplicate { stock_id: u32, timestamp: i64 },
    #[error("split tags are not contiguous in time: {later} timestamp {at} precedes a {earlier} timestamp")]
    SplitOrder { earlier: Split, later: Split, at: i64 },
    #[error("{0} partition is empty")]
    EmptyPartition(Split),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("expected {expected} predictions for the {split} split, got {found}")]
    PredictionCount {
        split: Split,
        expected: usize,
        found: usize,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            t => Err(DataError::SplitTag(t)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" | "0" => Ok(Split::Train),
            "val" | "1" => Ok(Split::Val),
            "test" | "2" => Ok(Split::Test),
            other => Err(DataError::Csv(format!("unknown split {other:?}"))),
        }
    }
}

/// One (stock, timestamp) sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub stock_id: u32,
    /// Epoch-day.
    pub timestamp: i64,
    pub split: Split,
    pub factors: Vec<f64>,
    pub news_embedding: Vec<f64>,
    /// Fractional forward return over the dataset horizon.
    pub target_return: f64,
}

/// Time-ordered panel of instances.
///
/// Construction sorts instances by `(timestamp, stock_id)` and rejects
/// duplicates, non-finite values, wrong vector lengths and splits that are
/// not contiguous in time.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    d_f: usize,
    d_n: usize,
    horizon: u32,
    instances: Vec<Instance>,
}

impl PanelDataset {
    pub fn new(d_f: usize, d_n: usize, horizon: u32, mut instances: Vec<Instance>) -> Result<Self> {
        if d_f == 0 || d_n == 0 || horizon == 0 {
            return Err(DataError::Invalid(format!(
                "dimensions must be positive (d_f={d_f}, d_n={d_n}, horizon={horizon})"
            )));
        }
        for (index, inst) in instances.iter().enumerate() {
            if inst.factors.len() != d_f {
                return Err(DataError::DimMismatch {
                    index,
                    field: "factors",
                    expected: d_f,
                    found: inst.factors.len(),
                });
            }
            if inst.news_embedding.len() != d_n {
                return Err(DataError::DimMismatch {
                    index,
                    field: "news_embedding",
                    expected: d_n,
                    found: inst.news_embedding.len(),
                });
            }
            if !inst.target_return.is_finite() {
                return Err(DataError::NonFinite { index, field: "target" });
            }
            if !inst.factors.iter().all(|v| v.is_finite()) {
                return Err(DataError::NonFinite { index, field: "factors" });
            }
            if !inst.news_embedding.iter().all(|v| v.is_finite()) {
                return Err(DataError::NonFinite { index, field: "news_embedding" });
            }
        }
        instances.sort_by_key(|i| (i.timestamp, i.stock_id));
        for pair in instances.windows(2) {
            if pair[0].timestamp == pair[1].timestamp && pair[0].stock_id == pair[1].stock_id {
                return Err(DataError::Duplicate {
                    stock_id: pair[0].stock_id,
                    timestamp: pair[0].timestamp,
                });
            }
        }
        check_split_order(&instances)?;
        Ok(Self { d_f, d_n, horizon, instances })
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    pub fn d_n(&self) -> usize {
        self.d_n
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instance> + '_ {
        self.instances.iter().filter(move |i| i.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Distinct timestamps in ascending order.
    pub fn timestamps(&self) -> Vec<i64> {
        let mut ts: Vec<i64> = self.instances.iter().map(|i| i.timestamp).collect();
        ts.dedup();
        ts
    }
}

fn check_split_order(instances: &[Instance]) -> Result<()> {
    let mut ranges: BTreeMap<Split, (i64, i64)> = BTreeMap::new();
    for inst in instances {
        let e = ranges.entry(inst.split).or_insert((inst.timestamp, inst.timestamp));
        e.0 = e.0.min(inst.timestamp);
        e.1 = e.1.max(inst.timestamp);
    }
    let present: Vec<(Split, (i64, i64))> = ranges.into_iter().collect();
    for (i, (earlier, (_, max_earlier))) in present.iter().enumerate() {
        for (later, (min_later, _)) in &present[i + 1..] {
            if min_later <= max_earlier {
                return Err(DataError::SplitOrder {
                    earlier: *earlier,
                    later: *later,
                    at: *min_later,
                });
            }
        }
    }
    Ok(())
}

/// Encodes a dataset as MFNR bytes. Values are narrowed to f32.
pub fn to_mfnr_bytes(ds: &PanelDataset) -> Vec<u8> {
    let per = 4 + 8 + 1 + 4 + 4 * (ds.d_f + ds.d_n);
    let mut buf = Vec::with_capacity(HEADER_LEN + per * ds.len() + TRAILER_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.d_f as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.d_n as u32).to_le_bytes());
    buf.extend_from_slice(&ds.horizon.to_le_bytes());
    for inst in &ds.instances {
        buf.extend_from_slice(&inst.stock_id.to_le_bytes());
        buf.extend_from_slice(&inst.timestamp.to_le_bytes());
        buf.push(inst.split.tag());
        buf.extend_from_slice(&(inst.target_return as f32).to_le_bytes());
        for v in inst.factors.iter().chain(&inst.news_embedding) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f64 {
        f64::from(f32::from_le_bytes(self.take()))
    }
}

pub fn from_mfnr_bytes(bytes: &[u8]) -> Result<PanelDataset> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32();
    if version != FORMAT_VERSION {
        return Err(DataError::Version(version));
    }
    let n = u64::from_le_bytes(cur.take()) as usize;
    let d_f = cur.u32() as usize;
    let d_n = cur.u32() as usize;
    let horizon = cur.u32();
    let per = 4 + 8 + 1 + 4 + 4 * (d_f + d_n);
    let expected = n
        .checked_mul(per)
        .and_then(|p| p.checked_add(HEADER_LEN + TRAILER_LEN))
        .ok_or_else(|| DataError::Invalid("instance count overflows".into()))?;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DataError::Invalid(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let body = expected - TRAILER_LEN;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(DataError::Corrupt { stored, computed });
    }
    let mut instances = Vec::with_capacity(n);
    for index in 0..n {
        let stock_id = cur.u32();
        let timestamp = i64::from_le_bytes(cur.take());
        let split = Split::from_tag(cur.take::<1>()[0])?;
        let target_return = cur.f32();
        let factors: Vec<f64> = (0..d_f).map(|_| cur.f32()).collect();
        let news_embedding: Vec<f64> = (0..d_n).map(|_| cur.f32()).collect();
        if !target_return.is_finite() {
            return Err(DataError::NonFinite { index, field: "target" });
        }
        instances.push(Instance { stock_id, timestamp, split, factors, news_embedding, target_return });
    }
    PanelDataset::new(d_f, d_n, horizon, instances)
}

pub fn save_dataset(ds: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_mfnr_bytes(ds)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an MFNR or CSV file, chosen by its leading bytes.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<PanelDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.starts_with(MAGIC) {
        from_mfnr_bytes(&bytes)
    } else if bytes.starts_with(b"stock_id") {
        from_csv_bytes(&bytes)
    } else {
        let mut magic = [0u8; 4];
        let k = bytes.len().min(4);
        magic[..k].copy_from_slice(&bytes[..k]);
        Err(DataError::BadMagic(magic))
    }
}

fn header_dims(headers: &csv::StringRecord) -> Result<(usize, usize)> {
    let fixed = ["stock_id", "timestamp", "split", "target"];
    for (i, want) in fixed.iter().enumerate() {
        if headers.get(i).map(str::trim) != Some(*want) {
            return Err(DataError::Csv(format!("column {i} must be {want:?}")));
        }
    }
    let rest: Vec<&str> = headers.iter().skip(fixed.len()).map(str::trim).collect();
    let d_f = rest.iter().take_while(|h| h.starts_with('f')).count();
    let d_n = rest.len() - d_f;
    for (i, h) in rest[..d_f].iter().enumerate() {
        if *h != format!("f{i}") {
            return Err(DataError::Csv(format!("expected header f{i}, found {h:?}")));
        }
    }
    for (i, h) in rest[d_f..].iter().enumerate() {
        if *h != format!("n{i}") {
            return Err(DataError::Csv(format!("expected header n{i}, found {h:?}")));
        }
    }
    Ok((d_f, d_n))
}

/// Parses the CSV ingestion format. The horizon is not carried by CSV and
/// defaults to one period.
pub fn from_csv_bytes(bytes: &[u8]) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = reader.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let (d_f, d_n) = header_dims(&headers)?;
    let parse_f = |s: &str, row: usize| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| DataError::Csv(format!("row {row}: {s:?}: {e}")))
    };
    let mut instances = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        if rec.len() != 4 + d_f + d_n {
            return Err(DataError::Csv(format!("row {row}: expected {} fields, found {}", 4 + d_f + d_n, rec.len())));
        }
        let stock_id = rec[0]
            .parse::<u32>()
            .map_err(|e| DataError::Csv(format!("row {row}: stock_id: {e}")))?;
        let timestamp = rec[1]
            .parse::<i64>()
            .map_err(|e| DataError::Csv(format!("row {row}: timestamp: {e}")))?;
        let split: Split = rec[2].parse()?;
        let target_return = parse_f(&rec[3], row)?;
        let factors = (0..d_f).map(|j| parse_f(&rec[4 + j], row)).collect::<Result<Vec<_>>>()?;
        let news_embedding = (0..d_n)
            .map(|j| parse_f(&rec[4 + d_f + j], row))
            .collect::<Result<Vec<_>>>()?;
        instances.push(Instance { stock_id, timestamp, split, factors, news_embedding, target_return });
    }
    PanelDataset::new(d_f, d_n, 1, instances)
}

/// Retags every instance by timestamp: train iff `t <= train_end`, val iff
/// `train_end < t <= val_end`, test otherwise.
pub fn split_by_time(ds: &PanelDataset, train_end: i64, val_end: i64) -> Result<PanelDataset> {
    if train_end >= val_end {
        return Err(DataError::Invalid(format!(
            "train_end ({train_end}) must precede val_end ({val_end})"
        )));
    }
    let instances: Vec<Instance> = ds
        .instances
        .iter()
        .map(|inst| {
            let split = if inst.timestamp <= train_end {
                Split::Train
            } else if inst.timestamp <= val_end {
                Split::Val
            } else {
                Split::Test
            };
            Instance { split, ..inst.clone() }
        })
        .collect();
    for split in [Split::Train, Split::Test] {
        if !instances.iter().any(|i| i.split == split) {
            return Err(DataError::EmptyPartition(split));
        }
    }
    PanelDataset::new(ds.d_f, ds.d_n, ds.horizon, instances)
}

/// Chooses `(train_end, val_end)` so that the first `train_periods` distinct
/// timestamps are train and the next `val_periods` are validation.
pub fn period_boundaries(ds: &PanelDataset, train_periods: usize, val_periods: usize) -> Result<(i64, i64)> {
    let ts = ds.timestamps();
    if train_periods == 0 || train_periods + val_periods >= ts.len() {
        return Err(DataError::Invalid(format!(
            "cannot place {train_periods} train and {val_periods} val periods in {} timestamps",
            ts.len()
        )));
    }
    let train_end = ts[train_periods - 1];
    let val_end = if val_periods == 0 {
        // An empty validation window needs a gap between train and test dates.
        let next = ts[train_periods];
        if next - train_end < 2 {
            return Err(DataError::Invalid(format!(
                "no room for an empty validation window between {train_end} and {next}"
            )));
        }
        train_end + 1
    } else {
        ts[train_periods + val_periods - 1]
    };
    Ok((train_end, val_end))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StandardizeMode {
    #[default]
    Off,
    Zscore,
}

/// Per-factor train-split statistics (population convention).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn standardize_factors(ds: &PanelDataset, mode: StandardizeMode) -> Result<(PanelDataset, FactorStats)> {
    match mode {
        StandardizeMode::Off => Ok((
            ds.clone(),
            FactorStats { mean: vec![0.0; ds.d_f], std: vec![1.0; ds.d_f] },
        )),
        StandardizeMode::Zscore => {
            let train: Vec<&Instance> = ds.split(Split::Train).collect();
            if train.len() < 2 {
                return Err(DataError::Invalid(format!(
                    "z-score standardization needs at least 2 train instances, found {}",
                    train.len()
                )));
            }
            let n = train.len() as f64;
            let mut mean = vec![0.0; ds.d_f];
            for inst in &train {
                for (m, v) in mean.iter_mut().zip(&inst.factors) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; ds.d_f];
            for inst in &train {
                for ((s, v), m) in var.iter_mut().zip(&inst.factors).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
            let instances = ds
                .instances
                .iter()
                .map(|inst| {
                    let factors = inst
                        .factors
                        .iter()
                        .zip(mean.iter().zip(&std))
                        .map(|(v, (m, s))| if *s < 1e-12 { 0.0 } else { (v - m) / s })
                        .collect();
                    Instance { factors, ..inst.clone() }
                })
                .collect();
            Ok((
                PanelDataset::new(ds.d_f, ds.d_n, ds.horizon, instances)?,
                FactorStats { mean, std },
            ))
        }
    }
}

/// Predictions and realized returns of the stocks sharing one rebalance date.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub timestamp: i64,
    pub stock_ids: Vec<u32>,
    pub predicted: Vec<f64>,
    pub realized: Vec<f64>,
}

impl CrossSection {
    pub fn new(timestamp: i64, stock_ids: Vec<u32>, predicted: Vec<f64>, realized: Vec<f64>) -> Result<Self> {
        if stock_ids.is_empty() || stock_ids.len() != predicted.len() || stock_ids.len() != realized.len() {
            return Err(DataError::Invalid(format!(
                "cross-section at {timestamp}: sequences must be non-empty and equal length ({}, {}, {})",
                stock_ids.len(),
                predicted.len(),
                realized.len()
            )));
        }
        let mut sorted = stock_ids.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(DataError::Duplicate { stock_id: w[0], timestamp });
        }
        Ok(Self { timestamp, stock_ids, predicted, realized })
    }

    pub fn len(&self) -> usize {
        self.stock_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stock_ids.is_empty()
    }
}

/// Groups one prediction per instance of `split` (in dataset order) into
/// time-ordered cross-sections.
pub fn group_by_timestamp(predictions: &[f64], ds: &PanelDataset, split: Split) -> Result<Vec<CrossSection>> {
    let members: Vec<&Instance> = ds.split(split).collect();
    if members.len() != predictions.len() {
        return Err(DataError::PredictionCount {
            split,
            expected: members.len(),
            found: predictions.len(),
        });
    }
    let mut groups: BTreeMap<i64, (Vec<u32>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (inst, pred) in members.iter().zip(predictions) {
        let g = groups.entry(inst.timestamp).or_default();
        g.0.push(inst.stock_id);
        g.1.push(*pred);
        g.2.push(inst.target_return);
    }
    groups
        .into_iter()
        .map(|(t, (ids, p, r))| CrossSection::new(t, ids, p, r))
        .collect()
}
