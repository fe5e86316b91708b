//! Gradient feature store and its `GFV1` on-disk format.
//!
//! ```text
//! "GFV1"            4 bytes
//! version           u32   (= 1)
//! n_tasks           u64
//! n_samples         u64
//! dim               u64
//! n_classes         u32
//! projected         u8    (0 = raw gradients, 1 = projected)
//! projection_seed   u64
//! n_samples records:
//!   sample_id       u64
//!   task_id         u32
//!   split           u8    (0 = train, 1 = validation)
//!   label           i32
//!   weight          f64
//!   base_output     f64
//!   gradient        dim x f64
//! ```
//!
//! All integers and floats are little-endian. A companion JSON manifest
//! (`<store>.manifest.json`) maps task ids to names.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GFV1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 + 8 + 8 + 8 + 4 + 1 + 8;

/// Bytes taken by one record with a gradient of length `dim`.
pub const fn record_bytes(dim: usize) -> usize {
    8 + 4 + 1 + 4 + 8 + 8 + 8 * dim
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
        }
    }

    fn apply(self, mut r: SampleRecord) -> SampleRecord {
        r.split = self;
        r
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            _ => None,
        }
    }
}

/// One example: base-model output, label, and gradient at the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub task_id: u32,
    pub split: Split,
    /// `+1`/`-1` for binary stores, otherwise a class index in `[0, K)`.
    pub label: i32,
    pub base_output: f64,
    pub gradient: Vec<f64>,
    pub weight: f64,
}

impl SampleRecord {
    /// Label as a signed float; only meaningful for binary stores.
    #[inline]
    pub fn y(&self) -> f64 {
        self.label as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub version: u32,
    pub n_tasks: u64,
    pub n_samples: u64,
    pub dim: u64,
    pub n_classes: u32,
    pub projected: bool,
    pub projection_seed: u64,
}

impl StoreHeader {
    pub fn raw(n_tasks: u64, n_samples: u64, dim: u64, n_classes: u32) -> Self {
        StoreHeader {
            version: FORMAT_VERSION,
            n_tasks,
            n_samples,
            dim,
            n_classes,
            projected: false,
            projection_seed: 0,
        }
    }

    fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut buf = [0u8; HEADER_BYTES];
        let mut at = 0;
        let mut put = |bytes: &[u8]| {
            buf[at..at + bytes.len()].copy_from_slice(bytes);
            at += bytes.len();
        };
        put(&MAGIC);
        put(&self.version.to_le_bytes());
        put(&self.n_tasks.to_le_bytes());
        put(&self.n_samples.to_le_bytes());
        put(&self.dim.to_le_bytes());
        put(&self.n_classes.to_le_bytes());
        put(&[self.projected as u8]);
        put(&self.projection_seed.to_le_bytes());
        buf
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(Error::Format("bad magic".into()));
            }
            return Err(Error::Corruption(format!(
                "header truncated: {} of {HEADER_BYTES} bytes",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut cur = Cursor::new(&bytes[4..HEADER_BYTES]);
        let version = cur.u32();
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n_tasks = cur.u64();
        let n_samples = cur.u64();
        let dim = cur.u64();
        let n_classes = cur.u32();
        let projected = match cur.u8() {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("invalid projected flag {other}"))),
        };
        let projection_seed = cur.u64();
        Ok(StoreHeader {
            version,
            n_tasks,
            n_samples,
            dim,
            n_classes,
            projected,
            projection_seed,
        })
    }

    fn check_record(&self, r: &SampleRecord) -> Result<()> {
        if r.gradient.len() as u64 != self.dim {
            return Err(Error::Format(format!(
                "sample {}: gradient length {} != store dimension {}",
                r.sample_id,
                r.gradient.len(),
                self.dim
            )));
        }
        if u64::from(r.task_id) >= self.n_tasks {
            return Err(Error::Format(format!(
                "sample {}: task id {} out of range for {} tasks",
                r.sample_id, r.task_id, self.n_tasks
            )));
        }
        if !(r.weight >= 0.0 && r.weight.is_finite()) {
            return Err(Error::Format(format!("sample {}: invalid weight {}", r.sample_id, r.weight)));
        }
        if !r.base_output.is_finite() {
            return Err(Error::Format(format!("sample {}: non-finite base output", r.sample_id)));
        }
        let valid_label = if self.n_classes == 2 {
            r.label == 1 || r.label == -1
        } else {
            r.label >= 0 && (r.label as u32) < self.n_classes
        };
        if !valid_label {
            return Err(Error::Format(format!(
                "sample {}: label {} invalid for {} classes",
                r.sample_id, r.label, self.n_classes
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, at: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.at..self.at + N].try_into().unwrap();
        self.at += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// All samples of one task, split into train and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: u32,
    pub name: String,
    pub train: Vec<SampleRecord>,
    pub validation: Vec<SampleRecord>,
    pub num_classes: u32,
}

/// A loaded store: header plus records grouped by task.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    pub header: StoreHeader,
    pub tasks: Vec<TaskDataset>,
}

impl GradientStore {
    /// Builds a store from records, grouping them by task id.
    pub fn from_records(
        header: StoreHeader,
        records: Vec<SampleRecord>,
        names: &BTreeMap<u32, String>,
    ) -> Result<Self> {
        if records.len() as u64 != header.n_samples {
            return Err(Error::Format(format!(
                "header declares {} samples, got {}",
                header.n_samples,
                records.len()
            )));
        }
        let mut tasks: Vec<TaskDataset> = (0..header.n_tasks as u32)
            .map(|t| TaskDataset {
                task_id: t,
                name: names.get(&t).cloned().unwrap_or_else(|| format!("task{t}")),
                train: Vec::new(),
                validation: Vec::new(),
                num_classes: header.n_classes,
            })
            .collect();
        for r in records {
            header.check_record(&r)?;
            let task = &mut tasks[r.task_id as usize];
            match r.split {
                Split::Train => task.train.push(r),
                Split::Validation => task.validation.push(r),
            }
        }
        Ok(GradientStore { header, tasks })
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, id: u32) -> Result<&TaskDataset> {
        self.tasks
            .get(id as usize)
            .ok_or_else(|| Error::arg(format!("task {id} not in store ({} tasks)", self.tasks.len())))
    }

    /// Records in task order, train before validation within each task.
    pub fn records(&self) -> impl Iterator<Item = &SampleRecord> {
        self.tasks.iter().flat_map(|t| t.train.iter().chain(t.validation.iter()))
    }

    pub fn names(&self) -> BTreeMap<u32, String> {
        self.tasks.iter().map(|t| (t.task_id, t.name.clone())).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub tasks: BTreeMap<u32, String>,
}

pub fn manifest_path(store: &Path) -> PathBuf {
    let mut name = store.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Writes `records` under `header` to `path`.
pub fn write_store(records: &[SampleRecord], header: &StoreHeader, path: &Path) -> Result<()> {
    if records.len() as u64 != header.n_samples {
        return Err(Error::Format(format!(
            "header declares {} samples, got {}",
            header.n_samples,
            records.len()
        )));
    }
    for r in records {
        header.check_record(r)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&header.encode())?;
    let mut buf = Vec::with_capacity(record_bytes(header.dim as usize));
    for r in records {
        buf.clear();
        buf.extend_from_slice(&r.sample_id.to_le_bytes());
        buf.extend_from_slice(&r.task_id.to_le_bytes());
        buf.push(r.split.to_byte());
        buf.extend_from_slice(&r.label.to_le_bytes());
        buf.extend_from_slice(&r.weight.to_le_bytes());
        buf.extend_from_slice(&r.base_output.to_le_bytes());
        for g in &r.gradient {
            buf.extend_from_slice(&g.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a whole store plus its task-name manifest.
pub fn write_store_with_manifest(store: &GradientStore, path: &Path) -> Result<()> {
    let records: Vec<SampleRecord> = store.records().cloned().collect();
    write_store(&records, &store.header, path)?;
    let manifest = StoreManifest { tasks: store.names() };
    fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads the header and records in file order.
pub fn read_records(path: &Path) -> Result<(StoreHeader, Vec<SampleRecord>)> {
    let bytes = fs::read(path)?;
    let header = StoreHeader::decode(&bytes)?;
    let dim = usize::try_from(header.dim).map_err(|_| Error::Format("dimension overflow".into()))?;
    let rec = record_bytes(dim);
    let expected = (header.n_samples as u128) * rec as u128 + HEADER_BYTES as u128;
    if (bytes.len() as u128) != expected {
        return Err(Error::Corruption(format!(
            "payload is {} bytes, header implies {}",
            bytes.len() - HEADER_BYTES,
            expected - HEADER_BYTES as u128
        )));
    }
    let mut cur = Cursor::new(&bytes[HEADER_BYTES..]);
    let mut records = Vec::with_capacity(header.n_samples as usize);
    for _ in 0..header.n_samples {
        let sample_id = cur.u64();
        let task_id = cur.u32();
        let split_byte = cur.u8();
        let split = Split::from_byte(split_byte).ok_or_else(|| {
            Error::Corruption(format!("sample {sample_id}: invalid split byte {split_byte}"))
        })?;
        let label = cur.i32();
        let weight = cur.f64();
        let base_output = cur.f64();
        let gradient = (0..dim).map(|_| cur.f64()).collect();
        let r = SampleRecord {
            sample_id,
            task_id,
            split,
            label,
            base_output,
            gradient,
            weight,
        };
        header.check_record(&r).map_err(|e| Error::Corruption(e.to_string()))?;
        records.push(r);
    }
    Ok((header, records))
}

/// Reads a store and groups it by task, picking up task names from the
/// manifest when one sits next to the file.
pub fn read_store(path: &Path) -> Result<GradientStore> {
    let (header, records) = read_records(path)?;
    let mpath = manifest_path(path);
    let names = if mpath.exists() {
        let m: StoreManifest = serde_json::from_slice(&fs::read(mpath)?)?;
        m.tasks
    } else {
        BTreeMap::new()
    };
    GradientStore::from_records(header, records, &names)
}

/// Moves a seeded random `round(fraction * |train|)` of the training records
/// into the validation split.
pub fn split_validation(task: &TaskDataset, fraction: f64, seed: u64) -> Result<TaskDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let n = task.train.len();
    if n < 2 {
        return Err(Error::arg(format!("task {} has {n} training records; need at least 2", task.task_id)));
    }
    let n_val = (fraction * n as f64).round() as usize;
    if n_val < 1 || n_val >= n {
        return Err(Error::arg(format!(
            "fraction {fraction} of {n} records leaves an empty split"
        )));
    }

    let mut train = task.train.clone();
    train.sort_by_key(|r| r.sample_id);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(task.task_id));
    order.shuffle(&mut rng);

    let mut to_val = vec![false; n];
    for &i in &order[..n_val] {
        to_val[i] = true;
    }
    let mut out = TaskDataset {
        task_id: task.task_id,
        name: task.name.clone(),
        train: Vec::with_capacity(n - n_val),
        validation: task.validation.clone(),
        num_classes: task.num_classes,
    };
    for (r, v) in train.into_iter().zip(to_val) {
        if v {
            out.validation.push(Split::Validation.apply(r));
        } else {
            out.train.push(r);
        }
    }
    out.validation.sort_by_key(|r| r.sample_id);
    Ok(out)
}
