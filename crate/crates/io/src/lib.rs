//! Dataset directory format: JSON headers plus per-attribute binary data.
//!
//! A dataset is one directory. `header.json` describes the attributes,
//! timestep count, and codecs; each attribute's samples live in their own
//! `<name>.dat` file as little-endian binary with all timesteps
//! concatenated. Optional sidecars extend the core: `tid/<name>.dat` holds
//! per-attribute time-independent payloads, `types.json` free-form type
//! metadata, and `dd.json` the domain-decomposition record (layout plus
//! per-worker load and fiber placement).
//!
//! Byte offsets are computed from the header alone — there is no in-band
//! framing — so workers can encode and write disjoint regions of the same
//! files independently and in any order. Within a process a claim registry
//! rejects overlapping writes; across processes disjointness is by
//! convention. Completed datasets are immutable and read lock-free.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use musim_core::partition::PartitionLayout;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const TYPES_FILE: &str = "types.json";
pub const DD_FILE: &str = "dd.json";
pub const TID_DIR: &str = "tid";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("region conflict")]
    RegionConflict,
    #[error("value out of quantization range")]
    OutOfQuantizationRange,
    #[error("payload underrun")]
    PayloadUnderrun,
    #[error("schema violation: {0}")]
    SchemaViolation(&'static str),
    #[error("already present")]
    AlreadyPresent,
    #[error("file access failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Value encoding of one attribute's data file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum CodecId {
    /// Little-endian IEEE 754 doubles, bit-exact.
    RawF64,
    /// Fixed-rate linear quantizer over `[min, max]`, byte-aligned
    /// little-endian levels, round-half-up.
    Quantized { bits: u32, min: f64, max: f64 },
}

impl CodecId {
    pub fn validate(&self) -> Result<(), IoError> {
        match *self {
            CodecId::RawF64 => Ok(()),
            CodecId::Quantized { bits, min, max } => {
                if !(1..=32).contains(&bits) {
                    return Err(IoError::SchemaViolation("quantizer bits outside 1..=32"));
                }
                if !min.is_finite() || !max.is_finite() || min >= max {
                    return Err(IoError::SchemaViolation("degenerate quantizer interval"));
                }
                Ok(())
            }
        }
    }

    /// Stored bytes per value (quantized levels are byte-aligned so region
    /// offsets never split a byte).
    pub fn bytes_per_value(&self) -> usize {
        match *self {
            CodecId::RawF64 => 8,
            CodecId::Quantized { bits, .. } => bits.div_ceil(8) as usize,
        }
    }

    /// Worst-case absolute round-trip error.
    pub fn max_abs_error(&self) -> f64 {
        match *self {
            CodecId::RawF64 => 0.0,
            CodecId::Quantized { bits, min, max } => {
                let levels = (1u64 << bits) - 1;
                (max - min) / levels as f64 / 2.0
            }
        }
    }

    fn encode_into(&self, values: &[f64], out: &mut Vec<u8>) -> Result<(), IoError> {
        match *self {
            CodecId::RawF64 => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            CodecId::Quantized { bits, min, max } => {
                let levels = (1u64 << bits) - 1;
                let scale = levels as f64 / (max - min);
                let nbytes = bits.div_ceil(8) as usize;
                for &v in values {
                    if !v.is_finite() || v < min || v > max {
                        return Err(IoError::OutOfQuantizationRange);
                    }
                    let level = (((v - min) * scale).round() as u64).min(levels);
                    out.extend_from_slice(&level.to_le_bytes()[..nbytes]);
                }
            }
        }
        Ok(())
    }

    fn decode(&self, bytes: &[u8], count: usize) -> Result<Vec<f64>, IoError> {
        let nbytes = self.bytes_per_value();
        if bytes.len() < count * nbytes {
            return Err(IoError::PayloadUnderrun);
        }
        match *self {
            CodecId::RawF64 => Ok(bytes
                .chunks_exact(8)
                .take(count)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()),
            CodecId::Quantized { bits, min, max } => {
                let levels = (1u64 << bits) - 1;
                let step = (max - min) / levels as f64;
                let mut values = Vec::with_capacity(count);
                for chunk in bytes.chunks_exact(nbytes).take(count) {
                    let mut raw = [0u8; 8];
                    raw[..nbytes].copy_from_slice(chunk);
                    let level = u64::from_le_bytes(raw);
                    if level > levels {
                        return Err(IoError::SchemaViolation(
                            "quantized level exceeds codec range",
                        ));
                    }
                    values.push(min + level as f64 * step);
                }
                Ok(values)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    /// What the values mean, e.g. `membrane_potential` or `activation`.
    pub semantic: String,
    /// Values per timestep across the whole domain.
    pub count: usize,
    pub codec: CodecId,
    pub bytes_per_timestep: usize,
}

impl Attribute {
    pub fn new(
        name: impl Into<String>,
        semantic: impl Into<String>,
        count: usize,
        codec: CodecId,
    ) -> Self {
        Self {
            name: name.into(),
            semantic: semantic.into(),
            count,
            codec,
            bytes_per_timestep: count * codec.bytes_per_value(),
        }
    }

    pub fn data_file(&self) -> String {
        format!("{}.dat", self.name)
    }

    fn validate(&self) -> Result<(), IoError> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(IoError::SchemaViolation("attribute name not filesystem-safe"));
        }
        if self.count == 0 {
            return Err(IoError::SchemaViolation("attribute holds no values"));
        }
        self.codec.validate()?;
        if self.bytes_per_timestep != self.count * self.codec.bytes_per_value() {
            return Err(IoError::SchemaViolation(
                "byte length inconsistent with codec and count",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub attributes: Vec<Attribute>,
    pub timesteps: usize,
    /// Output cadence in milliseconds.
    pub dt: f64,
    /// Sidecar references, filled in when the sidecars are written.
    pub type_header: Option<String>,
    pub tid: Option<String>,
    pub dd: Option<String>,
}

impl DatasetHeader {
    pub fn new(attributes: Vec<Attribute>, timesteps: usize, dt: f64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            attributes,
            timesteps,
            dt,
            type_header: None,
            tid: None,
            dd: None,
        }
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.format_version != FORMAT_VERSION {
            return Err(IoError::SchemaViolation("unsupported format version"));
        }
        if self.timesteps == 0 {
            return Err(IoError::SchemaViolation("dataset holds no timesteps"));
        }
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(IoError::SchemaViolation("non-positive timestep width"));
        }
        for (i, attr) in self.attributes.iter().enumerate() {
            attr.validate()?;
            if self.attributes[..i].iter().any(|a| a.name == attr.name) {
                return Err(IoError::SchemaViolation("duplicate attribute name"));
            }
        }
        Ok(())
    }
}

/// Per-worker, per-timestep load record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRecord {
    pub worker: usize,
    pub timestep: usize,
    /// Wall seconds spent per simulation component.
    pub component_seconds: BTreeMap<String, f64>,
    /// Elements handled by the worker at this timestep.
    pub elements: usize,
}

/// Domain-decomposition sidecar: how the run was split and how each worker
/// performed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdMetadata {
    pub layout: PartitionLayout,
    pub loads: Vec<LoadRecord>,
    /// Fiber index → worker rank that ran its 1D solve.
    pub fiber_workers: Vec<usize>,
    /// Seed of the randomized stimulus-target draw, when one was used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus_seed: Option<u64>,
}

impl DdMetadata {
    pub fn validate(&self) -> Result<(), IoError> {
        let workers = self.layout.n_partitions();
        if self.loads.iter().any(|l| l.worker >= workers) {
            return Err(IoError::SchemaViolation("load record worker outside layout"));
        }
        if self.fiber_workers.iter().any(|&w| w >= workers) {
            return Err(IoError::SchemaViolation("fiber worker outside layout"));
        }
        // Every worker of the layout must report at least one load record.
        let mut seen = vec![false; workers];
        for l in &self.loads {
            seen[l.worker] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(IoError::SchemaViolation("load records do not cover the layout"));
        }
        Ok(())
    }

    /// Which worker ran this fiber's 1D solve.
    pub fn worker_of_fiber(&self, fiber: usize) -> Option<usize> {
        self.fiber_workers.get(fiber).copied()
    }
}

/// Byte extent written into an attribute data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ByteRange {
    pub offset: usize,
    pub len: usize,
}

/// An open dataset directory.
///
/// Region writes take `&self` and may run from many threads; sidecar writes
/// mutate the header and are the coordinator's job.
#[derive(Debug)]
pub struct Dataset {
    dir: PathBuf,
    header: DatasetHeader,
    /// Claimed value ranges per (timestep, attribute index).
    claims: Mutex<HashMap<(usize, usize), Vec<(usize, usize)>>>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|_| IoError::SchemaViolation("unserializable metadata"))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

impl Dataset {
    /// Create a fresh dataset directory. Sidecar references start absent;
    /// data files are pre-sized so any region can be written first.
    pub fn create(dir: impl AsRef<Path>, mut header: DatasetHeader) -> Result<Self, IoError> {
        header.type_header = None;
        header.tid = None;
        header.dd = None;
        header.validate()?;
        let dir = dir.as_ref().to_path_buf();
        if dir.join(HEADER_FILE).exists() {
            return Err(IoError::AlreadyPresent);
        }
        fs::create_dir_all(&dir)?;
        write_json(&dir.join(HEADER_FILE), &header)?;
        for attr in &header.attributes {
            let file = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .open(dir.join(attr.data_file()))?;
            file.set_len((header.timesteps * attr.bytes_per_timestep) as u64)?;
        }
        Ok(Self {
            dir,
            header,
            claims: Mutex::new(HashMap::new()),
        })
    }

    /// Open an existing dataset from its header alone.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, IoError> {
        let dir = dir.as_ref().to_path_buf();
        let text = fs::read_to_string(dir.join(HEADER_FILE))?;
        let header: DatasetHeader = serde_json::from_str(&text)
            .map_err(|_| IoError::SchemaViolation("malformed header json"))?;
        header.validate()?;
        Ok(Self {
            dir,
            header,
            claims: Mutex::new(HashMap::new()),
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn attr_index(&self, name: &str) -> Result<usize, IoError> {
        self.header
            .attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or(IoError::SchemaViolation("attribute absent from header"))
    }

    fn rewrite_header(&self) -> Result<(), IoError> {
        write_json(&self.dir.join(HEADER_FILE), &self.header)
    }

    /// Encode `values` and write them at the region's header-derived offset.
    /// Disjoint regions commute; overlapping claims at the same timestep are
    /// rejected.
    pub fn write_timestep(
        &self,
        timestep: usize,
        attribute: &str,
        values: &[f64],
        region: Range<usize>,
    ) -> Result<ByteRange, IoError> {
        let idx = self.attr_index(attribute)?;
        let attr = &self.header.attributes[idx];
        if timestep >= self.header.timesteps {
            return Err(IoError::SchemaViolation("timestep beyond header extent"));
        }
        if region.start > region.end || region.end > attr.count {
            return Err(IoError::SchemaViolation("region outside attribute extent"));
        }
        if values.len() != region.len() {
            return Err(IoError::SchemaViolation("value count does not match region"));
        }
        let mut bytes = Vec::with_capacity(values.len() * attr.codec.bytes_per_value());
        attr.codec.encode_into(values, &mut bytes)?;
        {
            let mut claims = self.claims.lock().expect("claim registry poisoned");
            let spans = claims.entry((timestep, idx)).or_default();
            if spans
                .iter()
                .any(|&(s, e)| region.start < e && s < region.end)
            {
                return Err(IoError::RegionConflict);
            }
            spans.push((region.start, region.end));
        }
        let offset =
            timestep * attr.bytes_per_timestep + region.start * attr.codec.bytes_per_value();
        let mut file = fs::OpenOptions::new()
            .write(true)
            .open(self.dir.join(attr.data_file()))?;
        file.seek(SeekFrom::Start(offset as u64))?;
        file.write_all(&bytes)?;
        Ok(ByteRange {
            offset,
            len: bytes.len(),
        })
    }

    /// Decode one timestep of one attribute. Unwritten regions decode as the
    /// codec's zero level.
    pub fn read_timestep(&self, timestep: usize, attribute: &str) -> Result<Vec<f64>, IoError> {
        let idx = self.attr_index(attribute)?;
        let attr = &self.header.attributes[idx];
        if timestep >= self.header.timesteps {
            return Err(IoError::SchemaViolation("timestep beyond header extent"));
        }
        let path = self.dir.join(attr.data_file());
        let mut file = fs::File::open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                IoError::SchemaViolation("data file missing")
            } else {
                IoError::Io(e)
            }
        })?;
        let need = ((timestep + 1) * attr.bytes_per_timestep) as u64;
        if file.metadata()?.len() < need {
            return Err(IoError::PayloadUnderrun);
        }
        file.seek(SeekFrom::Start((timestep * attr.bytes_per_timestep) as u64))?;
        let mut buf = vec![0u8; attr.bytes_per_timestep];
        file.read_exact(&mut buf)
            .map_err(|_| IoError::PayloadUnderrun)?;
        attr.codec.decode(&buf, attr.count)
    }

    /// Write an attribute's time-independent payload (raw doubles) to
    /// `tid/<name>.dat`.
    pub fn write_tid(&mut self, attribute: &str, values: &[f64]) -> Result<(), IoError> {
        let idx = self.attr_index(attribute)?;
        let tid_dir = self.dir.join(TID_DIR);
        fs::create_dir_all(&tid_dir)?;
        let path = tid_dir.join(self.header.attributes[idx].data_file());
        if path.exists() {
            return Err(IoError::AlreadyPresent);
        }
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes)?;
        if self.header.tid.is_none() {
            self.header.tid = Some(TID_DIR.to_string());
            self.rewrite_header()?;
        }
        Ok(())
    }

    pub fn read_tid(&self, attribute: &str) -> Result<Vec<f64>, IoError> {
        let idx = self.attr_index(attribute)?;
        if self.header.tid.is_none() {
            return Err(IoError::SchemaViolation("no time-independent data declared"));
        }
        let path = self
            .dir
            .join(TID_DIR)
            .join(self.header.attributes[idx].data_file());
        let bytes = fs::read(&path)
            .map_err(|_| IoError::SchemaViolation("time-independent payload missing"))?;
        if bytes.len() % 8 != 0 {
            return Err(IoError::PayloadUnderrun);
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    /// Write the free-form type metadata sidecar.
    pub fn write_type_header(&mut self, value: &serde_json::Value) -> Result<(), IoError> {
        let path = self.dir.join(TYPES_FILE);
        if path.exists() {
            return Err(IoError::AlreadyPresent);
        }
        write_json(&path, value)?;
        self.header.type_header = Some(TYPES_FILE.to_string());
        self.rewrite_header()
    }

    pub fn read_type_header(&self) -> Result<Option<serde_json::Value>, IoError> {
        let Some(name) = &self.header.type_header else {
            return Ok(None);
        };
        let text = fs::read_to_string(self.dir.join(name))
            .map_err(|_| IoError::SchemaViolation("type header missing"))?;
        let value = serde_json::from_str(&text)
            .map_err(|_| IoError::SchemaViolation("malformed type header"))?;
        Ok(Some(value))
    }

    /// Write the domain-decomposition sidecar.
    pub fn write_dd(&mut self, dd: &DdMetadata) -> Result<(), IoError> {
        dd.validate()?;
        let path = self.dir.join(DD_FILE);
        if path.exists() {
            return Err(IoError::AlreadyPresent);
        }
        write_json(&path, dd)?;
        self.header.dd = Some(DD_FILE.to_string());
        self.rewrite_header()
    }

    pub fn read_dd(&self) -> Result<Option<DdMetadata>, IoError> {
        let Some(name) = &self.header.dd else {
            return Ok(None);
        };
        let text = fs::read_to_string(self.dir.join(name))
            .map_err(|_| IoError::SchemaViolation("decomposition metadata missing"))?;
        let dd: DdMetadata = serde_json::from_str(&text)
            .map_err(|_| IoError::SchemaViolation("malformed decomposition metadata"))?;
        dd.validate()?;
        Ok(Some(dd))
    }

    /// Check that every declared file exists at exactly its header-implied
    /// size.
    pub fn validate_files(&self) -> Result<(), IoError> {
        for attr in &self.header.attributes {
            let want = (self.header.timesteps * attr.bytes_per_timestep) as u64;
            let meta = fs::metadata(self.dir.join(attr.data_file()))
                .map_err(|_| IoError::SchemaViolation("data file missing"))?;
            if meta.len() < want {
                return Err(IoError::PayloadUnderrun);
            }
            if meta.len() > want {
                return Err(IoError::SchemaViolation("data file exceeds header extent"));
            }
        }
        if let Some(name) = &self.header.type_header {
            if !self.dir.join(name).exists() {
                return Err(IoError::SchemaViolation("type header missing"));
            }
        }
        if let Some(name) = &self.header.dd {
            if !self.dir.join(name).exists() {
                return Err(IoError::SchemaViolation("decomposition metadata missing"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use musim_core::partition::{factorize, Strategy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scratch() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    fn small_dataset(dir: &Path, codec: CodecId, count: usize, timesteps: usize) -> Dataset {
        let header = DatasetHeader::new(
            vec![Attribute::new("vm", "membrane_potential", count, codec)],
            timesteps,
            0.1,
        );
        Dataset::create(dir, header).expect("create dataset")
    }

    #[test]
    fn raw_bytes_are_little_endian_doubles() {
        let tmp = scratch();
        let ds = small_dataset(tmp.path(), CodecId::RawF64, 2, 1);
        let range = ds.write_timestep(0, "vm", &[1.0, 2.0], 0..2).unwrap();
        assert_eq!(range, ByteRange { offset: 0, len: 16 });
        let bytes = fs::read(tmp.path().join("vm.dat")).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&2.0f64.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn quantizer_rounds_half_up() {
        let codec = CodecId::Quantized {
            bits: 8,
            min: 0.0,
            max: 1.0,
        };
        let mut bytes = Vec::new();
        codec.encode_into(&[0.5, 0.0, 1.0], &mut bytes).unwrap();
        assert_eq!(bytes, vec![128, 0, 255]);
        let back = codec.decode(&bytes, 3).unwrap();
        assert!((back[0] - 128.0 / 255.0).abs() < 1e-15);
        assert!((back[0] - 0.50196).abs() < 1e-5);
        assert_eq!(back[1], 0.0);
        assert_eq!(back[2], 1.0);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let tmp = scratch();
        let ds = small_dataset(
            tmp.path(),
            CodecId::Quantized {
                bits: 8,
                min: 0.0,
                max: 1.0,
            },
            2,
            1,
        );
        for bad in [1.5, -0.1, f64::NAN, f64::INFINITY] {
            let err = ds.write_timestep(0, "vm", &[bad, 0.5], 0..2).unwrap_err();
            assert_eq!(err.to_string(), "value out of quantization range");
        }
        // A rejected write leaves no claim behind.
        ds.write_timestep(0, "vm", &[0.25, 0.75], 0..2).unwrap();
    }

    #[test]
    fn overlapping_claims_conflict() {
        let tmp = scratch();
        let ds = small_dataset(tmp.path(), CodecId::RawF64, 8, 2);
        ds.write_timestep(0, "vm", &[1.0, 2.0], 0..2).unwrap();
        let err = ds.write_timestep(0, "vm", &[9.0, 9.0], 1..3).unwrap_err();
        assert_eq!(err.to_string(), "region conflict");
        // Same region at another timestep is fine; disjoint region too.
        ds.write_timestep(1, "vm", &[3.0, 4.0], 1..3).unwrap();
        ds.write_timestep(0, "vm", &[5.0, 6.0], 2..4).unwrap();
    }

    #[test]
    fn disjoint_writes_commute_bytewise() {
        let a = (0..3, vec![1.0, 2.0, 3.0]);
        let b = (5..8, vec![4.0, 5.0, 6.0]);
        let mut files = Vec::new();
        for order in [[&a, &b], [&b, &a]] {
            let tmp = scratch();
            let ds = small_dataset(tmp.path(), CodecId::RawF64, 8, 1);
            for (region, values) in order {
                ds.write_timestep(0, "vm", values, region.clone()).unwrap();
            }
            files.push(fs::read(tmp.path().join("vm.dat")).unwrap());
        }
        assert_eq!(files[0], files[1]);
    }

    #[test]
    fn threaded_workers_fill_disjoint_regions() {
        let tmp = scratch();
        let ds = small_dataset(tmp.path(), CodecId::RawF64, 64, 3);
        std::thread::scope(|scope| {
            for w in 0..4 {
                let ds = &ds;
                scope.spawn(move || {
                    for t in 0..3 {
                        let start = w * 16;
                        let values: Vec<f64> =
                            (start..start + 16).map(|i| (t * 100 + i) as f64).collect();
                        ds.write_timestep(t, "vm", &values, start..start + 16)
                            .unwrap();
                    }
                });
            }
        });
        for t in 0..3 {
            let got = ds.read_timestep(t, "vm").unwrap();
            let want: Vec<f64> = (0..64).map(|i| (t * 100 + i) as f64).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn raw_round_trip_is_bitwise_through_files() {
        let tmp = scratch();
        let ds = small_dataset(tmp.path(), CodecId::RawF64, 1000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..1000)
            .map(|_| rng.random_range(-1.0e12..1.0e12))
            .collect();
        ds.write_timestep(0, "vm", &values, 0..1000).unwrap();
        let back = ds.read_timestep(0, "vm").unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn quantized_voltage_traces_stay_within_the_error_bound() {
        let codec = CodecId::Quantized {
            bits: 16,
            min: -100.0,
            max: 50.0,
        };
        let bound = codec.max_abs_error();
        assert!((bound - 150.0 / 65535.0 / 2.0).abs() < 1e-15);
        assert!(bound < 0.001145);

        let tmp = scratch();
        let ds = small_dataset(tmp.path(), codec, 1000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Spike-shaped trace plus uniform noise over the full range.
        let values: Vec<f64> = (0..1000)
            .map(|i| {
                if i < 500 {
                    let t = i as f64 * 0.02;
                    -75.0 + 120.0 * (-(t - 3.0) * (t - 3.0)).exp()
                } else {
                    rng.random_range(-100.0..50.0)
                }
            })
            .collect();
        ds.write_timestep(0, "vm", &values, 0..1000).unwrap();
        let back = ds.read_timestep(0, "vm").unwrap();
        let max_err = values
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // One ulp at the value scale (~1e-14 near 100) may sit on top of the
        // half-step bound.
        assert!(max_err <= bound + 2e-14, "max err {max_err}");
    }

    #[test]
    fn absent_attributes_are_schema_violations() {
        let tmp = scratch();
        let ds = small_dataset(tmp.path(), CodecId::RawF64, 4, 1);
        let err = ds.read_timestep(0, "nope").unwrap_err();
        assert!(err.to_string().starts_with("schema violation"));
        let err = ds.write_timestep(0, "nope", &[1.0], 0..1).unwrap_err();
        assert!(err.to_string().starts_with("schema violation"));
        // Regions beyond the declared extent are schema violations too.
        let err = ds.write_timestep(0, "vm", &[1.0, 2.0], 3..5).unwrap_err();
        assert!(err.to_string().starts_with("schema violation"));
    }

    #[test]
    fn truncated_data_files_underrun() {
        let tmp = scratch();
        let ds = small_dataset(tmp.path(), CodecId::RawF64, 4, 2);
        ds.write_timestep(0, "vm", &[1.0, 2.0, 3.0, 4.0], 0..4)
            .unwrap();
        let file = fs::OpenOptions::new()
            .write(true)
            .open(tmp.path().join("vm.dat"))
            .unwrap();
        file.set_len(4 * 8 - 3).unwrap();
        let err = ds.read_timestep(1, "vm").unwrap_err();
        assert_eq!(err.to_string(), "payload underrun");
        assert!(matches!(
            ds.validate_files().unwrap_err(),
            IoError::PayloadUnderrun
        ));
    }

    #[test]
    fn sidecars_round_trip_and_reject_duplicates() {
        let tmp = scratch();
        let mut ds = small_dataset(tmp.path(), CodecId::RawF64, 4, 1);

        let gauss = vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5];
        ds.write_tid("vm", &gauss).unwrap();
        assert_eq!(ds.read_tid("vm").unwrap(), gauss);
        let err = ds.write_tid("vm", &gauss).unwrap_err();
        assert_eq!(err.to_string(), "already present");

        let types = serde_json::json!({"vm": {"unit": "mV", "kind": "nodal"}});
        ds.write_type_header(&types).unwrap();
        assert_eq!(ds.read_type_header().unwrap().unwrap(), types);
        assert!(matches!(
            ds.write_type_header(&types).unwrap_err(),
            IoError::AlreadyPresent
        ));

        let layout = factorize(4, [2, 2, 8], Strategy::Cubic).unwrap();
        let dd = DdMetadata {
            layout,
            loads: (0..4)
                .map(|w| LoadRecord {
                    worker: w,
                    timestep: 0,
                    component_seconds: BTreeMap::from([
                        ("fiber".to_string(), 0.1 * w as f64),
                        ("mechanics".to_string(), 0.2),
                    ]),
                    elements: 8,
                })
                .collect(),
            fiber_workers: vec![0, 0, 1, 1, 2, 3],
            stimulus_seed: Some(7),
        };
        ds.write_dd(&dd).unwrap();
        let back = ds.read_dd().unwrap().unwrap();
        assert_eq!(back, dd);
        assert_eq!(back.worker_of_fiber(2), Some(1));
        assert_eq!(back.worker_of_fiber(5), Some(3));
        assert_eq!(back.worker_of_fiber(6), None);
        assert!(matches!(
            ds.write_dd(&dd).unwrap_err(),
            IoError::AlreadyPresent
        ));

        // A fresh open sees all three references and valid files.
        let fresh = Dataset::open(tmp.path()).unwrap();
        assert_eq!(fresh.header().tid.as_deref(), Some(TID_DIR));
        assert_eq!(fresh.header().type_header.as_deref(), Some(TYPES_FILE));
        assert_eq!(fresh.header().dd.as_deref(), Some(DD_FILE));
        fresh.validate_files().unwrap();
    }

    #[test]
    fn datasets_without_sidecars_parse_with_options_absent() {
        let tmp = scratch();
        small_dataset(tmp.path(), CodecId::RawF64, 4, 1);
        let ds = Dataset::open(tmp.path()).unwrap();
        assert!(ds.header().tid.is_none());
        assert!(ds.header().type_header.is_none());
        assert!(ds.header().dd.is_none());
        assert!(ds.read_type_header().unwrap().is_none());
        assert!(ds.read_dd().unwrap().is_none());
    }

    #[test]
    fn datasets_reload_from_header_and_data_alone() {
        let tmp = scratch();
        {
            let ds = small_dataset(tmp.path(), CodecId::RawF64, 3, 2);
            ds.write_timestep(0, "vm", &[1.0, 2.0, 3.0], 0..3).unwrap();
            ds.write_timestep(1, "vm", &[4.0, 5.0, 6.0], 0..3).unwrap();
        }
        let ds = Dataset::open(tmp.path()).unwrap();
        assert_eq!(ds.read_timestep(0, "vm").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(ds.read_timestep(1, "vm").unwrap(), vec![4.0, 5.0, 6.0]);
        // Creating over an existing dataset is refused.
        let err = Dataset::create(
            tmp.path(),
            DatasetHeader::new(
                vec![Attribute::new("vm", "membrane_potential", 3, CodecId::RawF64)],
                2,
                0.1,
            ),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "already present");
    }

    #[test]
    fn eight_bit_quantization_stores_under_an_eighth_of_raw() {
        fn dir_size(dir: &Path) -> u64 {
            let mut total = 0;
            for entry in fs::read_dir(dir).unwrap() {
                let entry = entry.unwrap();
                if entry.file_type().unwrap().is_dir() {
                    total += dir_size(&entry.path());
                } else {
                    total += entry.metadata().unwrap().len();
                }
            }
            total
        }
        let count = 200_000;
        let values: Vec<f64> = (0..count).map(|i| (i % 256) as f64 / 255.0).collect();

        let raw_tmp = scratch();
        let raw = small_dataset(raw_tmp.path(), CodecId::RawF64, count, 1);
        raw.write_timestep(0, "vm", &values, 0..count).unwrap();

        let q_tmp = scratch();
        let q = small_dataset(
            q_tmp.path(),
            CodecId::Quantized {
                bits: 8,
                min: 0.0,
                max: 1.0,
            },
            count,
            1,
        );
        q.write_timestep(0, "vm", &values, 0..count).unwrap();

        let ratio = dir_size(q_tmp.path()) as f64 / dir_size(raw_tmp.path()) as f64;
        assert!(ratio <= 0.126, "ratio {ratio}");
    }

    #[test]
    fn decomposition_metadata_must_cover_the_layout() {
        let tmp = scratch();
        let mut ds = small_dataset(tmp.path(), CodecId::RawF64, 4, 1);
        let layout = factorize(4, [2, 2, 8], Strategy::Cubic).unwrap();
        let one_load = |worker| LoadRecord {
            worker,
            timestep: 0,
            component_seconds: BTreeMap::new(),
            elements: 8,
        };
        let missing = DdMetadata {
            layout: layout.clone(),
            loads: vec![one_load(0), one_load(1), one_load(2)],
            fiber_workers: vec![],
            stimulus_seed: None,
        };
        let err = ds.write_dd(&missing).unwrap_err();
        assert!(err.to_string().starts_with("schema violation"));
        let out_of_range = DdMetadata {
            layout,
            loads: (0..4).map(one_load).collect(),
            fiber_workers: vec![4],
            stimulus_seed: None,
        };
        assert!(ds.write_dd(&out_of_range).is_err());
    }

    #[test]
    fn header_json_schema_is_stable() {
        let tmp = scratch();
        small_dataset(
            tmp.path(),
            CodecId::Quantized {
                bits: 16,
                min: -100.0,
                max: 50.0,
            },
            4,
            3,
        );
        let text = fs::read_to_string(tmp.path().join(HEADER_FILE)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["timesteps"], 3);
        assert_eq!(v["attributes"][0]["name"], "vm");
        assert_eq!(v["attributes"][0]["codec"]["id"], "quantized");
        assert_eq!(v["attributes"][0]["codec"]["bits"], 16);
        assert_eq!(v["attributes"][0]["bytes_per_timestep"], 8);
        assert!(v["tid"].is_null());
    }

    #[test]
    fn corrupt_quantized_levels_are_schema_violations() {
        let codec = CodecId::Quantized {
            bits: 10,
            min: 0.0,
            max: 1.0,
        };
        let err = codec.decode(&[0xFF, 0xFF], 1).unwrap_err();
        assert!(err.to_string().starts_with("schema violation"));
    }

    #[test]
    fn invalid_headers_are_rejected() {
        let bad_codec = CodecId::Quantized {
            bits: 0,
            min: 0.0,
            max: 1.0,
        };
        assert!(bad_codec.validate().is_err());
        let inverted = CodecId::Quantized {
            bits: 8,
            min: 1.0,
            max: 0.0,
        };
        assert!(inverted.validate().is_err());

        let dup = DatasetHeader::new(
            vec![
                Attribute::new("a", "x", 1, CodecId::RawF64),
                Attribute::new("a", "y", 1, CodecId::RawF64),
            ],
            1,
            0.1,
        );
        assert!(dup.validate().is_err());

        let unsafe_name = DatasetHeader::new(
            vec![Attribute::new("../escape", "x", 1, CodecId::RawF64)],
            1,
            0.1,
        );
        assert!(unsafe_name.validate().is_err());

        let mut inconsistent = DatasetHeader::new(
            vec![Attribute::new("a", "x", 4, CodecId::RawF64)],
            1,
            0.1,
        );
        inconsistent.attributes[0].bytes_per_timestep = 7;
        assert!(inconsistent.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn raw_codec_round_trips_any_bit_pattern(bits in proptest::collection::vec(any::<u64>(), 1..100)) {
            let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let codec = CodecId::RawF64;
            let mut encoded = Vec::new();
            codec.encode_into(&values, &mut encoded).unwrap();
            let back = codec.decode(&encoded, values.len()).unwrap();
            for (a, b) in values.iter().zip(&back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn quantized_codec_respects_its_error_bound(
            bits in 1u32..=16,
            min in -1.0e3..1.0e3f64,
            width in 1.0e-3..1.0e3f64,
            fractions in proptest::collection::vec(0.0..=1.0f64, 1..100),
        ) {
            let max = min + width;
            let codec = CodecId::Quantized { bits, min, max };
            codec.validate().unwrap();
            let values: Vec<f64> = fractions
                .iter()
                .map(|f| (min + f * width).clamp(min, max))
                .collect();
            let mut encoded = Vec::new();
            codec.encode_into(&values, &mut encoded).unwrap();
            prop_assert_eq!(encoded.len(), values.len() * codec.bytes_per_value());
            let back = codec.decode(&encoded, values.len()).unwrap();
            let bound = codec.max_abs_error() * (1.0 + 1e-9) + 1e-12;
            for (a, b) in values.iter().zip(&back) {
                prop_assert!((a - b).abs() <= bound, "{} vs {}", a, b);
            }
        }
    }
}
