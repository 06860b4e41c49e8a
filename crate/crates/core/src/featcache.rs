//! Feature-map cache for frozen tails.
//!
//! Data file layout, all little-endian:
//!
//! ```text
//! "LDFC" | version: u16 | record*
//! record = sample_index: u32 | slot payloads (raw f32, manifest slot order) | label: u16
//! ```
//!
//! The manifest is a JSON sidecar (`<data file>.json`) with slot shapes,
//! dtype tags, per-sample record offsets, labels and the dataset
//! fingerprint. Offsets are indexed by sample; records appear in the order
//! they were written.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::graph::{CutPoint, NetGraph};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"LDFC";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Disk,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDesc {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl SlotDesc {
    pub fn bytes(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.width()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutDesc {
    pub cut: CutPoint,
    /// Ids of the stages the cached features have passed through.
    pub tail_stages: Vec<usize>,
    pub slots: Vec<SlotDesc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub magic: String,
    pub version: u16,
    pub fingerprint: String,
    pub order_seed: u64,
    pub samples: usize,
    pub cut: CutDesc,
    pub record_bytes: u64,
    pub total_bytes: u64,
    pub offsets: Vec<u64>,
    pub labels: Vec<u16>,
}

impl CacheManifest {
    pub fn slot_shapes(&self) -> Vec<Vec<usize>> {
        self.cut.slots.iter().map(|s| s.shape.clone()).collect()
    }

    /// Sample indices in the order their records appear in the file.
    pub fn write_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples).collect();
        order.sort_by_key(|&i| self.offsets[i]);
        order
    }

    fn check(&self) -> Result<()> {
        if self.magic.as_bytes() != MAGIC || self.version != VERSION {
            return Err(Error::Format(format!(
                "manifest for {:?} v{}, expected LDFC v{VERSION}",
                self.magic, self.version
            )));
        }
        if self.offsets.len() != self.samples || self.labels.len() != self.samples {
            return Err(Error::Format("manifest offsets or labels do not cover every sample".into()));
        }
        let expected = HEADER_BYTES + self.record_bytes * self.samples as u64;
        if self.total_bytes != expected || self.record_bytes != record_bytes(&self.cut.slots) {
            return Err(Error::Format("manifest sizes are inconsistent with its slot shapes".into()));
        }
        Ok(())
    }
}

fn record_bytes(slots: &[SlotDesc]) -> u64 {
    4 + slots.iter().map(SlotDesc::bytes).sum::<u64>() + 2
}

/// Sidecar path for a data file.
pub fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::cache_io(path, e)
}

#[derive(Debug)]
enum Sink {
    Disk { path: PathBuf, file: BufWriter<File> },
    Memory(Vec<u8>),
}

#[derive(Debug, Clone)]
enum Store {
    Disk(PathBuf),
    Memory(Vec<u8>),
}

/// Where a new cache goes.
#[derive(Debug, Clone)]
pub enum Target {
    Disk(PathBuf),
    Memory,
}

impl Target {
    pub fn new(backend: Backend, path: impl Into<PathBuf>) -> Self {
        match backend {
            Backend::Disk => Target::Disk(path.into()),
            Backend::Memory => Target::Memory,
        }
    }
}

/// Appends records one batch at a time.
#[derive(Debug)]
pub struct CacheWriter {
    manifest: CacheManifest,
    written: Vec<bool>,
    pos: u64,
    sink: Sink,
}

impl CacheWriter {
    pub fn create(target: Target, cut: CutDesc, fingerprint: &str, order_seed: u64, samples: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::EmptyInput("cache with no samples"));
        }
        if cut.slots.iter().any(|s| s.dtype != DType::F32) {
            return Err(Error::Argument("cached features are stored as f32".into()));
        }
        let rb = record_bytes(&cut.slots);
        let mut sink = match target {
            Target::Disk(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                }
                let file = File::create(&path).map_err(io_err(&path))?;
                Sink::Disk {
                    file: BufWriter::with_capacity(1 << 20, file),
                    path,
                }
            }
            Target::Memory => Sink::Memory(Vec::with_capacity((HEADER_BYTES + rb * samples as u64) as usize)),
        };
        let mut header = Vec::with_capacity(HEADER_BYTES as usize);
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        Self::put(&mut sink, &header)?;
        Ok(CacheWriter {
            manifest: CacheManifest {
                magic: String::from_utf8(MAGIC.to_vec()).expect("ascii"),
                version: VERSION,
                fingerprint: fingerprint.to_owned(),
                order_seed,
                samples,
                cut,
                record_bytes: rb,
                total_bytes: HEADER_BYTES + rb * samples as u64,
                offsets: vec![0; samples],
                labels: vec![0; samples],
            },
            written: vec![false; samples],
            pos: HEADER_BYTES,
            sink,
        })
    }

    fn put(sink: &mut Sink, bytes: &[u8]) -> Result<()> {
        match sink {
            Sink::Disk { path, file } => file.write_all(bytes).map_err(io_err(path)),
            Sink::Memory(v) => {
                v.extend_from_slice(bytes);
                Ok(())
            }
        }
    }

    /// Writes one record per row of `slots`.
    pub fn write_batch(&mut self, indices: &[usize], slots: &[Tensor<f32>], labels: &[usize]) -> Result<()> {
        let m = &self.manifest;
        if slots.len() != m.cut.slots.len() {
            return Err(Error::Consistency(format!(
                "batch carries {} slots, cache expects {}",
                slots.len(),
                m.cut.slots.len()
            )));
        }
        for (t, d) in slots.iter().zip(&m.cut.slots) {
            if t.batch() != indices.len() || t.shape()[1..] != d.shape[..] {
                return Err(Error::Consistency(format!(
                    "slot tensor {:?} does not match [{}, {:?}]",
                    t.shape(),
                    indices.len(),
                    d.shape
                )));
            }
        }
        if labels.len() != indices.len() {
            return Err(Error::Consistency(format!("{} labels for {} samples", labels.len(), indices.len())));
        }
        let mut buf = Vec::with_capacity(m.record_bytes as usize);
        for (row, (&idx, &label)) in indices.iter().zip(labels).enumerate() {
            if idx >= self.written.len() || self.written[idx] {
                return Err(Error::Consistency(format!("sample {idx} is out of range or already cached")));
            }
            let label = u16::try_from(label).map_err(|_| Error::Data(format!("label {label} exceeds 16 bits")))?;
            buf.clear();
            buf.extend_from_slice(&(idx as u32).to_le_bytes());
            for t in slots {
                for v in t.sample(row) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            buf.extend_from_slice(&label.to_le_bytes());
            Self::put(&mut self.sink, &buf)?;
            self.manifest.offsets[idx] = self.pos;
            self.manifest.labels[idx] = label;
            self.written[idx] = true;
            self.pos += buf.len() as u64;
        }
        Ok(())
    }

    /// Flushes the data file and writes the sidecar.
    pub fn finish(self) -> Result<FeatureCache> {
        if let Some(missing) = self.written.iter().position(|w| !w) {
            return Err(Error::Consistency(format!("sample {missing} was never cached")));
        }
        let store = match self.sink {
            Sink::Disk { path, file } => {
                let file = file.into_inner().map_err(|e| Error::cache_io(&path, e.error()))?;
                file.sync_all().map_err(io_err(&path))?;
                let side = manifest_path(&path);
                let json = serde_json::to_vec(&self.manifest)?;
                std::fs::write(&side, json).map_err(io_err(&side))?;
                Store::Disk(path)
            }
            Sink::Memory(v) => Store::Memory(v),
        };
        Ok(FeatureCache {
            manifest: self.manifest,
            store,
        })
    }
}

/// A finished cache.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    manifest: CacheManifest,
    store: Store,
}

/// Outcome of a full scan of the data file.
#[derive(Debug, Clone, PartialEq)]
pub struct Integrity {
    pub records: usize,
    pub bytes: u64,
    /// `(sample index, reason)` for every bad record.
    pub corrupt: Vec<(usize, String)>,
}

impl Integrity {
    pub fn is_ok(&self) -> bool {
        self.corrupt.is_empty()
    }
}

impl FeatureCache {
    /// Opens a disk cache from its data file or its sidecar.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let data = match path.to_str().and_then(|s| s.strip_suffix(".json")) {
            Some(stem) => PathBuf::from(stem),
            None => path.to_path_buf(),
        };
        let side = manifest_path(&data);
        let bytes = std::fs::read(&side).map_err(io_err(&side))?;
        if bytes.is_empty() {
            return Err(Error::Format(format!("{} is empty", side.display())));
        }
        let manifest: CacheManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        manifest.check()?;
        let mut file = File::open(&data).map_err(io_err(&data))?;
        let mut header = [0u8; HEADER_BYTES as usize];
        file.read_exact(&mut header)
            .map_err(|_| Error::Format(format!("{} is shorter than its header", data.display())))?;
        check_header(&header)?;
        Ok(FeatureCache {
            manifest,
            store: Store::Disk(data),
        })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.samples
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples == 0
    }

    pub fn backend(&self) -> Backend {
        match self.store {
            Store::Disk(_) => Backend::Disk,
            Store::Memory(_) => Backend::Memory,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.store {
            Store::Disk(p) => Some(p),
            Store::Memory(_) => None,
        }
    }

    /// Size of the stored data in bytes.
    pub fn stored_bytes(&self) -> Result<u64> {
        match &self.store {
            Store::Disk(p) => Ok(std::fs::metadata(p).map_err(io_err(p))?.len()),
            Store::Memory(v) => Ok(v.len() as u64),
        }
    }

    /// Removes the files of a disk cache.
    pub fn delete(self) -> Result<()> {
        if let Store::Disk(p) = &self.store {
            std::fs::remove_file(p).map_err(io_err(p))?;
            let side = manifest_path(p);
            std::fs::remove_file(&side).map_err(io_err(&side))?;
        }
        Ok(())
    }

    fn decode(&self, idx: usize, rec: &[u8]) -> std::result::Result<Vec<Vec<f32>>, String> {
        let m = &self.manifest;
        if rec.len() as u64 != m.record_bytes {
            return Err(format!("record holds {} bytes, expected {}", rec.len(), m.record_bytes));
        }
        let stored = u32::from_le_bytes(rec[..4].try_into().expect("four bytes")) as usize;
        if stored != idx {
            return Err(format!("record claims sample {stored}"));
        }
        let mut at = 4;
        let mut out = Vec::with_capacity(m.cut.slots.len());
        for s in &m.cut.slots {
            let n = s.bytes() as usize;
            let vals: Vec<f32> = rec[at..at + n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            if let Some(p) = vals.iter().position(|v| !v.is_finite()) {
                return Err(format!("non-finite feature at element {p}"));
            }
            out.push(vals);
            at += n;
        }
        let label = u16::from_le_bytes(rec[at..at + 2].try_into().expect("two bytes"));
        if label != m.labels[idx] {
            return Err(format!("label {label} differs from manifest label {}", m.labels[idx]));
        }
        Ok(out)
    }

    /// Reads the given samples as one batch per slot.
    pub fn fetch(&self, indices: &[usize]) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
        let m = &self.manifest;
        let mut reader = RecordReader::new(&self.store)?;
        let mut slots: Vec<Vec<f32>> = m.cut.slots.iter().map(|s| Vec::with_capacity(s.bytes() as usize / 4 * indices.len())).collect();
        let mut labels = Vec::with_capacity(indices.len());
        let mut rec = vec![0u8; m.record_bytes as usize];
        for &idx in indices {
            if idx >= m.samples {
                return Err(Error::Argument(format!("sample {idx} out of range for {} cached", m.samples)));
            }
            reader
                .read(m.offsets[idx], &mut rec)
                .map_err(|msg| Error::CorruptRecord { index: idx, msg })?;
            let vals = self.decode(idx, &rec).map_err(|msg| Error::CorruptRecord { index: idx, msg })?;
            for (dst, v) in slots.iter_mut().zip(vals) {
                dst.extend(v);
            }
            labels.push(m.labels[idx] as usize);
        }
        let tensors = slots
            .into_iter()
            .zip(&m.cut.slots)
            .map(|(data, d)| {
                let mut shape = vec![indices.len()];
                shape.extend(&d.shape);
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((tensors, labels))
    }

    /// Batches in `order`, the last one partial when `batch_size` does not
    /// divide the sample count.
    pub fn read_batches<'a>(&'a self, batch_size: usize, order: &'a [usize]) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
        check_order(order, self.len(), batch_size)?;
        Ok(order.chunks(batch_size).map(move |idx| {
            let (slots, labels) = self.fetch(idx)?;
            Ok(Batch {
                indices: idx.to_vec(),
                slots,
                labels,
            })
        }))
    }

    /// Scans every record.
    pub fn verify(&self) -> Result<Integrity> {
        let m = &self.manifest;
        let mut corrupt = Vec::new();
        let bytes = self.stored_bytes()?;
        let mut reader = RecordReader::new(&self.store)?;
        let mut header = [0u8; HEADER_BYTES as usize];
        if reader.read(0, &mut header).is_err() || check_header(&header).is_err() {
            return Err(Error::Format("data file header is missing or wrong".into()));
        }
        let mut rec = vec![0u8; m.record_bytes as usize];
        for idx in m.write_order() {
            let res = reader.read(m.offsets[idx], &mut rec).and_then(|_| self.decode(idx, &rec).map(|_| ()));
            if let Err(msg) = res {
                corrupt.push((idx, msg));
            }
        }
        if bytes != m.total_bytes {
            corrupt.push((m.samples, format!("file holds {bytes} bytes, manifest predicts {}", m.total_bytes)));
        }
        Ok(Integrity {
            records: m.samples,
            bytes,
            corrupt,
        })
    }
}

fn check_header(h: &[u8]) -> Result<()> {
    if &h[..4] != MAGIC {
        return Err(Error::Format(format!("bad cache magic {:?}", &h[..4])));
    }
    let v = u16::from_le_bytes([h[4], h[5]]);
    if v != VERSION {
        return Err(Error::Format(format!("unsupported cache version {v}")));
    }
    Ok(())
}

fn check_order(order: &[usize], n: usize, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Argument(format!("order is not a permutation of 0..{n}")));
        }
    }
    if order.len() != n {
        return Err(Error::Argument(format!("order covers {} of {n} samples", order.len())));
    }
    Ok(())
}

enum RecordReader<'a> {
    Disk(File),
    Memory(&'a [u8]),
}

impl<'a> RecordReader<'a> {
    fn new(store: &'a Store) -> Result<Self> {
        Ok(match store {
            Store::Disk(p) => RecordReader::Disk(File::open(p).map_err(io_err(p))?),
            Store::Memory(v) => RecordReader::Memory(v),
        })
    }

    fn read(&mut self, offset: u64, buf: &mut [u8]) -> std::result::Result<(), String> {
        match self {
            RecordReader::Disk(f) => {
                f.seek(SeekFrom::Start(offset)).map_err(|e| e.to_string())?;
                f.read_exact(buf).map_err(|e| format!("short record: {e}"))
            }
            RecordReader::Memory(v) => {
                let end = offset as usize + buf.len();
                let src = v.get(offset as usize..end).ok_or("short record")?;
                buf.copy_from_slice(src);
                Ok(())
            }
        }
    }
}

/// One batch of frontier tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub slots: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

/// Anything that yields per-sample input slots by index.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn slot_shapes(&self) -> Vec<Vec<usize>>;
    fn fetch(&self, indices: &[usize]) -> Result<(Vec<Tensor<f32>>, Vec<usize>)>;
}

impl BatchSource for Dataset {
    fn len(&self) -> usize {
        Dataset::len(self)
    }

    fn slot_shapes(&self) -> Vec<Vec<usize>> {
        vec![self.sample_shape().to_vec()]
    }

    fn fetch(&self, indices: &[usize]) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
        let (x, y) = self.batch(indices)?;
        Ok((vec![x], y))
    }
}

impl BatchSource for FeatureCache {
    fn len(&self) -> usize {
        self.manifest.samples
    }

    fn slot_shapes(&self) -> Vec<Vec<usize>> {
        self.manifest.slot_shapes()
    }

    fn fetch(&self, indices: &[usize]) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
        FeatureCache::fetch(self, indices)
    }
}

/// What a cache pass writes and how it is labelled.
#[derive(Debug, Clone)]
pub struct CachePlan {
    pub target: Target,
    pub cut: CutPoint,
    pub fingerprint: String,
    pub order_seed: u64,
    pub batch_size: usize,
}

/// Runs `tail` in eval mode over every sample of `source` in `order`,
/// writing the frontier tensors and handing each batch to `on_batch`
/// after it is written.
pub fn write_epoch<S, F>(tail: &NetGraph<f32>, source: &S, order: &[usize], plan: CachePlan, mut on_batch: F) -> Result<FeatureCache>
where
    S: BatchSource + ?Sized,
    F: FnMut(Batch) -> Result<()>,
{
    check_order(order, source.len(), plan.batch_size)?;
    if &source.slot_shapes() != tail.input_shapes() {
        return Err(Error::Consistency(format!(
            "tail expects {:?}, source provides {:?}",
            tail.input_shapes(),
            source.slot_shapes()
        )));
    }
    let slots = tail
        .output_shapes()?
        .into_iter()
        .map(|shape| SlotDesc { shape, dtype: DType::F32 })
        .collect();
    let cut = CutDesc {
        cut: plan.cut,
        tail_stages: tail.stages().iter().map(|s| s.id).collect(),
        slots,
    };
    let mut writer = CacheWriter::create(plan.target, cut, &plan.fingerprint, plan.order_seed, source.len())?;
    for idx in order.chunks(plan.batch_size) {
        let (x, labels) = source.fetch(idx)?;
        let features = tail.eval(x)?;
        writer.write_batch(idx, &features, &labels)?;
        on_batch(Batch {
            indices: idx.to_vec(),
            slots: features,
            labels,
        })?;
    }
    writer.finish()
}

/// Pushes an existing cache through further frozen stages, keeping the
/// record order. The new cut is recorded in the result.
pub fn rebase(old: &FeatureCache, suffix: &NetGraph<f32>, cut: CutPoint, target: Target, batch_size: usize) -> Result<FeatureCache> {
    let m = old.manifest();
    let mut tail_stages = m.cut.tail_stages.clone();
    let plan = CachePlan {
        target,
        cut,
        fingerprint: m.fingerprint.clone(),
        order_seed: m.order_seed,
        batch_size,
    };
    let mut cache = write_epoch(suffix, old, &m.write_order(), plan, |_| Ok(()))?;
    tail_stages.extend(suffix.stages().iter().map(|s| s.id));
    cache.manifest.cut.tail_stages = tail_stages;
    if let Store::Disk(p) = &cache.store {
        let side = manifest_path(p);
        std::fs::write(&side, serde_json::to_vec(&cache.manifest)?).map_err(io_err(&side))?;
    }
    Ok(cache)
}

/// Graph with no stages over `input`, the tail of an empty cut.
pub fn identity_tail(input: Vec<Vec<usize>>, classes: usize) -> Result<NetGraph<f32>> {
    NetGraph::from_stages("identity", input, classes, 0, Vec::new())
}
