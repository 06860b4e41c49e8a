//! Datasets: IDX files, a synthetic generator and stratified splits.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: SplitTag,
    seed: u64,
    fingerprint: String,
}

impl Dataset {
    /// Images `[N, C, H, W]` in `[0, 1]` and their labels.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: SplitTag, seed: u64) -> Result<Self> {
        images.dims4()?;
        if images.batch() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Label { index, label, classes });
        }
        if classes > u16::MAX as usize + 1 {
            return Err(Error::Data(format!("{classes} classes do not fit a 16-bit label")));
        }
        let fingerprint = fingerprint(&images, &labels, seed);
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            seed,
            fingerprint,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Hex SHA-256 over shape, pixels, labels and seed.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels of the given samples, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let x = self.images.gather(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Data(format!("empty {split} subset")));
        }
        let (x, y) = self.batch(indices)?;
        Dataset::new(x, y, self.classes, split, self.seed)
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn fingerprint(images: &Tensor<f32>, labels: &[usize], seed: u64) -> String {
    let mut h = Sha256::new();
    for &d in images.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in images.data() {
        h.update(v.to_le_bytes());
    }
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    h.update(seed.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("{}: truncated header", self.what)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(b.try_into().expect("four bytes")))
    }

    fn body(&self, len: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() != len {
            return Err(Error::Format(format!(
                "{}: expected {len} data bytes, found {}",
                self.what,
                rest.len()
            )));
        }
        Ok(rest)
    }
}

/// Parses an IDX image file and label file held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut ri = IdxReader {
        bytes: images,
        pos: 0,
        what: "image file",
    };
    let magic = ri.u32()?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!("image file magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let (n, h, w) = (ri.u32()? as usize, ri.u32()? as usize, ri.u32()? as usize);
    let pixels = ri.body(n * h * w)?;

    let mut rl = IdxReader {
        bytes: labels,
        pos: 0,
        what: "label file",
    };
    let magic = rl.u32()?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!("label file magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let m = rl.u32()? as usize;
    let label_bytes = rl.body(m)?;
    if m != n {
        return Err(Error::Consistency(format!("{n} images but {m} labels")));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("degenerate IDX dimensions {n}x{h}x{w}")));
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, classes.max(10), SplitTag::Full, 0)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Loads the standard MNIST file pair from `dir`: `train-*` when `train`,
/// else `t10k-*`.
pub fn load_mnist(dir: impl AsRef<Path>, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let dir = dir.as_ref();
    let mut ds = load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = if train { SplitTag::Train } else { SplitTag::Test };
    Ok(ds)
}

/// Class-conditional blob images. Each class owns a random prototype of a
/// few Gaussian bumps; samples jitter the bumps by up to one pixel and add
/// pixel noise. Samples are interleaved by class.
pub fn synth(classes: usize, n_per_class: usize, shape: &[usize], seed: u64) -> Result<Dataset> {
    let [c, h, w] = *shape else {
        return Err(Error::Argument(format!("synthetic shape must be [C, H, W], got {shape:?}")));
    };
    if classes == 0 || n_per_class == 0 || c == 0 || h < 4 || w < 4 {
        return Err(Error::Argument(format!(
            "synthetic data needs positive counts and at least 4x4 images, got {classes} classes, {n_per_class} per class, {shape:?}"
        )));
    }
    const BUMPS: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (h.min(w) as f64 / 6.0).max(1.0);
    let prototypes: Vec<Vec<(usize, f64, f64)>> = (0..classes)
        .map(|_| {
            (0..BUMPS)
                .map(|_| {
                    (
                        rng.gen_range(0..c),
                        rng.gen_range(1.0..(h - 1) as f64),
                        rng.gen_range(1.0..(w - 1) as f64),
                    )
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.2).expect("valid deviation");
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let bumps: Vec<(usize, f64, f64)> = prototypes[label]
            .iter()
            .map(|&(ch, y, x)| (ch, y + rng.gen_range(-1.0..1.0), x + rng.gen_range(-1.0..1.0)))
            .collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for &(bc, by, bx) in &bumps {
                        if bc == ch {
                            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                            v += (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                    v += noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes, SplitTag::Full, seed)
}

/// Stratified seeded partition into train, validation and test subsets.
///
/// Each class is shuffled, the classes are interleaved round-robin, and the
/// interleaved sequence is cut into consecutive chunks of
/// `floor(fraction · N)` samples, so every chunk holds each class within one
/// sample of its proportional share. Samples beyond the three chunks are
/// left out. An empty chunk is returned as `None`.
pub fn split(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<[Option<Dataset>; 3]> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Argument(format!("split fractions must be non-negative, got {f:?}")));
    }
    if f.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Argument(format!("split fractions sum to more than 1: {f:?}")));
    }
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for list in &mut by_class {
        list.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(n);
    let mut cursors = vec![0; by_class.len()];
    while order.len() < n {
        for (list, cur) in by_class.iter().zip(&mut cursors) {
            if *cur < list.len() {
                order.push(list[*cur]);
                *cur += 1;
            }
        }
    }
    let sizes = f.map(|x| (x * n as f64 + 1e-9).floor() as usize);
    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let mut start = 0;
    let mut out: [Option<Dataset>; 3] = [None, None, None];
    for k in 0..3 {
        let chunk = &order[start..start + sizes[k]];
        start += sizes[k];
        if !chunk.is_empty() {
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            out[k] = Some(ds.subset(&idx, tags[k])?);
        }
    }
    Ok(out)
}

/// A stratified subset of `n` samples.
pub fn stratified_subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::Argument(format!("subset of {n} from {} samples", ds.len())));
    }
    if n == ds.len() {
        return Ok(ds.clone());
    }
    let [train, _, _] = split(ds, (n as f64 / ds.len() as f64, 0.0, 0.0), seed)?;
    let mut sub = train.expect("non-empty subset");
    sub.split = ds.split;
    Ok(sub)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES, n, h, w] {
            v.extend(x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_and_normalizes() {
        let ds = parse_idx(&idx_images(2, 2, 2, &[0, 255, 51, 0, 1, 2, 3, 4]), &idx_labels(&[3, 7])).unwrap();
        assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images().data()[1], 1.0);
        assert_eq!(ds.images().data()[2], 0.2);
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.classes(), 10);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x02;
        assert!(matches!(parse_idx(&bad, &idx_labels(&[0])), Err(Error::Format(_))));
        let short = idx_images(2, 2, 2, &[0; 7]);
        assert!(matches!(parse_idx(&short, &idx_labels(&[0, 1])), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&[0, 0], &idx_labels(&[0])), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&[], &idx_labels(&[0])), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let err = parse_idx(&idx_images(2, 1, 1, &[0, 0]), &idx_labels(&[0, 1, 2])).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth(2, 8, &[1, 8, 8], 5).unwrap();
        let b = synth(2, 8, &[1, 8, 8], 5).unwrap();
        let c = synth(2, 8, &[1, 8, 8], 6).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a.class_counts(), vec![8, 8]);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = synth(10, 10, &[1, 4, 4], 1).unwrap();
        let [tr, va, te] = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        let (tr, va, te) = (tr.unwrap(), va.unwrap(), te.unwrap());
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert_eq!(tr.class_counts(), vec![8; 10]);
        assert_eq!(va.class_counts(), vec![1; 10]);
        let mut all: Vec<Vec<u32>> = [&tr, &va, &te]
            .iter()
            .flat_map(|d| (0..d.len()).map(|i| d.images().sample(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect();
        let mut orig: Vec<Vec<u32>> = (0..ds.len()).map(|i| ds.images().sample(i).iter().map(|v| v.to_bits()).collect()).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        let again = split(&ds, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(again[0].as_ref().unwrap().fingerprint(), tr.fingerprint());
    }

    #[test]
    fn split_rejects_oversubscription() {
        let ds = synth(2, 4, &[1, 4, 4], 1).unwrap();
        assert!(matches!(split(&ds, (0.8, 0.2, 0.1), 0), Err(Error::Argument(_))));
    }

    #[test]
    fn stratified_subset_keeps_balance() {
        let ds = synth(4, 25, &[1, 4, 4], 1).unwrap();
        let sub = stratified_subset(&ds, 42, 0).unwrap();
        assert_eq!(sub.len(), 42);
        for c in sub.class_counts() {
            assert!((10..=11).contains(&c));
        }
    }
}
