use std::fs;

use learndrop::dataio::{synth, Dataset};
use learndrop::featcache::{
    identity_tail, manifest_path, rebase, write_epoch, Backend, CachePlan, FeatureCache, Target, HEADER_BYTES,
};
use learndrop::{build, ArchPreset, CutPoint, Error, NetGraph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(n_per_class: usize) -> Dataset {
    synth(4, n_per_class, &[1, 16, 16], 3).unwrap()
}

fn plan(target: Target, cut: CutPoint, ds: &Dataset, batch: usize) -> CachePlan {
    CachePlan {
        target,
        cut,
        fingerprint: ds.fingerprint().to_owned(),
        order_seed: 0,
        batch_size: batch,
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[test]
fn identity_tail_round_trips_raw_inputs() {
    let ds = data(5);
    let tail = identity_tail(vec![ds.sample_shape().to_vec()], 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let order = shuffled(ds.len(), 1);
    let cache = write_epoch(&tail, &ds, &order, plan(Target::Disk(dir.path().join("c.ldfc")), CutPoint::Boundary(0), &ds, 7), |_| Ok(())).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let (slots, labels) = cache.fetch(&all).unwrap();
    assert!(slots[0].bitwise_eq(ds.images()));
    assert_eq!(labels, ds.labels());
}

#[test]
fn file_size_matches_manifest_exactly() {
    let ds = data(6);
    let g = build::<f32>(ArchPreset::TinyVgg, &[1, 16, 16], 4, 0).unwrap();
    let (tail, _) = g.split(g.cut_after(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ldfc");
    let cache = write_epoch(&tail, &ds, &shuffled(ds.len(), 2), plan(Target::Disk(path.clone()), g.cut_after(1), &ds, 5), |_| Ok(())).unwrap();
    let m = cache.manifest();
    let payload: u64 = m.cut.slots.iter().map(|s| s.bytes()).sum();
    let expected = HEADER_BYTES + ds.len() as u64 * (4 + payload + 2);
    assert_eq!(fs::metadata(&path).unwrap().len(), expected);
    assert_eq!(m.total_bytes, expected);
    let raw = fs::read(&path).unwrap();
    assert_eq!(&raw[..6], b"LDFC\x01\x00");
    assert!(manifest_path(&path).exists());
    assert!(cache.verify().unwrap().is_ok());
}

#[test]
fn rewriting_gives_identical_bytes() {
    let ds = data(4);
    let g = build::<f32>(ArchPreset::TinyResnet, &[1, 16, 16], 4, 9).unwrap();
    let cut = CutPoint::InBlock(2);
    let (tail, _) = g.split(cut).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let order = shuffled(ds.len(), 4);
    for name in ["a", "b"] {
        write_epoch(&tail, &ds, &order, plan(Target::Disk(dir.path().join(name)), cut, &ds, 3), |_| Ok(())).unwrap();
    }
    assert_eq!(fs::read(dir.path().join("a")).unwrap(), fs::read(dir.path().join("b")).unwrap());
}

#[test]
fn batches_cover_every_sample_once_with_partial_tail() {
    let ds = data(5);
    let tail = identity_tail(vec![ds.sample_shape().to_vec()], 4).unwrap();
    let cache = write_epoch(&tail, &ds, &shuffled(20, 0), plan(Target::Memory, CutPoint::Boundary(0), &ds, 6), |_| Ok(())).unwrap();
    let identity: Vec<usize> = (0..20).collect();
    let batches: Vec<_> = cache.read_batches(6, &identity).unwrap().map(Result::unwrap).collect();
    assert_eq!(batches.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), vec![6, 6, 6, 2]);
    assert_eq!(batches.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>(), identity);
    let perm = shuffled(20, 8);
    let mut seen: Vec<usize> = cache.read_batches(6, &perm).unwrap().flat_map(|b| b.unwrap().indices).collect();
    assert_eq!(seen, perm);
    seen.sort();
    assert_eq!(seen, identity);
    assert!(cache.read_batches(6, &identity[..19]).is_err());
}

#[test]
fn writer_feeds_the_caller_each_batch() {
    let ds = data(5);
    let tail = identity_tail(vec![ds.sample_shape().to_vec()], 4).unwrap();
    let order = shuffled(20, 3);
    let mut fed = Vec::new();
    write_epoch(&tail, &ds, &order, plan(Target::Memory, CutPoint::Boundary(0), &ds, 8), |b| {
        fed.extend(b.indices);
        Ok(())
    })
    .unwrap();
    assert_eq!(fed, order);
}

/// head(read(write(tail(x)))) == full(x), bitwise, at every legal cut.
#[test]
fn split_and_cache_preserve_logits_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    use rand::Rng;
    let x = Tensor::<f32>::from_fn(&[64, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
    let ds = Dataset::new(x, (0..64).map(|i| i % 4).collect(), 4, learndrop::dataio::SplitTag::Full, 0).unwrap();
    let all: Vec<usize> = (0..64).collect();
    for preset in [ArchPreset::TinyVgg, ArchPreset::TinyResnet] {
        let g = build::<f32>(preset, &[1, 16, 16], 4, 5).unwrap();
        let full = g.eval_logits(ds.images()).unwrap();
        let cuts = g.legal_cuts();
        if preset == ArchPreset::TinyResnet {
            assert!(cuts.iter().any(|c| matches!(c, CutPoint::InBlock(_))));
        }
        for cut in cuts {
            let (tail, head) = g.split(cut).unwrap();
            for backend in [Backend::Memory, Backend::Disk] {
                let dir = tempfile::tempdir().unwrap();
                let cache = write_epoch(&tail, &ds, &shuffled(64, 1), plan(Target::new(backend, dir.path().join("c")), cut, &ds, 16), |_| Ok(())).unwrap();
                let (slots, _) = cache.fetch(&all).unwrap();
                let out = head.eval(slots).unwrap();
                assert!(out[0].bitwise_eq(&full), "{preset} {cut:?} {backend:?}");
            }
        }
    }
}

fn stages_between(g: &NetGraph<f32>, from: usize, to: usize) -> NetGraph<f32> {
    let (_, rest) = g.split(CutPoint::Boundary(from)).unwrap();
    let (mid, _) = rest.split(CutPoint::Boundary(to - from)).unwrap();
    mid
}

#[test]
fn rebase_matches_fresh_cache_and_composes() {
    let ds = data(6);
    let g = build::<f32>(ArchPreset::TinyVgg, &[1, 16, 16], 4, 2).unwrap();
    let order = shuffled(ds.len(), 5);
    let c1 = g.cut_after(0).tail_stages();
    let c2 = g.cut_after(1).tail_stages();
    let c3 = g.cut_after(3).tail_stages();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let fresh = |cut: usize, name: &str| {
        let (tail, _) = g.split(CutPoint::Boundary(cut)).unwrap();
        write_epoch(&tail, &ds, &order, plan(Target::Disk(p(name)), CutPoint::Boundary(cut), &ds, 7), |_| Ok(())).unwrap()
    };
    let at1 = fresh(c1, "at1");
    let at3 = fresh(c3, "at3");

    let direct = rebase(&at1, &stages_between(&g, c1, c3), CutPoint::Boundary(c3), Target::Disk(p("direct")), 7).unwrap();
    assert_eq!(fs::read(p("direct")).unwrap(), fs::read(p("at3")).unwrap());
    assert_eq!(direct.manifest(), at3.manifest());

    let step = rebase(&at1, &stages_between(&g, c1, c2), CutPoint::Boundary(c2), Target::Disk(p("step")), 5).unwrap();
    let twice = rebase(&step, &stages_between(&g, c2, c3), CutPoint::Boundary(c3), Target::Memory, 3).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    assert!(twice.fetch(&all).unwrap().0[0].bitwise_eq(&direct.fetch(&all).unwrap().0[0]));

    let same = identity_tail(at1.manifest().slot_shapes(), 4).unwrap();
    rebase(&at1, &same, CutPoint::Boundary(c1), Target::Disk(p("same")), 4).unwrap();
    assert_eq!(fs::read(p("same")).unwrap(), fs::read(p("at1")).unwrap());

    let wrong = stages_between(&g, c2, c3);
    assert!(matches!(rebase(&at1, &wrong, CutPoint::Boundary(c3), Target::Memory, 4), Err(Error::Consistency(_))));
}

#[test]
fn reopened_cache_reads_back() {
    let ds = data(3);
    let tail = identity_tail(vec![ds.sample_shape().to_vec()], 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/c.ldfc");
    let c = write_epoch(&tail, &ds, &shuffled(12, 0), plan(Target::Disk(path.clone()), CutPoint::Boundary(0), &ds, 5), |_| Ok(())).unwrap();
    let again = FeatureCache::open(manifest_path(&path)).unwrap();
    assert_eq!(again.manifest(), c.manifest());
    assert_eq!(again.fetch(&[3]).unwrap().1, vec![ds.labels()[3]]);
}

#[test]
fn corruption_is_pinned_to_the_record() {
    let ds = data(3);
    let tail = identity_tail(vec![ds.sample_shape().to_vec()], 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ldfc");
    let c = write_epoch(&tail, &ds, &shuffled(12, 0), plan(Target::Disk(path.clone()), CutPoint::Boundary(0), &ds, 5), |_| Ok(())).unwrap();
    let victim = 7;
    let off = c.manifest().offsets[victim] as usize;
    let mut raw = fs::read(&path).unwrap();
    raw[off] ^= 0x01;
    fs::write(&path, &raw).unwrap();
    let report = c.verify().unwrap();
    assert_eq!(report.corrupt.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![victim]);
    assert!(matches!(c.fetch(&[victim]), Err(Error::CorruptRecord { index: 7, .. })));
    assert!(c.fetch(&[6]).is_ok());

    raw.truncate(raw.len() - 1);
    fs::write(&path, &raw).unwrap();
    assert!(!c.verify().unwrap().is_ok());
}

#[test]
fn empty_or_foreign_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ldfc");
    fs::write(&path, b"").unwrap();
    fs::write(manifest_path(&path), b"").unwrap();
    assert!(matches!(FeatureCache::open(&path), Err(Error::Format(_))));
}

#[test]
fn shape_drift_is_a_consistency_error() {
    use learndrop::featcache::{CacheWriter, CutDesc, SlotDesc};
    let cut = CutDesc {
        cut: CutPoint::Boundary(0),
        tail_stages: vec![],
        slots: vec![SlotDesc { shape: vec![2], dtype: learndrop::DType::F32 }],
    };
    let mut w = CacheWriter::create(Target::Memory, cut, "fp", 0, 2).unwrap();
    w.write_batch(&[0], &[Tensor::zeros(&[1, 2])], &[0]).unwrap();
    let err = w.write_batch(&[1], &[Tensor::zeros(&[1, 3])], &[0]).unwrap_err();
    assert!(matches!(err, Error::Consistency(_)));
    assert!(matches!(w.finish(), Err(Error::Consistency(_))));
}
