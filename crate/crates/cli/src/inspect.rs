use std::path::Path;

use anyhow::anyhow;
use learndrop::featcache::FeatureCache;

use crate::Failure;

pub fn run(path: &Path) -> Result<(), Failure> {
    let cache = FeatureCache::open(path)?;
    let m = cache.manifest();
    println!("cut:          {:?}", m.cut.cut);
    println!("tail stages:  {:?}", m.cut.tail_stages);
    for (i, s) in m.cut.slots.iter().enumerate() {
        println!("slot {i}:       {:?} {:?}", s.shape, s.dtype);
    }
    println!("records:      {}", m.samples);
    println!("record bytes: {}", m.record_bytes);
    println!("total bytes:  {}", m.total_bytes);
    println!("fingerprint:  {}", m.fingerprint);
    let integrity = cache.verify()?;
    if integrity.is_ok() {
        println!("integrity:    ok ({} records, {} bytes)", integrity.records, integrity.bytes);
        return Ok(());
    }
    for (index, msg) in &integrity.corrupt {
        eprintln!("corrupt record {index}: {msg}");
    }
    let indices: Vec<usize> = integrity.corrupt.iter().map(|c| c.0).collect();
    Err(Failure::Run(anyhow!("integrity error: corrupt records at sample indices {indices:?}")))
}
