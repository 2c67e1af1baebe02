// SPDX-License-Identifier: MIT OR Apache-2.0

//! Score cache keyed by `(instance digest, mask)`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

type Key = (String, Mask);

/// Thread-safe logprob cache. Readers share the lock; inserts are exclusive.
#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: RwLock<HashMap<Key, Arc<[f64]>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Serialize, Deserialize)]
struct SpillRecord {
    instance: String,
    mask: String,
    logprobs: Vec<f64>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Looks up a row, counting a hit or a miss.
    pub fn get(&self, digest: &str, mask: &Mask) -> Option<Arc<[f64]>> {
        let found = self
            .entries
            .read()
            .expect("cache lock poisoned")
            .get(&(digest.to_string(), mask.clone()))
            .cloned();
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    /// Stores a row. An existing row for the key is kept, so concurrent
    /// writers never replace values already handed out.
    pub fn insert(&self, digest: &str, mask: Mask, logprobs: Arc<[f64]>) -> Arc<[f64]> {
        self.entries
            .write()
            .expect("cache lock poisoned")
            .entry((digest.to_string(), mask))
            .or_insert(logprobs)
            .clone()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// Writes every entry as JSON-lines, sorted by key.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let entries = self.entries.read().expect("cache lock poisoned");
        let mut keys: Vec<&Key> = entries.keys().collect();
        keys.sort();
        let mut out = BufWriter::new(File::create(path)?);
        for key in keys {
            let record = SpillRecord {
                instance: key.0.clone(),
                mask: key.1.to_string(),
                logprobs: entries[key].to_vec(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads entries written by [`ScoreCache::save_jsonl`]. Returns how many
    /// rows were read.
    pub fn load_jsonl(&self, path: &Path) -> Result<usize> {
        let reader = BufReader::new(File::open(path)?);
        let mut n = 0;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SpillRecord = serde_json::from_str(&line)?;
            let mask = Mask::parse(&record.mask)
                .ok_or_else(|| Error::Invalid(format!("cache line {}: bad mask {:?}", lineno + 1, record.mask)))?;
            self.insert(&record.instance, mask, record.logprobs.into());
            n += 1;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_hits_and_misses() {
        let cache = ScoreCache::new();
        let m = Mask::full(2);
        assert!(cache.get("abc", &m).is_none());
        cache.insert("abc", m.clone(), vec![-1.0].into());
        assert_eq!(&*cache.get("abc", &m).unwrap(), &[-1.0]);
        assert!(cache.get("abd", &m).is_none());
        assert_eq!((cache.hits(), cache.misses()), (1, 2));
    }

    #[test]
    fn first_insert_wins() {
        let cache = ScoreCache::new();
        cache.insert("a", Mask::empty(1), vec![-1.0].into());
        let kept = cache.insert("a", Mask::empty(1), vec![-2.0].into());
        assert_eq!(&*kept, &[-1.0]);
    }

    #[test]
    fn spill_roundtrip() {
        let dir = std::env::temp_dir().join(format!("seqattrib-cache-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cache.jsonl");
        let cache = ScoreCache::new();
        cache.insert("a", Mask::parse("10").unwrap(), vec![-0.25, -1.5].into());
        cache.insert("b", Mask::parse("01").unwrap(), vec![-0.125].into());
        cache.save_jsonl(&path).unwrap();

        let restored = ScoreCache::new();
        assert_eq!(restored.load_jsonl(&path).unwrap(), 2);
        assert_eq!(
            &*restored.get("a", &Mask::parse("10").unwrap()).unwrap(),
            &[-0.25, -1.5]
        );
        std::fs::remove_dir_all(dir).unwrap();
    }
}
