//! Memo of distance solves keyed by quantized query points.
//!
//! A lookup only returns a stored result when the stored query matches the
//! new one bit for bit, so cached and uncached runs produce identical
//! output. Reads may run concurrently; writes are serialized.

use crate::distance::{DistanceResult, ShootingOptions};
use crate::error::Result;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

const FILE_NAME: &str = "distance-cache-v1.json";
const SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    schema: u32,
    grid: f64,
    entries: Vec<(String, DistanceResult)>,
}

#[derive(Debug)]
pub struct DistanceCache {
    grid: f64,
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, DistanceResult>>,
}

impl DistanceCache {
    /// In-memory cache with quantization step `grid`.
    pub fn new(grid: f64) -> Self {
        Self {
            grid,
            dir: None,
            entries: RwLock::new(HashMap::new()),
        }
    }

    /// Cache persisted under `dir`, loading any existing file.
    pub fn open(dir: impl AsRef<Path>, grid: f64) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        let path = dir.join(FILE_NAME);
        if path.exists() {
            let file: CacheFile = serde_json::from_slice(&std::fs::read(&path)?)?;
            if file.schema == SCHEMA && file.grid == grid {
                entries.extend(file.entries);
            }
        }
        Ok(Self {
            grid,
            dir: Some(dir),
            entries: RwLock::new(entries),
        })
    }

    /// Persistent cache in `$SRMCP_CACHE_DIR` if set.
    pub fn from_env(grid: f64) -> Result<Option<Self>> {
        match std::env::var_os("SRMCP_CACHE_DIR") {
            Some(dir) => Ok(Some(Self::open(dir, grid)?)),
            None => Ok(None),
        }
    }

    pub fn grid(&self) -> f64 {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(&self, frame: &str, x: &[f64], y: &[f64], opts: &ShootingOptions) -> String {
        let q = |v: &[f64]| -> String {
            v.iter()
                .map(|a| format!("{}", (a / self.grid).round() as i64))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{frame}|{}|{}|{:?}|{}|{:e}|{:e}",
            q(x),
            q(y),
            opts.budget,
            opts.starts,
            opts.tol,
            opts.flow_tol
        )
    }

    pub fn get(
        &self,
        frame: &str,
        x: &[f64],
        y: &[f64],
        opts: &ShootingOptions,
    ) -> Option<DistanceResult> {
        let entries = self.entries.read();
        let hit = entries.get(&self.key(frame, x, y, opts))?;
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits())
        };
        (same(&hit.base, x) && same(&hit.target, y)).then(|| hit.clone())
    }

    pub fn insert(&self, frame: &str, opts: &ShootingOptions, result: DistanceResult) {
        let key = self.key(frame, &result.base, &result.target, opts);
        self.entries.write().insert(key, result);
    }

    /// Writes the cache file (sorted by key). No-op for in-memory caches.
    pub fn save(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        std::fs::create_dir_all(dir)?;
        let mut entries: Vec<_> = self
            .entries
            .read()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let file = CacheFile {
            schema: SCHEMA,
            grid: self.grid,
            entries,
        };
        let tmp = dir.join(format!("{FILE_NAME}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec(&file)?)?;
        std::fs::rename(tmp, dir.join(FILE_NAME))?;
        Ok(())
    }
}

impl Default for DistanceCache {
    fn default() -> Self {
        Self::new(1e-6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::distance_cached;
    use crate::Model;
    use nalgebra::DVector;

    #[test]
    fn persisted_entries_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = Model::builtin("heisenberg1").unwrap();
        let opts = ShootingOptions::default();
        let x = DVector::zeros(3);
        let y = DVector::from_column_slice(&[0.5, 0.2, 0.1]);
        let cache = DistanceCache::open(dir.path(), 1e-6).unwrap();
        let first = distance_cached(&h, &x, &y, &opts, Some(&cache)).unwrap();
        assert_eq!(cache.len(), 1);
        cache.save().unwrap();
        let reopened = DistanceCache::open(dir.path(), 1e-6).unwrap();
        assert_eq!(
            reopened.get("heisenberg1", x.as_slice(), y.as_slice(), &opts),
            Some(first)
        );
        // nearby but different query is a miss
        let y2 = DVector::from_column_slice(&[0.5 + 1e-9, 0.2, 0.1]);
        assert!(reopened
            .get("heisenberg1", x.as_slice(), y2.as_slice(), &opts)
            .is_none());
    }
}
