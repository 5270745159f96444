//! Physical key/value cache with original token positions.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

pub const BYTES_PER_SCALAR: usize = std::mem::size_of::<f64>();

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    /// `false` for prefill entries kept only because they fall inside the
    /// recent window; those expire as decoding moves past them.
    pub pinned: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadCache {
    pub entries: Vec<CacheEntry>,
}

impl HeadCache {
    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-layer, per-head retained entries.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache {
    pub layers: Vec<Vec<HeadCache>>,
    pub n_prefill: usize,
    pub n_decoded: usize,
    pub recent_window: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl KVCache {
    pub fn empty(n_layers: usize, n_heads: usize, d_k: usize, d_v: usize, recent_window: usize) -> Self {
        Self {
            layers: vec![vec![HeadCache::default(); n_heads]; n_layers],
            n_prefill: 0,
            n_decoded: 0,
            recent_window,
            d_k,
            d_v,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn next_position(&self) -> usize {
        self.n_prefill + self.n_decoded
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadCache {
        &self.layers[layer][head]
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().flatten().map(HeadCache::len).sum()
    }

    /// Prefill entries still held by one head.
    pub fn retained_prefill(&self, layer: usize, head: usize) -> usize {
        self.layers[layer][head]
            .entries
            .iter()
            .filter(|e| e.position < self.n_prefill)
            .count()
    }

    pub fn entry_bytes(&self) -> usize {
        (self.d_k + self.d_v) * BYTES_PER_SCALAR
    }

    /// Bytes one head spends on prefill entries.
    pub fn head_prefill_bytes(&self, layer: usize, head: usize) -> usize {
        self.retained_prefill(layer, head) * self.entry_bytes()
    }

    /// Bytes of the prefill part of the cache as stored.
    pub fn prefill_bytes(&self) -> usize {
        (0..self.n_layers())
            .flat_map(|l| (0..self.n_heads()).map(move |h| (l, h)))
            .map(|(l, h)| self.head_prefill_bytes(l, h))
            .sum()
    }

    /// Bytes the prefill part would take with nothing evicted.
    pub fn full_prefill_bytes(&self) -> usize {
        self.n_prefill * self.n_layers() * self.n_heads() * self.entry_bytes()
    }

    /// Fraction of prefill entries dropped, per layer and head.
    pub fn eviction_per_head(&self) -> Vec<Vec<f64>> {
        (0..self.n_layers())
            .map(|l| {
                (0..self.n_heads())
                    .map(|h| {
                        if self.n_prefill == 0 {
                            0.0
                        } else {
                            1.0 - self.retained_prefill(l, h) as f64 / self.n_prefill as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn eviction_ratio(&self) -> f64 {
        let per = self.eviction_per_head();
        let count = (self.n_layers() * self.n_heads()).max(1);
        per.iter().flatten().sum::<f64>() / count as f64
    }

    /// Drops window-only entries that a query at `position` no longer sees.
    pub(crate) fn expire_window(&mut self, position: usize) {
        let r = self.recent_window;
        for head in self.layers.iter_mut().flatten() {
            head.entries.retain(|e| e.pinned || e.position + r >= position);
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (l, heads) in self.layers.iter().enumerate() {
            for (h, head) in heads.iter().enumerate() {
                if head.entries.windows(2).any(|w| w[0].position >= w[1].position) {
                    return Err(Error::contract(format!(
                        "positions not strictly increasing in layer {l} head {h}"
                    )));
                }
                let decoded = head
                    .entries
                    .iter()
                    .filter(|e| e.position >= self.n_prefill)
                    .count();
                if decoded != self.n_decoded {
                    return Err(Error::contract(format!(
                        "layer {l} head {h} holds {decoded} of {} decoded entries",
                        self.n_decoded
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Keeps only the listed prefill positions (`retained[layer][head]`).
/// Decode-time entries are never touched; `n_prefill` is unchanged.
pub fn prune_cache(cache: &KVCache, retained: &[Vec<Vec<usize>>]) -> Result<KVCache> {
    if retained.len() != cache.n_layers() || retained.iter().any(|r| r.len() != cache.n_heads()) {
        return Err(Error::Shape {
            op: "prune_cache",
            lhs: vec![cache.n_layers(), cache.n_heads()],
            rhs: vec![retained.len(), retained.first().map_or(0, Vec::len)],
        });
    }
    let mut out = cache.clone();
    for (l, heads) in retained.iter().enumerate() {
        for (h, keep) in heads.iter().enumerate() {
            let keep: BTreeSet<usize> = keep.iter().copied().collect();
            let head = &mut out.layers[l][h];
            let present: BTreeSet<usize> = head.entries.iter().map(|e| e.position).collect();
            if let Some(missing) = keep.iter().find(|p| !present.contains(p)) {
                return Err(Error::contract(format!(
                    "layer {l} head {h}: retained position {missing} is not in the cache"
                )));
            }
            head.entries
                .retain(|e| e.position >= cache.n_prefill || keep.contains(&e.position));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(n: usize) -> KVCache {
        let mut c = KVCache::empty(2, 2, 3, 3, 0);
        for head in c.layers.iter_mut().flatten() {
            for p in 0..n {
                head.entries.push(CacheEntry {
                    position: p,
                    key: vec![p as f64; 3],
                    value: vec![-(p as f64); 3],
                    pinned: true,
                });
            }
        }
        c.n_prefill = n;
        c
    }

    #[test]
    fn retain_all_is_identity() {
        let c = cache(5);
        let all = vec![vec![(0..5).collect::<Vec<_>>(); 2]; 2];
        assert_eq!(prune_cache(&c, &all).unwrap(), c);
    }

    #[test]
    fn retain_nothing_empties_one_head() {
        let c = cache(5);
        let mut keep = vec![vec![(0..5).collect::<Vec<_>>(); 2]; 2];
        keep[1][0].clear();
        let p = prune_cache(&c, &keep).unwrap();
        assert_eq!(p.retained_prefill(1, 0), 0);
        assert_eq!(p.retained_prefill(1, 1), 5);
        assert_eq!(p.n_prefill, 5);
    }

    #[test]
    fn missing_position_is_an_error() {
        let c = cache(3);
        let mut keep = vec![vec![vec![0, 1]; 2]; 2];
        keep[0][1] = vec![7];
        assert!(matches!(prune_cache(&c, &keep), Err(Error::Contract(_))));
    }

    #[test]
    fn memory_after_pruning_is_entries_times_width() {
        let c = cache(6);
        let keep = vec![vec![vec![0, 2, 5]; 2]; 2];
        let p = prune_cache(&c, &keep).unwrap();
        assert_eq!(p.head_prefill_bytes(0, 0), 3 * (3 + 3) * 8);
        assert_eq!(p.prefill_bytes(), 4 * 3 * 6 * 8);
        assert_eq!(p.full_prefill_bytes(), 4 * 6 * 6 * 8);
        assert!((p.eviction_ratio() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn order_is_preserved() {
        let c = cache(6);
        let keep = vec![vec![vec![4, 1, 3]; 2]; 2];
        let p = prune_cache(&c, &keep).unwrap();
        assert_eq!(p.head(0, 0).positions(), vec![1, 3, 4]);
        p.check_invariants().unwrap();
    }
}
