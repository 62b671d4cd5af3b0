//! Nearest-neighbour retrieval over the memory.
//!
//! Similarity is the dot product of unit-norm vectors (= cosine). Search may
//! run within the query's modality (uni) or against the opposite side
//! (cross), and independently the fetched embeddings may come from the same
//! or the opposite side — the four scenarios share one code path. Fetched
//! rows always come from the memory row that produced the search hit.

use crate::error::{Error, Result};
use crate::memory::{MemoryStore, Modality};
use crate::tensor::{self, Tensor};
use crate::Real;

/// Similarity at or above which an entry counts as the query itself for
/// `exclude_self` purposes (unit vectors; only exact coincidences reach this).
pub const SELF_SIMILARITY: Real = 1.0 - 1e-6;

/// Which memory side the neighbour scan runs against, relative to the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SearchMode {
    /// Scan the query's own modality (image query -> image matrix).
    Uni,
    /// Scan the opposite modality.
    Cross,
}

impl std::str::FromStr for SearchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" => Ok(SearchMode::Uni),
            "cross" => Ok(SearchMode::Cross),
            other => Err(Error::InvalidConfig(format!("unknown search mode '{other}'"))),
        }
    }
}

/// Which memory side the returned embeddings are taken from, relative to the
/// query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FetchModality {
    Same,
    Opposite,
}

impl std::str::FromStr for FetchModality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" | "uni" => Ok(FetchModality::Same),
            "opposite" | "cross" => Ok(FetchModality::Opposite),
            other => Err(Error::InvalidConfig(format!("unknown fetch modality '{other}'"))),
        }
    }
}

/// Retrieval parameters. `k` applies at training time, `k_prime` at
/// inference (defaults to `k`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    pub k: usize,
    pub k_prime: usize,
    pub search_mode: SearchMode,
    pub fetch_modality: FetchModality,
    pub exclude_self: bool,
}

impl RetrievalConfig {
    /// Uni-modal search with cross-modal fetch — the default pairing.
    pub fn uni_cross(k: usize) -> Self {
        RetrievalConfig {
            k,
            k_prime: k,
            search_mode: SearchMode::Uni,
            fetch_modality: FetchModality::Opposite,
            exclude_self: false,
        }
    }

    pub fn with_k_prime(mut self, k_prime: usize) -> Self {
        self.k_prime = k_prime;
        self
    }

    pub fn with_exclude_self(mut self, yes: bool) -> Self {
        self.exclude_self = yes;
        self
    }

    /// Copy with `k` replaced by `k_prime`, for inference-time calls.
    pub fn at_inference(mut self) -> Self {
        self.k = self.k_prime;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k_prime == 0 {
            return Err(Error::InvalidConfig("retrieval k must be >= 1".into()));
        }
        Ok(())
    }

    /// Memory side scanned for a query of the given modality.
    pub fn search_side(&self, query_modality: Modality) -> Modality {
        match self.search_mode {
            SearchMode::Uni => query_modality,
            SearchMode::Cross => query_modality.opposite(),
        }
    }

    /// Memory side the fetched rows come from.
    pub fn fetch_side(&self, query_modality: Modality) -> Modality {
        match self.fetch_modality {
            FetchModality::Same => query_modality,
            FetchModality::Opposite => query_modality.opposite(),
        }
    }
}

/// Ordered top-k result. Similarities are non-increasing; ties broke toward
/// the lower memory index.
#[derive(Debug, Clone)]
pub struct NeighborSet {
    pub query_id: u64,
    pub indices: Vec<usize>,
    pub similarities: Vec<Real>,
    /// k x d rows from the fetch-side matrix, aligned with `indices`.
    pub fetched: Tensor<Real>,
}

/// Exhaustive exact scan.
pub fn knn_exact(
    query: &[Real],
    store: &MemoryStore,
    cfg: &RetrievalConfig,
    query_modality: Modality,
) -> Result<NeighborSet> {
    knn_exact_with_id(query, store, cfg, query_modality, 0)
}

pub fn knn_exact_with_id(
    query: &[Real],
    store: &MemoryStore,
    cfg: &RetrievalConfig,
    query_modality: Modality,
    query_id: u64,
) -> Result<NeighborSet> {
    cfg.validate()?;
    if query.len() != store.dim() {
        return Err(Error::DimMismatch { expected: store.dim(), got: query.len() });
    }
    let search = store.matrix(cfg.search_side(query_modality));
    let mut top = TopK::new(cfg.k);
    let mut excluded = 0usize;
    for i in 0..store.len() {
        let sim = tensor::dot(query, search.row(i));
        if cfg.exclude_self && sim >= SELF_SIMILARITY {
            excluded += 1;
            continue;
        }
        top.offer(sim, i);
    }
    if top.len() < cfg.k {
        return Err(Error::KTooLarge { k: cfg.k, available: store.len() - excluded });
    }
    Ok(assemble(top, store, cfg, query_modality, query_id))
}

/// Per-query exact retrieval over a batch; row order is preserved and each
/// result equals the corresponding single-query call.
pub fn retrieve_batch(
    queries: &Tensor<Real>,
    store: &MemoryStore,
    cfg: &RetrievalConfig,
    query_modality: Modality,
) -> Result<Vec<NeighborSet>> {
    let mut out = Vec::with_capacity(queries.rows());
    for i in 0..queries.rows() {
        out.push(knn_exact_with_id(queries.row(i), store, cfg, query_modality, i as u64)?);
    }
    Ok(out)
}

pub(crate) fn assemble(
    top: TopK,
    store: &MemoryStore,
    cfg: &RetrievalConfig,
    query_modality: Modality,
    query_id: u64,
) -> NeighborSet {
    let fetch = store.matrix(cfg.fetch_side(query_modality));
    let d = store.dim();
    let entries = top.into_sorted();
    let mut fetched = Tensor::zeros(vec![entries.len(), d]);
    let mut indices = Vec::with_capacity(entries.len());
    let mut similarities = Vec::with_capacity(entries.len());
    for (pos, (sim, idx)) in entries.iter().enumerate() {
        indices.push(*idx);
        similarities.push(*sim);
        fetched.row_mut(pos).copy_from_slice(fetch.row(*idx));
    }
    NeighborSet { query_id, indices, similarities, fetched }
}

/// Bounded selection buffer ordered by (similarity desc, index asc).
pub(crate) struct TopK {
    k: usize,
    entries: Vec<(Real, usize)>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK { k, entries: Vec::with_capacity(k + 1) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    fn beats(a: (Real, usize), b: (Real, usize)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    pub fn offer(&mut self, sim: Real, idx: usize) {
        let cand = (sim, idx);
        if self.entries.len() == self.k {
            // full: reject unless better than the current worst (last slot)
            if !Self::beats(cand, self.entries[self.k - 1]) {
                return;
            }
            self.entries.pop();
        }
        let pos = self.entries.partition_point(|&e| Self::beats(e, cand));
        self.entries.insert(pos, cand);
    }

    pub fn into_sorted(self) -> Vec<(Real, usize)> {
        self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit(rng: &mut Rng, d: usize) -> Vec<Real> {
        let mut v: Vec<Real> = (0..d).map(|_| rng.normal()).collect();
        tensor::normalize(&mut v, "test").unwrap();
        v
    }

    fn random_store(rng: &mut Rng, n: usize, d: usize) -> MemoryStore {
        let pairs: Vec<_> =
            (0..n).map(|i| (unit(rng, d), unit(rng, d), i as u64)).collect();
        MemoryStore::build(&pairs).unwrap()
    }

    #[test]
    fn self_match_tops_exact_search() {
        let mut rng = Rng::new(1);
        let store = random_store(&mut rng, 20, 16);
        let cfg = RetrievalConfig::uni_cross(1);
        let query = store.matrix(Modality::Image).row(3).to_vec();
        let ns = knn_exact(&query, &store, &cfg, Modality::Image).unwrap();
        assert_eq!(ns.indices, vec![3]);
        assert!((ns.similarities[0] - 1.0).abs() < 1e-12);
        // opposite-modality fetch returns the paired text row
        assert_eq!(ns.fetched.row(0), store.matrix(Modality::Text).row(3));
    }

    #[test]
    fn ties_break_toward_lower_index() {
        // two identical entries at indices 2 and 5
        let mut rng = Rng::new(2);
        let shared = unit(&mut rng, 8);
        let mut pairs: Vec<_> =
            (0..8).map(|i| (unit(&mut rng, 8), unit(&mut rng, 8), i as u64)).collect();
        pairs[2].0 = shared.clone();
        pairs[5].0 = shared.clone();
        let store = MemoryStore::build(&pairs).unwrap();
        let cfg = RetrievalConfig::uni_cross(2);
        let ns = knn_exact(&shared, &store, &cfg, Modality::Image).unwrap();
        assert_eq!(ns.indices, vec![2, 5]);
        assert_eq!(ns.similarities[0], ns.similarities[1]);
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = Rng::new(3);
        let store = random_store(&mut rng, 1000, 16);
        let cfg = RetrievalConfig::uni_cross(10);
        for _ in 0..100 {
            let q = unit(&mut rng, 16);
            let ns = knn_exact(&q, &store, &cfg, Modality::Image).unwrap();
            // oracle: full sort of every (similarity, index) pair
            let mut all: Vec<(Real, usize)> = (0..store.len())
                .map(|i| (tensor::dot(&q, store.matrix(Modality::Image).row(i)), i))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for j in 0..10 {
                assert_eq!(ns.indices[j], all[j].1);
                assert_eq!(ns.similarities[j], all[j].0);
            }
        }
    }

    #[test]
    fn all_four_scenarios_pick_declared_sides() {
        let mut rng = Rng::new(4);
        let store = random_store(&mut rng, 50, 8);
        let q = store.matrix(Modality::Text).row(11).to_vec();
        for (search, fetch) in [
            (SearchMode::Uni, FetchModality::Opposite),
            (SearchMode::Cross, FetchModality::Opposite),
            (SearchMode::Uni, FetchModality::Same),
            (SearchMode::Cross, FetchModality::Same),
        ] {
            let cfg = RetrievalConfig {
                k: 3,
                k_prime: 3,
                search_mode: search,
                fetch_modality: fetch,
                exclude_self: false,
            };
            let ns = knn_exact(&q, &store, &cfg, Modality::Text).unwrap();
            let fetch_side = cfg.fetch_side(Modality::Text);
            for (pos, &i) in ns.indices.iter().enumerate() {
                assert_eq!(ns.fetched.row(pos), store.matrix(fetch_side).row(i));
            }
            if search == SearchMode::Uni {
                assert_eq!(ns.indices[0], 11, "uni text search finds own row first");
            }
        }
    }

    #[test]
    fn exclude_self_skips_identical_entry() {
        let mut rng = Rng::new(5);
        let store = random_store(&mut rng, 10, 16);
        let q = store.matrix(Modality::Image).row(4).to_vec();
        let cfg = RetrievalConfig::uni_cross(3).with_exclude_self(true);
        let ns = knn_exact(&q, &store, &cfg, Modality::Image).unwrap();
        assert!(!ns.indices.contains(&4));
    }

    #[test]
    fn k_larger_than_available_errors() {
        let mut rng = Rng::new(6);
        let store = random_store(&mut rng, 5, 8);
        let cfg = RetrievalConfig::uni_cross(6);
        let q = unit(&mut rng, 8);
        assert!(matches!(
            knn_exact(&q, &store, &cfg, Modality::Image),
            Err(Error::KTooLarge { k: 6, available: 5 })
        ));
        // exclusions shrink availability
        let cfg5 = RetrievalConfig::uni_cross(5).with_exclude_self(true);
        let q_self = store.matrix(Modality::Image).row(0).to_vec();
        assert!(matches!(
            knn_exact(&q_self, &store, &cfg5, Modality::Image),
            Err(Error::KTooLarge { k: 5, available: 4 })
        ));
    }

    #[test]
    fn batch_equals_looped_single_calls() {
        let mut rng = Rng::new(7);
        let store = random_store(&mut rng, 200, 8);
        let cfg = RetrievalConfig::uni_cross(5);
        let rows: Vec<Vec<Real>> = (0..32).map(|_| unit(&mut rng, 8)).collect();
        let queries = Tensor::from_rows(&rows).unwrap();
        let batch = retrieve_batch(&queries, &store, &cfg, Modality::Image).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let single = knn_exact(row, &store, &cfg, Modality::Image).unwrap();
            assert_eq!(batch[i].indices, single.indices);
            assert_eq!(batch[i].similarities, single.similarities);
            assert_eq!(batch[i].fetched.data(), single.fetched.data());
            assert_eq!(batch[i].query_id, i as u64);
        }
        // duplicated query produces identical results
        let dup = Tensor::from_rows(&[rows[0].clone(), rows[0].clone()]).unwrap();
        let b2 = retrieve_batch(&dup, &store, &cfg, Modality::Image).unwrap();
        assert_eq!(b2[0].indices, b2[1].indices);
        assert_eq!(b2[0].similarities, b2[1].similarities);
    }

    #[test]
    fn similarities_are_non_increasing() {
        let mut rng = Rng::new(8);
        let store = random_store(&mut rng, 300, 8);
        let cfg = RetrievalConfig::uni_cross(20);
        for _ in 0..10 {
            let q = unit(&mut rng, 8);
            let ns = knn_exact(&q, &store, &cfg, Modality::Text).unwrap();
            for w in ns.similarities.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }
}
