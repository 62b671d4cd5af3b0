//! Inverted-file approximate nearest-neighbour index.
//!
//! Memory rows are partitioned by spherical k-means (fixed 20 Lloyd
//! iterations, seeded); a query ranks partition centroids, scans only the
//! posting lists of the `n_probe` nearest partitions, and applies the same
//! tie rule as the exact path. Probing every partition reproduces the exact
//! result, which keeps correctness auditable against `knn_exact`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::memory::{MemoryStore, Modality};
use crate::retrieval::{NeighborSet, RetrievalConfig, TopK, SELF_SIMILARITY};
use crate::tensor::{self, Tensor};
use crate::{Real, StorageReal};

const MAGIC: &[u8; 8] = b"RECOIVF1";
const VERSION: u32 = 1;
pub const LLOYD_ITERATIONS: usize = 20;

/// IVF index over one modality of a store.
#[derive(Debug, Clone)]
pub struct ApproxIndex {
    dim: usize,
    modality: Modality,
    centroids: Tensor<Real>,
    /// Per-partition memory row indices, each list ascending.
    postings: Vec<Vec<u64>>,
    /// Row count of the store the index was built over.
    entry_count: usize,
}

impl ApproxIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn n_partitions(&self) -> usize {
        self.postings.len()
    }

    pub fn entry_count(&self) -> usize {
        self.entry_count
    }

    pub fn postings(&self) -> &[Vec<u64>] {
        &self.postings
    }
}

/// Spherical k-means: assignment by max dot product, centroid update by
/// normalized mean. Greedy D^2 seeding; an emptied partition keeps its
/// previous centroid. Deterministic for a given seed.
pub fn kmeans(data: &Tensor<Real>, n_partitions: usize, seed: u64) -> Result<Tensor<Real>> {
    let (m, d) = (data.rows(), data.cols());
    if n_partitions < 1 {
        return Err(Error::InvalidConfig("n_partitions must be >= 1".into()));
    }
    if n_partitions > m {
        return Err(Error::InvalidConfig(format!(
            "n_partitions {} exceeds {} vectors",
            n_partitions, m
        )));
    }
    let mut rng = crate::rng::Rng::substream(seed, 0x6b6d65616e73); // "kmeans"
    let mut centroids = Tensor::zeros(vec![n_partitions, d]);

    // k-means++ style seeding on cosine distance (1 - dot)
    let first = rng.below(m);
    centroids.row_mut(0).copy_from_slice(data.row(first));
    let mut min_dist: Vec<Real> =
        (0..m).map(|i| 1.0 - tensor::dot(data.row(i), centroids.row(0))).collect();
    for c in 1..n_partitions {
        let total: Real = min_dist.iter().map(|&x| x.max(0.0)).sum();
        let pick = if total <= 0.0 {
            rng.below(m)
        } else {
            let mut target = rng.uniform() * total;
            let mut chosen = m - 1;
            for (i, &x) in min_dist.iter().enumerate() {
                target -= x.max(0.0);
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for i in 0..m {
            let dist = 1.0 - tensor::dot(data.row(i), centroids.row(c));
            if dist < min_dist[i] {
                min_dist[i] = dist;
            }
        }
    }

    let mut assignment = vec![0usize; m];
    for _ in 0..LLOYD_ITERATIONS {
        // assign
        for i in 0..m {
            let row = data.row(i);
            let mut best = (Real::NEG_INFINITY, 0usize);
            for c in 0..n_partitions {
                let s = tensor::dot(row, centroids.row(c));
                if s > best.0 {
                    best = (s, c);
                }
            }
            assignment[i] = best.1;
        }
        // update
        let mut sums = Tensor::<Real>::zeros(vec![n_partitions, d]);
        let mut counts = vec![0usize; n_partitions];
        for i in 0..m {
            let c = assignment[i];
            counts[c] += 1;
            for (s, &v) in sums.row_mut(c).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..n_partitions {
            if counts[c] == 0 {
                continue;
            }
            let norm = tensor::norm2(sums.row(c));
            if norm <= 1e-12 {
                continue;
            }
            let inv = 1.0 / norm;
            for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    Ok(centroids)
}

/// Partition one modality of the store into an inverted file.
pub fn build_index(
    store: &MemoryStore,
    modality: Modality,
    n_partitions: usize,
    seed: u64,
) -> Result<ApproxIndex> {
    let data = store.matrix(modality);
    let centroids = kmeans(data, n_partitions, seed)?;
    let mut postings: Vec<Vec<u64>> = vec![Vec::new(); n_partitions];
    for i in 0..store.len() {
        let row = data.row(i);
        let mut best = (Real::NEG_INFINITY, 0usize);
        for c in 0..n_partitions {
            let s = tensor::dot(row, centroids.row(c));
            if s > best.0 {
                best = (s, c);
            }
        }
        postings[best.1].push(i as u64);
    }
    Ok(ApproxIndex { dim: store.dim(), modality, centroids, postings, entry_count: store.len() })
}

/// Scan only the `n_probe` partitions whose centroids are most similar to the
/// query. Ties follow the exact path's rule.
pub fn knn_approx(
    query: &[Real],
    index: &ApproxIndex,
    store: &MemoryStore,
    cfg: &RetrievalConfig,
    n_probe: usize,
    query_modality: Modality,
) -> Result<NeighborSet> {
    knn_approx_with_id(query, index, store, cfg, n_probe, query_modality, 0)
}

#[allow(clippy::too_many_arguments)]
pub fn knn_approx_with_id(
    query: &[Real],
    index: &ApproxIndex,
    store: &MemoryStore,
    cfg: &RetrievalConfig,
    n_probe: usize,
    query_modality: Modality,
    query_id: u64,
) -> Result<NeighborSet> {
    cfg.validate()?;
    if n_probe < 1 {
        return Err(Error::InvalidConfig("n_probe must be >= 1".into()));
    }
    if query.len() != index.dim || index.dim != store.dim() {
        return Err(Error::DimMismatch { expected: store.dim(), got: query.len() });
    }
    if index.entry_count != store.len() {
        return Err(Error::InvalidConfig(format!(
            "index built over {} entries, store has {}",
            index.entry_count,
            store.len()
        )));
    }
    let search_side = cfg.search_side(query_modality);
    if index.modality != search_side {
        return Err(Error::InvalidConfig(format!(
            "index covers the {} side but the search needs {}",
            index.modality.as_str(),
            search_side.as_str()
        )));
    }

    let n_probe = n_probe.min(index.n_partitions());
    let mut ranked: Vec<(Real, usize)> = (0..index.n_partitions())
        .map(|c| (tensor::dot(query, index.centroids.row(c)), c))
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let search = store.matrix(search_side);
    let mut top = TopK::new(cfg.k);
    let mut scanned = 0usize;
    let mut excluded = 0usize;
    for &(_, c) in ranked.iter().take(n_probe) {
        for &i in &index.postings[c] {
            let i = i as usize;
            let sim = tensor::dot(query, search.row(i));
            scanned += 1;
            if cfg.exclude_self && sim >= SELF_SIMILARITY {
                excluded += 1;
                continue;
            }
            top.offer(sim, i);
        }
    }
    if top.len() < cfg.k {
        return Err(Error::KTooLarge { k: cfg.k, available: scanned - excluded });
    }
    Ok(crate::retrieval::assemble(top, store, cfg, query_modality, query_id))
}

/// Fraction of the oracle's indices recovered by the approximate result.
pub fn recall_against(exact: &NeighborSet, approx: &NeighborSet) -> f64 {
    if exact.indices.is_empty() {
        return 1.0;
    }
    let hits = approx.indices.iter().filter(|i| exact.indices.contains(i)).count();
    hits as f64 / exact.indices.len() as f64
}

/// Persist as `RECO-ivf v1`: magic, version, dim, n_partitions, search
/// modality, f32 centroid matrix, length-prefixed u64 posting lists, CRC32
/// over all preceding bytes.
pub fn save_index(index: &ApproxIndex, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(index.n_partitions() as u32).to_le_bytes());
    buf.extend_from_slice(&match index.modality {
        Modality::Image => 0u32,
        Modality::Text => 1u32,
    }
    .to_le_bytes());
    buf.extend_from_slice(&(index.entry_count as u64).to_le_bytes());
    for &v in index.centroids.data() {
        buf.extend_from_slice(&(v as StorageReal).to_le_bytes());
    }
    for list in &index.postings {
        buf.extend_from_slice(&(list.len() as u64).to_le_bytes());
        for &i in list {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<ApproxIndex> {
    let buf = fs::read(path)?;
    if buf.len() < 4 {
        return Err(Error::Truncated { needed: 4 - buf.len() });
    }
    let payload = &buf[..buf.len() - 4];
    let stored_crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > payload.len() {
            return Err(Error::Truncated { needed: *pos + n - payload.len() });
        }
        let s = &payload[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::BadMagic { expected: "RECOIVF1" });
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    if stored_crc != computed {
        return Err(Error::ChecksumMismatch { stored: stored_crc, computed });
    }
    let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let n_partitions = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let modality = match u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) {
        0 => Modality::Image,
        1 => Modality::Text,
        other => return Err(Error::InvalidConfig(format!("bad modality tag {other}"))),
    };
    let entry_count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut cdata = Vec::with_capacity(n_partitions * dim);
    for _ in 0..n_partitions * dim {
        cdata.push(StorageReal::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as Real);
    }
    let centroids = Tensor::new(vec![n_partitions, dim], cdata)?;
    let mut postings = Vec::with_capacity(n_partitions);
    for _ in 0..n_partitions {
        let len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            list.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        postings.push(list);
    }
    Ok(ApproxIndex { dim, modality, centroids, postings, entry_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::knn_exact;
    use crate::rng::Rng;
    use std::path::PathBuf;

    fn unit(rng: &mut Rng, d: usize) -> Vec<Real> {
        let mut v: Vec<Real> = (0..d).map(|_| rng.normal()).collect();
        tensor::normalize(&mut v, "test").unwrap();
        v
    }

    /// Clustered store: points scattered around a handful of anchors.
    fn clustered_store(rng: &mut Rng, n: usize, d: usize, anchors: usize) -> MemoryStore {
        let centers: Vec<Vec<Real>> = (0..anchors).map(|_| unit(rng, d)).collect();
        let pairs: Vec<_> = (0..n)
            .map(|i| {
                let c = &centers[rng.below(anchors)];
                let mut v: Vec<Real> =
                    c.iter().map(|&x| x + 0.3 * rng.normal() / (d as f64).sqrt()).collect();
                tensor::normalize(&mut v, "v").unwrap();
                (v, unit(rng, d), i as u64)
            })
            .collect();
        MemoryStore::build(&pairs).unwrap()
    }

    #[test]
    fn one_partition_equals_exact_scan() {
        let mut rng = Rng::new(1);
        let store = clustered_store(&mut rng, 300, 16, 4);
        let index = build_index(&store, Modality::Image, 1, 7).unwrap();
        let cfg = RetrievalConfig::uni_cross(10);
        for _ in 0..20 {
            let q = unit(&mut rng, 16);
            let exact = knn_exact(&q, &store, &cfg, Modality::Image).unwrap();
            let approx = knn_approx(&q, &index, &store, &cfg, 1, Modality::Image).unwrap();
            assert_eq!(exact.indices, approx.indices);
            assert_eq!(exact.similarities, approx.similarities);
        }
    }

    #[test]
    fn one_point_per_partition_when_counts_match() {
        let mut rng = Rng::new(2);
        let pairs: Vec<_> = (0..6).map(|i| {
            let mut v = vec![0.0; 8];
            v[i] = 1.0;
            (v.clone(), unit(&mut rng, 8), i as u64)
        })
        .collect();
        let store = MemoryStore::build(&pairs).unwrap();
        let index = build_index(&store, Modality::Image, 6, 3).unwrap();
        let mut sizes: Vec<usize> = index.postings().iter().map(|p| p.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1; 6]);
    }

    #[test]
    fn full_probe_equals_exact() {
        let mut rng = Rng::new(3);
        let store = clustered_store(&mut rng, 500, 16, 8);
        let index = build_index(&store, Modality::Image, 16, 9).unwrap();
        let cfg = RetrievalConfig::uni_cross(10);
        for _ in 0..30 {
            let q = unit(&mut rng, 16);
            let exact = knn_exact(&q, &store, &cfg, Modality::Image).unwrap();
            let approx = knn_approx(&q, &index, &store, &cfg, 16, Modality::Image).unwrap();
            assert_eq!(exact.indices, approx.indices, "full probing must be exact");
        }
    }

    #[test]
    fn centroid_query_finds_partition_member() {
        let mut rng = Rng::new(4);
        let store = clustered_store(&mut rng, 200, 16, 4);
        let index = build_index(&store, Modality::Image, 4, 11).unwrap();
        let cfg = RetrievalConfig::uni_cross(1);
        let mut c = index.centroids.row(0).to_vec();
        tensor::normalize(&mut c, "centroid").unwrap();
        let approx = knn_approx(&c, &index, &store, &cfg, 1, Modality::Image).unwrap();
        let exact = knn_exact(&c, &store, &cfg, Modality::Image).unwrap();
        // the probed partition is the centroid's own, so its nearest member
        // must be the global nearest as long as assignment was by max dot
        assert_eq!(approx.indices, exact.indices);
    }

    #[test]
    fn recall_non_decreasing_in_probe_count() {
        let mut rng = Rng::new(5);
        let store = clustered_store(&mut rng, 2000, 16, 12);
        let index = build_index(&store, Modality::Image, 16, 13).unwrap();
        let cfg = RetrievalConfig::uni_cross(10);
        let queries: Vec<Vec<Real>> = (0..40).map(|_| unit(&mut rng, 16)).collect();
        let mut prev = 0.0;
        for probe in [1, 2, 4, 8, 16] {
            let mut total = 0.0;
            for q in &queries {
                let exact = knn_exact(q, &store, &cfg, Modality::Image).unwrap();
                let approx = knn_approx(q, &index, &store, &cfg, probe, Modality::Image).unwrap();
                total += recall_against(&exact, &approx);
            }
            let recall = total / queries.len() as f64;
            assert!(recall >= prev - 1e-12, "recall dropped: {} -> {}", prev, recall);
            prev = recall;
        }
        assert!((prev - 1.0).abs() < 1e-12, "full probe recall must be 1");
    }

    #[test]
    fn modality_mismatch_rejected() {
        let mut rng = Rng::new(6);
        let store = clustered_store(&mut rng, 50, 8, 2);
        let index = build_index(&store, Modality::Text, 4, 1).unwrap();
        let cfg = RetrievalConfig::uni_cross(1);
        let q = unit(&mut rng, 8);
        assert!(knn_approx(&q, &index, &store, &cfg, 2, Modality::Image).is_err());
    }

    #[test]
    fn bad_partition_counts_rejected() {
        let mut rng = Rng::new(7);
        let store = clustered_store(&mut rng, 10, 8, 2);
        assert!(build_index(&store, Modality::Image, 0, 1).is_err());
        assert!(build_index(&store, Modality::Image, 11, 1).is_err());
    }

    fn temp(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("reco-ivf-test-{}-{}", std::process::id(), name));
        p
    }

    #[test]
    fn persistence_round_trip_preserves_search() {
        let mut rng = Rng::new(8);
        let store = clustered_store(&mut rng, 400, 16, 6);
        let index = build_index(&store, Modality::Image, 8, 21).unwrap();
        let p = temp("rt");
        save_index(&index, &p).unwrap();
        let loaded = load_index(&p).unwrap();
        assert_eq!(loaded.n_partitions(), 8);
        assert_eq!(loaded.modality(), Modality::Image);
        let cfg = RetrievalConfig::uni_cross(5);
        for _ in 0..20 {
            let q = unit(&mut rng, 16);
            let a = knn_approx(&q, &index, &store, &cfg, 3, Modality::Image).unwrap();
            // centroids pass through f32 storage, but posting membership and
            // within-partition ordering are unaffected for these spreads
            let b = knn_approx(&q, &loaded, &store, &cfg, 3, Modality::Image).unwrap();
            assert_eq!(a.indices, b.indices);
        }
        let _ = std::fs::remove_file(&p);
    }

    #[test]
    fn corrupted_index_rejected() {
        let mut rng = Rng::new(9);
        let store = clustered_store(&mut rng, 50, 8, 2);
        let index = build_index(&store, Modality::Image, 4, 2).unwrap();
        let p = temp("bad");
        save_index(&index, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x55;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_index(&p), Err(Error::ChecksumMismatch { .. })));
        let _ = std::fs::remove_file(&p);
    }
}
