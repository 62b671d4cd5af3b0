//! External memory of paired image/text embeddings.
//!
//! A store keeps two row-aligned matrices: row i of the image matrix and row
//! i of the text matrix always come from the same original pair. That pairing
//! is what makes cross-modal fetch correct, so every operation returning a
//! store preserves it. Stores are immutable after build; operations produce
//! new stores.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use crate::Real;

/// Which side of a pair an embedding belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn opposite(self) -> Modality {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::InvalidConfig(format!("unknown modality '{other}'"))),
        }
    }
}

/// One aligned pair view.
#[derive(Debug, Clone, Copy)]
pub struct MemoryEntry<'a> {
    pub id: u64,
    pub image: &'a [Real],
    pub text: &'a [Real],
}

/// The external memory: row-aligned image and text embedding matrices plus
/// caller-supplied ids (preserved so retrieved items stay traceable).
#[derive(Debug, Clone)]
pub struct MemoryStore {
    dim: usize,
    image: Tensor<Real>,
    text: Tensor<Real>,
    ids: Vec<u64>,
}

impl MemoryStore {
    /// Build a store from `(image, text, id)` triples. Vectors are
    /// L2-normalized on ingestion; a zero vector cannot be normalized and is
    /// rejected.
    pub fn build(pairs: &[(Vec<Real>, Vec<Real>, u64)]) -> Result<MemoryStore> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("memory store needs at least one pair".into()));
        }
        let dim = pairs[0].0.len();
        let mut image = Vec::with_capacity(pairs.len() * dim);
        let mut text = Vec::with_capacity(pairs.len() * dim);
        let mut ids = Vec::with_capacity(pairs.len());
        for (i, (v, t, id)) in pairs.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: v.len() });
            }
            if t.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: t.len() });
            }
            let mut v = v.clone();
            let mut t = t.clone();
            tensor::normalize(&mut v, &format!("image row {i}"))?;
            tensor::normalize(&mut t, &format!("text row {i}"))?;
            image.extend_from_slice(&v);
            text.extend_from_slice(&t);
            ids.push(*id);
        }
        Ok(MemoryStore {
            dim,
            image: Tensor::new(vec![pairs.len(), dim], image)?,
            text: Tensor::new(vec![pairs.len(), dim], text)?,
            ids,
        })
    }

    /// Assemble from already-normalized matrices; rows must be aligned.
    pub(crate) fn from_parts(image: Tensor<Real>, text: Tensor<Real>, ids: Vec<u64>) -> Result<MemoryStore> {
        if image.shape() != text.shape() || image.rows() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "store parts disagree: image {:?}, text {:?}, {} ids",
                image.shape(),
                text.shape(),
                ids.len()
            )));
        }
        if image.rows() == 0 {
            return Err(Error::InvalidConfig("memory store needs at least one pair".into()));
        }
        let dim = image.cols();
        Ok(MemoryStore { dim, image, text, ids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn matrix(&self, modality: Modality) -> &Tensor<Real> {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn entry(&self, i: usize) -> MemoryEntry<'_> {
        MemoryEntry { id: self.ids[i], image: self.image.row(i), text: self.text.row(i) }
    }

    pub fn entries(&self) -> impl Iterator<Item = MemoryEntry<'_>> {
        (0..self.len()).map(|i| self.entry(i))
    }

    /// Keep the rows at `keep` (ascending), producing a new store.
    pub fn subset(&self, keep: &[usize]) -> Result<MemoryStore> {
        if keep.is_empty() {
            return Err(Error::InvalidConfig("subset would be empty".into()));
        }
        let mut image = Vec::with_capacity(keep.len() * self.dim);
        let mut text = Vec::with_capacity(keep.len() * self.dim);
        let mut ids = Vec::with_capacity(keep.len());
        for &i in keep {
            image.extend_from_slice(self.image.row(i));
            text.extend_from_slice(self.text.row(i));
            ids.push(self.ids[i]);
        }
        MemoryStore::from_parts(
            Tensor::new(vec![keep.len(), self.dim], image)?,
            Tensor::new(vec![keep.len(), self.dim], text)?,
            ids,
        )
    }

    /// Remove every entry whose `modality`-side embedding has cosine
    /// similarity >= `threshold` with any probe. The original store is left
    /// untouched; removing everything is an error.
    pub fn dedupe_against(
        &self,
        probes: &Tensor<Real>,
        modality: Modality,
        threshold: Real,
    ) -> Result<MemoryStore> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "dedupe threshold {threshold} outside (0, 1]"
            )));
        }
        if probes.cols() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: probes.cols() });
        }
        let side = self.matrix(modality);
        let mut keep = Vec::with_capacity(self.len());
        'rows: for i in 0..self.len() {
            let row = side.row(i);
            for p in 0..probes.rows() {
                if tensor::dot(row, probes.row(p)) >= threshold {
                    continue 'rows;
                }
            }
            keep.push(i);
        }
        if keep.is_empty() {
            return Err(Error::DedupeEmptiedStore);
        }
        self.subset(&keep)
    }

    /// Checksum over both matrices, for frozen-backbone assertions.
    pub fn content_crc(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.image.data().iter().chain(self.text.data()) {
            h.update(&v.to_le_bytes());
        }
        for id in &self.ids {
            h.update(&id.to_le_bytes());
        }
        h.finalize()
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

    #[test]
    fn single_pair_store() {
        let store = MemoryStore::build(&[(vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 3.0, 0.0, 0.0], 9)])
            .unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.dim(), 4);
        assert!((tensor::norm2(store.entry(0).image) - 1.0).abs() < 1e-12);
        assert!((tensor::norm2(store.entry(0).text) - 1.0).abs() < 1e-12);
        assert_eq!(store.entry(0).id, 9);
    }

    #[test]
    fn zero_vector_rejected() {
        let r = MemoryStore::build(&[(vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.0], 0)]);
        assert!(matches!(r, Err(Error::ZeroVector(_))));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let r = MemoryStore::build(&[
            (vec![1.0, 0.0], vec![0.0, 1.0], 0),
            (vec![1.0, 0.0, 0.0], vec![0.0, 1.0], 1),
        ]);
        assert!(matches!(r, Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn all_rows_unit_norm() {
        let mut rng = Rng::new(1);
        let pairs: Vec<_> = (0..1000)
            .map(|i| {
                let v: Vec<Real> = (0..8).map(|_| rng.normal() * 3.0).collect();
                let t: Vec<Real> = (0..8).map(|_| rng.normal() * 3.0).collect();
                (v, t, i as u64)
            })
            .collect();
        let store = MemoryStore::build(&pairs).unwrap();
        for i in 0..store.len() {
            assert!((tensor::norm2(store.matrix(Modality::Image).row(i)) - 1.0).abs() < 1e-6);
            assert!((tensor::norm2(store.matrix(Modality::Text).row(i)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dedupe_removes_probe_match() {
        let mut rng = Rng::new(2);
        let pairs: Vec<_> = (0..10).map(|i| (unit(&mut rng, 16), unit(&mut rng, 16), i as u64)).collect();
        let store = MemoryStore::build(&pairs).unwrap();
        let probe = Tensor::new(vec![1, 16], store.entry(7).image.to_vec()).unwrap();
        let deduped = store.dedupe_against(&probe, Modality::Image, 0.999).unwrap();
        assert_eq!(deduped.len(), 9);
        assert!(!deduped.ids().contains(&7));
        // original untouched
        assert_eq!(store.len(), 10);
    }

    #[test]
    fn dedupe_orthogonal_probes_keep_everything() {
        let mut pairs = Vec::new();
        for i in 0..4 {
            let mut v = vec![0.0; 8];
            v[i] = 1.0;
            pairs.push((v.clone(), v, i as u64));
        }
        let store = MemoryStore::build(&pairs).unwrap();
        let mut probe = vec![0.0; 8];
        probe[7] = 1.0;
        let probes = Tensor::new(vec![1, 8], probe).unwrap();
        let out = store.dedupe_against(&probes, Modality::Image, 1.0).unwrap();
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn dedupe_planted_duplicates_found_exactly() {
        let mut rng = Rng::new(3);
        let d = 32;
        let mut pairs: Vec<_> =
            (0..100).map(|i| (unit(&mut rng, d), unit(&mut rng, d), i as u64)).collect();
        // plant 5 near-duplicates of known probes at cosine > 0.998
        let mut probes = Vec::new();
        let planted: Vec<usize> = vec![3, 17, 42, 64, 99];
        for &idx in &planted {
            let p = unit(&mut rng, d);
            let mut close: Vec<Real> =
                p.iter().map(|&x| x + 0.01 * rng.normal() / (d as f64).sqrt()).collect();
            tensor::normalize(&mut close, "plant").unwrap();
            assert!(tensor::dot(&close, &p) > 0.998);
            pairs[idx].0 = close;
            probes.push(p);
        }
        let store = MemoryStore::build(&pairs).unwrap();
        let probe_mat = Tensor::from_rows(&probes).unwrap();

        // oracle: brute-force pairwise cosine
        let mut expect_removed = Vec::new();
        for i in 0..store.len() {
            let row = store.matrix(Modality::Image).row(i);
            if probes.iter().any(|p| tensor::dot(row, p) >= 0.995) {
                expect_removed.push(i as u64);
            }
        }
        assert_eq!(expect_removed, planted.iter().map(|&i| i as u64).collect::<Vec<_>>());

        let deduped = store.dedupe_against(&probe_mat, Modality::Image, 0.995).unwrap();
        assert_eq!(deduped.len(), 95);
        for id in expect_removed {
            assert!(!deduped.ids().contains(&id));
        }
    }

    #[test]
    fn dedupe_is_idempotent() {
        let mut rng = Rng::new(4);
        let pairs: Vec<_> =
            (0..50).map(|i| (unit(&mut rng, 16), unit(&mut rng, 16), i as u64)).collect();
        let store = MemoryStore::build(&pairs).unwrap();
        let probes = Tensor::from_rows(&(0..5).map(|_| unit(&mut rng, 16)).collect::<Vec<_>>()).unwrap();
        let once = store.dedupe_against(&probes, Modality::Text, 0.9).unwrap();
        let twice = once.dedupe_against(&probes, Modality::Text, 0.9).unwrap();
        assert_eq!(once.ids(), twice.ids());
        assert_eq!(once.matrix(Modality::Image).data(), twice.matrix(Modality::Image).data());
    }

    #[test]
    fn dedupe_removing_all_is_an_error() {
        let store = MemoryStore::build(&[(vec![1.0, 0.0], vec![0.0, 1.0], 0)]).unwrap();
        let probes = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            store.dedupe_against(&probes, Modality::Image, 0.5),
            Err(Error::DedupeEmptiedStore)
        ));
    }

    #[test]
    fn paired_index_invariant_survives_dedupe_and_subset() {
        let mut rng = Rng::new(5);
        let pairs: Vec<_> =
            (0..30).map(|i| (unit(&mut rng, 8), unit(&mut rng, 8), 1000 + i as u64)).collect();
        let store = MemoryStore::build(&pairs).unwrap();
        let probes = Tensor::from_rows(&[unit(&mut rng, 8)]).unwrap();
        let deduped = store.dedupe_against(&probes, Modality::Image, 0.8).unwrap();
        for e in deduped.entries() {
            let orig = &pairs[(e.id - 1000) as usize];
            let mut v = orig.0.clone();
            let mut t = orig.1.clone();
            tensor::normalize(&mut v, "v").unwrap();
            tensor::normalize(&mut t, "t").unwrap();
            assert_eq!(e.image, &v[..]);
            assert_eq!(e.text, &t[..]);
        }
    }
}
