//! Vector primitives shared by every other module: embeddings, stores of
//! embeddings, Matryoshka prefix slicing, cosine similarity and pooling.
//!
//! All arithmetic is `f64`; `f32` only appears at the binary file boundary
//! (see [`crate::io`]).

use std::collections::HashMap;
use std::ops::Deref;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Embedding::new(v)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Embeddings of equal dimension keyed by unique item ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<Embedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn from_parts(ids: Vec<String>, rows: Vec<Embedding>) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::invalid(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map_or(0, Embedding::dim);
        let mut store = Self::new(dim);
        for (id, row) in ids.into_iter().zip(rows) {
            store.push(id, row)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, id: impl Into<String>, row: Embedding) -> Result<()> {
        let id = id.into();
        if self.rows.is_empty() && self.dim == 0 {
            self.dim = row.dim();
        }
        Error::check_dim(self.dim, row.dim())?;
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.rows.len());
        self.ids.push(id);
        self.rows.push(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Embedding] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Embedding {
        &self.rows[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.position(id).map(|i| &self.rows[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.ids.iter().map(String::as_str).zip(&self.rows)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.dim);
        for &i in indices {
            out.push(self.ids[i].clone(), self.rows[i].clone())
                .expect("ids are unique within a store");
        }
        out
    }

    /// Every row truncated to its first `dim` coordinates.
    pub fn truncate(&self, dim: usize) -> Result<Self> {
        if dim == 0 || dim > self.dim {
            return Err(Error::invalid(format!(
                "prefix dim {dim} outside 1..={}",
                self.dim
            )));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| Embedding(r[..dim].to_vec()))
            .collect();
        let mut out = Self::from_parts(self.ids.clone(), rows)?;
        out.dim = dim;
        Ok(out)
    }
}

/// Nested Matryoshka prefix sizes, strictly ascending and ending at the
/// full embedding dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MrlDims(Vec<usize>);

impl MrlDims {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Empty("mrl dims"));
        }
        if dims[0] == 0 {
            return Err(Error::invalid("mrl dims must be positive"));
        }
        if dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("mrl dims must be strictly ascending"));
        }
        Ok(Self(dims))
    }

    /// Like [`MrlDims::new`], additionally requiring the last entry to be `full`.
    pub fn for_dim(dims: Vec<usize>, full: usize) -> Result<Self> {
        let d = Self::new(dims)?;
        if d.full() != full {
            return Err(Error::invalid(format!(
                "last mrl dim {} must equal embedding dim {full}",
                d.full()
            )));
        }
        Ok(d)
    }

    pub fn full_only(full: usize) -> Self {
        Self(vec![full])
    }

    pub fn full(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn smallest(&self) -> usize {
        self.0[0]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl TryFrom<Vec<usize>> for MrlDims {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        MrlDims::new(v)
    }
}

impl From<MrlDims> for Vec<usize> {
    fn from(d: MrlDims) -> Self {
        d.0
    }
}

/// Cosine similarity plus a flag set when either argument has zero norm
/// (the similarity is then reported as 0).
pub fn cosine_flagged(a: &[f64], b: &[f64]) -> Result<(f64, bool)> {
    Error::check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((dot(a, b) / (na * nb)).clamp(-1.0, 1.0), false))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_flagged(a, b).map(|(c, _)| c)
}

/// Elementwise mean of equal-length vectors.
pub fn mean_pool<T: AsRef<[f64]>>(tokens: &[T]) -> Result<Embedding> {
    let first = tokens.first().ok_or(Error::Empty("mean_pool tokens"))?;
    let dim = first.as_ref().len();
    let mut acc = vec![0.0; dim];
    for t in tokens {
        let t = t.as_ref();
        Error::check_dim(dim, t.len())?;
        for (a, v) in acc.iter_mut().zip(t) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Embedding::new(acc)
}

pub fn tanh_normalize(e: &[f64]) -> Result<Embedding> {
    Embedding::new(e.iter().map(|v| v.tanh()).collect())
}

/// Nested prefixes `e[..d]` for every `d` in `dims`.
pub fn slice_embedding(e: &[f64], dims: &MrlDims) -> Result<Vec<Embedding>> {
    if dims.full() != e.len() {
        return Err(Error::DimensionMismatch {
            expected: e.len(),
            actual: dims.full(),
        });
    }
    dims.as_slice()
        .iter()
        .map(|&d| Embedding::new(e[..d].to_vec()))
        .collect()
}

/// Collapses per-chunk audio features (one per fixed-length clip window)
/// into a single audio token by mean pooling.
pub fn aggregate_audio_chunks<T: AsRef<[f64]>>(chunks: &[T]) -> Result<Embedding> {
    if chunks.is_empty() {
        return Err(Error::Empty("audio chunks"));
    }
    mean_pool(chunks)
}

/// `|A| x |B|` table of cosines.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    /// Entries where a zero-norm row forced the similarity to 0.
    pub zero_norm: usize,
}

pub fn pairwise_similarity(a: &EmbeddingStore, b: &EmbeddingStore) -> Result<SimilarityMatrix> {
    if !a.is_empty() && !b.is_empty() {
        Error::check_dim(a.dim(), b.dim())?;
    }
    let b_norms: Vec<f64> = b.rows().iter().map(|r| r.norm()).collect();
    let rows: Vec<(Vec<f64>, usize)> = a
        .rows()
        .par_iter()
        .map(|ra| {
            let na = ra.norm();
            let mut zero = 0;
            let row = b
                .rows()
                .iter()
                .zip(&b_norms)
                .map(|(rb, &nb)| {
                    if na == 0.0 || nb == 0.0 {
                        zero += 1;
                        0.0
                    } else {
                        (dot(ra, rb) / (na * nb)).clamp(-1.0, 1.0)
                    }
                })
                .collect();
            (row, zero)
        })
        .collect();
    let zero_norm = rows.iter().map(|(_, z)| z).sum();
    let data = rows.into_iter().flat_map(|(r, _)| r).collect();
    Ok(SimilarityMatrix {
        values: Tensor::from_vec(a.len(), b.len(), data)?,
        zero_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(rows: &[Vec<f64>]) -> EmbeddingStore {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        let rows = rows.iter().cloned().map(|r| Embedding::new(r).unwrap()).collect();
        EmbeddingStore::from_parts(ids, rows).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn cosine_zero_vectors_flagged() {
        assert_eq!(cosine_flagged(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), (0.0, true));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mean_pool_examples() {
        assert_eq!(mean_pool(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap().values(), &[0.0, 0.0]);
        assert_eq!(mean_pool(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(
            mean_pool(&[vec![2.0, 4.0], vec![4.0, 8.0], vec![0.0, 0.0]]).unwrap().values(),
            &[2.0, 4.0]
        );
        assert!(mean_pool::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(tanh_normalize(&[0.0, 0.0]).unwrap().values(), &[0.0, 0.0]);
        assert!((tanh_normalize(&[1e9]).unwrap()[0] - 1.0).abs() < 1e-9);
        assert!((tanh_normalize(&[1.0]).unwrap()[0] - 0.76159416).abs() < 1e-8);
    }

    #[test]
    fn slicing_examples() {
        let e = [1.0, 2.0, 3.0, 4.0];
        let s = slice_embedding(&e, &MrlDims::new(vec![4]).unwrap()).unwrap();
        assert_eq!(s, vec![Embedding::new(e.to_vec()).unwrap()]);
        let s = slice_embedding(&e, &MrlDims::new(vec![2, 4]).unwrap()).unwrap();
        assert_eq!(s[0].values(), &[1.0, 2.0]);
        assert_eq!(s[1].values(), &e);
        let s = slice_embedding(&[5.0], &MrlDims::new(vec![1]).unwrap()).unwrap();
        assert_eq!(s[0].values(), &[5.0]);
        assert!(slice_embedding(&e, &MrlDims::new(vec![2, 8]).unwrap()).is_err());
    }

    #[test]
    fn mrl_dims_validation() {
        assert!(MrlDims::new(vec![]).is_err());
        assert!(MrlDims::new(vec![4, 4]).is_err());
        assert!(MrlDims::new(vec![8, 4]).is_err());
        assert!(MrlDims::for_dim(vec![2, 4], 8).is_err());
        assert_eq!(MrlDims::for_dim(vec![2, 8], 8).unwrap().smallest(), 2);
    }

    #[test]
    fn audio_chunk_examples() {
        let c = vec![0.3, -0.2];
        assert_eq!(aggregate_audio_chunks(std::slice::from_ref(&c)).unwrap().values(), &c[..]);
        assert_eq!(
            aggregate_audio_chunks(&[vec![1.0, 1.0], vec![3.0, 3.0]]).unwrap().values(),
            &[2.0, 2.0]
        );
        assert_eq!(
            aggregate_audio_chunks(&vec![vec![0.0, 0.0]; 3]).unwrap().values(),
            &[0.0, 0.0]
        );
        assert!(aggregate_audio_chunks::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let eye = store(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = pairwise_similarity(&eye, &eye).unwrap();
        assert_eq!(m.values.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        let m = pairwise_similarity(&store(&[vec![1.0, 0.0]]), &eye).unwrap();
        assert_eq!(m.values.as_slice(), &[1.0, 0.0]);
        assert!(pairwise_similarity(&eye, &store(&[vec![1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn store_rejects_duplicates_and_bad_dims() {
        let mut s = store(&[vec![1.0, 0.0]]);
        assert!(matches!(
            s.push("r0", Embedding::new(vec![0.0, 1.0]).unwrap()),
            Err(Error::DuplicateId(_))
        ));
        assert!(s.push("x", Embedding::new(vec![0.0]).unwrap()).is_err());
        assert!(Embedding::new(vec![f64::NAN]).is_err());
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in vec_strategy(6), b in vec_strategy(6)) {
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }

        #[test]
        fn cosine_is_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            prop_assert!((cosine(&scaled, &b).unwrap() - cosine(&a, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn slices_are_nested(e in prop::collection::vec(-5.0f64..5.0, 1..24), cut in 0usize..24) {
            let full = e.len();
            let mut dims = vec![full];
            let c = cut % full;
            if c > 0 { dims.insert(0, c); }
            let slices = slice_embedding(&e, &MrlDims::new(dims).unwrap()).unwrap();
            for w in slices.windows(2) {
                prop_assert_eq!(&w[1][..w[0].dim()], w[0].values());
            }
            prop_assert_eq!(slices.last().unwrap().values(), &e[..]);
        }

        #[test]
        fn tanh_stays_in_range(e in prop::collection::vec(-1e6f64..1e6, 1..16)) {
            for v in tanh_normalize(&e).unwrap().values() {
                prop_assert!((-1.0..=1.0).contains(v));
            }
        }

        #[test]
        fn pairwise_matches_entrywise_cosine(
            a in prop::collection::vec(vec_strategy(3), 1..64),
            b in prop::collection::vec(vec_strategy(3), 1..64),
        ) {
            let (sa, sb) = (store(&a), store(&b));
            let m = pairwise_similarity(&sa, &sb).unwrap();
            for (i, ra) in a.iter().enumerate() {
                for (j, rb) in b.iter().enumerate() {
                    prop_assert_eq!(m.values.get(i, j), cosine(ra, rb).unwrap());
                }
            }
        }
    }
}
