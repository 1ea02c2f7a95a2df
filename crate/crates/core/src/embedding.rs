//! Sentence embeddings. All similarity signals in training (ballast scoring,
//! toxicity rewards, discriminator features) flow through one backend trait,
//! so the embedding function can be swapped without touching the loops.
//!
//! The default backend is deliberately simple and fully deterministic: each
//! token id keys a pseudorandom vector, a sequence embeds as the mean of its
//! token vectors, and the mean is length-normalized. Sequences sharing many
//! tokens land close together, which is all the training signal needs at desk
//! scale. A remote-encoder adapter fills the same slot for full-scale runs.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::rng::{rng_from, stream};
use crate::{Error, Result};

/// A finite real vector produced by an embedding backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("empty embedding vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite value in embedding vector".into()));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Maps token sequences to fixed-dimension vectors. Implementations must be
/// concurrency-safe; deterministic backends must be pure functions of the
/// input sequence.
pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Whether repeated calls on the same input are guaranteed identical.
    fn deterministic(&self) -> bool;
    fn embed(&self, seq: &TokenSequence) -> Result<EmbeddingVector>;
}

/// Default offline backend: seeded pseudorandom table keyed by token id,
/// mean-pooled over the sequence, length-normalized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HashedBagBackend {
    pub dim: usize,
    pub seed: u64,
}

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

impl HashedBagBackend {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(HashedBagBackend { dim, seed })
    }

    /// The table row for one token id, regenerated on demand from the seed.
    fn token_vector(&self, token: u32) -> Vec<f64> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = rng_from(self.seed, &[stream::EMBED, token as u64]);
        (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

impl EmbeddingBackend for HashedBagBackend {
    fn name(&self) -> &str {
        "hashed-bag"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed(&self, seq: &TokenSequence) -> Result<EmbeddingVector> {
        let mut acc = vec![0.0; self.dim];
        for &token in seq.ids() {
            for (a, v) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += v;
            }
        }
        let n = seq.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Domain("token vectors cancelled to a zero embedding".into()));
        }
        for a in &mut acc {
            *a /= norm;
        }
        EmbeddingVector::new(acc)
    }
}

/// Cosine similarity, clamped into [-1, 1] against floating-point overshoot.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Domain(format!(
            "cosine over mismatched dimensions {} and {}",
            u.dim(),
            v.dim()
        )));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = u.values().iter().zip(v.values()).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Highest cosine similarity between `x` and any pool member. An empty pool
/// has no meaningful maximum; reaching one is a sequencing bug (the trainer
/// must never take a toxicity step without ballast), hence a state error.
pub fn max_cosine_to_pool<'a, I>(x: &EmbeddingVector, pool: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    let mut best = f64::NEG_INFINITY;
    let mut any = false;
    for member in pool {
        any = true;
        best = best.max(cosine(x, member)?);
    }
    if !any {
        return Err(Error::State("max cosine over an empty pool".into()));
    }
    Ok(best)
}

/// Serializable description of an embedding backend, used by configs and
/// checkpoints so a run can rebuild the exact same geometry.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EmbeddingSpec {
    /// The deterministic offline default.
    HashedBag { dim: usize, seed: u64 },
    /// Remote encoder endpoint (text in, float vector out).
    Remote { endpoint: String, model: String, dim: usize },
}

impl EmbeddingSpec {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSpec::HashedBag { dim, .. } => *dim,
            EmbeddingSpec::Remote { dim, .. } => *dim,
        }
    }

    /// Builds the backend. The vocabulary is needed by remote backends to
    /// detokenize sequences into text.
    pub fn build(
        &self,
        vocab: &std::sync::Arc<crate::corpus::Vocabulary>,
    ) -> Result<std::sync::Arc<dyn EmbeddingBackend>> {
        match self {
            EmbeddingSpec::HashedBag { dim, seed } => {
                Ok(std::sync::Arc::new(HashedBagBackend::new(*dim, *seed)?))
            }
            EmbeddingSpec::Remote { endpoint, model, dim } => {
                Ok(std::sync::Arc::new(crate::provider::RemoteEncoderBackend::new(
                    endpoint.clone(),
                    model.clone(),
                    *dim,
                    vocab.clone(),
                )?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn default_backend_is_unit_norm_and_pure() {
        let backend = HashedBagBackend::new(DEFAULT_EMBEDDING_DIM, 7).unwrap();
        let a = backend.embed(&seq(&[4, 5, 6, 4])).unwrap();
        let b = backend.embed(&seq(&[4, 5, 6, 4])).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a.dim(), DEFAULT_EMBEDDING_DIM);
        assert!(backend.deterministic());
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        let backend = HashedBagBackend::new(32, 7).unwrap();
        let base = backend.embed(&seq(&[4, 5, 6, 7])).unwrap();
        let near = backend.embed(&seq(&[4, 5, 6, 8])).unwrap();
        let far = backend.embed(&seq(&[20, 21, 22, 23])).unwrap();
        assert!(cosine(&base, &near).unwrap() > cosine(&base, &far).unwrap());
    }

    #[test]
    fn cosine_self_is_one_and_orthogonal_is_zero() {
        let x = EmbeddingVector::new(vec![0.3, -1.2, 0.5]).unwrap();
        assert!((cosine(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let e1 = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let e2 = EmbeddingVector::new(vec![0.0, 2.0]).unwrap();
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        // 45-degree pair.
        let diag = EmbeddingVector::new(vec![1.0, 1.0]).unwrap();
        assert!((cosine(&e1, &diag).unwrap() - 0.707_106_78).abs() < 1e-8);
    }

    #[test]
    fn bag_embedding_is_order_invariant() {
        let backend = HashedBagBackend::new(32, 7).unwrap();
        let fwd = backend.embed(&seq(&[4, 5, 6])).unwrap();
        let rev = backend.embed(&seq(&[6, 5, 4])).unwrap();
        // Token means ignore order, so the reversal embeds identically.
        for (a, b) in fwd.values().iter().zip(rev.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_rejects_zero_norm_and_mismatched_dims() {
        let zero = EmbeddingVector::new(vec![0.0, 0.0]).unwrap();
        let x = EmbeddingVector::new(vec![1.0, 1.0]).unwrap();
        assert!(matches!(cosine(&zero, &x), Err(Error::Domain(_))));
        let y = EmbeddingVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(cosine(&x, &y), Err(Error::Domain(_))));
    }

    #[test]
    fn non_finite_vectors_are_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![f64::INFINITY]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    #[test]
    fn pool_maximum_basics() {
        let x = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let empty: Vec<EmbeddingVector> = Vec::new();
        assert!(matches!(max_cosine_to_pool(&x, &empty), Err(Error::State(_))));
        let singleton = [x.clone()];
        assert!((max_cosine_to_pool(&x, &singleton).unwrap() - 1.0).abs() < 1e-12);
        // A pool containing the query and its negation still maxes at 1.
        let neg = EmbeddingVector::new(vec![-1.0, 0.0]).unwrap();
        let pair = [neg, x.clone()];
        assert!((max_cosine_to_pool(&x, &pair).unwrap() - 1.0).abs() < 1e-12);
    }

    fn vector_strategy() -> impl Strategy<Value = EmbeddingVector> {
        proptest::collection::vec(-5.0f64..5.0, 4)
            .prop_filter("needs nonzero norm", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
            .prop_map(|v| EmbeddingVector::new(v).unwrap())
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_scale_invariant_and_bounded(
            u in vector_strategy(),
            v in vector_strategy(),
            alpha in 0.01f64..100.0,
        ) {
            let c = cosine(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            prop_assert_eq!(c, cosine(&v, &u).unwrap());
            let scaled =
                EmbeddingVector::new(u.values().iter().map(|x| x * alpha).collect()).unwrap();
            prop_assert!((cosine(&scaled, &v).unwrap() - c).abs() < 1e-9);
        }

        #[test]
        fn pool_maximum_decomposes_over_splits(
            x in vector_strategy(),
            pool in proptest::collection::vec(vector_strategy(), 1..8),
            split in 0usize..8,
        ) {
            let split = split.min(pool.len());
            let whole = max_cosine_to_pool(&x, &pool).unwrap();
            let left = max_cosine_to_pool(&x, &pool[..split]).ok();
            let right = max_cosine_to_pool(&x, &pool[split..]).ok();
            let recombined = left.into_iter().chain(right).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(whole, recombined);
        }
    }
}
