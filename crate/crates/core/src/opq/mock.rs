use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::corpus::Item;
use crate::numcore::Tensor;

/// Weight of the shared group direction relative to the per-text direction.
pub const MOCK_GROUP_WEIGHT: f64 = 1.5;

fn hashed_gaussian(key: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(key.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Deterministic unit-norm embedding of `text`. Texts sharing a `group` are
/// pulled towards a common direction.
pub fn mock_embedding(text: &str, group: Option<&str>, dim: usize) -> Vec<f64> {
    let mut v = hashed_gaussian(&format!("text:{text}"), dim);
    let scale = (dim as f64).sqrt().recip();
    v.iter_mut().for_each(|x| *x *= scale);
    if let Some(g) = group.filter(|g| !g.is_empty()) {
        let gv = hashed_gaussian(&format!("group:{g}"), dim);
        for (x, y) in v.iter_mut().zip(gv) {
            *x += MOCK_GROUP_WEIGHT * scale * y;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Offline stand-in for a sentence encoder.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        MockEmbedder { dim }
    }

    /// Groups by the most specific (last) category.
    pub fn embed_item(&self, item: &Item) -> Vec<f64> {
        let group = item.categories.last().map(String::as_str);
        mock_embedding(&item.text_feature(), group, self.dim)
    }

    pub fn embed_items(&self, items: &[Item]) -> Tensor {
        let mut data = Vec::with_capacity(items.len() * self.dim);
        for it in items {
            data.extend(self.embed_item(it));
        }
        Tensor::matrix(items.len(), self.dim, data).expect("row-major buffer matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_and_normalized() {
        let a = mock_embedding("red mug", Some("kitchen"), 64);
        let b = mock_embedding("red mug", Some("kitchen"), 64);
        assert_eq!(a, b);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shared_group_raises_similarity() {
        let a = mock_embedding("a", Some("g1"), 256);
        let b = mock_embedding("b", Some("g1"), 256);
        let c = mock_embedding("c", Some("g2"), 256);
        assert!(dot(&a, &b) > 0.5);
        assert!(dot(&a, &c).abs() < 0.3);
    }
}
