use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::opq::CodeAssignment;

/// Token-level transition logits from item-level complementary pairs.
///
/// Returns a `D × C²` tensor whose row `k` is `log((M_k + M_kᵀ)/2 + eps)`
/// flattened row-major, where `M_k[c_i, c_j]` accumulates `w_ij`.
pub fn init_transition_prior(
    relations: &BTreeMap<(usize, usize), f64>,
    codes: &CodeAssignment,
    eps: f64,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("smoothing constant must be positive, got {eps}")));
    }
    let (d, c) = (codes.subspaces, codes.codebook_size);
    let mut m = vec![0.0; d * c * c];
    for (&(i, j), &w) in relations {
        if i >= codes.rows || j >= codes.rows {
            return Err(Error::Invalid(format!("relation ({i}, {j}) references an item without codes")));
        }
        let (ci, cj) = (codes.item(i), codes.item(j));
        for k in 0..d {
            m[k * c * c + ci[k] * c + cj[k]] += w;
        }
    }
    let mut t = vec![0.0; d * c * c];
    for k in 0..d {
        let base = k * c * c;
        for a in 0..c {
            for b in 0..c {
                let sym = 0.5 * (m[base + a * c + b] + m[base + b * c + a]);
                t[base + a * c + b] = (sym + eps).ln();
            }
        }
    }
    Tensor::matrix(d, c * c, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_codes() -> CodeAssignment {
        CodeAssignment {
            rows: 2,
            subspaces: 2,
            codebook_size: 4,
            codes: vec![1, 2, 3, 2],
        }
    }

    #[test]
    fn empty_relations_give_constant() {
        let t = init_transition_prior(&BTreeMap::new(), &fixture_codes(), 1.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_weights_raises_touched_logits() {
        let codes = fixture_codes();
        let r1: BTreeMap<_, _> = [((0, 1), 0.4), ((1, 0), 0.4)].into();
        let r2: BTreeMap<_, _> = [((0, 1), 0.8), ((1, 0), 0.8)].into();
        let a = init_transition_prior(&r1, &codes, 1.0).unwrap();
        let b = init_transition_prior(&r2, &codes, 1.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x != 0.0 {
                assert!(y > x);
            }
        }
    }

    #[test]
    fn rejects_bad_eps_and_unknown_items() {
        let r: BTreeMap<_, _> = [((0, 5), 0.4)].into();
        assert!(init_transition_prior(&r, &fixture_codes(), 1.0).is_err());
        assert!(init_transition_prior(&BTreeMap::new(), &fixture_codes(), 0.0).is_err());
    }
}
