//! Every differentiable primitive must agree with central finite differences.

use cast_core::numcore::{finite_difference_check, Graph, Tensor, Var};
use cast_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces an arbitrary tensor to a scalar with non-uniform weights so that
/// every output element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(shape, w)?)?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn check<F>(seed: u64, mut params: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let rep = finite_difference_check(
        |g, v| {
            let y = f(g, v)?;
            if g.value(y).len() == 1 {
                Ok(y)
            } else {
                weighted_sum(g, y, seed)
            }
        },
        &mut params,
        H,
    )
    .unwrap();
    rep.max_rel_err
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_transpose_add(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, n, k);
        let bias = random(&mut rng, 1, n);
        let err = check(seed, vec![a, b, bias], |g, v| {
            let bt = g.transpose(v[1])?;
            let y = g.matmul(v[0], bt)?;
            g.add(y, v[2])
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn elementwise_ops(seed in any::<u64>(), m in 1usize..4, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, m, n);
        let b = random(&mut rng, m, n);
        let err = check(seed, vec![a, b], |g, v| {
            let s = g.sub(v[0], v[1])?;
            let p = g.mul(s, v[0])?;
            let q = g.scale(p, -0.7)?;
            g.add(q, v[1])
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn concat_slice_reshape(seed in any::<u64>(), m in 1usize..4, n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, m, n);
        let b = random(&mut rng, m, n + 1);
        let err = check(seed, vec![a, b], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let s = g.slice(c, 0..m, 1..2 * n)?;
            let r = g.concat_rows(&[s, s])?;
            g.reshape(r, vec![2 * m * (2 * n - 1), 1])
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn lookups(seed in any::<u64>(), rows in 2usize..6, cols in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random(&mut rng, rows, cols);
        let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..rows)).collect();
        let flat: Vec<usize> = (0..7).map(|_| rng.random_range(0..rows * cols)).collect();
        let err = check(seed, vec![table], move |g, v| {
            let a = g.gather_rows(v[0], idx.clone())?;
            let b = g.gather(v[0], flat.clone(), vec![7, 1])?;
            let sa = g.sum(a)?;
            let sb = weighted_sum(g, b, 3)?;
            let both = g.concat_cols(&[sa, sb])?;
            weighted_sum(g, both, 5)
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn masked_softmax(seed in any::<u64>(), m in 1usize..4, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, m, n);
        let keep: Vec<bool> = (0..m * n).map(|i| i % n <= i / n || rng.random_bool(0.5)).collect();
        let err = check(seed, vec![x], move |g, v| g.softmax(v[0], Some(&keep)));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn gelu_sigmoid_log(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, 1, n);
        let err = check(seed, vec![x], |g, v| {
            let a = g.gelu(v[0])?;
            let s = g.sigmoid(v[0])?;
            let l = g.log(s)?;
            let ls = g.log_sigmoid(a)?;
            let t = g.add(l, ls)?;
            g.add(t, a)
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn layer_norm(seed in any::<u64>(), m in 1usize..4, n in 3usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, m, n);
        let gamma = random(&mut rng, 1, n);
        let beta = random(&mut rng, 1, n);
        let err = check(seed, vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn cross_entropy_and_means(seed in any::<u64>(), m in 1usize..4, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, m, n);
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let err = check(seed, vec![x], move |g, v| {
            let ce = g.cross_entropy(v[0], &targets)?;
            let mu = g.mean(v[0])?;
            let both = g.concat_cols(&[ce, mu])?;
            weighted_sum(g, both, 9)
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn standardize(seed in any::<u64>(), m in 1usize..4, n in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, m, n);
        let err = check(seed, vec![x], |g, v| g.zscore_rows(v[0]));
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), m in 1usize..6, n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, m, n);
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let y = g.softmax(v, None).unwrap();
        for r in 0..m {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
