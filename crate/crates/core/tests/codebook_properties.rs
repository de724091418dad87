use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xpq_core::codebook::{CodebookConfig, CodebookParams};
use xpq_core::linalg::Matrix;
use xpq_core::mapping::mapping_score;

fn random_queries(m: usize, dim: usize, seed: u64, scale: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(m, dim, |_, _| rng.random_range(-scale..scale))
}

fn config(n: usize, heads: usize, dim: usize) -> CodebookConfig {
    CodebookConfig { n, heads, d_k: 5, d_v: 3, dim }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), m in 1usize..12, n in 1usize..40, heads in 1usize..5, scale in 0.1f64..20.0) {
        let cb = CodebookParams::init(config(n, heads, 4), seed).unwrap();
        let (_, rec) = cb.forward_matrix(&random_queries(m, 4, seed ^ 1, scale)).unwrap();
        for w in &rec.weights {
            for r in 0..m {
                let row = w.row(r);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_query_rows_attend_uniformly(seed in any::<u64>(), log_n in 0u32..8, heads in 1usize..5) {
        let n = 1usize << log_n;
        let cb = CodebookParams::init(config(n, heads, 3), seed).unwrap();
        let mut q = random_queries(4, 3, seed ^ 2, 1.0);
        q.row_mut(2).fill(0.0);
        let (out, rec) = cb.forward_matrix(&q).unwrap();
        for (h, w) in rec.weights.iter().enumerate() {
            prop_assert!(w.row(2).iter().all(|&x| x == 1.0 / n as f64));
            for c in 0..3 {
                let col_mean = (0..n).map(|i| cb.codes[h].get(i, c)).sum::<f64>() / n as f64;
                prop_assert!((out.get(2, h * 3 + c) - col_mean).abs() <= 1e-15 * (1.0 + col_mean.abs()));
            }
        }
    }

    #[test]
    fn permuting_query_rows_permutes_outputs_bitwise(seed in any::<u64>(), m in 2usize..10) {
        let cb = CodebookParams::init(config(12, 3, 4), seed).unwrap();
        let q = random_queries(m, 4, seed ^ 3, 2.0);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.rotate_left(seed as usize % m);
        perm.swap(0, m - 1);
        let pq = Matrix::from_fn(m, 4, |r, c| q.get(perm[r], c));
        let (out, rec) = cb.forward_matrix(&q).unwrap();
        let (pout, prec) = cb.forward_matrix(&pq).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            prop_assert_eq!(pout.row(r), out.row(src));
            for h in 0..3 {
                prop_assert_eq!(prec.weights[h].row(r), rec.weights[h].row(src));
            }
        }
    }

    #[test]
    fn mapping_scores_ignore_code_relabeling(seed in any::<u64>()) {
        let mut cb = CodebookParams::init(config(10, 2, 4), seed).unwrap();
        let q = random_queries(5, 4, seed ^ 4, 1.5);
        let (_, rec) = cb.forward_matrix(&q).unwrap();
        let perm: Vec<usize> = (0..10).map(|i| (i * 3 + seed as usize) % 10).collect();
        for h in 0..2 {
            let keys = cb.keys[h].clone();
            let codes = cb.codes[h].clone();
            cb.keys[h] = Matrix::from_fn(10, keys.cols(), |r, c| keys.get(perm[r], c));
            cb.codes[h] = Matrix::from_fn(10, codes.cols(), |r, c| codes.get(perm[r], c));
        }
        let (_, prec) = cb.forward_matrix(&q).unwrap();
        for p in 0..5 {
            for r in 0..5 {
                let a = mapping_score(&rec.phoneme(p), &rec.phoneme(r)).unwrap();
                let b = mapping_score(&prec.phoneme(p), &prec.phoneme(r)).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
            }
        }
    }
}
