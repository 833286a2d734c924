use gralora_core::adapters::{init_adapter, random_adapter, Adapter, AdaptedLayer, AdapterSpec};
use gralora_core::gradients::{backward, check_gradients, BatchInput, GradCheckOptions, LossSpec};
use gralora_core::linalg::{numerical_rank, svd, DEFAULT_RANK_TOL};
use gralora_core::outlier::gradient_deviation;
use gralora_core::rng::rng_from_seed;
use gralora_core::Matrix;
use proptest::prelude::*;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::gaussian(rows, cols, 1.0, &mut rng_from_seed(seed))
}

/// `(M, N, r, k)` with `k ∈ {1, 2, 4}` dividing all three.
fn grid_shape() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (0u32..3, 1usize..6, 1usize..6, 1usize..4).prop_map(|(e, a, b, c)| {
        let k = 1 << e;
        (k * a, k * b, k * c, k)
    })
}

fn low_rank(rows: usize, cols: usize, rank: usize, seed: u64) -> Matrix {
    gaussian(rows, rank, seed).matmul(&gaussian(rank, cols, seed ^ 0xFF)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(m in 1usize..9, n in 1usize..9, p in 1usize..9, q in 1usize..9, seed: u64) {
        let (a, b, c) = (gaussian(m, n, seed), gaussian(n, p, seed + 1), gaussian(p, q, seed + 2));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.relative_error(&right).unwrap() <= 1e-9);
    }

    #[test]
    fn product_rank_is_bounded(m in 2usize..12, p in 2usize..12, n in 2usize..12, ra in 1usize..6, rb in 1usize..6, seed: u64) {
        let a = low_rank(m, p, ra.min(m).min(p), seed);
        let b = low_rank(p, n, rb.min(p).min(n), seed + 7);
        let rank_ab = numerical_rank(&a.matmul(&b).unwrap(), DEFAULT_RANK_TOL);
        let bound = numerical_rank(&a, DEFAULT_RANK_TOL).min(numerical_rank(&b, DEFAULT_RANK_TOL));
        prop_assert!(rank_ab <= bound);
    }

    #[test]
    fn svd_reconstructs(m in 1usize..14, n in 1usize..14, rank in 1usize..14, seed: u64) {
        let a = low_rank(m, n, rank, seed);
        let s = svd(&a);
        prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.singular_values.iter().all(|&v| v >= 0.0));
        let gap = s.reconstruct().sub(&a).unwrap().frobenius_norm();
        prop_assert!(gap <= 1e-9 * a.frobenius_norm().max(1.0));
    }

    #[test]
    fn param_count_is_k_invariant((m, n, r, k) in grid_shape()) {
        let lora = init_adapter(&AdapterSpec::lora(m, n, r), 0).unwrap().param_count();
        let grid = init_adapter(&AdapterSpec::gralora(m, n, r, k), 0).unwrap().param_count();
        prop_assert_eq!(lora, grid);
        prop_assert_eq!(lora, r * (m + n));
    }

    #[test]
    fn regularized_form_matches_fused_update((m, n, r, k) in grid_shape(), seed: u64) {
        let Adapter::Gralora(g) = random_adapter(&AdapterSpec::gralora(m, n, r, k), seed).unwrap() else { unreachable!() };
        let (a_g, b_g) = g.to_regularized_form();
        let target = g.fused_update().scale(1.0 / g.scale);
        let product = b_g.matmul_t(&a_g).unwrap();
        prop_assert!(product.sub(&target).unwrap().frobenius_norm() <= 1e-12 * target.frobenius_norm());
        prop_assert_eq!(a_g.count_nonzero(), n * r);
        prop_assert_eq!(b_g.count_nonzero(), m * r);
    }

    #[test]
    fn sylvester_sandwich((m, n, r, k) in grid_shape(), seed: u64) {
        let Adapter::Gralora(g) = random_adapter(&AdapterSpec::gralora(m, n, r, k), seed).unwrap() else { unreachable!() };
        let (a_g, b_g) = g.to_regularized_form();
        let rb = numerical_rank(&b_g, DEFAULT_RANK_TOL);
        let ra = numerical_rank(&a_g, DEFAULT_RANK_TOL);
        let rp = numerical_rank(&b_g.matmul_t(&a_g).unwrap(), DEFAULT_RANK_TOL);
        prop_assert!(rb + ra <= rp + k * r);
        prop_assert!(rp <= ra.min(rb));
    }

    #[test]
    fn fused_gradient_identity((m, n, r, k) in grid_shape(), t in 1usize..6, seed: u64) {
        // dB·Aᵀ + B·dAᵀ against s·G·A·Aᵀ + s·B·Bᵀ·G on every block
        let spec = AdapterSpec::gralora(m, n, r, k).with_alpha(1.7);
        let adapter = random_adapter(&spec, seed).unwrap();
        let layer = AdaptedLayer::new(gaussian(m, n, seed + 1), adapter).unwrap();
        let x = BatchInput::new(gaussian(n, t, seed + 2));
        let dy = gaussian(m, t, seed + 3);
        let grads = backward(&layer, &x, &dy).unwrap();
        let Adapter::Gralora(g) = &layer.adapter else { unreachable!() };
        let full = dy.matmul_t(x.x()).unwrap();
        let (bm, bn) = (g.block_rows(), g.block_cols());
        let mut expected = Matrix::zeros(m, n);
        for i in 0..k {
            for j in 0..k {
                let p = g.block(i, j);
                let gij = full.submatrix(i * bm, j * bn, bm, bn);
                let left = gij.matmul(&p.a).unwrap().matmul_t(&p.a).unwrap();
                let right = p.b.matmul_t(&p.b).unwrap().matmul(&gij).unwrap();
                expected.set_submatrix(i * bm, j * bn, &left.add(&right).unwrap().scale(g.scale));
            }
        }
        prop_assert!(grads.d_fused.relative_error(&expected).unwrap() <= 1e-10);
    }

    #[test]
    fn block_gradient_depends_only_on_its_slices(seed: u64, bi in 0usize..2, bj in 0usize..2) {
        let (m, n, t) = (8, 8, 5);
        let adapter = random_adapter(&AdapterSpec::gralora(m, n, 4, 2), seed).unwrap();
        let layer = AdaptedLayer::new(gaussian(m, n, seed + 1), adapter).unwrap();
        let x = gaussian(n, t, seed + 2);
        let dy = gaussian(m, t, seed + 3);
        let full = backward(&layer, &BatchInput::new(x.clone()), &dy).unwrap();
        // zero every other slice of X and dY
        let keep_x = Matrix::from_fn(n, t, |i, q| if i / 4 == bj { x[(i, q)] } else { 0.0 });
        let keep_dy = Matrix::from_fn(m, t, |i, q| if i / 4 == bi { dy[(i, q)] } else { 0.0 });
        let masked = backward(&layer, &BatchInput::new(keep_x), &keep_dy).unwrap();
        let b = bi * 2 + bj;
        let (_, fb) = full.factors.grid().unwrap();
        let (_, mb) = masked.factors.grid().unwrap();
        prop_assert_eq!(&fb[b].db, &mb[b].db);
        prop_assert_eq!(&fb[b].da, &mb[b].da);
    }

    #[test]
    fn single_channel_gives_single_fft_column(c in 0usize..6, seed: u64) {
        let (m, n, t) = (5, 6, 4);
        let layer = AdaptedLayer::new(gaussian(m, n, seed), init_adapter(&AdapterSpec::lora(m, n, 2), seed).unwrap()).unwrap();
        let row = gaussian(1, t, seed + 1);
        let x = Matrix::from_fn(n, t, |i, q| if i == c { row[(0, q)] } else { 0.0 });
        let grads = backward(&layer, &BatchInput::new(x), &gaussian(m, t, seed + 2)).unwrap();
        for i in 0..m {
            for j in 0..n {
                if j != c {
                    prop_assert_eq!(grads.d_weight_fft[(i, j)], 0.0);
                }
            }
        }
        prop_assert!(grads.d_weight_fft.column_norms()[c] > 0.0);
    }

    #[test]
    fn cosine_distance_ignores_positive_scale(seed: u64, c in 1e-6f64..1e6) {
        let (g1, g2) = (gaussian(6, 7, seed), gaussian(6, 7, seed + 1));
        let base = gradient_deviation(&g1, &g2).unwrap().cosine_distance;
        let scaled = gradient_deviation(&g1.scale(c), &g2).unwrap().cosine_distance;
        prop_assert!((base - scaled).abs() <= 1e-13);
        prop_assert!((0.0..=2.0).contains(&base));
    }
}

#[test]
fn outlier_column_dominates_fft_gradient() {
    let (m, n, t, c) = (16, 32, 64, 11);
    let spec = gralora_core::outlier::OutlierSpec::single(c, 100.0);
    let x = gralora_core::outlier::make_outlier_input(n, t, &spec, 3).unwrap();
    let layer = AdaptedLayer::new(gaussian(m, n, 4), init_adapter(&AdapterSpec::lora(m, n, 4), 0).unwrap()).unwrap();
    let ones = Matrix::from_fn(m, t, |_, _| 1.0);
    let norms = backward(&layer, &x, &ones).unwrap().d_weight_fft.column_norms();
    let argmax = (0..n).max_by(|&a, &b| norms[a].total_cmp(&norms[b])).unwrap();
    assert_eq!(argmax, c);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let opts = GradCheckOptions {
        tolerance: 1e-6,
        ..GradCheckOptions::default()
    };
    for seed in 0..4 {
        for spec in [
            AdapterSpec::lora(12, 8, 4),
            AdapterSpec::gralora(12, 8, 4, 2),
            AdapterSpec::hybrid(12, 8, 4, 2, 2),
        ] {
            let layer = AdaptedLayer::new(gaussian(12, 8, seed), random_adapter(&spec, seed).unwrap()).unwrap();
            let x = BatchInput::new(gaussian(8, 6, seed + 10));
            let loss = LossSpec::random_target(12, 6, seed);
            let report = check_gradients(&layer, &x, &loss, &opts).unwrap();
            assert!(report.passed, "{:?} seed {seed}: {}", spec.kind, report.max_rel_error);
        }
    }
}
