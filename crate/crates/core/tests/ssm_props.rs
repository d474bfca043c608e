use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssmcl::grad::backward;
use ssmcl::linalg::{gram, matmul, sym_eigh, Matrix};
use ssmcl::ssm::{
    build_lti_kernel, causal_conv, discretize, forward_block, selective_scan, softplus, Backbone,
    MambaBlockParams, ModelDims, SequenceBatch,
};

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn dims(d_raw: usize, d: usize, n: usize, gated: bool) -> ModelDims {
    ModelDims {
        d_raw,
        d_model: d,
        d_state: n,
        d_delta: d,
        d_out: d,
        n_blocks: 1,
        gated,
    }
}

/// Orthonormal basis (as columns) of the null space of `m` (rows × cols).
fn null_basis(m: &Matrix) -> Matrix {
    let e = sym_eigh(&gram(m)).unwrap();
    let tol = 1e-12 * e.values[0].max(f64::MIN_POSITIVE);
    let idx: Vec<usize> = (0..e.values.len()).filter(|&i| e.values[i] <= tol).collect();
    Matrix::from_fn(m.cols(), idx.len(), |r, c| e.vectors[(r, idx[c])])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn recurrence_matches_convolution_when_time_invariant(
        (l, d, n) in (1usize..10, 1usize..6, 1usize..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_matrix(&mut rng, l, d);
        let a = Matrix::from_fn(d, n, |_, _| -rng.gen_range(0.05..3.0));
        let delta0 = Matrix::from_fn(1, d, |_, _| rng.gen_range(1e-3..1.0));
        let b0 = rand_matrix(&mut rng, 1, n);
        let c0 = rand_matrix(&mut rng, 1, n);
        let rep = |m: &Matrix| Matrix::from_fn(l, m.cols(), |_, j| m[(0, j)]);
        let (abar, bbar) = discretize(&rep(&delta0), &a, &rep(&b0)).unwrap();
        let y = selective_scan(&x, &abar, &bbar, &rep(&c0)).unwrap();
        let (abar0, bbar0) = discretize(&delta0, &a, &b0).unwrap();
        let y_conv = causal_conv(&x, &build_lti_kernel(&abar0, &bbar0, &c0, l).unwrap()).unwrap();
        let err = y.sub(&y_conv).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-10 * y_conv.frobenius_norm().max(1e-300), "{err}");
    }

    #[test]
    fn block_is_causal(
        (l, pos) in (2usize..8).prop_flat_map(|l| (Just(l), 0..l)),
        gated in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = MambaBlockParams::init(3, &dims(3, 4, 3, gated), &mut rng);
        let u = rand_matrix(&mut rng, l, 3);
        let mut v = u.clone();
        v.row_mut(pos).iter_mut().for_each(|x| *x += rng.gen_range(0.5..2.0));
        let y = forward_block(&[u], &block, false).unwrap().0.remove(0);
        let z = forward_block(&[v], &block, false).unwrap().0.remove(0);
        for r in 0..pos {
            prop_assert_eq!(y.row(r), z.row(r));
        }
        prop_assert!(y.row(pos) != z.row(pos));
    }

    #[test]
    fn softplus_is_strictly_positive(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let y = softplus(x);
        prop_assert!(y > 0.0 && y.is_finite(), "softplus({x}) = {y}");
    }

    #[test]
    fn null_space_updates_leave_outputs_unchanged(seed in any::<u64>(), gated in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_raw, d) = (3, 8);
        let block = MambaBlockParams::init(d_raw, &dims(d_raw, d, 3, gated), &mut rng);
        // Two sequences of 3 tokens: 6 rows, so the mixed features are rank-deficient too.
        let inputs: Vec<Matrix> = (0..2).map(|_| rand_matrix(&mut rng, 3, d_raw)).collect();
        let (before, caps) = forward_block(&inputs, &block, true).unwrap();
        let feats = caps.unwrap();
        let nx = null_basis(&feats.x_feats);
        let ny = null_basis(&feats.y_feats);
        prop_assert!(nx.cols() > 0 && ny.cols() > 0);

        let mut moved = block.clone();
        let step = |basis: &Matrix, cols: usize, rng: &mut ChaCha8Rng| {
            matmul(basis, &rand_matrix(rng, basis.cols(), cols)).unwrap()
        };
        let dwc = step(&nx, moved.ssm.w_c.cols(), &mut rng);
        let dwd = step(&nx, moved.ssm.w_delta.cols(), &mut rng);
        let dwo = step(&ny, moved.w_out.cols(), &mut rng);
        moved.ssm.w_c.axpy(1.0, &dwc).unwrap();
        moved.ssm.w_delta.axpy(1.0, &dwd).unwrap();
        moved.w_out.axpy(1.0, &dwo).unwrap();
        prop_assert!(moved != block);

        let (after, _) = forward_block(&inputs, &moved, false).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (a, b) in before.iter().zip(&after) {
            num += a.sub(b).unwrap().frobenius_norm().powi(2);
            den += a.frobenius_norm().powi(2);
        }
        prop_assert!(num.sqrt() <= 1e-10 * den.sqrt(), "drift {}", num.sqrt() / den.sqrt());
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims { n_blocks: 2, ..dims(4, 5, 3, false) };
        let backbone = Backbone::init(&dims, seed).unwrap();
        let heads = vec![rand_matrix(&mut rng, 5, 2), rand_matrix(&mut rng, 5, 3)];
        let batch = SequenceBatch::new(
            (0..3).map(|_| rand_matrix(&mut rng, 4, 4)).collect(),
            vec![0, 4, 2],
        )
        .unwrap();
        let (l1, g1) = backward(&batch, &backbone, &heads).unwrap();
        let (l2, g2) = backward(&batch, &backbone, &heads).unwrap();
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert_eq!(g1, g2);
    }
}
