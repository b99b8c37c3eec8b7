use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semrec_tape::gradcheck::{numeric_grad, relative_error};
use semrec_tape::{ParamStore, Tape, Tensor};

fn mat(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transposed_products_agree(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in 0u64..1000) {
        let a = mat(m, k, seed);
        let b = mat(n, k, seed + 1);
        let c = mat(m, n, seed + 2);
        let nt = a.matmul_nt(&b);
        let explicit = a.matmul(&b.transpose());
        prop_assert!(relative_error(&nt, &explicit, 1e-12) < 1e-12);
        let tn = a.matmul_tn(&c);
        prop_assert!(relative_error(&tn, &a.transpose().matmul(&c), 1e-12) < 1e-12);
    }

    #[test]
    fn composite_graph_matches_finite_differences(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let x = mat(m, k, seed);
        let w = mat(k, n, seed + 7);
        let v = mat(m, n, seed + 9);
        let store = ParamStore::new();
        let build = |t: &mut Tape<'_, f64>, xv| {
            let wv = t.constant(w.clone());
            let gv = t.constant(v.clone());
            let h = t.matmul(xv, wv);
            let h = t.tanh(h);
            let s = t.sigmoid(h);
            let p = t.mul(s, gv);
            let q = t.add(p, h);
            t.mean(q)
        };
        let mut tape = Tape::new(&store);
        let xv = tape.input(x.clone());
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss);
        let analytic = grads.get(xv).cloned().unwrap();
        let numeric = numeric_grad(&x, 1e-6, |p| {
            let mut t = Tape::new(&store);
            let pv = t.input(p.clone());
            let y = build(&mut t, pv);
            t.value(y).item()
        });
        prop_assert!(relative_error(&analytic, &numeric, 1e-10) < 1e-6);
    }
}
