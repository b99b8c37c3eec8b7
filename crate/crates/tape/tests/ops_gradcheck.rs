use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semrec_tape::gradcheck::{numeric_grad, relative_error};
use semrec_tape::{AttnSpec, ParamStore, Tape, Tensor, Var};

type Build = fn(&mut Tape<'_, f64>, Var) -> Var;

fn check_unary(name: &str, x: Tensor<f64>, build: Build) {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone());
    let y = build(&mut tape, xv);
    let loss = tape.sum(y);
    let grads = tape.backward(loss);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
    let numeric = numeric_grad(&x, 1e-6, |p| {
        let mut t = Tape::new(&store);
        let v = t.input(p.clone());
        let y = build(&mut t, v);
        t.value(y).sum()
    });
    let err = relative_error(&analytic, &numeric, 1e-10);
    assert!(err < 1e-6, "{name}: relative error {err}");
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn weights(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn elementwise_ops() {
    let x = Tensor::randn(3, 4, 1.0, &mut rng());
    check_unary("sigmoid", x.clone(), |t, v| t.sigmoid(v));
    check_unary("tanh", x.clone(), |t, v| t.tanh(v));
    check_unary("gelu", x.clone(), |t, v| t.gelu(v));
    check_unary("square", x.clone(), |t, v| t.square(v));
    check_unary("relu", x.map(|v| if v.abs() < 0.05 { 0.3 } else { v }), |t, v| t.relu(v));
    check_unary("scale", x.clone(), |t, v| {
        let s = t.scale(v, 1.7);
        t.square(s)
    });
}

#[test]
fn products_and_broadcasts() {
    let x = Tensor::randn(3, 4, 1.0, &mut rng());
    check_unary("matmul", x.clone(), |t, v| {
        let w = t.constant(weights(4, 2, 1));
        let y = t.matmul(v, w);
        t.square(y)
    });
    check_unary("matmul-rhs", x.clone(), |t, v| {
        let w = t.constant(weights(2, 3, 2));
        let y = t.matmul(w, v);
        t.square(y)
    });
    check_unary("mul", x.clone(), |t, v| {
        let s = t.sigmoid(v);
        t.mul(s, v)
    });
    check_unary("add_row", x.clone(), |t, v| {
        let r = t.slice_cols(v, 0, 4);
        let r = t.gather_rows(r, &[1]);
        let y = t.add_row(v, r);
        t.square(y)
    });
    check_unary("add_col/mul_col", x.clone(), |t, v| {
        let c = t.row_mean(v);
        let y = t.add_col(v, c);
        let y = t.mul_col(y, c);
        t.square(y)
    });
    check_unary("mul_scalar", x.clone(), |t, v| {
        let s = t.slice_cols(v, 2, 1);
        let s = t.gather_rows(s, &[0]);
        let y = t.mul_scalar(v, s);
        t.square(y)
    });
}

#[test]
fn reshaping_ops() {
    let x = Tensor::randn(4, 3, 1.0, &mut rng());
    check_unary("concat", x.clone(), |t, v| {
        let s = t.sigmoid(v);
        let c = t.concat_cols(&[v, s, v]);
        let r = t.concat_rows(&[c, c]);
        t.square(r)
    });
    check_unary("gather/scatter", x.clone(), |t, v| {
        let g = t.gather_rows(v, &[3, 0, 0, 2]);
        let s = t.scatter_rows(g, &[1, 1, 4, 0], 5);
        t.square(s)
    });
    check_unary("reductions", x.clone(), |t, v| {
        let sq = t.square(v);
        let rs = t.row_sum(sq);
        let m = t.mean(v);
        let s = t.sum(rs);
        let y = t.mul(s, m);
        t.square(y)
    });
}

#[test]
fn normalizations_and_losses() {
    let x = Tensor::randn(3, 5, 1.0, &mut rng());
    check_unary("layer_norm", x.clone(), |t, v| {
        let g = t.constant(weights(1, 5, 3));
        let b = t.constant(weights(1, 5, 4));
        let y = t.layer_norm(v, g, b, 1e-5);
        let w = t.constant(weights(3, 5, 5));
        t.mul(y, w)
    });
    check_unary("softmax", x.clone(), |t, v| {
        let y = t.softmax_rows(v);
        let w = t.constant(weights(3, 5, 6));
        t.mul(y, w)
    });
    check_unary("cross_entropy", x.clone(), |t, v| {
        t.cross_entropy(v, &[0, 4, 2], Some(&[1.0, 2.0, 0.5]))
    });
}

#[test]
fn attention_matches_finite_differences() {
    let build: Build = |t, v| {
        // v packs q | k | v for 2 samples, q_len = k_len = 3, 2 heads of width 2.
        let q = t.slice_cols(v, 0, 4);
        let k = t.slice_cols(v, 4, 4);
        let vv = t.slice_cols(v, 8, 4);
        let spec = AttnSpec {
            batch: 2,
            q_len: 3,
            k_len: 3,
            heads: 2,
            head_dim: 2,
            key_lens: vec![3, 2],
            causal: true,
        };
        let o = t.attention(q, k, vv, spec);
        let w = t.constant(weights(6, 4, 9));
        t.mul(o, w)
    };
    check_unary("attention", Tensor::randn(6, 12, 1.0, &mut rng()), build);
}

#[test]
fn attention_respects_masks() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let q = tape.constant(Tensor::randn(2, 2, 1.0, &mut rng()));
    let k = tape.constant(Tensor::randn(2, 2, 1.0, &mut rng()));
    let v = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, 7.0]]));
    let spec = AttnSpec {
        batch: 1,
        q_len: 2,
        k_len: 2,
        heads: 1,
        head_dim: 2,
        key_lens: vec![2],
        causal: true,
    };
    let o = tape.attention(q, k, v, spec);
    // First query sees only the first key.
    assert_eq!(tape.value(o).row(0), &[1.0, 2.0]);
}
