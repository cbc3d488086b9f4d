use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficmoe_core::tensor::{Graph, Tensor, TensorError, Var};
use trafficmoe_core::Scalar;

/// Builds a scalar loss from leaf inputs; the loss is the op output dotted
/// with fixed random weights so every output element matters.
type Build<T> = dyn Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var, TensorError>;

fn weighted_loss<T: Scalar>(g: &mut Graph<'_, T>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::<T>::randn(&shape, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn eval<T: Scalar>(inputs: &[Tensor<T>], build: &Build<T>) -> f64 {
    let mut g = Graph::<T>::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = weighted_loss(&mut g, out, 99);
    g.value(loss).item().f64()
}

/// Max relative error between analytic gradients and central differences.
fn grad_error<T: Scalar>(inputs: &[Tensor<T>], build: &Build<T>, h: f64, floor: f64) -> f64 {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = weighted_loss(&mut g, out, 99);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(gr) => gr.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; inputs[i].len()],
        };
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] += T::c(h);
            minus[i].data_mut()[j] -= T::c(h);
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    worst
}

fn rand_t<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape, 1.0, rng)
}

fn check64(name: &str, inputs: Vec<Tensor<f64>>, build: &Build<f64>) {
    let err = grad_error(&inputs, build, 1e-6, 1e-6);
    assert!(err < 1e-5, "{name}: relative gradient error {err}");
}

#[test]
fn matmul_f32_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![rand_t::<f32>(&[3, 4], &mut rng), rand_t::<f32>(&[4, 2], &mut rng)];
    let build: &Build<f32> = &|g, v| g.matmul(v[0], v[1]);
    // f32 central differences at h = 1e-3 carry ~1e-4 absolute rounding noise.
    let err = grad_error(&inputs, build, 1e-3, 1e-1);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn every_primitive_matches_finite_differences_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = &mut rng;
    check64("matmul", vec![rand_t(&[3, 4], r), rand_t(&[4, 2], r)], &|g, v| g.matmul(v[0], v[1]));
    check64("matvec", vec![rand_t(&[3, 4], r), rand_t(&[4], r)], &|g, v| g.matvec(v[0], v[1]));
    check64("add", vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)], &|g, v| g.add(v[0], v[1]));
    check64("mul", vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)], &|g, v| g.mul(v[0], v[1]));
    check64("add_row", vec![rand_t(&[3, 2], r), rand_t(&[2], r)], &|g, v| g.add_row(v[0], v[1]));
    check64("mul_row", vec![rand_t(&[3, 2], r), rand_t(&[2], r)], &|g, v| g.mul_row(v[0], v[1]));
    check64("mul_col", vec![rand_t(&[3, 2], r), rand_t(&[3], r)], &|g, v| g.mul_col(v[0], v[1]));
    check64("scale", vec![rand_t(&[4], r)], &|g, v| Ok(g.scale(v[0], 0.37)));
    check64("silu", vec![rand_t(&[2, 5], r)], &|g, v| Ok(g.silu(v[0])));
    check64("sigmoid", vec![rand_t(&[2, 5], r)], &|g, v| Ok(g.sigmoid(v[0])));
    check64("softmax", vec![rand_t(&[3, 4], r)], &|g, v| g.softmax_lastdim(v[0]));
    check64("rsqrt_mean_square", vec![rand_t(&[3, 4], r)], &|g, v| {
        g.rsqrt_mean_square(v[0], 1e-6)
    });
    check64("sum", vec![rand_t(&[3, 4], r)], &|g, v| Ok(g.sum(v[0])));
    check64("mean", vec![rand_t(&[3, 4], r)], &|g, v| Ok(g.mean(v[0])));
    check64("mean_rows", vec![rand_t(&[3, 4], r)], &|g, v| g.mean_rows(v[0]));
    check64("gather_rows", vec![rand_t(&[5, 3], r)], &|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    check64("index_add_rows", vec![rand_t(&[4, 3], r), rand_t(&[3, 3], r)], &|g, v| {
        g.index_add_rows(v[0], v[1], &[1, 3, 1])
    });
    check64("gather_elems", vec![rand_t(&[3, 4], r)], &|g, v| {
        g.gather_elems(v[0], &[(0, 3), (2, 1), (0, 3)])
    });
    check64("rope", vec![rand_t(&[3, 6], r)], &|g, v| g.rope(v[0], &[0, 5, 17]));
    check64(
        "causal_attention",
        vec![rand_t(&[6, 4], r), rand_t(&[6, 4], r), rand_t(&[6, 4], r)],
        &|g, v| g.causal_attention(v[0], v[1], v[2], 3),
    );
    check64("concat_cols", vec![rand_t(&[3, 2], r), rand_t(&[3, 3], r)], &|g, v| {
        g.concat_cols(&[v[0], v[1]])
    });
    check64("masked_mean_pool", vec![rand_t(&[6, 3], r)], &|g, v| {
        g.masked_mean_pool(v[0], 3, &[true, true, false, true, false, false])
    });
    check64("cross_entropy", vec![rand_t(&[4, 5], r)], &|g, v| {
        g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
    });
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let s = g.softmax_lastdim(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.25; 4]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::randn(&[20, 9], 4.0, &mut rng));
    let s = g.softmax_lastdim(x).unwrap();
    for r in 0..20 {
        let row = g.value(s).row(r);
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn silu_at_zero_is_zero() {
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::zeros(&[3]));
    let s = g.silu(x);
    assert_eq!(g.value(s).data(), &[0.0; 3]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f32>::inference();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn rope_requires_even_width() {
    let mut g = Graph::<f32>::inference();
    let a = g.constant(Tensor::zeros(&[1, 3]));
    assert_eq!(g.rope(a, &[0]).unwrap_err(), TensorError::OddRopeWidth(3));
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng);
    let k = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng);
    let v = Tensor::<f32>::randn(&[5, 4], 1.0, &mut rng);
    let run = |k: &Tensor<f32>, v: &Tensor<f32>| {
        let mut g = Graph::<f32>::inference();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.causal_attention(a, b, c, 5).unwrap();
        g.value(o).clone()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 12..20 {
        k2.data_mut()[j] += rng.random::<f32>();
        v2.data_mut()[j] -= 1.0;
    }
    let moved = run(&k2, &v2);
    assert_eq!(&base.data()[..12], &moved.data()[..12]);
    assert_ne!(&base.data()[12..], &moved.data()[12..]);
}
