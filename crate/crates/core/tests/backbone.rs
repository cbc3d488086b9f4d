use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficmoe_core::model::{
    causal_self_attention, expert_forward, ffn_active_params, ffn_total_params, forward, forward_flops,
    load_balance_loss, moe_layer, rmsnorm, route_tokens, AttentionSlots, ExpertSlots, FfnSlots, HeadSlots,
    LayerTrace, Mode, ModelConfig, ModelError, ModelParams, RoutingTrace,
};
use trafficmoe_core::tensor::{Graph, Tensor, Var};
use trafficmoe_core::token::{Marker, TokenSequence};
use trafficmoe_core::train::{composite_loss, ntp_loss};
use trafficmoe_core::Scalar;

type Mat = Vec<Vec<f64>>;

fn to_mat<T: Scalar>(t: &Tensor<T>) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).iter().map(|x| x.f64()).collect()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn rms_rows(x: &Mat, gain: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let r = 1.0 / (ms + 1e-6).sqrt();
            row.iter().zip(gain).map(|(v, g)| v * r * g).collect()
        })
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn rope_oracle(x: &Mat, positions: &[usize]) -> Mat {
    x.iter()
        .zip(positions)
        .map(|(row, &p)| {
            let dm = row.len();
            let mut out = row.clone();
            for i in 0..dm / 2 {
                let theta = p as f64 * 10000f64.powf(-2.0 * i as f64 / dm as f64);
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                out[2 * i] = a * theta.cos() - b * theta.sin();
                out[2 * i + 1] = a * theta.sin() + b * theta.cos();
            }
            out
        })
        .collect()
}

fn swiglu_oracle(z: &Mat, gate: &Mat, up: &Mat, down: &Mat) -> Mat {
    let a = mm(z, gate);
    let b = mm(z, up);
    let h: Mat = a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| silu(*p) * q).collect()).collect();
    mm(&h, down)
}

fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

struct ExpertW {
    gate: Tensor<f64>,
    up: Tensor<f64>,
    down: Tensor<f64>,
}

impl ExpertW {
    fn random(d: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gate: randn(&[d, w], 0.5, rng),
            up: randn(&[d, w], 0.5, rng),
            down: randn(&[w, d], 0.5, rng),
        }
    }

    fn bind(&self, g: &mut Graph<'_, f64>) -> ExpertSlots<Var> {
        ExpertSlots {
            gate: g.constant(self.gate.clone()),
            up: g.constant(self.up.clone()),
            down: g.constant(self.down.clone()),
        }
    }

    fn oracle(&self, z: &Mat) -> Mat {
        swiglu_oracle(z, &to_mat(&self.gate), &to_mat(&self.up), &to_mat(&self.down))
    }
}

struct MoeW {
    norm: Tensor<f64>,
    router: Tensor<f64>,
    shared_gate: Tensor<f64>,
    shared: ExpertW,
    experts: Vec<ExpertW>,
}

impl MoeW {
    fn random(d: usize, d_ff: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: randn(&[d], 1.0, rng),
            router: randn(&[d, n], 1.0, rng),
            shared_gate: randn(&[d], 1.0, rng),
            shared: ExpertW::random(d, d_ff, rng),
            experts: (0..n).map(|_| ExpertW::random(d, d_ff / k, rng)).collect(),
        }
    }

    fn bind(&self, g: &mut Graph<'_, f64>) -> FfnSlots<Var> {
        FfnSlots::Moe {
            norm: g.constant(self.norm.clone()),
            router: g.constant(self.router.clone()),
            shared_gate: g.constant(self.shared_gate.clone()),
            shared: self.shared.bind(g),
            experts: self.experts.iter().map(|e| e.bind(g)).collect(),
        }
    }

    fn run(&self, h: &Tensor<f64>, k: usize) -> Mat {
        let mut g = Graph::inference();
        let slots = self.bind(&mut g);
        let hv = g.constant(h.clone());
        let out = moe_layer(&mut g, hv, &slots, k).unwrap();
        to_mat(g.value(out.hidden))
    }

    fn z(&self, h: &Tensor<f64>) -> Mat {
        rms_rows(&to_mat(h), self.norm.data())
    }

    /// `h + gate * shared(z)` without the routed experts.
    fn shared_part(&self, h: &Tensor<f64>) -> Mat {
        let z = self.z(h);
        let sh = self.shared.oracle(&z);
        to_mat(h)
            .iter()
            .zip(&z)
            .zip(&sh)
            .map(|((hrow, zrow), srow)| {
                let gate = 1.0 / (1.0 + (-zrow.iter().zip(self.shared_gate.data()).map(|(a, b)| a * b).sum::<f64>()).exp());
                hrow.iter().zip(srow).map(|(a, b)| a + gate * b).collect()
            })
            .collect()
    }
}

#[test]
fn rmsnorm_constant_and_zero_rows() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_f64(&[2, 4], &[3.0, 3.0, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let y = rmsnorm(&mut g, x, gain).unwrap();
    let y = g.value(y).data();
    assert!(y[..4].iter().all(|v| (v - 1.0).abs() < 1e-6));
    assert!(y[4..].iter().all(|v| *v == 0.0));
}

#[test]
fn rmsnorm_matches_row_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&[7, 12], 2.0, &mut rng);
    let gain = randn(&[12], 1.0, &mut rng);
    let mut g = Graph::<f64>::inference();
    let (xv, gv) = (g.constant(x.clone()), g.constant(gain.clone()));
    let y = rmsnorm(&mut g, xv, gv).unwrap();
    assert!(max_diff(&to_mat(g.value(y)), &rms_rows(&to_mat(&x), gain.data())) < 1e-6);
}

fn rope_run(x: &Tensor<f64>, positions: &[usize]) -> Mat {
    let mut g = Graph::<f64>::inference();
    let v = g.constant(x.clone());
    let r = g.rope(v, positions).unwrap();
    to_mat(g.value(r))
}

#[test]
fn rope_identity_isometry_and_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&[5, 8], 1.0, &mut rng);
    assert!(max_diff(&rope_run(&x, &[0; 5]), &to_mat(&x)) == 0.0);
    let positions = [0, 1, 7, 100, 511];
    let r = rope_run(&x, &positions);
    for (a, b) in r.iter().zip(to_mat(&x)) {
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((na - nb).abs() < 1e-5);
    }
    assert!(max_diff(&r, &rope_oracle(&to_mat(&x), &positions)) < 1e-12);
}

#[test]
fn rope_inner_products_depend_on_offset_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = randn(&[1, 8], 1.0, &mut rng);
    let k = randn(&[1, 8], 1.0, &mut rng);
    for delta in [-5i64, 0, 3, 17] {
        let mut values = Vec::new();
        for p1 in 0..40i64 {
            let p2 = p1 - delta;
            if p2 < 0 {
                continue;
            }
            let a = rope_run(&q, &[p1 as usize]);
            let b = rope_run(&k, &[p2 as usize]);
            values.push(a[0].iter().zip(&b[0]).map(|(x, y)| x * y).sum::<f64>());
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-4, "offset {delta}: spread {}", hi - lo);
    }
}

#[test]
fn rope_rejects_odd_width() {
    let mut g = Graph::<f64>::inference();
    let v = g.constant(Tensor::zeros(&[2, 5]));
    assert!(g.rope(v, &[0, 1]).is_err());
}

struct AttnW {
    norm: Tensor<f64>,
    heads: Vec<[Tensor<f64>; 3]>,
    out: Tensor<f64>,
}

impl AttnW {
    fn random(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        let dm = d / m;
        Self {
            norm: randn(&[d], 1.0, rng),
            heads: (0..m)
                .map(|_| [randn(&[d, dm], 0.5, rng), randn(&[d, dm], 0.5, rng), randn(&[d, dm], 0.5, rng)])
                .collect(),
            out: randn(&[d, d], 0.5, rng),
        }
    }

    fn run(&self, h: &Tensor<f64>, positions: &[usize], seq_len: usize) -> Tensor<f64> {
        let mut g = Graph::inference();
        let slots = AttentionSlots {
            norm: g.constant(self.norm.clone()),
            heads: self
                .heads
                .iter()
                .map(|[q, k, v]| HeadSlots {
                    q: g.constant(q.clone()),
                    k: g.constant(k.clone()),
                    v: g.constant(v.clone()),
                })
                .collect(),
            out: g.constant(self.out.clone()),
        };
        let hv = g.constant(h.clone());
        let y = causal_self_attention(&mut g, hv, &slots, positions, seq_len).unwrap();
        g.value(y).clone()
    }

    /// Explicit per-position loops over one sequence.
    fn oracle(&self, h: &Tensor<f64>) -> Mat {
        let hm = to_mat(h);
        let t = hm.len();
        let positions: Vec<usize> = (0..t).collect();
        let z = rms_rows(&hm, self.norm.data());
        let mut concat: Mat = vec![Vec::new(); t];
        for [wq, wk, wv] in &self.heads {
            let q = rope_oracle(&mm(&z, &to_mat(wq)), &positions);
            let k = rope_oracle(&mm(&z, &to_mat(wk)), &positions);
            let v = mm(&z, &to_mat(wv));
            let dm = q[0].len() as f64;
            for i in 0..t {
                let mut scores = Vec::new();
                for p in 0..=i {
                    scores.push(q[i].iter().zip(&k[p]).map(|(a, b)| a * b).sum::<f64>() / dm.sqrt());
                }
                let w = softmax(&scores);
                let mut o = vec![0.0; v[0].len()];
                for (p, wp) in w.iter().enumerate() {
                    for (oj, vj) in o.iter_mut().zip(&v[p]) {
                        *oj += wp * vj;
                    }
                }
                concat[i].extend(o);
            }
        }
        let proj = mm(&concat, &to_mat(&self.out));
        hm.iter().zip(&proj).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
    }
}

#[test]
fn attention_single_token_attends_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = AttnW::random(8, 2, &mut rng);
    let h = randn(&[1, 8], 1.0, &mut rng);
    let z = rms_rows(&to_mat(&h), w.norm.data());
    let mut v = Vec::new();
    for [_, _, wv] in &w.heads {
        v.extend(mm(&z, &to_mat(wv))[0].clone());
    }
    let proj = mm(&vec![v], &to_mat(&w.out));
    let want: Mat = vec![to_mat(&h)[0].iter().zip(&proj[0]).map(|(a, b)| a + b).collect()];
    assert!(max_diff(&to_mat(&w.run(&h, &[0], 1)), &want) < 1e-12);
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = AttnW::random(8, 2, &mut rng);
    let h = randn(&[3, 8], 1.0, &mut rng);
    let got = to_mat(&w.run(&h, &[0, 1, 2], 3));
    assert!(max_diff(&got, &w.oracle(&h)) < 1e-5);
}

#[test]
fn attention_is_causal_and_per_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let w = AttnW::random(8, 2, &mut rng);
    let h = randn(&[8, 8], 1.0, &mut rng);
    let positions: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let base = w.run(&h, &positions, 4);
    for t in 0..3 {
        let mut moved = h.clone();
        for j in 0..8 {
            moved.data_mut()[(t + 1) * 8 + j] += 0.5;
        }
        let out = w.run(&moved, &positions, 4);
        assert_eq!(&out.data()[..(t + 1) * 8], &base.data()[..(t + 1) * 8]);
        // The second sequence is untouched.
        assert_eq!(&out.data()[32..], &base.data()[32..]);
    }
    let second = Tensor::new(&[4, 8], h.data()[32..].to_vec()).unwrap();
    assert!(max_diff(&to_mat(&base)[4..].to_vec(), &w.oracle(&second)) < 1e-5);
}

#[test]
fn routing_examples() {
    let z = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
    let router = Tensor::from_f64(&[1, 4], &[2.0, 1.0, 0.0, -1.0]).unwrap();
    let (s, sparse) = route_tokens(&z, &router, 2).unwrap();
    let e: Vec<f64> = [2.0f64, 1.0, 0.0, -1.0].iter().map(|v| v.exp()).collect();
    let total: f64 = e.iter().sum();
    let want = [e[0] / total, e[1] / total, 0.0, 0.0];
    for (a, b) in sparse.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((sparse.data()[0] - 0.6439).abs() < 1e-4);
    assert!((sparse.data()[1] - 0.2369).abs() < 1e-4);
    assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let flat = Tensor::from_f64(&[1, 4], &[0.0; 4]).unwrap();
    let (s, sparse) = route_tokens(&z, &flat, 2).unwrap();
    assert_eq!(s.data(), &[0.25; 4]);
    assert_eq!(sparse.data(), &[0.25, 0.25, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let z = randn(&[6, 5], 1.0, &mut rng);
    let router = randn(&[5, 4], 1.0, &mut rng);
    let (s, sparse) = route_tokens(&z, &router, 4).unwrap();
    assert_eq!(s, sparse);
    let (s, sparse) = route_tokens(&z, &router, 3).unwrap();
    for r in 0..6 {
        assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(sparse.row(r).iter().filter(|v| **v > 0.0).count(), 3);
    }
}

#[test]
fn expert_zero_input_and_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let w = ExpertW::random(3, 4, &mut rng);
    let mut g = Graph::<f64>::inference();
    let slots = w.bind(&mut g);
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let y = expert_forward(&mut g, z, &slots).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let w = ExpertW {
        gate: Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
        up: Tensor::from_f64(&[2, 2], &[1.0, 1.0, 0.0, 1.0]).unwrap(),
        down: Tensor::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 1.0]).unwrap(),
    };
    let mut g = Graph::<f64>::inference();
    let slots = w.bind(&mut g);
    let z = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let y = expert_forward(&mut g, z, &slots).unwrap();
    // gate (1, 2), up (1, 3), hidden (silu(1), 3 silu(2)), down sums both then keeps the second.
    let h0 = 1.0 / (1.0 + (-1.0f64).exp());
    let h1 = 3.0 * 2.0 / (1.0 + (-2.0f64).exp());
    let got = g.value(y).data();
    assert!((got[0] - (h0 + h1)).abs() < 1e-12);
    assert!((got[1] - h1).abs() < 1e-12);
}

#[test]
fn expert_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let inputs = vec![
        randn(&[3, 4], 1.0, &mut rng),
        randn(&[4, 6], 0.5, &mut rng),
        randn(&[4, 6], 0.5, &mut rng),
        randn(&[6, 4], 0.5, &mut rng),
    ];
    let weights = randn(&[3, 4], 1.0, &mut rng);
    let eval = |inp: &[Tensor<f64>], g: &mut Graph<'_, f64>, train: bool| {
        let v: Vec<Var> = inp.iter().map(|t| if train { g.input(t.clone()) } else { g.constant(t.clone()) }).collect();
        let slots = ExpertSlots {
            gate: v[1],
            up: v[2],
            down: v[3],
        };
        let y = expert_forward(g, v[0], &slots).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(y, w).unwrap();
        (g.sum(p), v)
    };
    let mut g = Graph::new();
    let (loss, vars) = eval(&inputs, &mut g, true);
    g.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[i].data_mut()[j] += h;
            minus[i].data_mut()[j] -= h;
            let mut gp = Graph::inference();
            let fp = eval(&plus, &mut gp, false).0;
            let mut gm = Graph::inference();
            let fm = eval(&minus, &mut gm, false).0;
            let numeric = (gp.value(fp).item() - gm.value(fm).item()) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn moe_matches_dense_mask_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (d, d_ff, n, k) = (6, 8, 4, 2);
    let w = MoeW::random(d, d_ff, n, k, &mut rng);
    let h = randn(&[5, d], 1.0, &mut rng);
    let z = w.z(&h);
    let (_, sparse) = route_tokens(&Tensor::from_f64(&[5, d], &z.concat()).unwrap(), &w.router, k).unwrap();
    let mut want = w.shared_part(&h);
    for (e, ew) in w.experts.iter().enumerate() {
        let y = ew.oracle(&z);
        for t in 0..5 {
            let s = sparse.row(t)[e];
            for j in 0..d {
                want[t][j] += s * y[t][j];
            }
        }
    }
    assert!(max_diff(&w.run(&h, k), &want) < 1e-10);
}

#[test]
fn moe_forced_to_first_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (d, d_ff, n) = (4, 4, 4);
    let mut w = MoeW::random(d, d_ff, n, 1, &mut rng);
    w.norm = Tensor::full(&[d], 1.0);
    // Inputs with a dominant positive first feature; the router row for
    // that feature pushes experts 1..N to -1e6 times its value.
    let mut h = randn(&[3, d], 0.1, &mut rng);
    for t in 0..3 {
        h.data_mut()[t * d] = 2.0;
    }
    let mut router = vec![0.0; d * n];
    for e in 1..n {
        router[e] = -1e6;
    }
    w.router = Tensor::from_f64(&[d, n], &router).unwrap();
    let z = w.z(&h);
    let e0 = w.experts[0].oracle(&z);
    let mut want = w.shared_part(&h);
    for t in 0..3 {
        let s0 = softmax(&mm(&vec![z[t].clone()], &to_mat(&w.router))[0])[0];
        assert!((s0 - 1.0).abs() < 1e-12);
        for j in 0..d {
            want[t][j] += s0 * e0[t][j];
        }
    }
    assert!(max_diff(&w.run(&h, 1), &want) < 1e-10);
}

#[test]
fn moe_all_experts_matches_loop_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (d, d_ff, n) = (6, 12, 3);
    let w = MoeW::random(d, d_ff, n, n, &mut rng);
    let h = randn(&[4, d], 1.0, &mut rng);
    let z = w.z(&h);
    let mut want = w.shared_part(&h);
    for t in 0..4 {
        let s = softmax(&mm(&vec![z[t].clone()], &to_mat(&w.router))[0]);
        for (e, ew) in w.experts.iter().enumerate() {
            let y = ew.oracle(&vec![z[t].clone()]);
            for j in 0..d {
                want[t][j] += s[e] * y[0][j];
            }
        }
    }
    assert!(max_diff(&w.run(&h, n), &want) < 1e-5);
}

#[test]
fn moe_with_closed_gate_and_silent_experts_is_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (d, d_ff, n, k) = (4, 8, 4, 2);
    let mut w = MoeW::random(d, d_ff, n, k, &mut rng);
    w.norm = Tensor::full(&[d], 1.0);
    let mut h = randn(&[3, d], 0.1, &mut rng);
    for t in 0..3 {
        h.data_mut()[t * d] = 2.0;
    }
    w.shared_gate = Tensor::from_f64(&[d], &[-1e6, 0.0, 0.0, 0.0]).unwrap();
    for e in &mut w.experts {
        e.down = Tensor::zeros(e.down.shape());
    }
    assert_eq!(w.run(&h, k), to_mat(&h));
}

fn trace(experts: usize, top_k: usize, probs: Vec<f64>, selected: Vec<usize>) -> RoutingTrace {
    let rows = probs.len() / experts;
    RoutingTrace {
        layers: vec![LayerTrace {
            experts,
            top_k,
            probs,
            selected,
            valid: vec![true; rows],
        }],
    }
}

#[test]
fn balance_loss_anchors() {
    let uniform = trace(4, 1, vec![0.25; 16], vec![0, 1, 2, 3]);
    assert!((load_balance_loss(&uniform).unwrap() - 1.0).abs() < 1e-12);
    let mut probs = vec![0.0; 12];
    for t in 0..3 {
        probs[t * 4] = 1.0;
    }
    let collapsed = trace(4, 1, probs, vec![0, 0, 0]);
    assert!((load_balance_loss(&collapsed).unwrap() - 4.0).abs() < 1e-12);

    let mut empty = trace(4, 1, vec![0.25; 4], vec![0]);
    empty.layers[0].valid = vec![false];
    assert!(matches!(load_balance_loss(&empty), Err(ModelError::NoRoutedTokens)));
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        experts: 4,
        top_k: 2,
        d_ff: 32,
        vocab_size: 64,
        max_tokens: 12,
        num_classes: Some(3),
        ..ModelConfig::default()
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, valid: usize, vocab: usize) -> TokenSequence {
    let mut ids: Vec<u32> = (0..valid).map(|_| rng.random_range(5..vocab as u32)).collect();
    ids[valid - 1] = Marker::End.id();
    ids.resize(len, Marker::Pad.id());
    TokenSequence::from_ids(ids, Some(rng.random_range(0..3)))
}

#[test]
fn balance_loss_matches_recompute_from_scores() {
    let cfg = tiny_config();
    let params = ModelParams::<f64>::init(&ModelConfig { init_std: 0.5, ..cfg.clone() }, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let batch: Vec<TokenSequence> = [7, 12, 10].iter().map(|&v| random_sequence(&mut rng, 12, v, 64)).collect();
    let mut g = Graph::inference();
    let out = forward(&mut g, &params, &batch, Mode::Lm).unwrap();
    let valid: Vec<bool> = batch.iter().flat_map(|s| s.valid_mask.clone()).collect();
    let (n, k) = (cfg.experts, cfg.top_k);
    let mut per_layer = Vec::new();
    for lt in &out.trace.layers {
        let mut load = vec![0.0; n];
        let mut prob = vec![0.0; n];
        let mut count = 0.0;
        for r in 0..lt.rows() {
            let row = &lt.probs[r * n..(r + 1) * n];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(lt.selected_row(r).len(), k);
            if !valid[r] {
                continue;
            }
            count += 1.0;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &e in &order[..k] {
                load[e] += 1.0;
            }
            for e in 0..n {
                prob[e] += row[e];
            }
        }
        load.iter_mut().for_each(|l| *l /= count * k as f64);
        prob.iter_mut().for_each(|p| *p /= count);
        assert!((load.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((prob.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in lt.load().unwrap().iter().zip(&load) {
            assert!((a - b).abs() < 1e-12);
        }
        per_layer.push(n as f64 * load.iter().zip(&prob).map(|(a, b)| a * b).sum::<f64>());
    }
    let want = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    assert!((load_balance_loss(&out.trace).unwrap() - want).abs() < 1e-12);
    assert!((g.value(out.aux.unwrap()).item() - want).abs() < 1e-12);
}

#[test]
fn classify_single_valid_token_pools_its_hidden_state() {
    let cfg = tiny_config();
    let params = ModelParams::<f64>::init(&ModelConfig { init_std: 0.3, ..cfg.clone() }, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let seq = random_sequence(&mut rng, 4, 1, 64);
    let mut g = Graph::inference();
    let out = forward(&mut g, &params, &[&seq], Mode::Classify).unwrap();
    let hidden = to_mat(g.value(out.hidden));
    let head = params.layout.class_head.as_ref().unwrap();
    let t = |i: usize| to_mat(&Tensor::new(&[1, params.tensors[i].len()], params.tensors[i].data().to_vec()).unwrap())[0].clone();
    let x = mm(&vec![hidden[0].clone()], &to_mat(&params.tensors[head.w1]));
    let x: Vec<f64> = x[0].iter().zip(t(head.b1)).map(|(a, b)| silu(a + b)).collect();
    let y = mm(&vec![x], &to_mat(&params.tensors[head.w2]));
    let want: Vec<f64> = y[0].iter().zip(t(head.b2)).map(|(a, b)| a + b).collect();
    assert!(max_diff(&to_mat(g.value(out.logits)), &vec![want]) < 1e-12);
}

#[test]
fn classify_ignores_appended_padding() {
    let cfg = tiny_config();
    let params = ModelParams::<f32>::init(&ModelConfig { init_std: 0.3, ..cfg }, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let short = random_sequence(&mut rng, 6, 5, 64);
    let mut ids = short.ids.clone();
    ids.resize(12, Marker::Pad.id());
    let long = TokenSequence::from_ids(ids, short.label);
    let run = |s: &TokenSequence| {
        let mut g = Graph::inference();
        let out = forward(&mut g, &params, &[s], Mode::Classify).unwrap();
        g.value(out.logits).data().to_vec()
    };
    for (a, b) in run(&short).iter().zip(run(&long)) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn lm_logits_shape_and_causality() {
    let cfg = tiny_config();
    let params = ModelParams::<f64>::init(&ModelConfig { init_std: 0.3, ..cfg }, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let batch = vec![random_sequence(&mut rng, 12, 12, 64), random_sequence(&mut rng, 12, 8, 64)];
    let run = |b: &[TokenSequence]| {
        let mut g = Graph::inference();
        let out = forward(&mut g, &params, b, Mode::Lm).unwrap();
        g.value(out.logits).clone()
    };
    let base = run(&batch);
    assert_eq!(base.shape(), &[24, 64]);
    for t in 0..11 {
        let mut moved = batch.clone();
        for p in t + 1..12 {
            moved[0].ids[p] = 5 + ((moved[0].ids[p] + 7) % 59);
        }
        let out = run(&moved);
        let rows = (t + 1) * 64;
        let diff = out.data()[..rows].iter().zip(&base.data()[..rows]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "position {t}: {diff}");
    }
}

#[test]
fn forward_rejects_out_of_range_ids() {
    let params = ModelParams::<f32>::init(&tiny_config(), 0).unwrap();
    let seq = TokenSequence::from_ids(vec![64, 3], None);
    let mut g = Graph::inference();
    assert!(matches!(
        forward(&mut g, &params, &[seq], Mode::Lm),
        Err(ModelError::TokenOutOfRange { id: 64, vocab: 64 })
    ));
}

#[test]
fn unselected_experts_get_no_gradient() {
    let cfg = ModelConfig {
        layers: 1,
        ..tiny_config()
    };
    let params = ModelParams::<f64>::init(&ModelConfig { init_std: 0.3, ..cfg }, 7).unwrap();
    let seq = TokenSequence::from_ids(vec![9], None);
    let mut g = Graph::new();
    let out = forward(&mut g, &params, &[&seq], Mode::Classify).unwrap();
    let loss = g.sum(out.logits);
    g.backward(loss).unwrap();
    let selected = out.trace.layers[0].selected.clone();
    let FfnSlots::Moe { experts, .. } = &out.params.layers[0].ffn else {
        panic!("expected a mixture layer");
    };
    for (e, slots) in experts.iter().enumerate() {
        for v in [slots.gate, slots.up, slots.down] {
            let nonzero = g.grad(v).is_some_and(|gr| gr.iter().any(|x| *x != 0.0));
            assert_eq!(nonzero, selected.contains(&e), "expert {e}");
        }
    }
}

#[test]
fn active_parameter_ratio_of_defaults() {
    let cfg = ModelConfig::default();
    let (d, dff) = (cfg.d_model, cfg.d_ff);
    assert_eq!(ffn_active_params(&cfg), 6 * d * dff);
    assert_eq!(ffn_total_params(&cfg) * 2, 3 * d * dff * (2 + cfg.experts));
    assert_eq!(ffn_active_params(&cfg) as f64 / ffn_total_params(&cfg) as f64, 0.4);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let params = ModelParams::<f32>::init(&tiny_config(), 8).unwrap();
    params.save(&path).unwrap();
    assert!(ModelParams::<f32>::config_path(&path).exists());
    assert_eq!(ModelParams::<f32>::load(&path).unwrap(), params);

    let other = ModelParams::<f32>::init(&ModelConfig { d_model: 8, ..tiny_config() }, 8).unwrap();
    std::fs::write(ModelParams::<f32>::config_path(&path), other.config.to_toml()).unwrap();
    assert!(ModelParams::<f32>::load(&path).is_err());
}

#[test]
fn counted_flops_equal_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for cfg in [tiny_config(), tiny_config().dense_variant()] {
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let batch: Vec<TokenSequence> = (0..3).map(|_| random_sequence(&mut rng, 12, 9, 64)).collect();
        for mode in [Mode::Lm, Mode::Classify] {
            let mut g = Graph::inference();
            forward(&mut g, &params, &batch, mode).unwrap();
            assert_eq!(g.flops(), forward_flops(&cfg, 3, 12, mode).total(), "{mode:?} dense={}", cfg.is_dense());
        }
    }
}

/// Pretraining loss and the per-layer top-k choices for one batch.
fn pretrain_loss<T: Scalar>(params: &ModelParams<T>, batch: &[TokenSequence]) -> (f64, Vec<Vec<usize>>) {
    let mut g = Graph::inference();
    let out = forward(&mut g, params, batch, Mode::Lm).unwrap();
    let task = ntp_loss(&mut g, out.logits, batch).unwrap();
    let loss = composite_loss(&mut g, task, out.aux, 0.02).unwrap();
    let sel = out.trace.layers.iter().map(|l| l.selected.clone()).collect();
    (g.value(loss).item().f64(), sel)
}

/// Worst relative error over probed entries of every tensor; probes whose
/// perturbation changes any top-k choice are skipped.
fn model_gradient_error<T: Scalar>(h: f64, floor: f64, probes_per_tensor: usize) -> (f64, usize) {
    let cfg = ModelConfig {
        init_std: 0.3,
        ..tiny_config()
    };
    let params = ModelParams::<T>::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let batch = vec![random_sequence(&mut rng, 12, 12, 64), random_sequence(&mut rng, 12, 9, 64)];
    let mut g = Graph::new();
    let out = forward(&mut g, &params, &batch, Mode::Lm).unwrap();
    let task = ntp_loss(&mut g, out.logits, &batch).unwrap();
    let loss = composite_loss(&mut g, task, out.aux, 0.02).unwrap();
    g.backward(loss).unwrap();
    let base_sel: Vec<Vec<usize>> = out.trace.layers.iter().map(|l| l.selected.clone()).collect();
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for (i, v) in out.param_vars.iter().enumerate() {
        let n = params.tensors[i].len();
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(gr) => gr.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; n],
        };
        let picks: Vec<usize> = if n <= probes_per_tensor {
            (0..n).collect()
        } else {
            (0..probes_per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.tensors[i].data_mut()[j] += T::c(h);
            minus.tensors[i].data_mut()[j] -= T::c(h);
            let (fp, sp) = pretrain_loss(&plus, &batch);
            let (fm, sm) = pretrain_loss(&minus, &batch);
            if sp != base_sel || sm != base_sel {
                skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    (worst, skipped)
}

#[test]
fn full_model_gradient_check_f64() {
    // A loss near 4 carries ~1e-15 rounding, so h = 1e-5 keeps the central
    // difference noise near 1e-10 while truncation stays below that.
    let (err, skipped) = model_gradient_error::<f64>(1e-5, 1e-7, 64);
    assert!(err < 1e-4, "relative error {err} ({skipped} probes skipped)");
}

#[test]
fn full_model_gradient_check_f32() {
    let (err, skipped) = model_gradient_error::<f32>(1e-2, 1e-2, 24);
    assert!(err < 1e-2, "relative error {err} ({skipped} probes skipped)");
}
