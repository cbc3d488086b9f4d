//! Fast invariant checks over the whole pipeline, run by `trafficmoe selftest`.

use serde_json::json;
use trafficmoe_core::eval::{compute_metrics, ConfusionMatrix};
use trafficmoe_core::flow::{filter_micro_flows, parse_capture, reassemble_sessions};
use trafficmoe_core::model::{
    ffn_active_params, ffn_total_params, forward, route_tokens, LayerTrace, Mode, ModelConfig, ModelParams,
    RoutingTrace, load_balance_loss,
};
use trafficmoe_core::synth::{fixture_capture, synth_flows, FIXTURE_FLOWS};
use trafficmoe_core::tensor::{Graph, Tensor};
use trafficmoe_core::token::{
    decode_regions, serialize_flow, serialize_packet, tokenize, Marker, SerializerConfig, TokenSequence, Vocabulary,
};
use trafficmoe_core::train::{llrd_schedule, ntp_loss};
use trafficmoe_core::Model64;

use crate::args::SelftestArgs;
use crate::error::{CliError, CliResult};
use crate::manifest::Run;

type Check = fn() -> Result<(), String>;

const CHECKS: &[(&str, Check)] = &[
    ("fixture_reassembly", fixture_reassembly),
    ("full_vocabulary", full_vocabulary),
    ("tokenizer_structure", tokenizer_structure),
    ("routing_invariants", routing_invariants),
    ("balance_anchors", balance_anchors),
    ("causality", causality),
    ("gradient", gradient),
    ("active_ratio", active_ratio),
    ("llrd", llrd),
    ("metrics_identity", metrics_identity),
    ("checkpoint_round_trip", checkpoint_round_trip),
];

pub fn run(a: SelftestArgs) -> CliResult {
    let mut run = Run::start("selftest");
    run.config(json!({ "checks": CHECKS.iter().map(|c| c.0).collect::<Vec<_>>() }), None);
    let mut failed = Vec::new();
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(*name);
            }
        }
    }
    println!("{}/{} checks passed", CHECKS.len() - failed.len(), CHECKS.len());
    if let Some(dir) = &a.out {
        run.finish(dir)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(anyhow::anyhow!("failed checks: {}", failed.join(", "))))
    }
}

fn ensure(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

/// Deterministic values in (-1, 1) without a random number generator.
fn wobble(n: usize, salt: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * 12.9898 + salt).sin()).collect()
}

fn fixture_reassembly() -> Result<(), String> {
    for class in 0..2 {
        let packets = parse_capture(&fixture_capture(class)).map_err(|e| e.to_string())?;
        let kept = filter_micro_flows(reassemble_sessions(&packets), 3, false);
        ensure(kept.len() == FIXTURE_FLOWS, || {
            format!("class {class}: {} flows, expected {FIXTURE_FLOWS}", kept.len())
        })?;
    }
    Ok(())
}

fn full_vocabulary() -> Result<(), String> {
    let v = Vocabulary::full();
    ensure(v.len() == 65_541, || format!("size {}", v.len()))?;
    let ser = SerializerConfig::default();
    let unk = Marker::Unk.id();
    for f in synth_flows(3, 10, 5) {
        let seq = tokenize(&serialize_flow(&f, &ser), &v, ser.max_tokens, None);
        ensure(!seq.ids.contains(&unk), || "[UNK] emitted".into())?;
    }
    Ok(())
}

fn tokenizer_structure() -> Result<(), String> {
    let ser = SerializerConfig::default();
    let vocab = Vocabulary::full();
    for f in synth_flows(4, 25, 11) {
        let s = serialize_flow(&f, &ser);
        let seq = tokenize(&s, &vocab, ser.max_tokens, None);
        ensure(seq.is_well_formed(), || "marker structure violated".into())?;
        ensure(seq.valid_len() <= ser.max_flow_tokens().min(ser.max_tokens), || "length bound".into())?;
        let decoded = decode_regions(&s, ser.payload_bytes).map_err(|e| e.to_string())?;
        let mut prev = None;
        for ((pkt, dir), got) in f.packets.iter().take(ser.packets_per_flow).zip(&decoded) {
            let want = serialize_packet(pkt, *dir, prev, ser.payload_bytes);
            prev = Some(pkt.timestamp);
            ensure(*got == want, || "stride-2 byte regions do not round-trip".into())?;
        }
    }
    Ok(())
}

fn routing_invariants() -> Result<(), String> {
    let (rows, d, n) = (12, 8, 6);
    let z: Tensor<f64> = Tensor::from_f64(&[rows, d], &wobble(rows * d, 0.3)).map_err(|e| e.to_string())?;
    let w: Tensor<f64> = Tensor::from_f64(&[d, n], &wobble(d * n, 1.7)).map_err(|e| e.to_string())?;
    for k in [1, 2, n] {
        let (s, kept) = route_tokens(&z, &w, k).map_err(|e| e.to_string())?;
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            ensure((sum - 1.0).abs() <= 1e-6, || format!("row {r} sums to {sum}"))?;
            let nz = kept.row(r).iter().filter(|&&x| x != 0.0).count();
            ensure(nz == k, || format!("row {r} keeps {nz} experts, expected {k}"))?;
        }
        if k == n {
            ensure(s.data() == kept.data(), || "k = N must keep every score".into())?;
        }
    }
    Ok(())
}

fn balance_anchors() -> Result<(), String> {
    let n = 4;
    let uniform = LayerTrace {
        experts: n,
        top_k: 1,
        probs: vec![1.0 / n as f64; n * n],
        selected: (0..n).collect(),
        valid: vec![true; n],
    };
    let mut one_hot = vec![0.0; n * n];
    (0..n).for_each(|r| one_hot[r * n] = 1.0);
    let collapsed = LayerTrace {
        probs: one_hot,
        selected: vec![0; n],
        ..uniform.clone()
    };
    let aux = |l: LayerTrace| load_balance_loss(&RoutingTrace { layers: vec![l] }).map_err(|e| e.to_string());
    let (u, c) = (aux(uniform)?, aux(collapsed)?);
    ensure((u - 1.0).abs() <= 1e-6, || format!("uniform routing gives {u}"))?;
    ensure((c - n as f64).abs() <= 1e-6, || format!("collapsed routing gives {c}"))
}

fn tiny_model() -> Result<Model64, String> {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        experts: 4,
        top_k: 2,
        d_ff: 32,
        vocab_size: 64,
        max_tokens: 12,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    ModelParams::init(&cfg, 3).map_err(|e| e.to_string())
}

fn sequence(t: usize, salt: f64) -> TokenSequence {
    let ids = wobble(t, salt).iter().map(|x| 5 + ((x + 1.0) * 29.0) as u32).collect();
    TokenSequence::from_ids(ids, None)
}

fn lm_logits(params: &Model64, seq: &TokenSequence) -> Result<Vec<f64>, String> {
    let mut g = Graph::inference();
    let out = forward(&mut g, params, &[seq], Mode::Lm).map_err(|e| e.to_string())?;
    Ok(g.value(out.logits).data().to_vec())
}

fn causality() -> Result<(), String> {
    let params = tiny_model()?;
    let vocab = params.config.vocab_size;
    for cut in [1, 5, 11] {
        let a = sequence(12, cut as f64);
        let mut b = a.clone();
        for id in &mut b.ids[cut..] {
            *id = 5 + (*id + 7) % (vocab as u32 - 5);
        }
        let (la, lb) = (lm_logits(&params, &a)?, lm_logits(&params, &b)?);
        let prefix = cut * vocab;
        ensure(la[..prefix].iter().zip(&lb[..prefix]).all(|(x, y)| x.to_bits() == y.to_bits()), || {
            format!("logits before position {cut} changed")
        })?;
    }
    Ok(())
}

fn ntp(params: &Model64, batch: &[TokenSequence]) -> Result<f64, String> {
    let mut g = Graph::inference();
    let out = forward(&mut g, params, batch, Mode::Lm).map_err(|e| e.to_string())?;
    let loss = ntp_loss(&mut g, out.logits, batch).map_err(|e| e.to_string())?;
    Ok(g.value(loss).data()[0])
}

/// Central differences on a few entries of several tensors against the
/// tape gradient of the next-token loss.
fn gradient() -> Result<(), String> {
    let params = tiny_model()?;
    let batch = [sequence(12, 0.5), sequence(12, 2.5)];
    let mut g = Graph::new();
    let out = forward(&mut g, &params, &batch, Mode::Lm).map_err(|e| e.to_string())?;
    let loss = ntp_loss(&mut g, out.logits, &batch).map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;
    let grads: Vec<Vec<f64>> = out
        .param_vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    let h = 1e-5;
    for name in ["embed", "layer0.attn.head1.q", "layer1.ffn.shared.down", "vocab"] {
        let i = params.index_of(name).ok_or_else(|| format!("no tensor {name}"))?;
        for j in [0, params.tensors[i].len() / 2] {
            let mut p = params.clone();
            p.tensors[i].data_mut()[j] += h;
            let up = ntp(&p, &batch)?;
            p.tensors[i].data_mut()[j] -= 2.0 * h;
            let down = ntp(&p, &batch)?;
            let fd = (up - down) / (2.0 * h);
            let an = grads[i].get(j).copied().unwrap_or(0.0);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            ensure(rel < 1e-4, || format!("{name}[{j}]: finite difference {fd}, tape {an}"))?;
        }
    }
    Ok(())
}

fn active_ratio() -> Result<(), String> {
    let cfg = ModelConfig::default();
    let (active, total) = (ffn_active_params(&cfg), ffn_total_params(&cfg));
    ensure(active * 5 == total * 2, || format!("{active} / {total} is not 0.4"))
}

fn llrd() -> Result<(), String> {
    for layers in [2, 4, 12] {
        let rates = llrd_schedule(layers, 1e-4, 0.9);
        for (l, r) in (1..=layers).zip(&rates) {
            let want = 0.9f64.powi((layers - l) as i32) * 1e-4;
            ensure(*r == want, || format!("L={layers}, layer {l}: {r} vs {want}"))?;
        }
    }
    Ok(())
}

fn metrics_identity() -> Result<(), String> {
    let cm = ConfusionMatrix::from_counts(3, vec![5, 1, 0, 2, 7, 1, 0, 3, 4]).ok_or("bad counts")?;
    let m = compute_metrics(&cm);
    for (c, x) in m.per_class.iter().enumerate() {
        ensure(x.fnr == 1.0 - x.recall, || format!("class {c}: FNR {} recall {}", x.fnr, x.recall))?;
    }
    ensure((m.accuracy - 16.0 / 23.0).abs() < 1e-15, || format!("accuracy {}", m.accuracy))
}

fn checkpoint_round_trip() -> Result<(), String> {
    let params = tiny_model()?.cast::<f32>();
    let path = std::env::temp_dir().join(format!("trafficmoe-selftest-{}.ckpt", std::process::id()));
    let result = params
        .save(&path)
        .and_then(|()| ModelParams::<f32>::load(&path))
        .map_err(|e| e.to_string());
    let _ = std::fs::remove_file(&path);
    let _ = std::fs::remove_file(ModelParams::<f32>::config_path(&path));
    ensure(result? == params, || "reloaded parameters differ".into())
}
