use super::*;
use crate::embedding::{hash_embed, TokenGrid};
use crate::phrase_graph::KeyPhrase;
use rand::{Rng, SeedableRng};

fn tiny() -> DecoderConfig {
    DecoderConfig {
        num_queries: 4,
        num_layers: 1,
        d_model: 8,
        d_embed: 6,
        heads: 2,
        d_visual: 5,
        ffn_dim: 16,
        positional_encoding: true,
    }
}

fn grid(seed: u64, side: usize, ch: usize) -> TokenGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenGrid::new(side, ch, (0..side * side * ch).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn targets(names: &[&str], n: usize, d: usize) -> TargetSet {
    TargetSet::new(
        names.iter().map(|s| KeyPhrase::new(s).unwrap()).collect(),
        names.iter().map(|s| hash_embed(s, d).unwrap()).collect(),
        n,
    )
    .unwrap()
}

fn loss_cfg() -> LossConfig {
    LossConfig {
        pos_class_size: 1.5,
        ..LossConfig::default()
    }
}

#[test]
fn output_contract() {
    let cfg = tiny();
    let p = init_params(&cfg, 1).unwrap();
    let out = forward(&grid(2, 2, 5), &p, &cfg).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.probs.iter().all(|&x| x > 0.0 && x < 1.0));
    for s in &out.semantics {
        assert_eq!(s.dim(), 6);
        assert!((s.norm() - 1.0).abs() < 1e-12);
    }
    assert!(matches!(forward(&grid(2, 2, 4), &p, &cfg), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn permutation_invariant_without_positions() {
    let cfg = DecoderConfig {
        positional_encoding: false,
        ..tiny()
    };
    let p = init_params(&cfg, 3).unwrap();
    let g = grid(4, 3, 5);
    let tokens: Vec<Vec<f64>> = g.tokens().map(|t| t.to_vec()).collect();
    let mut shuffled = tokens.clone();
    shuffled.reverse();
    shuffled.swap(0, 4);
    let g2 = TokenGrid::from_sequence(&shuffled).unwrap();
    let a = forward(&g, &p, &cfg).unwrap();
    let b = forward(&g2, &p, &cfg).unwrap();
    for (x, y) in a.probs.iter().zip(&b.probs) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.semantics.iter().zip(&b.semantics) {
        for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weights_give_identical_queries() {
    let cfg = tiny();
    let mut p = init_params(&cfg, 5).unwrap();
    p.queries.fill(0.0);
    p.input_proj.weight.fill(0.0);
    for l in &mut p.layers {
        for attn in [&mut l.self_attn, &mut l.cross_attn] {
            for lin in attn.linears_mut() {
                lin.weight.fill(0.0);
            }
        }
        l.ffn_in.weight.fill(0.0);
        l.ffn_out.weight.fill(0.0);
    }
    p.select.weight.fill(0.0);
    for lin in &mut p.semantic {
        lin.weight.fill(0.0);
    }
    let out = forward(&grid(6, 2, 5), &p, &cfg).unwrap();
    assert!(out.probs.windows(2).all(|w| w[0] == w[1]));
    assert!(out.semantics.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn init_is_deterministic() {
    let cfg = tiny();
    let a = init_params(&cfg, 9).unwrap();
    assert_eq!(a, init_params(&cfg, 9).unwrap());
    assert_ne!(a, init_params(&cfg, 10).unwrap());
    assert!(a.first_non_finite().is_none());
    validate_params(&a, &cfg).unwrap();
}

#[test]
fn batch_forward_matches_single() {
    let cfg = tiny();
    let p = init_params(&cfg, 2).unwrap();
    let grids = [grid(1, 2, 5), grid(2, 3, 5)];
    let batched = forward_batch(&grids, &p, &cfg).unwrap();
    for (g, b) in grids.iter().zip(&batched) {
        let single = forward(g, &p, &cfg).unwrap();
        for (x, y) in single.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

/// Central differences of the value-only loss path.
fn numeric_gradient(batch: &[TrainingExample], params: &DecoderParams, cfg: &DecoderConfig, lcfg: &LossConfig, h: f64) -> DecoderParams {
    let mut grad = DecoderParams::zeros(cfg);
    let mut probe = params.clone();
    let n_tensors = probe.tensors().len();
    for t in 0..n_tensors {
        let len = probe.tensors()[t].1.len();
        for k in 0..len {
            let orig = probe.tensors()[t].1.iter().nth(k).copied().unwrap();
            let set = |p: &mut DecoderParams, v: f64| {
                *p.tensors_mut()[t].1.iter_mut().nth(k).unwrap() = v;
            };
            set(&mut probe, orig + h);
            let up = batch_loss(batch, &probe, cfg, lcfg).unwrap();
            set(&mut probe, orig - h);
            let down = batch_loss(batch, &probe, cfg, lcfg).unwrap();
            set(&mut probe, orig);
            *grad.tensors_mut()[t].1.iter_mut().nth(k).unwrap() = (up - down) / (2.0 * h);
        }
    }
    grad
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny();
    let lcfg = loss_cfg();
    let params = init_params(&cfg, 42).unwrap();
    let batch = vec![
        TrainingExample {
            tokens: grid(11, 2, 5),
            targets: targets(&["mild cardiomegaly", "no pleural effusion"], 4, 6),
        },
        TrainingExample {
            tokens: grid(12, 2, 5),
            targets: targets(&["small left effusion"], 4, 6),
        },
    ];
    let analytic = batch_loss_and_gradients(&batch, &params, &cfg, &lcfg).unwrap();
    let value = batch_loss(&batch, &params, &cfg, &lcfg).unwrap();
    assert!((analytic.loss - value).abs() < 1e-12);

    let numeric = numeric_gradient(&batch, &params, &cfg, &lcfg, 1e-5);
    for ((name, a), (_, n)) in analytic.grads.0.tensors().iter().zip(numeric.tensors()) {
        let diff = a.iter().zip(n.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(n.iter()).map(|x| x.abs()).fold(1e-6, f64::max);
        assert!(diff / scale <= 1e-4, "{name}: rel err {}", diff / scale);
    }
}

#[test]
fn unused_semantic_head_gets_zero_gradient() {
    let cfg = tiny();
    let lcfg = LossConfig {
        lambda_sc: 0.0,
        ..loss_cfg()
    };
    let params = init_params(&cfg, 8).unwrap();
    let (_, grads) = loss_and_gradients(&grid(1, 2, 5), &targets(&[], 4, 6), &params, &cfg, &lcfg).unwrap();
    for lin in &grads.0.semantic {
        assert!(lin.weight.iter().chain(lin.bias.iter()).all(|&g| g == 0.0));
    }
    assert!(grads.0.select.weight.iter().any(|&g| g != 0.0));
}

#[test]
fn duplicated_example_doubles_gradients() {
    let cfg = tiny();
    let lcfg = LossConfig {
        lambda_sc: 0.0,
        reduction: Reduction::Sum,
        ..loss_cfg()
    };
    let params = init_params(&cfg, 8).unwrap();
    let ex = TrainingExample {
        tokens: grid(3, 2, 5),
        targets: targets(&["a", "b"], 4, 6),
    };
    let one = batch_loss_and_gradients(std::slice::from_ref(&ex), &params, &cfg, &lcfg).unwrap();
    let two = batch_loss_and_gradients(&[ex.clone(), ex], &params, &cfg, &lcfg).unwrap();
    assert!((two.loss - 2.0 * one.loss).abs() < 1e-12);
    for ((_, a), (_, b)) in one.grads.0.tensors().iter().zip(two.grads.0.tensors()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} {y}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny();
    let p = init_params(&cfg, 4).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&p, &cfg, &mut buf).unwrap();
    let (q, cfg2) = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(cfg, cfg2);
    for ((n1, a), (n2, b)) in p.tensors().iter().zip(q.tensors()) {
        assert_eq!(n1, &n2);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!((*x as f32) as f64, *y);
        }
    }

    let mut bad = buf.clone();
    bad[8] = 9;
    assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
}
