//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rarrg::decoder::{batch_loss, batch_loss_and_gradients, forward, init_params, DecoderConfig, DecoderParams, TrainingExample};
use rarrg::embedding::{hash_embed, l2_normalize, Embedding, HashProvider, NoiseConfig, NoiseSource, TokenGrid};
use rarrg::index::{build_index, load_index, retrieve, save_index, VectorIndex};
use rarrg::losses::{
    selection_loss, semantic_contrastive_loss, total_loss, transq_loss, LossConfig, MatchedBatch, MatchedExample,
    Reduction, SelectionLoss,
};
use rarrg::matching::{hungarian, match_example, PredictionSet, TargetSet};
use rarrg::metrics::{bleu, evaluate_records, example_f1_sets, rouge_l, EvalRecord, LabelValue, LabelMatrix, CHEXBERT_CLASSES};
use rarrg::phrase_graph::{extract_radgraph_phrases, read_annotation_lines, KeyPhrase};
use rarrg::rag::merge_views;
use rarrg::trainer::{generate_corpus, train, Study, SyntheticCorpusConfig, TrainConfig};

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    l2_normalize(&Embedding::new(v).unwrap()).unwrap()
}

// Criterion 1

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn row_sum(cost: &Array2<f64>, sigma: &[usize]) -> f64 {
    sigma.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
}

fn hungarian_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for n in 2..=6 {
        let perms = permutations(n);
        for trial in 0..1000 {
            // Every other matrix has small integer costs so that ties occur.
            let cost = Array2::from_shape_fn((n, n), |_| {
                if trial % 2 == 0 {
                    rng.random_range(-2.0..3.0)
                } else {
                    rng.random_range(0..4) as f64
                }
            });
            let a = hungarian(&cost).map_err(err)?;
            let got = row_sum(&cost, &a.sigma);
            let best = perms.iter().map(|p| row_sum(&cost, p)).fold(f64::INFINITY, f64::min);
            if got != best || a.total_cost != got {
                return Ok((false, format!("N={n} trial {trial}: got {got}, reported {}, optimum {best}", a.total_cost)));
            }
            checked += 1;
        }
    }
    Ok((true, format!("{checked} matrices match the brute-force optimum")))
}

// Criterion 2

fn tiny_decoder() -> DecoderConfig {
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

fn target_set(names: &[&str], n: usize, d: usize) -> TargetSet {
    TargetSet::new(
        names.iter().map(|s| KeyPhrase::new(s).unwrap()).collect(),
        names.iter().map(|s| hash_embed(s, d).unwrap()).collect(),
        n,
    )
    .unwrap()
}

fn gradient_check() -> Check {
    let cfg = tiny_decoder();
    let lcfg = LossConfig {
        pos_class_size: 1.5,
        ..Default::default()
    };
    let params = init_params(&cfg, 42).map_err(err)?;
    // Three real targets over eight queries leave five matched to the empty set.
    let batch = vec![
        TrainingExample {
            tokens: grid(11, 2, 5),
            targets: target_set(&["mild cardiomegaly", "no pleural effusion"], 4, 6),
        },
        TrainingExample {
            tokens: grid(12, 2, 5),
            targets: target_set(&["small left effusion"], 4, 6),
        },
    ];
    let analytic = batch_loss_and_gradients(&batch, &params, &cfg, &lcfg).map_err(err)?;

    let h = 1e-5;
    let mut probe: DecoderParams = params.clone();
    let mut worst = (String::new(), 0.0_f64);
    let analytic_tensors = analytic.grads.0.tensors();
    for (t, (name, grad)) in analytic_tensors.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for k in 0..grad.len() {
            let orig = *probe.tensors_mut()[t].1.iter_mut().nth(k).unwrap();
            let mut at = |v: f64| -> Result<f64, String> {
                *probe.tensors_mut()[t].1.iter_mut().nth(k).unwrap() = v;
                batch_loss(&batch, &probe, &cfg, &lcfg).map_err(err)
            };
            let up = at(orig + h)?;
            let down = at(orig - h)?;
            at(orig)?;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff = grad.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = grad.iter().chain(&numeric).map(|x| x.abs()).fold(1e-6, f64::max);
        if diff / scale > worst.1 {
            worst = (name.clone(), diff / scale);
        }
    }
    Ok((
        worst.1 <= 1e-4,
        format!("{} tensors, worst relative error {:.2e} in {}", analytic_tensors.len(), worst.1, worst.0),
    ))
}

// Criterion 3

fn noise_statistics() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for d in [16usize, 768] {
        let mut src = NoiseSource::new(NoiseConfig {
            enabled: true,
            rng_seed: d as u64,
        });
        let bound = 1.0 / (d as f64).sqrt();
        let mut sq = 0.0;
        let mut within = true;
        for _ in 0..10_000 {
            let eps = src.sample(d);
            within &= eps.iter().all(|e| e.abs() <= bound);
            sq += eps.iter().map(|e| e * e).sum::<f64>();
        }
        let mean = sq / 10_000.0;
        ok &= within && (0.31..=0.35).contains(&mean);
        parts.push(format!("d={d}: bound holds {within}, mean squared norm {mean:.4}"));
    }
    Ok((ok, parts.join("; ")))
}

// Criterion 4

fn loss_reductions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (6, 8);
    let cfg = LossConfig {
        lambda_sc: 0.0,
        reduction: Reduction::Sum,
        pos_class_size: 2.0,
        ..Default::default()
    };
    let mut batch = MatchedBatch::default();
    let mut summed = 0.0;
    for real in [3usize, 1, 0, 4] {
        let names: Vec<String> = (0..real).map(|i| format!("finding {i}")).collect();
        let targets = TargetSet::new(
            names.iter().map(|s| KeyPhrase::new(s).unwrap()).collect(),
            (0..real).map(|_| unit(&mut rng, d)).collect(),
            n,
        )
        .map_err(err)?;
        let preds = PredictionSet::new(
            (0..n).map(|_| rng.random_range(0.01..0.99)).collect(),
            (0..n).map(|_| unit(&mut rng, d)).collect(),
        )
        .map_err(err)?;
        let assignment = match_example(&targets, &preds, cfg.mu).map_err(err)?;
        summed += transq_loss(&targets, &preds, &assignment, &cfg).map_err(err)?;
        batch.examples.push(MatchedExample {
            targets,
            preds,
            assignment,
        });
    }
    let total = total_loss(&batch, &cfg).map_err(err)?;
    let gap_total = (total - summed).abs();

    let v = unit(&mut rng, d);
    let s = unit(&mut rng, d);
    let single = semantic_contrastive_loss(&[v], &[s], &LossConfig::default()).map_err(err)?;

    let bce = selection_loss(true, 0.5, &SelectionLoss::BCE).map_err(err)?;
    let gap_bce = (bce - std::f64::consts::LN_2).abs();

    Ok((
        gap_total <= 1e-12 && single.abs() <= 1e-12 && gap_bce <= 1e-9,
        format!("|total - sum| = {gap_total:.1e}, M=1 contrastive = {single:.1e}, |BCE(0.5) - ln 2| = {gap_bce:.1e}"),
    ))
}

// Criteria 5 and 6

struct Trained {
    params: DecoderParams,
    cfg: DecoderConfig,
    index: VectorIndex,
    test: Vec<Study>,
}

fn retrieval_f1(model: &Trained, threshold: f64) -> Result<(f64, usize), String> {
    let mut pred = Vec::with_capacity(model.test.len());
    let mut count = 0;
    for s in &model.test {
        let out = forward(&s.views[0].tokens, &model.params, &model.cfg).map_err(err)?;
        let hits = retrieve(&out, &model.index, threshold).map_err(err)?;
        let phrases: Vec<String> = hits.phrases().into_iter().map(str::to_owned).collect();
        count += phrases.len();
        pred.push(phrases);
    }
    let reference: Vec<Vec<String>> = model.test.iter().map(|s| s.phrases.clone()).collect();
    Ok((example_f1_sets(&pred, &reference).map_err(err)?, count))
}

fn closed_loop(noise: bool) -> Result<(Trained, Option<usize>), String> {
    let corpus = generate_corpus(&SyntheticCorpusConfig {
        num_findings: 20,
        signature_dim: 32,
        train_studies: 2000,
        val_studies: 200,
        test_studies: 200,
        seed: 1,
        ..Default::default()
    })
    .map_err(err)?;
    let cfg = DecoderConfig {
        num_queries: 16,
        num_layers: 2,
        d_model: 64,
        d_embed: 32,
        heads: 4,
        d_visual: 32,
        ffn_dim: 128,
        positional_encoding: true,
    };
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_steps: 50,
        batch_size: 16,
        max_epochs: 10,
        seed: 7,
        noise,
        ..Default::default()
    };
    let provider = HashProvider::new(32).map_err(err)?;
    let out = train(&corpus.train, &corpus.val, &cfg, &LossConfig::default(), &tcfg, &provider).map_err(err)?;
    let index = build_index(&corpus.vocabulary(), &provider).map_err(err)?;
    Ok((
        Trained {
            params: out.params,
            cfg,
            index,
            test: corpus.test,
        },
        out.best_epoch,
    ))
}

fn threshold_sweep(model: &Trained) -> Check {
    let mut prev = usize::MAX;
    let mut monotone = true;
    let mut best = (f64::NEG_INFINITY, 0.0, 0);
    for k in 0..=20 {
        let t = k as f64 / 20.0;
        let (f1, count) = retrieval_f1(model, t)?;
        monotone &= count <= prev;
        prev = count;
        if f1 > best.0 {
            best = (f1, t, count);
        }
    }
    let mean = best.2 as f64 / model.test.len() as f64;
    Ok((
        monotone,
        format!(
            "21 thresholds, counts non-increasing {monotone}; best example F1 {:.4} at threshold {:.2} with {mean:.2} phrases per study",
            best.0, best.1
        ),
    ))
}

// Criterion 7

fn metric_oracles() -> Check {
    let b1 = bleu(&["the the the"], &["the cat"], 1).map_err(err)?;
    let rl = rouge_l("the cat sat", "the cat on the mat", 1.2).map_err(err)?;
    let row = |v: [bool; 3]| LabelMatrix::new(vec!["a".into(), "b".into(), "c".into()], vec![v.to_vec()]).unwrap();
    let ef1 = rarrg::metrics::f1_suite(&row([true, false, true]), &row([true, true, false])).map_err(err)?.example;

    // Every class is positive somewhere, so the per-class scores are defined.
    let texts = [
        "the heart size is normal and the lungs are clear .",
        "there is a small left pleural effusion with basilar atelectasis .",
        "no pneumothorax is seen on the frontal view today .",
    ];
    let records: Vec<EvalRecord> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let labels: Vec<LabelValue> =
                (0..CHEXBERT_CLASSES.len()).map(|c| LabelValue::Binary(u8::from(c % 3 == i || c == 13))).collect();
            EvalRecord {
                id: i.to_string(),
                candidate: t.to_string(),
                reference: t.to_string(),
                pred_labels: Some(labels.clone()),
                ref_labels: Some(labels),
            }
        })
        .collect();
    let r = evaluate_records(&records, &CHEXBERT_CLASSES, None).map_err(err)?;
    let all = [r.bleu1, r.bleu4, r.rouge_l, r.micro_f1.unwrap_or(0.0), r.macro_f1.unwrap_or(0.0), r.example_f1.unwrap_or(0.0)];
    let identical = all.iter().all(|&x| x == 1.0);

    Ok((
        (b1 - 1.0 / 3.0).abs() <= 1e-9 && (rl - 0.4784).abs() <= 5e-4 && ef1 == 0.5 && identical,
        format!("BLEU-1 {b1:.6}, ROUGE-L {rl:.6}, example F1 {ef1}, identical corpus {all:?}"),
    ))
}

// Criterion 8

fn golden_phrases() -> Check {
    let input = include_str!("data/golden_annotations.jsonl");
    let expected = include_str!("data/golden_phrases.jsonl");
    let docs = read_annotation_lines(input.as_bytes()).map_err(err)?;
    let mut out = String::new();
    for (line, doc) in &docs {
        let phrases = extract_radgraph_phrases(doc).map_err(err)?;
        let mut record = BTreeMap::new();
        record.insert("id", serde_json::Value::from(doc.id.clone().unwrap_or_else(|| line.to_string())));
        record.insert(
            "radgraph_phrases",
            phrases.iter().map(|p| p.as_str()).collect::<Vec<_>>().into(),
        );
        out.push_str(&serde_json::to_string(&record).map_err(err)?);
        out.push('\n');
    }
    let first_diff = out.lines().zip(expected.lines()).position(|(a, b)| a != b);
    Ok((
        out == expected,
        match first_diff {
            None if out == expected => format!("{} documents byte-identical to the goldens", docs.len()),
            None => "line counts differ".into(),
            Some(i) => format!("first difference on line {}", i + 1),
        },
    ))
}

// Criterion 9

fn phrase(s: &str) -> KeyPhrase {
    KeyPhrase::new(s).unwrap()
}

fn core(p: &KeyPhrase) -> &str {
    p.as_str().strip_prefix("no ").or_else(|| p.as_str().strip_prefix("maybe ")).unwrap_or(p.as_str())
}

fn prefixed_list() -> impl Strategy<Value = Vec<KeyPhrase>> {
    let prefix = prop_oneof![Just(""), Just("no "), Just("maybe ")];
    let body = prop_oneof![Just("pleural effusion"), Just("edema"), Just("mild cardiomegaly"), Just("opacity")];
    prop::collection::vec((prefix, body).prop_map(|(p, b)| phrase(&format!("{p}{b}"))), 0..6)
}

fn multi_view_merge() -> Check {
    let merged = merge_views(&[phrase("no pleural effusion")], &[phrase("pleural effusion")]);
    let conflict_ok = merged == vec![phrase("no pleural effusion")];
    let dup = merge_views(&[phrase("edema"), phrase("opacity")], &[phrase("opacity"), phrase("edema")]);
    let dup_ok = dup == vec![phrase("edema"), phrase("opacity")];

    let mut runner = TestRunner::new_with_rng(
        RunnerConfig {
            cases: 512,
            failure_persistence: None,
            ..RunnerConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let prop = runner.run(&(prefixed_list(), prefixed_list()), |(front, lat)| {
        let m = merge_views(&front, &lat);
        prop_assert_eq!(merge_views(&m, &lat), m.clone());
        prop_assert_eq!(merge_views(&m, &[]), m.clone());
        let mut seen: Vec<&KeyPhrase> = Vec::new();
        for p in &front {
            if !seen.contains(&p) {
                seen.push(p);
            }
        }
        prop_assert!(m.iter().take(seen.len()).eq(seen.iter().copied()));
        for extra in &m[seen.len()..] {
            let clash = front.iter().any(|f| core(f) == core(extra) && f != extra);
            prop_assert!(!clash, "lateral {} overrides a frontal phrase", extra);
        }
        Ok(())
    });
    let prop_ok = prop.is_ok();
    Ok((
        conflict_ok && dup_ok && prop_ok,
        format!(
            "conflict resolved frontal-first {conflict_ok}, duplicates collapse {dup_ok}, 512 random cases {}",
            match prop {
                Ok(()) => "hold".to_string(),
                Err(e) => format!("fail: {e}"),
            }
        ),
    ))
}

// Criterion 10

fn index_round_trip() -> Check {
    let provider = HashProvider::new(32).map_err(err)?;
    let phrases: Vec<String> = (0..10_000).map(|i| format!("finding {i} in zone {}", i % 37)).collect();
    let index = build_index(&phrases, &provider).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("large.kpvec");
    save_index(&index, &path).map_err(err)?;
    let loaded = load_index(&path).map_err(err)?;
    let lossless = loaded == index;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut same = true;
    for _ in 0..20 {
        let preds = PredictionSet::new(
            (0..16).map(|_| rng.random_range(0.0..1.0)).collect(),
            (0..16).map(|_| unit(&mut rng, 32)).collect(),
        )
        .map_err(err)?;
        same &= retrieve(&preds, &index, 0.4).map_err(err)? == retrieve(&preds, &loaded, 0.4).map_err(err)?;
    }
    Ok((
        lossless && same && loaded.len() == 10_000,
        format!("{} records, lossless {lossless}, retrieval identical {same}", loaded.len()),
    ))
}

fn report(number: usize, name: &str, limit: Duration, start: Instant, result: Check) -> bool {
    let elapsed = start.elapsed();
    let (pass, detail) = match result {
        Ok((ok, detail)) => (ok && elapsed <= limit, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!(
        "criterion {number:>2} {name}: {} ({detail}; {:.2} s, limit {} s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut passed = Vec::new();

    let t = Instant::now();
    passed.push(report(1, "hungarian oracle", secs(10), t, hungarian_oracle()));
    let t = Instant::now();
    passed.push(report(2, "gradient check", secs(60), t, gradient_check()));
    let t = Instant::now();
    passed.push(report(3, "noise statistics", secs(5), t, noise_statistics()));
    let t = Instant::now();
    passed.push(report(4, "loss reductions", secs(3600), t, loss_reductions()));

    let t = Instant::now();
    let trained = closed_loop(true);
    let main_run = t.elapsed();
    let c5 = trained.as_ref().map_err(Clone::clone).and_then(|(model, best)| {
        let (f1, count) = retrieval_f1(model, 0.4)?;
        let ablation = Instant::now();
        let (plain, _) = closed_loop(false)?;
        let (plain_f1, _) = retrieval_f1(&plain, 0.4)?;
        let ablation = ablation.elapsed();
        let budget = secs(15 * 60);
        Ok((
            f1 >= 0.85 && main_run <= budget && ablation <= budget,
            format!(
                "example F1 {f1:.4} at threshold 0.4 ({:.2} phrases per study, best epoch {best:?}) trained in {:.1} s; \
                 no-noise ablation F1 {plain_f1:.4} in {:.1} s",
                count as f64 / model.test.len() as f64,
                main_run.as_secs_f64(),
                ablation.as_secs_f64()
            ),
        ))
    });
    // Each of the two runs has its own 15 minute budget, checked above.
    passed.push(report(5, "closed-loop synthetic retrieval", secs(2 * 15 * 60), t, c5));

    let t = Instant::now();
    let c6 = match &trained {
        Ok((model, _)) => threshold_sweep(model),
        Err(e) => Err(format!("no trained model: {e}")),
    };
    passed.push(report(6, "threshold behavior", secs(3600), t, c6));

    let t = Instant::now();
    passed.push(report(7, "metric oracles", secs(3600), t, metric_oracles()));
    let t = Instant::now();
    passed.push(report(8, "phrase rules", secs(3600), t, golden_phrases()));
    let t = Instant::now();
    passed.push(report(9, "multi-view merge", secs(3600), t, multi_view_merge()));
    let t = Instant::now();
    passed.push(report(10, "index round-trip", secs(30), t, index_round_trip()));

    let failed = passed.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
