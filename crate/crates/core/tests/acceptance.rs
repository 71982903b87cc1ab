//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.
//!
//! `cargo test -p implicit-sent --test acceptance`

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use implicit_sent::data::{dedupe_overlap, split_train_valid, vectorize, Vocabulary};
use implicit_sent::gradcheck_suite;
use implicit_sent::layers::{uniform, AttentionPooling, ParamStore};
use implicit_sent::metrics::{ClassMetrics, EvalReport};
use implicit_sent::models::Checkpoint;
use implicit_sent::synthetic::{noise_examples, order_task, plant_overlaps, random_embeddings, separable_task};
use implicit_sent::training::{fit, run_replicates, PreparedData, TrainConfig, Trainer};
use implicit_sent::{build_model, ModelKind, ModelSpec, Tape};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let results = gradcheck_suite::run(&ModelKind::ALL, true);
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("non-empty suite");
    let failed: Vec<&str> = results.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    let caught = !gradcheck_suite::corrupted_fixture().passed();
    outcome(
        failed.is_empty() && caught && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst {:.2e} ({}), failures {:?}, corrupted fixture caught: {caught}, {}",
            results.len(),
            worst.report.max_rel_error,
            worst.name,
            failed,
            secs(elapsed)
        ),
    )
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = Vec::new();
    let mut worst_sum = 0.0f64;
    for trial in 0..1000 {
        let b = rng.gen_range(1..=5);
        let l = rng.gen_range(1..=9);
        let h = rng.gen_range(1..=8);
        let a = rng.gen_range(1..=8);
        let lens: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=l)).collect();
        let mask: Vec<bool> = lens.iter().flat_map(|&n| (0..l).map(move |t| t < n)).collect();
        let states = uniform(vec![b, l, h], 3.0, &mut rng);
        let mut store = ParamStore::new();
        let attn = AttentionPooling::new(&mut store, "att", h, a, &mut rng).expect("valid layer");
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let hv = tape.constant(states.clone());
        let out = match attn.forward(&mut tape, &bind, hv, &mask) {
            Ok(o) => o,
            Err(e) => {
                violations.push(format!("trial {trial}: {e}"));
                continue;
            }
        };
        let alpha = tape.value(out.weights).data();
        let pooled = tape.value(out.pooled).data();
        let hs = states.data();
        for bi in 0..b {
            let row = &alpha[bi * l..(bi + 1) * l];
            let sum: f64 = row.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            if row.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
                violations.push(format!("trial {trial} row {bi}: not a distribution"));
            }
            if row[lens[bi]..].iter().any(|&x| x != 0.0) {
                violations.push(format!("trial {trial} row {bi}: padded weight non-zero"));
            }
            for c in 0..h {
                let vals = (0..lens[bi]).map(|t| hs[(bi * l + t) * h + c]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                let s = pooled[bi * h + c];
                if s < lo || s > hi {
                    violations.push(format!("trial {trial} row {bi} coord {c}: {s} outside [{lo}, {hi}]"));
                }
            }
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "1000 batches, max |Σα-1| {worst_sum:.1e}, violations {}{}",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

fn brute_force(truth: &[usize], pred: &[usize], class: usize) -> ClassMetrics {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&t, &p) in truth.iter().zip(pred) {
        match (t == class, p == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    let pct = |n: u64, d: u64| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
    let (p, r) = (pct(tp, tp + fp), pct(tp, tp + fn_));
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    ClassMetrics {
        precision: p,
        recall: r,
        f1,
        degenerate: false,
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(0..400);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let r = EvalReport::from_predictions(&truth, &pred).expect("labels in range");
        let oracle: Vec<ClassMetrics> = (0..3).map(|c| brute_force(&truth, &pred, c)).collect();
        let same = (0..3).all(|c| {
            let (a, o) = (r.classes[c], oracle[c]);
            (a.precision, a.recall, a.f1) == (o.precision, o.recall, o.f1)
        });
        let macro_f1 = oracle.iter().map(|c| c.f1).sum::<f64>() / 3.0;
        if !same || r.macro_f1 != macro_f1 {
            mismatches += 1;
        }
    }
    let hand = EvalReport::from_predictions(&[0, 0, 1], &[0, 1, 1]).expect("labels in range");
    let (fa, fb) = (hand.classes[0].f1, hand.classes[1].f1);
    let hand_ok = (fa - 66.67).abs() < 0.005 && (fb - 66.67).abs() < 0.005;
    outcome(
        mismatches == 0 && hand_ok,
        format!("1000 random matrices, {mismatches} mismatches; hand case F1 {fa:.2} / {fb:.2}"),
    )
}

fn overfit() -> Outcome {
    let corpus = separable_task(60, 5);
    let (vocab, table) = random_embeddings(&corpus.words, 300, 6);
    let data = vectorize(&corpus.train, &vocab, 64);
    let config = TrainConfig::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for kind in ModelKind::ALL {
        let start = Instant::now();
        let model = build_model(&ModelSpec::new(kind), table.clone(), 7).expect("valid spec");
        let mut trainer = Trainer::new(model, &config, &data, &data).expect("valid config");
        let mut reached = None;
        for _ in 0..200 {
            let r = match trainer.run_epoch() {
                Ok(r) => r,
                Err(e) => {
                    lines.push(format!("{kind}: {e}"));
                    break;
                }
            };
            if r.val_accuracy >= 99.0 {
                reached = Some((r.epoch, r.val_accuracy));
                break;
            }
        }
        let elapsed = start.elapsed();
        let pass = reached.is_some() && elapsed < Duration::from_secs(60);
        ok &= pass;
        lines.push(match reached {
            Some((epoch, acc)) => format!("{kind} {acc:.0}% @ epoch {epoch} in {}", secs(elapsed)),
            None => format!("{kind} did not reach 99% ({})", secs(elapsed)),
        });
    }
    outcome(ok, lines.join("; "))
}

fn order_sensitivity() -> Outcome {
    let start = Instant::now();
    let corpus = order_task(2000, 500, 11);
    let split = split_train_valid(&corpus.train, 12).expect("enough examples");
    let (vocab, table) = random_embeddings(&corpus.words, 300, 13);
    let data = PreparedData {
        train: vectorize(&split.train, &vocab, 64),
        validation: vectorize(&split.validation, &vocab, 64),
        test: vectorize(&corpus.test, &vocab, 64),
    };
    let config = TrainConfig {
        seed: 100,
        ..Default::default()
    };
    let mut f1 = Vec::new();
    for kind in [ModelKind::Dnn, ModelKind::Cnn, ModelKind::Lstm, ModelKind::Bilstm] {
        let t = Instant::now();
        match run_replicates(&ModelSpec::new(kind), &table, &data, &config, 3) {
            Ok(s) => {
                println!("      {kind}: macro-F1 {:.2} ({})", s.average.macro_f1, secs(t.elapsed()));
                f1.push((kind, s.average.macro_f1));
            }
            Err(e) => return outcome(false, format!("{kind}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let dnn = f1[0].1;
    let margins: Vec<String> = f1[1..].iter().map(|(k, v)| format!("{k} {:+.2}", v - dnn)).collect();
    let pass = f1[1..].iter().all(|(_, v)| v - dnn >= 10.0) && elapsed < Duration::from_secs(600);
    outcome(pass, format!("DNN {dnn:.2}; margins {}; {}", margins.join(", "), secs(elapsed)))
}

fn protocol() -> Outcome {
    let mut notes = Vec::new();
    let examples = noise_examples(14774, "tr", 21);
    let split = split_train_valid(&examples, 22).expect("enough examples");
    let sizes = (split.train.len(), split.validation.len());
    let split_ok = sizes == (11819, 2955);
    notes.push(format!("split {}/{}", sizes.0, sizes.1));

    let mut test = noise_examples(5110, "te", 23);
    let planted = plant_overlaps(&examples, &mut test, 33, 24);
    let d = dedupe_overlap(&examples, &test);
    let dedupe_ok = d.removed == planted && d.kept.len() == 5077;
    notes.push(format!("dedupe removed {} of 33 planted, {} left", d.removed.len(), d.kept.len()));

    let corpus = order_task(150, 60, 25);
    let vocab = Vocabulary::from_words(&corpus.words);
    let (_, table) = random_embeddings(&corpus.words, 300, 26);
    let s = split_train_valid(&corpus.train, 27).expect("enough examples");
    let data = PreparedData {
        train: vectorize(&s.train, &vocab, 64),
        validation: vectorize(&s.validation, &vocab, 64),
        test: vectorize(&corpus.test, &vocab, 64),
    };
    let config = TrainConfig {
        epochs: 2,
        seed: 5,
        ..Default::default()
    };
    let averaged_ok = match run_replicates(&ModelSpec::new(ModelKind::Lstm), &table, &data, &config, 3) {
        Ok(sum) => {
            let mean = |f: &dyn Fn(&EvalReport) -> f64| sum.runs.iter().map(|r| f(&r.test)).sum::<f64>() / 3.0;
            let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
            let ok = sum.runs.len() == 3
                && (0..3).all(|c| {
                    close(sum.average.classes[c].precision, mean(&|r| r.classes[c].precision))
                        && close(sum.average.classes[c].recall, mean(&|r| r.classes[c].recall))
                        && close(sum.average.classes[c].f1, mean(&|r| r.classes[c].f1))
                })
                && close(sum.average.macro_f1, mean(&|r| r.macro_f1));
            let seeds: Vec<u64> = sum.runs.iter().map(|r| r.seed).collect();
            notes.push(format!("3 replicates (seeds {seeds:?}) averaged per class: {ok}"));
            ok
        }
        Err(e) => {
            notes.push(e.to_string());
            false
        }
    };
    outcome(split_ok && dedupe_ok && averaged_ok, notes.join("; "))
}

fn determinism() -> Outcome {
    let corpus = order_task(120, 40, 31);
    let vocab = Vocabulary::from_words(&corpus.words);
    let (_, table) = random_embeddings(&corpus.words, 300, 32);
    let train = vectorize(&corpus.train, &vocab, 64);
    let test = vectorize(&corpus.test, &vocab, 64);
    let config = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let mut mismatched = Vec::new();
    for kind in ModelKind::ALL {
        let run = || {
            let model = build_model(&ModelSpec::new(kind), table.clone(), 33).expect("valid spec");
            let mut log = Vec::new();
            let fitted = fit(model, &train, &test, &config, Some(&mut log)).expect("training succeeds");
            let report = implicit_sent::training::evaluate(&fitted.model, &test).expect("evaluation succeeds");
            let ckpt = Checkpoint::from_model(&fitted.model, &vocab.hash()).to_bytes();
            (ckpt, log, serde_json::to_string(&report).expect("plain data"))
        };
        if run() != run() {
            mismatched.push(kind);
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("checkpoints, epoch logs and reports byte-identical across two runs for all five models; mismatches {mismatched:?}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("gradient fidelity", gradient_fidelity),
        ("attention invariants", attention_invariants),
        ("metric oracle", metric_oracle),
        ("overfit sanity", overfit),
        ("order-sensitive reproduction", order_sensitivity),
        ("protocol fidelity", protocol),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        failed += usize::from(!o.pass);
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
