use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use implicit_sent::data::{
    dedupe_overlap, load_corpus, load_embeddings_with_dim, split_train_valid, vectorize, write_corpus, Example, Label,
    Vocabulary,
};
use implicit_sent::gradcheck_suite::{self, CheckOutcome};
use implicit_sent::metrics::{format_table, to_json, EvalReport};
use implicit_sent::models::{load_checkpoint, save_checkpoint};
use implicit_sent::synthetic::{order_task, random_embeddings, separable_task, write_word2vec};
use implicit_sent::training::{evaluate, fit, predict_all, run_replicates, PreparedData};
use implicit_sent::{build_model, ModelKind, Tensor};
use serde::Serialize;

use crate::config::{ConfigArgs, RunConfig};
use crate::error::CliError;

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn ensure_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("{what} file {} does not exist", path.display())))
    }
}

/// Loads a corpus, failing with every malformed line listed.
fn read_corpus(path: &Path) -> Result<Vec<Example>, CliError> {
    let corpus = load_corpus(path)?;
    if corpus.errors.is_empty() {
        return Ok(corpus.examples);
    }
    let lines: Vec<String> = corpus
        .errors
        .iter()
        .map(|e| format!("{}:{}: {}", path.display(), e.line, e.message))
        .collect();
    Err(CliError::data(format!(
        "{} malformed line(s) in {}\n{}",
        lines.len(),
        path.display(),
        lines.join("\n")
    )))
}

fn read_vectors(path: &Path, dim: usize) -> Result<(Vocabulary, Tensor), CliError> {
    Ok(load_embeddings_with_dim(path, dim)?)
}

pub struct PrepareSummary {
    pub removed: Vec<String>,
    pub kept: usize,
}

/// Removes test sentences that also occur in the training file.
pub fn prepare(args: &ConfigArgs) -> Result<PrepareSummary, CliError> {
    let config = args.resolve()?;
    let train_path = config.require(&config.train_path, "train")?;
    let test_path = config.require(&config.test_path, "test")?;
    let out = config.require(&config.out, "out")?;
    ensure_exists(train_path, "train")?;
    ensure_exists(test_path, "test")?;
    let (train, test) = match (read_corpus(train_path), read_corpus(test_path)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(a), Err(b)) => return Err(CliError::data(format!("{}\n{}", a.message, b.message))),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let d = dedupe_overlap(&train, &test);
    create_dir(out)?;
    let mut buf = Vec::new();
    write_corpus(&train, &mut buf).map_err(|e| io_error(out, e))?;
    write_file(&out.join("train.tsv"), &buf)?;
    buf.clear();
    write_corpus(&d.kept, &mut buf).map_err(|e| io_error(out, e))?;
    write_file(&out.join("test.tsv"), &buf)?;
    let mut report = format!(
        "train {}\ntest {}\nremoved {}\nkept {}\n",
        train.len(),
        test.len(),
        d.removed.len(),
        d.kept.len()
    );
    for id in &d.removed {
        report.push_str(&format!("removed_id {id}\n"));
    }
    write_file(&out.join("prepare_report.txt"), report)?;
    Ok(PrepareSummary {
        removed: d.removed,
        kept: d.kept.len(),
    })
}

fn load_training_inputs(config: &RunConfig) -> Result<(Vocabulary, Tensor, Vec<Example>), CliError> {
    let train_path = config.require(&config.train_path, "train")?;
    let emb_path = config.require(&config.embeddings_path, "embeddings")?;
    ensure_exists(train_path, "train")?;
    ensure_exists(emb_path, "embeddings")?;
    if let Some(test) = &config.test_path {
        ensure_exists(test, "test")?;
    }
    let train = read_corpus(train_path)?;
    let (vocab, table) = read_vectors(emb_path, config.spec.embedding_dim)?;
    Ok((vocab, table, train))
}

pub struct TrainSummary {
    pub best_epoch: usize,
    pub test: Option<EvalReport>,
}

/// Trains one model on a 4:1 train/validation split of the training file.
/// Writes `config.txt`, `epochs.jsonl` and `model.ckpt` under the output
/// directory, plus `test_report.json` when a test file is configured.
pub fn train(args: &ConfigArgs) -> Result<TrainSummary, CliError> {
    let config = args.resolve()?;
    config.validate()?;
    let out = config.require(&config.out, "out")?.to_path_buf();
    let (vocab, table, examples) = load_training_inputs(&config)?;
    let test = config.test_path.as_deref().map(read_corpus).transpose()?;
    log::info!("effective configuration:\n{}", config.echo());
    create_dir(&out)?;
    write_file(&out.join("config.txt"), config.echo())?;

    let tc = config.train_config();
    let split = split_train_valid(&examples, tc.seed)?;
    let max_len = config.spec.max_len;
    let train = vectorize(&split.train, &vocab, max_len);
    let valid = vectorize(&split.validation, &vocab, max_len);
    let model = build_model(&config.spec, table, tc.seed)?;

    let log_path = out.join("epochs.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_error(&log_path, e))?);
    let fitted = fit(model, &train, &valid, &tc, Some(&mut log))?;
    log.flush().map_err(|e| io_error(&log_path, e))?;
    save_checkpoint(&fitted.model, &vocab.hash(), &out.join("model.ckpt"))?;

    let test = match test {
        Some(examples) => {
            let report = evaluate(&fitted.model, &vectorize(&examples, &vocab, max_len))?;
            let rows = [(config.spec.kind.title().to_string(), report.clone())];
            write_file(&out.join("test_report.json"), to_json(&rows))?;
            Some(report)
        }
        None => None,
    };
    Ok(TrainSummary {
        best_epoch: fitted.best_epoch,
        test,
    })
}

fn restore(checkpoint: &Path, embeddings: &Path) -> Result<(implicit_sent::ClassifierModel, Vocabulary), CliError> {
    ensure_exists(checkpoint, "checkpoint")?;
    ensure_exists(embeddings, "embeddings")?;
    let ckpt = load_checkpoint(checkpoint)?;
    let (vocab, table) = read_vectors(embeddings, ckpt.header.spec.embedding_dim)?;
    let model = ckpt.restore(table, &vocab.hash()).map_err(|e| {
        CliError::data(format!(
            "{e}; the embeddings in {} are not the ones {} was trained with",
            embeddings.display(),
            checkpoint.display()
        ))
    })?;
    Ok((model, vocab))
}

/// Scores a checkpoint on the configured test file.
pub fn evaluate_checkpoint(args: &ConfigArgs, checkpoint: &Path) -> Result<(String, EvalReport), CliError> {
    let config = args.resolve()?;
    let test_path = config.require(&config.test_path, "test")?;
    let emb_path = config.require(&config.embeddings_path, "embeddings")?;
    ensure_exists(test_path, "test")?;
    let (model, vocab) = restore(checkpoint, emb_path)?;
    let examples = read_corpus(test_path)?;
    let report = evaluate(&model, &vectorize(&examples, &vocab, model.spec().max_len))?;
    let name = model.spec().kind.title().to_string();
    if let Some(out) = &config.out {
        create_dir(out)?;
        write_file(&out.join("eval_report.json"), to_json(&[(name.clone(), report.clone())]))?;
    }
    Ok((name, report))
}

/// Reads `id<TAB>tokens` lines. Labelled corpus lines
/// (`id<TAB>label<TAB>tokens[<TAB>context]`) are accepted too; the label is
/// ignored.
pub fn parse_predict_input(text: &str) -> Result<Vec<Example>, Vec<String>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let tokens = match fields.len() {
            2 => fields[1],
            3 | 4 => fields[2],
            n => {
                errors.push(format!("line {}: expected 2 to 4 tab-separated fields, got {n}", i + 1));
                continue;
            }
        };
        let tokens: Vec<&str> = tokens.split_whitespace().collect();
        if fields[0].trim().is_empty() || tokens.is_empty() {
            errors.push(format!("line {}: empty id or sentence", i + 1));
            continue;
        }
        out.push(Example::new(fields[0].trim(), Label::Neutral, &tokens));
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

/// Writes one `id<TAB>label` line per input sentence.
pub fn predict(checkpoint: &Path, embeddings: &Path, input: &Path, out: &mut dyn Write) -> Result<usize, CliError> {
    ensure_exists(input, "input")?;
    let (model, vocab) = restore(checkpoint, embeddings)?;
    let text = fs::read_to_string(input).map_err(|e| io_error(input, e))?;
    let examples = parse_predict_input(&text).map_err(|errs| {
        CliError::data(format!("malformed input {}\n{}", input.display(), errs.join("\n")))
    })?;
    let labels = predict_all(&model, &vectorize(&examples, &vocab, model.spec().max_len))?;
    let stdout_err = |e: io::Error| CliError::data(format!("writing predictions: {e}"));
    for (ex, &label) in examples.iter().zip(&labels) {
        let name = Label::from_index(label).expect("three classes").name();
        writeln!(out, "{}\t{name}", ex.id).map_err(stdout_err)?;
    }
    out.flush().map_err(stdout_err)?;
    Ok(examples.len())
}

#[derive(Serialize)]
struct ReplicateLine<'a> {
    model: &'a str,
    seed: u64,
    best_epoch: usize,
    macro_f1: f64,
    accuracy: f64,
}

pub struct ExperimentSummary {
    pub rows: Vec<(String, EvalReport)>,
    pub failures: Vec<(ModelKind, CliError)>,
}

/// Runs the configured number of replicates for each model and collects the
/// averaged test reports. A failing model is reported and skipped.
pub fn experiment(args: &ConfigArgs, models: &[ModelKind]) -> Result<ExperimentSummary, CliError> {
    let config = args.resolve()?;
    config.validate()?;
    let test_path = config.require(&config.test_path, "test")?.to_path_buf();
    let (vocab, table, examples) = load_training_inputs(&config)?;
    let test = read_corpus(&test_path)?;
    let deduped = dedupe_overlap(&examples, &test);
    if !deduped.removed.is_empty() {
        log::warn!("dropped {} test sentences that also occur in the training file", deduped.removed.len());
    }
    let tc = config.train_config();
    let split = split_train_valid(&examples, tc.seed)?;
    let max_len = config.spec.max_len;
    let data = PreparedData {
        train: vectorize(&split.train, &vocab, max_len),
        validation: vectorize(&split.validation, &vocab, max_len),
        test: vectorize(&deduped.kept, &vocab, max_len),
    };
    if let Some(out) = &config.out {
        create_dir(out)?;
        write_file(&out.join("config.txt"), config.echo())?;
    }
    log::info!("effective configuration:\n{}", config.echo());

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut replicate_log = String::new();
    for &kind in models {
        let mut spec = config.spec.clone();
        spec.kind = kind;
        let start = Instant::now();
        match run_replicates(&spec, &table, &data, &tc, tc.replicates) {
            Ok(summary) => {
                log::info!("{kind}: {} replicates in {:.1}s", summary.runs.len(), start.elapsed().as_secs_f64());
                for run in &summary.runs {
                    let line = ReplicateLine {
                        model: kind.name(),
                        seed: run.seed,
                        best_epoch: run.best_epoch,
                        macro_f1: run.test.macro_f1,
                        accuracy: run.test.accuracy,
                    };
                    replicate_log.push_str(&serde_json::to_string(&line).expect("plain data"));
                    replicate_log.push('\n');
                }
                rows.push((kind.title().to_string(), summary.average));
            }
            Err(e) => failures.push((kind, CliError::from(e))),
        }
    }
    if let Some(out) = &config.out {
        write_file(&out.join("results.txt"), format_table(&rows))?;
        write_file(&out.join("results.json"), to_json(&rows))?;
        write_file(&out.join("replicates.jsonl"), replicate_log)?;
    }
    Ok(ExperimentSummary { rows, failures })
}

pub fn gradcheck(models: &[ModelKind], layers: bool, corrupted: bool) -> Vec<CheckOutcome> {
    let mut outcomes = gradcheck_suite::run(models, layers);
    if corrupted {
        outcomes.push(gradcheck_suite::corrupted_fixture());
    }
    outcomes
}

pub fn describe(o: &CheckOutcome) -> String {
    let r = &o.report;
    let status = if o.passed() { "PASS" } else { "FAIL" };
    let detail = match &r.failure {
        Some(f) => format!("error: {f}"),
        None => format!(
            "max rel err {:.2e} at parameter #{} entry {} (analytic {:.6e}, numeric {:.6e})",
            r.max_rel_error, r.worst_param, r.worst_index, r.analytic, r.numeric
        ),
    };
    format!("{status} {:<28} {detail} [{} ms]", o.name, o.elapsed.as_millis())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthTask {
    /// Label set by token order; a bag-of-words model cannot separate it.
    Order,
    /// Label set by class keywords.
    Separable,
}

/// Writes `train.tsv`, `test.tsv` and `embeddings.txt` for a synthetic task.
pub fn synth(task: SynthTask, n_train: usize, n_test: usize, dim: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dim == 0 {
        return Err(CliError::config("--dim must be at least 1"));
    }
    let corpus = match task {
        SynthTask::Order => order_task(n_train, n_test, seed),
        SynthTask::Separable => {
            let mut c = separable_task(n_train + n_test, seed);
            c.test = c.train.split_off(n_train);
            c
        }
    };
    let (vocab, table) = random_embeddings(&corpus.words, dim, seed.wrapping_add(1));
    create_dir(out)?;
    let files = [out.join("train.tsv"), out.join("test.tsv"), out.join("embeddings.txt")];
    let mut buf = Vec::new();
    write_corpus(&corpus.train, &mut buf).map_err(|e| io_error(out, e))?;
    write_file(&files[0], &buf)?;
    buf.clear();
    write_corpus(&corpus.test, &mut buf).map_err(|e| io_error(out, e))?;
    write_file(&files[1], &buf)?;
    buf.clear();
    write_word2vec(&vocab, &table, &mut buf).map_err(|e| io_error(out, e))?;
    write_file(&files[2], &buf)?;
    Ok(files.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_input_forms() {
        let ex = parse_predict_input("a\tx y\n# skip\n\nb\tpositive\tz\tctx\n").unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].tokens, vec!["x", "y"]);
        assert_eq!((ex[1].id.as_str(), ex[1].tokens.as_slice()), ("b", &["z".to_string()][..]));
        let errs = parse_predict_input("a\n\nb\t  \n").unwrap_err();
        assert_eq!(errs.len(), 2);
        assert!(errs[0].starts_with("line 1"));
        assert!(errs[1].starts_with("line 3"));
        assert!(parse_predict_input("").unwrap().is_empty());
    }

    #[test]
    fn synth_writes_loadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = synth(SynthTask::Separable, 12, 6, 5, 3, dir.path()).unwrap();
        assert_eq!(read_corpus(&files[0]).unwrap().len(), 12);
        assert_eq!(read_corpus(&files[1]).unwrap().len(), 6);
        let (vocab, table) = read_vectors(&files[2], 5).unwrap();
        assert_eq!(table.shape(), &[vocab.len(), 5]);
    }

    #[test]
    fn malformed_corpus_lists_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "1\tpositive\ta b\n2\tjoyful\tc\n3\n").unwrap();
        let e = read_corpus(&path).unwrap_err();
        assert_eq!(e.kind, crate::error::Failure::Data);
        assert!(e.message.contains("bad.tsv:2:"), "{e}");
        assert!(e.message.contains("bad.tsv:3:"), "{e}");
    }
}
