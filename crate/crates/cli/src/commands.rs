use std::path::Path;

use lstx::corpus::io::{read_labels, read_lines, write_labels, write_lines};
use lstx::corpus::{gen_synthetic, tokenize, Domain, SplitSpec, Style, StyleMix, TokenSeq, Vocab};
use lstx::evaluation::{
    fingerprint, parse_split_assignment, pretrain_ds, run_experiment, sample_dump, train_eval_classifier,
    transfer_accuracy, Corpus, EvalReport, Prepared, RunResult,
};
use lstx::model::{ClassifierConfig, ClassifierDims, StyleClassifier, TransferModel};
use lstx::training::{metrics_csv, train, TrainConfig};
use lstx::{Error, Result};

use crate::manifest::{beside, lookup, Manifest};
use crate::{ClassifierArgs, Command, ConfigArgs, DataArgs, EvaluateArgs, GenSynthArgs, Preset, Scale, TrainArgs, TransferArgs};

/// Successful outcome; `Advisory` maps to a nonzero exit code.
pub enum Status {
    Ok,
    Advisory,
}

/// Padded length used when a model has no config file beside it.
const DEFAULT_MAX_LEN: usize = 20;

pub fn run(command: Command) -> Result<Status> {
    match command {
        Command::GenSynth(a) => gen_synth(&a),
        Command::PretrainDs(a) => classifier(&a, "pretrain-ds"),
        Command::TrainEvalClf(a) => classifier(&a, "train-eval-clf"),
        Command::Train(a) => train_model(&a),
        Command::Transfer(a) => transfer(&a),
        Command::Evaluate(a) => evaluate(&a),
    }
}

fn parse_mix(text: &str) -> Result<StyleMix> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::spec(format!("--mix expects three numbers a,b,n, got {text:?}")))?;
    match parts[..] {
        [a, b, n] => StyleMix::new(a, b, n),
        _ => Err(Error::spec(format!("--mix expects three numbers a,b,n, got {text:?}"))),
    }
}

fn gen_synth(a: &GenSynthArgs) -> Result<Status> {
    let mix = parse_mix(&a.mix)?;
    let corpus = gen_synthetic(a.seed, a.n_source, a.n_target, &mix)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_lines(&a.out.join("source.txt"), &corpus.source)?;
    write_lines(&a.out.join("target.txt"), &corpus.target)?;
    write_labels(&a.out.join("labels.txt"), &corpus.source_labels)?;
    let mut m = Manifest::new("gen-synth");
    m.path("out", &a.out);
    m.flag("seed", a.seed);
    m.flag("n-source", a.n_source);
    m.flag("n-target", a.n_target);
    m.flag("mix", format!("{},{},{}", mix.target, mix.anti, mix.neutral));
    m.push("seed", a.seed);
    m.write(&a.out.join("manifest.txt"))?;
    println!(
        "wrote {} source and {} target sentences to {}",
        corpus.source.len(),
        corpus.target.len(),
        a.out.display()
    );
    Ok(Status::Ok)
}

fn load_corpus(
    source: &Path,
    target: &Path,
    labels: Option<&Path>,
    m: &mut Manifest,
) -> Result<Corpus> {
    m.input("source", source)?;
    m.input("target", target)?;
    let source_styles = match labels {
        Some(p) => {
            m.input("labels", p)?;
            Some(read_labels(p)?)
        }
        None => None,
    };
    Ok(Corpus {
        source: read_lines(source)?,
        target: read_lines(target)?,
        source_styles,
    })
}

fn prepare(
    corpus: &Corpus,
    split_seed: u64,
    split_file: Option<&Path>,
    max_len: usize,
    m: &mut Manifest,
) -> Result<Prepared> {
    match split_file {
        Some(p) => {
            m.input("split-file", p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let split = parse_split_assignment(&text, corpus.len())?;
            Prepared::from_split(corpus, &split, max_len)
        }
        None => {
            m.flag("split-seed", split_seed);
            Prepared::new(corpus, &SplitSpec::default(), split_seed, max_len)
        }
    }
}

fn prepare_data(data: &DataArgs, max_len: usize, m: &mut Manifest) -> Result<Prepared> {
    let corpus = load_corpus(&data.source, &data.target, data.labels.as_deref(), m)?;
    prepare(&corpus, data.split_seed, data.split_file.as_deref(), max_len, m)
}

fn classifier(a: &ClassifierArgs, command: &str) -> Result<Status> {
    let mut m = Manifest::new(command);
    let prep = prepare_data(&a.data, a.max_len, &mut m)?;
    let dims = match a.scale {
        Scale::Desk => ClassifierDims::desk(prep.vocab.len()),
        Scale::Paper => ClassifierDims::paper(prep.vocab.len()),
    };
    let cfg = ClassifierConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        dropout: a.dropout,
        seed: a.seed,
    };
    let trained = if command == "pretrain-ds" {
        pretrain_ds(&prep, dims, &cfg)?
    } else {
        train_eval_classifier(&prep, dims, &cfg)?
    };
    trained.classifier.save(&a.out)?;
    prep.vocab.save(&beside(&a.out, "vocab"))?;
    m.path("out", &a.out);
    m.flag("scale", format!("{:?}", a.scale).to_lowercase());
    m.flag("epochs", a.epochs);
    m.flag("lr", a.lr);
    m.flag("dropout", a.dropout);
    m.flag("batch-size", a.batch_size);
    m.flag("max-len", a.max_len);
    m.flag("seed", a.seed);
    m.push("seed", a.seed);
    m.push("accuracy", trained.test_accuracy);
    m.push("validation_accuracy", trained.validation_accuracy);
    m.write(&beside(&a.out, "manifest"))?;
    println!("accuracy={}", trained.test_accuracy);
    Ok(Status::Ok)
}

fn resolve_config(c: &ConfigArgs, m: &mut Manifest) -> Result<TrainConfig> {
    let mut cfg = match c.preset {
        Preset::Default => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::paper(),
    };
    m.flag("preset", format!("{:?}", c.preset).to_lowercase());
    if let Some(p) = &c.config {
        m.input("config", p)?;
        cfg.apply_file(p)?;
    }
    for entry in &c.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Error::spec(format!("--set expects KEY=VALUE, got {entry:?}")))?;
        cfg.set(k, v)?;
        m.flag("set", entry);
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = c.lr {
        cfg.lr = lr;
    }
    if c.no_cyc {
        cfg.weights.cyc = 0.0;
        m.flag("no-cyc", true);
    }
    if c.no_dis {
        cfg.weights.dis = 0.0;
        m.flag("no-dis", true);
    }
    m.flag_opt("seed", c.seed);
    m.flag_opt("epochs", c.epochs);
    m.flag_opt("lr", c.lr);
    cfg.validate()?;
    m.config(&cfg);
    m.push("seed", cfg.seed);
    Ok(cfg)
}

/// Loads a classifier and checks that it was trained on `vocab`.
fn load_classifier(path: &Path, vocab: &Vocab, m: &mut Manifest, name: &str) -> Result<StyleClassifier> {
    m.input(name, path)?;
    let clf = StyleClassifier::load(path)?;
    let vocab_path = beside(path, "vocab");
    let matches = if vocab_path.exists() {
        Vocab::load(&vocab_path)? == *vocab
    } else {
        clf.dims.vocab == vocab.len()
    };
    if !matches {
        return Err(Error::format(format!(
            "{}: trained on a different vocabulary than this corpus and split",
            path.display()
        )));
    }
    Ok(clf)
}

fn train_model(a: &TrainArgs) -> Result<Status> {
    let mut m = Manifest::new("train");
    let cfg = resolve_config(&a.config, &mut m)?;
    let prep = prepare_data(&a.data, cfg.max_len, &mut m)?;
    let ds = load_classifier(&a.ds, &prep.vocab, &mut m, "ds")?;
    let eval = match &a.eval_clf {
        Some(p) => Some(load_classifier(p, &prep.vocab, &mut m, "eval-clf")?),
        None => None,
    };
    let outcome = train(&cfg, &prep.transfer, prep.vocab.len(), &ds, eval.as_ref(), Some(&a.out))?;
    prep.vocab.save(&beside(&a.out, "vocab"))?;
    std::fs::write(beside(&a.out, "config"), cfg.to_text()).map_err(|e| Error::io(beside(&a.out, "config"), e))?;
    if let Some(log) = &a.log {
        std::fs::write(log, metrics_csv(&outcome.metrics)).map_err(|e| Error::io(log, e))?;
        m.path("log", log);
    }
    m.path("out", &a.out);
    m.push("best_epoch", outcome.best_epoch);
    m.write(&beside(&a.out, "manifest"))?;
    let best = &outcome.metrics[outcome.best_epoch - 1];
    println!("best_epoch={} val_total={}", outcome.best_epoch, best.val_total);
    Ok(Status::Ok)
}

fn model_max_len(model: &Path) -> Result<usize> {
    let path = beside(model, "config");
    if !path.exists() {
        return Ok(DEFAULT_MAX_LEN);
    }
    let mut cfg = TrainConfig::default();
    cfg.apply_file(&path)?;
    Ok(cfg.max_len)
}

fn load_model(path: &Path, m: &mut Manifest) -> Result<(TransferModel, Vocab, usize)> {
    m.input("model", path)?;
    let model = TransferModel::load(path)?;
    let vocab = Vocab::load(&beside(path, "vocab"))?;
    if vocab.len() != model.dims.vocab {
        return Err(Error::format(format!(
            "{}: vocabulary file has {} entries, model expects {}",
            path.display(),
            vocab.len(),
            model.dims.vocab
        )));
    }
    Ok((model, vocab, model_max_len(path)?))
}

/// Greedy transfer of every line; blank lines stay blank.
fn transfer_lines(model: &TransferModel, vocab: &Vocab, lines: &[&str], max_len: usize) -> Result<Vec<String>> {
    let mut seqs = Vec::new();
    let mut slots = Vec::with_capacity(lines.len());
    for line in lines {
        if tokenize(line).is_empty() {
            slots.push(None);
        } else {
            slots.push(Some(seqs.len()));
            seqs.push(vocab.encode(line, max_len, Domain::Source)?);
        }
    }
    let outputs = if seqs.is_empty() { Vec::new() } else { model.transfer(&seqs)? };
    Ok(slots
        .into_iter()
        .map(|s| s.map_or(String::new(), |i| vocab.decode(&outputs[i])))
        .collect())
}

fn transfer(a: &TransferArgs) -> Result<Status> {
    let mut m = Manifest::new("transfer");
    let (model, vocab, max_len) = load_model(&a.model, &mut m)?;
    m.input("input", &a.input)?;
    let text = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let out = transfer_lines(&model, &vocab, &lines, max_len)?;
    let mut body = String::new();
    for l in &out {
        body.push_str(l);
        body.push('\n');
    }
    std::fs::write(&a.output, body).map_err(|e| Error::io(&a.output, e))?;
    m.path("output", &a.output);
    m.write(&beside(&a.output, "manifest"))?;
    Ok(Status::Ok)
}

fn classifier_accuracy(path: &Path) -> Option<f64> {
    lookup(&beside(path, "manifest"), "accuracy").and_then(|v| v.parse().ok())
}

fn evaluate(a: &EvaluateArgs) -> Result<Status> {
    let mut m = Manifest::new("evaluate");
    m.flag("runs", a.runs);
    let eval_accuracy = classifier_accuracy(&a.eval_clf);
    let (report, samples) = if a.retrain {
        evaluate_retrain(a, eval_accuracy, &mut m)?
    } else {
        evaluate_checkpoint(a, eval_accuracy, &mut m)?
    };
    report.write(&a.report)?;
    if let (Some(path), Some(text)) = (&a.samples, samples) {
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        m.path("samples", path);
    }
    m.path("report", &a.report);
    m.write(&beside(&a.report, "manifest"))?;
    for r in &report.runs {
        match r.accuracy {
            Some(acc) => println!("run={} seed={} accuracy={acc}", r.run, r.seed),
            None => println!("run={} seed={} accuracy=failed", r.run, r.seed),
        }
    }
    println!("mean={} std={}", report.mean, report.std);
    for w in report.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(if report.below_quality_gate() { Status::Advisory } else { Status::Ok })
}

fn print_breakdown(per_style: &std::collections::BTreeMap<Style, (usize, f64)>) {
    for (style, (n, acc)) in per_style {
        println!("style={style} n={n} accuracy={acc}");
    }
}

fn evaluate_checkpoint(a: &EvaluateArgs, eval_accuracy: Option<f64>, m: &mut Manifest) -> Result<(EvalReport, Option<String>)> {
    if a.runs != 1 {
        return Err(Error::spec("--runs above 1 needs --retrain; a fixed checkpoint scores identically every time"));
    }
    let model_path = a.model.as_deref().expect("required without --retrain");
    let input = a.input.as_deref().expect("required without --retrain");
    let (model, vocab, max_len) = load_model(model_path, m)?;
    let clf = load_classifier(&a.eval_clf, &vocab, m, "eval-clf")?;
    m.input("input", input)?;
    let lines = read_lines(input)?;
    let styles: Vec<Option<Style>> = match &a.input_labels {
        Some(p) => {
            m.input("input-labels", p)?;
            let labels = read_labels(p)?;
            if labels.len() != lines.len() {
                return Err(Error::format(format!(
                    "{} labels for {} input sentences",
                    labels.len(),
                    lines.len()
                )));
            }
            labels.into_iter().map(Some).collect()
        }
        None => vec![None; lines.len()],
    };
    let seqs: Vec<TokenSeq> = lines
        .iter()
        .map(|l| vocab.encode(l, max_len, Domain::Source))
        .collect::<Result<_>>()?;
    let score = transfer_accuracy(&model, &clf, &seqs, &styles)?;
    print_breakdown(&score.per_style);
    let config_path = beside(model_path, "config");
    let seed = lookup(&config_path, "seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let config_text = std::fs::read(&config_path).unwrap_or_default();
    let report = EvalReport::new(
        vec![RunResult {
            run: 0,
            seed,
            accuracy: Some(score.accuracy),
        }],
        fingerprint(&config_text),
        eval_accuracy,
    );
    Ok((report, Some(sample_dump(&lines, &score.outputs, &vocab))))
}

fn evaluate_retrain(a: &EvaluateArgs, eval_accuracy: Option<f64>, m: &mut Manifest) -> Result<(EvalReport, Option<String>)> {
    let cfg = resolve_config(&a.config, m)?;
    let (source, target, ds_path) = (
        a.source.as_deref().expect("required by --retrain"),
        a.target.as_deref().expect("required by --retrain"),
        a.ds.as_deref().expect("required by --retrain"),
    );
    let corpus = load_corpus(source, target, a.labels.as_deref(), m)?;
    let prep = prepare(&corpus, a.split_seed, a.split_file.as_deref(), cfg.max_len, m)?;
    let ds = load_classifier(ds_path, &prep.vocab, m, "ds")?;
    let clf = load_classifier(&a.eval_clf, &prep.vocab, m, "eval-clf")?;
    let (report, outputs) = run_experiment(&cfg, &prep, &ds, &clf, eval_accuracy, a.runs)?;
    let samples = outputs.first().map(|out| {
        print_breakdown(&out.score.per_style);
        sample_dump(&prep.test_source_text, &out.score.outputs, &prep.vocab)
    });
    Ok((report, samples))
}
