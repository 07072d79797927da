//! One desk-scale run on the default synthetic corpus, with timings.
//!
//! Usage: `cargo run --release -p lstx-core --example desk_run -- [key=value ...]`
//! Keys are training config keys plus `target_limit`, `runs`, `clf_epochs`.

use std::time::Instant;

use lstx::corpus::{gen_synthetic, SplitSpec, StyleMix};
use lstx::evaluation::{pretrain_ds, run_experiment, train_eval_classifier, Corpus, Prepared};
use lstx::model::{ClassifierConfig, ClassifierDims};
use lstx::training::{metrics_csv, TrainConfig};

fn main() -> lstx::Result<()> {
    let mut cfg = TrainConfig::desk();
    let mut target_limit = None;
    let mut runs = 1;
    let mut clf_cfg = ClassifierConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k {
            "target_limit" => target_limit = Some(v.parse().unwrap()),
            "runs" => runs = v.parse().unwrap(),
            "clf_epochs" => clf_cfg.epochs = v.parse().unwrap(),
            _ => cfg.set(k, v)?,
        }
    }
    let t0 = Instant::now();
    let synth = gen_synthetic(0, 5000, 5000, &StyleMix::new(0.3, 0.7, 0.0)?)?;
    let corpus = Corpus {
        source: synth.source,
        target: synth.target,
        source_styles: Some(synth.source_labels),
    };
    let mut prep = Prepared::new(&corpus, &SplitSpec::default(), 0, cfg.max_len)?;
    if let Some(n) = target_limit {
        prep.limit_target(n);
    }
    println!(
        "vocab={} transfer source={} target={} test={}",
        prep.vocab.len(),
        prep.transfer.source.len(),
        prep.transfer.target.len(),
        prep.test_source.len()
    );
    let dims = ClassifierDims::desk(prep.vocab.len());
    let ds = pretrain_ds(&prep, dims.clone(), &clf_cfg)?;
    let eval = train_eval_classifier(&prep, dims, &ClassifierConfig { seed: 1, ..clf_cfg })?;
    println!(
        "ds acc={:.4} eval acc={:.4} ({:.1}s)",
        ds.test_accuracy,
        eval.test_accuracy,
        t0.elapsed().as_secs_f64()
    );
    let t1 = Instant::now();
    let (report, outputs) = run_experiment(&cfg, &prep, &ds.classifier, &eval.classifier, Some(eval.test_accuracy), runs)?;
    for out in &outputs {
        print!("{}", metrics_csv(&out.outcome.metrics));
        println!(
            "seed={} best_epoch={} acc={:.4} per_style={:?}",
            out.seed, out.outcome.best_epoch, out.score.accuracy, out.score.per_style
        );
    }
    print!("{}", report.to_csv());
    println!("train time {:.1}s", t1.elapsed().as_secs_f64());
    if let Some(out) = outputs.first() {
        for (s, o) in prep.test_source_text.iter().zip(&out.score.outputs).take(8) {
            println!("{s}\t{}", prep.vocab.decode(o));
        }
    }
    Ok(())
}
