use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndftm::corpus::{self, CorpusBundle, DocRef, Role, SliceSpec, VocabOptions};
use ndftm::evaluation::{
    self, activity_csv, activity_series, entropy_csv, entropy_series, match_topics, predictive_nll,
    propagate_prior, roc_auc, sample_globals, summarize_documents, SeriesPoint, TrainedModel,
};
use ndftm::genmodel::sample_corpus;
use ndftm::rng::stream;
use ndftm::training::{self, RunManifest};
use ndftm::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::truth::GroundTruth;

pub const CORPUS_FILE: &str = "corpus.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const METRICS_LOG: &str = "metrics.jsonl";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or [input] section)")))
}

fn print_corpus_summary(bundle: &CorpusBundle) {
    let c = &bundle.corpus;
    println!("T={} V={} documents={}", c.num_slices(), c.vocab_size(), c.num_documents());
    println!("N_t={:?}", c.slice_sizes());
    if let Some(s) = &bundle.split {
        let total = |r: Role| s.counts(r).iter().sum::<usize>();
        println!(
            "split train={} valid={} test={}",
            total(Role::Train),
            total(Role::Valid),
            total(Role::Test)
        );
    }
}

pub fn ingest(mut cfg: RunConfig) -> Result<()> {
    let path = required(&cfg.input.records, "records file")?.to_path_buf();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records = corpus::parse_records(&text, cfg.input.format).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    let stopwords: BTreeSet<String> = match &cfg.input.stopwords {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
        None => BTreeSet::new(),
    };
    let n = &cfg.ingest;
    let slicing = match &n.boundaries {
        Some(b) => SliceSpec::Boundaries(b.clone()),
        None => SliceSpec::Width {
            width: n.slice_width,
            origin: n.origin,
        },
    };
    let vocab = VocabOptions {
        min_count: n.min_count,
        max_doc_fraction: n.max_doc_fraction,
        stopwords,
    };
    let (seq, report) = corpus::ingest(&records, &slicing, &vocab)?;
    let sp = corpus::split(&seq, cfg.split.fractions, cfg.split.seed)?;
    let bundle = CorpusBundle::new(seq, Some(sp))?;

    let dir = cfg.run_dir("ingest")?;
    cfg.write_effective(&dir)?;
    bundle.save(&dir.join(CORPUS_FILE))?;
    write_json(&dir.join("ingest_report.json"), &report)?;
    if report.dropped_out_of_range + report.dropped_empty > 0 {
        log::info!(
            "dropped {} record(s) outside the slice range and {} left empty by the vocabulary",
            report.dropped_out_of_range,
            report.dropped_empty
        );
    }
    print_corpus_summary(&bundle);
    println!("wrote {}", dir.join(CORPUS_FILE).display());
    Ok(())
}

pub fn split(mut cfg: RunConfig) -> Result<()> {
    let path = required(&cfg.input.corpus, "corpus bundle")?;
    let bundle = CorpusBundle::load(path)?;
    let sp = corpus::split(&bundle.corpus, cfg.split.fractions, cfg.split.seed)?;
    let bundle = CorpusBundle::new(bundle.corpus, Some(sp))?;
    let dir = cfg.run_dir("split")?;
    cfg.write_effective(&dir)?;
    bundle.save(&dir.join(CORPUS_FILE))?;
    print_corpus_summary(&bundle);
    println!("wrote {}", dir.join(CORPUS_FILE).display());
    Ok(())
}

#[derive(Serialize)]
struct DivergenceReport<'a> {
    message: &'a str,
    epochs_completed: usize,
    best_epoch: Option<usize>,
}

pub fn train(mut cfg: RunConfig) -> Result<()> {
    let corpus_path = required(&cfg.input.corpus, "corpus bundle")?.to_path_buf();
    let bundle = CorpusBundle::load(&corpus_path)?;
    let sp = bundle.split()?;
    let v = bundle.corpus.vocab_size();
    match cfg.model.vocab_size {
        0 => cfg.model.vocab_size = v,
        n if n != v => {
            return Err(Error::Config(format!("model vocab_size {n} does not match the corpus vocabulary {v}")))
        }
        _ => {}
    }
    cfg.model.validate()?;
    cfg.train.validate()?;

    let dir = cfg.run_dir("train")?;
    cfg.write_effective(&dir)?;
    let mut manifest = RunManifest::new(cfg.model.clone(), cfg.train.clone(), cfg.hash(), bundle.content_hash()?);
    manifest.corpus_path = Some(std::fs::canonicalize(&corpus_path).unwrap_or(corpus_path));
    manifest.save(&dir)?;

    let log_path = dir.join(METRICS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let every = cfg.train.checkpoint_every;
    let result = training::train(&bundle.corpus, sp, &cfg.model, &cfg.train, &mut |r| {
        for rec in r.records {
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if r.improved {
            manifest.record_checkpoint(&dir, "best", r.epoch, r.store)?;
            manifest.best_epoch = Some(r.epoch);
        }
        if every > 0 && r.epoch % every == 0 {
            manifest.record_checkpoint(&dir, &format!("epoch-{:04}", r.epoch), r.epoch, r.store)?;
        }
        manifest.epochs_completed = r.epoch;
        manifest.save(&dir)
    });
    drop(log);

    let out = match result {
        Ok(out) => out,
        Err(Error::Divergence(msg)) => {
            manifest.save(&dir)?;
            write_json(
                &dir.join("divergence.json"),
                &DivergenceReport {
                    message: &msg,
                    epochs_completed: manifest.epochs_completed,
                    best_epoch: manifest.best_epoch,
                },
            )?;
            return Err(Error::Divergence(msg));
        }
        Err(e) => return Err(e),
    };
    manifest.record_checkpoint(&dir, "last", cfg.train.epochs, &out.last)?;
    if !manifest.checkpoints.contains_key("best") {
        manifest.record_checkpoint(&dir, "best", out.best_epoch, &out.best)?;
        manifest.best_epoch = Some(out.best_epoch);
    }
    manifest.save(&dir)?;

    let last = |split: &str| out.records.iter().rev().find(|r| r.split == split).map(|r| r.elbo.total);
    println!(
        "epochs={} best_epoch={} train_elbo={} valid_elbo={}",
        cfg.train.epochs,
        out.best_epoch,
        fmt_opt(last("train")),
        fmt_opt(last("valid"))
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

/// A trained run together with the corpus it is evaluated on.
struct LoadedRun {
    bundle: CorpusBundle,
    model: TrainedModel,
}

/// Load the run named in `cfg`, defaulting the corpus to the one it was
/// trained on, and refuse corpora or checkpoints whose hashes differ.
fn load_run(cfg: &mut RunConfig) -> Result<LoadedRun> {
    let run = required(&cfg.input.run, "run directory")?.to_path_buf();
    let manifest = RunManifest::load(&run)?;
    if cfg.input.corpus.is_none() {
        cfg.input.corpus = manifest.corpus_path.clone();
    }
    let corpus_path = required(&cfg.input.corpus, "corpus bundle")?;
    let bundle = CorpusBundle::load(corpus_path)?;
    manifest.check_corpus(&bundle.content_hash()?)?;
    let store = manifest.load_checkpoint(&run, &cfg.input.checkpoint)?;
    let model = TrainedModel::new(manifest.hyper.clone(), store)?;
    Ok(LoadedRun { bundle, model })
}

pub fn eval(mut cfg: RunConfig) -> Result<()> {
    cfg.eval.validate()?;
    let run = load_run(&mut cfg)?;
    let report = evaluation::evaluate(&run.model, &run.bundle.corpus, run.bundle.split()?, &cfg.eval)?;
    let dir = cfg.run_dir("eval")?;
    cfg.write_effective(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    if let Some(s) = &report.entropy_series {
        write_text(&dir.join("entropy.csv"), &entropy_csv(s))?;
    }
    if let Some(s) = &report.activity_series {
        write_text(&dir.join("activity.csv"), &activity_csv(s))?;
    }
    println!("{}", report.summary_line());
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ForecastStep {
    /// Slice index past the end of the corpus.
    slice: usize,
    /// Mean prior activity probability per topic.
    activity: Vec<f64>,
}

#[derive(Serialize)]
struct PredictOutput {
    p_nll: evaluation::PredictiveReport,
    forecast: Vec<ForecastStep>,
}

const FORECAST_STREAM: u64 = 0x666f_7265;

pub fn predict(mut cfg: RunConfig) -> Result<()> {
    cfg.eval.validate()?;
    let run = load_run(&mut cfg)?;
    let corpus = &run.bundle.corpus;
    let sp = run.bundle.split()?;
    let (horizon, samples, seed) = (cfg.eval.horizon, cfg.eval.samples, cfg.eval.seed);
    let last = corpus.num_slices() - 1;
    let targets: Vec<DocRef> = sp.docs(Role::Test).into_iter().filter(|d| d.slice == last).collect();
    if targets.is_empty() {
        return Err(Error::Input("the last time slice has no test documents to predict".into()));
    }
    let report = predictive_nll(&run.model, corpus, &targets, horizon, samples, seed)?;

    let (model, k) = (&run.model, run.model.num_topics());
    let mut sums = vec![vec![0.0; k]; horizon];
    for s in 0..samples {
        let mut rng = stream(seed, &[FORECAST_STREAM, s as u64]);
        let path = sample_globals(model, corpus.slice_bow(), Some(&mut rng))?;
        let (mut xi, mut eta) = (path.xi[last].clone(), path.eta[last].clone());
        for row in sums.iter_mut() {
            (xi, eta) = propagate_prior(model, (&xi, &eta), 1, &mut rng)?;
            let pi = model.params.activity(&xi, model.hyper.alpha0)?;
            row.iter_mut().zip(pi).for_each(|(a, p)| *a += p / samples as f64);
        }
    }
    let forecast = sums
        .into_iter()
        .enumerate()
        .map(|(h, activity)| ForecastStep {
            slice: last + 1 + h,
            activity,
        })
        .collect();

    let dir = cfg.run_dir("predict")?;
    cfg.write_effective(&dir)?;
    println!(
        "p_nll={:.4} target_slice={} horizon={} documents={} tokens={}",
        report.p_nll, report.target_slice, report.horizon, report.documents, report.tokens
    );
    write_json(&dir.join("predict.json"), &PredictOutput { p_nll: report, forecast })?;
    println!("wrote {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TopicRecovery {
    true_topic: usize,
    model_topic: usize,
    /// Bhattacharyya coefficient between the two word distributions.
    overlap: f64,
    /// Correlation over slices of inferred activity with the true activity probability.
    activity_correlation: Option<f64>,
}

#[derive(Serialize)]
struct Recovery {
    /// Inferred hard activity scored against true masks on held-out documents.
    mask_auc: Option<f64>,
    mean_overlap: f64,
    mean_activity_correlation: Option<f64>,
    topics: Vec<TopicRecovery>,
}

#[derive(Serialize)]
struct Diagnosis {
    mean_entropy: f64,
    /// Fraction of documents using each topic, over the whole corpus.
    mean_activity: Vec<f64>,
    entropy_series: Vec<SeriesPoint>,
    recovery: Option<Recovery>,
}

pub fn diagnose(mut cfg: RunConfig) -> Result<()> {
    cfg.eval.validate()?;
    let run = load_run(&mut cfg)?;
    let corpus = &run.bundle.corpus;
    let model = &run.model;
    let all: Vec<DocRef> = corpus.doc_refs().collect();
    let summaries = summarize_documents(model, corpus, &all, cfg.eval.samples, cfg.eval.seed)?;
    let t = corpus.num_slices();
    let k = model.num_topics();
    let entropy = entropy_series(&summaries, t);
    let activity = activity_series(&summaries, t, k);
    let mut mean_activity = vec![0.0; k];
    for s in &summaries {
        mean_activity.iter_mut().zip(&s.activity).for_each(|(m, a)| *m += a / summaries.len() as f64);
    }
    let mean_entropy = summaries.iter().map(|s| s.entropy).sum::<f64>() / summaries.len().max(1) as f64;

    let recovery = match &cfg.input.truth {
        Some(p) => {
            let truth = GroundTruth::load(p)?;
            Some(recovery(&truth, &run, &summaries, &activity)?)
        }
        None => None,
    };

    let dir = cfg.run_dir("diagnose")?;
    cfg.write_effective(&dir)?;
    write_text(&dir.join("entropy.csv"), &entropy_csv(&entropy))?;
    write_text(&dir.join("activity.csv"), &activity_csv(&activity))?;
    let mut line = format!("mean_entropy={mean_entropy:.4}");
    if let Some(r) = &recovery {
        line += &format!(
            " mask_auc={} mean_overlap={:.4} activity_correlation={}",
            fmt_opt(r.mask_auc),
            r.mean_overlap,
            fmt_opt(r.mean_activity_correlation)
        );
    }
    write_json(
        &dir.join("diagnose.json"),
        &Diagnosis {
            mean_entropy,
            mean_activity,
            entropy_series: entropy,
            recovery,
        },
    )?;
    println!("{line}");
    println!("wrote {}", dir.display());
    Ok(())
}

fn recovery(
    truth: &GroundTruth,
    run: &LoadedRun,
    summaries: &[evaluation::DocSummary],
    activity: &[Vec<f64>],
) -> Result<Recovery> {
    let corpus = &run.bundle.corpus;
    let sizes: Vec<usize> = truth.latents.docs.iter().map(Vec::len).collect();
    if sizes != corpus.slice_sizes() {
        return Err(Error::Compatibility(format!(
            "ground truth covers slice sizes {sizes:?} but the corpus has {:?}",
            corpus.slice_sizes()
        )));
    }
    let true_beta = truth.beta()?;
    let est_beta = run.model.beta();
    if true_beta.cols() != est_beta.cols() || true_beta.rows() > est_beta.rows() {
        return Err(Error::Compatibility(format!(
            "ground truth has {} topics over {} words; the model has {} over {}",
            true_beta.rows(),
            true_beta.cols(),
            est_beta.rows(),
            est_beta.cols()
        )));
    }
    let mapping = match_topics(&true_beta, &est_beta)?;

    let sp = run.bundle.split()?;
    let held_out = |d: DocRef| sp.role(d) != Role::Train;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for s in summaries.iter().filter(|s| held_out(s.doc)) {
        let b = &truth.latents.docs[s.doc.slice][s.doc.index].b;
        for (i, &j) in mapping.iter().enumerate() {
            scores.push(s.activity[j]);
            labels.push(b[i] > 0.5);
        }
    }

    let topics: Vec<TopicRecovery> = mapping
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let overlap = true_beta
                .row_slice(i)
                .iter()
                .zip(est_beta.row_slice(j))
                .map(|(p, q)| (p * q).sqrt())
                .sum();
            let truth_pi: Vec<f64> = truth.latents.pi.iter().map(|row| row[i]).collect();
            let inferred: Vec<f64> = activity.iter().map(|row| row[j]).collect();
            TopicRecovery {
                true_topic: i,
                model_topic: j,
                overlap,
                activity_correlation: pearson(&truth_pi, &inferred),
            }
        })
        .collect();
    let mean_overlap = topics.iter().map(|t| t.overlap).sum::<f64>() / topics.len() as f64;
    let corrs: Vec<f64> = topics.iter().filter_map(|t| t.activity_correlation).collect();
    Ok(Recovery {
        mask_auc: roc_auc(&scores, &labels),
        mean_overlap,
        mean_activity_correlation: (!corrs.is_empty()).then(|| corrs.iter().sum::<f64>() / corrs.len() as f64),
        topics,
    })
}

/// Sample correlation; `None` when either series is constant.
fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let (mx, my) = (x[..n].iter().sum::<f64>() / n as f64, y[..n].iter().sum::<f64>() / n as f64);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn synth(mut cfg: RunConfig) -> Result<()> {
    if cfg.model.vocab_size == 0 {
        return Err(Error::Config("synthetic corpora need a vocabulary size (--V or [model] vocab_size)".into()));
    }
    let hyper = cfg.model.clone();
    let params = cfg.synth.ground_truth(&hyper)?;
    let (seq, latents) = sample_corpus(&hyper, &params, &cfg.synth)?;
    let sp = corpus::split(&seq, cfg.split.fractions, cfg.split.seed)?;
    let bundle = CorpusBundle::new(seq, Some(sp))?;
    let truth = GroundTruth::new(hyper, cfg.synth.clone(), &params.beta()?, latents);

    let dir = cfg.run_dir("synth")?;
    cfg.write_effective(&dir)?;
    bundle.save(&dir.join(CORPUS_FILE))?;
    truth.save(&dir.join(TRUTH_FILE))?;
    let (mut on, mut total) = (0.0, 0.0);
    for d in truth.latents.docs.iter().flatten() {
        on += d.b.iter().sum::<f64>();
        total += d.b.len() as f64;
    }
    print_corpus_summary(&bundle);
    println!(
        "mean_mask_activity={:.4} forced_masks={}",
        on / total,
        truth.latents.forced_masks
    );
    println!("wrote {}", dir.display());
    Ok(())
}
