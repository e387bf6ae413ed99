//! Measurements of a fitted model: completion perplexity, predictive
//! log-likelihood, topic coherence and diversity, and per-slice entropy and
//! activity series.

mod infer;
mod perplexity;
mod topics;

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use infer::{
    doc_posteriors, draw_theta, propagate_prior, sample_globals, summarize_documents, DocPosterior, DocSummary,
    GlobalPath, TrainedModel,
};
pub use perplexity::{ppl_document_completion, predictive_nll, CompletionReport, PredictiveReport};
pub use topics::{
    activity_series, entropy_series, match_topics, roc_auc, top_words, topic_coherence, topic_diversity,
    CooccurrenceStats, SeriesPoint,
};

use crate::corpus::{CorpusSequence, DocRef, Role, SplitSpec};
use crate::error::{Error, Result};

/// Run `f` for `0..n`, in parallel when the `parallel` feature is on.
/// Results keep index order either way.
pub(crate) fn map_indices<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Cap the worker threads used by evaluation. Has no effect without the
/// `parallel` feature or after the pool has started.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("could not size the worker pool: {e}");
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PplDc,
    PNll,
    Tc,
    Td,
    Entropy,
    Activity,
    TopWords,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::PplDc,
        Metric::PNll,
        Metric::Tc,
        Metric::Td,
        Metric::Entropy,
        Metric::Activity,
        Metric::TopWords,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::PplDc => "ppl_dc",
            Metric::PNll => "p_nll",
            Metric::Tc => "tc",
            Metric::Td => "td",
            Metric::Entropy => "entropy",
            Metric::Activity => "activity",
            Metric::TopWords => "top_words",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown metric {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Posterior draws for completion perplexity and the series; particles for P-NLL.
    pub samples: usize,
    pub tc_top_n: usize,
    pub td_top_n: usize,
    /// Length of the reported top-word lists.
    pub top_words: usize,
    /// Slices predicted ahead by P-NLL.
    pub horizon: usize,
    pub seed: u64,
    pub metrics: Vec<Metric>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 16,
            tc_top_n: 10,
            td_top_n: 25,
            top_words: 10,
            horizon: 1,
            seed: 0,
            metrics: Metric::ALL.to_vec(),
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.horizon == 0 {
            return Err(Error::Config("samples and horizon must be at least 1".into()));
        }
        if self.tc_top_n < 2 || self.td_top_n == 0 || self.top_words == 0 {
            return Err(Error::Config("tc_top_n must be at least 2, td_top_n and top_words at least 1".into()));
        }
        Ok(())
    }

    fn wants(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    pub word: String,
    pub weight: f64,
}

/// Requested metrics; the rest stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ppl_dc: Option<f64>,
    pub ppl_dc_detail: Option<CompletionReport>,
    pub p_nll: Option<f64>,
    pub p_nll_detail: Option<PredictiveReport>,
    pub tc: Option<f64>,
    pub td: Option<f64>,
    pub entropy_series: Option<Vec<SeriesPoint>>,
    pub activity_series: Option<Vec<Vec<f64>>>,
    pub top_words: Option<Vec<Vec<WordWeight>>>,
}

impl MetricReport {
    /// `ppl_dc=.. p_nll=..` for the metrics present.
    pub fn summary_line(&self) -> String {
        let mut parts = Vec::new();
        for (name, v) in [
            ("ppl_dc", self.ppl_dc),
            ("p_nll", self.p_nll),
            ("tc", self.tc),
            ("td", self.td),
        ] {
            if let Some(v) = v {
                parts.push(format!("{name}={v:.4}"));
            }
        }
        if let Some(e) = &self.entropy_series {
            let mean = e.iter().map(|p| p.mean).sum::<f64>() / e.len().max(1) as f64;
            parts.push(format!("mean_entropy={mean:.4}"));
        }
        parts.join(" ")
    }
}

/// Compute the requested metrics. Completion perplexity uses the test
/// documents; P-NLL the test documents of the last slice; coherence the
/// training documents; the series every document of the corpus.
pub fn evaluate(model: &TrainedModel, corpus: &CorpusSequence, split: &SplitSpec, opts: &EvalOptions) -> Result<MetricReport> {
    opts.validate()?;
    split.check_matches(corpus)?;
    if corpus.vocab_size() != model.hyper.vocab_size {
        return Err(Error::Compatibility(format!(
            "model vocabulary {} does not match corpus vocabulary {}",
            model.hyper.vocab_size,
            corpus.vocab_size()
        )));
    }
    let mut report = MetricReport::default();
    let test = split.docs(Role::Test);
    if opts.wants(Metric::PplDc) {
        if test.is_empty() {
            return Err(Error::Input("split has no test documents for completion perplexity".into()));
        }
        let r = ppl_document_completion(model, corpus, &test, split.completion_seed, opts.samples, opts.seed)?;
        report.ppl_dc = Some(r.ppl_dc);
        report.ppl_dc_detail = Some(r);
    }
    if opts.wants(Metric::PNll) {
        let last = corpus.num_slices() - 1;
        let targets: Vec<DocRef> = test.iter().copied().filter(|d| d.slice == last).collect();
        if targets.is_empty() {
            return Err(Error::Input("the last time slice has no test documents to predict".into()));
        }
        let r = predictive_nll(model, corpus, &targets, opts.horizon, opts.samples, opts.seed)?;
        report.p_nll = Some(r.p_nll);
        report.p_nll_detail = Some(r);
    }
    let beta = model.beta();
    if opts.wants(Metric::Tc) {
        let train = split.docs(Role::Train);
        let stats = CooccurrenceStats::new(train.iter().map(|&d| corpus.doc(d)), corpus.vocab_size());
        report.tc = Some(topic_coherence(&beta, &stats, opts.tc_top_n)?);
    }
    if opts.wants(Metric::Td) {
        report.td = Some(topic_diversity(&beta, opts.td_top_n)?);
    }
    if opts.wants(Metric::Entropy) || opts.wants(Metric::Activity) {
        let all: Vec<DocRef> = corpus.doc_refs().collect();
        let summaries = summarize_documents(model, corpus, &all, opts.samples, opts.seed)?;
        if opts.wants(Metric::Entropy) {
            report.entropy_series = Some(entropy_series(&summaries, corpus.num_slices()));
        }
        if opts.wants(Metric::Activity) {
            report.activity_series = Some(activity_series(&summaries, corpus.num_slices(), model.num_topics()));
        }
    }
    if opts.wants(Metric::TopWords) {
        let vocab = corpus.vocabulary();
        let lists = top_words(&beta, opts.top_words.min(corpus.vocab_size()))?;
        report.top_words = Some(
            lists
                .into_iter()
                .map(|l| {
                    l.into_iter()
                        .map(|(w, weight)| WordWeight {
                            word: vocab.token(w).unwrap_or_default().to_owned(),
                            weight,
                        })
                        .collect()
                })
                .collect(),
        );
    }
    Ok(report)
}

/// `t,statistic,value` rows with `mean` and `std` per slice.
pub fn entropy_csv(series: &[SeriesPoint]) -> String {
    let mut out = String::from("t,statistic,value\n");
    for p in series {
        let _ = writeln!(out, "{},mean,{}", p.t, p.mean);
        let _ = writeln!(out, "{},std,{}", p.t, p.std);
    }
    out
}

/// `t,topic,value` rows.
pub fn activity_csv(series: &[Vec<f64>]) -> String {
    let mut out = String::from("t,topic,value\n");
    for (t, row) in series.iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{t},{k},{v}");
        }
    }
    out
}

#[cfg(test)]
mod tests;
