//! Fit the full model and the coupled ablation to a skewed synthetic corpus
//! and report mask recovery, completion perplexity and mean entropy.
//!
//! `cargo run --release --example recovery -- [seed] [epochs]`

use std::time::Instant;

use ndftm::corpus::{split, DocRef, Role};
use ndftm::evaluation::{
    entropy_series, match_topics, ppl_document_completion, roc_auc, summarize_documents, TrainedModel,
};
use ndftm::genmodel::{sample_corpus, ModelHyperParams, SynthOptions};
use ndftm::training::{train, TrainConfig};

fn main() -> ndftm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);

    let truth_hyper = ModelHyperParams {
        num_topics: 10,
        vocab_size: 300,
        embedding_dim: 16,
        dim_xi: 4,
        dim_eta: 4,
        alpha0: 0.3,
        ..Default::default()
    };
    let opts = SynthOptions {
        num_slices: 15,
        docs_per_slice: 150,
        tokens_per_doc: 60,
        skew: 2.0,
        seed,
        ..Default::default()
    };
    let truth = opts.ground_truth(&truth_hyper)?;
    let (corpus, latents) = sample_corpus(&truth_hyper, &truth, &opts)?;
    let sp = split(&corpus, [0.8, 0.1, 0.1], seed)?;
    let corpus = corpus.with_training_aggregate(&sp)?;
    let valid = sp.docs(Role::Valid);
    let true_beta = truth.beta()?;

    for coupled in [false, true] {
        let hyper = ModelHyperParams {
            num_topics: 10,
            vocab_size: 300,
            embedding_dim: 16,
            dim_xi: 4,
            dim_eta: 4,
            transition_hidden: 16,
            encoder_hidden: 32,
            posterior_hidden: 64,
            alpha0: 0.3,
            coupled,
            ..Default::default()
        };
        let cfg = TrainConfig {
            epochs,
            seed,
            kl_warmup_epochs: (epochs as f64 / 3.0).min(10.0),
            tau_decay: 3.0 / epochs as f64,
            straight_through: std::env::var("ST").is_ok(),
            learning_rate: std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-3),
            ..Default::default()
        };
        let started = Instant::now();
        let out = train(&corpus, &sp, &hyper, &cfg, &mut |r| {
            let v = r.records.last().unwrap();
            eprintln!("  epoch {} {} total {:.1} kl {:.1}", r.epoch, v.split, v.elbo.total, v.elbo.kl_sum());
            Ok(())
        })?;
        let secs = started.elapsed().as_secs_f64();
        let model = TrainedModel::new(hyper.clone(), out.best)?;
        let ppl = ppl_document_completion(&model, &corpus, &valid, sp.completion_seed, 16, seed)?;
        let all: Vec<DocRef> = corpus.doc_refs().collect();
        let summaries = summarize_documents(&model, &corpus, &all, 16, seed)?;
        let entropy: f64 = {
            let s = entropy_series(&summaries, corpus.num_slices());
            s.iter().map(|p| p.mean).sum::<f64>() / s.len() as f64
        };
        let mut auc = f64::NAN;
        if !coupled {
            let mapping = match_topics(&true_beta, &model.beta())?;
            let (mut scores, mut labels) = (Vec::new(), Vec::new());
            for s in summaries.iter().filter(|s| valid.contains(&s.doc)) {
                let truth_b = &latents.docs[s.doc.slice][s.doc.index].b;
                for (k, &j) in mapping.iter().enumerate() {
                    scores.push(s.activity[j]);
                    labels.push(truth_b[k] == 1.0);
                }
            }
            auc = roc_auc(&scores, &labels).unwrap_or(f64::NAN);
        }
        println!(
            "seed {seed} coupled {coupled}: best epoch {} ppl_dc {:.2} entropy {:.4} auc {:.4} ({secs:.0}s)",
            out.best_epoch, ppl.ppl_dc, entropy, auc
        );
    }
    Ok(())
}
