use super::*;
use crate::corpus::{split, Document, Vocabulary};
use crate::diffcore::Tensor;
use crate::genmodel::{entropy, names, sample_corpus, ModelHyperParams, SynthOptions};
use crate::rng::stream;
use crate::training::init_parameters;

fn hyper() -> ModelHyperParams {
    ModelHyperParams {
        num_topics: 4,
        vocab_size: 25,
        embedding_dim: 3,
        dim_xi: 2,
        dim_eta: 2,
        transition_hidden: 3,
        encoder_hidden: 4,
        posterior_hidden: 6,
        ..Default::default()
    }
}

fn setup(h: &ModelHyperParams) -> (CorpusSequence, SplitSpec, TrainedModel) {
    let opts = SynthOptions {
        num_slices: 4,
        docs_per_slice: 12,
        tokens_per_doc: 20,
        seed: 3,
        ..Default::default()
    };
    let truth_h = ModelHyperParams { coupled: false, linear_transition: false, ..h.clone() };
    let (corpus, _) = sample_corpus(&truth_h, &opts.ground_truth(&truth_h).unwrap(), &opts).unwrap();
    let sp = split(&corpus, [0.5, 0.25, 0.25], 1).unwrap();
    let corpus = corpus.with_training_aggregate(&sp).unwrap();
    let model = TrainedModel::new(h.clone(), init_parameters(h, 2).unwrap()).unwrap();
    (corpus, sp, model)
}

#[test]
fn uniform_predictive_gives_vocabulary_size() {
    let h = hyper();
    let (corpus, sp, mut model) = setup(&h);
    let shape = model.store.get(names::ALPHA).unwrap().shape().to_vec();
    model.store.set(names::ALPHA, Tensor::zeros(&shape)).unwrap();
    let model = TrainedModel::new(h.clone(), model.store).unwrap();
    let r = ppl_document_completion(&model, &corpus, &sp.docs(Role::Test), sp.completion_seed, 4, 0).unwrap();
    assert!((r.ppl_dc / 25.0 - 1.0).abs() < 1e-3, "{r:?}");
    assert_eq!(r.excluded, 0);
    let all: Vec<DocRef> = corpus.doc_refs().collect();
    let r = ppl_document_completion(&model, &corpus, &all, 9, 1, 5).unwrap();
    assert!((r.ppl_dc / 25.0 - 1.0).abs() < 1e-3);
}

#[test]
fn concentrated_predictive_approaches_one() {
    let h = ModelHyperParams { vocab_size: 2, embedding_dim: 1, ..hyper() };
    let docs = |t: usize| (0..4).map(|_| Document::new(t, [(0, 6)]).unwrap()).collect::<Vec<_>>();
    let corpus = CorpusSequence::new(Vocabulary::synthetic(2).unwrap(), vec![docs(0), docs(1)]).unwrap();
    let mut store = init_parameters(&h, 1).unwrap();
    store.set(names::ALPHA, Tensor::filled(&[4, 1], 10.0)).unwrap();
    store.set(names::RHO, Tensor::matrix(2, 1, vec![10.0, -10.0]).unwrap()).unwrap();
    let model = TrainedModel::new(h, store).unwrap();
    let all: Vec<DocRef> = corpus.doc_refs().collect();
    let r = ppl_document_completion(&model, &corpus, &all, 0, 2, 0).unwrap();
    assert!(r.ppl_dc >= 1.0 && r.ppl_dc < 1.0 + 1e-9, "{}", r.ppl_dc);
}

#[test]
fn short_documents_are_excluded_from_completion() {
    let h = ModelHyperParams { vocab_size: 3, ..hyper() };
    let slice = |t: usize| vec![Document::new(t, [(0, 1)]).unwrap(), Document::new(t, [(1, 2), (2, 1)]).unwrap()];
    let corpus = CorpusSequence::new(Vocabulary::synthetic(3).unwrap(), vec![slice(0), slice(1)]).unwrap();
    let model = TrainedModel::new(h.clone(), init_parameters(&h, 0).unwrap()).unwrap();
    let all: Vec<DocRef> = corpus.doc_refs().collect();
    let r = ppl_document_completion(&model, &corpus, &all, 0, 1, 0).unwrap();
    assert_eq!((r.documents, r.excluded, r.tokens), (2, 2, 2));
}

#[test]
fn zero_noise_identity_propagation_copies_state() {
    let h = ModelHyperParams { linear_transition: true, delta: 1e-40, ..hyper() };
    let model = TrainedModel::new(h.clone(), init_parameters(&h, 0).unwrap()).unwrap();
    let (xi, eta) = (vec![0.3, -1.2], vec![0.7, 0.05]);
    let (nx, ne) = propagate_prior(&model, (&xi, &eta), 1, &mut stream(1, &[])).unwrap();
    assert_eq!((nx, ne), (xi, eta));
}

#[test]
fn predictive_nll_is_seeded_and_tightens_with_particles() {
    let h = hyper();
    let (corpus, sp, model) = setup(&h);
    let last: Vec<DocRef> = sp.docs(Role::Test).into_iter().filter(|d| d.slice == 3).collect();
    let a = predictive_nll(&model, &corpus, &last, 1, 4, 11).unwrap();
    let b = predictive_nll(&model, &corpus, &last, 1, 4, 11).unwrap();
    assert_eq!(a, b);
    assert!(a.p_nll > 0.0 && a.p_nll.is_finite());
    let spread = |s: usize| {
        let xs: Vec<f64> = (0..8)
            .map(|seed| predictive_nll(&model, &corpus, &last, 1, s, seed).unwrap().p_nll)
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    assert!(spread(64) < spread(1));
    let two = predictive_nll(&model, &corpus, &last, 2, 2, 0).unwrap();
    assert_eq!(two.horizon, 2);
    assert!(matches!(predictive_nll(&model, &corpus, &last, 4, 2, 0), Err(Error::Config(_))));
    assert!(matches!(predictive_nll(&model, &corpus, &last, 1, 0, 0), Err(Error::Config(_))));
}

fn docs_from(sets: &[&[u32]]) -> Vec<Document> {
    sets.iter().map(|ws| Document::new(0, ws.iter().map(|&w| (w, 1))).unwrap()).collect()
}

#[test]
fn npmi_limits() {
    let mut sets: Vec<&[u32]> = Vec::new();
    for i in 0..400 {
        sets.push(match i % 4 {
            0 => &[0, 1, 2, 3],
            1 => &[2],
            2 => &[3],
            _ => &[4],
        });
    }
    let docs = docs_from(&sets);
    let stats = CooccurrenceStats::new(&docs, 6);
    assert!((stats.npmi(0, 1) - 1.0).abs() < 1e-2);
    // P(2) = P(3) = 1/2 and P(2, 3) = 1/4.
    assert!(stats.npmi(2, 3).abs() < 1e-2, "{}", stats.npmi(2, 3));
    assert_eq!(stats.npmi(0, 4), -1.0);
    assert_eq!(stats.npmi(5, 0), -1.0);
    for a in 0..6 {
        for b in 0..6 {
            let j = stats.joint_frequency(a, b);
            assert!(j <= stats.doc_frequency(a).min(stats.doc_frequency(b)));
            assert!((-1.0..=1.0).contains(&stats.npmi(a, b)));
        }
    }
}

#[test]
fn coherence_prefers_cooccurring_top_words() {
    let docs = docs_from(&[&[0, 1], &[0, 1], &[2, 3], &[2, 3], &[0, 2]]);
    let stats = CooccurrenceStats::new(&docs, 4);
    let good = Tensor::matrix(2, 4, vec![0.4, 0.4, 0.1, 0.1, 0.1, 0.1, 0.4, 0.4]).unwrap();
    let bad = Tensor::matrix(2, 4, vec![0.4, 0.1, 0.1, 0.4, 0.1, 0.4, 0.4, 0.1]).unwrap();
    let (g, b) = (topic_coherence(&good, &stats, 2).unwrap(), topic_coherence(&bad, &stats, 2).unwrap());
    assert!(g > b && (-1.0..=1.0).contains(&g) && (-1.0..=1.0).contains(&b));
    assert_eq!(b, -1.0);
}

#[test]
fn diversity_bounds() {
    let same = Tensor::from_rows(&vec![(0..30).map(|w| w as f64).collect::<Vec<_>>(); 5]).unwrap();
    assert_eq!(topic_diversity(&same, 25).unwrap(), 1.0 / 5.0);
    let mut rows = vec![vec![0.0; 125]; 5];
    for (k, row) in rows.iter_mut().enumerate() {
        for w in 0..25 {
            row[k * 25 + w] = 1.0;
        }
    }
    assert_eq!(topic_diversity(&Tensor::from_rows(&rows).unwrap(), 25).unwrap(), 1.0);
    assert!(topic_diversity(&same, 31).is_err());
}

#[test]
fn top_word_ordering() {
    let beta = Tensor::matrix(2, 4, vec![0.25; 4].into_iter().chain([0.1, 0.4, 0.1, 0.4]).collect()).unwrap();
    let lists = top_words(&beta, 3).unwrap();
    assert_eq!(lists[0].iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(lists[1].iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 3, 0]);
    let full = top_words(&beta, 4).unwrap();
    for l in &full {
        let mut ids: Vec<u32> = l.iter().map(|p| p.0).collect();
        assert!(l.windows(2).all(|w| w[0].1 >= w[1].1));
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }
}

#[test]
fn entropy_reference_values() {
    assert!((entropy(&[1.0 / 50.0; 50]) - 3.912).abs() < 5e-4);
    assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
}

#[test]
fn series_bounds_and_coupled_activity() {
    for coupled in [false, true] {
        let h = ModelHyperParams { coupled, ..hyper() };
        let (corpus, sp, model) = setup(&h);
        let opts = EvalOptions { samples: 3, td_top_n: 5, ..Default::default() };
        let r = evaluate(&model, &corpus, &sp, &opts).unwrap();
        let act = r.activity_series.unwrap();
        assert_eq!(act.len(), 4);
        assert!(act.iter().flatten().all(|&a| (0.0..=1.0).contains(&a)));
        if coupled {
            assert!(act.iter().flatten().all(|&a| a == 1.0));
        }
        for p in r.entropy_series.unwrap() {
            assert!(p.mean <= (4f64).ln() + 1e-9 && p.mean >= 0.0 && p.documents == 12);
        }
        let td = r.td.unwrap();
        assert!((0.25..=1.0).contains(&td));
        assert!((-1.0..=1.0).contains(&r.tc.unwrap()));
        assert!(r.ppl_dc.unwrap() > 1.0 && r.p_nll.unwrap() > 0.0);
        assert_eq!(r.top_words.unwrap()[0].len(), 10);
    }
}

#[test]
fn hard_mask_entropy_is_bounded_by_support() {
    let post = DocPosterior {
        zeta_mean: vec![0.1, -0.3, 2.0, 0.5, 0.0],
        zeta_var: vec![1.0; 5],
        q: Some(vec![0.5, 0.9, 0.2, 0.6, 0.3]),
    };
    let mut rng = stream(4, &[]);
    for _ in 0..500 {
        let (theta, b) = draw_theta(&post, &mut rng);
        let active = b.iter().filter(|&&x| x == 1.0).count();
        let bound = if active == 0 { (5f64).ln() } else { (active as f64).ln() };
        assert!(entropy(&theta) <= bound + 1e-9);
    }
}

#[test]
fn metric_selection_and_determinism() {
    let h = hyper();
    let (corpus, sp, model) = setup(&h);
    let opts = EvalOptions {
        metrics: vec!["tc".parse().unwrap(), "td".parse().unwrap()],
        td_top_n: 5,
        ..Default::default()
    };
    let r = evaluate(&model, &corpus, &sp, &opts).unwrap();
    assert!(r.tc.is_some() && r.td.is_some());
    assert!(r.ppl_dc.is_none() && r.p_nll.is_none() && r.entropy_series.is_none() && r.top_words.is_none());
    let full = EvalOptions { samples: 2, td_top_n: 5, ..Default::default() };
    assert_eq!(
        evaluate(&model, &corpus, &sp, &full).unwrap(),
        evaluate(&model, &corpus, &sp, &full).unwrap()
    );
    assert!("perplexity".parse::<Metric>().is_err());
}

#[test]
fn auc_and_matching() {
    assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, true, false, true]), Some(1.0));
    assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]), Some(0.0));
    assert_eq!(roc_auc(&[0.5, 0.5, 0.5], &[true, false, true]), Some(0.5));
    assert_eq!(roc_auc(&[0.2, 0.3], &[true, true]), None);
    // Oracle: fraction of (positive, negative) pairs ordered correctly.
    let scores = [0.3, 0.7, 0.7, 0.1, 0.9, 0.5];
    let labels = [true, false, true, false, true, false];
    let mut wins = 0.0;
    for i in 0..6 {
        for j in 0..6 {
            if labels[i] && !labels[j] {
                wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    assert!((roc_auc(&scores, &labels).unwrap() - wins / 9.0).abs() < 1e-15);

    let reference = Tensor::matrix(3, 3, vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8]).unwrap();
    let estimate = Tensor::matrix(3, 3, vec![0.1, 0.1, 0.8, 0.7, 0.2, 0.1, 0.2, 0.7, 0.1]).unwrap();
    assert_eq!(match_topics(&reference, &estimate).unwrap(), vec![1, 2, 0]);
}

#[test]
fn series_csv_layout() {
    let e = entropy_csv(&[SeriesPoint { t: 0, documents: 2, mean: 1.5, std: 0.25 }]);
    assert_eq!(e, "t,statistic,value\n0,mean,1.5\n0,std,0.25\n");
    assert_eq!(activity_csv(&[vec![0.5, 1.0]]), "t,topic,value\n0,0,0.5\n0,1,1\n");
}
