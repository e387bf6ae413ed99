use ndftm::corpus::{split, CorpusBundle, CorpusSequence, DocRef, Document, Role, Vocabulary};
use ndftm::diffcore::{softmax_in_place, Tensor};
use ndftm::evaluation::topic_diversity;
use ndftm::genmodel::{entropy, topic_proportions};
use ndftm::inference::{hard_bernoulli, relaxed_bernoulli_value};
use ndftm::rng::stream;
use ndftm::training::{kl_bernoulli, kl_gaussian_diag, stratified_batches};
use proptest::prelude::*;

fn mask_and_logits(max_k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_k).prop_flat_map(|k| {
        (
            prop::collection::vec(prop::bool::ANY, k).prop_filter("non-empty mask", |b| b.iter().any(|&x| x)),
            prop::collection::vec(-30.0..30.0f64, k),
        )
            .prop_map(|(b, z)| (b.into_iter().map(|x| if x { 1.0 } else { 0.0 }).collect(), z))
    })
}

fn corpus_strategy() -> impl Strategy<Value = CorpusSequence> {
    (2usize..5, 2usize..12).prop_flat_map(|(t, v)| {
        prop::collection::vec(
            prop::collection::vec(prop::collection::vec((0..v as u32, 1u32..5), 1..6), 0..9),
            t,
        )
        .prop_map(move |slices| {
            let docs = slices
                .into_iter()
                .enumerate()
                .map(|(t, ds)| ds.into_iter().map(|c| Document::new(t, c).unwrap()).collect())
                .collect();
            CorpusSequence::new(Vocabulary::synthetic(v).unwrap(), docs).unwrap()
        })
    })
}

fn plain_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn masked_proportions_live_on_the_mask((b, z) in mask_and_logits(12)) {
        let (theta, uniform) = topic_proportions(&b, &z);
        prop_assert!(!uniform);
        prop_assert!((theta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (t, m) in theta.iter().zip(&b) {
            prop_assert!(*t >= 0.0);
            if *m == 0.0 {
                prop_assert_eq!(*t, 0.0);
            }
        }
    }

    #[test]
    fn masked_proportions_ignore_logit_shifts((b, z) in mask_and_logits(12), c in -50.0..50.0f64) {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let (a, _) = topic_proportions(&b, &z);
        let (s, _) = topic_proportions(&b, &shifted);
        for (x, y) in a.iter().zip(&s) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn coupled_proportions_are_plain_softmax(z in prop::collection::vec(-30.0..30.0f64, 2..15)) {
        let want = plain_softmax(&z);
        let mut coupled = z.clone();
        softmax_in_place(&mut coupled);
        // a full mask differs only through the denominator guard
        let (masked, _) = topic_proportions(&vec![1.0; z.len()], &z);
        for ((c, w), m) in coupled.iter().zip(&want).zip(&masked) {
            prop_assert!((c - w).abs() < 1e-12);
            prop_assert!((m - w).abs() <= ndftm::genmodel::THETA_EPS * w + 1e-15);
        }
    }

    #[test]
    fn entropy_is_bounded_by_log_k((b, z) in mask_and_logits(20)) {
        let (theta, _) = topic_proportions(&b, &z);
        let h = entropy(&theta);
        let active = b.iter().filter(|&&x| x > 0.0).count() as f64;
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= active.ln() + 1e-9);
        prop_assert!(h <= (b.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn kl_terms_are_non_negative(
        dims in prop::collection::vec((-5.0..5.0f64, 0.01..10.0f64, -5.0..5.0f64, 0.01..10.0f64), 1..8),
        probs in prop::collection::vec((1e-6..1.0 - 1e-6f64, 1e-6..1.0 - 1e-6f64), 1..8),
    ) {
        let mq: Vec<f64> = dims.iter().map(|d| d.0).collect();
        let vq: Vec<f64> = dims.iter().map(|d| d.1).collect();
        let mp: Vec<f64> = dims.iter().map(|d| d.2).collect();
        let vp: Vec<f64> = dims.iter().map(|d| d.3).collect();
        prop_assert!(kl_gaussian_diag(&mq, &vq, &mp, &vp) >= -1e-9);
        prop_assert!(kl_gaussian_diag(&mq, &vq, &mq, &vq).abs() < 1e-12);
        let q: Vec<f64> = probs.iter().map(|p| p.0).collect();
        let p: Vec<f64> = probs.iter().map(|p| p.1).collect();
        prop_assert!(kl_bernoulli(&q, &p) >= -1e-9);
        prop_assert!(kl_bernoulli(&q, &q).abs() < 1e-12);
    }

    #[test]
    fn topic_diversity_stays_in_range(k in 2usize..8, v in 5usize..40, seed in any::<u64>(), n in 1usize..6) {
        let n = n.min(v);
        let mut rng = stream(seed, &[]);
        let logits: Vec<f64> = ndftm::rng::normals(&mut rng, k * v);
        let mut beta = Tensor::matrix(k, v, logits).unwrap();
        for r in 0..k {
            softmax_in_place(beta.row_slice_mut(r));
        }
        let td = topic_diversity(&beta, n).unwrap();
        prop_assert!(td >= 1.0 / k as f64 - 1e-12 && td <= 1.0 + 1e-12, "{}", td);
    }

    #[test]
    fn concrete_rounds_to_a_bernoulli_draw(q in 1e-4..1.0 - 1e-4f64, u in 1e-6..1.0 - 1e-6f64, tau in 0.05..5.0f64) {
        let x = relaxed_bernoulli_value(q, tau, u);
        prop_assert!((0.0..=1.0).contains(&x));
        // the relaxed sample exceeds one half exactly when u > 1 - q, which
        // has the same probability as the hard draw 1[u < q]
        if (u - (1.0 - q)).abs() > 1e-9 {
            prop_assert_eq!(x > 0.5, u > 1.0 - q);
            prop_assert_eq!(hard_bernoulli(q, 1.0 - u), if x > 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn split_assigns_every_document_once(corpus in corpus_strategy(), seed in any::<u64>()) {
        let sp = split(&corpus, [0.6, 0.2, 0.2], seed).unwrap();
        prop_assert!(sp.check_matches(&corpus).is_ok());
        let mut all: Vec<DocRef> = [Role::Train, Role::Valid, Role::Test]
            .iter()
            .flat_map(|&r| sp.docs(r))
            .collect();
        all.sort();
        let refs: Vec<DocRef> = corpus.doc_refs().collect();
        prop_assert_eq!(all, refs);
        prop_assert_eq!(split(&corpus, [0.6, 0.2, 0.2], seed).unwrap(), sp);
    }

    #[test]
    fn bundles_round_trip(corpus in corpus_strategy(), seed in any::<u64>()) {
        let sp = split(&corpus, [0.8, 0.1, 0.1], seed).unwrap();
        let bundle = CorpusBundle::new(corpus, Some(sp)).unwrap();
        let text = bundle.to_json().unwrap();
        let back = CorpusBundle::from_json(&text, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), text);
        prop_assert_eq!(back, bundle);
    }

    #[test]
    fn minibatches_partition_the_training_documents(
        sizes in prop::collection::vec(0usize..30, 2..6),
        batch in 1usize..20,
        seed in any::<u64>(),
    ) {
        let by_slice: Vec<Vec<DocRef>> = sizes
            .iter()
            .enumerate()
            .map(|(slice, &n)| (0..n).map(|index| DocRef { slice, index }).collect())
            .collect();
        let batches = stratified_batches(&by_slice, batch, &mut stream(seed, &[]));
        let mut seen: Vec<DocRef> = batches.iter().flat_map(|b| b.docs.clone()).collect();
        seen.sort();
        let mut want: Vec<DocRef> = by_slice.concat();
        want.sort();
        prop_assert_eq!(seen, want);
        for b in &batches {
            prop_assert_eq!(b.docs.len(), b.weights.len());
            prop_assert!(b.weights.iter().all(|w| *w >= 1.0));
        }
    }
}
