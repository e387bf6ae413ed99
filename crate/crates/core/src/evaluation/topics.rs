use serde::{Deserialize, Serialize};

use super::infer::DocSummary;
use crate::corpus::Document;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Document frequencies over a reference collection, kept as per-word
/// posting lists so pair counts come from list intersection.
#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceStats {
    postings: Vec<Vec<u32>>,
    num_docs: usize,
}

impl CooccurrenceStats {
    pub fn new<'a>(docs: impl IntoIterator<Item = &'a Document>, vocab_size: usize) -> Self {
        let mut postings = vec![Vec::new(); vocab_size];
        let mut num_docs = 0u32;
        for d in docs {
            for &(w, _) in d.counts() {
                postings[w as usize].push(num_docs);
            }
            num_docs += 1;
        }
        Self {
            postings,
            num_docs: num_docs as usize,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn doc_frequency(&self, w: u32) -> usize {
        self.postings[w as usize].len()
    }

    pub fn joint_frequency(&self, a: u32, b: u32) -> usize {
        let (x, y) = (&self.postings[a as usize], &self.postings[b as usize]);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// Normalized PMI from document frequencies with `1/D` added to the
    /// joint probability. Pairs that never co-occur score -1; the result is
    /// clipped to `[-1, 1]`.
    pub fn npmi(&self, a: u32, b: u32) -> f64 {
        let d = self.num_docs as f64;
        let joint = self.joint_frequency(a, b);
        if joint == 0 {
            return -1.0;
        }
        let eps = 1.0 / d;
        let pj = joint as f64 / d + eps;
        if pj >= 1.0 {
            return 1.0;
        }
        let pa = self.doc_frequency(a) as f64 / d;
        let pb = self.doc_frequency(b) as f64 / d;
        ((pj / (pa * pb)).ln() / -pj.ln()).clamp(-1.0, 1.0)
    }
}

/// Per topic, the `n` most probable word ids with their weights; ties go to
/// the smaller id.
pub fn top_words(beta: &Tensor, n: usize) -> Result<Vec<Vec<(u32, f64)>>> {
    if n > beta.cols() {
        return Err(Error::Config(format!(
            "top-{n} list requested from a vocabulary of {}",
            beta.cols()
        )));
    }
    Ok((0..beta.rows())
        .map(|k| {
            let row = beta.row_slice(k);
            let mut ids: Vec<u32> = (0..row.len() as u32).collect();
            ids.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
            ids.into_iter().take(n).map(|w| (w, row[w as usize])).collect()
        })
        .collect())
}

/// Mean over topics of the mean NPMI over pairs of each topic's top words.
pub fn topic_coherence(beta: &Tensor, stats: &CooccurrenceStats, top_n: usize) -> Result<f64> {
    if stats.num_docs() == 0 {
        return Err(Error::Input("coherence needs at least one reference document".into()));
    }
    if top_n < 2 {
        return Err(Error::Config("coherence needs at least 2 top words".into()));
    }
    let lists = top_words(beta, top_n)?;
    let per_topic: Vec<f64> = lists
        .iter()
        .map(|list| {
            let mut sum = 0.0;
            let mut pairs = 0;
            for i in 0..list.len() {
                for j in i + 1..list.len() {
                    sum += stats.npmi(list[i].0, list[j].0);
                    pairs += 1;
                }
            }
            sum / pairs as f64
        })
        .collect();
    Ok(per_topic.iter().sum::<f64>() / per_topic.len() as f64)
}

/// Share of distinct words among all topics' top-`top_n` lists.
pub fn topic_diversity(beta: &Tensor, top_n: usize) -> Result<f64> {
    if top_n == 0 {
        return Err(Error::Config("diversity needs at least one top word".into()));
    }
    let lists = top_words(beta, top_n)?;
    let mut seen = vec![false; beta.cols()];
    let mut unique = 0;
    for &(w, _) in lists.iter().flatten() {
        if !std::mem::replace(&mut seen[w as usize], true) {
            unique += 1;
        }
    }
    Ok(unique as f64 / (top_n * beta.rows()) as f64)
}

/// Mean and standard deviation of a per-document statistic in one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub t: usize,
    pub documents: usize,
    /// Zero for slices without documents.
    pub mean: f64,
    pub std: f64,
}

/// Per-slice mean and population standard deviation of proportion entropy.
pub fn entropy_series(summaries: &[DocSummary], num_slices: usize) -> Vec<SeriesPoint> {
    let mut buckets = vec![Vec::new(); num_slices];
    for s in summaries {
        buckets[s.doc.slice].push(s.entropy);
    }
    buckets
        .iter()
        .enumerate()
        .map(|(t, xs)| {
            let n = xs.len();
            let mean = if n == 0 { 0.0 } else { xs.iter().sum::<f64>() / n as f64 };
            let var = if n == 0 {
                0.0
            } else {
                xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64
            };
            SeriesPoint {
                t,
                documents: n,
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// `T x K` mean hard activity per slice; zero rows for empty slices.
pub fn activity_series(summaries: &[DocSummary], num_slices: usize, num_topics: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; num_topics]; num_slices];
    let mut counts = vec![0usize; num_slices];
    for s in summaries {
        counts[s.doc.slice] += 1;
        for (acc, a) in sums[s.doc.slice].iter_mut().zip(&s.activity) {
            *acc += a;
        }
    }
    for (row, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            row.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    sums
}

/// Assignment of reference topics to estimated topics maximizing the total
/// Bhattacharyya coefficient between their word distributions:
/// `out[i]` is the estimated topic paired with reference topic `i`.
pub fn match_topics(reference: &Tensor, estimate: &Tensor) -> Result<Vec<usize>> {
    if reference.cols() != estimate.cols() || reference.rows() > estimate.rows() {
        return Err(Error::shape("match_topics", &[reference.shape(), estimate.shape()]));
    }
    let scale = 1e9;
    let weights: Vec<Vec<i64>> = (0..reference.rows())
        .map(|i| {
            (0..estimate.rows())
                .map(|j| {
                    let bc: f64 = reference
                        .row_slice(i)
                        .iter()
                        .zip(estimate.row_slice(j))
                        .map(|(p, q)| (p * q).sqrt())
                        .sum();
                    (bc * scale).round() as i64
                })
                .collect()
        })
        .collect();
    let matrix = pathfinding::matrix::Matrix::from_rows(weights)
        .map_err(|e| Error::Input(format!("topic matching: {e}")))?;
    Ok(pathfinding::kuhn_munkres::kuhn_munkres(&matrix).1)
}

/// Area under the ROC curve of `scores` against binary `labels`
/// (Mann-Whitney statistic, ties counted half). `None` when one class is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}
