use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusSequence, DocRef, Document};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Valid,
    Test,
}

/// Per-document role assignment, stratified by slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    /// Seed for [`completion_halves`] on held-out documents.
    pub completion_seed: u64,
    /// `[train, valid, test]`.
    pub fractions: [f64; 3],
    assignment: Vec<Vec<Role>>,
}

impl SplitSpec {
    /// Build from an explicit assignment.
    pub fn from_assignment(seed: u64, fractions: [f64; 3], assignment: Vec<Vec<Role>>) -> Self {
        Self {
            seed,
            completion_seed: seed,
            fractions,
            assignment,
        }
    }

    pub fn role(&self, r: DocRef) -> Role {
        self.assignment[r.slice][r.index]
    }

    pub fn assignment(&self) -> &[Vec<Role>] {
        &self.assignment
    }

    /// Documents with role `role`, in slice-then-index order.
    pub fn docs(&self, role: Role) -> Vec<DocRef> {
        let mut out = Vec::new();
        for (slice, roles) in self.assignment.iter().enumerate() {
            for (index, &r) in roles.iter().enumerate() {
                if r == role {
                    out.push(DocRef { slice, index });
                }
            }
        }
        out
    }

    pub fn counts(&self, role: Role) -> Vec<usize> {
        self.assignment
            .iter()
            .map(|s| s.iter().filter(|&&r| r == role).count())
            .collect()
    }

    pub fn check_matches(&self, corpus: &CorpusSequence) -> Result<()> {
        let sizes: Vec<usize> = self.assignment.iter().map(Vec::len).collect();
        if sizes != corpus.slice_sizes() {
            return Err(Error::Compatibility(format!(
                "split covers slice sizes {sizes:?} but corpus has {:?}",
                corpus.slice_sizes()
            )));
        }
        Ok(())
    }
}

/// Stratified split: per slice, `round(n * f)` validation and test documents
/// at random, the rest train. Slices with fewer than 3 documents go wholly to
/// training; every non-empty slice keeps at least one training document.
pub fn split(corpus: &CorpusSequence, fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        || fractions[0] <= 0.0
    {
        return Err(Error::Config(format!(
            "split fractions must be non-negative, sum to 1 and give training a positive share, got {fractions:?}"
        )));
    }
    let assignment = corpus
        .slices()
        .iter()
        .enumerate()
        .map(|(t, docs)| {
            let n = docs.len();
            if n < 3 {
                if n > 0 {
                    log::warn!("slice {t} has {n} document(s); all assigned to training");
                }
                return vec![Role::Train; n];
            }
            let mut n_valid = (n as f64 * fractions[1]).round() as usize;
            let mut n_test = (n as f64 * fractions[2]).round() as usize;
            while n_valid + n_test > n - 1 {
                if n_test >= n_valid {
                    n_test -= 1;
                } else {
                    n_valid -= 1;
                }
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(seed, &[t as u64]));
            let mut roles = vec![Role::Train; n];
            for &i in &order[..n_valid] {
                roles[i] = Role::Valid;
            }
            for &i in &order[n_valid..n_valid + n_test] {
                roles[i] = Role::Test;
            }
            roles
        })
        .collect();
    Ok(SplitSpec {
        seed,
        completion_seed: seed,
        fractions,
        assignment,
    })
}

fn doc_key(doc: &Document) -> u64 {
    let mut h = Sha256::new();
    h.update((doc.slice() as u64).to_le_bytes());
    for &(id, c) in doc.counts() {
        h.update(id.to_le_bytes());
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Split a document's token occurrences at random into two halves; the
/// first gets `ceil(n/2)` tokens. `None` for documents with fewer than 2 tokens.
pub fn completion_halves(doc: &Document, seed: u64) -> Option<(Vec<(u32, u32)>, Vec<(u32, u32)>)> {
    let n = doc.token_total() as usize;
    if n < 2 {
        return None;
    }
    let mut occ: Vec<u32> = doc
        .counts()
        .iter()
        .flat_map(|&(id, c)| std::iter::repeat_n(id, c as usize))
        .collect();
    occ.shuffle(&mut stream(seed, &[doc_key(doc)]));
    let first = n.div_ceil(2);
    let tally = |xs: &mut [u32]| {
        xs.sort_unstable();
        let mut out: Vec<(u32, u32)> = Vec::new();
        for &id in xs.iter() {
            match out.last_mut() {
                Some((last, c)) if *last == id => *c += 1,
                _ => out.push((id, 1)),
            }
        }
        out
    };
    let (a, b) = occ.split_at_mut(first);
    Some((tally(a), tally(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    fn corpus(sizes: &[usize]) -> CorpusSequence {
        let v = Vocabulary::synthetic(4).unwrap();
        let slices = sizes
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                (0..n)
                    .map(|i| Document::new(t, [((i % 4) as u32, 1 + i as u32)]).unwrap())
                    .collect()
            })
            .collect();
        CorpusSequence::new(v, slices).unwrap()
    }

    #[test]
    fn stratified_counts_use_rounding() {
        let c = corpus(&[10, 2, 0, 7]);
        let s = split(&c, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(s.counts(Role::Valid), vec![1, 0, 0, 1]);
        assert_eq!(s.counts(Role::Test), vec![1, 0, 0, 1]);
        assert_eq!(s.counts(Role::Train), vec![8, 2, 0, 5]);
    }

    #[test]
    fn small_slices_keep_a_training_doc() {
        let c = corpus(&[3, 4]);
        let s = split(&c, [0.1, 0.45, 0.45], 0).unwrap();
        assert!(s.counts(Role::Train).iter().all(|&n| n >= 1));
    }

    #[test]
    fn split_is_seeded() {
        let c = corpus(&[20, 20]);
        assert_eq!(split(&c, [0.6, 0.2, 0.2], 5).unwrap(), split(&c, [0.6, 0.2, 0.2], 5).unwrap());
        assert_ne!(split(&c, [0.6, 0.2, 0.2], 5).unwrap(), split(&c, [0.6, 0.2, 0.2], 6).unwrap());
    }

    #[test]
    fn bad_fractions_rejected() {
        let c = corpus(&[5, 5]);
        assert!(matches!(split(&c, [0.5, 0.2, 0.2], 0), Err(Error::Config(_))));
        assert!(matches!(split(&c, [0.0, 0.5, 0.5], 0), Err(Error::Config(_))));
    }

    #[test]
    fn halves_partition_counts() {
        let d = Document::new(0, [(0, 3), (2, 2), (3, 2)]).unwrap();
        let (a, b) = completion_halves(&d, 9).unwrap();
        let total = |h: &[(u32, u32)]| h.iter().map(|&(_, c)| c).sum::<u32>();
        assert_eq!(total(&a), 4);
        assert_eq!(total(&b), 3);
        let mut merged = [0u32; 4];
        for &(id, c) in a.iter().chain(&b) {
            merged[id as usize] += c;
        }
        assert_eq!(merged, [3, 0, 2, 2]);
        assert_eq!(completion_halves(&d, 9), Some((a, b)));
        assert!(completion_halves(&Document::new(0, [(1, 1)]).unwrap(), 0).is_none());
    }
}
