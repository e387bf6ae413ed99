use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{CorpusSequence, Document, Vocabulary};
use crate::error::{Error, Result};

/// One raw time-stamped document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    #[serde(rename = "t")]
    pub timestamp: i64,
    pub tokens: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// `timestamp<TAB>whitespace-separated text` per line.
    Tsv,
    /// `{"t": <int>, "tokens": [...]}` per line.
    Jsonl,
    /// Per line: JSON when it starts with `{`, TSV otherwise.
    Auto,
}

/// Parse records; blank lines are skipped, errors carry 1-based line numbers.
pub fn parse_records(text: &str, format: InputFormat) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let json = match format {
            InputFormat::Jsonl => true,
            InputFormat::Tsv => false,
            InputFormat::Auto => line.trim_start().starts_with('{'),
        };
        let rec = if json {
            serde_json::from_str::<Record>(line)
                .map_err(|e| Error::Input(format!("line {}: {e}", i + 1)))?
        } else {
            let (ts, body) = line.split_once('\t').ok_or_else(|| {
                Error::Input(format!("line {}: expected `timestamp<TAB>text`", i + 1))
            })?;
            let timestamp = ts.trim().parse::<i64>().map_err(|e| {
                Error::Input(format!("line {}: bad timestamp `{}`: {e}", i + 1, ts.trim()))
            })?;
            Record {
                timestamp,
                tokens: body.split_whitespace().map(str::to_owned).collect(),
            }
        };
        out.push(rec);
    }
    Ok(out)
}

/// How timestamps map onto slice indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceSpec {
    /// Slice `t` covers `[origin + t*width, origin + (t+1)*width)`; the origin
    /// defaults to the smallest timestamp.
    Width { width: i64, origin: Option<i64> },
    /// Slice `t` covers `[b[t], b[t+1])`.
    Boundaries(Vec<i64>),
}

impl SliceSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SliceSpec::Width { width, .. } if *width <= 0 => {
                Err(Error::Config(format!("slice width must be positive, got {width}")))
            }
            SliceSpec::Boundaries(b) if b.len() < 3 => Err(Error::Config(
                "slice boundaries must define at least 2 slices".into(),
            )),
            SliceSpec::Boundaries(b) if b.windows(2).any(|w| w[0] >= w[1]) => Err(Error::Config(
                "slice boundaries must be strictly increasing".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabOptions {
    /// Minimum corpus-wide token count.
    pub min_count: u64,
    /// Drop tokens appearing in more than this fraction of documents.
    pub max_doc_fraction: f64,
    pub stopwords: BTreeSet<String>,
}

impl Default for VocabOptions {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_doc_fraction: 1.0,
            stopwords: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub dropped_out_of_range: usize,
    pub dropped_empty: usize,
    pub vocab_size: usize,
    pub docs_per_slice: Vec<usize>,
}

/// Build a corpus: assign slices, derive the vocabulary (sorted
/// lexicographically), count terms and drop documents left empty.
pub fn ingest(
    records: &[Record],
    slicing: &SliceSpec,
    opts: &VocabOptions,
) -> Result<(CorpusSequence, IngestReport)> {
    slicing.validate()?;
    if !(opts.max_doc_fraction > 0.0 && opts.max_doc_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "max_doc_fraction must lie in (0, 1], got {}",
            opts.max_doc_fraction
        )));
    }
    if records.is_empty() {
        return Err(Error::Input("no records".into()));
    }
    let mut report = IngestReport {
        records: records.len(),
        ..Default::default()
    };

    let (assigned, num_slices) = match slicing {
        SliceSpec::Width { width, origin } => {
            let origin = origin.unwrap_or_else(|| records.iter().map(|r| r.timestamp).min().unwrap());
            let assigned: Vec<Option<usize>> = records
                .iter()
                .map(|r| {
                    let d = r.timestamp - origin;
                    (d >= 0).then(|| (d / width) as usize)
                })
                .collect();
            let t = assigned.iter().flatten().max().map_or(0, |m| m + 1);
            (assigned, t)
        }
        SliceSpec::Boundaries(b) => {
            let assigned = records
                .iter()
                .map(|r| {
                    let p = b.partition_point(|&x| x <= r.timestamp);
                    (p >= 1 && p < b.len()).then(|| p - 1)
                })
                .collect();
            (assigned, b.len() - 1)
        }
    };
    if num_slices < 2 {
        return Err(Error::Input(format!(
            "timestamps span {num_slices} slice(s); at least 2 are required"
        )));
    }

    let kept: Vec<(usize, &Record)> = assigned
        .iter()
        .zip(records)
        .filter_map(|(a, r)| a.map(|t| (t, r)))
        .collect();
    report.dropped_out_of_range = records.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Input("every record falls outside the slice range".into()));
    }

    let mut totals: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (_, r) in &kept {
        let mut seen = BTreeSet::new();
        for tok in &r.tokens {
            let e = totals.entry(tok.as_str()).or_default();
            e.0 += 1;
            if seen.insert(tok.as_str()) {
                e.1 += 1;
            }
        }
    }
    let max_df = opts.max_doc_fraction * kept.len() as f64;
    let tokens: Vec<String> = totals
        .into_iter()
        .filter(|&(tok, (count, df))| {
            count >= opts.min_count && df as f64 <= max_df && !opts.stopwords.contains(tok)
        })
        .map(|(tok, _)| tok.to_owned())
        .collect();
    let vocabulary = Vocabulary::new(tokens)?;
    report.vocab_size = vocabulary.len();

    let mut slices: Vec<Vec<Document>> = vec![Vec::new(); num_slices];
    for (t, r) in kept {
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for tok in &r.tokens {
            if let Some(id) = vocabulary.id(tok) {
                *counts.entry(id).or_default() += 1;
            }
        }
        if counts.is_empty() {
            report.dropped_empty += 1;
            continue;
        }
        slices[t].push(Document::new(t, counts)?);
    }
    if slices.iter().all(Vec::is_empty) {
        return Err(Error::Input("corpus is empty after vocabulary filtering".into()));
    }
    report.docs_per_slice = slices.iter().map(Vec::len).collect();
    for (t, n) in report.docs_per_slice.iter().enumerate() {
        if *n == 0 {
            log::warn!("slice {t} has no documents");
        }
    }
    Ok((CorpusSequence::new(vocabulary, slices)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: i64, text: &str) -> Record {
        Record {
            timestamp: t,
            tokens: text.split_whitespace().map(str::to_owned).collect(),
        }
    }

    #[test]
    fn parses_tsv_and_jsonl() {
        let text = "3\tb a a\n\n{\"t\": 5, \"tokens\": [\"c\"]}\n";
        let r = parse_records(text, InputFormat::Auto).unwrap();
        assert_eq!(r, vec![rec(3, "b a a"), rec(5, "c")]);
        let err = parse_records("x\ty", InputFormat::Tsv).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn width_slicing_and_sorted_vocab() {
        let recs = [rec(10, "b a"), rec(11, "c a"), rec(13, "b")];
        let spec = SliceSpec::Width { width: 2, origin: None };
        let (c, rep) = ingest(&recs, &spec, &VocabOptions::default()).unwrap();
        assert_eq!(c.vocabulary().tokens(), &["a", "b", "c"]);
        assert_eq!(c.slice_sizes(), vec![2, 1]);
        assert_eq!(rep.vocab_size, 3);
    }

    #[test]
    fn boundaries_drop_out_of_range_and_keep_empty_slices() {
        let recs = [rec(0, "a b"), rec(5, "a"), rec(25, "b"), rec(99, "a")];
        let spec = SliceSpec::Boundaries(vec![0, 10, 20, 30]);
        let (c, rep) = ingest(&recs, &spec, &VocabOptions::default()).unwrap();
        assert_eq!(c.slice_sizes(), vec![2, 0, 1]);
        assert_eq!(rep.dropped_out_of_range, 1);
        assert!(c.slice_bow()[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bad_boundaries_are_config_errors() {
        for b in [vec![0, 10], vec![0, 10, 10], vec![5, 3, 9]] {
            let e = SliceSpec::Boundaries(b).validate().unwrap_err();
            assert!(matches!(e, Error::Config(_)));
        }
    }

    #[test]
    fn filters_and_drops_emptied_documents() {
        let recs = [rec(0, "the a a"), rec(0, "the"), rec(1, "the b b"), rec(1, "a b")];
        let opts = VocabOptions {
            min_count: 2,
            max_doc_fraction: 1.0,
            stopwords: ["the".to_string()].into(),
        };
        let spec = SliceSpec::Width { width: 1, origin: None };
        let (c, rep) = ingest(&recs, &spec, &opts).unwrap();
        assert_eq!(c.vocabulary().tokens(), &["a", "b"]);
        assert_eq!(rep.dropped_empty, 1);
        assert_eq!(c.num_documents(), 3);
    }

    #[test]
    fn max_doc_fraction_removes_ubiquitous_tokens() {
        let recs = [rec(0, "x a"), rec(0, "x b"), rec(1, "x c"), rec(1, "x a")];
        let opts = VocabOptions {
            max_doc_fraction: 0.9,
            ..Default::default()
        };
        let spec = SliceSpec::Width { width: 1, origin: None };
        let (c, _) = ingest(&recs, &spec, &opts).unwrap();
        assert_eq!(c.vocabulary().id("x"), None);
    }

    #[test]
    fn single_slice_is_rejected() {
        let recs = [rec(0, "a b"), rec(0, "b c")];
        let spec = SliceSpec::Width { width: 1, origin: None };
        assert!(matches!(
            ingest(&recs, &spec, &VocabOptions::default()),
            Err(Error::Input(_))
        ));
    }
}
