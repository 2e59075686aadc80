//! Okapi BM25 over code entities.

use std::collections::HashMap;

/// Split text into lowercase search terms.
///
/// Non-alphanumeric characters separate terms, camelCase and acronym
/// boundaries split further (`HTTPServerError` gives `http`, `server`,
/// `error`), and single-character terms are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for run in text.split(|c: char| !c.is_alphanumeric()) {
        if run.is_empty() {
            continue;
        }
        let chars: Vec<char> = run.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let prev = chars[i - 1];
            let cur = chars[i];
            let lower_to_upper = (prev.is_lowercase() || prev.is_ascii_digit()) && cur.is_uppercase();
            let acronym_end =
                prev.is_uppercase() && cur.is_uppercase() && chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            if lower_to_upper || acronym_end {
                push_term(&mut out, &chars[start..i]);
                start = i;
            }
        }
        push_term(&mut out, &chars[start..]);
    }
    out
}

fn push_term(out: &mut Vec<String>, chars: &[char]) {
    if chars.len() > 1 {
        out.push(chars.iter().collect::<String>().to_lowercase());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Inverted index over pre-tokenized documents.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_lens: Vec<usize>,
    avgdl: f64,
    postings: HashMap<String, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn new<I, D>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = String>,
    {
        let mut doc_lens = Vec::new();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (id, doc) in docs.into_iter().enumerate() {
            let mut tf: HashMap<String, u32> = HashMap::new();
            let mut len = 0;
            for term in doc {
                *tf.entry(term).or_default() += 1;
                len += 1;
            }
            doc_lens.push(len);
            for (term, n) in tf {
                postings.entry(term).or_default().push((id, n));
            }
        }
        let total: usize = doc_lens.iter().sum();
        let avgdl = if doc_lens.is_empty() {
            0.0
        } else {
            total as f64 / doc_lens.len() as f64
        };
        Bm25Index {
            params,
            doc_lens,
            avgdl,
            postings,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    /// `max(0, ln((N - df + 0.5) / (df + 0.5)))`
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_lens.len() as f64;
        let df = self.postings.get(term).map_or(0, |p| p.len()) as f64;
        ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    /// Score of every document; repeated query terms contribute repeatedly.
    pub fn scores(&self, query: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_lens.len()];
        let Bm25Params { k1, b } = self.params;
        for term in query {
            let Some(posting) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            if idf == 0.0 {
                continue;
            }
            for &(doc, tf) in posting {
                let tf = tf as f64;
                let norm = if self.avgdl > 0.0 {
                    1.0 - b + b * self.doc_lens[doc] as f64 / self.avgdl
                } else {
                    1.0
                };
                scores[doc] += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        scores
    }
}
