//! BLEU, ROUGE-L and CIDEr-D over pre-tokenized captions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{math, Error, Result};

type Ngram<'a> = Vec<&'a str>;

fn ngrams<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> BTreeMap<Ngram<'a>, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        let key: Vec<&str> = w.iter().map(|t| t.as_ref()).collect();
        *out.entry(key).or_insert(0) += 1;
    }
    out
}

/// Clipped matches and candidate n-gram total at order `n`.
fn clipped<S: AsRef<str>, R: AsRef<str>>(cand: &[S], refs: &[Vec<R>], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let total = c.values().sum();
    let mut max_ref: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
    for r in refs {
        for (g, k) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Reference length closest to `c`; ties go to the shorter reference.
fn closest_ref_len<R>(c: usize, refs: &[Vec<R>]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let l = r.len();
        let (dl, db) = (l.abs_diff(c), best.abs_diff(c));
        if dl < db || (dl == db && l < best) {
            best = l;
        }
    }
    best
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        math::exp(1.0 - r as f64 / c as f64)
    }
}

/// Sentence BLEU-n: geometric mean of clipped precisions of orders `1..=n`
/// times the brevity penalty. `smooth` adds one to numerator and denominator
/// of orders above one.
pub fn bleu_n<S: AsRef<str>, R: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<R>],
    n: usize,
    smooth: bool,
) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("BLEU order {n} outside 1..=4")));
    }
    if references.is_empty() {
        return Err(Error::data("BLEU needs at least one reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = clipped(candidate, references, k);
        let (m, t) = if smooth && k > 1 { (m + 1, t + 1) } else { (m, t) };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += math::ln(m as f64 / t as f64);
    }
    let bp = brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), references));
    Ok(bp * math::exp(log_sum / n as f64))
}

fn lcs<S: AsRef<str>, R: AsRef<str>>(a: &[S], b: &[R]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Usual captioning weight on recall.
pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure, maximized over references.
pub fn rouge_l<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>], beta: f64) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = beta * beta;
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rc = l / r.len() as f64;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max)
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Document frequencies of 1..4-grams over the references, one document per
/// image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CiderCorpusStats {
    df: BTreeMap<Vec<String>, f64>,
    docs: usize,
}

impl CiderCorpusStats {
    /// `refs[i]` holds every reference of image `i`.
    pub fn build<R: AsRef<str>>(refs: &[Vec<Vec<R>>]) -> Self {
        let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        for image in refs {
            let mut seen: BTreeSet<Vec<&str>> = BTreeSet::new();
            for r in image {
                for n in 1..=CIDER_N {
                    seen.extend(ngrams(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.into_iter().map(String::from).collect()).or_insert(0.0) += 1.0;
            }
        }
        CiderCorpusStats { df, docs: refs.len() }
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn df(&self, gram: &[&str]) -> f64 {
        let key: Vec<String> = gram.iter().map(|s| String::from(*s)).collect();
        self.df.get(&key).copied().unwrap_or(0.0)
    }

    fn vector<S: AsRef<str>>(&self, tokens: &[S], n: usize) -> (BTreeMap<Vec<String>, f64>, f64) {
        let log_n = math::ln(self.docs.max(1) as f64);
        let mut v = BTreeMap::new();
        let mut norm = 0.0;
        for (g, tf) in ngrams(tokens, n) {
            let key: Vec<String> = g.into_iter().map(String::from).collect();
            let df = self.df.get(&key).copied().unwrap_or(0.0).max(1.0);
            let w = tf as f64 * (log_n - math::ln(df));
            norm += w * w;
            v.insert(key, w);
        }
        (v, math::sqrt(norm))
    }
}

/// CIDEr-D: per order, clipped tf-idf cosine times a Gaussian length
/// penalty; averaged over the orders present in either caption, scaled by
/// 10 and averaged over references.
pub fn cider_d<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>], stats: &CiderCorpusStats) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let cand: Vec<_> = (1..=CIDER_N).map(|n| stats.vector(candidate, n)).collect();
    let mut total = 0.0;
    for r in references {
        let delta = candidate.len() as f64 - r.len() as f64;
        let penalty = math::exp(-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA));
        let mut sum = 0.0;
        let mut orders = 0;
        for (n, (vc, nc)) in cand.iter().enumerate() {
            let (vr, nr) = stats.vector(r, n + 1);
            if vc.is_empty() && vr.is_empty() {
                continue;
            }
            orders += 1;
            if *nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc.iter().filter_map(|(g, &a)| vr.get(g).map(|&b| a.min(b) * b)).sum();
            sum += dot / (nc * nr) * penalty;
        }
        if orders > 0 {
            total += sum / orders as f64;
        }
    }
    10.0 * total / references.len() as f64
}

/// Aggregates for one language.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 4] {
        [self.bleu1, self.bleu4, self.rouge_l, self.cider_d]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub lang_a: MetricRow,
    pub lang_b: MetricRow,
    pub images: usize,
}

impl MetricTable {
    /// Mean of the eight reported numbers.
    pub fn average(&self) -> f64 {
        let s: f64 = self.lang_a.values().iter().chain(self.lang_b.values().iter()).sum();
        s / 8.0
    }
}

/// One image's captions in both languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionPair {
    pub a: Vec<String>,
    pub b: Vec<String>,
}

/// References of one image in both languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceSet {
    pub a: Vec<Vec<String>>,
    pub b: Vec<Vec<String>>,
}

fn corpus_bleu(cands: &[&Vec<String>], refs: &[&Vec<Vec<String>>], n: usize) -> f64 {
    let mut c_len = 0;
    let mut r_len = 0;
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut m, mut t) = (0, 0);
        for (c, r) in cands.iter().zip(refs) {
            let (mm, tt) = clipped(c, r, k);
            m += mm;
            t += tt;
        }
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += math::ln(m as f64 / t as f64);
    }
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.len();
        r_len += closest_ref_len(c.len(), r);
    }
    brevity_penalty(c_len, r_len) * math::exp(log_sum / n as f64)
}

fn language_row(cands: &[&Vec<String>], refs: &[&Vec<Vec<String>>]) -> MetricRow {
    let owned: Vec<Vec<Vec<String>>> = refs.iter().map(|r| (*r).clone()).collect();
    let stats = CiderCorpusStats::build(&owned);
    let n = cands.len() as f64;
    let mut rouge = 0.0;
    let mut cider = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        rouge += rouge_l(c, r, ROUGE_BETA);
        cider += cider_d(c, r, &stats);
    }
    MetricRow {
        bleu1: corpus_bleu(cands, refs, 1),
        bleu4: corpus_bleu(cands, refs, 4),
        rouge_l: rouge / n,
        cider_d: cider / n,
    }
}

/// Corpus-level metrics for both languages. Every candidate id needs
/// references and vice versa.
pub fn corpus_eval(
    candidates: &BTreeMap<usize, CaptionPair>,
    references: &BTreeMap<usize, ReferenceSet>,
) -> Result<MetricTable> {
    if candidates.is_empty() {
        return Err(Error::data("no candidates to evaluate"));
    }
    let missing_refs: Vec<usize> = candidates
        .keys()
        .filter(|k| !references.contains_key(k))
        .copied()
        .collect();
    let missing_cands: Vec<usize> = references
        .keys()
        .filter(|k| !candidates.contains_key(k))
        .copied()
        .collect();
    if !missing_refs.is_empty() || !missing_cands.is_empty() {
        return Err(Error::data(format!(
            "misaligned ids: candidates without references {missing_refs:?}, references without candidates {missing_cands:?}"
        )));
    }
    let mut ca = Vec::new();
    let mut cb = Vec::new();
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    for (id, c) in candidates {
        let r = &references[id];
        if r.a.is_empty() || r.b.is_empty() {
            return Err(Error::data(format!("image {id} has an empty reference set")));
        }
        ca.push(&c.a);
        cb.push(&c.b);
        ra.push(&r.a);
        rb.push(&r.b);
    }
    Ok(MetricTable {
        lang_a: language_row(&ca, &ra),
        lang_b: language_row(&cb, &rb),
        images: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn lcs_small() {
        assert_eq!(lcs(&toks("a b c"), &toks("a c")), 2);
        assert_eq!(lcs(&toks("a b c d"), &toks("b d a")), 2);
    }

    #[test]
    fn closest_length_prefers_shorter_on_tie() {
        let refs = vec![toks("a b"), toks("a b c d")];
        assert_eq!(closest_ref_len(3, &refs), 2);
    }
}
