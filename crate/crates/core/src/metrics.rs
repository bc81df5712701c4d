//! Character and word error rates.
//!
//! Texts are NFC-normalized before comparison so that composed and decomposed
//! diacritics (e.g. a tilde over a vowel) compare equal. Corpus rates are
//! micro-averages: total edits over total reference length.

use std::fmt::Write as _;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{refs} reference pages but {hyps} hypothesis pages")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("page {index}: reference id {reference:?} paired with hypothesis id {hypothesis:?}")]
    IdMismatch { index: usize, reference: String, hypothesis: String },
}

/// Unit-cost Levenshtein distance over arbitrary symbols.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn nfc_chars(s: &str) -> Vec<char> {
    s.nfc().collect()
}

fn nfc_words(s: &str) -> Vec<String> {
    let n: String = s.nfc().collect();
    n.split_whitespace().map(str::to_owned).collect()
}

/// Character edit distance between two strings after NFC normalization.
pub fn edit_distance(a: &str, b: &str) -> usize {
    levenshtein(&nfc_chars(a), &nfc_chars(b))
}

/// Character and word edit counts for one reference/hypothesis pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub char_edits: usize,
    pub chars: usize,
    pub word_edits: usize,
    pub words: usize,
}

impl EditCounts {
    pub fn between(reference: &str, hypothesis: &str) -> Self {
        let (rc, hc) = (nfc_chars(reference), nfc_chars(hypothesis));
        let (rw, hw) = (nfc_words(reference), nfc_words(hypothesis));
        Self { char_edits: levenshtein(&rc, &hc), chars: rc.len(), word_edits: levenshtein(&rw, &hw), words: rw.len() }
    }

    pub fn cer(&self) -> f64 {
        self.char_edits as f64 / self.chars.max(1) as f64
    }

    pub fn wer(&self) -> f64 {
        self.word_edits as f64 / self.words.max(1) as f64
    }
}

/// Character error rate. An empty reference uses a denominator of 1.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    EditCounts::between(reference, hypothesis).cer()
}

/// Word error rate over whitespace-separated tokens.
pub fn wer(reference: &str, hypothesis: &str) -> f64 {
    EditCounts::between(reference, hypothesis).wer()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineScore {
    pub id: String,
    pub cer: f64,
    pub wer: f64,
    pub counts: EditCounts,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub cer: f64,
    pub wer: f64,
    pub total_char_edits: usize,
    pub total_chars: usize,
    pub total_word_edits: usize,
    pub total_words: usize,
    pub per_line: Vec<LineScore>,
    /// Ids of entries whose reference was empty (rates use a denominator of 1).
    pub empty_references: Vec<String>,
}

impl EvalReport {
    /// Micro-averaged report over already-paired `(id, reference, hypothesis)` items.
    pub fn from_pairs<'a>(items: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Self {
        let mut report = Self::default();
        for (id, reference, hypothesis) in items {
            let counts = EditCounts::between(reference, hypothesis);
            if counts.chars == 0 {
                report.empty_references.push(id.to_owned());
            }
            report.total_char_edits += counts.char_edits;
            report.total_chars += counts.chars;
            report.total_word_edits += counts.word_edits;
            report.total_words += counts.words;
            report.per_line.push(LineScore { id: id.to_owned(), cer: counts.cer(), wer: counts.wer(), counts });
        }
        report.cer = report.total_char_edits as f64 / report.total_chars.max(1) as f64;
        report.wer = report.total_word_edits as f64 / report.total_words.max(1) as f64;
        report
    }

    /// CSV with one row per entry and a final `TOTAL` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,cer,wer,char_edits,chars,word_edits,words\n");
        for l in &self.per_line {
            let c = l.counts;
            let _ = writeln!(out, "{},{:.6},{:.6},{},{},{},{}", l.id, l.cer, l.wer, c.char_edits, c.chars, c.word_edits, c.words);
        }
        let _ = writeln!(
            out,
            "TOTAL,{:.6},{:.6},{},{},{},{}",
            self.cer, self.wer, self.total_char_edits, self.total_chars, self.total_word_edits, self.total_words
        );
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "CER {:.2}% ({} / {} chars)\nWER {:.2}% ({} / {} words)\n",
            self.cer * 100.0,
            self.total_char_edits,
            self.total_chars,
            self.wer * 100.0,
            self.total_word_edits,
            self.total_words
        );
        if !self.empty_references.is_empty() {
            let _ = writeln!(out, "warning: empty reference for {}", self.empty_references.join(", "));
        }
        out
    }
}

/// Canonical page text: trailing whitespace stripped from each line, lines
/// joined with single `\n`.
pub fn normalize_page_text(text: &str) -> String {
    text.lines().map(str::trim_end).collect::<Vec<_>>().join("\n")
}

/// A page of text with an identifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PageText {
    pub id: String,
    pub text: String,
}

/// Corpus CER/WER over aligned reference and hypothesis pages.
pub fn evaluate_pages(references: &[PageText], hypotheses: &[PageText]) -> Result<EvalReport, MetricsError> {
    if references.len() != hypotheses.len() {
        return Err(MetricsError::LengthMismatch { refs: references.len(), hyps: hypotheses.len() });
    }
    let mut normalized = Vec::with_capacity(references.len());
    for (index, (r, h)) in references.iter().zip(hypotheses).enumerate() {
        if r.id != h.id {
            return Err(MetricsError::IdMismatch { index, reference: r.id.clone(), hypothesis: h.id.clone() });
        }
        normalized.push((r.id.as_str(), normalize_page_text(&r.text), normalize_page_text(&h.text)));
    }
    Ok(EvalReport::from_pairs(normalized.iter().map(|(id, r, h)| (*id, r.as_str(), h.as_str()))))
}
