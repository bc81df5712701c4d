use std::collections::BTreeSet;

use unicode_normalization::UnicodeNormalization;

use super::OcrError;

/// Output alphabet. Class 0 is the CTC blank; character `chars[i]` is class
/// `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
}

impl Charset {
    pub const BLANK: usize = 0;

    pub fn new(chars: Vec<char>) -> Result<Self, OcrError> {
        let mut seen = BTreeSet::new();
        for &c in &chars {
            if !seen.insert(c) {
                return Err(OcrError::Charset(format!("duplicate character {c:?}")));
            }
        }
        Ok(Self { chars })
    }

    /// Sorted set of every character in the NFC form of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| t.nfc().collect::<Vec<_>>()).collect();
        Self { chars: set.into_iter().collect() }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of output classes including the blank.
    pub fn classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    /// Characters of `text` (after NFC) that are not in the set, in first
    /// occurrence order.
    pub fn unknown_chars(&self, text: &str) -> Vec<char> {
        let mut out = Vec::new();
        for c in text.nfc() {
            if self.index(c).is_none() && !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, OcrError> {
        let unknown = self.unknown_chars(text);
        if !unknown.is_empty() {
            return Err(OcrError::UnknownChars(unknown));
        }
        Ok(text.nfc().map(|c| self.index(c).expect("checked")).collect())
    }

    /// Maps class indices back to text; blanks and out-of-range indices are skipped.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&l| l.checked_sub(1).and_then(|i| self.chars.get(i))).collect()
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.chars.iter().map(|c| c.to_string()).collect()
    }

    pub fn from_strings(items: &[String]) -> Result<Self, OcrError> {
        let chars = items
            .iter()
            .map(|s| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(OcrError::Charset(format!("entry {s:?} is not a single character"))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(chars)
    }
}
