use super::FormatError;

/// File name of a cropped line image: `<page_id>-r<region>-l<line>.png` with
/// indices zero-padded to three digits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LineImageRef {
    pub page_id: String,
    pub region_index: usize,
    pub line_index: usize,
}

fn index(s: &str) -> Option<usize> {
    let ok = s.len() >= 3 && s.bytes().all(|b| b.is_ascii_digit()) && (s.len() == 3 || !s.starts_with('0'));
    ok.then(|| s.parse().ok()).flatten()
}

impl LineImageRef {
    pub fn new(page_id: impl Into<String>, region_index: usize, line_index: usize) -> Self {
        Self { page_id: page_id.into(), region_index, line_index }
    }

    pub fn file_name(&self) -> String {
        format!("{}-r{:03}-l{:03}.png", self.page_id, self.region_index, self.line_index)
    }

    /// Inverse of [`file_name`](Self::file_name). The suffix is matched from
    /// the end, so page ids may contain hyphens.
    pub fn parse(name: &str) -> Result<Self, FormatError> {
        let bad = || FormatError::LineImageName(name.to_string());
        let stem = name.strip_suffix(".png").ok_or_else(bad)?;
        let (rest, line) = stem.rsplit_once("-l").ok_or_else(bad)?;
        let (page, region) = rest.rsplit_once("-r").ok_or_else(bad)?;
        if page.is_empty() {
            return Err(bad());
        }
        Ok(Self { page_id: page.to_string(), region_index: index(region).ok_or_else(bad)?, line_index: index(line).ok_or_else(bad)? })
    }
}
