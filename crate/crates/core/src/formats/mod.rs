//! Page serialization (PAGE XML, Markdown, plain text), line-image file
//! naming and the INI pipeline configuration.

mod config;
mod markdown;
mod naming;
mod page_xml;

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::geometry::PageLayout;

pub use config::{parse_config, ConfigOutcome, CropperConfig, LayoutConfig, OcrSection, PipelineConfig, PipelineFlags};
pub use markdown::{emit_markdown, escape_markdown};
pub use naming::LineImageRef;
pub use page_xml::{emit_page_xml, parse_page_xml, quantize_layout, ParsedPage, PAGE_NAMESPACE};

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("malformed XML at byte {position}: {message}")]
    Xml { position: u64, message: String },
    #[error("document has no Page element")]
    MissingPage,
    #[error("unparsable points \"{value}\" at byte {position}")]
    Coords { position: u64, value: String },
    #[error("invalid attribute {name}=\"{value}\" on {element} at byte {position}")]
    Attribute { position: u64, element: String, name: String, value: String },
    #[error("\"{0}\" is not a valid XML name")]
    InvalidId(String),
    #[error("text for unknown line id {0}")]
    UnknownLine(String),
    #[error("confidence {1} for line {0} is outside [0, 1]")]
    Confidence(String, f64),
    #[error("[{section}] {key}: {message}")]
    Config { section: String, key: String, message: String },
    #[error("line {line}: {message}")]
    Ini { line: usize, message: String },
    #[error("\"{0}\" does not follow the <page>-rNNN-lNNN.png pattern")]
    LineImageName(String),
}

/// A layout together with the recognized text of (some of) its lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscribedPage {
    pub layout: PageLayout,
    pub image_filename: String,
    pub texts: BTreeMap<String, String>,
    pub confidences: BTreeMap<String, f64>,
}

impl TranscribedPage {
    pub fn new(layout: PageLayout, image_filename: impl Into<String>) -> Self {
        Self { layout, image_filename: image_filename.into(), texts: BTreeMap::new(), confidences: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        for id in self.texts.keys().chain(self.confidences.keys()) {
            if !self.layout.lines().any(|l| &l.id == id) {
                return Err(FormatError::UnknownLine(id.clone()));
            }
        }
        if let Some((id, &c)) = self.confidences.iter().find(|(_, c)| !(0.0..=1.0).contains(*c)) {
            return Err(FormatError::Confidence(id.clone(), c));
        }
        Ok(())
    }

    /// Texts of the transcribed lines in layout order.
    pub fn transcribed_lines(&self) -> impl Iterator<Item = &str> {
        self.layout.lines().filter_map(|l| self.texts.get(&l.id).map(String::as_str))
    }
}

/// One line per transcribed text line in layout order, joined by `\n`.
pub fn emit_txt(page: &TranscribedPage) -> String {
    page.transcribed_lines().collect::<Vec<_>>().join("\n")
}

/// Whether `s` is an XML name without colons.
pub fn is_xml_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => chars.all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.')),
        _ => false,
    }
}

/// Page id for an image file: its stem with characters outside
/// `[A-Za-z0-9._-]` replaced by `_`, prefixed with `p` unless it starts with
/// a letter or underscore.
pub fn page_id_from_path(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut id: String = stem.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' }).collect();
    if !id.starts_with(|c: char| c.is_ascii_alphabetic() || c == '_') {
        id.insert(0, 'p');
    }
    id
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_ids_are_xml_names() {
        assert_eq!(page_id_from_path(Path::new("/a/b/folio 12r.png")), "folio_12r");
        assert_eq!(page_id_from_path(Path::new("0042.jpg")), "p0042");
        assert_eq!(page_id_from_path(Path::new("año-1585.png")), "a_o-1585");
        assert!(is_xml_name("r0_l1") && is_xml_name("_x.y-z"));
        assert!(!is_xml_name("1abc") && !is_xml_name("a b") && !is_xml_name("") && !is_xml_name("a:b"));
    }
}
