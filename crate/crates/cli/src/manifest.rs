//! Line-image datasets: either a TSV of `relative_path<TAB>text` rows or a
//! directory tree of images with same-stem `.txt` transcriptions.

use std::fs;
use std::path::{Path, PathBuf};

use fpthd::ocrnet::Charset;
use fpthd::raster::Raster;
use fpthd::train::LineSample;
use rayon::prelude::*;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("row {row}: image {path} does not exist")]
    MissingImage { row: usize, path: PathBuf },
    #[error("row {row}: text is not valid UTF-8")]
    Utf8 { row: usize },
    #[error("row {row}: expected <image path><TAB><text>")]
    Malformed { row: usize },
    #[error("{0}: no transcription file next to the image")]
    MissingText(PathBuf),
    #[error("{0}: transcription is not valid UTF-8")]
    TextUtf8(PathBuf),
    #[error("{0} holds no entries")]
    Empty(PathBuf),
    #[error("cannot load line image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    /// NFC-normalized transcription.
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Sorted by image path.
    pub entries: Vec<ManifestEntry>,
    pub charset: Charset,
}

impl DatasetManifest {
    fn from_entries(mut entries: Vec<ManifestEntry>, source: &Path) -> Result<Self, ManifestError> {
        if entries.is_empty() {
            return Err(ManifestError::Empty(source.to_path_buf()));
        }
        entries.sort_by(|a, b| a.image.cmp(&b.image));
        let charset = Charset::from_texts(entries.iter().map(|e| e.text.as_str()));
        Ok(Self { entries, charset })
    }

    /// Characters of this manifest missing from `charset`, each with the
    /// images whose text contains it.
    pub fn unseen_chars(&self, charset: &Charset) -> Vec<(char, Vec<PathBuf>)> {
        let mut out: Vec<(char, Vec<PathBuf>)> = Vec::new();
        for e in &self.entries {
            for c in charset.unknown_chars(&e.text) {
                match out.iter_mut().find(|(k, _)| *k == c) {
                    Some((_, paths)) => {
                        if paths.last() != Some(&e.image) {
                            paths.push(e.image.clone());
                        }
                    }
                    None => out.push((c, vec![e.image.clone()])),
                }
            }
        }
        out.sort_by_key(|(c, _)| *c);
        out
    }

    /// Loads every image. The padding intensity of a stored crop is its
    /// border median.
    pub fn load_samples(&self) -> Result<Vec<LineSample>, ManifestError> {
        self.entries
            .par_iter()
            .map(|e| {
                let image = Raster::load(&e.image).map_err(|err| ManifestError::Image { path: e.image.clone(), message: err.to_string() })?;
                Ok(LineSample { id: e.image.display().to_string(), background: image.border_median(), image, text: e.text.clone() })
            })
            .collect()
    }
}

/// Loads a TSV file or a directory tree, whichever `path` is.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    if path.is_dir() {
        load_tree(path)
    } else {
        load_tsv(path)
    }
}

/// Rows are `image<TAB>text` with image paths relative to the file's
/// directory. Blank rows are skipped; row numbers count from 1.
pub fn load_tsv(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let bytes = fs::read(path).map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })?;
    let root = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let row = i + 1;
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let line = std::str::from_utf8(raw).map_err(|_| ManifestError::Utf8 { row })?;
        let (rel, text) = line.split_once('\t').ok_or(ManifestError::Malformed { row })?;
        let image = root.join(rel.trim());
        if !image.is_file() {
            return Err(ManifestError::MissingImage { row, path: image });
        }
        entries.push(ManifestEntry { image, text: text.nfc().collect() });
    }
    DatasetManifest::from_entries(entries, path)
}

fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ManifestError> {
    let io = |source| ManifestError::Io { path: dir.to_path_buf(), source };
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if is_image(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Every image under `root` (recursively) paired with the `.txt` of the same
/// stem. One trailing line break of the text file is dropped.
pub fn load_tree(root: &Path) -> Result<DatasetManifest, ManifestError> {
    let mut images = Vec::new();
    walk(root, &mut images)?;
    let mut entries = Vec::with_capacity(images.len());
    for image in images {
        let txt = image.with_extension("txt");
        let bytes = fs::read(&txt).map_err(|_| ManifestError::MissingText(image.clone()))?;
        let text = String::from_utf8(bytes).map_err(|_| ManifestError::TextUtf8(txt.clone()))?;
        let text = text.strip_suffix('\n').map(|t| t.strip_suffix('\r').unwrap_or(t)).unwrap_or(&text);
        entries.push(ManifestEntry { image, text: text.nfc().collect() });
    }
    DatasetManifest::from_entries(entries, root)
}
