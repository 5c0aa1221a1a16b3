use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Trademark type, in classifier output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TypeLabel {
    TextOnly,
    FigureOnly,
    FigureAndText,
}

impl TypeLabel {
    pub const ALL: [TypeLabel; 3] = [
        TypeLabel::TextOnly,
        TypeLabel::FigureOnly,
        TypeLabel::FigureAndText,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TypeLabel::TextOnly => "TEXT_ONLY",
            TypeLabel::FigureOnly => "FIGURE_ONLY",
            TypeLabel::FigureAndText => "FIGURE_AND_TEXT",
        }
    }
}

impl fmt::Display for TypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TypeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown trademark type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Purpose {
    Catalog,
    Ptl,
    Tt,
    Eval,
}

/// One catalog entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_label: Option<TypeLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_ids: Option<BTreeSet<String>>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            mask_path: None,
            type_label: None,
            relevant_ids: None,
        }
    }

    pub fn with_mask(mut self, mask_path: impl Into<PathBuf>) -> Self {
        self.mask_path = Some(mask_path.into());
        self
    }

    pub fn with_label(mut self, label: TypeLabel) -> Self {
        self.type_label = Some(label);
        self
    }

    pub fn with_relevant<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.relevant_ids = Some(ids.into_iter().map(Into::into).collect());
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    purpose: Purpose,
}

/// Ordered record list plus the directory relative paths resolve against.
///
/// On disk: UTF-8, one JSON object per line. The first line is a header
/// `{"purpose": ...}`; every following line is an [`ImageRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub purpose: Purpose,
    pub records: Vec<ImageRecord>,
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(purpose: Purpose, records: Vec<ImageRecord>) -> Self {
        Self {
            purpose,
            records,
            base_dir: PathBuf::new(),
        }
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Resolves a record path against the manifest location.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.resolve(&record.path)
    }

    pub fn mask_path(&self, record: &ImageRecord) -> Option<PathBuf> {
        record.mask_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Checks id uniqueness and the per-purpose field requirements.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for record in &self.records {
            if !seen.insert(record.id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate id {:?} in manifest",
                    record.id
                )));
            }
            let missing = match self.purpose {
                Purpose::Ptl if record.mask_path.is_none() => Some("mask_path"),
                Purpose::Tt if record.type_label.is_none() => Some("type_label"),
                Purpose::Eval
                    if record.relevant_ids.as_ref().is_none_or(BTreeSet::is_empty) =>
                {
                    Some("relevant_ids")
                }
                _ => None,
            };
            if let Some(field) = missing {
                return Err(Error::InvalidInput(format!(
                    "record {:?} lacks {field} required by a {:?} manifest",
                    record.id, self.purpose
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Header {
            purpose: self.purpose,
        })?;
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut file =
            fs::File::create(path).context(|| format!("creating manifest {}", path.display()))?;
        file.write_all(text.as_bytes())
            .context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file =
            fs::File::open(path).context(|| format!("opening manifest {}", path.display()))?;
        let malformed = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| malformed("empty file".into()))?
            .context(|| format!("reading {}", path.display()))?;
        let header: Header = serde_json::from_str(&header_line)
            .map_err(|e| malformed(format!("bad header: {e}")))?;
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.context(|| format!("reading {}", path.display()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| malformed(format!("line {}: {e}", n + 2)))?;
            records.push(record);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::new(header.purpose, records).with_base_dir(base);
        manifest.validate()?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest::new(
            Purpose::Eval,
            vec![
                ImageRecord::new("q1", "img/q1.png").with_relevant(["a", "b"]),
                ImageRecord::new("q2", "img/q2.png")
                    .with_relevant(["c"])
                    .with_label(TypeLabel::FigureOnly),
            ],
        );
        let path = dir.path().join("eval.jsonl");
        manifest.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back.records, manifest.records);
        assert_eq!(back.purpose, Purpose::Eval);
        assert_eq!(back.image_path(&back.records[0]), dir.path().join("img/q1.png"));
    }

    #[test]
    fn optional_fields_are_omitted() {
        let manifest =
            DatasetManifest::new(Purpose::Catalog, vec![ImageRecord::new("a", "a.png")]);
        let text = manifest.to_jsonl().unwrap();
        assert_eq!(text, "{\"purpose\":\"CATALOG\"}\n{\"id\":\"a\",\"path\":\"a.png\"}\n");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let manifest = DatasetManifest::new(
            Purpose::Catalog,
            vec![ImageRecord::new("a", "1.png"), ImageRecord::new("a", "2.png")],
        );
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn purpose_requirements_enforced() {
        let ptl = DatasetManifest::new(Purpose::Ptl, vec![ImageRecord::new("a", "a.png")]);
        assert!(ptl.validate().is_err());
        let eval = DatasetManifest::new(
            Purpose::Eval,
            vec![ImageRecord::new("q", "q.png").with_relevant(Vec::<String>::new())],
        );
        assert!(eval.validate().is_err());
        let tt = DatasetManifest::new(
            Purpose::Tt,
            vec![ImageRecord::new("t", "t.png").with_label(TypeLabel::TextOnly)],
        );
        assert!(tt.validate().is_ok());
    }

    #[test]
    fn labels_parse_case_insensitively() {
        assert_eq!("figure_only".parse::<TypeLabel>().unwrap(), TypeLabel::FigureOnly);
        assert!("logo".parse::<TypeLabel>().is_err());
    }
}
