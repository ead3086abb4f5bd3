//! Corpus curation: embedding deduplication, quality buckets, two-stage
//! resizing and the latent cache.

mod cache;
mod dedup;
mod resize;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cache::{build_latent_cache, CacheEntry, CacheManifest, CacheOptions, CACHE_FILE, CACHE_MANIFEST};
pub use dedup::{
    dbscan_cosine, dedup_converge, dedup_round, partition_bounds, read_embeddings, write_embeddings,
    Clustering, DedupConfig, DedupReport, DedupState, EmbeddingRecord, RoundAudit,
};
pub use resize::{apply_resize, stage_resize, ResizePlan, Stage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityTag {
    Excluded,
    Average,
    Good,
    Excellent,
}

impl QualityTag {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityTag::Excluded => "excluded",
            QualityTag::Average => "average",
            QualityTag::Good => "good",
            QualityTag::Excellent => "excellent",
        }
    }
}

impl fmt::Display for QualityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `(6,10]` excellent, `(5.2,6]` good, `[4,5.2]` average, `[1,4)` excluded.
pub fn score_bucket(score: f64) -> Result<QualityTag> {
    if !(1.0..=10.0).contains(&score) {
        return Err(Error::Validation(format!("quality score {score} outside [1, 10]")));
    }
    Ok(if score > 6.0 {
        QualityTag::Excellent
    } else if score > 5.2 {
        QualityTag::Good
    } else if score >= 4.0 {
        QualityTag::Average
    } else {
        QualityTag::Excluded
    })
}

/// One line of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    #[serde(default)]
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_tag: Option<QualityTag>,
}

impl CorpusRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("record id is empty".into()));
        }
        if let (Some(score), Some(tag)) = (self.quality_score, self.quality_tag) {
            let expected = score_bucket(score)?;
            if expected != tag {
                return Err(Error::Validation(format!(
                    "record {}: score {score} belongs to `{expected}`, tagged `{tag}`",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Caption with the quality tag appended, as seen by the text encoder.
    pub fn prompt(&self) -> String {
        match self.quality_tag {
            Some(tag) if self.caption.is_empty() => tag.to_string(),
            Some(tag) => format!("{} {tag}", self.caption),
            None => self.caption.clone(),
        }
    }
}

/// Parses a JSON-lines manifest. Blank lines are ignored; every malformed
/// line is reported with its 1-based number.
pub fn parse_manifest(text: &str) -> Result<Vec<CorpusRecord>> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<CorpusRecord>(line)
            .map_err(|e| Error::Validation(e.to_string()))
            .and_then(|r| r.validate().map(|_| r));
        match parsed {
            Ok(r) => records.push(r),
            Err(e) => problems.push(format!("line {}: {e}", i + 1)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(format!("malformed manifest: {}", problems.join("; "))));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate record id `{}`", r.id)));
        }
    }
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_manifest(&text).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_manifest(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::file(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

/// Tags every scored record; records without a score are left untouched.
pub fn annotate_scores(records: &mut [CorpusRecord]) -> Result<()> {
    let mut problems = Vec::new();
    for r in records.iter_mut() {
        if let Some(s) = r.quality_score {
            match score_bucket(s) {
                Ok(tag) => r.quality_tag = Some(tag),
                Err(e) => problems.push(format!("{}: {e}", r.id)),
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems.join("; ")))
    }
}
