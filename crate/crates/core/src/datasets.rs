//! Loading and validation of role/appearance and implicit-assumption
//! editing benchmarks.
//!
//! Both formats share the same JSON envelope: `{version, split, entries}`.
//! Every entry carries exactly five positive and five negative evaluation
//! records. Validation is total: a malformed file produces an error naming
//! the entry and field, never a partial dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::editor::EditRequest;
use crate::error::{Error, Result};
use crate::value_opt::TargetSpec;

pub const ROAD_DEFAULT_LAYER: usize = 7;
pub const TIME_DEFAULT_LAYER: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Test,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Role,
    Appearance,
}

/// One generalization probe: a related prompt plus its target-variant and
/// source-variant descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveRecord {
    pub prompt: String,
    pub positive_new: String,
    pub positive_old: String,
}

/// One specificity probe: an unrelated prompt plus the descriptor it might
/// wrongly acquire and the one it should keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeRecord {
    pub prompt: String,
    pub negative_new: String,
    pub negative_old: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadEntry {
    pub id: String,
    pub edit_prompt: String,
    pub subject: String,
    pub source: String,
    pub target: String,
    pub kind: EntryKind,
    pub positives: Vec<PositiveRecord>,
    pub negatives: Vec<NegativeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEntry {
    pub id: String,
    /// Under-specified prompt, e.g. "a pack of roses".
    pub edit_prompt: String,
    /// Specified prompt, e.g. "a pack of blue roses".
    pub target_prompt: String,
    pub subject: String,
    pub positives: Vec<PositiveRecord>,
    pub negatives: Vec<NegativeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile<E> {
    pub version: u32,
    pub split: Split,
    pub entries: Vec<E>,
}

pub type RoadDataset = DatasetFile<RoadEntry>;
pub type TimeDataset = DatasetFile<TimeEntry>;

fn check_cardinality(
    id: &str,
    positives: usize,
    negatives: usize,
) -> Result<()> {
    if positives != 5 {
        return Err(Error::Validation(format!(
            "entry {id:?}: positives: expected exactly 5, found {positives}"
        )));
    }
    if negatives != 5 {
        return Err(Error::Validation(format!(
            "entry {id:?}: negatives: expected exactly 5, found {negatives}"
        )));
    }
    Ok(())
}

fn contains_lowercase(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

impl RoadEntry {
    pub fn validate(&self) -> Result<()> {
        check_cardinality(&self.id, self.positives.len(), self.negatives.len())?;
        if !contains_lowercase(&self.edit_prompt, &self.subject) {
            return Err(Error::Validation(format!(
                "entry {:?}: subject: {:?} does not occur in edit_prompt {:?}",
                self.id, self.subject, self.edit_prompt
            )));
        }
        if self.kind == EntryKind::Appearance && self.source != self.edit_prompt {
            return Err(Error::Validation(format!(
                "entry {:?}: source: appearance entries must have source equal to edit_prompt",
                self.id
            )));
        }
        Ok(())
    }
}

impl TimeEntry {
    pub fn validate(&self) -> Result<()> {
        check_cardinality(&self.id, self.positives.len(), self.negatives.len())?;
        if !contains_lowercase(&self.edit_prompt, &self.subject) {
            return Err(Error::Validation(format!(
                "entry {:?}: subject: {:?} does not occur in edit_prompt {:?}",
                self.id, self.subject, self.edit_prompt
            )));
        }
        if !contains_lowercase(&self.target_prompt, &self.subject) {
            return Err(Error::Validation(format!(
                "entry {:?}: target_prompt: must contain the subject {:?}",
                self.id, self.subject
            )));
        }
        Ok(())
    }
}

fn validate_dataset<E>(file: &DatasetFile<E>, ids: Vec<&str>, validate: impl Fn(&E) -> Result<()>) -> Result<()> {
    if file.entries.is_empty() {
        return Err(Error::Validation("dataset contains no entries".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation(format!("duplicate entry id {id:?}")));
        }
    }
    for entry in &file.entries {
        validate(entry)?;
    }
    Ok(())
}

impl RoadDataset {
    pub fn validate(&self) -> Result<()> {
        validate_dataset(
            self,
            self.entries.iter().map(|e| e.id.as_str()).collect(),
            RoadEntry::validate,
        )
    }
}

impl TimeDataset {
    pub fn validate(&self) -> Result<()> {
        validate_dataset(
            self,
            self.entries.iter().map(|e| e.id.as_str()).collect(),
            TimeEntry::validate,
        )
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn load_road(path: &Path) -> Result<RoadDataset> {
    let file: RoadDataset = load_json(path)?;
    file.validate()?;
    Ok(file)
}

pub fn load_time(path: &Path) -> Result<TimeDataset> {
    let file: TimeDataset = load_json(path)?;
    file.validate()?;
    Ok(file)
}

pub fn save_road(file: &RoadDataset, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(file)
        .map_err(|e| Error::Validation(format!("dataset serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Map a role/appearance entry onto an edit request. `layer` falls back to
/// the format's default edit layer when unspecified.
pub fn road_to_edit_request(
    entry: &RoadEntry,
    layer: Option<usize>,
    templates: &[String],
    contrastive_texts: Vec<String>,
) -> Result<EditRequest> {
    entry.validate()?;
    Ok(EditRequest {
        edit_prompt: entry.edit_prompt.clone(),
        subject: entry.subject.clone(),
        source_text: entry.source.clone(),
        target: TargetSpec::Text(entry.target.clone()),
        layer: layer.unwrap_or(ROAD_DEFAULT_LAYER),
        key_templates: templates.to_vec(),
        contrastive_texts,
    })
}

/// Map an implicit-assumption entry onto an edit request: the target is the
/// specified prompt, the source is the under-specified prompt itself.
pub fn time_to_edit_request(
    entry: &TimeEntry,
    layer: Option<usize>,
    templates: &[String],
    contrastive_texts: Vec<String>,
) -> Result<EditRequest> {
    entry.validate()?;
    Ok(EditRequest {
        edit_prompt: entry.edit_prompt.clone(),
        subject: entry.subject.clone(),
        source_text: entry.edit_prompt.clone(),
        target: TargetSpec::Text(entry.target_prompt.clone()),
        layer: layer.unwrap_or(TIME_DEFAULT_LAYER),
        key_templates: templates.to_vec(),
        contrastive_texts,
    })
}

/// Uniform evaluation view over both entry formats: the efficacy probe plus
/// the positive and negative records.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub edit_prompt: String,
    /// Descriptor the edited model should now match on the edit prompt.
    pub efficacy_new: String,
    /// Descriptor of the pre-edit association.
    pub efficacy_old: String,
    pub positives: Vec<PositiveRecord>,
    pub negatives: Vec<NegativeRecord>,
}

impl From<&RoadEntry> for EvalCase {
    fn from(entry: &RoadEntry) -> Self {
        Self {
            id: entry.id.clone(),
            edit_prompt: entry.edit_prompt.clone(),
            efficacy_new: entry.target.clone(),
            efficacy_old: entry.source.clone(),
            positives: entry.positives.clone(),
            negatives: entry.negatives.clone(),
        }
    }
}

impl From<&TimeEntry> for EvalCase {
    fn from(entry: &TimeEntry) -> Self {
        Self {
            id: entry.id.clone(),
            edit_prompt: entry.edit_prompt.clone(),
            efficacy_new: entry.target_prompt.clone(),
            efficacy_old: entry.edit_prompt.clone(),
            positives: entry.positives.clone(),
            negatives: entry.negatives.clone(),
        }
    }
}
