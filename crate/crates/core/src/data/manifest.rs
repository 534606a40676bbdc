use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::embedding::{read_embedding_file, SlideBag};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
    Survival,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
            Task::Survival => "survival",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Follow-up time and event indicator (`true` = event observed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    #[serde(serialize_with = "event_to_int", deserialize_with = "event_from_int")]
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool) -> Self {
        SurvivalRecord { time, event }
    }
}

fn event_to_int<S: Serializer>(event: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*event))
}

fn event_from_int<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(serde::de::Error::custom(format!("event must be 0 or 1, got {v}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Target(f64),
    Survival(SurvivalRecord),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            _ => None,
        }
    }

    pub fn target(&self) -> Option<f64> {
        match self {
            Label::Target(t) => Some(*t),
            _ => None,
        }
    }

    pub fn survival(&self) -> Option<SurvivalRecord> {
        match self {
            Label::Survival(r) => Some(*r),
            _ => None,
        }
    }

    fn from_json(value: &serde_json::Value, task: Task, slide_id: &str) -> Result<Self> {
        let bad = |what: &str| {
            Error::Validation(format!("slide {slide_id}: label {value} is not {what}"))
        };
        match task {
            Task::Classification => value
                .as_u64()
                .map(|c| Label::Class(c as usize))
                .ok_or_else(|| bad("a class index")),
            Task::Regression => {
                let t = value.as_f64().ok_or_else(|| bad("a real target"))?;
                ensure!(t.is_finite(), Validation, "slide {slide_id}: non-finite target");
                Ok(Label::Target(t))
            }
            Task::Survival => {
                let rec: SurvivalRecord = serde_json::from_value(value.clone())
                    .map_err(|e| bad(&format!("a survival record ({e})")))?;
                ensure!(
                    rec.time.is_finite() && rec.time > 0.0,
                    Validation,
                    "slide {slide_id}: survival time must be positive, got {}",
                    rec.time
                );
                Ok(Label::Survival(rec))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub embedding_path: PathBuf,
    pub split: Split,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetManifest {
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative embedding paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
struct RawManifest {
    task: Task,
    #[serde(default)]
    n_classes: Option<usize>,
    entries: Vec<RawEntry>,
}

#[derive(Deserialize)]
struct RawEntry {
    slide_id: String,
    patient_id: String,
    embedding_path: PathBuf,
    split: String,
    label: serde_json::Value,
}

impl DatasetManifest {
    /// Builds and validates a manifest. `n_classes` is inferred from the
    /// largest class label when not given.
    pub fn new(task: Task, n_classes: Option<usize>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut m = DatasetManifest {
            task,
            n_classes,
            entries,
            base_dir: PathBuf::from("."),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(text)?;
        let entries = raw
            .entries
            .into_iter()
            .map(|e| {
                Ok(ManifestEntry {
                    split: Split::parse(&e.split)?,
                    label: Label::from_json(&e.label, raw.task, &e.slide_id)?,
                    slide_id: e.slide_id,
                    patient_id: e.patient_id,
                    embedding_path: e.embedding_path,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut m = DatasetManifest::new(raw.task, raw.n_classes, entries)?;
        m.base_dir = base_dir.into();
        Ok(m)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    fn validate(&mut self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            ensure!(
                seen.insert(e.slide_id.as_str()),
                Validation,
                "duplicate slide_id {}",
                e.slide_id
            );
            let consistent = matches!(
                (self.task, &e.label),
                (Task::Classification, Label::Class(_))
                    | (Task::Regression, Label::Target(_))
                    | (Task::Survival, Label::Survival(_))
            );
            ensure!(
                consistent,
                Validation,
                "slide {}: label does not match task {}",
                e.slide_id,
                self.task
            );
        }
        match self.task {
            Task::Classification => {
                let max = self.entries.iter().filter_map(|e| e.label.class()).max();
                let inferred = max.map_or(0, |m| m + 1);
                match self.n_classes {
                    Some(c) => ensure!(
                        c >= inferred && c >= 1,
                        Validation,
                        "n_classes {c} but labels reach {}",
                        inferred.saturating_sub(1)
                    ),
                    None => self.n_classes = Some(inferred.max(1)),
                }
            }
            _ => self.n_classes = None,
        }
        if self.task == Task::Survival {
            let train: Vec<_> = self.split_entries(Split::Train).collect();
            ensure!(
                train.is_empty()
                    || train.iter().any(|e| e.label.survival().is_some_and(|r| r.event)),
                Validation,
                "survival train split has no events"
            );
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes.unwrap_or(1)
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    pub fn resolve_path(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.embedding_path.is_absolute() {
            entry.embedding_path.clone()
        } else {
            self.base_dir.join(&entry.embedding_path)
        }
    }

    /// Loads the bag behind an entry, carrying over its identity fields.
    pub fn load_bag(&self, entry: &ManifestEntry) -> Result<SlideBag> {
        let mut bag = read_embedding_file(self.resolve_path(entry))?;
        bag.slide_id = entry.slide_id.clone();
        bag.patient_id = entry.patient_id.clone();
        Ok(bag)
    }

    /// Loads every bag in manifest order.
    pub fn load_all(&self) -> Result<Vec<SlideBag>> {
        self.entries.iter().map(|e| self.load_bag(e)).collect()
    }
}

/// Reads a manifest; relative embedding paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_json_str(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DatasetManifest> {
        DatasetManifest::from_json_str(text, ".")
    }

    #[test]
    fn classes_inferred_from_labels() {
        let m = parse(
            r#"{"task":"classification","entries":[
              {"slide_id":"a","patient_id":"p","embedding_path":"a.emb","split":"train","label":0},
              {"slide_id":"b","patient_id":"q","embedding_path":"b.emb","split":"val","label":1}]}"#,
        )
        .unwrap();
        assert_eq!(m.n_classes, Some(2));
    }

    #[test]
    fn survival_train_without_events_rejected() {
        let err = parse(
            r#"{"task":"survival","entries":[
              {"slide_id":"a","patient_id":"p","embedding_path":"a.emb","split":"train","label":{"time":3.0,"event":0}},
              {"slide_id":"b","patient_id":"q","embedding_path":"b.emb","split":"test","label":{"time":1.0,"event":1}}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn unknown_split_rejected() {
        let err = parse(
            r#"{"task":"regression","entries":[
              {"slide_id":"a","patient_id":"p","embedding_path":"a.emb","split":"eval","label":1.5}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown split"), "{err}");
    }

    #[test]
    fn duplicate_ids_and_mismatched_labels_rejected() {
        let dup = parse(
            r#"{"task":"regression","entries":[
              {"slide_id":"a","patient_id":"p","embedding_path":"a.emb","split":"train","label":1.5},
              {"slide_id":"a","patient_id":"p","embedding_path":"b.emb","split":"train","label":2.5}]}"#,
        );
        assert!(dup.unwrap_err().to_string().contains("duplicate"));
        let mismatch = parse(
            r#"{"task":"classification","entries":[
              {"slide_id":"a","patient_id":"p","embedding_path":"a.emb","split":"train","label":{"time":1.0,"event":1}}]}"#,
        );
        assert!(matches!(mismatch, Err(Error::Validation(_))));
        let bad_time = parse(
            r#"{"task":"survival","entries":[
              {"slide_id":"a","patient_id":"p","embedding_path":"a.emb","split":"train","label":{"time":0.0,"event":1}}]}"#,
        );
        assert!(matches!(bad_time, Err(Error::Validation(_))));
    }

    #[test]
    fn json_roundtrip() {
        let m = DatasetManifest::new(
            Task::Survival,
            None,
            vec![ManifestEntry {
                slide_id: "s".into(),
                patient_id: "p".into(),
                embedding_path: "s.emb".into(),
                split: Split::Train,
                label: Label::Survival(SurvivalRecord::new(2.5, true)),
            }],
        )
        .unwrap();
        let text = m.to_json_string().unwrap();
        assert!(text.contains("\"event\": 1"));
        let back = parse(&text).unwrap();
        assert_eq!(back.entries, m.entries);
    }
}
