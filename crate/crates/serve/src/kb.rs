//! Bilingual remedy knowledge base.
//!
//! ```json
//! {"classes": [{"key": "cavity_spot", "disease_name_en": "...", "disease_name_bn": "...",
//!               "cure_en": "...", "cure_bn": "...", "medicine": "..."}]}
//! ```

use std::path::Path;

use carrot_core::dataset::{CarrotClass, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN: &str = include_str!("../assets/remedies.json");

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("remedy file is not valid JSON for the schema: {0}")]
    Parse(String),
    #[error("remedy entry for '{0}' is missing")]
    MissingClass(&'static str),
    #[error("remedy entry '{key}' has an empty '{field}' field")]
    EmptyField { key: String, field: &'static str },
    #[error("remedy entry '{0}' appears more than once")]
    DuplicateKey(String),
    #[error("remedy entry '{0}' does not name a known class")]
    UnknownKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemedyEntry {
    pub key: String,
    pub disease_name_en: String,
    pub disease_name_bn: String,
    pub cure_en: String,
    pub cure_bn: String,
    pub medicine: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KbFile {
    classes: Vec<RemedyEntry>,
}

/// Exactly one validated entry per class, indexed by class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemedyTable {
    entries: Vec<RemedyEntry>,
}

impl RemedyTable {
    pub fn get(&self, class: CarrotClass) -> &RemedyEntry {
        &self.entries[class.id()]
    }

    pub fn entries(&self) -> &[RemedyEntry] {
        &self.entries
    }

    /// The placeholder table shipped with the crate.
    pub fn builtin() -> Self {
        parse_remedy_kb(BUILTIN).expect("bundled remedy table is valid")
    }
}

pub fn parse_remedy_kb(text: &str) -> Result<RemedyTable, KbError> {
    let file: KbFile = serde_json::from_str(text).map_err(|e| KbError::Parse(e.to_string()))?;
    let mut slots: Vec<Option<RemedyEntry>> = vec![None; NUM_CLASSES];
    for entry in file.classes {
        let class: CarrotClass = entry.key.parse().map_err(|_| KbError::UnknownKey(entry.key.clone()))?;
        let fields = [
            ("disease_name_en", &entry.disease_name_en),
            ("disease_name_bn", &entry.disease_name_bn),
            ("cure_en", &entry.cure_en),
            ("cure_bn", &entry.cure_bn),
            ("medicine", &entry.medicine),
        ];
        if let Some((field, _)) = fields.iter().find(|(_, v)| v.trim().is_empty()) {
            return Err(KbError::EmptyField { key: entry.key.clone(), field });
        }
        let slot = &mut slots[class.id()];
        if slot.is_some() {
            return Err(KbError::DuplicateKey(entry.key));
        }
        *slot = Some(entry);
    }
    let entries = slots
        .into_iter()
        .zip(CarrotClass::ALL)
        .map(|(e, class)| e.ok_or(KbError::MissingClass(class.key())))
        .collect::<Result<_, _>>()?;
    Ok(RemedyTable { entries })
}

pub fn load_remedy_kb(path: &Path) -> Result<RemedyTable, KbError> {
    let text = std::fs::read_to_string(path).map_err(|source| KbError::Io { path: path.to_path_buf(), source })?;
    parse_remedy_kb(&text)
}
