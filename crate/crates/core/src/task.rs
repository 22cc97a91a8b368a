//! Target action units, their landmark regions and prompt pairs.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of points produced by the standard 68-point landmark layout.
pub const NUM_LANDMARKS: usize = 68;

/// One target AU: its FACS code, landmark indices (0-based) and prompt pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuEntry {
    pub id: u32,
    pub landmarks: Vec<usize>,
    pub positive: String,
    pub negative: String,
}

/// Ordered list of target AUs. Order defines the AU axis of every tensor
/// and label vector in the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuTaskSpec {
    #[serde(rename = "au")]
    pub aus: Vec<AuEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskSpecViolation {
    EmptyTask,
    DuplicateAU(u32),
    EmptyLandmarkSet(u32),
    LandmarkOutOfRange { au: u32, index: usize },
    MissingPrompt(u32),
    IdenticalPrompts(u32),
}

impl fmt::Display for TaskSpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyTask => write!(f, "no AUs listed"),
            Self::DuplicateAU(au) => write!(f, "AU{au} listed more than once"),
            Self::EmptyLandmarkSet(au) => write!(f, "AU{au} has no landmarks"),
            Self::LandmarkOutOfRange { au, index } => {
                write!(f, "AU{au} landmark index {index} outside [0, 67]")
            }
            Self::MissingPrompt(au) => write!(f, "AU{au} is missing a prompt"),
            Self::IdenticalPrompts(au) => {
                write!(f, "AU{au} positive and negative prompts are identical")
            }
        }
    }
}

impl AuTaskSpec {
    pub fn len(&self) -> usize {
        self.aus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aus.is_empty()
    }

    pub fn au_ids(&self) -> Vec<u32> {
        self.aus.iter().map(|a| a.id).collect()
    }

    pub fn position(&self, au: u32) -> Option<usize> {
        self.aus.iter().position(|a| a.id == au)
    }

    /// Keeps only the listed AUs, in the order given.
    pub fn subset(&self, ids: &[u32]) -> Result<AuTaskSpec> {
        let aus = ids
            .iter()
            .map(|id| {
                self.aus
                    .iter()
                    .find(|a| a.id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("AU{id} is not part of the task")))
            })
            .collect::<Result<Vec<_>>>()?;
        validate_task_spec(AuTaskSpec { aus })
    }

    /// Reads a task override file (TOML, one `[[au]]` table per AU).
    pub fn from_file(path: &Path) -> Result<AuTaskSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading task file {}", path.display()), e))?;
        let spec: AuTaskSpec = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("task file {}: {e}", path.display())))?;
        validate_task_spec(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("task spec serializes")
    }
}

/// Returns the task unchanged iff every invariant holds; otherwise reports
/// all violations at once.
pub fn validate_task_spec(spec: AuTaskSpec) -> Result<AuTaskSpec> {
    let mut violations = Vec::new();
    if spec.aus.is_empty() {
        violations.push(TaskSpecViolation::EmptyTask);
    }
    let mut seen = HashSet::new();
    for au in &spec.aus {
        if !seen.insert(au.id) {
            violations.push(TaskSpecViolation::DuplicateAU(au.id));
        }
        if au.landmarks.is_empty() {
            violations.push(TaskSpecViolation::EmptyLandmarkSet(au.id));
        }
        for &index in &au.landmarks {
            if index >= NUM_LANDMARKS {
                violations.push(TaskSpecViolation::LandmarkOutOfRange { au: au.id, index });
            }
        }
        if au.positive.trim().is_empty() || au.negative.trim().is_empty() {
            violations.push(TaskSpecViolation::MissingPrompt(au.id));
        } else if au.positive == au.negative {
            violations.push(TaskSpecViolation::IdenticalPrompts(au.id));
        }
    }
    if violations.is_empty() {
        Ok(spec)
    } else {
        Err(Error::InvalidTaskSpec(violations))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Casme2,
    Samm,
}

impl std::str::FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "casme2" => Ok(Dataset::Casme2),
            "samm" => Ok(Dataset::Samm),
            _ => Err(Error::UnknownDataset(s.to_string())),
        }
    }
}

const BROW: &[usize] = &[19, 20, 21, 22, 23, 24];
const LOWER_LID: &[usize] = &[38, 41, 44, 47];
const MOUTH_CORNER: &[usize] = &[48, 54];
const MOUTH_SIDES: &[usize] = &[55, 59, 60, 64];
const CHIN: &[usize] = &[7, 8, 9, 57];

/// AU code, landmark set, region phrase, action phrase.
const AU_TABLE: &[(u32, &[usize], &str, &str)] = &[
    (1, BROW, "The inner eyebrows are", "raising"),
    (2, BROW, "The outer eyebrows are", "raising"),
    (4, BROW, "The eyebrows are", "lowering"),
    (7, LOWER_LID, "The lower eyelids are", "tightening"),
    (12, MOUTH_CORNER, "The lip corners are", "pulling up"),
    (14, MOUTH_SIDES, "The lip corners are", "dimpling"),
    (15, MOUTH_CORNER, "The lip corners are", "pulling down"),
    (17, CHIN, "The chin is", "raising"),
];

/// Table entry for a single AU code, with the default prompt pair.
pub fn default_au_entry(au: u32) -> Option<AuEntry> {
    AU_TABLE.iter().find(|(id, ..)| *id == au).map(|&(id, lm, region, action)| AuEntry {
        id,
        landmarks: lm.to_vec(),
        positive: format!("{region} {action}"),
        negative: format!("{region} not {action}"),
    })
}

pub fn default_task_spec(dataset: &str) -> Result<AuTaskSpec> {
    let ids: &[u32] = match dataset.parse::<Dataset>()? {
        Dataset::Casme2 => &[1, 2, 4, 7, 12, 14, 15, 17],
        Dataset::Samm => &[2, 4, 7, 12],
    };
    let aus = ids.iter().map(|&id| default_au_entry(id).expect("table entry")).collect();
    validate_task_spec(AuTaskSpec { aus })
}

/// Resolves a task reference: a dataset name or a path to a task file.
pub fn resolve_task(reference: &str, base: Option<&Path>) -> Result<AuTaskSpec> {
    match reference.parse::<Dataset>() {
        Ok(_) => default_task_spec(reference),
        Err(_) => {
            let path = Path::new(reference);
            let path = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path.to_path_buf(),
            };
            if path.exists() {
                AuTaskSpec::from_file(&path)
            } else {
                Err(Error::UnknownDataset(reference.to_string()))
            }
        }
    }
}
