//! Manifest files: one sample per CSV row.
//!
//! Columns, in any order, with a header row:
//! `sample_id,subject_id,onset,apex,flow,landmarks,aus[,emotion]`.
//! A row gives either `onset` and `apex` frames or a precomputed `flow`
//! file; the unused cells stay empty. `aus` lists AU codes joined by `+`
//! (`4+12`, `AU4+AU12`, `L12`), empty for none. Paths are relative to the
//! manifest's directory. Row numbers in errors are file line numbers.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::task::AuTaskSpec;

/// Highest AU code accepted as a label.
pub const MAX_AU_CODE: u32 = 64;

pub const HEADER: [&str; 8] = ["sample_id", "subject_id", "onset", "apex", "flow", "landmarks", "aus", "emotion"];

#[derive(Debug, Clone, PartialEq)]
pub enum MotionSource {
    Frames { onset: PathBuf, apex: PathBuf },
    Flow(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: String,
    pub motion: MotionSource,
    pub landmarks: PathBuf,
    /// Binary labels in task order.
    pub labels: Vec<u8>,
    pub emotion: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    /// Whether the file has an emotion column.
    pub has_emotion_column: bool,
}

impl Manifest {
    pub fn has_emotion_labels(&self) -> bool {
        self.has_emotion_column && self.samples.iter().any(|s| s.emotion.is_some())
    }
}

/// Parses one AU code: `12`, `AU12`, `L12`, `R12`.
pub fn parse_au_code(token: &str) -> Option<u32> {
    let t = token.trim();
    let t = t.strip_prefix("AU").or_else(|| t.strip_prefix("au")).unwrap_or(t);
    let t = t.strip_prefix(['L', 'R']).unwrap_or(t);
    let code: u32 = t.parse().ok()?;
    (1..=MAX_AU_CODE).contains(&code).then_some(code)
}

/// Loads and validates a manifest against `task`. Valid AU codes outside
/// the task are ignored; a row left with no task AU keeps all-zero labels
/// unless `drop_unlabeled` is set.
pub fn load_manifest(path: &Path, task: &AuTaskSpec, drop_unlabeled: bool) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, task, drop_unlabeled)
}

pub fn parse_manifest(text: &str, base: &Path, task: &AuTaskSpec, drop_unlabeled: bool) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::MalformedRow { row: 1, detail: e.to_string() })?
        .clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::MalformedRow { row: 1, detail: format!("header lacks `{name}`") })
    };
    let (c_id, c_subject, c_landmarks, c_aus) = (need("sample_id")?, need("subject_id")?, need("landmarks")?, need("aus")?);
    let (c_onset, c_apex, c_flow, c_emotion) = (col("onset"), col("apex"), col("flow"), col("emotion"));
    if c_flow.is_none() && (c_onset.is_none() || c_apex.is_none()) {
        return Err(Error::MalformedRow { row: 1, detail: "header needs `flow` or both `onset` and `apex`".into() });
    }

    let mut samples = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::MalformedRow { row, detail: e.to_string() })?;
        if record.len() != header.len() {
            return Err(Error::MalformedRow {
                row,
                detail: format!("{} cells for {} columns", record.len(), header.len()),
            });
        }
        let cell = |c: Option<usize>| c.map(|c| record[c].to_string()).filter(|s| !s.is_empty());
        let id = cell(Some(c_id)).ok_or(Error::MalformedRow { row, detail: "empty sample_id".into() })?;
        let subject = cell(Some(c_subject)).ok_or(Error::MalformedRow { row, detail: "empty subject_id".into() })?;
        if !seen.insert(id.clone()) {
            return Err(Error::MalformedRow { row, detail: format!("duplicate sample_id `{id}`") });
        }
        let resolve = |rel: String| -> Result<PathBuf> {
            let p = base.join(rel);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::MissingFile { row, path: p })
            }
        };
        let motion = match (cell(c_flow), cell(c_onset), cell(c_apex)) {
            (Some(f), None, None) => MotionSource::Flow(resolve(f)?),
            (None, Some(o), Some(a)) => MotionSource::Frames { onset: resolve(o)?, apex: resolve(a)? },
            _ => {
                return Err(Error::MalformedRow { row, detail: "give either flow or both onset and apex".into() })
            }
        };
        let landmarks = resolve(
            cell(Some(c_landmarks)).ok_or(Error::MalformedRow { row, detail: "empty landmarks".into() })?,
        )?;
        let mut labels = vec![0u8; task.len()];
        for token in record[c_aus].split('+').map(str::trim).filter(|t| !t.is_empty()) {
            let code = parse_au_code(token).ok_or_else(|| Error::UnknownAULabel { row, label: token.to_string() })?;
            if let Some(n) = task.position(code) {
                labels[n] = 1;
            }
        }
        if drop_unlabeled && labels.iter().all(|y| *y == 0) {
            continue;
        }
        samples.push(Sample { id, subject, motion, landmarks, labels, emotion: cell(c_emotion) });
    }
    Ok(Manifest { samples, has_emotion_column: c_emotion.is_some() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::default_task_spec;

    fn fixture() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a.png", "b.png", "l.txt", "f.flow"] {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        dir
    }

    #[test]
    fn parses_rows() {
        let dir = fixture();
        let task = default_task_spec("casme2").unwrap();
        let text = "sample_id,subject_id,onset,apex,flow,landmarks,aus\n\
                    x1,s1,a.png,b.png,,l.txt,AU4+12\n\
                    x2,s1,,,f.flow,l.txt,\n\
                    x3,s2,a.png,b.png,,l.txt,R1+6\n";
        let m = parse_manifest(text, dir.path(), &task, false).unwrap();
        assert_eq!(m.samples.len(), 3);
        let subjects: std::collections::BTreeSet<_> = m.samples.iter().map(|s| &s.subject).collect();
        assert_eq!(subjects.len(), 2);
        assert_eq!(m.samples[0].labels, vec![0, 0, 1, 0, 1, 0, 0, 0]);
        assert_eq!(m.samples[1].labels, vec![0; 8]);
        // AU6 is a valid code outside the task.
        assert_eq!(m.samples[2].labels, vec![1, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(m.samples[1].motion, MotionSource::Flow(_)));
        assert!(!m.has_emotion_labels());
        let kept = parse_manifest(text, dir.path(), &task, true).unwrap();
        assert_eq!(kept.samples.len(), 2);
    }

    #[test]
    fn error_paths() {
        let dir = fixture();
        let task = default_task_spec("casme2").unwrap();
        let head = "sample_id,subject_id,onset,apex,flow,landmarks,aus,emotion\n";
        let missing = format!("{head}x1,s1,a.png,b.png,,nope.txt,4,negative\n");
        match parse_manifest(&missing, dir.path(), &task, false) {
            Err(Error::MissingFile { row: 2, path }) => assert!(path.ends_with("nope.txt")),
            other => panic!("{other:?}"),
        }
        let unknown = format!("{head}x1,s1,a.png,b.png,,l.txt,AU99,negative\n");
        assert!(matches!(
            parse_manifest(&unknown, dir.path(), &task, false),
            Err(Error::UnknownAULabel { row: 2, .. })
        ));
        let short = format!("{head}x1,s1,a.png\n");
        assert!(matches!(parse_manifest(&short, dir.path(), &task, false), Err(Error::MalformedRow { row: 2, .. })));
        let both = format!("{head}x1,s1,a.png,b.png,f.flow,l.txt,4,\n");
        assert!(matches!(parse_manifest(&both, dir.path(), &task, false), Err(Error::MalformedRow { .. })));
        let ok = format!("{head}x1,s1,a.png,b.png,,l.txt,4,negative\n");
        let m = parse_manifest(&ok, dir.path(), &task, false).unwrap();
        assert!(m.has_emotion_labels());
        assert_eq!(m.samples[0].emotion.as_deref(), Some("negative"));
    }

    #[test]
    fn au_codes() {
        assert_eq!(parse_au_code("AU12"), Some(12));
        assert_eq!(parse_au_code("L10"), Some(10));
        assert_eq!(parse_au_code("99"), None);
        assert_eq!(parse_au_code("x"), None);
    }
}
