//! Line-delimited JSON task records.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskKind;

/// One line of a task corpus.
///
/// Pair tasks (`cd`, `cs`, `mnp`) carry `x1`, `x2` and a binary `label`;
/// generation tasks (`cm`, `cg`) carry `source` and `target`.
///
/// ```
/// use xlprompt_core::data::RawRecord;
///
/// let line = r#"{"id":"7","task":"cd","lang":"java","x1":"int a;","x2":"int b;","label":1}"#;
/// let rec: RawRecord = serde_json::from_str(line).unwrap();
/// rec.validate().unwrap();
/// assert_eq!(rec.label, Some(1));
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub id: String,
    pub task: TaskKind,
    pub lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

/// How a text field is treated by the length window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Code,
    NaturalLanguage,
}

/// Presence flags of named record fields.
type FieldChecks<'a> = &'a [(&'a str, bool)];

impl RawRecord {
    pub fn pair(id: impl Into<String>, task: TaskKind, lang: impl Into<String>, x1: String, x2: String, label: u8) -> Self {
        Self {
            id: id.into(),
            task,
            lang: lang.into(),
            x1: Some(x1),
            x2: Some(x2),
            label: Some(label),
            source: None,
            target: None,
        }
    }

    pub fn generative(id: impl Into<String>, task: TaskKind, lang: impl Into<String>, source: String, target: String) -> Self {
        Self {
            id: id.into(),
            task,
            lang: lang.into(),
            x1: None,
            x2: None,
            label: None,
            source: Some(source),
            target: Some(target),
        }
    }

    /// Checks that exactly the fields required by `task` are present.
    /// The error message names the first offending field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("field `id` must not be empty".into());
        }
        if self.lang.is_empty() {
            return Err("field `lang` must not be empty".into());
        }
        let (required, forbidden): (FieldChecks, FieldChecks) = if self.task.is_classification() {
            (
                &[("x1", self.x1.is_some()), ("x2", self.x2.is_some()), ("label", self.label.is_some())],
                &[("source", self.source.is_some()), ("target", self.target.is_some())],
            )
        } else {
            (
                &[("source", self.source.is_some()), ("target", self.target.is_some())],
                &[("x1", self.x1.is_some()), ("x2", self.x2.is_some()), ("label", self.label.is_some())],
            )
        };
        if let Some((name, _)) = required.iter().find(|(_, present)| !present) {
            return Err(format!("missing required field `{name}` for task {}", self.task));
        }
        if let Some((name, _)) = forbidden.iter().find(|(_, present)| *present) {
            return Err(format!("field `{name}` is not allowed for task {}", self.task));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(format!("field `label` must be 0 or 1, got {l}"));
            }
        }
        Ok(())
    }

    /// Text fields with their role, in a fixed order.
    pub fn fields(&self) -> Vec<(FieldKind, &str)> {
        use FieldKind::{Code, NaturalLanguage as Nl};
        let roles: [(Option<&String>, FieldKind); 4] = match self.task {
            TaskKind::Cd => [(self.x1.as_ref(), Code), (self.x2.as_ref(), Code), (None, Code), (None, Code)],
            TaskKind::Cs => [(self.x1.as_ref(), Nl), (self.x2.as_ref(), Code), (None, Code), (None, Code)],
            TaskKind::Mnp => [(self.x1.as_ref(), Code), (self.x2.as_ref(), Nl), (None, Code), (None, Code)],
            TaskKind::Cm => [(None, Code), (None, Code), (self.source.as_ref(), Code), (self.target.as_ref(), Nl)],
            TaskKind::Cg => [(None, Code), (None, Code), (self.source.as_ref(), Nl), (self.target.as_ref(), Code)],
        };
        roles
            .into_iter()
            .filter_map(|(text, kind)| text.map(|t| (kind, t.as_str())))
            .collect()
    }

    /// Applies `f` to every code field in place.
    pub fn map_code(&mut self, mut f: impl FnMut(&str) -> String) {
        let task = self.task;
        let slots: [(&mut Option<String>, bool); 4] = [
            (&mut self.x1, matches!(task, TaskKind::Cd | TaskKind::Mnp)),
            (&mut self.x2, matches!(task, TaskKind::Cd | TaskKind::Cs)),
            (&mut self.source, task == TaskKind::Cm),
            (&mut self.target, task == TaskKind::Cg),
        ];
        for (slot, is_code) in slots {
            if is_code {
                if let Some(text) = slot.as_mut() {
                    *text = f(text);
                }
            }
        }
    }
}

/// Reads and validates a line-delimited JSON file. Blank lines are skipped;
/// any malformed line aborts with its 1-based line number.
pub fn load_records(path: &Path) -> Result<Vec<RawRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}:{line_no}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |message: String| Error::Validation {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        record.validate().map_err(invalid)?;
        if !ids.insert(record.id.clone()) {
            return Err(invalid(format!("duplicate id `{}`", record.id)));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn records_to_jsonl(records: &[RawRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(records_to_jsonl(records)?.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn valid_cd_line() {
        let f = write(&[r#"{"id":"a","task":"cd","lang":"go","x1":"x","x2":"y","label":1}"#]);
        let recs = load_records(f.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, Some(1));
    }

    #[test]
    fn missing_label_names_field_and_line() {
        let f = write(&[
            r#"{"id":"a","task":"cd","lang":"go","x1":"x","x2":"y","label":1}"#,
            r#"{"id":"b","task":"cd","lang":"go","x1":"x","x2":"y"}"#,
        ]);
        match load_records(f.path()) {
            Err(Error::Validation { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_duplicates_are_rejected() {
        let f = write(&[r#"{"id":"a","task":"cm","lang":"go","source":"x","target":"y","extra":1}"#]);
        assert!(matches!(load_records(f.path()), Err(Error::Validation { line: 1, .. })));
        let f = write(&[
            r#"{"id":"a","task":"cm","lang":"go","source":"x","target":"y"}"#,
            "",
            r#"{"id":"a","task":"cm","lang":"go","source":"x","target":"z"}"#,
        ]);
        assert!(matches!(load_records(f.path()), Err(Error::Validation { line: 3, .. })));
    }

    #[test]
    fn fields_by_task() {
        let cs = RawRecord::pair("1", TaskKind::Cs, "go", "find max".into(), "func f(){}".into(), 1);
        assert_eq!(cs.fields(), vec![(FieldKind::NaturalLanguage, "find max"), (FieldKind::Code, "func f(){}")]);
        let mut cg = RawRecord::generative("2", TaskKind::Cg, "go", "add".into(), "a+b".into());
        cg.map_code(|s| s.replace('+', " + "));
        assert_eq!(cg.target.as_deref(), Some("a + b"));
        assert_eq!(cg.source.as_deref(), Some("add"));
    }

    #[test]
    fn load_save_round_trip() {
        let mut lines = Vec::new();
        for i in 0..10_000 {
            let r = if i % 3 == 0 {
                RawRecord::generative(format!("g{i}"), TaskKind::Cm, "python", format!("def f{i}(): pass"), "does \"nothing\"".into())
            } else {
                RawRecord::pair(format!("p{i}"), TaskKind::Cd, "java", format!("int a = {i};"), "int b = 2;\n".into(), (i % 2) as u8)
            };
            lines.push(serde_json::to_string(&r).unwrap());
        }
        let original = lines.join("\n") + "\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in.jsonl");
        fs::write(&p, &original).unwrap();
        let recs = load_records(&p).unwrap();
        let q = dir.path().join("out.jsonl");
        save_records(&q, &recs).unwrap();
        assert_eq!(fs::read_to_string(&q).unwrap(), original);
    }
}
