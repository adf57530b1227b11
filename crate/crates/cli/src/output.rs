//! Output files. Everything a command produces is collected in memory and
//! written by [`write_all`] once the run has finished.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Version stamped into every JSON document and JSON line.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

impl Artifact {
    pub fn text(name: &str, contents: String) -> Self {
        Self { name: name.into(), contents }
    }

    /// A JSON document `{format_version, command, ..body}`.
    pub fn json<T: Serialize>(name: &str, command: &str, body: &T) -> Result<Self> {
        let doc = Envelope { format_version: FORMAT_VERSION, command, body };
        let mut contents = serde_json::to_string_pretty(&doc)?;
        contents.push('\n');
        Ok(Self::text(name, contents))
    }

    /// One JSON object per line, each carrying `format_version`.
    pub fn json_lines<T: Serialize>(name: &str, rows: &[T]) -> Result<Self> {
        let mut contents = String::new();
        for row in rows {
            contents.push_str(&serde_json::to_string(&Line { format_version: FORMAT_VERSION, row })?);
            contents.push('\n');
        }
        Ok(Self::text(name, contents))
    }

    pub fn is_json(&self) -> bool {
        self.name.ends_with(".json") || self.name.ends_with(".jsonl")
    }
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    format_version: u32,
    command: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct Line<'a, T> {
    format_version: u32,
    #[serde(flatten)]
    row: &'a T,
}

pub fn write_all(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    artifacts
        .iter()
        .map(|a| {
            let path = dir.join(&a.name);
            fs::write(&path, &a.contents).with_context(|| format!("writing {}", path.display()))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        t: f64,
        ok: bool,
    }

    #[test]
    fn documents_and_lines_are_versioned() {
        let doc = Artifact::json("a.json", "simulate", &Row { t: 0.1, ok: true }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&doc.contents).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["command"], "simulate");
        assert_eq!(v["t"], 0.1);

        let lines = Artifact::json_lines("a.jsonl", &[Row { t: 0.5, ok: false }, Row { t: 1.0, ok: true }]).unwrap();
        assert_eq!(lines.contents, "{\"format_version\":1,\"t\":0.5,\"ok\":false}\n{\"format_version\":1,\"t\":1.0,\"ok\":true}\n");
        assert!(lines.is_json() && !Artifact::text("x.csv", String::new()).is_json());
    }

    #[test]
    fn writes_into_a_fresh_directory() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("nested");
        let paths = write_all(&target, &[Artifact::text("x.csv", "1,2\n".into())]).unwrap();
        assert_eq!(fs::read_to_string(&paths[0]).unwrap(), "1,2\n");
    }
}
