use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_error, Error, Result};

pub type ClassId = u16;

/// Reserved class id for void / unlabeled pixels.
pub const VOID_CLASS: ClassId = ClassId::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
    pub is_thing: bool,
}

/// Dense category set `0..D` with a thing/stuff partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    entries: Vec<ClassEntry>,
}

impl ClassTable {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("class table is empty".into()));
        }
        if entries.len() >= VOID_CLASS as usize {
            return Err(Error::Config(
                "class table collides with the void id".into(),
            ));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::Config(format!(
                    "class ids must be dense: expected {i}, found {}",
                    e.id
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Builds a table from `(name, is_thing)` pairs, assigning ids in order.
    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = (S, bool)>) -> Result<Self> {
        let entries = names
            .into_iter()
            .enumerate()
            .map(|(i, (name, is_thing))| ClassEntry {
                id: i as ClassId,
                name: name.into(),
                is_thing,
            })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn void_id(&self) -> ClassId {
        VOID_CLASS
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.get(id as usize)
    }

    pub fn is_thing(&self, id: ClassId) -> Option<bool> {
        self.get(id).map(|e| e.is_thing)
    }

    /// Stuff class ids in ascending order.
    pub fn stuff_classes(&self) -> Vec<ClassId> {
        self.entries
            .iter()
            .filter(|e| !e.is_thing)
            .map(|e| e.id)
            .collect()
    }

    pub fn thing_classes(&self) -> Vec<ClassId> {
        self.entries
            .iter()
            .filter(|e| e.is_thing)
            .map(|e| e.id)
            .collect()
    }

    /// Parses lines of `id<TAB>name<TAB>thing|stuff`; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("class table line {}: `{line}`", lineno + 1));
            let mut fields = line.split('\t');
            let (Some(id), Some(name), Some(kind), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad());
            };
            let id: ClassId = id.trim().parse().map_err(|_| bad())?;
            let is_thing = match kind.trim() {
                "thing" => true,
                "stuff" => false,
                _ => return Err(bad()),
            };
            entries.push(ClassEntry {
                id,
                name: name.to_string(),
                is_thing,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let kind = if e.is_thing { "thing" } else { "stuff" };
            let _ = writeln!(out, "{}\t{}\t{}", e.id, e.name, kind);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_error(path))
    }
}
