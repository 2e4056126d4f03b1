use std::fmt::Display;
use std::path::Path;

use crate::error::Result;
use crate::report::write_atomic;

/// Ordered `key<TAB>value` record of every effective setting of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigEcho {
    rows: Vec<(String, String)>,
}

impl ConfigEcho {
    pub fn new(command: &str) -> Self {
        let mut e = Self::default();
        e.push("command", command);
        e.push("version", env!("CARGO_PKG_VERSION"));
        e
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.rows.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("key\tvalue\n");
        for (k, v) in &self.rows {
            s.push_str(k);
            s.push('\t');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Self {
        let rows = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split_once('\t'))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { rows }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_tsv())
    }
}
