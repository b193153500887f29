//! Flat `key = value` files with `[section]` headers.

use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub origin: String,
    pub sections: Vec<(String, Vec<Entry>)>,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut sections: Vec<(String, Vec<Entry>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.split(['#', ';']).next().unwrap_or("").trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| CliError::Config {
                    path: origin.into(),
                    line,
                    message: format!("unterminated section header `{trimmed}`"),
                })?;
                sections.push((name.trim().to_string(), Vec::new()));
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| CliError::Config {
                path: origin.into(),
                line,
                message: format!("expected `key = value`, found `{trimmed}`"),
            })?;
            let Some((_, entries)) = sections.last_mut() else {
                return Err(CliError::Config { path: origin.into(), line, message: "key outside of any section".into() });
            };
            entries.push(Entry { key: key.trim().to_string(), value: value.trim().to_string(), line });
        }
        Ok(Config { origin: origin.into(), sections })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
        Config::parse(&text, &path.display().to_string())
    }

    /// Every entry of `section`, across repeated headers, in file order.
    pub fn entries(&self, section: &str) -> Vec<&Entry> {
        self.sections.iter().filter(|(s, _)| s == section).flat_map(|(_, e)| e.iter()).collect()
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.iter().any(|(s, _)| s == section)
    }

    /// Last value of `key`, so later lines override earlier ones.
    pub fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries(section).into_iter().filter(|e| e.key == key).last()
    }

    pub fn all(&self, section: &str, key: &str) -> Vec<&Entry> {
        self.entries(section).into_iter().filter(|e| e.key == key).collect()
    }

    pub fn require(&self, section: &str, key: &str) -> CliResult<&Entry> {
        self.entry(section, key).ok_or_else(|| CliError::MissingKey { section: section.into(), key: key.into() })
    }

    pub fn value<T: FromStr>(&self, entry: &Entry) -> CliResult<T> {
        entry.value.parse().map_err(|_| self.error(entry.line, format!("cannot parse `{}` for `{}`", entry.value, entry.key)))
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str, default: T) -> CliResult<T> {
        match self.entry(section, key) {
            Some(e) => self.value(e),
            None => Ok(default),
        }
    }

    pub fn get_required<T: FromStr>(&self, section: &str, key: &str) -> CliResult<T> {
        self.value(self.require(section, key)?)
    }

    /// Whitespace- or comma-separated list.
    pub fn list<T: FromStr>(&self, entry: &Entry) -> CliResult<Vec<T>> {
        entry
            .value
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| self.error(entry.line, format!("cannot parse `{s}` in `{}`", entry.key))))
            .collect()
    }

    pub fn error(&self, line: usize, message: String) -> CliError {
        CliError::Config { path: self.origin.clone(), line, message }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_repeats() {
        let cfg = Config::parse("# header\n[system]\nn = 2\nterm = a\nterm = b ; trailing\n\n[map]\nkind=selection\n", "t").unwrap();
        assert_eq!(cfg.get_required::<usize>("system", "n").unwrap(), 2);
        assert_eq!(cfg.all("system", "term").iter().map(|e| e.value.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(cfg.require("map", "kind").unwrap().line, 8);
        assert_eq!(cfg.get("map", "missing", 3.5).unwrap(), 3.5);
    }

    #[test]
    fn errors_carry_line_numbers_and_keys() {
        match Config::parse("[a]\nx = 1\nnot a pair\n", "f.ini") {
            Err(CliError::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Config::parse("x = 1\n", "f"), Err(CliError::Config { line: 1, .. })));
        let cfg = Config::parse("[a]\nx = nope\n", "f").unwrap();
        assert!(matches!(cfg.get_required::<f64>("a", "x"), Err(CliError::Config { line: 2, .. })));
        match cfg.get_required::<f64>("a", "y") {
            Err(e @ CliError::MissingKey { .. }) => assert!(e.to_string().contains("`y`")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lists_accept_commas_and_spaces() {
        let cfg = Config::parse("[m]\nhidden = 32, 16 8\n", "f").unwrap();
        let e = cfg.require("m", "hidden").unwrap();
        assert_eq!(cfg.list::<usize>(e).unwrap(), vec![32, 16, 8]);
    }
}
