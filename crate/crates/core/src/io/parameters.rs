//! Parameter files made of `(Key value value ...)` entries.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered key to values map. Keys compare exactly; a repeated key replaces
/// the earlier entry in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterMap {
    entries: Vec<(String, Vec<String>)>,
}

impl ParameterMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut map = ParameterMap::new();
        let mut chars = text.char_indices().peekable();
        let mut line = 1;
        while let Some((_, c)) = chars.next() {
            match c {
                '\n' => line += 1,
                c if c.is_whitespace() => {}
                '/' if chars.peek().map(|p| p.1) == Some('/') => {
                    for (_, c) in chars.by_ref() {
                        if c == '\n' {
                            line += 1;
                            break;
                        }
                    }
                }
                '(' => {
                    let start = line;
                    let mut tokens = Vec::new();
                    let mut closed = false;
                    while let Some((_, c)) = chars.next() {
                        match c {
                            ')' => {
                                closed = true;
                                break;
                            }
                            '\n' => line += 1,
                            '"' => {
                                let mut s = String::new();
                                let mut done = false;
                                for (_, c) in chars.by_ref() {
                                    if c == '"' {
                                        done = true;
                                        break;
                                    }
                                    if c == '\n' {
                                        line += 1;
                                    }
                                    s.push(c);
                                }
                                if !done {
                                    return Err(format!("line {start}: unterminated string"));
                                }
                                tokens.push(s);
                            }
                            c if c.is_whitespace() => {}
                            c => {
                                let mut s = String::from(c);
                                while let Some(&(_, c)) = chars.peek() {
                                    if c.is_whitespace() || c == ')' || c == '"' {
                                        break;
                                    }
                                    s.push(c);
                                    chars.next();
                                }
                                tokens.push(s);
                            }
                        }
                    }
                    if !closed {
                        return Err(format!("line {start}: missing ')'"));
                    }
                    if tokens.is_empty() {
                        return Err(format!("line {start}: empty entry"));
                    }
                    let key = tokens.remove(0);
                    map.set(&key, tokens);
                }
                c => return Err(format!("line {line}: unexpected character {c:?}")),
            }
        }
        Ok(map)
    }

    pub fn get(&self, key: &str) -> Option<&[String]> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn set(&mut self, key: &str, values: Vec<String>) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = values,
            None => self.entries.push((key.to_string(), values)),
        }
    }

    pub fn set_one(&mut self, key: &str, value: impl ToString) {
        self.set(key, vec![value.to_string()]);
    }

    pub fn remove(&mut self, key: &str) -> Option<Vec<String>> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overlays every entry of `other` onto this map.
    pub fn merge(&mut self, other: &ParameterMap) {
        for (k, v) in &other.entries {
            self.set(k, v.clone());
        }
    }
}

impl fmt::Display for ParameterMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, values) in &self.entries {
            write!(f, "({k}")?;
            for v in values {
                if v.parse::<f64>().is_ok() {
                    write!(f, " {v}")?;
                } else {
                    write!(f, " \"{v}\"")?;
                }
            }
            writeln!(f, ")")?;
        }
        Ok(())
    }
}

pub fn read_parameters(path: impl AsRef<Path>) -> Result<ParameterMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ParameterMap::parse(&text).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_comments() {
        let m = ParameterMap::parse(
            "// header\n(Loss \"L2\")\n(PatchSize 5 5 5) // trailing\n(Metric \"AdvancedImpact\" \"TransformBendingEnergyPenalty\")\n",
        )
        .unwrap();
        assert_eq!(m.get("Loss").unwrap(), ["L2"]);
        assert_eq!(m.get("PatchSize").unwrap(), ["5", "5", "5"]);
        assert_eq!(m.get("Metric").unwrap().len(), 2);
        assert!(ParameterMap::parse("").unwrap().is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(ParameterMap::parse("(A 1)\n(B 2").unwrap_err().contains("line 2"));
        assert!(ParameterMap::parse("(A \"x)").is_err());
        assert!(ParameterMap::parse("A 1").is_err());
    }

    #[test]
    fn display_roundtrip_is_idempotent() {
        let m = ParameterMap::parse("(Mode \"Static\")(VoxelSize 1.5 1.5 1.5)(Name \"a b\")").unwrap();
        let text = m.to_string();
        let again = ParameterMap::parse(&text).unwrap();
        assert_eq!(again, m);
        assert_eq!(again.to_string(), text);
    }
}
