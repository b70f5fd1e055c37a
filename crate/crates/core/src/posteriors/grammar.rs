//! Template grammars for synthetic corpora: one sentence template per line,
//! `{slot}` placeholders filled from a sibling `slot.txt` list file.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::container::read_file;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    templates: Vec<String>,
    slots: BTreeMap<String, Vec<String>>,
}

fn placeholders(template: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| Error::data(format!("unclosed placeholder in {template:?}")))?;
        out.push(rest[start + 1..start + end].to_string());
        rest = &rest[start + end + 1..];
    }
    Ok(out)
}

fn lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

impl Grammar {
    pub fn new(templates: Vec<String>, slots: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::data("grammar has no templates"));
        }
        for t in &templates {
            for p in placeholders(t)? {
                match slots.get(&p) {
                    Some(v) if !v.is_empty() => {}
                    _ => return Err(Error::data(format!("slot {{{p}}} has no fillers"))),
                }
            }
        }
        Ok(Self { templates, slots })
    }

    /// Parses in-memory template text with slot lists.
    pub fn from_text(templates: &str, slots: &[(&str, &str)]) -> Result<Self> {
        let slots = slots
            .iter()
            .map(|(name, body)| (name.to_string(), lines(body)))
            .collect();
        Self::new(lines(templates), slots)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            String::from_utf8(read_file(path)?).map_err(|_| Error::data(format!("{} is not UTF-8", path.display())))?;
        let templates = lines(&text);
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut slots = BTreeMap::new();
        for t in &templates {
            for p in placeholders(t)? {
                if slots.contains_key(&p) {
                    continue;
                }
                let file = dir.join(format!("{p}.txt"));
                let body = String::from_utf8(read_file(&file)?)
                    .map_err(|_| Error::data(format!("{} is not UTF-8", file.display())))?;
                slots.insert(p, lines(&body));
            }
        }
        Self::new(templates, slots)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn slots(&self) -> &BTreeMap<String, Vec<String>> {
        &self.slots
    }

    pub fn sample(&self, r: &mut impl Rng) -> String {
        let t = &self.templates[r.random_range(0..self.templates.len())];
        let mut out = String::with_capacity(t.len() * 2);
        let mut rest = t.as_str();
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let end = start + rest[start..].find('}').expect("validated");
            let fills = &self.slots[&rest[start + 1..end]];
            out.push_str(&fills[r.random_range(0..fills.len())]);
            rest = &rest[end + 1..];
        }
        out.push_str(rest);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng;

    #[test]
    fn expands_slots() {
        let g = Grammar::from_text("play {song} now\n# comment\n", &[("song", "jazz\nrock")]).unwrap();
        let mut r = rng(1);
        for _ in 0..10 {
            let s = g.sample(&mut r);
            assert!(s == "play jazz now" || s == "play rock now", "{s}");
        }
    }

    #[test]
    fn missing_slot_rejected() {
        assert!(Grammar::from_text("call {who}", &[]).is_err());
        assert!(Grammar::from_text("call {who", &[("who", "mom")]).is_err());
    }

    #[test]
    fn loads_sibling_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("g.txt"), "set a timer for {n} minutes\n").unwrap();
        std::fs::write(dir.path().join("n.txt"), "five\nten\n").unwrap();
        let g = Grammar::load(&dir.path().join("g.txt")).unwrap();
        assert_eq!(g.templates().len(), 1);
    }
}
