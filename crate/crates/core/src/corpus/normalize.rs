use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;

use crate::error::{Error, Result};

const DEFAULT_ALIASES: &str = include_str!("../../data/value_aliases.json");
const MAX_REWRITES: usize = 8;

#[derive(Debug, Deserialize)]
struct AliasFile {
    version: u32,
    #[serde(default)]
    changelog: Vec<String>,
    aliases: BTreeMap<String, String>,
}

/// Canonicalizes slot values. Shared by corpus loading and scoring so that
/// gold and predicted values go through the same table.
#[derive(Debug, Clone)]
pub struct ValueNormalizer {
    version: u32,
    changelog: Vec<String>,
    aliases: BTreeMap<String, String>,
}

fn time_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"^(\d):(\d\d)$").expect("valid regex"))
}

fn squash(raw: &str) -> String {
    raw.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ValueNormalizer {
    pub fn bundled() -> &'static ValueNormalizer {
        static BUNDLED: OnceLock<ValueNormalizer> = OnceLock::new();
        BUNDLED.get_or_init(|| {
            ValueNormalizer::from_json(DEFAULT_ALIASES, "bundled alias table").expect("bundled alias table is valid")
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: AliasFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        let aliases = file
            .aliases
            .into_iter()
            .map(|(k, v)| (squash(&k), squash(&v)))
            .collect();
        let normalizer = ValueNormalizer {
            version: file.version,
            changelog: file.changelog,
            aliases,
        };
        // Every rewrite chain must settle, otherwise normalization is not idempotent.
        for key in normalizer.aliases.keys() {
            if normalizer.settle(key.clone()).is_none() {
                return Err(Error::parse(
                    origin,
                    format!("alias chain starting at `{key}` does not reach a fixpoint"),
                ));
            }
        }
        Ok(normalizer)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn changelog(&self) -> &[String] {
        &self.changelog
    }

    fn rewrite(&self, value: &str) -> String {
        let aliased = self.aliases.get(value).map(String::as_str).unwrap_or(value);
        match time_pattern().captures(aliased) {
            Some(c) => format!("0{}:{}", &c[1], &c[2]),
            None => aliased.to_string(),
        }
    }

    /// Lower-cases, trims, collapses whitespace, then applies the alias table
    /// and time zero-padding until nothing changes.
    pub fn normalize(&self, raw: &str) -> String {
        let squashed = squash(raw);
        self.settle(squashed.clone()).unwrap_or(squashed)
    }

    fn settle(&self, mut current: String) -> Option<String> {
        for _ in 0..=MAX_REWRITES {
            let next = self.rewrite(&current);
            if next == current {
                return Some(current);
            }
            current = next;
        }
        None
    }
}

/// Normalizes with the bundled alias table.
pub fn normalize_value(raw: &str) -> String {
    ValueNormalizer::bundled().normalize(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(normalize_value(" Centre "), "centre");
        assert_eq!(normalize_value("center"), "centre");
        assert_eq!(normalize_value("9:15"), "09:15");
        assert_eq!(normalize_value("09:15"), "09:15");
        assert_eq!(normalize_value("none"), "none");
        assert_eq!(normalize_value("Don't   Care"), "dontcare");
        assert_eq!(normalize_value("  "), "none");
        assert_eq!(normalize_value("guesthouse"), "guest house");
    }

    #[test]
    fn rejects_cyclic_tables() {
        let text = r#"{"version": 1, "aliases": {"a": "b", "b": "a"}}"#;
        assert!(ValueNormalizer::from_json(text, "test").is_err());
    }

    proptest! {
        #[test]
        fn idempotent(raw in "[ a-zA-Z0-9:'\\-]{0,24}") {
            let once = normalize_value(&raw);
            prop_assert_eq!(normalize_value(&once), once);
        }

        #[test]
        fn idempotent_on_alias_neighbourhood(
            key in proptest::sample::select(
                ValueNormalizer::bundled().aliases.keys().cloned().collect::<Vec<_>>()
            ),
            pad in "[ ]{0,3}",
            upper in any::<bool>(),
        ) {
            let raw = if upper { key.to_uppercase() } else { key };
            let raw = format!("{pad}{raw}{pad}");
            let once = normalize_value(&raw);
            prop_assert_eq!(normalize_value(&once), once);
        }
    }
}
