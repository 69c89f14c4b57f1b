//! Rule file: expected differences (`:name`) and characteristic values (`+name`).
//!
//! ```text
//! # eShopOnWeb
//! :RequestVerificationToken
//! :Items[
//! +RequestVerificationToken
//! +Items[
//! ```

use std::fmt;
use std::path::Path;

use thiserror::Error;

const EXPECTED_MARKER: char = ':';
const CHARACTERISTIC_MARKER: char = '+';
const COMMENT_MARKER: char = '#';

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected a ':' or '+' marker in column one")]
    MissingMarker { line: usize },
    #[error("line {line}: empty name after '{marker}' marker")]
    EmptyName { line: usize, marker: char },
    #[error("line {line}: duplicate {set} name {name:?}")]
    Duplicate {
        line: usize,
        set: &'static str,
        name: String,
    },
    #[error("name {0:?} is empty or has surrounding whitespace")]
    InvalidName(String),
    #[error("failed to read rule file {path}: {message}")]
    Io { path: String, message: String },
    #[error("rule file {path} is not valid UTF-8")]
    Encoding { path: String },
}

/// Parsed rule file. Immutable once built; share it behind an `Arc`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleSet {
    expected: Vec<String>,
    characteristic: Vec<String>,
}

impl RuleSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a rule set from name lists, rejecting duplicates and names that
    /// would not survive a serialize/parse round trip.
    pub fn from_names<E, C>(expected: E, characteristic: C) -> Result<Self, ConfigError>
    where
        E: IntoIterator,
        E::Item: Into<String>,
        C: IntoIterator,
        C::Item: Into<String>,
    {
        let mut rules = RuleSet::new();
        for name in expected {
            rules.push_expected(name.into())?;
        }
        for name in characteristic {
            rules.push_characteristic(name.into())?;
        }
        Ok(rules)
    }

    pub fn expected_differences(&self) -> &[String] {
        &self.expected
    }

    pub fn characteristic_values(&self) -> &[String] {
        &self.characteristic
    }

    pub fn is_empty(&self) -> bool {
        self.expected.is_empty() && self.characteristic.is_empty()
    }

    /// Characteristic names that are not also declared as expected differences.
    pub fn undeclared_characteristics(&self) -> impl Iterator<Item = &str> {
        self.characteristic
            .iter()
            .filter(|c| !self.expected.contains(c))
            .map(String::as_str)
    }

    pub fn push_expected(&mut self, name: String) -> Result<(), ConfigError> {
        validate_name(&name)?;
        if self.expected.contains(&name) {
            return Err(ConfigError::Duplicate {
                line: 0,
                set: "expected-difference",
                name,
            });
        }
        self.expected.push(name);
        Ok(())
    }

    pub fn push_characteristic(&mut self, name: String) -> Result<(), ConfigError> {
        validate_name(&name)?;
        if self.characteristic.contains(&name) {
            return Err(ConfigError::Duplicate {
                line: 0,
                set: "characteristic-value",
                name,
            });
        }
        self.characteristic.push(name);
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let text = String::from_utf8(bytes).map_err(|_| ConfigError::Encoding {
            path: path.display().to_string(),
        })?;
        parse_config(&text)
    }
}

fn validate_name(name: &str) -> Result<(), ConfigError> {
    if name.is_empty() || name.trim() != name || name.contains(['\n', '\r']) {
        return Err(ConfigError::InvalidName(name.to_owned()));
    }
    Ok(())
}

/// Parses rule-file text. A leading byte-order mark is ignored, as are blank
/// lines and `#` comments.
pub fn parse_config(text: &str) -> Result<RuleSet, ConfigError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut rules = RuleSet::new();

    for (index, raw) in text.split('\n').enumerate() {
        let line_no = index + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with(COMMENT_MARKER) {
            continue;
        }
        let mut chars = line.chars();
        let marker = chars.next().unwrap_or_default();
        let name = chars.as_str().trim();

        let (set, target) = match marker {
            EXPECTED_MARKER => ("expected-difference", &mut rules.expected),
            CHARACTERISTIC_MARKER => ("characteristic-value", &mut rules.characteristic),
            _ => return Err(ConfigError::MissingMarker { line: line_no }),
        };
        if name.is_empty() {
            return Err(ConfigError::EmptyName {
                line: line_no,
                marker,
            });
        }
        if target.iter().any(|n| n == name) {
            return Err(ConfigError::Duplicate {
                line: line_no,
                set,
                name: name.to_owned(),
            });
        }
        target.push(name.to_owned());
    }

    for name in rules.undeclared_characteristics() {
        tracing::warn!(name, "characteristic value is not listed as an expected difference");
    }
    Ok(rules)
}

/// Renders a rule set back to rule-file text: `:` lines first, then `+` lines.
pub fn serialize_config(rules: &RuleSet) -> String {
    rules.to_string()
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for name in &self.expected {
            writeln!(f, "{EXPECTED_MARKER}{name}")?;
        }
        for name in &self.characteristic {
            writeln!(f, "{CHARACTERISTIC_MARKER}{name}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for RuleSet {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_config(s)
    }
}
