//! Name-keyed factories for runtime-selectable strategies.
//!
//! A strategy is chosen in config by a [`StrategySpec`]: either a bare name
//! (`"monolig"`) or an object with a `name` and strategy-specific
//! parameters (`{"name": "hard_threshold", "tau": 0.8}`).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Strategy name plus free-form parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "SpecRepr", into = "SpecRepr")]
pub struct StrategySpec {
    pub name: String,
    pub params: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SpecRepr {
    Name(String),
    Full {
        name: String,
        #[serde(flatten)]
        params: Map<String, Value>,
    },
}

impl From<SpecRepr> for StrategySpec {
    fn from(r: SpecRepr) -> Self {
        match r {
            SpecRepr::Name(name) => StrategySpec::named(&name),
            SpecRepr::Full { name, params } => StrategySpec { name, params },
        }
    }
}

impl From<StrategySpec> for SpecRepr {
    fn from(s: StrategySpec) -> Self {
        if s.params.is_empty() {
            SpecRepr::Name(s.name)
        } else {
            SpecRepr::Full {
                name: s.name,
                params: s.params,
            }
        }
    }
}

impl StrategySpec {
    pub fn named(name: &str) -> Self {
        StrategySpec {
            name: name.to_string(),
            params: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    /// Numeric parameter with a default.
    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::usage(format!("{}: parameter `{key}` must be a number", self.name))),
        }
    }

    /// Fail on parameters the strategy does not understand.
    pub fn expect_keys(&self, known: &[&str]) -> Result<()> {
        match self.params.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::usage(format!("{}: unknown parameter `{k}`", self.name))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        for (k, v) in &self.params {
            write!(f, ",{k}={v}")?;
        }
        Ok(())
    }
}

pub type Factory<T> = fn(&StrategySpec) -> Result<Box<T>>;

/// Factories keyed by strategy name.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory<T>) -> &mut Self {
        self.entries.insert(name, factory);
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn build(&self, spec: &StrategySpec) -> Result<Box<T>> {
        let factory = self.entries.get(spec.name.as_str()).ok_or_else(|| {
            Error::usage(format!(
                "unknown {} `{}` (known: {})",
                self.kind,
                spec.name,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(spec)
    }
}
