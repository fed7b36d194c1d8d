//! Name-keyed collections of interchangeable strategies.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Strategies sharing one trait, looked up by name at run time.
pub struct Registry<S: ?Sized> {
    kind: &'static str,
    entries: IndexMap<String, Arc<S>>,
}

impl<S: ?Sized> Registry<S> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: IndexMap::new(),
        }
    }

    /// Adds `strategy` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &str, strategy: Arc<S>) -> &mut Self {
        self.entries.insert(name.to_string(), strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<S>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::Unknown {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names in registration order.
    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}
