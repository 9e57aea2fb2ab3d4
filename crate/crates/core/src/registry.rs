//! Name-keyed tables of interchangeable implementations.

use crate::error::{Error, Result};

pub type Constructor<T> = fn() -> Box<T>;

/// A fixed set of named constructors for one kind of strategy.
pub struct Registry<T: ?Sized + 'static> {
    kind: &'static str,
    entries: &'static [(&'static str, Constructor<T>)],
}

impl<T: ?Sized + 'static> Registry<T> {
    pub const fn new(kind: &'static str, entries: &'static [(&'static str, Constructor<T>)]) -> Self {
        Self { kind, entries }
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ctor)| ctor())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }
}
