//! Name-keyed registries of interchangeable strategies.
//!
//! Each family of algorithm variants (structure selection, derivative
//! schemes, bifurcation systems, ...) is exposed through a trait object and
//! registered under a stable name so that configuration files and the CLI can
//! pick one at runtime.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

type Factory<T> = Box<dyn Fn(&[f64]) -> Result<Box<T>> + Send + Sync>;

/// Maps names to factories producing boxed strategies from numeric parameters.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&[f64]) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn create(&self, name: &str, params: &[f64]) -> Result<Box<T>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: self.kind,
            name: name.to_string(),
        })?;
        factory(params)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }
}

/// Pull exactly `n` parameters out of a factory argument list.
pub(crate) fn expect_params(name: &str, params: &[f64], n: usize) -> Result<()> {
    if params.len() != n {
        return Err(Error::invalid(format!(
            "`{name}` takes {n} parameter(s), got {}",
            params.len()
        )));
    }
    Ok(())
}
