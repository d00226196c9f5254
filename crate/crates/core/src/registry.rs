//! Name → constructor tables for the interchangeable strategy families
//! (negative samplers, candidate samplers, ranking losses, vote strategies).
//!
//! Each family lives in its owning module and exposes a `*_registry()`
//! function; configuration and the CLI select entries by name.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{Error, Result};

pub type Constructor<T> = fn(&Value) -> Result<Box<T>>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Constructor<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, ctor: Constructor<T>) -> &mut Self {
        self.entries.insert(name, ctor);
        self
    }

    pub fn with(mut self, name: &'static str, ctor: Constructor<T>) -> Self {
        self.register(name, ctor);
        self
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Builds the named strategy; `params` is its JSON configuration
    /// (`Value::Null` for defaults).
    pub fn create(&self, name: &str, params: &Value) -> Result<Box<T>> {
        match self.entries.get(name) {
            Some(ctor) => ctor(params),
            None => Err(Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_owned(),
                known: self.names().join(", "),
            }),
        }
    }

    pub fn create_default(&self, name: &str) -> Result<Box<T>> {
        self.create(name, &Value::Null)
    }
}

/// Deserializes strategy parameters, treating `null` as "all defaults".
pub fn params_or_default<P: DeserializeOwned + Default>(params: &Value) -> Result<P> {
    if params.is_null() {
        Ok(P::default())
    } else {
        Ok(serde_json::from_value(params.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    #[derive(Default, serde::Deserialize)]
    struct Hello {
        #[serde(default)]
        name: String,
    }

    impl Greeter for Hello {
        fn greet(&self) -> String {
            format!("hello {}", self.name)
        }
    }

    fn registry() -> Registry<dyn Greeter> {
        fn hello(p: &Value) -> Result<Box<dyn Greeter>> {
            Ok(Box::new(params_or_default::<Hello>(p)?))
        }
        Registry::new("greeter").with("hello", hello)
    }

    #[test]
    fn create_by_name() {
        let r = registry();
        assert_eq!(r.create_default("hello").unwrap().greet(), "hello ");
        let g = r.create("hello", &serde_json::json!({"name": "kb"})).unwrap();
        assert_eq!(g.greet(), "hello kb");
        assert_eq!(r.names(), ["hello"]);
    }

    #[test]
    fn unknown_name_lists_known() {
        let err = registry().create_default("bye").err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("greeter") && msg.contains("hello"), "{msg}");
    }
}
