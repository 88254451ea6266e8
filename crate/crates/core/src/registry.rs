//! Name → factory lookup for interchangeable strategies.
//!
//! Shape families, evaluation protocols and sweep parameters are each a
//! trait with several implementations; the experiment config names one and
//! the matching registry builds it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Factory<T> = fn() -> Box<T>;

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

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        let key = name.to_ascii_lowercase();
        self.entries
            .get(key.as_str())
            .map(|factory| factory())
            .ok_or_else(|| Error::Unknown {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name.to_ascii_lowercase().as_str())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Hello;
    impl Greeter for Hello {
        fn greet(&self) -> String {
            "hello".into()
        }
    }

    #[test]
    fn lookup_is_case_insensitive_and_lists_known_names() {
        let mut reg: Registry<dyn Greeter> = Registry::new("greeter");
        reg.register("hello", || Box::new(Hello));
        assert_eq!(reg.create("HELLO").unwrap().greet(), "hello");
        let err = reg.create("bye").err().unwrap();
        assert!(err.to_string().contains("known: hello"), "{err}");
        assert_eq!(err.category(), "unknown-name");
    }
}
