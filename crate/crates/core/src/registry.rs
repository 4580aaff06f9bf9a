//! Name-keyed factories for interchangeable strategies.

use std::fmt;

use crate::error::{Error, Result};

type Factory<T, C> = Box<dyn Fn(&C) -> Result<Box<T>> + Send + Sync>;

/// Maps names to constructors of boxed trait objects configured by `C`.
pub struct Registry<T: ?Sized, C> {
    kind: &'static str,
    entries: Vec<(&'static str, Factory<T, C>)>,
}

impl<T: ?Sized, C> Registry<T, C> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: Vec::new(),
        }
    }

    /// Adds or replaces the factory registered under `name`.
    pub fn register<F>(&mut self, name: &'static str, factory: F) -> &mut Self
    where
        F: Fn(&C) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, Box::new(factory)));
        self
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    /// Registered names in registration order.
    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, name: &str, config: &C) -> Result<Box<T>> {
        let (_, factory) = self
            .entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Unknown {
                kind: self.kind,
                name: name.to_string(),
            })?;
        factory(config)
    }
}

impl<T: ?Sized, C> fmt::Debug for Registry<T, C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Plain(String);
    impl Greeter for Plain {
        fn greet(&self) -> String {
            format!("hello {}", self.0)
        }
    }

    #[test]
    fn builds_by_name_and_rejects_unknown() {
        let mut reg: Registry<dyn Greeter, String> = Registry::new("greeter");
        reg.register("plain", |who: &String| Ok(Box::new(Plain(who.clone())) as Box<dyn Greeter>));
        assert_eq!(reg.build("plain", &"x".into()).unwrap().greet(), "hello x");
        let err = reg.build("fancy", &"x".into()).err().unwrap().to_string();
        assert!(err.contains("greeter") && err.contains("fancy"));
        reg.register("plain", |_: &String| Ok(Box::new(Plain("y".into())) as Box<dyn Greeter>));
        assert_eq!(reg.names(), vec!["plain"]);
        assert_eq!(reg.build("plain", &"x".into()).unwrap().greet(), "hello y");
    }
}
