use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Name-keyed table of interchangeable strategies.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, entry: Arc<T>) -> &mut Self {
        self.entries.insert(name.into(), entry);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownName {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_names_list_alternatives() {
        let mut r: Registry<str> = Registry::new("thing");
        r.register("b", Arc::from("bee")).register("a", Arc::from("ay"));
        assert_eq!(&*r.get("a").unwrap(), "ay");
        let err = r.get("c").unwrap_err().to_string();
        assert!(err.contains("unknown thing `c`"));
        assert!(err.contains("a, b"));
    }
}
