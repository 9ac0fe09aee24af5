//! Layered run settings: built-in defaults, then an optional `key = value`
//! config file, then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use getam::kv::KeyValues;

use crate::CliError;

/// Marker for an optional path that was not given.
pub const UNSET: &str = "none";

pub struct Settings {
    kv: KeyValues,
}

impl Settings {
    /// Starts from `defaults`; only their keys are accepted afterwards.
    pub fn new(defaults: KeyValues) -> Self {
        Self { kv: defaults }
    }

    pub fn apply_file(&mut self, path: Option<&Path>) -> Result<(), CliError> {
        let Some(path) = path else { return Ok(()) };
        let file = KeyValues::load(path)?;
        for (k, v) in file.iter() {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<(), CliError> {
        if self.kv.get(key).is_none() {
            return Err(CliError::Validation(format!("unknown setting `{key}`")));
        }
        self.kv.set(key, value);
        Ok(())
    }

    /// Sets `key` when the flag was given.
    pub fn flag<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        Ok(self.kv.require(key)?)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.optional_path(key)?
            .ok_or_else(|| CliError::Validation(format!("missing required setting `{key}` (flag --{})", key.replace('_', "-"))))
    }

    pub fn optional_path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        let v: String = self.get(key)?;
        Ok((v != UNSET && !v.is_empty()).then(|| PathBuf::from(v)))
    }

    pub fn kv(&self) -> &KeyValues {
        &self.kv
    }

    /// Prints the resolved settings as a config file would spell them.
    pub fn print(&self, command: &str) {
        println!("# resolved configuration: {command}");
        print!("{}", self.kv.render());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("alpha", 0.9);
        kv.set("out", UNSET);
        kv
    }

    #[test]
    fn flags_override_and_unknown_keys_fail() {
        let mut s = Settings::new(defaults());
        s.flag("alpha", Some(0.5)).unwrap();
        s.flag::<f64>("alpha", None).unwrap();
        assert_eq!(s.get::<f64>("alpha").unwrap(), 0.5);
        assert!(matches!(s.set("beta", 1), Err(CliError::Validation(_))));
    }

    #[test]
    fn unset_paths() {
        let mut s = Settings::new(defaults());
        assert_eq!(s.optional_path("out").unwrap(), None);
        assert!(s.path("out").is_err());
        s.set("out", "/tmp/x").unwrap();
        assert_eq!(s.path("out").unwrap(), PathBuf::from("/tmp/x"));
    }

    #[test]
    fn config_file_keys_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.txt");
        std::fs::write(&good, "alpha = 0.7\n").unwrap();
        let mut s = Settings::new(defaults());
        s.apply_file(Some(&good)).unwrap();
        assert_eq!(s.get::<f64>("alpha").unwrap(), 0.7);

        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "alpah = 0.7\n").unwrap();
        assert!(s.apply_file(Some(&bad)).is_err());
    }
}
