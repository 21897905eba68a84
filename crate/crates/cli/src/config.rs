//! Flat `key = value` configuration files. Flags given on the command line
//! win over file values.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::failure::Failure;

const KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "temperature",
    "lr",
    "weight_decay",
    "embed_dim",
    "max_len",
    "use_attention",
    "use_head",
    "head_dim",
    "augment",
    "pool_size",
    "sizes",
    "temperatures",
    "k",
    "holdout",
];

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| Failure::input(format!("{}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let key = match key.trim().replace('-', "_").as_str() {
                "learning_rate" => "lr".to_string(),
                "use_projection_head" => "use_head".to_string(),
                "max_input_length" => "max_len".to_string(),
                other => other.to_string(),
            };
            if !KEYS.contains(&key.as_str()) {
                return Err(format!("line {}: unknown key {key}", n + 1));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Failure::input(format!("config key {key}: {e}"))))
            .transpose()
    }

    /// Comma-separated list value.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().parse::<T>().map_err(|e| Failure::input(format!("config key {key}: {e}"))))
                    .collect()
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_normalizes_keys() {
        let c = FileConfig::parse("# run\nepochs = 3\nlearning-rate=1e-4 # fast\n\nsizes = 2, 8\n").unwrap();
        assert_eq!(c.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(c.get::<f64>("lr").unwrap(), Some(1e-4));
        assert_eq!(c.list::<usize>("sizes").unwrap(), Some(vec![2, 8]));
        assert_eq!(c.get::<usize>("k").unwrap(), None);
        assert!(c.get::<bool>("epochs").is_err());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(FileConfig::parse("epoch = 3").unwrap_err().contains("unknown key epoch"));
        assert!(FileConfig::parse("epochs 3").unwrap_err().contains("line 1"));
    }
}
