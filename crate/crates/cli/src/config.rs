//! Run configuration: defaults, a flat `key = value` file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};

use crate::UsageError;

pub const KEYS: &[&str] = &[
    "dataset_root",
    "known_classes",
    "seed",
    "lr",
    "batch",
    "epochs",
    "repetitions",
    "deterministic_reduction",
    "output_dir",
    "target_side",
    "threads",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    /// Empty means a seeded random partition.
    pub known_classes: Vec<String>,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub repetitions: usize,
    pub deterministic_reduction: bool,
    pub output_dir: PathBuf,
    pub target_side: usize,
    /// 0 means machine parallelism.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            known_classes: Vec::new(),
            seed: 0,
            lr: 1e-4,
            batch: 256,
            epochs: 40,
            repetitions: 3,
            deterministic_reduction: true,
            output_dir: PathBuf::from("out"),
            target_side: 1024,
            threads: 0,
        }
    }
}

impl RunConfig {
    /// Applies one setting; the value is parsed according to the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| anyhow!(UsageError(format!("invalid value {v:?} for {key}"))))
        }
        match key {
            "dataset_root" => self.dataset_root = Some(PathBuf::from(v)),
            "known_classes" => {
                self.known_classes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "seed" => self.seed = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "repetitions" => self.repetitions = num(key, v)?,
            "deterministic_reduction" => self.deterministic_reduction = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "target_side" => self.target_side = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            _ => {
                return Err(UsageError(format!(
                    "unknown config key {key:?}; expected one of {}",
                    KEYS.join(", ")
                ))
                .into())
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))
    }

    /// Lines are `key = value`; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UsageError(m.to_string()).into());
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be a non-negative number");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be positive");
        }
        if self.target_side < 64 {
            return bad("target_side must be at least 64");
        }
        Ok(())
    }

    pub fn dataset_root(&self) -> Result<&Path> {
        self.dataset_root
            .as_deref()
            .ok_or_else(|| UsageError("no dataset: pass --data or set dataset_root".into()).into())
    }

    /// Seed of repetition `r`.
    pub fn repetition_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.batch, c.epochs, c.repetitions), (1e-4, 256, 40, 3));
    }

    #[test]
    fn parses_file_text() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nepochs = 5\n\nknown_classes = a, b ,c\nlr=0.001 # inline\ndeterministic_reduction = false\n")
            .unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.known_classes, ["a", "b", "c"]);
        assert_eq!(c.lr, 0.001);
        assert!(!c.deterministic_reduction);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        let e = c.apply_text("epoch = 5").unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        assert!(c.apply_text("batch = many").is_err());
        assert!(c.apply_text("no equals sign").is_err());
    }
}
