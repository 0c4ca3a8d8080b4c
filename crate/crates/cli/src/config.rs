//! Run configuration: the training configuration plus dataset paths and run
//! bookkeeping, resolved as defaults < file < flags.

use std::path::{Path, PathBuf};

use dlow_core::{Error, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Keys that belong to the run rather than to the training configuration.
pub const RUN_KEYS: [&str; 6] = ["name", "output_dir", "source", "targets", "save_every", "sample_every"];

pub const SNAPSHOT_FILE: &str = "config.toml";

fn default_name() -> String {
    "run".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_every() -> u64 {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub source: PathBuf,
    pub targets: Vec<PathBuf>,
    /// Checkpoint interval in iterations; the final state is always saved.
    #[serde(default = "default_every")]
    pub save_every: u64,
    /// Sample-grid interval in iterations; 0 disables grids.
    #[serde(default = "default_every")]
    pub sample_every: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSettings,
    pub train: TrainConfig,
}

/// Parses `key=value`, reading the value as TOML and falling back to a
/// plain string.
pub fn parse_override(s: &str) -> std::result::Result<(String, toml::Value), String> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("empty key in '{s}'"));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

impl RunConfig {
    /// Reads `file` (if any), applies `overrides` in order and splits the
    /// result into run settings and a validated training configuration.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    context: path.display().to_string(),
                    source: e,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let mut run_table = toml::Table::new();
        for key in RUN_KEYS {
            if let Some(v) = table.remove(key) {
                run_table.insert(key.to_string(), v);
            }
        }
        let mut run: RunSettings = toml::Value::Table(run_table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        run.source = absolute(&run.source);
        run.targets = run.targets.iter().map(|p| absolute(p)).collect();
        let train = TrainConfig::from_toml(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)?;
        train.validate()?;
        if run.targets.len() != train.num_targets {
            return Err(Error::Config(format!(
                "{} target datasets for num_targets = {}",
                run.targets.len(),
                train.num_targets
            )));
        }
        if run.name.is_empty() || run.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "run name '{}' must be a plain file name",
                run.name
            )));
        }
        Ok(Self { run, train })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.output_dir.join(&self.run.name)
    }

    /// The fully resolved configuration as one flat TOML document, readable
    /// by [`RunConfig::resolve`].
    pub fn to_toml(&self) -> Result<String> {
        let ser = |e: toml::ser::Error| Error::Config(e.to_string());
        let mut table = toml::Table::try_from(&self.run).map_err(ser)?;
        table.extend(toml::Table::try_from(&self.train).map_err(ser)?);
        toml::to_string(&table).map_err(ser)
    }

    /// Writes the snapshot into the run directory and returns its path.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            context: dir.display().to_string(),
            source: e,
        })?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::Io {
            context: path.display().to_string(),
            source: e,
        })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("c.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn precedence_is_defaults_then_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "total_iterations = 100\nseed = 3\nsource = \"s\"\ntargets = [\"t\"]\nlearning_rate = 0.001\n",
        );
        let flags = vec![parse_override("seed=9").unwrap(), parse_override("name=exp").unwrap()];
        let c = RunConfig::resolve(Some(&p), &flags).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.train.beta1, 0.5);
        assert_eq!(c.run.name, "exp");
        assert_eq!(c.run.save_every, 500);
    }

    #[test]
    fn snapshot_resolves_to_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            &format!(
                "total_iterations = 10\nsource = \"s\"\ntargets = [\"t\"]\noutput_dir = \"{}\"\n",
                dir.path().display()
            ),
        );
        let c = RunConfig::resolve(Some(&p), &[]).unwrap();
        let snap = c.write_snapshot().unwrap();
        assert_eq!(RunConfig::resolve(Some(&snap), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_mismatched_targets_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "total_iterations = 10\nsource = \"s\"\ntargets = [\"t\"]\nlearning_rat = 1\n",
        );
        assert!(matches!(RunConfig::resolve(Some(&p), &[]), Err(Error::Config(_))));
        let p = write(
            dir.path(),
            "total_iterations = 10\nsource = \"s\"\ntargets = [\"t\", \"u\"]\n",
        );
        assert!(matches!(RunConfig::resolve(Some(&p), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn override_values_parse_as_toml() {
        assert_eq!(parse_override("a=3").unwrap().1, toml::Value::Integer(3));
        assert_eq!(parse_override("a=true").unwrap().1, toml::Value::Boolean(true));
        assert_eq!(
            parse_override("a=runs/x").unwrap().1,
            toml::Value::String("runs/x".into())
        );
        assert!(parse_override("novalue").is_err());
    }
}
