//! Config sections exposed as flags, merged as flag > file > default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::{Arg, ArgMatches, Command};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vcdistill::distill::config::{apply_overrides, key_values};
use vcdistill::distill::TrainConfig;
use vcdistill::{Error, Result};

/// A flat serde struct whose keys become `--<prefix><key>` flags and
/// `<prefix><key> = value` config-file lines.
pub struct Section {
    pub prefix: &'static str,
    pub keys: Vec<String>,
}

impl Section {
    pub fn of<T: Serialize>(prefix: &'static str, defaults: &T, skip: &[&str]) -> Self {
        Self {
            prefix,
            keys: key_values(defaults)
                .into_iter()
                .map(|(k, _)| k)
                .filter(|k| !skip.contains(&k.as_str()))
                .collect(),
        }
    }

    fn id(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    pub fn add_flags(&self, mut cmd: Command) -> Command {
        for k in &self.keys {
            let id = self.id(k);
            cmd = cmd.arg(
                Arg::new(id.clone())
                    .long(id.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading(if self.prefix.is_empty() { "Config" } else { "Mel extraction" })
                    .num_args(1),
            );
        }
        cmd
    }

    /// Overrides `value` with file entries, then with flags given on the
    /// command line.
    pub fn resolve<T: Serialize + DeserializeOwned>(
        &self,
        mut value: T,
        file: &BTreeMap<String, String>,
        matches: &ArgMatches,
    ) -> Result<T> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for k in &self.keys {
            let id = self.id(k);
            if let Some(v) = matches.get_one::<String>(&id) {
                pairs.push((k.clone(), v.clone()));
            } else if let Some(v) = file.get(&id) {
                pairs.push((k.clone(), v.clone()));
            }
        }
        apply_overrides(&mut value, pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        Ok(value)
    }
}

/// Reads `--config` if given and rejects keys no section claims.
pub fn read_config_file(matches: &ArgMatches, sections: &[&Section]) -> Result<BTreeMap<String, String>> {
    let Some(path) = matches.get_one::<String>("config") else {
        return Ok(BTreeMap::new());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    let pairs = TrainConfig::parse_text(&text)?;
    for key in pairs.keys() {
        let known = key == "seed" || sections.iter().any(|s| s.keys.iter().any(|k| s.id(k) == *key));
        if !known {
            return Err(Error::Config(format!("unknown config key {key} in {path}")));
        }
    }
    Ok(pairs)
}

/// Global `--seed`, else the file's `seed`, else `fallback`.
pub fn resolve_seed(matches: &ArgMatches, file: &BTreeMap<String, String>, fallback: u64) -> Result<u64> {
    if let Some(&s) = matches.get_one::<u64>("seed") {
        return Ok(s);
    }
    match file.get("seed") {
        Some(v) => v.parse().map_err(|_| Error::Config(format!("cannot parse seed = {v:?}"))),
        None => Ok(fallback),
    }
}

/// Accumulates the resolved settings of a run.
#[derive(Default)]
pub struct Snapshot {
    entries: Vec<(String, String)>,
}

impl Snapshot {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn extend<T: Serialize>(&mut self, prefix: &str, value: &T) {
        for (k, v) in key_values(value) {
            self.push(format!("{prefix}{k}"), v);
        }
    }

    /// `config.txt` (flat, re-usable with `--config`) and `run.json`.
    pub fn write(&self, dir: &Path, command: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k} = {v}");
        }
        fs::write(dir.join("config.txt"), text)?;
        let run = RunRecord {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: self.entries.iter().cloned().collect(),
        };
        fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&run)?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    command: String,
    argv: Vec<String>,
    config: BTreeMap<String, String>,
}

/// Options of `gen-corpus` that are not part of the generator config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    /// Comma-separated speaker ids held out for evaluation; empty selects
    /// the last fifth of the speakers.
    pub held_speakers: String,
    /// Comma-separated content ids held out; empty selects the last quarter.
    pub held_contents: String,
    pub embedder_hidden: usize,
    pub embedder_layers: usize,
    pub embedder_d_spk: usize,
    pub embedder_steps: usize,
    pub embedder_batch: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            held_speakers: String::new(),
            held_contents: String::new(),
            embedder_hidden: 32,
            embedder_layers: 3,
            embedder_d_spk: 6,
            embedder_steps: 300,
            embedder_batch: 16,
        }
    }
}

pub fn parse_ids(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad id list entry {p:?}"))))
        .collect()
}
