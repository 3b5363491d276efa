//! `key = value` configuration files merged under command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use spmdfuzz::sanrt::DetectorMode;

use crate::CliError;

/// Every tunable with its resolved value. Defaults are stable.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub blocks: u32,
    pub threads: u32,
    pub dyn_shared: u64,
    pub mode: DetectorMode,
    pub prex: bool,
    pub axiprune: bool,
    pub seed: u64,
    pub budget: u64,
    pub time: Option<Duration>,
    pub workers: usize,
    pub timeout: Duration,
    pub max_blocks: u32,
    pub reps: u32,
    pub out: Option<PathBuf>,
    pub jsonl: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            blocks: 1,
            threads: 1,
            dyn_shared: 0,
            mode: DetectorMode::Exact,
            prex: true,
            axiprune: true,
            seed: 0,
            budget: 100_000,
            time: None,
            workers: 1,
            timeout: Duration::from_secs(10),
            max_blocks: 64,
            reps: 100,
            out: None,
            jsonl: false,
        }
    }
}

pub const KEYS: [&str; 15] = [
    "blocks",
    "threads",
    "dyn_shared",
    "mode",
    "prex",
    "axiprune",
    "seed",
    "budget",
    "time",
    "workers",
    "timeout_ms",
    "max_blocks",
    "reps",
    "out",
    "format",
];

/// Reads `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
        let mut k = k.trim().replace('-', "_");
        if k == "budget_execs" {
            k = "budget".into();
        }
        if !KEYS.contains(&k.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown key {k}", n + 1)));
        }
        map.insert(k, v.trim().to_string());
    }
    Ok(map)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    parse_file(&text)
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Usage(format!("{k}: invalid number {v}")))
}

pub fn on_off(k: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("{k}: expected on or off, got {v}"))),
    }
}

pub fn mode(v: &str) -> Result<DetectorMode, CliError> {
    DetectorMode::from_name(v).ok_or_else(|| CliError::Usage(format!("mode: unknown detector {v}")))
}

impl Settings {
    /// Applies one key. Flags and the config file share this path.
    pub fn set(&mut self, k: &str, v: &str) -> Result<(), CliError> {
        match k {
            "blocks" => self.blocks = num(k, v)?,
            "threads" => self.threads = num(k, v)?,
            "dyn_shared" => self.dyn_shared = num(k, v)?,
            "mode" => self.mode = mode(v)?,
            "prex" => self.prex = on_off(k, v)?,
            "axiprune" => self.axiprune = on_off(k, v)?,
            "seed" => self.seed = num(k, v)?,
            "budget" => self.budget = num(k, v)?,
            "time" => self.time = Some(Duration::from_secs_f64(num(k, v)?)),
            "workers" => self.workers = num(k, v)?,
            "timeout_ms" => self.timeout = Duration::from_millis(num(k, v)?),
            "max_blocks" => self.max_blocks = num(k, v)?,
            "reps" => self.reps = num(k, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "format" => {
                self.jsonl = match v {
                    "jsonl" => true,
                    "text" => false,
                    _ => return Err(CliError::Usage(format!("format: expected text or jsonl, got {v}"))),
                }
            }
            _ => return Err(CliError::Usage(format!("unknown setting {k}"))),
        }
        Ok(())
    }

    /// Defaults, then the file, then flags.
    pub fn resolve(file: &BTreeMap<String, String>, flags: &[(&str, String)]) -> Result<Self, CliError> {
        let mut s = Settings::default();
        for (k, v) in file {
            s.set(k, v)?;
        }
        for (k, v) in flags {
            s.set(k, v)?;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file = parse_file("# comment\nblocks = 4\nthreads=8\nmode = redzone\nprex = off\n").unwrap();
        let s = Settings::resolve(&file, &[("blocks", "2".into())]).unwrap();
        assert_eq!((s.blocks, s.threads, s.mode, s.prex), (2, 8, DetectorMode::Redzone, false));
    }

    #[test]
    fn bad_lines_are_usage_errors() {
        assert!(matches!(parse_file("blocks 4"), Err(CliError::Usage(_))));
        assert!(matches!(parse_file("colour = red"), Err(CliError::Usage(_))));
        assert!(Settings::resolve(&parse_file("prex = maybe").unwrap(), &[]).is_err());
    }
}
