//! Option resolution (flag, then config file, then default) and run
//! manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use fpt_core::checkpoint::{parse_config, render_config};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Run(fpt_core::Error),
}

impl From<fpt_core::Error> for CliError {
    fn from(e: fpt_core::Error) -> Self {
        CliError::Run(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

/// Values from an optional `key = value` config file, overridden by flags.
/// Every value consulted is recorded for the manifest.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Settings {
    pub fn from_file(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", path.display())))?;
        let map = parse_config(&text)
            .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
        Ok(Self::from_map(map))
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        Settings {
            file: map.into_iter().map(|(k, v)| (normalize(&k), v)).collect(),
            ..Settings::default()
        }
    }

    fn from_config<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        self.consumed.insert(key.to_string());
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("config value for {key} ({raw:?}): {e}"))),
        }
    }

    /// Resolve the flags every command shares.
    pub fn set_common(&mut self, command: &str, seed: Option<u64>, out: Option<String>) -> CliResult<()> {
        self.seed = self.value("seed", seed, 0)?;
        self.out = PathBuf::from(self.value("out", out, format!("runs/{command}"))?);
        Ok(())
    }

    /// Flag value, else config value, else `default`.
    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => {
                self.consumed.insert(key.to_string());
                v
            }
            None => self.from_config(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => {
                self.consumed.insert(key.to_string());
                Some(v)
            }
            None => self.from_config(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    /// Boolean switch: present flag, else config `true`/`false`.
    pub fn switch(&mut self, key: &str, flag: bool) -> CliResult<bool> {
        let v = if flag {
            self.consumed.insert(key.to_string());
            true
        } else {
            self.from_config(key)?.unwrap_or(false)
        };
        self.record(key, v);
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: Option<String>) -> CliResult<Option<PathBuf>> {
        Ok(self.optional(key, flag)?.map(PathBuf::from))
    }

    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// Reject config keys that no option consumed.
    pub fn finish(&self) -> CliResult<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!("config keys not used by this run: {}", unknown.join(", "))))
        }
    }

    /// Write `out/manifest.txt`: the command, tool version, a timestamp and
    /// every resolved option.
    pub fn write_manifest(&self, out: &Path, command: &str) -> CliResult<()> {
        let mut map = BTreeMap::new();
        for (k, v) in &self.resolved {
            map.insert(k.clone(), v.clone());
        }
        map.insert("command".into(), command.into());
        map.insert("tool.version".into(), env!("CARGO_PKG_VERSION").into());
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        map.insert("created_unix".into(), now.to_string());
        let text = render_config(&map)?;
        write(&out.join("manifest.txt"), text)
    }
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| fpt_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, contents).map_err(|e| {
        CliError::Run(fpt_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}
