//! Layered `key = value` settings: built-in defaults, then an optional file,
//! then command-line flags. Unknown keys are rejected at every layer.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const ECHO_FILE: &str = "run_config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    command: &'static str,
    entries: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl RunConfig {
    pub fn new(command: &'static str, defaults: &[(&str, String)]) -> Self {
        Self {
            command,
            entries: defaults.iter().map(|(k, v)| (normalize(k), v.clone())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        let key = normalize(key);
        match self.entries.get_mut(&key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown setting `{key}` for `{}`", self.command),
        }
    }

    /// Applies `Some` overrides, typically straight from parsed flags.
    pub fn set_opt<T: Display>(&mut self, key: &str, value: &Option<T>) -> Result<()> {
        if let Some(v) = value {
            self.set(key, v)?;
        }
        Ok(())
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k, v.trim()).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.entries
            .get(&normalize(key))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("setting `{key}` has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>().map_err(|e| anyhow!("setting `{key}` = `{raw}`: {e}"))
    }

    /// Empty string means unset.
    pub fn get_opt_str(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|s| !s.is_empty())
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse::<T>().map_err(|e| anyhow!("setting `{key}`: `{s}`: {e}")))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!("# effective settings for `{}`\n", self.command);
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ECHO_FILE), self.render())?;
        Ok(())
    }
}
