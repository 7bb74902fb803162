//! Minimal `--flag value` argument parsing with strict flag validation.

use std::collections::BTreeMap;

pub struct Args {
    flags: BTreeMap<String, String>,
}

pub type UsageResult<T> = Result<T, String>;

impl Args {
    /// Parse `--name value` pairs, rejecting anything not in `allowed`.
    pub fn parse(argv: &[String], allowed: &[&str]) -> UsageResult<Args> {
        let mut flags = BTreeMap::new();
        let mut it = argv.iter();
        while let Some(arg) = it.next() {
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| format!("expected a --flag, got {arg:?}"))?;
            if !allowed.contains(&name) {
                return Err(format!("unknown flag --{name}"));
            }
            let value = it
                .next()
                .ok_or_else(|| format!("flag --{name} needs a value"))?;
            if flags.insert(name.to_string(), value.clone()).is_some() {
                return Err(format!("flag --{name} given twice"));
            }
        }
        Ok(Args { flags })
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.flags.get(name).map(|s| s.as_str())
    }

    pub fn require(&self, name: &str) -> UsageResult<&str> {
        self.get(name).ok_or_else(|| format!("missing --{name}"))
    }

    pub fn get_usize(&self, name: &str, default: usize) -> UsageResult<usize> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| format!("--{name}: bad integer {v:?}")),
        }
    }

    pub fn require_usize(&self, name: &str) -> UsageResult<usize> {
        self.require(name)?
            .parse()
            .map_err(|_| format!("--{name}: bad integer"))
    }

    pub fn get_u64(&self, name: &str, default: u64) -> UsageResult<u64> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| format!("--{name}: bad integer {v:?}")),
        }
    }

    pub fn get_f64(&self, name: &str, default: f64) -> UsageResult<f64> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("--{name}: bad number {v:?}")),
        }
    }

    /// The resolved flag map, for run manifests.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.flags.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
