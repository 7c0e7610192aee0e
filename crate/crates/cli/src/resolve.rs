//! Config-file merging: a TOML file supplies defaults, flags override it,
//! and the merged result is written next to the outputs so the run can be
//! repeated from that file alone.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::UsageError;

pub const SEED_ENV: &str = "LBGAN_SEED";

/// Recursively lay `over` on top of `base`, ignoring nulls in `over`.
fn overlay(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None if !v.is_null() => {
                        b.insert(k, v);
                    }
                    None => {}
                }
            }
        }
        (_, Value::Null) => {}
        (b, o) => *b = o,
    }
}

/// Merge `args` over the TOML file at `config` (when given).
pub fn merge<A: Serialize + DeserializeOwned>(args: &A, config: Option<&Path>) -> anyhow::Result<A> {
    let flags = serde_json::to_value(args)?;
    let Some(path) = config else {
        return Ok(serde_json::from_value(flags)?);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: toml::Table =
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(file)?;
    overlay(&mut base, flags);
    serde_json::from_value(base).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

/// `LBGAN_SEED` wins over any seed from flags or files.
pub fn seed_override() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| UsageError(format!("{SEED_ENV}={s} is not an unsigned integer")).into()),
        Err(_) => Ok(None),
    }
}

pub fn require<T>(v: Option<T>, flag: &str) -> anyhow::Result<T> {
    v.ok_or_else(|| UsageError(format!("missing required option --{flag}")).into())
}

/// Writes `<out>/<name>.resolved.toml`.
pub fn write_resolved<A: Serialize>(out: &Path, name: &str, resolved: &A) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{name}.resolved.toml"));
    std::fs::write(&path, toml::to_string(resolved)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file_values_and_nulls_do_not() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}, "e": "x"});
        overlay(&mut base, json!({"a": null, "b": {"c": 5, "d": null}, "f": null, "g": true}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 5, "d": 3}, "e": "x", "g": true}));
    }
}
