//! Layered run settings: defaults, then a flat JSON file, then flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use skiprec::{Error, Result};

/// Settings after layering, with the keys the user set explicitly.
#[derive(Debug)]
pub struct Resolved<S> {
    pub settings: S,
    pub values: Map<String, Value>,
    pub explicit: BTreeSet<String>,
}

impl<S> Resolved<S> {
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }
}

fn object(value: Value, what: &str) -> Result<Map<String, Value>> {
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(Error::Config(format!("{what} must be a JSON object"))),
    }
}

pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let map = object(serde_json::from_str(&text)?, "config file")?;
    if let Some((k, _)) = map.iter().find(|(_, v)| v.is_object()) {
        return Err(Error::Config(format!(
            "config key `{k}` holds a nested object; the config file must be flat"
        )));
    }
    Ok(map)
}

/// Layers `config` and `flags` over `S::default()`. Absent flags serialize
/// as null and are ignored.
pub fn resolve<S, F>(flags: &F, config: Option<&Path>) -> Result<Resolved<S>>
where
    S: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut values = object(serde_json::to_value(S::default())?, "defaults")?;
    let mut explicit = BTreeSet::new();
    if let Some(path) = config {
        for (k, v) in read_config_file(path)? {
            if !values.contains_key(&k) {
                return Err(Error::Config(format!(
                    "unknown key `{k}` in config file {}",
                    path.display()
                )));
            }
            explicit.insert(k.clone());
            values.insert(k, v);
        }
    }
    for (k, v) in object(serde_json::to_value(flags)?, "flags")? {
        if v.is_null() {
            continue;
        }
        explicit.insert(k.clone());
        values.insert(k, v);
    }
    let settings = serde_json::from_value(Value::Object(values.clone()))
        .map_err(|e| Error::Config(format!("invalid setting: {e}")))?;
    Ok(Resolved {
        settings,
        values,
        explicit,
    })
}

pub fn required(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct S {
        a: u32,
        b: f64,
        path: Option<PathBuf>,
    }

    impl Default for S {
        fn default() -> Self {
            S { a: 1, b: 0.5, path: None }
        }
    }

    #[derive(Serialize)]
    struct F {
        a: Option<u32>,
        b: Option<f64>,
    }

    fn file(body: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), body).unwrap();
        f
    }

    #[test]
    fn flags_override_file_over_defaults() {
        let cfg = file(r#"{"a": 5, "b": 2}"#);
        let r: Resolved<S> = resolve(&F { a: Some(9), b: None }, Some(cfg.path())).unwrap();
        assert_eq!(r.settings.a, 9);
        assert_eq!(r.settings.b, 2.0);
        assert!(r.is_explicit("a") && r.is_explicit("b") && !r.is_explicit("path"));
        let r: Resolved<S> = resolve(&F { a: None, b: None }, None).unwrap();
        assert_eq!((r.settings.a, r.settings.b), (1, 0.5));
        assert!(r.explicit.is_empty());
    }

    #[test]
    fn unknown_and_nested_keys_are_rejected() {
        let cfg = file(r#"{"c": 1}"#);
        let err = resolve::<S, _>(&F { a: None, b: None }, Some(cfg.path())).unwrap_err();
        assert!(err.to_string().contains("`c`"));
        let cfg = file(r#"{"a": {"x": 1}}"#);
        assert!(resolve::<S, _>(&F { a: None, b: None }, Some(cfg.path())).is_err());
        let cfg = file(r#"{"a": 1.5}"#);
        assert!(resolve::<S, _>(&F { a: None, b: None }, Some(cfg.path())).is_err());
    }
}
