//! Run configuration: defaults, then an optional JSON file, then
//! `--key value` overrides addressed by dot-paths (`--f.0.coeffs [0,1]`).

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;

/// Master seed, output directory, and the command's parameter record.
///
/// Serializes to one flat JSON object: `seed`, `output`, and the parameter
/// fields side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig<P> {
    pub seed: u64,
    pub output: PathBuf,
    pub params: P,
}

impl<P: Serialize + DeserializeOwned + Default> RunConfig<P> {
    pub fn defaults(command: &str) -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            output: default_output(command),
            params: P::default(),
        }
    }

    pub fn load(command: &str, file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut v = Self::defaults(command).to_value();
        if let Some(file) = file {
            let text = std::fs::read_to_string(file)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", file.display())))?;
            let user: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", file.display())))?;
            if !user.is_object() {
                return Err(CliError::Usage("config file must hold a JSON object".into()));
            }
            merge(&mut v, user);
        }
        for (key, value) in parse_overrides(overrides)? {
            set_path(&mut v, &key, value)?;
        }
        Self::from_value(command, v)
    }

    pub fn from_value(command: &str, mut v: Value) -> Result<Self, CliError> {
        let obj = v
            .as_object_mut()
            .ok_or_else(|| CliError::Usage("configuration must be a JSON object".into()))?;
        let seed = match obj.remove("seed") {
            None => DEFAULT_SEED,
            Some(s) => s
                .as_u64()
                .ok_or_else(|| CliError::Usage(format!("seed must be a nonnegative integer, got {s}")))?,
        };
        let output = match obj.remove("output") {
            None => default_output(command),
            Some(Value::String(s)) if !s.is_empty() => PathBuf::from(s),
            Some(o) => return Err(CliError::Usage(format!("output must be a nonempty string, got {o}"))),
        };
        let params = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid {command} config: {e}")))?;
        Ok(RunConfig { seed, output, params })
    }

    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.params).expect("parameter records serialize");
        let obj = v.as_object_mut().expect("parameter records are JSON objects");
        obj.insert("seed".into(), self.seed.into());
        obj.insert("output".into(), self.output.to_string_lossy().into_owned().into());
        v
    }
}

fn default_output(command: &str) -> PathBuf {
    command.split_whitespace().fold(PathBuf::from("ncrough-out"), |p, part| p.join(part))
}

/// Objects merge key by key; anything else is replaced. A tagged object
/// whose `kind` changes is replaced whole, so no fields of the old variant
/// linger.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) if !kind_changes(b, t.get("kind")) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `--key value` and `--key=value` pairs. Values are parsed as JSON when
/// possible and kept as strings otherwise.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| CliError::Usage(format!("expected --key, got {a:?}")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key, value));
    }
    Ok(out)
}

fn kind_changes(map: &Map<String, Value>, kind: Option<&Value>) -> bool {
    matches!((map.get("kind"), kind), (Some(a), Some(b)) if a != b)
}

pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let bad = |msg: &str| CliError::Usage(format!("--{key}: {msg}"));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty path segment"));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    if *part == "kind" && kind_changes(map, Some(&value)) {
                        map.clear();
                    }
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| bad("array segments must be indices"))?;
                if idx > items.len() || (idx == items.len() && !last) {
                    return Err(bad("array index out of range"));
                }
                if last {
                    if idx == items.len() {
                        items.push(value);
                    } else {
                        items[idx] = value;
                    }
                    return Ok(());
                }
                &mut items[idx]
            }
            _ => return Err(bad("cannot descend into a scalar")),
        };
    }
    unreachable!("loop returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ncrough::experiments::{ItoStratoConfig, SolutionConvergenceConfig};

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_parse_json_or_string() {
        let o = parse_overrides(&args(&["--n", "64", "--g=same-star", "--mesh_levels", "[2,3]"])).unwrap();
        assert_eq!(o[0], ("n".into(), Value::from(64)));
        assert_eq!(o[1], ("g".into(), Value::from("same-star")));
        assert_eq!(o[2].1, serde_json::json!([2, 3]));
        assert!(parse_overrides(&args(&["n", "3"])).is_err());
        assert!(parse_overrides(&args(&["--n"])).is_err());
    }

    #[test]
    fn dot_paths_reach_nested_values() {
        let mut v = serde_json::json!({"f": [{"kind": "poly", "coeffs": [1.0]}], "a": {"b": 1}});
        set_path(&mut v, "f.0.coeffs", serde_json::json!([0.0, 1.0])).unwrap();
        set_path(&mut v, "a.c", Value::from(2)).unwrap();
        set_path(&mut v, "f.1", serde_json::json!({"kind": "poly", "coeffs": [1.0]})).unwrap();
        assert_eq!(v["f"][0]["coeffs"], serde_json::json!([0.0, 1.0]));
        assert_eq!(v["a"], serde_json::json!({"b": 1, "c": 2}));
        assert_eq!(v["f"].as_array().unwrap().len(), 2);
        assert!(set_path(&mut v, "a.b.c", Value::from(1)).is_err());
        assert!(set_path(&mut v, "f.5", Value::from(1)).is_err());
    }

    #[test]
    fn changing_a_tag_drops_the_old_variant() {
        let mut v = serde_json::json!({"initial": {"kind": "gue", "scale": 0.5}});
        set_path(&mut v, "initial.kind", Value::from("scalar")).unwrap();
        set_path(&mut v, "initial.value", Value::from(2.0)).unwrap();
        assert_eq!(v["initial"], serde_json::json!({"kind": "scalar", "value": 2.0}));
        let mut w = serde_json::json!({"initial": {"kind": "gue", "scale": 0.5}});
        merge(&mut w, serde_json::json!({"initial": {"kind": "scalar", "value": 1.0}}));
        assert_eq!(w["initial"], serde_json::json!({"kind": "scalar", "value": 1.0}));
        merge(&mut w, serde_json::json!({"initial": {"value": 3.0}}));
        assert_eq!(w["initial"], serde_json::json!({"kind": "scalar", "value": 3.0}));
    }

    #[test]
    fn round_trip_through_json() {
        let cfg: RunConfig<SolutionConvergenceConfig> =
            RunConfig::load("study", None, &args(&["--seed", "7", "--n", "16", "--output", "x/y"])).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.params.n, 16);
        let text = serde_json::to_string(&cfg.to_value()).unwrap();
        let back = RunConfig::<SolutionConvergenceConfig>::from_value("study", serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_values_sit_between_defaults_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"n": 32, "level": 8, "seed": 3}"#).unwrap();
        let cfg: RunConfig<ItoStratoConfig> = RunConfig::load("s", Some(&file), &args(&["--level", "6"])).unwrap();
        assert_eq!((cfg.params.n, cfg.params.level, cfg.seed), (32, 6, 3));
        assert_eq!(cfg.params.limit, ItoStratoConfig::default().limit);
    }

    #[test]
    fn schema_violations_are_usage_errors() {
        let unknown = RunConfig::<ItoStratoConfig>::load("s", None, &args(&["--bogus", "1"]));
        assert!(matches!(unknown, Err(CliError::Usage(_))));
        let wrong_type = RunConfig::<ItoStratoConfig>::load("s", None, &args(&["--n", "many"]));
        assert!(matches!(wrong_type, Err(CliError::Usage(_))));
        let seed = RunConfig::<ItoStratoConfig>::load("s", None, &args(&["--seed", "-1"]));
        assert!(matches!(seed, Err(CliError::Usage(_))));
    }
}
