//! Run configuration: defaults, then a `key = value` file with `[section]`
//! headers, then `--set` overrides. Keys are dotted paths into the suite
//! configuration, e.g. `train.lm_lr` or `[data.counts]` + `train = 100`.

use std::collections::BTreeSet;

use ini::Ini;
use serde_json::Value;
use vp2_planner::suite::SuiteConfig;

use crate::Usage;

/// Resolved configuration and the keys that were set explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: SuiteConfig,
    pub explicit: BTreeSet<String>,
}

/// Flattens a config file into `(dotted key, value)` pairs in file order.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, Usage> {
    let ini = Ini::load_from_str(text).map_err(|e| Usage(format!("config file: {e}")))?;
    let mut out = Vec::new();
    for (section, props) in ini.iter() {
        for (k, v) in props.iter() {
            let key = match section {
                Some(s) => format!("{s}.{k}"),
                None => k.to_string(),
            };
            out.push((key, v.to_string()));
        }
    }
    Ok(out)
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), Usage> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Usage(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Applies `entries` in order on top of the defaults. Pure: the same
/// entries always give the same configuration.
pub fn resolve(entries: &[(String, String)]) -> Result<Resolved, Usage> {
    let mut value = serde_json::to_value(SuiteConfig::default()).expect("config serialises");
    let mut explicit = BTreeSet::new();
    for (key, raw) in entries {
        set_path(&mut value, key, raw)?;
        explicit.insert(key.clone());
    }
    let config: SuiteConfig =
        serde_json::from_value(value).map_err(|e| Usage(format!("config: {e}")))?;
    config.train.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(Resolved { config, explicit })
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), Usage> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Usage(format!("unknown config key `{key}`")))?;
    }
    *node = typed(node, raw).ok_or_else(|| Usage(format!("bad value `{raw}` for `{key}`")))?;
    Ok(())
}

/// Parses `raw` to the JSON type of the current value.
fn typed(current: &Value, raw: &str) -> Option<Value> {
    if is_none(raw) && !current.is_string() {
        // deserialisation rejects it unless the field is optional
        return Some(Value::Null);
    }
    match current {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw.parse::<f64>().ok().map(Value::from),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::Null);
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| typed(&proto, s))
                .collect::<Option<Vec<_>>>()
                .map(Value::Array)
        }
        Value::Null => Some(infer(raw)),
        Value::Object(_) => None,
    }
}

/// Optional fields: `none` clears them, numbers stay numbers.
fn infer(raw: &str) -> Value {
    if is_none(raw) {
        Value::Null
    } else if let Ok(u) = raw.parse::<u64>() {
        Value::from(u)
    } else if let Ok(f) = raw.parse::<f64>() {
        Value::from(f)
    } else {
        Value::String(raw.to_string())
    }
}

fn is_none(raw: &str) -> bool {
    raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null")
}
