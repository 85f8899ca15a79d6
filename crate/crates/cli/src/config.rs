//! `--config FILE` support: keys of a JSON object become flags of the chosen
//! subcommand unless the same flag is already given on the command line.

use std::fs;

use midx_core::Error;
use serde_json::Value;

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn has_flag(argv: &[String], flag: &str) -> bool {
    argv.iter()
        .any(|a| a == flag || a.starts_with(&format!("{flag}=")))
}

fn render(key: &str, v: &Value) -> Result<Option<String>, Error> {
    Ok(match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(items) => {
            let parts: Result<Vec<_>, _> = items
                .iter()
                .map(|x| match x {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    _ => Err(Error::Format(format!(
                        "config key `{key}`: unsupported list item"
                    ))),
                })
                .collect();
            Some(parts?.join(","))
        }
        _ => {
            return Err(Error::Format(format!(
                "config key `{key}`: unsupported value"
            )))
        }
    })
}

/// Append config-file flags to `argv` where the command line does not set them.
pub fn merge_config(mut argv: Vec<String>) -> Result<Vec<String>, Error> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{path}: {e}")))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{path}: {e}")))?;
    let Value::Object(map) = value else {
        return Err(Error::Format(format!(
            "{path}: config must be a JSON object"
        )));
    };
    let mut extra = Vec::new();
    for (key, v) in &map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" || has_flag(&argv, &flag) {
            continue;
        }
        match v {
            Value::Bool(true) => extra.push(flag),
            Value::Bool(false) => {}
            other => {
                if let Some(s) = render(key, other)? {
                    extra.push(flag);
                    extra.push(s);
                }
            }
        }
    }
    argv.extend(extra);
    Ok(argv)
}
