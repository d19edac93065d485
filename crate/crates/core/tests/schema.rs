use std::path::PathBuf;

use crossing_core::config::{Config, OutputSpec};
use serde_json::Value as Json;
use toml::Value as Toml;

fn root() -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", ".."].iter().collect()
}

/// Every key `value` uses is declared in `schema`.
fn covered(value: &Toml, schema: &Json, path: &str) -> Result<(), String> {
    match value {
        Toml::Table(t) => {
            let props = schema["properties"]
                .as_object()
                .ok_or_else(|| format!("{path}: schema has no properties"))?;
            for (k, v) in t {
                let sub = props.get(k).ok_or_else(|| format!("{path}.{k} missing from schema"))?;
                covered(v, sub, &format!("{path}.{k}"))?;
            }
            Ok(())
        }
        Toml::Array(items) => items
            .iter()
            .try_for_each(|v| covered(v, &schema["items"], &format!("{path}[]"))),
        _ => Ok(()),
    }
}

#[test]
fn schema_declares_every_field() {
    let schema: Json =
        serde_json::from_str(&std::fs::read_to_string(root().join("docs/scenario.schema.json")).unwrap()).unwrap();
    let mut cfg = Config::load(&root().join("scenarios/intersection24.toml")).unwrap();
    cfg.output = Some(OutputSpec { dir: "out".into() });
    cfg.arrivals[0].exit_time = Some(cfg.arrivals[0].t0 + 30.0);
    let value: Toml = toml::from_str(&cfg.to_toml()).unwrap();
    covered(&value, &schema, "").unwrap();
    let required = schema["required"].as_array().unwrap();
    for r in required {
        assert!(value.get(r.as_str().unwrap()).is_some(), "{r}");
    }
}
