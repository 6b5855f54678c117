//! Built-in device and model presets.
//!
//! Presets are JSON files compiled into the crate. Setting
//! `LPU_PRESET_DIR` makes lookups try `$LPU_PRESET_DIR/arch/<name>.json`
//! and `$LPU_PRESET_DIR/model/<name>.json` first.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::arch::DeviceConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const PRESET_DIR_ENV: &str = "LPU_PRESET_DIR";

const ARCH: &[(&str, &str)] = &[
    ("hbm3-x1", include_str!("../presets/arch/hbm3-x1.json")),
    ("hbm3-x2", include_str!("../presets/arch/hbm3-x2.json")),
    ("hbm3-x4", include_str!("../presets/arch/hbm3-x4.json")),
    ("fpga-u55c", include_str!("../presets/arch/fpga-u55c.json")),
];

const MODEL: &[(&str, &str)] = &[
    ("opt-1.3b", include_str!("../presets/model/opt-1.3b.json")),
    ("opt-6.7b", include_str!("../presets/model/opt-6.7b.json")),
    ("opt-30b", include_str!("../presets/model/opt-30b.json")),
    ("opt-66b", include_str!("../presets/model/opt-66b.json")),
    ("gpt3-20b", include_str!("../presets/model/gpt3-20b.json")),
    ("tiny-2l", include_str!("../presets/model/tiny-2l.json")),
    ("tiny-llama", include_str!("../presets/model/tiny-llama.json")),
];

pub fn arch_names() -> impl Iterator<Item = &'static str> {
    ARCH.iter().map(|(n, _)| *n)
}

pub fn model_names() -> impl Iterator<Item = &'static str> {
    MODEL.iter().map(|(n, _)| *n)
}

fn lookup<T: DeserializeOwned>(kind: &str, table: &[(&str, &str)], name: &str) -> Result<T> {
    if let Some(dir) = std::env::var_os(PRESET_DIR_ENV) {
        let path = PathBuf::from(dir).join(kind).join(format!("{name}.json"));
        if path.is_file() {
            return load_json(&path);
        }
    }
    // a path to a config file is accepted in place of a preset name
    let as_path = Path::new(name);
    if name.ends_with(".json") && as_path.is_file() {
        return load_json(as_path);
    }
    let text = table
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
    Ok(serde_json::from_str(text)?)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Device preset by name (or path to a JSON device config).
pub fn device(name: &str) -> Result<DeviceConfig> {
    let d: DeviceConfig = lookup("arch", ARCH, name)?;
    d.validate()?;
    Ok(d)
}

/// Model preset by name (or path to a JSON model config).
pub fn model(name: &str) -> Result<ModelConfig> {
    let m: ModelConfig = lookup("model", MODEL, name)?;
    m.validate()?;
    Ok(m)
}
