//! Layered configuration: built-in defaults, then the config file, then flags.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use trafficmoe_core::model::ModelConfig;
use trafficmoe_core::token::SerializerConfig;
use trafficmoe_core::train::TrainConfig;

use crate::args::{ModelArgs, SerializerArgs, TrainArgs};
use crate::error::{CliError, CliResult};

const SECTIONS: [&str; 3] = ["serializer", "model", "train"];

#[derive(Debug, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(k) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::Data(anyhow::anyhow!(
                "config {}: unknown section [{k}], expected one of {SECTIONS:?}",
                path.display()
            )));
        }
        Ok(Self { table })
    }

    /// `base` with the keys of table `name` laid over it.
    pub fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: &T) -> CliResult<T> {
        let mut merged = toml::Table::try_from(base).context("serializing defaults")?;
        if let Some(over) = self.table.get(name) {
            let over = over
                .as_table()
                .ok_or_else(|| anyhow::anyhow!("config: [{name}] must be a table"))?;
            for (k, v) in over {
                merged.insert(k.clone(), v.clone());
            }
        }
        let out = toml::Value::Table(merged)
            .try_into()
            .with_context(|| format!("config section [{name}]"))?;
        Ok(out)
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn serializer(file: &ConfigFile, a: &SerializerArgs) -> CliResult<SerializerConfig> {
    let mut c = file.section("serializer", &SerializerConfig::default())?;
    set(&mut c.packets_per_flow, a.packets_per_flow);
    set(&mut c.payload_bytes, a.payload_bytes);
    set(&mut c.max_tokens, a.max_tokens);
    set(&mut c.bigram_stride, a.stride);
    Ok(c)
}

pub fn model(file: &ConfigFile, a: &ModelArgs) -> CliResult<ModelConfig> {
    let mut c = file.section("model", &ModelConfig::default())?;
    apply_model_flags(&mut c, a);
    Ok(c)
}

pub fn apply_model_flags(c: &mut ModelConfig, a: &ModelArgs) {
    set(&mut c.layers, a.layers);
    set(&mut c.d_model, a.d_model);
    set(&mut c.heads, a.heads);
    set(&mut c.experts, a.experts);
    set(&mut c.top_k, a.top_k);
    set(&mut c.d_ff, a.d_ff);
    set(&mut c.init_std, a.init_std);
}

pub fn model_flags_given(a: &ModelArgs) -> bool {
    a.layers.is_some()
        || a.d_model.is_some()
        || a.heads.is_some()
        || a.experts.is_some()
        || a.top_k.is_some()
        || a.d_ff.is_some()
        || a.init_std.is_some()
}

pub fn train(file: &ConfigFile, base: TrainConfig, a: &TrainArgs, seed: Option<u64>) -> CliResult<TrainConfig> {
    let mode = base.mode;
    let mut c = file.section("train", &base)?;
    c.mode = mode;
    set(&mut c.epochs, a.epochs);
    set(&mut c.lr, a.lr);
    set(&mut c.batch_size, a.batch_size);
    set(&mut c.aux_weight, a.aux_weight);
    set(&mut c.weight_decay, a.weight_decay);
    if a.max_steps.is_some() {
        c.max_steps = a.max_steps;
    }
    set(&mut c.seed, seed);
    Ok(c)
}
