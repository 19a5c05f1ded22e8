use std::collections::BTreeMap;
use std::path::Path;

use drnet::config::RunConfig;
use drnet::{Error, Result};
use serde::Serialize;

pub const FILE: &str = "run.json";

/// What a run needs to be repeated: command, inputs, resolved configuration.
/// Contains no timestamps or host details so repeated runs match byte for byte.
#[derive(Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub inputs: BTreeMap<&'a str, String>,
    pub config: &'a RunConfig,
}

impl<'a> RunRecord<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.train.seed,
            inputs: BTreeMap::new(),
            config,
        }
    }

    pub fn input(mut self, key: &'a str, value: impl ToString) -> Self {
        self.inputs.insert(key, value.to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE);
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("cannot serialize run record: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}
