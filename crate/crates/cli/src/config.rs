//! Optional JSON file supplying defaults for numeric flags. Flags given on
//! the command line win.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub f_min: Option<f64>,
    pub f_max: Option<f64>,
    pub bpo: Option<usize>,
    pub hop: Option<usize>,
    pub q_cycles: Option<f64>,
    pub tf_tradeoff: Option<f64>,
    pub seed: Option<u64>,
    pub tempo: Option<f64>,
    pub measures: Option<usize>,
    pub noise: Option<f64>,
    pub rate: Option<f64>,
    pub onset_width: Option<usize>,
    pub tolerance: Option<f64>,
    pub width: Option<String>,
    pub peak_threshold: Option<f64>,
    pub min_separation: Option<f64>,
    pub examples: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub l2: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
