use std::path::{Path, PathBuf};

use multiatlas::ensemble::FusionMethod;
use multiatlas::eval::PipelineConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// One experiment: where the data is, where results go, and how to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Command-line overrides shared by the pipeline subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_smote: bool,
    #[arg(long)]
    pub no_harmonize: bool,
    /// Neighbours per node in the connectivity graph.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub smote_k: Option<usize>,
    #[arg(long)]
    pub smote_multiplier: Option<f64>,
    #[arg(long)]
    pub edge_weighted_attention: bool,
    /// vote, sum, wsum or all.
    #[arg(long)]
    pub ensemble: Option<String>,
    /// Root directory for run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_methods(s: &str) -> Result<Vec<FusionMethod>, CliError> {
    if s == "all" {
        return Ok(FusionMethod::ALL.to_vec());
    }
    s.split(',')
        .map(|m| m.trim().parse::<FusionMethod>().map_err(CliError::Usage))
        .collect()
}

impl ExperimentConfig {
    /// Reads the config file, applies overrides and validates the result.
    /// A relative manifest path is taken relative to the config file.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(&o.config)
            .map_err(|e| CliError::Usage(format!("reading config {}: {e}", o.config.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("parsing config {}: {e}", o.config.display())))?;
        let base = o.config.parent().unwrap_or_else(|| Path::new("."));
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        let p = &mut cfg.pipeline;
        if let Some(seed) = o.seed {
            p.seed = seed;
        }
        if o.no_smote {
            p.smote_enabled = false;
        }
        if o.no_harmonize {
            p.harmonize = false;
        }
        if let Some(k) = o.k {
            p.knn_k = k;
        }
        if let Some(k) = o.smote_k {
            p.smote.k_neighbors = k;
        }
        if let Some(m) = o.smote_multiplier {
            p.smote.multiplier = m;
        }
        if o.edge_weighted_attention {
            p.gat.edge_weighted_attention = true;
        }
        if let Some(m) = &o.ensemble {
            p.methods = parse_methods(m)?;
        }
        if let Some(out) = &o.out {
            cfg.out = out.clone();
        }
        p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    /// Short hash of the pipeline settings with the seed cleared.
    pub fn config_hash(&self) -> String {
        let mut p = self.pipeline.clone();
        p.seed = 0;
        let text = serde_json::to_string(&(&self.manifest, &p)).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out
            .join(format!("{}-seed{}", self.config_hash(), self.pipeline.seed))
    }

    /// Creates the run directory and records the resolved configuration.
    pub fn prepare_run_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(dir)
    }
}
