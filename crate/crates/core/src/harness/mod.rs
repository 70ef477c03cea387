//! Config-driven pipelines and the run directory they write.
//!
//! A run directory holds `config.json` (resolved config, its hash and the
//! derived seeds), the artifacts of each stage and, once the run completes,
//! `manifest.json`. A failing stage leaves a `FAILED` file naming it. Every
//! file except `manifest.json` is a pure function of the config, so two runs
//! of the same config are byte-identical outside the manifest.

mod config;
mod pipeline;
mod theory_suite;

pub use config::{canonical, Defense, ExperimentConfig, Seeds, PRESETS};
pub use pipeline::{
    baseline_attack, leakage_guard, queries, rederive_report, run_ablation, run_attack_pipeline,
    run_attack_pipeline_with_split, score_gap, AttackOutcome, RunManifest, SweepRow,
};
pub use theory_suite::{run_theory_suite, TheoryOutcome};

use crate::error::Result;
use crate::io::{create_dir, write_json};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// The single writer of one run directory.
pub(crate) struct RunDir {
    pub root: PathBuf,
    artifacts: Vec<String>,
    started: u64,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        create_dir(root)?;
        let failed = root.join("FAILED");
        if failed.exists() {
            std::fs::remove_file(&failed).map_err(crate::error::io_err(&failed))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
            started: now(),
        })
    }

    pub fn record(&mut self, rel: &str) {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_string());
        }
    }

    /// Records `rel` and returns its full path.
    pub fn artifact(&mut self, rel: &str) -> PathBuf {
        self.record(rel);
        self.root.join(rel)
    }

    pub fn write_config(&mut self, cfg: &ExperimentConfig, seeds: &Seeds) -> Result<()> {
        let path = self.artifact("config.json");
        write_json(&path, &pipeline::config_record(cfg, seeds)?)
    }

    pub fn finish(&mut self, kind: &str, cfg: &ExperimentConfig, seeds: &Seeds) -> Result<RunManifest> {
        let m = RunManifest {
            kind: kind.into(),
            config_hash: cfg.hash()?,
            tool_version: TOOL_VERSION.into(),
            started_at: self.started,
            finished_at: now(),
            run_dir: self.root.to_string_lossy().into_owned(),
            artifacts: self.artifacts.clone(),
            seeds: seeds.clone(),
        };
        write_json(&self.root.join("manifest.json"), &m)?;
        Ok(m)
    }
}
