//! Theory probes driven from a config.
//!
//! The suite first runs the attack pipeline into `<out_dir>/attack` and then
//! probes the models and scores it saved. Hessian and gradient-stream probes
//! need a classifier; the loss gap needs a language model. The JSD grid, the
//! degraded-channel check and the decomposition residuals on small synthetic
//! models are model-free and always produced.

use super::config::{ExperimentConfig, Seeds};
use super::pipeline::{baseline_attack, labeled, run_attack_pipeline, stage, AttackOutcome, RunManifest};
use super::RunDir;
use crate::data::{ClsDataset, SeqDataset, SplitPlan};
use crate::error::Result;
use crate::eval::ScoredSample;
use crate::io::{fmt_f64, write_csv, write_json};
use crate::models::{load_checkpoint, Activation, MlpClassifier, TinyCausalLm};
use crate::reprogram::{Family, ReprogramPattern};
use crate::rng::{derive_seed, Rng};
use crate::theory::{
    degraded_channel_check, gradient_streams, jsd_grid, loss_gap_report, mi_estimate, spectral_gap_experiment,
    verify_hessian_decomposition, DegradedChannel, MiEstimator, PowerConfig, TheoryReport,
};
use std::path::Path;

/// Ratios `delta / sigma` of the exported JSD grid.
pub const JSD_RATIOS: [f64; 8] = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 20.0];

#[derive(Clone, Debug)]
pub struct TheoryOutcome {
    pub manifest: RunManifest,
    pub report: TheoryReport,
    pub attack: AttackOutcome,
    pub degraded: DegradedChannel,
}

fn mi_of(samples: &[ScoredSample]) -> Result<f64> {
    let m: Vec<f64> = samples.iter().filter(|s| s.is_member).map(|s| s.score).collect();
    let n: Vec<f64> = samples.iter().filter(|s| !s.is_member).map(|s| s.score).collect();
    Ok(mi_estimate(&m, &n, MiEstimator::GaussianFit)?.value)
}

/// Worst relative residuals of the decomposition on a linear-softmax model
/// and a two-layer tanh network, both with 4 inputs.
fn decomposition_residuals(k: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = Rng::new(seed);
    let linear = MlpClassifier::new(&[4, k], Activation::Tanh, &mut rng)?;
    let mlp = MlpClassifier::new(&[4, 8, k], Activation::Tanh, &mut rng)?;
    let (mut lin, mut full) = (0.0f64, 0.0f64);
    for i in 0..4 {
        let x = rng.normal_vec(4, 1.0);
        let y = i % k;
        lin = lin.max(verify_hessian_decomposition(&linear, &x, y, 1e-4)?.rel_residual_gauss_newton);
        full = full.max(verify_hessian_decomposition(&mlp, &x, y, 1e-4)?.rel_residual_full);
    }
    Ok((lin, full))
}

/// Runs the attack pipeline and every applicable probe into `cfg.out_dir`.
pub fn run_theory_suite(cfg: &ExperimentConfig) -> Result<TheoryOutcome> {
    cfg.validate()?;
    let seeds: Seeds = cfg.seeds();
    let mut rd = RunDir::open(Path::new(&cfg.out_dir))?;
    let root = rd.root.clone();
    rd.write_config(cfg, &seeds)?;
    let probe_seed = derive_seed(seeds.master, "theory");

    let jsd_path = rd.artifact("jsd_grid.csv");
    let deg_path = rd.artifact("degraded_channel.json");
    let degraded = stage(&root, "model_free", || {
        let rows: Vec<Vec<String>> = jsd_grid(1.0, &JSD_RATIOS)?
            .into_iter()
            .map(|(r, j)| vec![fmt_f64(r), fmt_f64(j)])
            .collect();
        write_csv(&jsd_path, &["delta_over_sigma", "jsd"], &rows)?;
        let d = degraded_channel_check(2.0, 1.0, 0.5, 20_000, derive_seed(probe_seed, "degraded"))?;
        write_json(&deg_path, &d)?;
        Ok(d)
    })?;
    let (lin, full) = stage(&root, "decomposition", || {
        decomposition_residuals(cfg.n_classes.max(2), derive_seed(probe_seed, "decomposition"))
    })?;

    let mut sub = cfg.clone();
    sub.out_dir = root.join("attack").to_string_lossy().into_owned();
    let attack = stage(&root, "attack", || run_attack_pipeline(&sub))?;
    rd.record("attack/manifest.json");
    let base = baseline_attack(cfg);
    let mut report = TheoryReport {
        rho: attack.target.rho,
        linear_decomposition_residual: lin,
        mlp_decomposition_residual: full,
        ..Default::default()
    };
    stage(&root, "mutual_information", || {
        let b = attack.run(base, "none").or_else(|| attack.runs.iter().find(|r| r.attack == base));
        let d = attack.runs.iter().find(|r| r.attack == "reprogram");
        if let (Some(b), Some(d)) = (b, d) {
            report.mi_base = mi_of(&b.samples)?;
            report.mi_delta = mi_of(&d.samples)?;
        }
        Ok(())
    })?;

    let sub_root = root.join("attack");
    let plan = SplitPlan::load(&sub_root.join("split.json"))?;
    let n_side = cfg.theory_samples;
    let take = |ids: &[usize]| ids.iter().copied().take(n_side).collect::<Vec<_>>();
    match cfg.family {
        Family::Classifier => {
            if cfg.activation == "relu" {
                log::warn!("hessian probes use finite differences; relu kinks make lambda_max unreliable, prefer tanh");
            }
            let lambdas = rd.artifact("lambdas.csv");
            stage(&root, "hessian_probes", || {
                let model = MlpClassifier::from_checkpoint(&load_checkpoint(&sub_root.join("target.ckpt"))?)?;
                let data = ClsDataset::load_csv(&sub_root.join("data.csv"), cfg.n_classes)?;
                let members = labeled(&data, &take(&plan.tar_train))?;
                let nonmembers = labeled(&data, &take(&plan.tar_held))?;
                let pc = PowerConfig {
                    iters: cfg.power_iters,
                    h: 1e-4,
                    seed: derive_seed(probe_seed, "power"),
                };
                let gap = spectral_gap_experiment(&model, &members, &nonmembers, &pc)?;
                let (g1, g2) = gradient_streams(&model, &members, &nonmembers)?;
                let rows: Vec<Vec<String>> = (gap.member_lambdas.iter().map(|l| ("1", l)))
                    .chain(gap.nonmember_lambdas.iter().map(|l| ("0", l)))
                    .map(|(m, l)| vec![m.to_string(), fmt_f64(*l)])
                    .collect();
                write_csv(&lambdas, &["is_member", "lambda_max"], &rows)?;
                report.lambda_max_member_mean = Some(gap.lambda_max_member_mean);
                report.lambda_max_nonmember_mean = Some(gap.lambda_max_nonmember_mean);
                report.spectral_gap = Some(gap.spectral_gap);
                report.spectral_gap_stderr = Some(gap.gap_stderr);
                report.dispersion_alpha = Some(gap.dispersion_alpha);
                report.g1_norm = Some(g1);
                report.g2_norm = Some(g2);
                Ok(())
            })?;
        }
        Family::Lm => {
            let gap_path = rd.artifact("loss_gap.csv");
            stage(&root, "loss_gap", || {
                let model = TinyCausalLm::from_checkpoint(&load_checkpoint(&sub_root.join("target.ckpt"))?)?;
                let data = SeqDataset::load_csv(&sub_root.join("data.csv"), cfg.vocab_size)?;
                let pattern = ReprogramPattern::load(&sub_root.join("pattern.ckpt"))?;
                let pick = |ids: Vec<usize>| ids.into_iter().map(|i| (i, data.sequences[i].as_slice())).collect::<Vec<_>>();
                let shadow: Vec<usize> = plan.shadow_train.iter().chain(&plan.shadow_held).copied().collect();
                let gap = loss_gap_report(&model, &pattern, &pick(take(&plan.tar_train)), &pick(take(&plan.tar_held)), &shadow)?;
                gap.write_csv(&gap_path)?;
                report.loss_gap_base = Some(gap.gap_base);
                report.loss_gap_delta = Some(gap.gap_delta);
                Ok(())
            })?;
        }
        Family::Diffusion => {}
    }
    let rpath = rd.artifact("theory_report.json");
    write_json(&rpath, &report)?;
    let manifest = rd.finish("theory", cfg, &seeds)?;
    Ok(TheoryOutcome {
        manifest,
        report,
        attack,
        degraded,
    })
}
