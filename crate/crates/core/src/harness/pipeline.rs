//! Attack runs, report re-derivation and parameter sweeps.

use super::config::{Defense, ExperimentConfig, Seeds};
use super::RunDir;
use crate::data::{gen_gaussian_mixture_in, gen_markov_sequences, gen_unit_box_mixture, make_split, ClsDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::eval::{
    defense_input_smoothing, defense_logits_noise, evaluate_grid, write_reports, AttackReport, AttackRun, ScoredSample,
};
use crate::io::{fmt_f64, read_json, write_csv};
use crate::models::{
    freeze, train_classifier, train_diffusion, train_lm, Activation, Classifier, DiffusionConfig, EpsMlpDiffusion,
    Frozen, LanguageModel, LmConfig, MlpClassifier, NoiseModel, TinyCausalLm, TrainHyper, TrainReport,
};
use crate::reprogram::{
    infer_labeled, infer_points, train_attack_mlp, train_cls_pattern, train_diffusion_pattern, train_soft_prompt,
    AttackFeature, AttackMlpHyper, ClsLossConfig, DiffLossConfig, Family, HardMiningConfig, Labeled, PatternHyper,
    ReprogramPattern, ScoreTransform, Scorer, Shadow, TrainedPattern,
};
use crate::rng::{derive_seed_index, Rng};
use crate::scoring::{
    cls_scores_batch, diffusion_naive_score, lm_loss_score, lm_mink_score, lm_ref_score, lm_score, read_scores_csv,
    ClsScoreConfig, DiffScoreConfig, LmScoreConfig, NiMode,
};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeSet;
use std::path::Path;

/// What one run wrote and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// `attack`, `theory` or `ablation`.
    pub kind: String,
    pub config_hash: String,
    pub tool_version: String,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub run_dir: String,
    /// Paths relative to `run_dir`, in write order.
    pub artifacts: Vec<String>,
    pub seeds: Seeds,
}

/// Everything an attack run produced, in memory.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub manifest: RunManifest,
    pub reports: Vec<AttackReport>,
    pub runs: Vec<AttackRun>,
    pub target: TrainReport,
    pub pattern: ReprogramPattern,
}

impl AttackOutcome {
    pub fn report(&self, attack: &str, defense: &str) -> Option<&AttackReport> {
        self.reports
            .iter()
            .find(|r| r.attack_name == attack && r.defense_name == defense)
    }

    pub fn run(&self, attack: &str, defense: &str) -> Option<&AttackRun> {
        self.runs.iter().find(|r| r.attack == attack && r.defense == defense)
    }

    /// Mean member score minus mean non-member score.
    pub fn mean_gap(&self, attack: &str, defense: &str) -> Option<f64> {
        self.run(attack, defense).map(|r| score_gap(&r.samples))
    }
}

pub fn score_gap(samples: &[ScoredSample]) -> f64 {
    let mean = |m: bool| {
        let v: Vec<f64> = samples.iter().filter(|s| s.is_member == m).map(|s| s.score).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    mean(true) - mean(false)
}

/// The attack that equals `reprogram` when the pattern is zero.
pub fn baseline_attack(cfg: &ExperimentConfig) -> &'static str {
    match cfg.family {
        Family::Classifier => "calibrated",
        Family::Lm => "mink_pp",
        Family::Diffusion if cfg.normalize_eps => "pian",
        Family::Diffusion => "pia",
    }
}

/// Model queries per scored sample.
pub fn queries(cfg: &ExperimentConfig, attack: &str) -> String {
    let cal = if cfg.use_reference { "2" } else { "1" };
    match (cfg.family, attack) {
        (Family::Classifier, "loss") => "1".into(),
        (Family::Classifier, _) => cal.into(),
        (Family::Lm, "reference") => "2".into(),
        (Family::Lm, _) => "1".into(),
        (Family::Diffusion, "naive") => cfg.naive_mc.to_string(),
        (Family::Diffusion, _) => "1+1".into(),
    }
}

/// Fails when any scored id also belongs to the shadow population.
pub fn leakage_guard(plan: &SplitPlan) -> Result<()> {
    let shadow: BTreeSet<usize> = plan.shadow_train.iter().chain(&plan.shadow_held).copied().collect();
    let hits: Vec<usize> = plan
        .eval_population()
        .into_iter()
        .map(|(i, _)| i)
        .filter(|i| shadow.contains(i))
        .collect();
    match hits.first() {
        None => Ok(()),
        Some(&first) => Err(Error::Leakage {
            count: hits.len(),
            first,
        }),
    }
}

fn train_hyper(cfg: &ExperimentConfig, seed: u64) -> TrainHyper {
    TrainHyper {
        epochs: cfg.epochs,
        lr: cfg.lr,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        seed,
    }
}

fn pattern_hyper(cfg: &ExperimentConfig, seeds: &Seeds) -> PatternHyper {
    PatternHyper {
        steps: cfg.pattern_steps,
        lr: cfg.pattern_lr,
        batch_size: cfg.pattern_batch,
        seed: seeds.pattern,
        descent_tol: 0.05,
    }
}

pub(crate) fn cls_score_config(cfg: &ExperimentConfig, seeds: &Seeds) -> ClsScoreConfig {
    ClsScoreConfig {
        use_reference: cfg.use_reference,
        ni_mode: match cfg.ni_mode.as_str() {
            "neighbor_mean" => NiMode::NeighborMean {
                radius: cfg.ni_radius,
                n_neighbors: cfg.ni_neighbors,
                seed: seeds.eval,
            },
            _ => NiMode::ConstantOne,
        },
    }
}

fn diff_score_config(cfg: &ExperimentConfig) -> DiffScoreConfig {
    DiffScoreConfig {
        t_probe: cfg.t_probe,
        p_norm: cfg.p_norm,
        normalize_eps: cfg.normalize_eps,
    }
}

pub(crate) fn cls_widths(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut w = vec![cfg.dim];
    w.extend(std::iter::repeat(cfg.hidden).take(cfg.hidden_layers));
    w.push(cfg.n_classes);
    w
}

pub(crate) fn activation(cfg: &ExperimentConfig) -> Activation {
    if cfg.activation == "tanh" {
        Activation::Tanh
    } else {
        Activation::Relu
    }
}

pub(crate) fn labeled(data: &ClsDataset, ids: &[usize]) -> Result<Labeled> {
    Ok(Labeled {
        x: data.points.select_rows(ids)?,
        y: ids.iter().map(|&i| data.labels[i]).collect(),
    })
}

fn concat(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().chain(b).copied().collect()
}

/// Runs `f` as the named stage; on error leaves a `FAILED` marker naming it.
pub(crate) fn stage<T>(root: &Path, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| {
        let _ = crate::io::write_string(&root.join("FAILED"), &format!("stage: {name}\nerror: {e}\n"));
        Error::Stage {
            stage: name,
            source: Box::new(e),
        }
    })
}

fn split_stage(cfg: &ExperimentConfig, seeds: &Seeds, rd: &mut RunDir, n: usize, plan: Option<SplitPlan>) -> Result<SplitPlan> {
    let root = rd.root.clone();
    let path = rd.artifact("split.json");
    stage(&root, "split", || {
        let plan = match plan {
            Some(p) => p,
            None => make_split(n, cfg.split, &mut Rng::new(seeds.data).split("split"))?,
        };
        leakage_guard(&plan)?;
        plan.check_disjoint()?;
        if let Some((name, ids)) = plan.subsets().into_iter().find(|(_, ids)| ids.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!("split: subset {name} has ids beyond the {n} generated samples ({ids:?})")));
        }
        plan.save(&path)?;
        Ok(plan)
    })
}

struct FamilyResult {
    runs: Vec<AttackRun>,
    target: TrainReport,
    pattern: ReprogramPattern,
}

fn save_pattern(rd: &mut RunDir, trained: &TrainedPattern) -> Result<()> {
    trained.pattern.save(&rd.artifact("pattern.ckpt"))?;
    trained.curve.write_csv(&rd.artifact("pattern_curve.csv"))
}

fn scored(eval: &[(usize, bool)], scores: Vec<f64>) -> Vec<ScoredSample> {
    eval.iter()
        .zip(scores)
        .map(|(&(id, is_member), score)| ScoredSample { id, score, is_member })
        .collect()
}

/// Runs the whole attack pipeline for `cfg` into `cfg.out_dir`.
pub fn run_attack_pipeline(cfg: &ExperimentConfig) -> Result<AttackOutcome> {
    run_attack_pipeline_with_split(cfg, None)
}

/// As [`run_attack_pipeline`] with a caller-supplied split in place of the
/// generated one.
pub fn run_attack_pipeline_with_split(cfg: &ExperimentConfig, split: Option<SplitPlan>) -> Result<AttackOutcome> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let mut rd = RunDir::open(Path::new(&cfg.out_dir))?;
    rd.write_config(cfg, &seeds)?;
    let root = rd.root.clone();
    let fam = match cfg.family {
        Family::Classifier => classifier_runs(cfg, &seeds, &mut rd, split)?,
        Family::Lm => lm_runs(cfg, &seeds, &mut rd, split)?,
        Family::Diffusion => diffusion_runs(cfg, &seeds, &mut rd, split)?,
    };
    let reports = stage(&root, "evaluate", || evaluate_grid(&fam.runs, &cfg.fpr_targets, seeds.eval))?;
    stage(&root, "write", || {
        write_reports(&rd.root, &fam.runs, &reports)?;
        Ok(())
    })?;
    for r in &fam.runs {
        rd.record(&format!("scores/{}.csv", r.stem()));
        rd.record(&format!("roc/{}.csv", r.stem()));
    }
    rd.record("report.json");
    rd.record("report.csv");
    let manifest = rd.finish("attack", cfg, &seeds)?;
    Ok(AttackOutcome {
        manifest,
        reports,
        runs: fam.runs,
        target: fam.target,
        pattern: fam.pattern,
    })
}

fn classifier_runs(cfg: &ExperimentConfig, seeds: &Seeds, rd: &mut RunDir, split: Option<SplitPlan>) -> Result<FamilyResult> {
    let root = rd.root.clone();
    let data_path = rd.artifact("data.csv");
    let data = stage(&root, "data", || {
        let per = cfg.n_total.div_ceil(cfg.n_classes);
        let d = gen_gaussian_mixture_in(cfg.n_classes, per, cfg.spread, cfg.dim, &mut Rng::new(seeds.data))?;
        d.save_csv(&data_path)?;
        Ok(d)
    })?;
    let plan = split_stage(cfg, seeds, rd, data.len(), split)?;
    let widths = cls_widths(cfg);
    let train = |name: &str, ids: &[usize], seed: u64, path: &Path| -> Result<(Frozen<MlpClassifier>, TrainReport)> {
        let mut m = MlpClassifier::new(&widths, activation(cfg), &mut Rng::new(seed))?;
        let rep = train_classifier(&mut m, &data, ids, &plan.test, &train_hyper(cfg, seed))?;
        log::info!("{name}: train loss {:.4}, test loss {:.4}, rho {:.3}", rep.train_loss, rep.test_loss, rep.rho);
        crate::models::save_checkpoint(path, &m.to_checkpoint(seed, Some(&rep))?)?;
        Ok((freeze(m), rep))
    };
    let members = concat(&plan.tar_train, &plan.shadow_train);
    let tpath = rd.artifact("target.ckpt");
    let (target, trep) = stage(&root, "train_target", || train("target", &members, seeds.target_train, &tpath))?;
    let reference = if cfg.use_reference {
        let rpath = rd.artifact("reference.ckpt");
        Some(stage(&root, "train_reference", || train("reference", &plan.ref_train, seeds.reference_train, &rpath))?.0)
    } else {
        None
    };
    let score_cfg = cls_score_config(cfg, seeds);
    let shadow = Shadow {
        members: labeled(&data, &plan.shadow_train)?,
        nonmembers: labeled(&data, &plan.shadow_held)?,
        fingerprint: plan.shadow_fingerprint(),
    };
    let loss_cfg = ClsLossConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        gamma_sep: cfg.gamma_sep,
    };
    let trained = stage(&root, "pattern", || {
        train_cls_pattern(&target, reference.as_ref(), &shadow, &loss_cfg, &score_cfg, cfg.delta_bound, &pattern_hyper(cfg, seeds))
    })?;
    stage(&root, "pattern", || save_pattern(rd, &trained))?;
    let pattern = trained.pattern;
    let zero = ReprogramPattern::zero(Family::Classifier, cfg.dim);
    let eval = plan.eval_population();
    let ids: Vec<usize> = eval.iter().map(|e| e.0).collect();
    let lab = labeled(&data, &ids)?;
    let delta = if pattern.is_zero() { None } else { pattern.delta() };
    let mut runs = Vec::new();
    stage(&root, "score", || {
        for dname in &cfg.defenses {
            let tgt: Box<dyn Classifier> = match Defense::parse(dname)? {
                Defense::None => Box::new(target.clone()),
                Defense::LogitsNoise(s) => Box::new(defense_logits_noise(target.clone(), s, seeds.noise_defense)?),
                Defense::InputSmoothing(s) => Box::new(defense_input_smoothing(target.clone(), s, seeds.noise_defense)?),
            };
            let refd = reference.as_ref().map(|r| r as &dyn Classifier);
            let scorer = Scorer::Classifier {
                target: &*tgt,
                reference: refd,
                cfg: &score_cfg,
            };
            for attack in &cfg.attacks {
                let scores = match attack.as_str() {
                    "reprogram" => infer_labeled(&pattern, &scorer, &lab)?,
                    "calibrated" => infer_labeled(&zero, &scorer, &lab)?,
                    "loss" => cls_scores_batch(&*tgt, refd, &lab.x, &lab.y, None, &score_cfg)?
                        .into_iter()
                        .map(|(s, _)| s)
                        .collect(),
                    "reprogram_mlp" => {
                        let feats = |l: &Labeled| -> Result<Vec<AttackFeature>> {
                            Ok(cls_scores_batch(&*tgt, refd, &l.x, &l.y, delta, &score_cfg)?
                                .into_iter()
                                .zip(&l.y)
                                .map(|((s, s_cal), &y)| AttackFeature { s, s_cal, y })
                                .collect())
                        };
                        let fm = feats(&shadow.members)?;
                        let fn_ = feats(&shadow.nonmembers)?;
                        let labels: Vec<bool> = fm.iter().map(|_| true).chain(fn_.iter().map(|_| false)).collect();
                        let all: Vec<AttackFeature> = fm.into_iter().chain(fn_).collect();
                        let hyper = AttackMlpHyper {
                            hidden: cfg.mlp_hidden,
                            epochs: cfg.mlp_epochs,
                            lr: cfg.mlp_lr,
                            seed: seeds.pattern,
                        };
                        let mlp = train_attack_mlp(&all, &labels, cfg.n_classes, &hyper)?;
                        mlp.predict(&feats(&lab)?)?
                    }
                    other => return Err(Error::Config(format!("unknown classifier attack {other:?}"))),
                };
                runs.push(AttackRun {
                    attack: attack.clone(),
                    defense: dname.clone(),
                    queries: queries(cfg, attack),
                    delta_id: if attack == "calibrated" || attack == "loss" { zero.id() } else { pattern.id() },
                    samples: scored(&eval, scores),
                });
            }
        }
        Ok(())
    })?;
    Ok(FamilyResult {
        runs,
        target: trep,
        pattern,
    })
}

pub(crate) fn lm_config(cfg: &ExperimentConfig) -> LmConfig {
    LmConfig {
        vocab_size: cfg.vocab_size,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        d_hidden: cfg.hidden,
        max_len: cfg.seq_len,
    }
}

fn par_scores<F>(ids: &[usize], f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    ids.par_iter().map(|&i| f(i)).collect()
}

fn lm_runs(cfg: &ExperimentConfig, seeds: &Seeds, rd: &mut RunDir, split: Option<SplitPlan>) -> Result<FamilyResult> {
    let root = rd.root.clone();
    let data_path = rd.artifact("data.csv");
    let data = stage(&root, "data", || {
        let d = gen_markov_sequences(cfg.vocab_size, cfg.n_total, cfg.seq_len, cfg.temperature, &mut Rng::new(seeds.data))?;
        d.save_csv(&data_path)?;
        Ok(d)
    })?;
    let plan = split_stage(cfg, seeds, rd, data.len(), split)?;
    let train = |name: &str, ids: &[usize], seed: u64, path: &Path| -> Result<(Frozen<TinyCausalLm>, TrainReport)> {
        let mut m = TinyCausalLm::new(lm_config(cfg), &mut Rng::new(seed))?;
        let rep = train_lm(&mut m, &data, ids, &plan.test, &train_hyper(cfg, seed))?;
        log::info!("{name}: train loss {:.4}, test loss {:.4}, rho {:.3}", rep.train_loss, rep.test_loss, rep.rho);
        crate::models::save_checkpoint(path, &m.to_checkpoint(seed, Some(&rep))?)?;
        Ok((freeze(m), rep))
    };
    let members = concat(&plan.tar_train, &plan.shadow_train);
    let tpath = rd.artifact("target.ckpt");
    let (target, trep) = stage(&root, "train_target", || train("target", &members, seeds.target_train, &tpath))?;
    let reference = if cfg.attacks.iter().any(|a| a == "reference") {
        let rpath = rd.artifact("reference.ckpt");
        Some(stage(&root, "train_reference", || train("reference", &plan.ref_train, seeds.reference_train, &rpath))?.0)
    } else {
        None
    };
    let score_cfg = LmScoreConfig {
        min_k_ratio: cfg.min_k_ratio,
    };
    let pick = |ids: &[usize]| ids.iter().map(|&i| data.sequences[i].clone()).collect::<Vec<_>>();
    let shadow = Shadow {
        members: pick(&plan.shadow_train),
        nonmembers: pick(&plan.shadow_held),
        fingerprint: plan.shadow_fingerprint(),
    };
    let mining = HardMiningConfig {
        k: cfg.mining_k,
        gamma: cfg.mining_gamma,
        transform: if cfg.log_scores { ScoreTransform::LogExp } else { ScoreTransform::Raw },
    };
    let trained = stage(&root, "pattern", || {
        train_soft_prompt(&target, &shadow, cfg.prompt_len, cfg.prompt_init_std, &mining, &score_cfg, &pattern_hyper(cfg, seeds))
    })?;
    stage(&root, "pattern", || save_pattern(rd, &trained))?;
    let pattern = trained.pattern;
    let zero = ReprogramPattern::zero(Family::Lm, cfg.d_model);
    let prompt = pattern.prompt().filter(|p| !p.is_empty());
    let eval = plan.eval_population();
    let ids: Vec<usize> = eval.iter().map(|e| e.0).collect();
    let mut runs = Vec::new();
    stage(&root, "score", || {
        for dname in &cfg.defenses {
            let tgt: Box<dyn LanguageModel> = match Defense::parse(dname)? {
                Defense::None => Box::new(target.clone()),
                Defense::LogitsNoise(s) => Box::new(defense_logits_noise(target.clone(), s, seeds.noise_defense)?),
                Defense::InputSmoothing(_) => {
                    return Err(Error::Config("input smoothing has no meaning for token inputs".into()))
                }
            };
            let tgt = &*tgt;
            for attack in &cfg.attacks {
                let seq = |i: usize| data.sequences[i].as_slice();
                let scores = match attack.as_str() {
                    "reprogram" => par_scores(&ids, |i| lm_score(tgt, seq(i), prompt, &score_cfg))?,
                    "mink_pp" => par_scores(&ids, |i| lm_score(tgt, seq(i), None, &score_cfg))?,
                    "loss" => par_scores(&ids, |i| lm_loss_score(tgt, seq(i)))?,
                    "mink" => par_scores(&ids, |i| lm_mink_score(tgt, seq(i), cfg.min_k_ratio))?,
                    "reference" => {
                        let r = reference.as_ref().ok_or_else(|| Error::InvalidArgument("reference model missing".into()))?;
                        par_scores(&ids, |i| lm_ref_score(tgt, r, seq(i)))?
                    }
                    other => return Err(Error::Config(format!("unknown lm attack {other:?}"))),
                };
                runs.push(AttackRun {
                    attack: attack.clone(),
                    defense: dname.clone(),
                    queries: queries(cfg, attack),
                    delta_id: if attack == "reprogram" { pattern.id() } else { zero.id() },
                    samples: scored(&eval, scores),
                });
            }
        }
        Ok(())
    })?;
    Ok(FamilyResult {
        runs,
        target: trep,
        pattern,
    })
}

fn diffusion_runs(cfg: &ExperimentConfig, seeds: &Seeds, rd: &mut RunDir, split: Option<SplitPlan>) -> Result<FamilyResult> {
    let root = rd.root.clone();
    let data_path = rd.artifact("data.csv");
    let data = stage(&root, "data", || {
        let d = gen_unit_box_mixture(cfg.n_total, cfg.dim, cfg.n_modes, cfg.spread, &mut Rng::new(seeds.data))?;
        d.save_csv(&data_path)?;
        Ok(d)
    })?;
    let plan = split_stage(cfg, seeds, rd, data.len(), split)?;
    let members = concat(&plan.tar_train, &plan.shadow_train);
    let tpath = rd.artifact("target.ckpt");
    let (target, trep) = stage(&root, "train_target", || {
        let seed = seeds.target_train;
        let dc = DiffusionConfig {
            dim: cfg.dim,
            hidden: cfg.hidden,
            t_max: cfg.t_max,
            beta_1: cfg.beta_1,
            beta_t: cfg.beta_t,
        };
        let mut m = EpsMlpDiffusion::new(dc, &mut Rng::new(seed))?;
        let rep = train_diffusion(&mut m, &data, &members, &plan.test, &train_hyper(cfg, seed))?;
        log::info!("target: train loss {:.4}, test loss {:.4}, rho {:.3}", rep.train_loss, rep.test_loss, rep.rho);
        crate::models::save_checkpoint(&tpath, &m.to_checkpoint(seed, Some(&rep))?)?;
        Ok((freeze(m), rep))
    })?;
    let score_cfg = diff_score_config(cfg);
    let shadow = Shadow {
        members: data.points.select_rows(&plan.shadow_train)?,
        nonmembers: data.points.select_rows(&plan.shadow_held)?,
        fingerprint: plan.shadow_fingerprint(),
    };
    let loss_cfg = DiffLossConfig {
        eta: cfg.eta,
        lambda: cfg.lambda,
        eps_guard: cfg.eps_guard,
    };
    let trained = stage(&root, "pattern", || {
        train_diffusion_pattern(&target, &shadow, &loss_cfg, &score_cfg, cfg.delta_bound, &pattern_hyper(cfg, seeds))
    })?;
    stage(&root, "pattern", || save_pattern(rd, &trained))?;
    let pattern = trained.pattern;
    let zero = ReprogramPattern::zero(Family::Diffusion, cfg.dim);
    let eval = plan.eval_population();
    let ids: Vec<usize> = eval.iter().map(|e| e.0).collect();
    let xs: Tensor = data.points.select_rows(&ids)?;
    let mut runs = Vec::new();
    stage(&root, "score", || {
        for dname in &cfg.defenses {
            let tgt: Box<dyn NoiseModel> = match Defense::parse(dname)? {
                Defense::None => Box::new(target.clone()),
                Defense::LogitsNoise(s) => Box::new(defense_logits_noise(target.clone(), s, seeds.noise_defense)?),
                Defense::InputSmoothing(s) => Box::new(defense_input_smoothing(target.clone(), s, seeds.noise_defense)?),
            };
            let tgt = &*tgt;
            for attack in &cfg.attacks {
                let with = |normalize_eps: bool| DiffScoreConfig {
                    normalize_eps,
                    ..score_cfg.clone()
                };
                let scores = match attack.as_str() {
                    "reprogram" => infer_points(&pattern, &Scorer::Diffusion { model: tgt, cfg: &score_cfg }, &xs)?,
                    "pia" => infer_points(&zero, &Scorer::Diffusion { model: tgt, cfg: &with(false) }, &xs)?,
                    "pian" => infer_points(&zero, &Scorer::Diffusion { model: tgt, cfg: &with(true) }, &xs)?,
                    "naive" => par_scores(&ids, |i| {
                        let seed = derive_seed_index(seeds.eval, i as u64);
                        diffusion_naive_score(tgt, data.point(i), cfg.t_probe, cfg.naive_mc, seed)
                    })?,
                    other => return Err(Error::Config(format!("unknown diffusion attack {other:?}"))),
                };
                runs.push(AttackRun {
                    attack: attack.clone(),
                    defense: dname.clone(),
                    queries: queries(cfg, attack),
                    delta_id: if attack == "reprogram" { pattern.id() } else { zero.id() },
                    samples: scored(&eval, scores),
                });
            }
        }
        Ok(())
    })?;
    Ok(FamilyResult {
        runs,
        target: trep,
        pattern,
    })
}

/// Recomputes every metric of a finished run from its `scores/` files and
/// rewrites `roc/`, `report.json` and `report.csv`.
pub fn rederive_report(run_dir: &Path) -> Result<Vec<AttackReport>> {
    let record: Value = read_json(&run_dir.join("config.json"))?;
    let cfg = ExperimentConfig::resolve(&record["config"])?;
    let seeds = cfg.seeds();
    let mut runs = Vec::new();
    for dname in &cfg.defenses {
        for attack in &cfg.attacks {
            let mut run = AttackRun {
                attack: attack.clone(),
                defense: dname.clone(),
                queries: queries(&cfg, attack),
                delta_id: String::new(),
                samples: Vec::new(),
            };
            let rows = read_scores_csv(&run_dir.join("scores").join(format!("{}.csv", run.stem())))?;
            run.delta_id = rows.first().map(|r| r.delta_id.clone()).unwrap_or_default();
            run.samples = rows
                .iter()
                .map(|r| ScoredSample {
                    id: r.sample_id,
                    score: r.score,
                    is_member: r.is_member,
                })
                .collect();
            runs.push(run);
        }
    }
    let reports = evaluate_grid(&runs, &cfg.fpr_targets, seeds.eval)?;
    write_reports(run_dir, &runs, &reports)?;
    Ok(reports)
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub attack: String,
    pub defense: String,
    pub auc: f64,
    pub balanced_acc: f64,
    pub advantage: f64,
    pub tpr_at_first_fpr: f64,
}

/// One sub-run per value of `param` under `<out_dir>/<param>=<value>/`,
/// aggregated into `sweep.csv`.
pub fn run_ablation(cfg: &ExperimentConfig, param: &str, values: &[String]) -> Result<(RunManifest, Vec<SweepRow>)> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let subs = values
        .iter()
        .map(|v| cfg.with_value(param, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    let seeds = cfg.seeds();
    let mut rd = RunDir::open(Path::new(&cfg.out_dir))?;
    rd.write_config(cfg, &seeds)?;
    let mut rows = Vec::new();
    for (v, mut sub) in subs {
        let name = format!("{param}={v}");
        sub.out_dir = rd.root.join(&name).to_string_lossy().into_owned();
        let out = run_attack_pipeline(&sub)?;
        rd.record(&format!("{name}/manifest.json"));
        for r in &out.reports {
            rows.push(SweepRow {
                value: v.clone(),
                attack: r.attack_name.clone(),
                defense: r.defense_name.clone(),
                auc: r.auc,
                balanced_acc: r.balanced_acc,
                advantage: r.advantage,
                tpr_at_first_fpr: r.tpr_at.first().map_or(f64::NAN, |t| t.tpr),
            });
        }
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                param.to_string(),
                r.value.clone(),
                r.attack.clone(),
                r.defense.clone(),
                fmt_f64(r.auc),
                fmt_f64(r.balanced_acc),
                fmt_f64(r.advantage),
                fmt_f64(r.tpr_at_first_fpr),
            ]
        })
        .collect();
    let first = cfg.fpr_targets.first().map_or("tpr".into(), |f| format!("tpr_at_{f}"));
    write_csv(
        &rd.artifact("sweep.csv"),
        &["param", "value", "attack", "defense", "auc", "balanced_acc", "advantage", &first],
        &body,
    )?;
    let manifest = rd.finish("ablation", cfg, &seeds)?;
    Ok((manifest, rows))
}

pub(crate) fn config_record(cfg: &ExperimentConfig, seeds: &Seeds) -> Result<Value> {
    Ok(json!({
        "config": cfg.identity_value()?,
        "config_hash": cfg.hash()?,
        "seeds": seeds,
    }))
}
