//! Learning the reprogramming pattern against a frozen model.
//!
//! A pattern is trained on the shadow split only: shadow members are samples
//! the target was trained on, shadow non-members are held out from it. The
//! pattern is then applied unchanged to every scored sample.

use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, write_csv};
use crate::models::{Checkpoint, Classifier, Frozen, LanguageModel, NoiseModel, Parametrized};
use crate::rng::Rng;
use crate::scoring::{
    cls_score_vars, cls_scores_batch, diffusion_error_var, diffusion_errors, lm_score, lm_score_var, shift_inputs,
    ClsScoreConfig, DiffScoreConfig, LmScoreConfig,
};
use crate::tensor::{Adam, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Classifier,
    Lm,
    Diffusion,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Classifier => "classifier",
            Family::Lm => "lm",
            Family::Diffusion => "diffusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PatternKind {
    /// `[L, d]` rows prepended to the token embeddings.
    SoftPrompt(Tensor),
    /// Global input shift with `|delta_i| <= bound`.
    Additive { delta: Vec<f64>, bound: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReprogramPattern {
    pub family: Family,
    pub kind: PatternKind,
    /// Fingerprint of the shadow split the pattern was fitted on.
    pub trained_on: String,
    pub seed: u64,
}

impl ReprogramPattern {
    /// The identity pattern: an empty prompt for language models, `delta = 0`
    /// otherwise. Scoring with it reproduces the corresponding baseline.
    pub fn zero(family: Family, dim: usize) -> Self {
        let kind = match family {
            Family::Lm => PatternKind::SoftPrompt(Tensor::zeros(&[0, dim])),
            _ => PatternKind::Additive {
                delta: vec![0.0; dim],
                bound: 0.0,
            },
        };
        Self {
            family,
            kind,
            trained_on: "none".into(),
            seed: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.kind {
            PatternKind::SoftPrompt(p) => p.is_empty(),
            PatternKind::Additive { delta, .. } => delta.iter().all(|v| *v == 0.0),
        }
    }

    pub fn delta(&self) -> Option<&[f64]> {
        match &self.kind {
            PatternKind::Additive { delta, .. } => Some(delta),
            PatternKind::SoftPrompt(_) => None,
        }
    }

    pub fn prompt(&self) -> Option<&Tensor> {
        match &self.kind {
            PatternKind::SoftPrompt(p) => Some(p),
            PatternKind::Additive { .. } => None,
        }
    }

    /// Short content hash used as `delta_id` in score exports.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        if self.is_zero() {
            return "zero".into();
        }
        let mut h = Sha256::new();
        h.update(self.family.name().as_bytes());
        let data: &[f64] = match &self.kind {
            PatternKind::SoftPrompt(p) => p.data(),
            PatternKind::Additive { delta, .. } => delta,
        };
        for v in data {
            h.update(v.to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (tensor, bound, shape_kind) = match &self.kind {
            PatternKind::SoftPrompt(p) => (p.clone(), None, "soft_prompt"),
            PatternKind::Additive { delta, bound } => (Tensor::vector(delta.clone()), Some(*bound), "additive"),
        };
        let arch = json!({
            "family": self.family,
            "pattern": shape_kind,
            "bound": bound,
            "trained_on": self.trained_on,
        });
        Checkpoint::new("pattern", arch, self.seed, vec!["pattern".into()], vec![tensor])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "pattern" || ck.tensors.len() != 1 {
            return Err(Error::Format(format!("expected a pattern checkpoint, found {}", ck.header.kind)));
        }
        let a = &ck.header.arch;
        let family: Family = serde_json::from_value(a["family"].clone())?;
        let trained_on = a["trained_on"].as_str().unwrap_or_default().to_string();
        let t = ck.tensors[0].clone();
        let kind = match a["pattern"].as_str() {
            Some("soft_prompt") => {
                t.dims2("pattern")?;
                PatternKind::SoftPrompt(t)
            }
            Some("additive") => PatternKind::Additive {
                bound: a["bound"]
                    .as_f64()
                    .ok_or_else(|| Error::Format("additive pattern without bound".into()))?,
                delta: t.into_data(),
            },
            other => return Err(Error::Format(format!("unknown pattern kind {other:?}"))),
        };
        Ok(Self {
            family,
            kind,
            trained_on,
            seed: ck.header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, &self.to_checkpoint().to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::from_bytes(&crate::io::read_bytes(path)?)?)
    }
}

/// Optimiser settings for pattern training (Adam).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternHyper {
    pub steps: usize,
    pub lr: f64,
    /// Samples per side per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Allowed rise of the loss across a 50-step window before a warning.
    pub descent_tol: f64,
}

impl PatternHyper {
    /// Defaults for additive patterns.
    pub fn additive(seed: u64) -> Self {
        Self {
            steps: 300,
            lr: 1e-2,
            batch_size: 16,
            seed,
            descent_tol: 0.05,
        }
    }

    /// Defaults for soft prompts.
    pub fn soft_prompt(seed: u64) -> Self {
        Self {
            lr: 1e-3,
            ..Self::additive(seed)
        }
    }
}

/// How member/non-member score differences enter the ranking loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTransform {
    /// `softplus(S(z) - S(x) + gamma)`.
    #[default]
    Raw,
    /// Applies `log` to `exp(S)` before differencing. Identical to `Raw` up
    /// to rounding; kept so the alternative reading is runnable.
    LogExp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardMiningConfig {
    /// Fraction of each side kept as hard examples, in `(0, 1]`.
    pub k: f64,
    pub gamma: f64,
    #[serde(default)]
    pub transform: ScoreTransform,
}

impl Default for HardMiningConfig {
    fn default() -> Self {
        Self {
            k: 0.25,
            gamma: 1.0,
            transform: ScoreTransform::Raw,
        }
    }
}

impl HardMiningConfig {
    fn validate(&self, batch: usize) -> Result<usize> {
        if !(self.k > 0.0 && self.k <= 1.0) || !(self.gamma >= 0.0) {
            return Err(invalid(format!("hard mining needs k in (0, 1] and gamma >= 0, got k={} gamma={}", self.k, self.gamma)));
        }
        let n = (self.k * batch as f64 + 1e-9).floor() as usize;
        if n == 0 {
            return Err(invalid(format!(
                "hard mining: batch of {batch} is too small for k = {} (need at least {})",
                self.k,
                (1.0 / self.k).ceil()
            )));
        }
        Ok(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffLossConfig {
    pub eta: f64,
    pub lambda: f64,
    /// Added to `E` before the log; 0 disables the guard.
    pub eps_guard: f64,
}

impl Default for DiffLossConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            lambda: 1e-3,
            eps_guard: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_sep: f64,
}

impl Default for ClsLossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-3,
            gamma_sep: 1.0,
        }
    }
}

/// Per-step training trace. Column 0 is the total loss; the rest are named
/// in `columns`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl TrainCurve {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Flags 50-step windows over which the loss rose by more than `tol`.
    fn check_descent(&mut self, tol: f64) {
        const WINDOW: usize = 50;
        let l = self.losses();
        let mut i = 0;
        while i + WINDOW < l.len() {
            if l[i + WINDOW] > l[i] + tol * l[i].abs().max(1.0) {
                let msg = format!("loss rose from {} at step {i} to {} at step {}", l[i], l[i + WINDOW], i + WINDOW);
                log::warn!("{msg}");
                self.warnings.push(msg);
            }
            i += WINDOW;
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["step"];
        header.extend(self.columns.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| std::iter::once(i.to_string()).chain(r.iter().map(|v| fmt_f64(*v))).collect())
            .collect();
        write_csv(path, &header, &rows)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedPattern {
    pub pattern: ReprogramPattern,
    pub curve: TrainCurve,
}

/// Shadow data for pattern training.
#[derive(Clone, Debug)]
pub struct Shadow<T> {
    pub members: T,
    pub nonmembers: T,
    pub fingerprint: String,
}

/// Points with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub x: Tensor,
    pub y: Vec<usize>,
}

fn check_frozen(before: &[Vec<u64>], after: &[Vec<u64>]) -> Result<()> {
    if before != after {
        return Err(Error::Frozen);
    }
    Ok(())
}

fn batch_ids(rng: &mut Rng, n: usize, b: usize) -> Vec<usize> {
    rng.sample_indices(n, b)
}

fn finite_step(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteStep { step })
    }
}

fn on_step<T>(r: Result<T>, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteStep { step },
        e => e,
    })
}

fn stack_scalars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let parts = xs.iter().map(|v| g.reshape(*v, &[1])).collect::<Result<Vec<_>>>()?;
    g.concat(&parts, 0)
}

/// Mean over the cartesian pairs of `softplus(S(z) - S(x) + gamma)` after
/// keeping the lowest-scoring members and the highest-scoring non-members.
pub(crate) fn hard_mined_loss(g: &mut Graph, members: &[Var], nonmembers: &[Var], cfg: &HardMiningConfig) -> Result<Var> {
    let nm = cfg.validate(members.len())?;
    let nn = cfg.validate(nonmembers.len())?;
    let mut m: Vec<Var> = members.to_vec();
    m.sort_by(|a, b| g.item(*a).total_cmp(&g.item(*b)));
    let mut n: Vec<Var> = nonmembers.to_vec();
    n.sort_by(|a, b| g.item(*b).total_cmp(&g.item(*a)));
    let tf = |g: &mut Graph, v: Var| -> Result<Var> {
        match cfg.transform {
            ScoreTransform::Raw => Ok(v),
            ScoreTransform::LogExp => {
                let e = g.exp(v)?;
                g.log(e)
            }
        }
    };
    let hm = m[..nm].iter().map(|v| tf(g, *v)).collect::<Result<Vec<_>>>()?;
    let hn = n[..nn].iter().map(|v| tf(g, *v)).collect::<Result<Vec<_>>>()?;
    let mut diffs = Vec::with_capacity(nm * nn);
    for &x in &hm {
        for &z in &hn {
            diffs.push(g.sub(z, x)?);
        }
    }
    let d = stack_scalars(g, &diffs)?;
    let d = g.shift(d, cfg.gamma)?;
    let sp = g.softplus(d)?;
    g.mean(sp)
}

fn mean_of(g: &Graph, vs: &[Var]) -> f64 {
    vs.iter().map(|v| g.item(*v)).sum::<f64>() / vs.len() as f64
}

/// Learns an `[L, d]` soft prompt that pushes member Min-K%++ scores above
/// non-member scores.
pub fn train_soft_prompt<M: LanguageModel + Parametrized>(
    model: &Frozen<M>,
    shadow: &Shadow<Vec<Vec<usize>>>,
    prompt_len: usize,
    init_std: f64,
    mining: &HardMiningConfig,
    score: &LmScoreConfig,
    hyper: &PatternHyper,
) -> Result<TrainedPattern> {
    if prompt_len == 0 {
        return Err(invalid("soft prompt length must be at least 1"));
    }
    if shadow.members.is_empty() || shadow.nonmembers.is_empty() {
        return Err(invalid("soft prompt: empty shadow set"));
    }
    let b = hyper.batch_size.min(shadow.members.len()).min(shadow.nonmembers.len());
    mining.validate(b)?;
    let before = model.snapshot();
    let mut rng = Rng::new(hyper.seed);
    let mut prompt = Tensor::randn(&[prompt_len, model.embed_dim()], init_std, &mut rng.split("init"));
    let mut opt = Adam::new(hyper.lr);
    let mut curve = TrainCurve::new(&["loss", "batch_gap"]);
    for step in 0..hyper.steps {
        let mi = batch_ids(&mut rng, shadow.members.len(), b);
        let ni = batch_ids(&mut rng, shadow.nonmembers.len(), b);
        let mut g = Graph::new();
        let p = model.bind(&mut g)?;
        let pv = g.param(prompt.clone())?;
        let sm = on_step(
            mi.iter()
                .map(|&i| lm_score_var(&mut g, &**model, &p, &shadow.members[i], Some(pv), score))
                .collect::<Result<Vec<_>>>(),
            step,
        )?;
        let sn = on_step(
            ni.iter()
                .map(|&i| lm_score_var(&mut g, &**model, &p, &shadow.nonmembers[i], Some(pv), score))
                .collect::<Result<Vec<_>>>(),
            step,
        )?;
        let loss = on_step(hard_mined_loss(&mut g, &sm, &sn, mining), step)?;
        finite_step(g.item(loss), step)?;
        curve.rows.push(vec![g.item(loss), mean_of(&g, &sm) - mean_of(&g, &sn)]);
        let grads = g.backward(loss)?;
        opt.step(&mut [&mut prompt], &[grads.get(pv).unwrap()])?;
        if !prompt.is_finite() {
            return Err(Error::NonFiniteStep { step });
        }
    }
    check_frozen(&before, &model.snapshot())?;
    curve.check_descent(hyper.descent_tol);
    Ok(TrainedPattern {
        pattern: ReprogramPattern {
            family: Family::Lm,
            kind: PatternKind::SoftPrompt(prompt),
            trained_on: shadow.fingerprint.clone(),
            seed: hyper.seed,
        },
        curve,
    })
}

fn project(delta: &mut Tensor, bound: f64) {
    for v in delta.data_mut() {
        *v = v.clamp(-bound, bound);
    }
}

fn check_bound(bound: f64) -> Result<()> {
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(invalid(format!("pattern bound must be finite and >= 0, got {bound}")));
    }
    Ok(())
}

/// Learns an additive `delta` with `|delta|_inf <= bound` that lowers the
/// trajectory discrepancy of members relative to paired non-members.
pub fn train_diffusion_pattern<M: NoiseModel + Parametrized>(
    model: &Frozen<M>,
    shadow: &Shadow<Tensor>,
    cfg: &DiffLossConfig,
    score: &DiffScoreConfig,
    bound: f64,
    hyper: &PatternHyper,
) -> Result<TrainedPattern> {
    check_bound(bound)?;
    if !(cfg.lambda >= 0.0) || !(cfg.eps_guard >= 0.0) {
        return Err(invalid("diffusion loss needs lambda >= 0 and eps_guard >= 0"));
    }
    let (nm, d) = shadow.members.dims2("train_diffusion_pattern")?;
    let (nn, dn) = shadow.nonmembers.dims2("train_diffusion_pattern")?;
    if d != dn || d != model.input_dim() || nm == 0 || nn == 0 {
        return Err(invalid("diffusion pattern: shadow sets do not match the model"));
    }
    let b = hyper.batch_size.min(nm).min(nn).max(1);
    let before = model.snapshot();
    let mut rng = Rng::new(hyper.seed);
    let mut delta = Tensor::zeros(&[d]);
    let mut opt = Adam::new(hyper.lr);
    let mut curve = TrainCurve::new(&["loss", "pair", "reg", "batch_gap"]);
    for step in 0..hyper.steps {
        let mi = batch_ids(&mut rng, nm, b);
        let ni = batch_ids(&mut rng, nn, b);
        let mut g = Graph::new();
        let p = model.bind(&mut g)?;
        let dv = g.param(delta.clone())?;
        let xm = g.constant(shadow.members.select_rows(&mi)?)?;
        let xn = g.constant(shadow.nonmembers.select_rows(&ni)?)?;
        let em = on_step(diffusion_error_var(&mut g, &**model, &p, xm, Some(dv), score), step)?;
        let en = on_step(diffusion_error_var(&mut g, &**model, &p, xn, Some(dv), score), step)?;
        if cfg.eps_guard == 0.0 && (g.value(em).data().contains(&0.0) || g.value(en).data().contains(&0.0)) {
            return Err(invalid(format!("step {step}: trajectory discrepancy is exactly 0 and the log guard is off")));
        }
        let gap = -(g.value(em).data().iter().sum::<f64>() - g.value(en).data().iter().sum::<f64>()) / b as f64;
        let (loss, pair, reg) = on_step(
            (|| {
                let lm = g.shift(em, cfg.eps_guard)?;
                let lm = g.log(lm)?;
                let ln = g.shift(en, cfg.eps_guard)?;
                let ln = g.log(ln)?;
                let diff = g.sub(lm, ln)?;
                let diff = g.shift(diff, cfg.eta)?;
                let sp = g.softplus(diff)?;
                let pair = g.mean(sp)?;
                let norm = g.l2_norm(dv)?;
                let reg = g.scale(norm, cfg.lambda)?;
                Ok((g.add(pair, reg)?, pair, reg))
            })(),
            step,
        )?;
        finite_step(g.item(loss), step)?;
        curve.rows.push(vec![g.item(loss), g.item(pair), g.item(reg), gap]);
        let grads = g.backward(loss)?;
        opt.step(&mut [&mut delta], &[grads.get(dv).unwrap()])?;
        project(&mut delta, bound);
        debug_assert!(delta.data().iter().all(|v| v.abs() <= bound));
        if !delta.is_finite() {
            return Err(Error::NonFiniteStep { step });
        }
    }
    check_frozen(&before, &model.snapshot())?;
    curve.check_descent(hyper.descent_tol);
    Ok(TrainedPattern {
        pattern: ReprogramPattern {
            family: Family::Diffusion,
            kind: PatternKind::Additive {
                delta: delta.into_data(),
                bound,
            },
            trained_on: shadow.fingerprint.clone(),
            seed: hyper.seed,
        },
        curve,
    })
}

/// Learns an additive `delta` that keeps members correctly classified while
/// separating the batch-mean calibrated scores of members and non-members.
pub fn train_cls_pattern<M: Classifier + Parametrized, R: Classifier + Parametrized>(
    target: &Frozen<M>,
    reference: Option<&Frozen<R>>,
    shadow: &Shadow<Labeled>,
    cfg: &ClsLossConfig,
    score: &ClsScoreConfig,
    bound: f64,
    hyper: &PatternHyper,
) -> Result<TrainedPattern> {
    check_bound(bound)?;
    if !(cfg.alpha >= 0.0) || !(cfg.beta >= 0.0) {
        return Err(invalid("classifier loss needs alpha >= 0 and beta >= 0"));
    }
    let (nm, d) = shadow.members.x.dims2("train_cls_pattern")?;
    let (nn, _) = shadow.nonmembers.x.dims2("train_cls_pattern")?;
    if d != target.input_dim() || nm == 0 || nn == 0 {
        return Err(invalid("classifier pattern: shadow sets do not match the model"));
    }
    let b = hyper.batch_size.min(nm).min(nn).max(1);
    let before = (target.snapshot(), reference.map(|r| r.snapshot()));
    let mut rng = Rng::new(hyper.seed);
    let mut delta = Tensor::zeros(&[d]);
    let mut opt = Adam::new(hyper.lr);
    let mut curve = TrainCurve::new(&["loss", "preserve", "sep", "reg", "batch_gap"]);
    let unit = target.unit_box_inputs();
    for step in 0..hyper.steps {
        let mi = batch_ids(&mut rng, nm, b);
        let ni = batch_ids(&mut rng, nn, b);
        let ym: Vec<usize> = mi.iter().map(|&i| shadow.members.y[i]).collect();
        let yn: Vec<usize> = ni.iter().map(|&i| shadow.nonmembers.y[i]).collect();
        let mut g = Graph::new();
        let tp = target.bind(&mut g)?;
        let rp = reference.map(|r| r.bind(&mut g)).transpose()?;
        let dv = g.param(delta.clone())?;
        let xm = g.constant(shadow.members.x.select_rows(&mi)?)?;
        let xn = g.constant(shadow.nonmembers.x.select_rows(&ni)?)?;
        let parts = (|| {
            let xm = shift_inputs(&mut g, xm, Some(dv), unit)?;
            let xn = shift_inputs(&mut g, xn, Some(dv), unit)?;
            let refr = reference.map(|r| &**r as &dyn Classifier).zip(rp.as_deref());
            let (sm, scm) = cls_score_vars(&mut g, (&**target, &tp), refr, xm, &ym, score)?;
            let (_, scn) = cls_score_vars(&mut g, (&**target, &tp), refr, xn, &yn, score)?;
            let preserve = g.mean(sm)?;
            let preserve = g.neg(preserve)?;
            let bm = g.mean(scm)?;
            let bn = g.mean(scn)?;
            let gap = g.sub(bm, bn)?;
            let margin = g.neg(gap)?;
            let margin = g.shift(margin, cfg.gamma_sep)?;
            let sep = g.softplus(margin)?;
            let sq = g.square(dv)?;
            let reg = g.sum(sq)?;
            let a = g.scale(sep, cfg.alpha)?;
            let r = g.scale(reg, cfg.beta)?;
            let loss = g.add(preserve, a)?;
            let loss = g.add(loss, r)?;
            Ok((loss, preserve, sep, reg, gap))
        })();
        let (loss, preserve, sep, reg, gap) = on_step(parts, step)?;
        finite_step(g.item(loss), step)?;
        curve
            .rows
            .push(vec![g.item(loss), g.item(preserve), g.item(sep), g.item(reg), g.item(gap)]);
        let grads = g.backward(loss)?;
        opt.step(&mut [&mut delta], &[grads.get(dv).unwrap()])?;
        project(&mut delta, bound);
        if !delta.is_finite() {
            return Err(Error::NonFiniteStep { step });
        }
    }
    check_frozen(&before.0, &target.snapshot())?;
    if let (Some(b), Some(r)) = (&before.1, reference) {
        check_frozen(b, &r.snapshot())?;
    }
    curve.check_descent(hyper.descent_tol);
    Ok(TrainedPattern {
        pattern: ReprogramPattern {
            family: Family::Classifier,
            kind: PatternKind::Additive {
                delta: delta.into_data(),
                bound,
            },
            trained_on: shadow.fingerprint.clone(),
            seed: hyper.seed,
        },
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMlpHyper {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AttackMlpHyper {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// One-hidden-layer network on `(s, s_cal, onehot(y))` with a sigmoid
/// output. The two score features are standardised with shadow statistics.
#[derive(Clone, Debug)]
pub struct AttackMlp {
    n_classes: usize,
    center: [f64; 2],
    scale: [f64; 2],
    params: Vec<Tensor>,
}

/// Attack features of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackFeature {
    pub s: f64,
    pub s_cal: f64,
    pub y: usize,
}

impl AttackMlp {
    fn design(&self, feats: &[AttackFeature]) -> Result<Tensor> {
        let w = 2 + self.n_classes;
        let mut data = Vec::with_capacity(feats.len() * w);
        for f in feats {
            if f.y >= self.n_classes {
                return Err(invalid(format!("attack mlp: class {} outside [0, {})", f.y, self.n_classes)));
            }
            data.push((f.s - self.center[0]) / self.scale[0]);
            data.push((f.s_cal - self.center[1]) / self.scale[1]);
            data.extend((0..self.n_classes).map(|k| if k == f.y { 1.0 } else { 0.0 }));
        }
        Tensor::new(&[feats.len(), w], data)
    }

    fn logit_var(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let h = g.matmul(x, p[0])?;
        let b1 = g.tile_rows(p[1], n)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h)?;
        let o = g.matmul(h, p[2])?;
        let b2 = g.tile_rows(p[3], n)?;
        g.add(o, b2)
    }

    /// Membership probabilities in `(0, 1)`.
    pub fn predict(&self, feats: &[AttackFeature]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let x = g.constant(self.design(feats)?)?;
        let z = self.logit_var(&mut g, &p, x)?;
        let pr = g.sigmoid(z)?;
        Ok(g.value(pr).data().to_vec())
    }
}

fn moments(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, if var > 1e-24 { var.sqrt() } else { 1.0 })
}

/// Fits the attack network by full-batch Adam on binary cross-entropy.
pub fn train_attack_mlp(
    feats: &[AttackFeature],
    is_member: &[bool],
    n_classes: usize,
    hyper: &AttackMlpHyper,
) -> Result<AttackMlp> {
    if feats.len() != is_member.len() || feats.is_empty() {
        return Err(invalid("attack mlp: features and labels must be nonempty and aligned"));
    }
    if is_member.iter().all(|&m| m) || is_member.iter().all(|&m| !m) {
        return Err(invalid("attack mlp: shadow labels contain a single class"));
    }
    if hyper.hidden == 0 || n_classes == 0 {
        return Err(invalid("attack mlp: hidden width and class count must be positive"));
    }
    let (c0, s0) = moments(feats.iter().map(|f| f.s));
    let (c1, s1) = moments(feats.iter().map(|f| f.s_cal));
    let w = 2 + n_classes;
    let mut rng = Rng::new(hyper.seed);
    let mut net = AttackMlp {
        n_classes,
        center: [c0, c1],
        scale: [s0, s1],
        params: vec![
            Tensor::randn(&[w, hyper.hidden], (1.0 / w as f64).sqrt(), &mut rng),
            Tensor::zeros(&[hyper.hidden]),
            Tensor::randn(&[hyper.hidden, 1], (1.0 / hyper.hidden as f64).sqrt(), &mut rng),
            Tensor::zeros(&[1]),
        ],
    };
    let x = net.design(feats)?;
    let y = Tensor::new(&[feats.len(), 1], is_member.iter().map(|&m| f64::from(u8::from(m))).collect())?;
    let mut opt = Adam::new(hyper.lr);
    for epoch in 0..hyper.epochs {
        let mut g = Graph::new();
        let p = net.params.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let xv = g.constant(x.clone())?;
        let yv = g.constant(y.clone())?;
        let z = net.logit_var(&mut g, &p, xv)?;
        // softplus(z) - y z
        let sp = g.softplus(z)?;
        let yz = g.mul(yv, z)?;
        let l = g.sub(sp, yz)?;
        let loss = g.mean(l)?;
        crate::models::check_loss(g.item(loss), epoch)?;
        let grads = g.backward(loss)?;
        let gs: Vec<Tensor> = p.iter().map(|v| grads.get(*v).unwrap()).collect();
        let mut refs: Vec<&mut Tensor> = net.params.iter_mut().collect();
        opt.step(&mut refs, &gs)?;
    }
    Ok(net)
}

/// The frozen model(s) and scoring settings of one family.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    Classifier {
        target: &'a dyn Classifier,
        reference: Option<&'a dyn Classifier>,
        cfg: &'a ClsScoreConfig,
    },
    Lm {
        model: &'a dyn LanguageModel,
        cfg: &'a LmScoreConfig,
    },
    Diffusion {
        model: &'a dyn NoiseModel,
        cfg: &'a DiffScoreConfig,
    },
}

impl Scorer<'_> {
    pub fn family(&self) -> Family {
        match self {
            Scorer::Classifier { .. } => Family::Classifier,
            Scorer::Lm { .. } => Family::Lm,
            Scorer::Diffusion { .. } => Family::Diffusion,
        }
    }
}

/// One sample in the form its family expects.
#[derive(Clone, Copy, Debug)]
pub enum Sample<'a> {
    Labeled { x: &'a [f64], y: usize },
    Tokens(&'a [usize]),
    Point(&'a [f64]),
}

fn mismatch(pattern: &ReprogramPattern, scorer: &Scorer) -> Error {
    Error::KindMismatch {
        pattern: pattern.family.name().into(),
        model: scorer.family().name().into(),
    }
}

/// Membership score of one sample under `pattern` (higher = more
/// member-like): calibrated score for classifiers, Min-K%++ with the prompt
/// for language models, `-E` for diffusion models.
pub fn infer(pattern: &ReprogramPattern, scorer: &Scorer, sample: Sample) -> Result<f64> {
    match (scorer, sample) {
        (Scorer::Classifier { .. }, Sample::Labeled { x, y }) => {
            let xs = Tensor::new(&[1, x.len()], x.to_vec())?;
            Ok(infer_labeled(pattern, scorer, &Labeled { x: xs, y: vec![y] })?[0])
        }
        (Scorer::Lm { model, cfg }, Sample::Tokens(t)) => {
            let prompt = pattern.prompt().filter(|_| pattern.family == Family::Lm);
            let prompt = prompt.ok_or_else(|| mismatch(pattern, scorer))?;
            let prompt = if prompt.is_empty() { None } else { Some(prompt) };
            lm_score(*model, t, prompt, cfg)
        }
        (Scorer::Diffusion { .. }, Sample::Point(x)) => {
            let xs = Tensor::new(&[1, x.len()], x.to_vec())?;
            Ok(infer_points(pattern, scorer, &xs)?[0])
        }
        _ => Err(invalid(format!("sample form does not match the {} family", scorer.family().name()))),
    }
}

fn additive_for<'p>(pattern: &'p ReprogramPattern, scorer: &Scorer) -> Result<Option<&'p [f64]>> {
    if pattern.family != scorer.family() {
        return Err(mismatch(pattern, scorer));
    }
    let d = pattern.delta().ok_or_else(|| mismatch(pattern, scorer))?;
    Ok(if pattern.is_zero() { None } else { Some(d) })
}

/// Batched classifier scores (`s_cal` under the pattern).
pub fn infer_labeled(pattern: &ReprogramPattern, scorer: &Scorer, data: &Labeled) -> Result<Vec<f64>> {
    let Scorer::Classifier { target, reference, cfg } = scorer else {
        return Err(mismatch(pattern, scorer));
    };
    let d = additive_for(pattern, scorer)?;
    Ok(cls_scores_batch(*target, *reference, &data.x, &data.y, d, cfg)?
        .into_iter()
        .map(|(_, sc)| sc)
        .collect())
}

/// Batched diffusion scores `-E` under the pattern.
pub fn infer_points(pattern: &ReprogramPattern, scorer: &Scorer, xs: &Tensor) -> Result<Vec<f64>> {
    let Scorer::Diffusion { model, cfg } = scorer else {
        return Err(mismatch(pattern, scorer));
    };
    let d = additive_for(pattern, scorer)?;
    Ok(diffusion_errors(*model, xs, d, cfg)?.into_iter().map(|e| -e).collect())
}
