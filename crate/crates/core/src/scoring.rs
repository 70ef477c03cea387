//! Membership scores. Every score is oriented so that higher means more
//! member-like.
//!
//! Each family has an on-tape form (used when a pattern is being optimised)
//! and an off-tape wrapper built on it, so a score with a zero pattern goes
//! through exactly the arithmetic of the corresponding baseline.

use crate::error::{invalid, Error, Result};
use crate::io::{fmt_f64, write_csv};
use crate::models::{one_step_var, token_stat_vars, Classifier, LanguageModel, NoiseModel};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Min-K% z-score aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmScoreConfig {
    /// Fraction `K` of lowest-z positions averaged, in `(0, 1]`.
    pub min_k_ratio: f64,
}

impl Default for LmScoreConfig {
    fn default() -> Self {
        Self { min_k_ratio: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffScoreConfig {
    pub t_probe: usize,
    /// Order of the norm taken over the noise discrepancy.
    pub p_norm: f64,
    /// Rescale the `t = 0` noise estimate to the expected L1 mass of a
    /// standard normal vector.
    pub normalize_eps: bool,
}

impl Default for DiffScoreConfig {
    fn default() -> Self {
        Self {
            t_probe: 15,
            p_norm: 2.0,
            normalize_eps: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NiMode {
    /// `NI = 1`: pure reference calibration.
    ConstantOne,
    /// `NI` = mean target probability of the label over `n_neighbors` fixed
    /// Gaussian offsets of standard deviation `radius`.
    NeighborMean { radius: f64, n_neighbors: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsScoreConfig {
    pub use_reference: bool,
    pub ni_mode: NiMode,
}

impl Default for ClsScoreConfig {
    fn default() -> Self {
        Self {
            use_reference: true,
            ni_mode: NiMode::ConstantOne,
        }
    }
}

fn check_ratio(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(invalid(format!("min-k ratio must lie in (0, 1], got {k}")));
    }
    Ok(())
}

/// Indices of the `floor(k n)` smallest values, returned in ascending index
/// order. Ties are broken by position.
pub fn min_k_indices(values: &[f64], k: f64) -> Result<Vec<usize>> {
    check_ratio(k)?;
    let count = (k * values.len() as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Err(invalid(format!(
            "min-k selection is empty: {} positions at ratio {k}",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut idx = order[..count].to_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of the `floor(k n)` smallest values.
pub fn min_k_mean(values: &[f64], k: f64) -> Result<f64> {
    let idx = min_k_indices(values, k)?;
    let picked: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
    Ok(mean(&picked))
}

/// Per-position z-scores `(log p - mu) / sigma` on the tape, `[n - 1]`.
pub(crate) fn lm_z_var(
    g: &mut Graph,
    model: &dyn LanguageModel,
    params: &[Var],
    tokens: &[usize],
    prompt: Option<Var>,
) -> Result<Var> {
    let (lp, mu, sd) = token_stat_vars(g, model, params, tokens, prompt)?;
    let c = g.sub(lp, mu)?;
    g.div(c, sd)
}

/// Min-K% z-score aggregate on the tape (scalar).
pub(crate) fn lm_score_var(
    g: &mut Graph,
    model: &dyn LanguageModel,
    params: &[Var],
    tokens: &[usize],
    prompt: Option<Var>,
    cfg: &LmScoreConfig,
) -> Result<Var> {
    check_ratio(cfg.min_k_ratio)?;
    let z = lm_z_var(g, model, params, tokens, prompt)?;
    let idx = min_k_indices(g.value(z).data(), cfg.min_k_ratio)?;
    let picked = g.gather(z, &idx)?;
    g.mean(picked)
}

/// Mean z-score of the lowest-K% positions. Without a prompt this is the
/// Min-K%++ baseline.
pub fn lm_score(
    model: &dyn LanguageModel,
    tokens: &[usize],
    prompt: Option<&Tensor>,
    cfg: &LmScoreConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let pv = prompt.map(|t| g.constant(t.clone())).transpose()?;
    let s = lm_score_var(&mut g, model, &p, tokens, pv, cfg)?;
    Ok(g.item(s))
}

fn logp_true(model: &dyn LanguageModel, tokens: &[usize]) -> Result<Vec<f64>> {
    Ok(crate::models::lm_token_stats(model, tokens, None)?
        .iter()
        .map(|s| s.logp_true)
        .collect())
}

/// Negative mean next-token cross-entropy.
pub fn lm_loss_score(model: &dyn LanguageModel, tokens: &[usize]) -> Result<f64> {
    Ok(mean(&logp_true(model, tokens)?))
}

/// Mean of the `k` fraction of smallest token log-probabilities.
pub fn lm_mink_score(model: &dyn LanguageModel, tokens: &[usize], k_ratio: f64) -> Result<f64> {
    min_k_mean(&logp_true(model, tokens)?, k_ratio)
}

/// Target loss score minus reference loss score.
pub fn lm_ref_score(target: &dyn LanguageModel, reference: &dyn LanguageModel, tokens: &[usize]) -> Result<f64> {
    Ok(lm_loss_score(target, tokens)? - lm_loss_score(reference, tokens)?)
}

/// `N sqrt(2 / pi)`: expected L1 norm of an `N`-dimensional standard normal.
pub fn gaussian_l1_mass(n: usize) -> f64 {
    n as f64 * (2.0 / std::f64::consts::PI).sqrt()
}

/// Rescales `eps` to L1 mass `N sqrt(2 / pi)`.
pub fn normalize_eps(eps: &[f64]) -> Result<Vec<f64>> {
    let l1: f64 = eps.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Err(invalid("noise normalisation: the t = 0 estimate has zero L1 norm"));
    }
    let c = gaussian_l1_mass(eps.len());
    Ok(eps.iter().map(|v| c * v / l1).collect())
}

fn row_norms(g: &mut Graph, x: Var, p: f64) -> Result<Var> {
    if p == 2.0 {
        let sq = g.square(x)?;
        let s = g.sum_rows(sq)?;
        g.sqrt(s)
    } else if p == 1.0 {
        let a = g.abs(x)?;
        g.sum_rows(a)
    } else {
        let n = g.shape(x)[0];
        let mut parts = Vec::with_capacity(n);
        for r in 0..n {
            let row = g.slice(x, 0, r, 1)?;
            let nv = g.lp_norm(row, p)?;
            parts.push(g.reshape(nv, &[1])?);
        }
        g.concat(&parts, 0)
    }
}

/// Reprogrammed input `x + delta` for `x: [n, d]`, `delta: [d]`, clamped to
/// the unit box when `unit_box` is set.
pub(crate) fn shift_inputs(g: &mut Graph, x: Var, delta: Option<Var>, unit_box: bool) -> Result<Var> {
    match delta {
        None => Ok(x),
        Some(dv) => {
            let n = g.shape(x)[0];
            let t = g.tile_rows(dv, n)?;
            let s = g.add(x, t)?;
            if unit_box {
                g.clamp(s, 0.0, 1.0)
            } else {
                Ok(s)
            }
        }
    }
}

/// Trajectory discrepancy per row on the tape, `[n]`.
pub(crate) fn diffusion_error_var(
    g: &mut Graph,
    model: &dyn NoiseModel,
    params: &[Var],
    x: Var,
    delta: Option<Var>,
    cfg: &DiffScoreConfig,
) -> Result<Var> {
    model.schedule().check_t(cfg.t_probe)?;
    if !(cfg.p_norm >= 1.0) {
        return Err(invalid(format!("p_norm must be >= 1, got {}", cfg.p_norm)));
    }
    let (n, d) = g.value(x).dims2("diffusion_error")?;
    let xt = shift_inputs(g, x, delta, true)?;
    let ab = model.schedule().alpha_bar[cfg.t_probe];
    let (x_probe, eps0) = one_step_var(g, model, params, xt, ab)?;
    let eps_t = model.eps_var(g, params, x_probe, &vec![cfg.t_probe; n])?;
    let target = if cfg.normalize_eps {
        let a = g.abs(eps0)?;
        let l1 = g.sum_rows(a)?;
        if g.value(l1).data().iter().any(|v| *v == 0.0) {
            return Err(invalid("noise normalisation: the t = 0 estimate has zero L1 norm"));
        }
        let l1 = g.tile_cols(l1, d)?;
        let unit = g.div(eps0, l1)?;
        g.scale(unit, gaussian_l1_mass(d))?
    } else {
        eps0
    };
    let diff = g.sub(eps_t, target)?;
    row_norms(g, diff, cfg.p_norm)
}

/// Trajectory discrepancy `E` of one point. With no pattern this is the
/// proximal-initialisation baseline (normalised or not). The membership
/// score is `-E`.
pub fn diffusion_error(
    model: &dyn NoiseModel,
    x: &[f64],
    delta: Option<&[f64]>,
    cfg: &DiffScoreConfig,
) -> Result<f64> {
    let xs = Tensor::new(&[1, x.len()], x.to_vec())?;
    Ok(diffusion_errors(model, &xs, delta, cfg)?[0])
}

/// [`diffusion_error`] for each row of `xs: [n, d]`.
pub fn diffusion_errors(
    model: &dyn NoiseModel,
    xs: &Tensor,
    delta: Option<&[f64]>,
    cfg: &DiffScoreConfig,
) -> Result<Vec<f64>> {
    if xs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("diffusion_error: inputs must lie in [0, 1]"));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let x = g.constant(xs.clone())?;
    let dv = delta.map(|d| g.constant(Tensor::vector(d.to_vec()))).transpose()?;
    let e = diffusion_error_var(&mut g, model, &p, x, dv, cfg)?;
    Ok(g.value(e).data().to_vec())
}

/// Naive noise-estimation score `-mean ||eps - eps_theta(x_t, t)||^2` over
/// `n_mc` draws. The draws depend only on `seed`, so every sample scored with
/// the same seed sees the same noise.
pub fn diffusion_naive_score(model: &dyn NoiseModel, x: &[f64], t_probe: usize, n_mc: usize, seed: u64) -> Result<f64> {
    model.schedule().check_t(t_probe)?;
    if n_mc == 0 {
        return Err(invalid("naive score: n_mc must be positive"));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("naive score: inputs must lie in [0, 1]"));
    }
    let d = x.len();
    let ab = model.schedule().alpha_bar[t_probe];
    let mut rng = Rng::new(seed);
    let mut xs = Vec::with_capacity(n_mc * d);
    let mut eps = Vec::with_capacity(n_mc * d);
    for _ in 0..n_mc {
        let e = rng.normal_vec(d, 1.0);
        xs.extend(x.iter().zip(&e).map(|(xi, ei)| ab.sqrt() * xi + (1.0 - ab).sqrt() * ei));
        eps.extend(e);
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let xv = g.constant(Tensor::new(&[n_mc, d], xs)?)?;
    let pred = model.eps_var(&mut g, &p, xv, &vec![t_probe; n_mc])?;
    let pred = g.value(pred).data();
    let sq: f64 = pred.iter().zip(&eps).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-sq / n_mc as f64)
}

fn label_logprob(g: &mut Graph, logits: Var, y: &[usize]) -> Result<Var> {
    let k = g.shape(logits)[1];
    let ls = g.log_softmax(logits)?;
    let idx: Vec<usize> = y.iter().enumerate().map(|(i, &c)| i * k + c).collect();
    g.gather(ls, &idx)
}

/// `(s, s_cal)` per row on the tape, each `[n]`, for already reprogrammed
/// inputs `x: [n, d]`.
pub(crate) fn cls_score_vars(
    g: &mut Graph,
    target: (&dyn Classifier, &[Var]),
    reference: Option<(&dyn Classifier, &[Var])>,
    x: Var,
    y: &[usize],
    cfg: &ClsScoreConfig,
) -> Result<(Var, Var)> {
    let k = target.0.n_classes();
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return Err(invalid(format!("class {bad} outside [0, {k})")));
    }
    let lf = target.0.logits_var(g, target.1, x)?;
    let s = label_logprob(g, lf, y)?;
    let diff = match (cfg.use_reference, reference) {
        (true, Some((rm, rp))) => {
            let lg = rm.logits_var(g, rp, x)?;
            let sg = label_logprob(g, lg, y)?;
            g.sub(s, sg)?
        }
        (true, None) => return Err(invalid("calibrated score requires a reference model")),
        (false, _) => s,
    };
    let s_cal = match &cfg.ni_mode {
        NiMode::ConstantOne => diff,
        NiMode::NeighborMean {
            radius,
            n_neighbors,
            seed,
        } => {
            if *n_neighbors == 0 || !(*radius >= 0.0) {
                return Err(invalid("neighbor_mean needs n_neighbors >= 1 and radius >= 0"));
            }
            let (n, d) = g.value(x).dims2("cls_scores")?;
            let mut rng = Rng::new(*seed);
            let mut acc: Option<Var> = None;
            for _ in 0..*n_neighbors {
                let u = g.constant(Tensor::vector(rng.normal_vec(d, *radius)))?;
                let ut = g.tile_rows(u, n)?;
                let xn = g.add(x, ut)?;
                let ln = target.0.logits_var(g, target.1, xn)?;
                let sn = label_logprob(g, ln, y)?;
                let pn = g.exp(sn)?;
                acc = Some(match acc {
                    None => pn,
                    Some(a) => g.add(a, pn)?,
                });
            }
            let ni = g.scale(acc.unwrap(), 1.0 / *n_neighbors as f64)?;
            g.mul(diff, ni)?
        }
    };
    Ok((s, s_cal))
}

/// `(s, s_cal)` for rows of `xs` shifted by an optional global `delta`.
pub fn cls_scores_batch(
    target: &dyn Classifier,
    reference: Option<&dyn Classifier>,
    xs: &Tensor,
    y: &[usize],
    delta: Option<&[f64]>,
    cfg: &ClsScoreConfig,
) -> Result<Vec<(f64, f64)>> {
    let (n, _) = xs.dims2("cls_scores")?;
    if y.len() != n {
        return Err(invalid(format!("cls_scores: {n} inputs but {} labels", y.len())));
    }
    let mut g = Graph::new();
    let tp = target.bind(&mut g)?;
    let rp = reference.map(|r| r.bind(&mut g)).transpose()?;
    let x = g.constant(xs.clone())?;
    let dv = delta.map(|d| g.constant(Tensor::vector(d.to_vec()))).transpose()?;
    let x = shift_inputs(&mut g, x, dv, target.unit_box_inputs())?;
    let refr = reference.zip(rp.as_deref());
    let (s, sc) = cls_score_vars(&mut g, (target, &tp), refr, x, y, cfg)?;
    let (s, sc) = (g.value(s).data(), g.value(sc).data());
    Ok(s.iter().copied().zip(sc.iter().copied()).collect())
}

/// `s = log f(x + delta)_y` and the calibrated `s_cal`.
pub fn cls_scores(
    target: &dyn Classifier,
    reference: Option<&dyn Classifier>,
    x: &[f64],
    y: usize,
    delta: Option<&[f64]>,
    cfg: &ClsScoreConfig,
) -> Result<(f64, f64)> {
    let xs = Tensor::new(&[1, x.len()], x.to_vec())?;
    Ok(cls_scores_batch(target, reference, &xs, &[y], delta, cfg)?[0])
}

/// One row of a score export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub score: f64,
    pub is_member: bool,
    pub score_name: String,
    pub delta_id: String,
}

pub const SCORE_HEADER: [&str; 5] = ["sample_id", "score", "is_member", "score_name", "delta_id"];

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.sample_id.to_string(),
                fmt_f64(r.score),
                u8::from(r.is_member).to_string(),
                r.score_name.clone(),
                r.delta_id.clone(),
            ]
        })
        .collect();
    write_csv(path, &SCORE_HEADER, &body)
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::Format(format!("{}: expected 5 columns", path.display())));
        }
        out.push(ScoreRow {
            sample_id: rec[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad sample id {:?}", &rec[0])))?,
            score: crate::io::parse_f64(&rec[1])?,
            is_member: match &rec[2] {
                "1" => true,
                "0" => false,
                other => return Err(Error::Format(format!("bad membership bit {other:?}"))),
            },
            score_name: rec[3].to_string(),
            delta_id: rec[4].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        Activation, DiffusionConfig, DiffusionSchedule, EpsMlpDiffusion, LmConfig, MlpClassifier, TinyCausalLm,
    };

    #[test]
    fn min_k_examples() {
        assert_eq!(min_k_mean(&[-2.0, -1.0, 0.0, 1.0], 0.5).unwrap(), -1.5);
        assert_eq!(min_k_mean(&[-5.0, -1.0, -1.0, -1.0], 0.25).unwrap(), -5.0);
        assert!(min_k_mean(&[1.0, 2.0, 3.0], 0.2).is_err());
        assert!(min_k_mean(&[1.0], 0.0).is_err());
        let v = [0.3, -0.1, 0.7, 0.2];
        assert_eq!(min_k_mean(&v, 1.0).unwrap(), mean(&v));
    }

    #[test]
    fn z_score_arithmetic() {
        let ls = [-1.0f64, -2.0, -3.0];
        let mu = mean(&ls);
        let sd = (ls.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((sd - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!((-2.0 - mu) / sd, 0.0);
        assert!(((-1.0 - mu) / sd - 1.224744871391589).abs() < 1e-12);
    }

    fn lm() -> TinyCausalLm {
        TinyCausalLm::new(LmConfig::default(), &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn lm_reductions_are_exact() {
        let m = lm();
        let t: Vec<usize> = (0..16).map(|i| (i * 7) % 16).collect();
        let stats = crate::models::lm_token_stats(&m, &t, None).unwrap();
        let z: Vec<f64> = stats.iter().map(|s| s.z()).collect();
        let full = lm_score(&m, &t, None, &LmScoreConfig { min_k_ratio: 1.0 }).unwrap();
        assert_eq!(full.to_bits(), mean(&z).to_bits());
        let loss = lm_loss_score(&m, &t).unwrap();
        assert_eq!(lm_mink_score(&m, &t, 1.0).unwrap().to_bits(), loss.to_bits());
        let lp: Vec<f64> = stats.iter().map(|s| s.logp_true).collect();
        assert_eq!(loss, mean(&lp));
        assert_eq!(lm_ref_score(&m, &m, &t).unwrap(), 0.0);
        let other = TinyCausalLm::new(LmConfig::default(), &mut Rng::new(6)).unwrap();
        let a = lm_ref_score(&m, &other, &t).unwrap();
        let b = lm_ref_score(&other, &m, &t).unwrap();
        assert_eq!(a, -b);
        let empty = Tensor::zeros(&[0, 32]);
        let cfg = LmScoreConfig::default();
        assert_eq!(
            lm_score(&m, &t, Some(&empty), &cfg).unwrap().to_bits(),
            lm_score(&m, &t, None, &cfg).unwrap().to_bits()
        );
    }

    /// Logits fixed per position and independent of the context.
    struct TableLm {
        logits: Vec<Vec<f64>>,
    }

    impl LanguageModel for TableLm {
        fn vocab_size(&self) -> usize {
            self.logits[0].len()
        }
        fn embed_dim(&self) -> usize {
            1
        }
        fn bind(&self, _g: &mut Graph) -> Result<Vec<Var>> {
            Ok(vec![])
        }
        fn logits_var(&self, g: &mut Graph, _p: &[Var], tokens: &[usize], _prompt: Option<Var>) -> Result<Var> {
            let v = self.vocab_size();
            let data = (0..tokens.len()).flat_map(|i| self.logits[i].clone()).collect();
            g.constant(Tensor::new(&[tokens.len(), v], data)?)
        }
    }

    #[test]
    fn uniform_lm_loss_is_minus_ln_vocab() {
        let m = TableLm {
            logits: vec![vec![0.0; 16]; 8],
        };
        let s = lm_loss_score(&m, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert!((s + (16f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_distribution_score_is_independent_of_k() {
        let row = vec![3.0, 1.0, 0.5, -1.0];
        let m = TableLm {
            logits: vec![row; 10],
        };
        let t = [0usize; 10];
        let z = lm_score(&m, &t, None, &LmScoreConfig { min_k_ratio: 1.0 }).unwrap();
        for k in [0.2, 0.5, 0.75] {
            let s = lm_score(&m, &t, None, &LmScoreConfig { min_k_ratio: k }).unwrap();
            assert!((s - z).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_true_token_logprob_raises_score() {
        let base: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 * i as f64, -0.3, 0.5, 0.0]).collect();
        let t = [2usize, 1, 0, 3, 2, 1, 0, 3, 2, 1];
        let cfg = LmScoreConfig { min_k_ratio: 0.5 };
        let s0 = lm_score(&TableLm { logits: base.clone() }, &t, None, &cfg).unwrap();
        let mut bumped = base.clone();
        bumped[4][t[5]] += 0.8;
        let s1 = lm_score(&TableLm { logits: bumped }, &t, None, &cfg).unwrap();
        assert!(s1 >= s0);
    }

    #[test]
    fn eps_normalisation() {
        let e = normalize_eps(&[0.3; 5]).unwrap();
        for v in &e {
            assert!((v - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        }
        let raw = [0.4, -1.2, 0.05, 2.0];
        let a = normalize_eps(&raw).unwrap();
        let l1: f64 = a.iter().map(|v| v.abs()).sum();
        assert!((l1 - gaussian_l1_mass(4)).abs() < 1e-12);
        let scaled: Vec<f64> = raw.iter().map(|v| v * 3.7).collect();
        let b = normalize_eps(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(normalize_eps(&[0.0; 3]).is_err());
    }

    /// Predicts a fixed vector whatever the input; optionally recovers the
    /// injected noise of a known clean point.
    struct FixedNoise {
        schedule: DiffusionSchedule,
        out: Vec<f64>,
        oracle_x0: Option<Vec<f64>>,
    }

    impl NoiseModel for FixedNoise {
        fn input_dim(&self) -> usize {
            self.out.len()
        }
        fn schedule(&self) -> &DiffusionSchedule {
            &self.schedule
        }
        fn bind(&self, _g: &mut Graph) -> Result<Vec<Var>> {
            Ok(vec![])
        }
        fn eps_var(&self, g: &mut Graph, _p: &[Var], x: Var, t: &[usize]) -> Result<Var> {
            let n = t.len();
            match &self.oracle_x0 {
                None => g.constant(Tensor::new(&[n, self.out.len()], self.out.repeat(n))?),
                Some(x0) => {
                    let xv = g.value(x).clone();
                    let mut data = Vec::new();
                    for (r, &ti) in t.iter().enumerate() {
                        let ab = self.schedule.alpha_bar[ti];
                        for (j, x0j) in x0.iter().enumerate() {
                            data.push((xv.row(r)[j] - ab.sqrt() * x0j) / (1.0 - ab).sqrt());
                        }
                    }
                    g.constant(Tensor::new(&[n, x0.len()], data)?)
                }
            }
        }
    }

    #[test]
    fn input_independent_predictor_has_zero_error_without_normalisation() {
        let m = FixedNoise {
            schedule: DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap(),
            out: vec![0.3, -0.2, 0.9],
            oracle_x0: None,
        };
        let cfg = DiffScoreConfig {
            normalize_eps: false,
            ..Default::default()
        };
        for x in [[0.1, 0.2, 0.3], [0.9, 0.0, 1.0]] {
            assert_eq!(diffusion_error(&m, &x, None, &cfg).unwrap(), 0.0);
        }
        let zero = FixedNoise {
            out: vec![0.0; 3],
            ..m
        };
        assert!(diffusion_error(&zero, &[0.5; 3], None, &DiffScoreConfig::default()).is_err());
    }

    #[test]
    fn naive_score_is_zero_for_oracle_and_seeded() {
        let x0 = vec![0.2, 0.6, 0.4];
        let m = FixedNoise {
            schedule: DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap(),
            out: vec![0.0; 3],
            oracle_x0: Some(x0.clone()),
        };
        let s = diffusion_naive_score(&m, &x0, 15, 8, 3).unwrap();
        assert!(s.abs() < 1e-20, "{s}");
        let dm = EpsMlpDiffusion::new(DiffusionConfig::default(), &mut Rng::new(1)).unwrap();
        let x = [0.5; 8];
        assert_eq!(
            diffusion_naive_score(&dm, &x, 15, 8, 11).unwrap(),
            diffusion_naive_score(&dm, &x, 15, 8, 11).unwrap()
        );
    }

    #[test]
    fn zero_delta_matches_baseline_bitwise() {
        let dm = EpsMlpDiffusion::new(DiffusionConfig::default(), &mut Rng::new(1)).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1.0];
        for normalize in [false, true] {
            let cfg = DiffScoreConfig {
                normalize_eps: normalize,
                ..Default::default()
            };
            let a = diffusion_error(&dm, &x, None, &cfg).unwrap();
            let b = diffusion_error(&dm, &x, Some(&[0.0; 8]), &cfg).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let f = MlpClassifier::new(&[2, 8, 3], Activation::Relu, &mut Rng::new(1)).unwrap();
        let g = MlpClassifier::new(&[2, 8, 3], Activation::Relu, &mut Rng::new(2)).unwrap();
        let cfg = ClsScoreConfig::default();
        let a = cls_scores(&f, Some(&g), &[0.3, -0.7], 1, None, &cfg).unwrap();
        let b = cls_scores(&f, Some(&g), &[0.3, -0.7], 1, Some(&[0.0, 0.0]), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classifier_score_identities() {
        let uniform = MlpClassifier::from_params(
            &[2, 4],
            Activation::Relu,
            vec![Tensor::zeros(&[2, 4]), Tensor::zeros(&[4])],
        )
        .unwrap();
        let f = MlpClassifier::new(&[2, 8, 4], Activation::Relu, &mut Rng::new(1)).unwrap();
        let g = MlpClassifier::new(&[2, 8, 4], Activation::Relu, &mut Rng::new(2)).unwrap();
        let cfg = ClsScoreConfig::default();
        let (s, _) = cls_scores(&uniform, Some(&g), &[0.3, 0.1], 2, None, &cfg).unwrap();
        assert!((s + (4f64).ln()).abs() < 1e-15);
        let (_, sc) = cls_scores(&f, Some(&f), &[0.3, 0.1], 2, None, &cfg).unwrap();
        assert_eq!(sc, 0.0);
        let (sf, sc) = cls_scores(&f, Some(&g), &[0.3, 0.1], 2, None, &cfg).unwrap();
        let (sg, _) = cls_scores(&g, Some(&f), &[0.3, 0.1], 2, None, &cfg).unwrap();
        assert_eq!(sc, sf - sg);
        assert!(cls_scores(&f, None, &[0.3, 0.1], 2, None, &cfg).is_err());
        let nb = ClsScoreConfig {
            use_reference: true,
            ni_mode: NiMode::NeighborMean {
                radius: 0.1,
                n_neighbors: 4,
                seed: 1,
            },
        };
        let (_, sc) = cls_scores(&f, Some(&g), &[0.3, 0.1], 2, None, &nb).unwrap();
        assert!(sc.is_finite());
    }

    #[test]
    fn scores_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ScoreRow {
                sample_id: 4,
                score: -0.1,
                is_member: true,
                score_name: "reprogram".into(),
                delta_id: "abc".into(),
            },
            ScoreRow {
                sample_id: 9,
                score: 1.0 / 3.0,
                is_member: false,
                score_name: "reprogram".into(),
                delta_id: "none".into(),
            },
        ];
        let p = dir.path().join("s.csv");
        write_scores_csv(&p, &rows).unwrap();
        assert_eq!(read_scores_csv(&p).unwrap(), rows);
    }
}
