//! Numerical probes of the membership-signal theory on small models.
//!
//! Second derivatives come from central differences of reverse-mode input
//! gradients; nothing here needs second-order autodiff.

use crate::error::{invalid, Result};
use crate::io::{fmt_f64, write_csv};
use crate::models::{lm_token_stats, Classifier, LanguageModel};
use crate::reprogram::{Labeled, ReprogramPattern};
use crate::rng::Rng;
use crate::tensor::{log_softmax_row, Graph, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `C = diag(p) - p p^T` for a probability vector `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxCov {
    pub p: Vec<f64>,
    /// Row-major `K x K`.
    pub c: Vec<f64>,
}

pub fn softmax_cov(p: &[f64]) -> Result<SoftmaxCov> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > 1e-9 || p.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid(format!("softmax_cov: not a probability vector (sum {sum})")));
    }
    let k = p.len();
    let mut c = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            c[i * k + j] = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
        }
    }
    let cov = SoftmaxCov { p: p.to_vec(), c };
    debug_assert!(cov.row_sums().iter().all(|r| r.abs() < 1e-12));
    Ok(cov)
}

impl SoftmaxCov {
    pub fn k(&self) -> usize {
        self.p.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.k() + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.k()).map(|i| self.at(i, i)).sum()
    }

    /// `1 - ||p||^2`.
    pub fn trace_identity(&self) -> f64 {
        1.0 - self.p.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.k()).map(|i| (0..self.k()).map(|j| self.at(i, j)).sum()).collect()
    }

    /// `v^T C v`.
    pub fn quad(&self, v: &[f64]) -> f64 {
        let k = self.k();
        (0..k).map(|i| (0..k).map(|j| v[i] * self.at(i, j) * v[j]).sum::<f64>()).sum()
    }
}

fn probs(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    log_softmax_row(logits, &mut out);
    out.iter().map(|v| v.exp()).collect()
}

/// `grad_x` of the cross-entropy of label `y` at `x`.
pub fn input_loss_grad(model: &dyn Classifier, x: &[f64], y: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let xv = g.param(Tensor::new(&[1, x.len()], x.to_vec())?)?;
    let l = model.logits_var(&mut g, &p, xv)?;
    let ls = g.log_softmax(l)?;
    let picked = g.gather(ls, &[y])?;
    let loss = g.neg(picked)?;
    let loss = g.sum(loss)?;
    Ok(g.backward(loss)?.get(xv).unwrap().into_data())
}

/// Softmax probabilities and the `K x d` logit Jacobian at `x`.
pub fn logit_jacobian(model: &dyn Classifier, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let xv = g.param(Tensor::new(&[1, x.len()], x.to_vec())?)?;
    let l = model.logits_var(&mut g, &p, xv)?;
    let k = model.n_classes();
    let mut jac = Vec::with_capacity(k);
    for c in 0..k {
        let s = g.gather(l, &[c])?;
        let s = g.sum(s)?;
        jac.push(g.backward(s)?.get(xv).unwrap().into_data());
    }
    Ok((probs(g.value(l).data()), jac))
}

/// Central-difference Jacobian of a vector field, as rows `H[i][j] =
/// d f_i / d x_j`.
fn fd_jacobian(f: &dyn Fn(&[f64]) -> Result<Vec<f64>>, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>> {
    let d = x.len();
    let mut cols = Vec::with_capacity(d);
    let mut probe = x.to_vec();
    for j in 0..d {
        probe[j] = x[j] + h;
        let fp = f(&probe)?;
        probe[j] = x[j] - h;
        let fm = f(&probe)?;
        probe[j] = x[j];
        cols.push(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
    }
    let m = cols[0].len();
    Ok((0..m).map(|i| (0..d).map(|j| cols[j][i]).collect()).collect())
}

fn frob(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HessianCheck {
    /// `||H_fd||_F`.
    pub hessian_norm: f64,
    /// `||H_fd - J^T C J||_F / ||H_fd||_F`.
    pub rel_residual_gauss_newton: f64,
    /// `||H_fd - J^T C J - R_fd||_F / ||H_fd||_F`.
    pub rel_residual_full: f64,
    /// `||H_fd - H_fd^T||_F / ||H_fd||_F`.
    pub rel_symmetry_defect: f64,
}

pub const MAX_HESSIAN_DIM: usize = 16;

/// Checks `H = J^T C(p) J + R` at `(x, y)` with `R = sum_k (p_k - [k = y])
/// hess f_k`, every Hessian taken by central differences of step `h`.
pub fn verify_hessian_decomposition(model: &dyn Classifier, x: &[f64], y: usize, h: f64) -> Result<HessianCheck> {
    let d = x.len();
    if d > MAX_HESSIAN_DIM {
        return Err(invalid(format!(
            "hessian probe: input dimension {d} exceeds {MAX_HESSIAN_DIM}"
        )));
    }
    if y >= model.n_classes() {
        return Err(invalid(format!("hessian probe: label {y} out of range")));
    }
    let hfd = fd_jacobian(&|z| input_loss_grad(model, z, y), x, h)?;
    let (p, jac) = logit_jacobian(model, x)?;
    let cov = softmax_cov(&p)?;
    let k = p.len();
    let mut gn = vec![vec![0.0; d]; d];
    for (i, row) in gn.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let ci: Vec<f64> = (0..k).map(|a| jac[a][i]).collect();
            let cj: Vec<f64> = (0..k).map(|a| jac[a][j]).collect();
            *v = (0..k).map(|a| (0..k).map(|b| ci[a] * cov.at(a, b) * cj[b]).sum::<f64>()).sum();
        }
    }
    let mut r = vec![vec![0.0; d]; d];
    for c in 0..k {
        let w = p[c] - if c == y { 1.0 } else { 0.0 };
        let hk = fd_jacobian(&|z| Ok(logit_jacobian(model, z)?.1[c].clone()), x, h)?;
        for i in 0..d {
            for j in 0..d {
                r[i][j] += w * hk[i][j];
            }
        }
    }
    let norm = frob(&hfd).max(1e-300);
    let diff_gn: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| hfd[i][j] - gn[i][j]).collect()).collect();
    let diff_full: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| diff_gn[i][j] - r[i][j]).collect()).collect();
    let asym: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| hfd[i][j] - hfd[j][i]).collect()).collect();
    Ok(HessianCheck {
        hessian_norm: frob(&hfd),
        rel_residual_gauss_newton: frob(&diff_gn) / norm,
        rel_residual_full: frob(&diff_full) / norm,
        rel_symmetry_defect: frob(&asym) / norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    /// Rayleigh quotient of the final iterate.
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub const MIN_POWER_ITERS: usize = 20;

/// Dominant-magnitude eigenvalue of the Hessian of a scalar function whose
/// gradient is `grad`, by power iteration on finite-difference
/// Hessian-vector products from the start direction `v0`.
pub fn power_iteration_fd(
    grad: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    v0: &[f64],
    max_iters: usize,
    h: f64,
) -> Result<PowerResult> {
    if max_iters < MIN_POWER_ITERS {
        return Err(invalid(format!("power iteration needs at least {MIN_POWER_ITERS} iterations")));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n0 = norm(v0);
    if !(n0 > 0.0) || v0.len() != x.len() {
        return Err(invalid("power iteration: bad start direction"));
    }
    let hvp = |v: &[f64]| -> Result<Vec<f64>> {
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let (gp, gm) = (grad(&xp)?, grad(&xm)?);
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    };
    let mut v: Vec<f64> = v0.iter().map(|a| a / n0).collect();
    let mut lambda = f64::NAN;
    for it in 1..=max_iters {
        let hv = hvp(&v)?;
        let next = v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>();
        let hn = norm(&hv);
        if hn == 0.0 {
            return Ok(PowerResult {
                lambda: 0.0,
                converged: true,
                iterations: it,
            });
        }
        let done = (next - lambda).abs() <= 1e-10 * next.abs().max(1e-12);
        lambda = next;
        v = hv.iter().map(|a| a / hn).collect();
        if done && it >= 3 {
            return Ok(PowerResult {
                lambda,
                converged: true,
                iterations: it,
            });
        }
    }
    Ok(PowerResult {
        lambda,
        converged: false,
        iterations: max_iters,
    })
}

/// Dominant eigenvalue of the input Hessian of the cross-entropy at `(x, y)`.
pub fn lambda_max_input_hessian(
    model: &dyn Classifier,
    x: &[f64],
    y: usize,
    power_iters: usize,
    h: f64,
    seed: u64,
) -> Result<PowerResult> {
    let v0 = Rng::new(seed).normal_vec(x.len(), 1.0);
    power_iteration_fd(&|z| input_loss_grad(model, z, y), x, &v0, power_iters, h)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralGap {
    pub lambda_max_member_mean: f64,
    pub lambda_max_nonmember_mean: f64,
    /// Non-member mean minus member mean.
    pub spectral_gap: f64,
    pub gap_stderr: f64,
    /// `1 - E ||p(x_nm)||^2`.
    pub dispersion_alpha: f64,
    pub member_lambdas: Vec<f64>,
    pub nonmember_lambdas: Vec<f64>,
    pub unconverged: usize,
}

pub const MIN_SPECTRAL_SAMPLES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub iters: usize,
    pub h: f64,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            iters: 50,
            h: 1e-4,
            seed: 0,
        }
    }
}

/// Mean `lambda_max` of the input Hessian on members and non-members.
pub fn spectral_gap_experiment(
    model: &dyn Classifier,
    members: &Labeled,
    nonmembers: &Labeled,
    cfg: &PowerConfig,
) -> Result<SpectralGap> {
    let (nm, _) = members.x.dims2("spectral_gap")?;
    let (nn, _) = nonmembers.x.dims2("spectral_gap")?;
    if nm < MIN_SPECTRAL_SAMPLES || nn < MIN_SPECTRAL_SAMPLES {
        return Err(invalid(format!(
            "spectral gap needs at least {MIN_SPECTRAL_SAMPLES} samples per side, got {nm} and {nn}"
        )));
    }
    let mut unconverged = 0;
    let mut side = |set: &Labeled| -> Result<Vec<f64>> {
        (0..set.y.len())
            .map(|i| {
                let r = lambda_max_input_hessian(model, set.x.row(i), set.y[i], cfg.iters, cfg.h, cfg.seed)?;
                if !r.converged {
                    unconverged += 1;
                }
                Ok(r.lambda)
            })
            .collect()
    };
    let lm = side(members)?;
    let ln = side(nonmembers)?;
    let (mm, sm) = mean_se(&lm);
    let (mn, sn) = mean_se(&ln);
    let mut disp = 0.0;
    for i in 0..nn {
        let p = probs(&model.logits(nonmembers.x.row(i))?);
        disp += 1.0 - p.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(SpectralGap {
        lambda_max_member_mean: mm,
        lambda_max_nonmember_mean: mn,
        spectral_gap: mn - mm,
        gap_stderr: (sm * sm + sn * sn).sqrt(),
        dispersion_alpha: disp / nn as f64,
        member_lambdas: lm,
        nonmember_lambdas: ln,
        unconverged,
    })
}

/// Mean over rows of `grad_x log f(x)_y`, i.e. `E[J^T w]` with score
/// sensitivity `w = e_y - p`.
fn mean_score_grad(model: &dyn Classifier, set: &Labeled) -> Result<Vec<f64>> {
    let (n, d) = set.x.dims2("gradient_streams")?;
    let k = model.n_classes();
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let xv = g.param(set.x.clone())?;
    let l = model.logits_var(&mut g, &p, xv)?;
    let ls = g.log_softmax(l)?;
    let idx: Vec<usize> = set.y.iter().enumerate().map(|(i, &c)| i * k + c).collect();
    let s = g.gather(ls, &idx)?;
    let s = g.sum(s)?;
    let gx = g.backward(s)?.get(xv).unwrap();
    Ok((0..d).map(|j| (0..n).map(|i| gx.row(i)[j]).sum::<f64>() / n as f64).collect())
}

/// Norms of the member stream `G1` and non-member stream `G2` at `delta = 0`.
pub fn gradient_streams(model: &dyn Classifier, members: &Labeled, nonmembers: &Labeled) -> Result<(f64, f64)> {
    let n = |v: Vec<f64>| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok((n(mean_score_grad(model, members)?), n(mean_score_grad(model, nonmembers)?)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossGap {
    pub gap_base: f64,
    pub gap_delta: f64,
    /// `(id, is_member, loss_base, loss_delta)`.
    pub per_sample: Vec<(usize, bool, f64, f64)>,
}

impl LossGap {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .per_sample
            .iter()
            .map(|(id, m, a, b)| vec![id.to_string(), u8::from(*m).to_string(), fmt_f64(*a), fmt_f64(*b)])
            .collect();
        write_csv(path, &["sample_id", "is_member", "loss_base", "loss_delta"], &rows)
    }
}

fn lm_loss(model: &dyn LanguageModel, tokens: &[usize], prompt: Option<&Tensor>) -> Result<f64> {
    let st = lm_token_stats(model, tokens, prompt)?;
    Ok(-st.iter().map(|s| s.logp_true).sum::<f64>() / st.len() as f64)
}

/// Mean non-member loss minus mean member loss, without and with the soft
/// prompt. Scored ids must not overlap the pattern's shadow ids.
pub fn loss_gap_report(
    model: &dyn LanguageModel,
    pattern: &ReprogramPattern,
    members: &[(usize, &[usize])],
    nonmembers: &[(usize, &[usize])],
    shadow_ids: &[usize],
) -> Result<LossGap> {
    let shadow: std::collections::BTreeSet<usize> = shadow_ids.iter().copied().collect();
    let leaked: Vec<usize> = members
        .iter()
        .chain(nonmembers)
        .map(|(id, _)| *id)
        .filter(|id| shadow.contains(id))
        .collect();
    if let Some(&first) = leaked.first() {
        return Err(crate::Error::Leakage {
            count: leaked.len(),
            first,
        });
    }
    if members.is_empty() || nonmembers.is_empty() {
        return Err(invalid("loss gap: empty member or non-member set"));
    }
    let prompt = pattern
        .prompt()
        .ok_or_else(|| invalid("loss gap needs a soft-prompt pattern"))?;
    let prompt = if prompt.is_empty() { None } else { Some(prompt) };
    let mut per = Vec::new();
    for (set, m) in [(members, true), (nonmembers, false)] {
        for (id, t) in set {
            let a = lm_loss(model, t, None)?;
            let b = if prompt.is_some() { lm_loss(model, t, prompt)? } else { a };
            per.push((*id, m, a, b));
        }
    }
    let gap = |col: fn(&(usize, bool, f64, f64)) -> f64| {
        let mean = |m: bool| {
            let v: Vec<f64> = per.iter().filter(|r| r.1 == m).map(col).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        mean(false) - mean(true)
    };
    Ok(LossGap {
        gap_base: gap(|r| r.2),
        gap_delta: gap(|r| r.3),
        per_sample: per,
    })
}

/// Two equal-variance Gaussians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianScorePair {
    pub mu0: f64,
    pub mu1: f64,
    pub sigma: f64,
}

pub const DEFAULT_JSD_NODES: usize = 4001;

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Jensen-Shannon divergence (nats) by composite Simpson quadrature over
/// `+-12 sigma` around both means with `nodes` points (made odd, at least
/// 2001).
pub fn gaussian_jsd(pair: &GaussianScorePair, nodes: usize) -> Result<f64> {
    let s = pair.sigma;
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid(format!("gaussian_jsd: sigma must be positive, got {s}")));
    }
    let n = nodes.max(2001) | 1;
    let lo = pair.mu0.min(pair.mu1) - 12.0 * s;
    let hi = pair.mu0.max(pair.mu1) + 12.0 * s;
    let step = (hi - lo) / (n - 1) as f64;
    let norm = -(s * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let lp = |x: f64, mu: f64| norm - 0.5 * ((x - mu) / s).powi(2);
    let ln2 = std::f64::consts::LN_2;
    let mut total = 0.0;
    for i in 0..n {
        let x = lo + step * i as f64;
        let (a, b) = (lp(x, pair.mu0), lp(x, pair.mu1));
        let lm = log_add_exp(a, b) - ln2;
        let f = 0.5 * a.exp() * (a - lm) + 0.5 * b.exp() * (b - lm);
        let w = if i == 0 || i == n - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += w * f;
    }
    Ok((total * step / 3.0).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiEstimator {
    GaussianFit,
    Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Nats.
    pub value: f64,
    pub estimator: MiEstimator,
    pub fell_back: bool,
}

fn plugin_jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut j = 0.0;
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            j += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            j += 0.5 * b * (b / m).ln();
        }
    }
    j
}

fn histogram_jsd(m: &[f64], n: &[f64]) -> f64 {
    let all = m.iter().chain(n);
    let lo = all.clone().fold(f64::INFINITY, |a, b| a.min(*b));
    let hi = all.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    if hi <= lo {
        return 0.0;
    }
    let bins = (((m.len() + n.len()) as f64).sqrt().ceil() as usize).clamp(2, 64);
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for x in v {
            let b = (((x - lo) / (hi - lo)) * bins as f64).floor() as usize;
            h[b.min(bins - 1)] += 1.0 / v.len() as f64;
        }
        h
    };
    plugin_jsd(&hist(m), &hist(n))
}

/// Mutual information between membership (equal priors) and the score.
pub fn mi_estimate(members: &[f64], nonmembers: &[f64], estimator: MiEstimator) -> Result<MiEstimate> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(invalid("mi_estimate: both score sets must be nonempty"));
    }
    match estimator {
        MiEstimator::Histogram => Ok(MiEstimate {
            value: histogram_jsd(members, nonmembers),
            estimator,
            fell_back: false,
        }),
        MiEstimator::GaussianFit => {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (a, b) = (mean(members), mean(nonmembers));
            let ss: f64 = members.iter().map(|x| (x - a) * (x - a)).sum::<f64>()
                + nonmembers.iter().map(|x| (x - b) * (x - b)).sum::<f64>();
            let sigma = (ss / (members.len() + nonmembers.len()) as f64).sqrt();
            if !(sigma > 1e-12 * a.abs().max(b.abs()).max(1.0)) {
                log::warn!("mi_estimate: degenerate variance, falling back to the histogram estimator");
                return Ok(MiEstimate {
                    value: histogram_jsd(members, nonmembers),
                    estimator: MiEstimator::Histogram,
                    fell_back: true,
                });
            }
            let pair = GaussianScorePair { mu0: b, mu1: a, sigma };
            Ok(MiEstimate {
                value: gaussian_jsd(&pair, DEFAULT_JSD_NODES)?,
                estimator,
                fell_back: false,
            })
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegradedChannel {
    pub mi_strong: f64,
    pub mi_degraded: f64,
    pub r: f64,
}

/// Builds scores `X1 = M delta + sigma N` and the degraded `X2 = r X1 + Z`
/// with `Z ~ N(0, (1 - r^2) sigma^2)` (same marginal noise, mean gap shrunk
/// by `r`), and estimates the membership MI of each.
pub fn degraded_channel_check(delta: f64, sigma: f64, r: f64, n: usize, seed: u64) -> Result<DegradedChannel> {
    if !(0.0..1.0).contains(&r) || !(sigma > 0.0) || n < 2 {
        return Err(invalid("degraded channel: need r in [0, 1), sigma > 0, n >= 2"));
    }
    let mut rng = Rng::new(seed);
    let (mut m1, mut n1, mut m2, mut n2) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let member = i % 2 == 0;
        let x1 = if member { delta } else { 0.0 } + sigma * rng.normal();
        let x2 = r * x1 + (1.0 - r * r).sqrt() * sigma * rng.normal();
        if member {
            m1.push(x1);
            m2.push(x2);
        } else {
            n1.push(x1);
            n2.push(x2);
        }
    }
    Ok(DegradedChannel {
        mi_strong: mi_estimate(&m1, &n1, MiEstimator::GaussianFit)?.value,
        mi_degraded: mi_estimate(&m2, &n2, MiEstimator::GaussianFit)?.value,
        r,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginCheck {
    pub deltas: Vec<f64>,
    /// Monte Carlo `E[phi(D)]` with `D ~ N(delta, 2 sigma^2)`.
    pub h: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Sample variance of the shared draws `D - delta`.
    pub var_d: f64,
    pub increasing: bool,
}

/// Estimates `H(delta) = E[phi(D)]` on a grid with common random numbers and
/// checks that it strictly increases.
pub fn score_margin_monotone_check(
    phi: &dyn Fn(f64) -> f64,
    sigma: f64,
    deltas: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<MarginCheck> {
    if n_mc < 2 || !(sigma > 0.0) {
        return Err(invalid("margin check: need n_mc >= 2 and sigma > 0"));
    }
    let s = (2.0f64).sqrt() * sigma;
    let draws = Rng::new(seed).normal_vec(n_mc, s);
    let (mean_d, _) = mean_se(&draws);
    let var_d = draws.iter().map(|e| (e - mean_d).powi(2)).sum::<f64>() / (n_mc - 1) as f64;
    let mut h = Vec::new();
    let mut se = Vec::new();
    for &d in deltas {
        let v: Vec<f64> = draws.iter().map(|e| phi(d + e)).collect();
        let (m, e) = mean_se(&v);
        h.push(m);
        se.push(e);
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|a, b| deltas[*a].total_cmp(&deltas[*b]));
    let increasing = order.windows(2).all(|w| h[w[1]] > h[w[0]]);
    Ok(MarginCheck {
        deltas: deltas.to_vec(),
        h,
        stderr: se,
        var_d,
        increasing,
    })
}

/// Grid of `h(delta) = JSD(N(delta/2, s^2) || N(-delta/2, s^2))`.
pub fn jsd_grid(sigma: f64, ratios: &[f64]) -> Result<Vec<(f64, f64)>> {
    ratios
        .iter()
        .map(|r| {
            let d = r * sigma;
            let j = gaussian_jsd(
                &GaussianScorePair {
                    mu0: -d / 2.0,
                    mu1: d / 2.0,
                    sigma,
                },
                DEFAULT_JSD_NODES,
            )?;
            Ok((*r, j))
        })
        .collect()
}

/// Summary of a theory run. Probes that do not apply to a family are absent:
/// the Hessian and gradient-stream fields need a classifier, the loss gap a
/// language model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max_member_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max_nonmember_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectral_gap_stderr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g1_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g2_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_gap_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_gap_delta: Option<f64>,
    pub mi_base: f64,
    pub mi_delta: f64,
    pub linear_decomposition_residual: f64,
    pub mlp_decomposition_residual: f64,
}

impl TheoryReport {
    /// Every present field is finite.
    pub fn all_finite(&self) -> bool {
        let opt = [
            self.lambda_max_member_mean,
            self.lambda_max_nonmember_mean,
            self.spectral_gap,
            self.spectral_gap_stderr,
            self.dispersion_alpha,
            self.g1_norm,
            self.g2_norm,
            self.loss_gap_base,
            self.loss_gap_delta,
        ];
        [
            self.rho,
            self.mi_base,
            self.mi_delta,
            self.linear_decomposition_residual,
            self.mlp_decomposition_residual,
        ]
        .iter()
        .chain(opt.iter().flatten())
        .all(|v| v.is_finite())
    }
}
