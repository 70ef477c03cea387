//! Attack metrics, model-boundary defenses and run reports.
//!
//! Thresholding convention: a sample is predicted member when its score is
//! strictly above the threshold. AUC gives half credit to ties.

use crate::error::{invalid, Result};
use crate::io::{create_dir, fmt_f64, write_csv, write_json};
use crate::models::{Classifier, DiffusionSchedule, LanguageModel, NoiseModel};
use crate::rng::{derive_seed, derive_seed_index, Rng};
use crate::scoring::{write_scores_csv, ScoreRow};
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: usize,
    pub score: f64,
    pub is_member: bool,
}

fn counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(invalid(format!("sample {} has non-finite score {}", s.id, s.score)));
    }
    let m = samples.iter().filter(|s| s.is_member).count();
    let n = samples.len() - m;
    if m == 0 || n == 0 {
        return Err(invalid(format!(
            "metrics need both classes, got {m} members and {n} non-members"
        )));
    }
    Ok((m, n))
}

/// Distinct scores in descending order with the member and non-member count
/// at each.
fn groups(samples: &[ScoredSample]) -> Vec<(f64, usize, usize)> {
    let mut v: Vec<&ScoredSample> = samples.iter().collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for s in v {
        match out.last_mut() {
            Some(g) if g.0 == s.score => {
                if s.is_member {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => out.push((s.score, usize::from(s.is_member), usize::from(!s.is_member))),
        }
    }
    out
}

/// Twice the Mann-Whitney count: 2 per correctly ordered pair, 1 per tie.
fn mann_whitney_twice(samples: &[ScoredSample]) -> u128 {
    let mut nm_below: u128 = samples.iter().filter(|s| !s.is_member).count() as u128;
    let mut acc = 0u128;
    for (_, m, n) in groups(samples) {
        nm_below -= n as u128;
        acc += 2 * m as u128 * nm_below + m as u128 * n as u128;
    }
    acc
}

/// `P(score_member > score_nonmember) + P(tie) / 2`.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (m, n) = counts(samples)?;
    Ok(mann_whitney_twice(samples) as f64 / (2 * m as u128 * n as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Members are predicted for scores strictly above this value.
    #[serde(with = "crate::io::ext_f64")]
    pub threshold: f64,
}

/// Empirical ROC from `(0, 0)` (threshold `+inf`) to `(1, 1)` (threshold
/// `-inf`), one point per distinct score. Tied scores move together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn roc(samples: &[ScoredSample]) -> Result<RocCurve> {
    let (m, n) = counts(samples)?;
    let gs = groups(samples);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, (_, gm, gn)) in gs.iter().enumerate() {
        tp += gm;
        fp += gn;
        let threshold = gs.get(i + 1).map_or(f64::NEG_INFINITY, |g| g.0);
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / m as f64,
            threshold,
        });
    }
    Ok(RocCurve { points })
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|p| vec![fmt_f64(p.fpr), fmt_f64(p.tpr), fmt_f64(p.threshold)])
            .collect();
        write_csv(path, &["fpr", "tpr", "threshold"], &rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub fpr_target: f64,
    pub tpr: f64,
    /// FPR of the operating point actually used, `<= fpr_target`.
    pub achieved_fpr: f64,
    #[serde(with = "crate::io::ext_f64")]
    pub threshold: f64,
}

/// Highest TPR over empirical thresholds whose FPR does not exceed the
/// target. No interpolation between operating points.
pub fn tpr_at_fpr(samples: &[ScoredSample], fpr_target: f64) -> Result<TprAtFpr> {
    if !(fpr_target > 0.0 && fpr_target <= 1.0) {
        return Err(invalid(format!("fpr target must lie in (0, 1], got {fpr_target}")));
    }
    let (_, n) = counts(samples)?;
    if 1.0 / (n as f64) > fpr_target {
        log::warn!("fpr target {fpr_target} is below the resolution 1/{n} of the non-member set");
    }
    let curve = roc(samples)?;
    let best = curve
        .points
        .iter()
        .filter(|p| p.fpr <= fpr_target)
        .max_by(|a, b| a.tpr.total_cmp(&b.tpr).then(b.fpr.total_cmp(&a.fpr)))
        .expect("the origin always qualifies");
    Ok(TprAtFpr {
        fpr_target,
        tpr: best.tpr,
        achieved_fpr: best.fpr,
        threshold: best.threshold,
    })
}

/// Best `(TPR + TNR) / 2` over empirical thresholds, with its threshold.
pub fn balanced_accuracy(samples: &[ScoredSample]) -> Result<(f64, f64)> {
    let curve = roc(samples)?;
    let best = curve
        .points
        .iter()
        .map(|p| ((p.tpr + 1.0 - p.fpr) / 2.0, p.threshold))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("roc has points");
    Ok(best)
}

/// Membership advantage `2 (acc - 0.5)`.
pub fn advantage(balanced_acc: f64) -> f64 {
    2.0 * (balanced_acc - 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_name: String,
    pub defense_name: String,
    pub auc: f64,
    pub tpr_at: Vec<TprAtFpr>,
    pub balanced_acc: f64,
    #[serde(with = "crate::io::ext_f64")]
    pub threshold: f64,
    pub advantage: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// Model queries per scored sample, e.g. `1+1`.
    pub queries: String,
    pub seed: u64,
}

pub fn attack_report(
    attack_name: &str,
    defense_name: &str,
    samples: &[ScoredSample],
    fpr_targets: &[f64],
    queries: &str,
    seed: u64,
) -> Result<AttackReport> {
    let (m, n) = counts(samples)?;
    let (acc, thr) = balanced_accuracy(samples)?;
    Ok(AttackReport {
        attack_name: attack_name.into(),
        defense_name: defense_name.into(),
        auc: auc(samples)?,
        tpr_at: fpr_targets
            .iter()
            .map(|f| tpr_at_fpr(samples, *f))
            .collect::<Result<_>>()?,
        balanced_acc: acc,
        threshold: thr,
        advantage: advantage(acc),
        n_members: m,
        n_nonmembers: n,
        queries: queries.into(),
        seed,
    })
}

/// Scores of one attack under one defense.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRun {
    pub attack: String,
    pub defense: String,
    pub queries: String,
    pub delta_id: String,
    pub samples: Vec<ScoredSample>,
}

impl AttackRun {
    /// File stem under `scores/` and `roc/`.
    pub fn stem(&self) -> String {
        if self.defense == "none" {
            self.attack.clone()
        } else {
            format!("{}__{}", self.attack, self.defense)
        }
    }

    pub fn score_rows(&self) -> Vec<ScoreRow> {
        self.samples
            .iter()
            .map(|s| ScoreRow {
                sample_id: s.id,
                score: s.score,
                is_member: s.is_member,
                score_name: self.attack.clone(),
                delta_id: self.delta_id.clone(),
            })
            .collect()
    }
}

/// Reports for every cell of an attack x defense grid.
pub fn evaluate_grid(runs: &[AttackRun], fpr_targets: &[f64], seed: u64) -> Result<Vec<AttackReport>> {
    if runs.is_empty() {
        return Err(invalid("report: empty attack grid"));
    }
    let mut seen = BTreeSet::new();
    for r in runs {
        if !seen.insert((r.attack.as_str(), r.defense.as_str())) {
            return Err(invalid(format!(
                "report: duplicate attack {:?} under defense {:?}",
                r.attack, r.defense
            )));
        }
    }
    runs.iter()
        .map(|r| attack_report(&r.attack, &r.defense, &r.samples, fpr_targets, &r.queries, seed))
        .collect()
}

pub fn report_csv_rows(reports: &[AttackReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = ["attack", "defense", "auc"].iter().map(|s| s.to_string()).collect();
    if let Some(r) = reports.first() {
        for t in &r.tpr_at {
            header.push(format!("tpr@{}", t.fpr_target));
            header.push(format!("achieved_fpr@{}", t.fpr_target));
        }
    }
    header.extend(
        ["balanced_acc", "threshold", "advantage", "n_members", "n_nonmembers", "queries", "seed"]
            .iter()
            .map(|s| s.to_string()),
    );
    let rows = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.attack_name.clone(), r.defense_name.clone(), fmt_f64(r.auc)];
            for t in &r.tpr_at {
                row.push(fmt_f64(t.tpr));
                row.push(fmt_f64(t.achieved_fpr));
            }
            row.extend([
                fmt_f64(r.balanced_acc),
                fmt_f64(r.threshold),
                fmt_f64(r.advantage),
                r.n_members.to_string(),
                r.n_nonmembers.to_string(),
                r.queries.clone(),
                r.seed.to_string(),
            ]);
            row
        })
        .collect();
    (header, rows)
}

/// Writes `scores/`, `roc/`, `report.json` and `report.csv` under `dir`.
pub fn write_reports(dir: &Path, runs: &[AttackRun], reports: &[AttackReport]) -> Result<()> {
    create_dir(&dir.join("scores"))?;
    create_dir(&dir.join("roc"))?;
    for r in runs {
        write_scores_csv(&dir.join("scores").join(format!("{}.csv", r.stem())), &r.score_rows())?;
        roc(&r.samples)?.write_csv(&dir.join("roc").join(format!("{}.csv", r.stem())))?;
    }
    write_json(&dir.join("report.json"), &reports)?;
    let (header, rows) = report_csv_rows(reports);
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&dir.join("report.csv"), &h, &rows)
}

/// Per-row noise keyed by the row's content, the seed and a salt, so the
/// same query always sees the same perturbation.
fn keyed_noise(seed: u64, salt: u64, rows: &Tensor, std: f64, width: usize) -> Result<Tensor> {
    let (n, _) = rows.dims2("defense")?;
    let mut data = Vec::with_capacity(n * width);
    for r in 0..n {
        let key = rows
            .row(r)
            .iter()
            .fold(derive_seed_index(seed, salt), |h, v| derive_seed_index(h, v.to_bits()));
        data.extend(Rng::new(key).normal_vec(width, std));
    }
    Tensor::new(&[n, width], data)
}

fn check_std(std: f64) -> Result<()> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(invalid(format!("defense noise std must be finite and >= 0, got {std}")));
    }
    Ok(())
}

/// Gaussian noise on every logits or noise-prediction output.
#[derive(Clone, Debug)]
pub struct LogitsNoise<M> {
    inner: M,
    std: f64,
    seed: u64,
}

/// Wraps `model` so its outputs carry i.i.d. Gaussian noise of `std`.
pub fn defense_logits_noise<M>(model: M, std: f64, seed: u64) -> Result<LogitsNoise<M>> {
    check_std(std)?;
    Ok(LogitsNoise { inner: model, std, seed })
}

impl<M> LogitsNoise<M> {
    fn perturb(&self, g: &mut Graph, out: Var, key_rows: &Tensor, salt: u64) -> Result<Var> {
        if self.std == 0.0 {
            return Ok(out);
        }
        let w = g.shape(out)[1];
        let noise = keyed_noise(self.seed, salt, key_rows, self.std, w)?;
        let nv = g.constant(noise)?;
        g.add(out, nv)
    }
}

impl<M: Classifier> Classifier for LogitsNoise<M> {
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.inner.bind(g)
    }
    fn logits_var(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let out = self.inner.logits_var(g, params, x)?;
        let key = g.value(x).clone();
        self.perturb(g, out, &key, 0)
    }
    fn unit_box_inputs(&self) -> bool {
        self.inner.unit_box_inputs()
    }
}

impl<M: LanguageModel> LanguageModel for LogitsNoise<M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.inner.bind(g)
    }
    fn logits_var(&self, g: &mut Graph, params: &[Var], tokens: &[usize], prompt: Option<Var>) -> Result<Var> {
        let out = self.inner.logits_var(g, params, tokens, prompt)?;
        if self.std == 0.0 {
            return Ok(out);
        }
        // One key per sequence (tokens plus prompt), expanded row by row.
        let mut key = derive_seed(self.seed, "lm-logits");
        for &t in tokens {
            key = derive_seed_index(key, t as u64);
        }
        if let Some(p) = prompt {
            for v in g.value(p).data() {
                key = derive_seed_index(key, v.to_bits());
            }
        }
        let shape = g.shape(out).to_vec();
        let noise = Tensor::new(&shape, Rng::new(key).normal_vec(shape[0] * shape[1], self.std))?;
        let nv = g.constant(noise)?;
        g.add(out, nv)
    }
}

fn time_salted(x: &Tensor, t: &[usize]) -> Result<Tensor> {
    let (n, d) = x.dims2("defense")?;
    let mut data = Vec::with_capacity(n * (d + 1));
    for (r, &ti) in t.iter().enumerate() {
        data.extend_from_slice(x.row(r));
        data.push(ti as f64);
    }
    Tensor::new(&[n, d + 1], data)
}

impl<M: NoiseModel> NoiseModel for LogitsNoise<M> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn schedule(&self) -> &DiffusionSchedule {
        self.inner.schedule()
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.inner.bind(g)
    }
    fn eps_var(&self, g: &mut Graph, params: &[Var], x: Var, t: &[usize]) -> Result<Var> {
        let out = self.inner.eps_var(g, params, x, t)?;
        let key = time_salted(g.value(x), t)?;
        self.perturb(g, out, &key, 1)
    }
}

/// Gaussian noise on the inputs before the model sees them, clamped back
/// to the unit box where the model requires it.
#[derive(Clone, Debug)]
pub struct InputSmoothing<M> {
    inner: M,
    std: f64,
    seed: u64,
}

pub fn defense_input_smoothing<M>(model: M, std: f64, seed: u64) -> Result<InputSmoothing<M>> {
    check_std(std)?;
    Ok(InputSmoothing { inner: model, std, seed })
}

impl<M> InputSmoothing<M> {
    fn smooth(&self, g: &mut Graph, x: Var, unit_box: bool) -> Result<Var> {
        if self.std == 0.0 {
            return Ok(x);
        }
        let xv = g.value(x).clone();
        let noise = keyed_noise(self.seed, 2, &xv, self.std, xv.shape()[1])?;
        let nv = g.constant(noise)?;
        let s = g.add(x, nv)?;
        if unit_box {
            g.clamp(s, 0.0, 1.0)
        } else {
            Ok(s)
        }
    }
}

impl<M: Classifier> Classifier for InputSmoothing<M> {
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.inner.bind(g)
    }
    fn logits_var(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let xs = self.smooth(g, x, self.inner.unit_box_inputs())?;
        self.inner.logits_var(g, params, xs)
    }
    fn unit_box_inputs(&self) -> bool {
        self.inner.unit_box_inputs()
    }
}

impl<M: NoiseModel> NoiseModel for InputSmoothing<M> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn schedule(&self) -> &DiffusionSchedule {
        self.inner.schedule()
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.inner.bind(g)
    }
    fn eps_var(&self, g: &mut Graph, params: &[Var], x: Var, t: &[usize]) -> Result<Var> {
        let xs = self.smooth(g, x, true)?;
        self.inner.eps_var(g, params, xs, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, DiffusionConfig, EpsMlpDiffusion, MlpClassifier};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    pub(crate) fn samples(members: &[f64], nonmembers: &[f64]) -> Vec<ScoredSample> {
        members
            .iter()
            .map(|s| (s, true))
            .chain(nonmembers.iter().map(|s| (s, false)))
            .enumerate()
            .map(|(id, (s, m))| ScoredSample {
                id,
                score: *s,
                is_member: m,
            })
            .collect()
    }

    fn brute_auc(s: &[ScoredSample]) -> f64 {
        let mut twice = 0u128;
        let (mut m, mut n) = (0u128, 0u128);
        for a in s.iter().filter(|x| x.is_member) {
            m += 1;
            n = 0;
            for b in s.iter().filter(|x| !x.is_member) {
                n += 1;
                twice += if a.score > b.score {
                    2
                } else if a.score == b.score {
                    1
                } else {
                    0
                };
            }
        }
        twice as f64 / (2 * m * n) as f64
    }

    fn brute_tpr(s: &[ScoredSample], target: f64) -> f64 {
        let m = s.iter().filter(|x| x.is_member).count() as f64;
        let n = s.iter().filter(|x| !x.is_member).count() as f64;
        let mut thr: Vec<f64> = s.iter().map(|x| x.score).collect();
        thr.push(f64::INFINITY);
        thr.push(f64::NEG_INFINITY);
        let mut best = 0.0f64;
        for t in thr {
            let tp = s.iter().filter(|x| x.is_member && x.score > t).count() as f64;
            let fp = s.iter().filter(|x| !x.is_member && x.score > t).count() as f64;
            if fp / n <= target {
                best = best.max(tp / m);
            }
        }
        best
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&samples(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
        assert_eq!(auc(&samples(&[0.4, 0.4], &[0.4, 0.4])).unwrap(), 0.5);
        assert_eq!(auc(&samples(&[0.9, 0.3], &[0.5, 0.1])).unwrap(), 0.75);
        assert!(auc(&samples(&[0.9], &[])).is_err());
    }

    #[test]
    fn tpr_examples() {
        let perfect = samples(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(tpr_at_fpr(&perfect, 0.01).unwrap().tpr, 1.0);
        let ties = samples(&[1.0; 5], &[1.0; 5]);
        assert_eq!(tpr_at_fpr(&ties, 0.01).unwrap().tpr, 0.0);
        let s = samples(&[5.0, 4.0, 3.0, 2.0], &[3.5, 1.0, 0.5, 0.1]);
        let r = tpr_at_fpr(&s, 0.25).unwrap();
        // Scores above 1 admit every member and only the 3.5 non-member.
        assert_eq!((r.tpr, r.achieved_fpr, r.threshold), (1.0, 0.25, 1.0));
        assert_eq!(r.tpr, brute_tpr(&s, 0.25));
        let tight = tpr_at_fpr(&s, 0.2).unwrap();
        assert_eq!((tight.tpr, tight.achieved_fpr), (0.5, 0.0));
    }

    #[test]
    fn accuracy_and_advantage() {
        let perfect = samples(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(balanced_accuracy(&perfect).unwrap().0, 1.0);
        assert_eq!(format!("{:.2}", 100.0 * advantage(0.7246)), "44.92");
        assert!((advantage(0.7246) - 0.4492).abs() < 1e-15);
        let mut r = Rng::new(1);
        let noise: Vec<f64> = (0..4000).map(|_| r.normal()).collect();
        let s = samples(&noise[..2000], &noise[2000..]);
        assert!(balanced_accuracy(&s).unwrap().0 < 0.55);
    }

    #[test]
    fn roc_shape() {
        let s = samples(&[0.9, 0.3, 0.3], &[0.5, 0.3, 0.1]);
        let c = roc(&s).unwrap();
        assert_eq!(c.points.first().unwrap().fpr, 0.0);
        assert_eq!(c.points.first().unwrap().tpr, 0.0);
        assert_eq!((c.points.last().unwrap().fpr, c.points.last().unwrap().tpr), (1.0, 1.0));
        for w in c.points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            assert!(w[1].threshold < w[0].threshold);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn metric_invariants(seed in 0u64..10_000, n in 2usize..60) {
            let mut r = Rng::new(seed);
            let mut s: Vec<ScoredSample> = (0..n)
                .map(|id| ScoredSample { id, score: (r.normal() * 3.0).round() / 2.0, is_member: r.uniform() < 0.5 })
                .collect();
            s[0].is_member = true;
            s[1].is_member = false;
            let a = auc(&s).unwrap();
            prop_assert_eq!(a, brute_auc(&s));
            let neg: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { score: -x.score, ..*x }).collect();
            prop_assert!((auc(&neg).unwrap() - (1.0 - a)).abs() < 1e-12);
            let mono: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { score: x.score.exp() * 2.0 + 1.0, ..*x }).collect();
            prop_assert_eq!(auc(&mono).unwrap(), a);
            prop_assert_eq!(balanced_accuracy(&mono).unwrap().0, balanced_accuracy(&s).unwrap().0);
            for f in [0.01, 0.1, 0.25, 0.5, 1.0] {
                let t = tpr_at_fpr(&s, f).unwrap().tpr;
                prop_assert_eq!(t, brute_tpr(&s, f));
                prop_assert_eq!(tpr_at_fpr(&mono, f).unwrap().tpr, t);
            }
            let c = roc(&s).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }
    }

    #[test]
    fn grid_errors_and_files() {
        assert!(evaluate_grid(&[], &[0.1], 1).is_err());
        let run = AttackRun {
            attack: "a".into(),
            defense: "none".into(),
            queries: "1".into(),
            delta_id: "zero".into(),
            samples: samples(&[0.9, 0.3], &[0.5, 0.1]),
        };
        assert!(evaluate_grid(&[run.clone(), run.clone()], &[0.1], 1).is_err());
        let reports = evaluate_grid(&[run.clone()], &[0.1, 0.5], 1).unwrap();
        assert_eq!(reports[0].queries, "1");
        let dir = tempfile::tempdir().unwrap();
        write_reports(dir.path(), &[run.clone()], &reports).unwrap();
        let a = std::fs::read(dir.path().join("report.json")).unwrap();
        write_reports(dir.path(), &[run], &reports).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("report.json")).unwrap());
        assert!(dir.path().join("roc/a.csv").exists());
        assert!(dir.path().join("scores/a.csv").exists());
    }

    #[test]
    fn defenses() {
        let m = MlpClassifier::new(&[2, 8, 3], Activation::Relu, &mut Rng::new(1)).unwrap();
        assert!(defense_logits_noise(m.clone(), -1.0, 0).is_err());
        let clean = m.logits(&[0.2, 0.3]).unwrap();
        let z = defense_logits_noise(m.clone(), 0.0, 5).unwrap();
        assert_eq!(z.logits(&[0.2, 0.3]).unwrap(), clean);
        let n = defense_logits_noise(m.clone(), 1.0, 5).unwrap();
        let a = n.logits(&[0.2, 0.3]).unwrap();
        assert_ne!(a, clean);
        assert_eq!(a, n.logits(&[0.2, 0.3]).unwrap());
        let s0 = defense_input_smoothing(m.clone(), 0.0, 5).unwrap();
        assert_eq!(s0.logits(&[0.2, 0.3]).unwrap(), clean);

        let dm = EpsMlpDiffusion::new(DiffusionConfig::default(), &mut Rng::new(1)).unwrap();
        let sm = defense_input_smoothing(dm.clone(), 5.0, 3).unwrap();
        let mut g = Graph::new();
        let p = sm.bind(&mut g).unwrap();
        let x = g.constant(Tensor::full(&[2, 8], 0.5)).unwrap();
        let xs = sm.smooth(&mut g, x, true).unwrap();
        assert!(g.value(xs).data().iter().all(|v| (0.0..=1.0).contains(v)));
        sm.eps_var(&mut g, &p, x, &[3, 3]).unwrap();
        let ln = defense_logits_noise(dm.clone(), 0.5, 3).unwrap();
        assert_ne!(ln.eps(&[0.5; 8], 3).unwrap(), ln.eps(&[0.5; 8], 4).unwrap());
        assert_eq!(ln.eps(&[0.5; 8], 3).unwrap(), ln.eps(&[0.5; 8], 3).unwrap());
    }
}
