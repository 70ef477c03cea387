use super::mlp::diverged;
use super::{bind_constants, bind_trainable, check_loss, NoiseModel, Parametrized, TrainHyper, TrainReport};
use crate::data::DiffDataset;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Sgd, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Width of the sinusoidal timestep embedding.
pub const TIME_EMBED_DIM: usize = 16;

/// Linear variance schedule. Index 0 is the clean-data convention
/// `alpha_bar[0] = 1`; timesteps run `1..=t_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(t_max: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(invalid("schedule: t_max must be positive"));
        }
        if !(0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(invalid(format!("schedule: need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_t}")));
        }
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            let frac = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
            beta[t] = beta_1 + (beta_t - beta_1) * frac;
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        let s = Self { t_max, beta, alpha_bar };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_bar.len() != self.t_max + 1 || self.alpha_bar[0] != 1.0 {
            return Err(invalid("schedule: alpha_bar must have t_max + 1 entries starting at 1"));
        }
        if self.alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(invalid("schedule: alpha_bar must be strictly decreasing"));
        }
        Ok(())
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(invalid(format!("timestep {t} outside [1, {}]", self.t_max)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub dim: usize,
    pub hidden: usize,
    pub t_max: usize,
    pub beta_1: f64,
    pub beta_t: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            hidden: 64,
            t_max: 100,
            beta_1: 1e-4,
            beta_t: 0.02,
        }
    }
}

/// `[sin(t w_j), cos(t w_j)]` with `w_j = 1000^(-j / 8)`, `j = 0..8`.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for j in 0..half {
        let w = (-(1000f64.ln()) * j as f64 / half as f64).exp();
        out[j] = (t as f64 * w).sin();
        out[half + j] = (t as f64 * w).cos();
    }
    out
}

/// MLP noise predictor `eps(x, t)` over `[x, emb(t)]` with two ReLU layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsMlpDiffusion {
    pub config: DiffusionConfig,
    pub schedule: DiffusionSchedule,
    params: Vec<Tensor>,
}

const NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl EpsMlpDiffusion {
    pub fn new(config: DiffusionConfig, rng: &mut Rng) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 {
            return Err(invalid(format!("diffusion: invalid configuration {config:?}")));
        }
        let schedule = DiffusionSchedule::linear(config.t_max, config.beta_1, config.beta_t)?;
        let (d, h) = (config.dim, config.hidden);
        let din = d + TIME_EMBED_DIM;
        let params = vec![
            Tensor::randn(&[din, h], (2.0 / din as f64).sqrt(), rng),
            Tensor::zeros(&[h]),
            Tensor::randn(&[h, h], (2.0 / h as f64).sqrt(), rng),
            Tensor::zeros(&[h]),
            Tensor::randn(&[h, d], (1.0 / h as f64).sqrt(), rng),
            Tensor::zeros(&[d]),
        ];
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var, t: &[usize]) -> Result<Var> {
        let n = g.shape(x)[0];
        let mut emb = Vec::with_capacity(n * TIME_EMBED_DIM);
        for &ti in t {
            emb.extend_from_slice(&time_embedding(ti));
        }
        let e = g.constant(Tensor::new(&[n, TIME_EMBED_DIM], emb)?)?;
        let h = g.concat(&[x, e], 1)?;
        let mut h = h;
        for l in 0..3 {
            let z = g.matmul(h, p[2 * l])?;
            let b = g.tile_rows(p[2 * l + 1], n)?;
            h = g.add(z, b)?;
            if l < 2 {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Mean `||eps - eps_theta(x_t, t)||^2` over `n_mc` seeded draws of
    /// `(t, eps)` per sample.
    pub fn simple_loss(&self, data: &DiffDataset, ids: &[usize], n_mc: usize, seed: u64) -> Result<f64> {
        let mut rng = Rng::new(seed);
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        let mut eps = Vec::new();
        for &i in ids {
            for _ in 0..n_mc {
                let (t, xt, e) = self.noised(data.point(i), &mut rng);
                xs.extend(xt);
                ts.push(t);
                eps.extend(e);
            }
        }
        let mut g = Graph::new();
        let p = bind_constants(&mut g, &self.params)?;
        let loss = self.loss_on(&mut g, &p, xs, &ts, eps)?;
        Ok(g.item(loss))
    }

    fn noised(&self, x0: &[f64], rng: &mut Rng) -> (usize, Vec<f64>, Vec<f64>) {
        let t = 1 + rng.below(self.schedule.t_max);
        let ab = self.schedule.alpha_bar[t];
        let e = rng.normal_vec(x0.len(), 1.0);
        let xt = x0
            .iter()
            .zip(&e)
            .map(|(x, n)| ab.sqrt() * x + (1.0 - ab).sqrt() * n)
            .collect();
        (t, xt, e)
    }

    fn loss_on(&self, g: &mut Graph, p: &[Var], xs: Vec<f64>, ts: &[usize], eps: Vec<f64>) -> Result<Var> {
        let n = ts.len();
        let d = self.config.dim;
        let x = g.constant(Tensor::new(&[n, d], xs)?)?;
        let e = g.constant(Tensor::new(&[n, d], eps)?)?;
        let pred = self.forward(g, p, x, ts)?;
        let diff = g.sub(pred, e)?;
        let sq = g.square(diff)?;
        let s = g.sum(sq)?;
        g.scale(s, 1.0 / n as f64)
    }
}

impl Parametrized for EpsMlpDiffusion {
    fn param_names(&self) -> Vec<String> {
        NAMES.iter().map(|s| s.to_string()).collect()
    }
    fn params(&self) -> &[Tensor] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl NoiseModel for EpsMlpDiffusion {
    fn input_dim(&self) -> usize {
        self.config.dim
    }
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        bind_constants(g, &self.params)
    }
    fn eps_var(&self, g: &mut Graph, params: &[Var], x: Var, t: &[usize]) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.dim || shape[0] != t.len() {
            return Err(Error::Shape {
                op: "diffusion::eps",
                lhs: shape,
                rhs: vec![t.len(), self.config.dim],
            });
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti > self.schedule.t_max) {
            return Err(invalid(format!("timestep {bad} outside [0, {}]", self.schedule.t_max)));
        }
        self.forward(g, params, x, t)
    }
}

/// `sqrt(ab) x + sqrt(1 - ab) eps0` on the tape, where `eps0` is the model's
/// own noise estimate at `t = 0`. Returns `(x_t, eps0)`.
pub(crate) fn one_step_var(
    g: &mut Graph,
    model: &dyn NoiseModel,
    params: &[Var],
    x: Var,
    alpha_bar: f64,
) -> Result<(Var, Var)> {
    let n = g.shape(x)[0];
    let eps0 = model.eps_var(g, params, x, &vec![0; n])?;
    let a = g.scale(x, alpha_bar.sqrt())?;
    let b = g.scale(eps0, (1.0 - alpha_bar).sqrt())?;
    Ok((g.add(a, b)?, eps0))
}

/// Deterministic single-step forward from `x_tilde` to timestep `t`.
pub fn ddim_one_step_forward(model: &dyn NoiseModel, x_tilde: &[f64], t: usize) -> Result<Vec<f64>> {
    model.schedule().check_t(t)?;
    ddim_forward_with_alpha(model, x_tilde, model.schedule().alpha_bar[t])
}

/// The single-step forward map for an explicit `alpha_bar` in `[0, 1]`.
pub fn ddim_forward_with_alpha(model: &dyn NoiseModel, x_tilde: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    if x_tilde.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("ddim forward: inputs must lie in [0, 1]"));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let x = g.constant(Tensor::new(&[1, x_tilde.len()], x_tilde.to_vec())?)?;
    let (xt, _) = one_step_var(&mut g, model, &p, x, alpha_bar)?;
    Ok(g.value(xt).data().to_vec())
}

/// Trains with SGD + momentum on the simple noise-prediction loss, drawing a
/// fresh `(t, eps)` per sample per epoch.
pub fn train_diffusion(
    model: &mut EpsMlpDiffusion,
    data: &DiffDataset,
    train_ids: &[usize],
    test_ids: &[usize],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(invalid("train_diffusion: empty train or test ids"));
    }
    if let Some(&bad) = train_ids.iter().chain(test_ids).find(|&&i| i >= data.len()) {
        return Err(invalid(format!("train_diffusion: id {bad} out of range {}", data.len())));
    }
    if data.dim() != model.config.dim {
        return Err(invalid("train_diffusion: model and dataset disagree on dimension"));
    }
    let mut rng = Rng::new(hyper.seed);
    let mut opt = Sgd::new(hyper.lr, hyper.momentum);
    let batch = if hyper.batch_size == 0 {
        train_ids.len()
    } else {
        hyper.batch_size.min(train_ids.len())
    };
    let mut order = train_ids.to_vec();
    for epoch in 0..hyper.epochs {
        if batch < order.len() {
            rng.shuffle(&mut order);
        }
        for chunk in order.chunks(batch) {
            let mut xs = Vec::with_capacity(chunk.len() * model.config.dim);
            let mut ts = Vec::with_capacity(chunk.len());
            let mut eps = Vec::with_capacity(chunk.len() * model.config.dim);
            for &i in chunk {
                let (t, xt, e) = model.noised(data.point(i), &mut rng);
                xs.extend(xt);
                ts.push(t);
                eps.extend(e);
            }
            let mut g = Graph::new();
            let p = bind_trainable(&mut g, &model.params)?;
            let loss = model.loss_on(&mut g, &p, xs, &ts, eps).map_err(|e| diverged(e, epoch))?;
            check_loss(g.item(loss), epoch)?;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = p.iter().map(|v| grads.get(*v).unwrap()).collect();
            let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
            opt.step(&mut refs, &gs)?;
        }
    }
    let eval_seed = crate::rng::derive_seed(hyper.seed, "rho");
    let train_loss = model.simple_loss(data, train_ids, 16, eval_seed)?;
    let test_loss = model.simple_loss(data, test_ids, 16, eval_seed)?;
    check_loss(train_loss, hyper.epochs)?;
    Ok(TrainReport::new(train_loss, test_loss, hyper.epochs, hyper.seed))
}
