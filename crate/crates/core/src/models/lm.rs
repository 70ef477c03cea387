use super::mlp::diverged;
use super::{bind_constants, bind_trainable, check_loss, LanguageModel, Parametrized, TrainHyper, TrainReport};
use crate::data::SeqDataset;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Sgd, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Lower bound on the per-position vocabulary standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    /// Rows of the positional table; bounds the token sequence length.
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_model: 32,
            n_heads: 2,
            d_hidden: 64,
            max_len: 64,
        }
    }
}

const NAMES: [&str; 12] = [
    "tok_emb", "pos_emb", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "w_out", "b_out",
];
const TOK: usize = 0;
const POS: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const W1: usize = 6;
const B1: usize = 7;
const W2: usize = 8;
const B2: usize = 9;
const WOUT: usize = 10;
const BOUT: usize = 11;

/// One pre-activation-free transformer block: causal multi-head attention
/// and a ReLU MLP, each with a residual connection, then a linear read-out.
///
/// Real tokens always occupy positions `0..n` of the positional table. A soft
/// prompt is prepended as raw rows without positional embeddings; being free
/// parameters, any positional offset would be absorbed into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyCausalLm {
    pub config: LmConfig,
    params: Vec<Tensor>,
}

/// Per-position statistics of the vocabulary log-softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenStats {
    /// `log p(t_i | t_<i)`
    pub logp_true: f64,
    /// Mean of the log-softmax over the vocabulary.
    pub mu: f64,
    /// Population standard deviation of the log-softmax, floored at
    /// [`SIGMA_FLOOR`].
    pub sigma: f64,
}

impl TokenStats {
    pub fn z(&self) -> f64 {
        (self.logp_true - self.mu) / self.sigma
    }
}

impl TinyCausalLm {
    pub fn new(config: LmConfig, rng: &mut Rng) -> Result<Self> {
        let LmConfig {
            vocab_size: v,
            d_model: d,
            n_heads,
            d_hidden: h,
            max_len,
        } = config;
        if v < 2 || d == 0 || h == 0 || max_len < 2 || n_heads == 0 || d % n_heads != 0 {
            return Err(invalid(format!("lm: invalid configuration {config:?}")));
        }
        let s = 1.0 / (d as f64).sqrt();
        let params = vec![
            Tensor::randn(&[v, d], 0.5, rng),
            Tensor::randn(&[max_len, d], 0.1, rng),
            Tensor::randn(&[d, d], s, rng),
            Tensor::randn(&[d, d], s, rng),
            Tensor::randn(&[d, d], s, rng),
            Tensor::randn(&[d, d], s, rng),
            Tensor::randn(&[d, h], (2.0 / d as f64).sqrt(), rng),
            Tensor::zeros(&[h]),
            Tensor::randn(&[h, d], 1.0 / (h as f64).sqrt(), rng),
            Tensor::zeros(&[d]),
            Tensor::randn(&[d, v], s, rng),
            Tensor::zeros(&[v]),
        ];
        Ok(Self { config, params })
    }

    /// Applies the block to `n_seg` stacked segments of `seg_len` rows each;
    /// attention never crosses a segment boundary.
    fn block(&self, g: &mut Graph, p: &[Var], x: Var, n_seg: usize, seg_len: usize) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let rows = n_seg * seg_len;
        let q = g.matmul(x, p[WQ])?;
        let k = g.matmul(x, p[WK])?;
        let v = g.matmul(x, p[WV])?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut segs = Vec::with_capacity(n_seg);
        for s in 0..n_seg {
            let (qs, ks, vs) = if n_seg == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 0, s * seg_len, seg_len)?,
                    g.slice(k, 0, s * seg_len, seg_len)?,
                    g.slice(v, 0, s * seg_len, seg_len)?,
                )
            };
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice(qs, 1, hd * dh, dh)?;
                let kh = g.slice(ks, 1, hd * dh, dh)?;
                let vh = g.slice(vs, 1, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let sc = g.matmul(qh, kt)?;
                let sc = g.scale(sc, scale)?;
                let sc = g.causal_mask(sc)?;
                let a = g.softmax(sc)?;
                outs.push(g.matmul(a, vh)?);
            }
            segs.push(if heads == 1 { outs[0] } else { g.concat(&outs, 1)? });
        }
        let att = if n_seg == 1 { segs[0] } else { g.concat(&segs, 0)? };
        let att = g.matmul(att, p[WO])?;
        let x1 = g.add(x, att)?;
        let h = g.matmul(x1, p[W1])?;
        let b1 = g.tile_rows(p[B1], rows)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h)?;
        let m = g.matmul(h, p[W2])?;
        let b2 = g.tile_rows(p[B2], rows)?;
        let m = g.add(m, b2)?;
        let x2 = g.add(x1, m)?;
        let out = g.matmul(x2, p[WOUT])?;
        let bo = g.tile_rows(p[BOUT], rows)?;
        g.add(out, bo)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(invalid(format!(
                "lm: sequence of length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(invalid(format!("lm: token {t} outside vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, p: &[Var], tokens: &[usize], positions: &[usize]) -> Result<Var> {
        let e = g.embedding(p[TOK], tokens)?;
        let pe = g.embedding(p[POS], positions)?;
        g.add(e, pe)
    }

    /// Logits `[B * n, V]` for equal-length sequences stacked in order.
    fn forward_batch(&self, g: &mut Graph, p: &[Var], seqs: &[&[usize]]) -> Result<Var> {
        let n = seqs[0].len();
        let mut toks = Vec::with_capacity(seqs.len() * n);
        let mut pos = Vec::with_capacity(seqs.len() * n);
        for s in seqs {
            if s.len() != n {
                return Err(invalid("lm: batch sequences must share one length"));
            }
            self.check_tokens(s)?;
            toks.extend_from_slice(s);
            pos.extend(0..n);
        }
        let x = self.embed(g, p, &toks, &pos)?;
        self.block(g, p, x, seqs.len(), n)
    }

    /// Mean next-token cross-entropy over the given sequences.
    fn batch_loss(&self, g: &mut Graph, p: &[Var], seqs: &[&[usize]]) -> Result<Var> {
        let v = self.config.vocab_size;
        let n = seqs[0].len();
        let logits = self.forward_batch(g, p, seqs)?;
        let ls = g.log_softmax(logits)?;
        let mut idx = Vec::with_capacity(seqs.len() * (n - 1));
        for (b, s) in seqs.iter().enumerate() {
            for i in 0..n - 1 {
                idx.push((b * n + i) * v + s[i + 1]);
            }
        }
        let picked = g.gather(ls, &idx)?;
        let m = g.mean(picked)?;
        g.neg(m)
    }

    /// Mean next-token cross-entropy per sequence, off-tape.
    pub fn sequence_losses(&self, seqs: &[&[usize]]) -> Result<Vec<f64>> {
        seqs.iter()
            .map(|s| {
                let mut g = Graph::new();
                let p = bind_constants(&mut g, &self.params)?;
                let l = self.batch_loss(&mut g, &p, &[s])?;
                Ok(g.item(l))
            })
            .collect()
    }
}

impl Parametrized for TinyCausalLm {
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

impl LanguageModel for TinyCausalLm {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }
    fn embed_dim(&self) -> usize {
        self.config.d_model
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        bind_constants(g, &self.params)
    }
    fn logits_var(&self, g: &mut Graph, params: &[Var], tokens: &[usize], prompt: Option<Var>) -> Result<Var> {
        if tokens.is_empty() {
            return Err(invalid("lm: empty token sequence"));
        }
        self.check_tokens(tokens)?;
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let e = self.embed(g, params, tokens, &pos)?;
        let (x, len) = match prompt {
            Some(pv) => {
                let ps = g.shape(pv).to_vec();
                if ps.len() != 2 || ps[1] != self.config.d_model {
                    return Err(Error::Shape {
                        op: "lm::prompt",
                        lhs: ps,
                        rhs: vec![self.config.d_model],
                    });
                }
                if ps[0] == 0 {
                    (e, tokens.len())
                } else {
                    (g.concat(&[pv, e], 0)?, ps[0] + tokens.len())
                }
            }
            None => (e, tokens.len()),
        };
        self.block(g, params, x, 1, len)
    }
}

/// Graph nodes `(logp_true, mu, sigma)`, each `[n - 1]`, for the predictions
/// of tokens `1..n`.
pub(crate) fn token_stat_vars(
    g: &mut Graph,
    model: &dyn LanguageModel,
    params: &[Var],
    tokens: &[usize],
    prompt: Option<Var>,
) -> Result<(Var, Var, Var)> {
    let n = tokens.len();
    if n < 2 {
        return Err(invalid(format!("token stats: need at least 2 tokens, got {n}")));
    }
    let l = prompt.map_or(0, |p| g.shape(p)[0]);
    let v = model.vocab_size();
    let logits = model.logits_var(g, params, tokens, prompt)?;
    let rows = g.slice(logits, 0, l, n - 1)?;
    let ls = g.log_softmax(rows)?;
    let idx: Vec<usize> = (0..n - 1).map(|i| i * v + tokens[i + 1]).collect();
    let logp = g.gather(ls, &idx)?;
    let mu = g.mean_rows(ls)?;
    let var = g.var_rows(ls)?;
    let var = g.clamp(var, SIGMA_FLOOR * SIGMA_FLOOR, f64::MAX)?;
    let sigma = g.sqrt(var)?;
    Ok((logp, mu, sigma))
}

/// Per-position log-probability of the true token with the mean and standard
/// deviation of the vocabulary log-softmax. Returns `n - 1` entries (tokens
/// `1..n`) whatever the prompt length.
pub fn lm_token_stats(model: &dyn LanguageModel, tokens: &[usize], prompt: Option<&Tensor>) -> Result<Vec<TokenStats>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let pv = prompt.map(|t| g.constant(t.clone())).transpose()?;
    let (lp, mu, sd) = token_stat_vars(&mut g, model, &p, tokens, pv)?;
    let (lp, mu, sd) = (g.value(lp).data(), g.value(mu).data(), g.value(sd).data());
    Ok((0..lp.len())
        .map(|i| TokenStats {
            logp_true: lp[i],
            mu: mu[i],
            sigma: sd[i],
        })
        .collect())
}

/// Trains with minibatch SGD + momentum on next-token cross-entropy.
pub fn train_lm(
    model: &mut TinyCausalLm,
    data: &SeqDataset,
    train_ids: &[usize],
    test_ids: &[usize],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(invalid("train_lm: empty train or test ids"));
    }
    if let Some(&bad) = train_ids.iter().chain(test_ids).find(|&&i| i >= data.len()) {
        return Err(invalid(format!("train_lm: id {bad} out of range {}", data.len())));
    }
    if data.vocab_size != model.config.vocab_size {
        return Err(invalid("train_lm: model and dataset disagree on vocabulary"));
    }
    if data.seq_len() < 2 {
        return Err(invalid("train_lm: sequences must have at least 2 tokens"));
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
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| data.sequences[i].as_slice()).collect();
            let mut g = Graph::new();
            let p = bind_trainable(&mut g, &model.params)?;
            let loss = model.batch_loss(&mut g, &p, &seqs).map_err(|e| diverged(e, epoch))?;
            check_loss(g.item(loss), epoch)?;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = p.iter().map(|v| grads.get(*v).unwrap()).collect();
            let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
            opt.step(&mut refs, &gs)?;
        }
    }
    let mean_loss = |ids: &[usize]| -> Result<f64> {
        let seqs: Vec<&[usize]> = ids.iter().map(|&i| data.sequences[i].as_slice()).collect();
        let l = model.sequence_losses(&seqs)?;
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    };
    let train_loss = mean_loss(train_ids)?;
    let test_loss = mean_loss(test_ids)?;
    check_loss(train_loss, hyper.epochs)?;
    Ok(TrainReport::new(train_loss, test_loss, hyper.epochs, hyper.seed))
}
