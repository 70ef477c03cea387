//! Target, shadow and reference models for the three families.
//!
//! Each family exposes an attack-side trait ([`Classifier`],
//! [`LanguageModel`], [`NoiseModel`]) that binds the parameters into a
//! [`Graph`] as constants, so input and pattern gradients flow while parameter
//! gradients are never allocated. Training is the only code path that binds
//! parameters as differentiable leaves, and it only accepts unfrozen models.

mod checkpoint;
mod diffusion;
mod lm;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use diffusion::{
    ddim_one_step_forward, time_embedding, train_diffusion, DiffusionConfig, DiffusionSchedule, EpsMlpDiffusion,
    TIME_EMBED_DIM,
};
pub use lm::{lm_token_stats, train_lm, LmConfig, TinyCausalLm, TokenStats, SIGMA_FLOOR};
pub use mlp::{train_classifier, Activation, MlpClassifier};
pub(crate) use diffusion::one_step_var;
pub(crate) use lm::token_stat_vars;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::ops::Deref;
use std::sync::Arc;

/// Optimiser settings for model training (SGD with momentum).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainHyper {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            momentum: 0.9,
            batch_size: 0,
            seed,
        }
    }
}

/// Summary of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: f64,
    pub test_loss: f64,
    /// Overfitting ratio `test_loss / train_loss`.
    pub rho: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Classification accuracy on the training ids (classifier family only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

impl TrainReport {
    pub(crate) fn new(train_loss: f64, test_loss: f64, epochs: usize, seed: u64) -> Self {
        Self {
            train_loss,
            test_loss,
            rho: test_loss / train_loss.max(1e-300),
            epochs,
            seed,
            train_accuracy: None,
        }
    }
}

/// A model whose parameters are a flat list of named tensors.
pub trait Parametrized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
}

/// Binds parameters into `g` as constants.
pub fn bind_constants(g: &mut Graph, params: &[Tensor]) -> Result<Vec<Var>> {
    params.iter().map(|p| g.constant(p.clone())).collect()
}

pub(crate) fn bind_trainable(g: &mut Graph, params: &[Tensor]) -> Result<Vec<Var>> {
    params.iter().map(|p| g.param(p.clone())).collect()
}

/// Attack-side view of a K-way classifier.
pub trait Classifier: Send + Sync {
    fn n_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Parameters as graph constants.
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>>;
    /// Logits `[n, K]` for inputs `x: [n, d]`.
    fn logits_var(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var>;

    /// Logits of a single point, off-tape.
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let xv = g.constant(Tensor::new(&[1, x.len()], x.to_vec())?)?;
        let out = self.logits_var(&mut g, &p, xv)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Whether inputs are confined to the unit box.
    fn unit_box_inputs(&self) -> bool {
        false
    }
}

/// Attack-side view of a causal language model.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>>;
    /// Logits `[L + n, V]` for an optional `[L, d]` soft prompt followed by
    /// the embeddings of `tokens`.
    fn logits_var(&self, g: &mut Graph, params: &[Var], tokens: &[usize], prompt: Option<Var>) -> Result<Var>;
}

/// Attack-side view of a noise-prediction diffusion model.
pub trait NoiseModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn schedule(&self) -> &DiffusionSchedule;
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>>;
    /// Predicted noise `[n, d]` for inputs `x: [n, d]` at per-row timesteps.
    fn eps_var(&self, g: &mut Graph, params: &[Var], x: Var, t: &[usize]) -> Result<Var>;

    /// Predicted noise for one point, off-tape.
    fn eps(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let xv = g.constant(Tensor::new(&[1, x.len()], x.to_vec())?)?;
        let out = self.eps_var(&mut g, &p, xv, &[t])?;
        Ok(g.value(out).data().to_vec())
    }
}

/// A model with immutable parameters, cheap to clone and share across
/// threads.
#[derive(Debug)]
pub struct Frozen<M>(Arc<M>);

impl<M> Clone for Frozen<M> {
    fn clone(&self) -> Self {
        Self(Arc::clone(&self.0))
    }
}

/// Freezes a trained model.
pub fn freeze<M>(model: M) -> Frozen<M> {
    Frozen(Arc::new(model))
}

impl<M> Frozen<M> {
    /// Freezing a frozen model is a no-op.
    pub fn freeze(self) -> Self {
        self
    }

    pub fn inner(&self) -> &M {
        &self.0
    }
}

impl<M: Parametrized> Frozen<M> {
    /// Always fails: frozen parameters cannot change.
    pub fn update_params(&self, _deltas: &[Tensor]) -> Result<()> {
        Err(Error::Frozen)
    }

    /// A bit-exact copy of every parameter, for before/after comparisons.
    pub fn snapshot(&self) -> Vec<Vec<u64>> {
        self.0
            .params()
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }
}

impl<M> Deref for Frozen<M> {
    type Target = M;
    fn deref(&self) -> &M {
        &self.0
    }
}

impl<M: Classifier> Classifier for Frozen<M> {
    fn n_classes(&self) -> usize {
        self.0.n_classes()
    }
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.0.bind(g)
    }
    fn logits_var(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        self.0.logits_var(g, params, x)
    }
    fn unit_box_inputs(&self) -> bool {
        self.0.unit_box_inputs()
    }
}

impl<M: LanguageModel> LanguageModel for Frozen<M> {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }
    fn embed_dim(&self) -> usize {
        self.0.embed_dim()
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.0.bind(g)
    }
    fn logits_var(&self, g: &mut Graph, params: &[Var], tokens: &[usize], prompt: Option<Var>) -> Result<Var> {
        self.0.logits_var(g, params, tokens, prompt)
    }
}

impl<M: NoiseModel> NoiseModel for Frozen<M> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn schedule(&self) -> &DiffusionSchedule {
        self.0.schedule()
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.0.bind(g)
    }
    fn eps_var(&self, g: &mut Graph, params: &[Var], x: Var, t: &[usize]) -> Result<Var> {
        self.0.eps_var(g, params, x, t)
    }
}

/// Mean cross-entropy of rows of `logits: [n, K]` against `targets`.
pub(crate) fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let k = g.shape(logits)[1];
    let ls = g.log_softmax(logits)?;
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    let picked = g.gather(ls, &idx)?;
    let m = g.mean(picked)?;
    g.neg(m)
}

pub(crate) fn check_loss(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}
