use super::{bind_constants, bind_trainable, check_loss, cross_entropy, Classifier, Parametrized, TrainHyper, TrainReport};
use crate::data::ClsDataset;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Sgd, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected classifier `d -> h_1 -> ... -> K`. With a single layer it
/// is the linear-softmax model `f(x) = W x + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub widths: Vec<usize>,
    pub activation: Activation,
    params: Vec<Tensor>,
}

impl MlpClassifier {
    /// He (relu) or Xavier (tanh) initialisation, zero biases.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(invalid(format!("mlp: need at least input and output widths, got {widths:?}")));
        }
        let mut params = Vec::new();
        for w in widths.windows(2) {
            let std = match activation {
                Activation::Relu => (2.0 / w[0] as f64).sqrt(),
                Activation::Tanh => (1.0 / w[0] as f64).sqrt(),
            };
            params.push(Tensor::randn(&[w[0], w[1]], std, rng));
            params.push(Tensor::zeros(&[w[1]]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params,
        })
    }

    /// Builds a model from explicit parameters `[W_1, b_1, ..., W_L, b_L]`.
    pub fn from_params(widths: &[usize], activation: Activation, params: Vec<Tensor>) -> Result<Self> {
        let mut m = Self::new(widths, activation, &mut Rng::new(0))?;
        if params.len() != m.params.len() {
            return Err(invalid(format!("mlp: expected {} tensors, got {}", m.params.len(), params.len())));
        }
        for (slot, p) in m.params.iter_mut().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "mlp::from_params",
                    lhs: slot.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            *slot = p;
        }
        Ok(m)
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let layers = self.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let z = g.matmul(h, p[2 * l])?;
            let b = g.tile_rows(p[2 * l + 1], n)?;
            h = g.add(z, b)?;
            if l + 1 < layers {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Mean cross-entropy and accuracy on the given ids, off-tape.
    pub fn evaluate(&self, data: &ClsDataset, ids: &[usize]) -> Result<(f64, f64)> {
        if ids.is_empty() {
            return Err(invalid("mlp: evaluate on an empty id set"));
        }
        let mut g = Graph::new();
        let p = bind_constants(&mut g, &self.params)?;
        let x = g.constant(data.points.select_rows(ids)?)?;
        let logits = self.forward(&mut g, &p, x)?;
        let y: Vec<usize> = ids.iter().map(|&i| data.labels[i]).collect();
        let loss = cross_entropy(&mut g, logits, &y)?;
        let lv = g.value(logits);
        let correct = (0..ids.len())
            .filter(|&i| argmax(lv.row(i)) == y[i])
            .count();
        Ok((g.item(loss), correct as f64 / ids.len() as f64))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Parametrized for MlpClassifier {
    fn param_names(&self) -> Vec<String> {
        (0..self.widths.len() - 1)
            .flat_map(|l| [format!("w{l}"), format!("b{l}")])
            .collect()
    }
    fn params(&self) -> &[Tensor] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl Classifier for MlpClassifier {
    fn n_classes(&self) -> usize {
        *self.widths.last().unwrap()
    }
    fn input_dim(&self) -> usize {
        self.widths[0]
    }
    fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        bind_constants(g, &self.params)
    }
    fn logits_var(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.widths[0] {
            return Err(Error::Shape {
                op: "mlp::logits",
                lhs: shape,
                rhs: vec![self.widths[0]],
            });
        }
        self.forward(g, params, x)
    }
}

/// Trains with SGD + momentum on cross-entropy over `train_ids`, reporting
/// the overfitting ratio against `test_ids`.
pub fn train_classifier(
    model: &mut MlpClassifier,
    data: &ClsDataset,
    train_ids: &[usize],
    test_ids: &[usize],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(invalid("train_classifier: empty train or test ids"));
    }
    if let Some(&bad) = train_ids.iter().chain(test_ids).find(|&&i| i >= data.len()) {
        return Err(invalid(format!("train_classifier: id {bad} out of range {}", data.len())));
    }
    if data.n_classes != model.n_classes() || data.dim() != model.input_dim() {
        return Err(invalid("train_classifier: model and dataset disagree on dimensions"));
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
            let mut g = Graph::new();
            let p = bind_trainable(&mut g, &model.params)?;
            let x = g.constant(data.points.select_rows(chunk)?)?;
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let loss = model
                .forward(&mut g, &p, x)
                .and_then(|l| cross_entropy(&mut g, l, &y))
                .map_err(|e| diverged(e, epoch))?;
            check_loss(g.item(loss), epoch)?;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = p.iter().map(|v| grads.get(*v).unwrap()).collect();
            let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
            opt.step(&mut refs, &gs)?;
        }
    }
    let (train_loss, train_acc) = model.evaluate(data, train_ids)?;
    let (test_loss, _) = model.evaluate(data, test_ids)?;
    check_loss(train_loss, hyper.epochs)?;
    let mut report = TrainReport::new(train_loss, test_loss, hyper.epochs, hyper.seed);
    report.train_accuracy = Some(train_acc);
    Ok(report)
}

pub(crate) fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
        e => e,
    }
}
