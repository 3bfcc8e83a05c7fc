//! SGD-with-momentum training, checkpoints and gradient checking.

pub mod checkpoint;
pub mod gradcheck;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Grid, ImageSample};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, combined_loss_grad};
use crate::metrics::{binarize, confusion, hard_dice, DEFAULT_THRESHOLD};
use crate::model::{predict_batched, split_maps, Model};
use crate::nn::{
    backward, forward, init_parameters, update_running_stats, Mode, NetworkConfig, NetworkGraph,
    ParameterStore,
};
use crate::tensor::{Real, Tensor4};

pub use checkpoint::{load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectBest {
    LastEpoch,
    BestValDice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub use_dice_loss: bool,
    #[serde(default = "default_select")]
    pub select_best_on: SelectBest,
}

fn default_lr() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    300
}
fn default_batch_size() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_select() -> SelectBest {
    SelectBest::BestValDice
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            momentum: default_momentum(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            use_dice_loss: true,
            select_best_on: default_select(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (batch norm)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch curves. Validation columns are empty when no validation set was given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_dice: Vec<f64>,
    /// 0-based epoch whose parameters were returned.
    pub selected_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

/// Network inputs and float masks for a set of examples.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub ids: Vec<String>,
    /// `(n, c, h, w)`.
    pub inputs: Tensor4<f32>,
    /// `(n, 1, h, w)`, values 0 or 1.
    pub masks: Tensor4<f32>,
}

impl TrainSet {
    /// One-channel inputs from grayscale samples.
    pub fn from_samples(samples: &[ImageSample]) -> Result<Self> {
        let refs: Vec<&ImageSample> = samples.iter().collect();
        let inputs = crate::data::image_batch(&refs)?;
        Self::with_inputs(samples, inputs)
    }

    /// Pairs prepared `(n, c, h, w)` inputs with the samples' masks.
    pub fn with_inputs(samples: &[ImageSample], inputs: Tensor4<f32>) -> Result<Self> {
        if inputs.batch() != samples.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} samples",
                inputs.batch(),
                samples.len()
            )));
        }
        let (h, w) = (inputs.height(), inputs.width());
        let mut masks = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if s.mask.dims() != (h, w) {
                return Err(Error::Shape(format!("{}: mask size differs from input", s.id)));
            }
            masks.extend(s.mask.data().iter().map(|&m| m as f32));
        }
        Ok(TrainSet {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            masks: Tensor4::from_vec([samples.len(), 1, h, w], masks)?,
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        let x: Vec<_> = idx.iter().map(|&i| self.inputs.item(i)).collect();
        let y: Vec<_> = idx.iter().map(|&i| self.masks.item(i)).collect();
        Ok((Tensor4::stack(&x)?, Tensor4::stack(&y)?))
    }

    pub(crate) fn mask_grid(&self, i: usize) -> Grid<u8> {
        let m = self.masks.item(i);
        Grid::new(
            m.height(),
            m.width(),
            m.data().iter().map(|&v| u8::from(v > 0.5)).collect(),
        )
        .expect("mask plane")
    }
}

/// `v ← μ·v + g; w ← w − lr·v` for every parameter that has a gradient.
pub fn sgd_momentum_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &ParameterStore<T>,
    velocity: &mut ParameterStore<T>,
    lr: T,
    mu: T,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let v = velocity
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("no velocity for {name}")))?;
        if v.dims != g.dims {
            return Err(Error::Shape(format!(
                "{name}: velocity {:?} vs gradient {:?}",
                v.dims, g.dims
            )));
        }
        let w = params
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("no parameter {name}")))?;
        if w.dims != g.dims {
            return Err(Error::Shape(format!(
                "{name}: parameter {:?} vs gradient {:?}",
                w.dims, g.dims
            )));
        }
        for ((w, v), g) in w.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            *v = mu * *v + *g;
            *w = *w - lr * *v;
        }
    }
    Ok(())
}

/// Eval-mode loss and mean per-image hard Dice over a set.
pub fn evaluate_set(
    graph: &NetworkGraph,
    params: &ParameterStore<f32>,
    set: &TrainSet,
    use_dice: bool,
) -> Result<(f64, f64)> {
    let probs = predict_batched(graph, params, &set.inputs)?;
    let loss = combined_loss(&probs, &set.masks, use_dice)?;
    let maps = split_maps(probs);
    let mut dice = 0.0;
    for (i, p) in maps.iter().enumerate() {
        dice += hard_dice(&confusion(&binarize(p, DEFAULT_THRESHOLD), &set.mask_grid(i))?);
    }
    Ok((loss, dice / set.len() as f64))
}

/// Seeds for the independent random streams of one training run.
fn init_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED_1417
}

/// Trains a freshly initialized network.
///
/// Each epoch shuffles the training set, runs mini-batches (a trailing batch
/// of fewer than two items is dropped), and evaluates on `val` in eval mode.
pub fn train(
    config: &NetworkConfig,
    train_set: &TrainSet,
    val: Option<&TrainSet>,
    tc: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    tc.validate()?;
    let graph = crate::nn::build_network(config)?;
    let params = init_parameters(&graph, init_seed(tc.seed));
    let (params, history) = train_graph(&graph, params, train_set, val, tc)?;
    Ok((
        Model {
            config: config.clone(),
            graph,
            params,
        },
        history,
    ))
}

/// Training loop over an already-initialized parameter store.
pub fn train_graph(
    graph: &NetworkGraph,
    mut params: ParameterStore<f32>,
    train_set: &TrainSet,
    val: Option<&TrainSet>,
    tc: &TrainConfig,
) -> Result<(ParameterStore<f32>, TrainHistory)> {
    tc.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 samples, got {}",
            train_set.len()
        )));
    }
    let val = val.filter(|v| !v.is_empty());
    let [_, c, h, w] = train_set.inputs.dims();
    if [c, h, w] != graph.input_shape() {
        return Err(Error::Shape(format!(
            "training inputs {:?} do not match network input {:?}",
            [c, h, w],
            graph.input_shape()
        )));
    }

    let mut velocity = ParameterStore::new();
    for spec in graph.params().iter().filter(|p| p.role.trainable()) {
        velocity.insert(spec.name.clone(), crate::nn::ParamTensor::zeros(spec.dims.clone()))?;
    }
    let lr = tc.learning_rate as f32;
    let mu = tc.momentum as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParameterStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let (x, y) = train_set.gather(idx)?;
            let numeric = |what: &str| {
                Error::Numeric(format!("{what} at epoch {} batch {}", epoch + 1, b + 1))
            };
            let pass = forward(graph, &params, &x, Mode::Train)
                .map_err(|e| match e {
                    Error::Numeric(m) => numeric(&m),
                    other => other,
                })?;
            let lg = combined_loss_grad(pass.output(), &y, tc.use_dice_loss)?;
            if !lg.loss.is_finite() {
                return Err(numeric("non-finite loss"));
            }
            let grads = backward(graph, &params, &pass, &lg.grad)?;
            if grads.params.iter().any(|(_, g)| g.data.iter().any(|v| !v.is_finite())) {
                return Err(numeric("non-finite gradient"));
            }
            update_running_stats(graph, &mut params, &pass)?;
            sgd_momentum_step(&mut params, &grads.params, &mut velocity, lr, mu)?;
            loss_sum += lg.loss;
            batches += 1;
        }
        history.train_loss.push(loss_sum / batches as f64);

        if let Some(v) = val {
            let at_epoch = |m: String| Error::Numeric(format!("{m} during validation at epoch {}", epoch + 1));
            let (vl, vd) = evaluate_set(graph, &params, v, tc.use_dice_loss).map_err(|e| match e {
                Error::Numeric(m) => at_epoch(m),
                other => other,
            })?;
            if !vl.is_finite() {
                return Err(at_epoch("non-finite loss".into()));
            }
            history.val_loss.push(vl);
            history.val_dice.push(vd);
            if tc.select_best_on == SelectBest::BestValDice
                && best.as_ref().is_none_or(|(d, _)| vd > *d)
            {
                best = Some((vd, params.clone()));
                history.selected_epoch = epoch;
            }
        }
        log::info!(
            "epoch {:>4}  train_loss {:.5}{}",
            epoch + 1,
            history.train_loss[epoch],
            history
                .val_dice
                .last()
                .map(|d| format!("  val_loss {:.5}  val_dice {d:.4}", history.val_loss[epoch]))
                .unwrap_or_default()
        );
    }

    match best {
        Some((_, p)) => Ok((p, history)),
        None => {
            history.selected_epoch = tc.epochs - 1;
            Ok((params, history))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamTensor;

    fn store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", ParamTensor { dims: vec![1], data: vec![v] }).unwrap();
        s
    }

    #[test]
    fn plain_descent_when_momentum_zero() {
        let mut p = store(1.0);
        let mut v = store(0.0);
        sgd_momentum_step(&mut p, &store(2.0), &mut v, 0.1, 0.0).unwrap();
        assert!((p.get("w").unwrap().data[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = store(0.0);
        let mut v = store(0.0);
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &store(1.0), &mut v, 0.001, 0.9).unwrap();
        }
        assert!((p.get("w").unwrap().data[0] + 0.0029).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(0.25);
        let mut v = store(0.0);
        for _ in 0..10 {
            sgd_momentum_step(&mut p, &store(0.0), &mut v, 0.01, 0.9).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data[0], 0.25);
    }

    #[test]
    fn velocity_matches_geometric_closed_form() {
        let (mu, g) = (0.9f64, 0.37f64);
        let mut p = store(0.0);
        let mut v = store(0.0);
        for n in 1..=50 {
            sgd_momentum_step(&mut p, &store(g), &mut v, 0.001, mu).unwrap();
            let closed = g * (1.0 - mu.powi(n)) / (1.0 - mu);
            assert!((v.get("w").unwrap().data[0] - closed).abs() < 1e-10);
        }
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut p = store(0.0);
        let mut v = ParameterStore::new();
        v.insert("w", ParamTensor { dims: vec![2], data: vec![0.0; 2] }).unwrap();
        assert!(sgd_momentum_step(&mut p, &store(1.0), &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
