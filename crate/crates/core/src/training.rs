//! Weighted cross-entropy with an ignore class, Adam, and the training loop
//! with best-validation-AUC checkpoint selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::Model;
use crate::nn::{Tape, Tensor, Var};
use crate::raster::UNCERTAIN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub positive_weight: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            positive_weight: 3.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("positive_weight", self.positive_weight),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size and eval_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss value and its gradient with respect to each logit.
///
/// `loss = -(1/V) Σ_valid [w·y·log σ(z) + (1-y)·log(1-σ(z))]` where `V` counts
/// labels other than -1. Uses `log σ(z) = -softplus(-z)` and
/// `log(1-σ(z)) = -softplus(z)`. With no valid pixel the loss and gradient are
/// zero.
pub fn weighted_bce_with_grad(logits: &[f64], labels: &[i8], w_pos: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let valid = labels.iter().filter(|&&y| y != UNCERTAIN).count();
    let mut grad = vec![0.0; logits.len()];
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / valid as f64;
    let mut total = 0.0;
    for ((g, &z), &y) in grad.iter_mut().zip(logits).zip(labels) {
        match y {
            1 => {
                total += w_pos * softplus(-z);
                *g = -w_pos * crate::nn::sigmoid(-z) * scale;
            }
            0 => {
                total += softplus(z);
                *g = crate::nn::sigmoid(z) * scale;
            }
            _ => {}
        }
    }
    Ok((total * scale, grad))
}

/// Records the weighted BCE of `logits` (`[N, 1, H, W]`) against `labels`
/// (`N*H*W` values in {-1, 0, 1}) as a scalar on the tape.
pub fn weighted_bce(tape: &mut Tape, logits: Var, labels: &[i8], w_pos: f64) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape(format!("logits must be [N, 1, H, W], got {shape:?}")));
    }
    let (loss, grad) = weighted_bce_with_grad(tape.value(logits).data(), labels, w_pos)?;
    tape.linearized_scalar(logits, loss, grad)
}

/// Adam first/second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[(String, Tensor)]) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    params: &mut [(String, Tensor)],
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        match g {
            None => return Err(Error::MissingGradient(name.clone())),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let g = g.as_ref().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((w, &gj), mj), vj) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Forward, loss and backward on one batch; returns the loss and gradients in
/// parameter order.
pub fn loss_and_grads(model: &Model, input: &Tensor, labels: &[i8], w_pos: f64) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, input, true)?;
    let loss = weighted_bce(&mut tape, fwd.logits, labels, w_pos)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item().expect("scalar loss");
    Ok((value, fwd.params.iter().map(|&p| tape.grad(p)).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when validation was skipped this epoch or its AUC is undefined.
    pub val_auc: Option<f64>,
    pub is_best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    /// Parameters at the best validation AUC, or the final ones if no epoch
    /// produced a defined AUC.
    pub best_params: Vec<(String, Tensor)>,
    pub optimizer_steps: u64,
}

impl TrainReport {
    /// CSV with header `epoch,train_loss,val_auc,is_best`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_auc,is_best")?;
        for r in &self.history {
            let auc = r.val_auc.map_or_else(|| "nan".to_string(), |a| format!("{a:.10}"));
            writeln!(out, "{},{:.10},{},{}", r.epoch, r.train_loss, auc, r.is_best as u8)?;
        }
        Ok(())
    }
}

/// Index of the first maximum among defined values.
pub fn select_best(aucs: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in aucs.iter().enumerate() {
        if let Some(a) = *a {
            if a.is_finite() && best.is_none_or(|(_, b)| a > b) {
                best = Some((i, a));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Trains `model` in place and returns the history plus the best checkpoint.
/// The model is left holding the final-epoch parameters.
pub fn train(model: &mut Model, train_data: &Dataset, val_data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, train_data, val_data, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut Model,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    train_data.check_model(model)?;
    if !val_data.is_empty() {
        val_data.check_model(model)?;
    }

    let mut params: Vec<(String, Tensor)> = model.parameters().to_vec();
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<(String, Tensor)>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (input, labels) = train_data.batch(batch)?;
            let (loss, grads) = loss_and_grads(model, &input, &labels, cfg.positive_weight)?;
            adam_step(&mut params, &grads, &mut state, cfg)?;
            model.set_parameters(params.clone())?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_data.len() as f64;

        let val_auc = if epoch % cfg.eval_every == 0 && !val_data.is_empty() {
            validation_auc(model, val_data)?
        } else {
            None
        };
        let is_best = match (val_auc, &best) {
            (Some(a), None) => a.is_finite(),
            (Some(a), Some((_, b, _))) => a > *b,
            _ => false,
        };
        if is_best {
            best = Some((epoch, val_auc.expect("best implies defined"), params.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_auc,
            is_best,
        };
        log::info!(
            "epoch {epoch}: loss {train_loss:.6} val_auc {}",
            val_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        on_epoch(&record);
        history.push(record);
    }

    let (best_epoch, best_val_auc, best_params) = match best {
        Some((e, a, p)) => (Some(e), Some(a), p),
        None => (None, None, params),
    };
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_auc,
        best_params,
        optimizer_steps: state.step,
    })
}

fn validation_auc(model: &Model, data: &Dataset) -> Result<Option<f64>> {
    let (scores, labels) = metrics::pooled_scores(model, data)?;
    match metrics::roc_auc(&scores, &labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedAuc { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_is_two_ln2() {
        let (loss, _) = weighted_bce_with_grad(&[0.0, 0.0], &[1, 0], 3.0).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn all_uncertain_is_zero() {
        let (loss, grad) = weighted_bce_with_grad(&[1.0, -3.0, 0.5], &[-1, -1, -1], 3.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unit_weight_matches_plain_bce() {
        let z = [-2.0, 0.3, 1.7, 4.0];
        let y = [0i8, 1, -1, 1];
        let (loss, _) = weighted_bce_with_grad(&z, &y, 1.0).unwrap();
        let p = |v: f64| 1.0 / (1.0 + (-v).exp());
        let plain = -((1.0 - p(-2.0)).ln() + p(0.3).ln() + p(4.0).ln()) / 3.0;
        assert!((loss - plain).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let (loss, grad) = weighted_bce_with_grad(&[800.0, -800.0], &[0, 1], 3.0).unwrap();
        assert!((loss - (800.0 + 3.0 * 800.0) / 2.0).abs() < 1e-9);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(weighted_bce_with_grad(&[0.0], &[1, 0], 1.0).is_err());
    }

    fn one_param(v: Vec<f64>) -> Vec<(String, Tensor)> {
        vec![("w".into(), Tensor::new(vec![v.len()], v).unwrap())]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_param(vec![0.5, -1.0]);
        let mut s = OptimizerState::new(&p);
        let g = vec![Some(Tensor::zeros(vec![2]))];
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p, one_param(vec![0.5, -1.0]));
        assert_eq!(s.step, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        for g in [1e-3, 0.7, -42.0] {
            let mut p = one_param(vec![1.0]);
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &[Some(Tensor::full(vec![1], g))], &mut s, &cfg).unwrap();
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
            let expected = 1.0 - cfg.learning_rate * g / (g.abs() + cfg.adam_eps);
            assert!((p[0].1.data()[0] - expected).abs() < 1e-15);
            assert!(((1.0 - p[0].1.data()[0]).abs() - cfg.learning_rate).abs() < 1e-6 * cfg.learning_rate.max(1.0));
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = one_param(vec![1.0]);
        let mut s = OptimizerState::new(&p);
        let err = adam_step(&mut p, &[None], &mut s, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(name) if name == "w"));
    }

    #[test]
    fn best_is_first_argmax() {
        assert_eq!(select_best(&[Some(0.6), Some(0.9), Some(0.7)]), Some(1));
        assert_eq!(select_best(&[None, Some(0.5), Some(0.5)]), Some(1));
        assert_eq!(select_best(&[None, None]), None);
    }
}
