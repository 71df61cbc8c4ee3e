//! Loss, Adam, class-balanced sampling, the training loop and evaluation.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, Tensor};
use crate::config::ModelConfig;
use crate::dataset::Dataset;
use crate::encoder::{Mode, ModelRng};
use crate::error::{Error, Result};
use crate::layout::count_trainable_for;
use crate::params::ParamRegistry;
use crate::pipelines::{PairInputs, ParaphraseModel, Pipeline, Prediction};

/// `-ln p[label]`, with `p` clamped below at `1e-12`.
pub fn cross_entropy(probs: &Tensor, label: u8) -> Result<Tensor> {
    if label > 1 {
        return Err(Error::usage(format!("label {label} is not 0 or 1")));
    }
    probs.nll(label as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per registry entry, in registry order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(registry: &ParamRegistry, config: AdamConfig) -> Self {
        let zeros = || registry.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter, followed by
/// zeroing the gradients. Frozen parameters and their moments are untouched.
pub fn adam_step(registry: &ParamRegistry, state: &mut AdamState) -> Result<()> {
    if state.m.len() != registry.len() {
        return Err(Error::Consistency(format!(
            "optimizer tracks {} tensors, registry has {}",
            state.m.len(),
            registry.len()
        )));
    }
    let missing: Vec<&str> = registry
        .iter()
        .filter(|(_, t)| t.requires_grad() && !t.has_grad())
        .map(|(n, _)| n)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Consistency(format!("no gradient for {}", missing.join(", "))));
    }
    state.t += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (_, p)) in registry.iter().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let g = p.grad().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.update(|data| {
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    registry.zero_grad();
    Ok(())
}

/// `n` draws with replacement, each example weighted by the inverse of its
/// class frequency so both classes are drawn equally often on average.
pub fn weighted_sample_indices_with(labels: &[u8], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut counts = [0usize; 2];
    for &l in labels {
        if l > 1 {
            return Err(Error::usage(format!("label {l} is not 0 or 1")));
        }
        counts[l as usize] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::usage(format!(
            "weighted sampling needs both classes, got {} negatives and {} positives",
            counts[0], counts[1]
        )));
    }
    let weights = labels.iter().map(|&l| 1.0 / counts[l as usize] as f64);
    let dist = WeightedIndex::new(weights).map_err(|e| Error::usage(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

pub fn weighted_sample_indices(labels: &[u8], n: usize, seed: u64) -> Result<Vec<usize>> {
    weighted_sample_indices_with(labels, n, &mut ModelRng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[u8], labels: &[u8]) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::usage(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// Zero when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// F1 on the positive class; zero when precision and recall are both zero.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub predictions: Vec<Prediction>,
}

/// Metrics of `model` over pre-encoded inputs, dropout off.
pub fn evaluate_prepared(model: &ParaphraseModel, inputs: &[PairInputs], labels: &[u8]) -> Result<EvalReport> {
    if inputs.is_empty() {
        return Err(Error::usage("cannot evaluate an empty dataset"));
    }
    let predictions = no_grad(|| {
        inputs
            .iter()
            .map(|x| {
                let p = model.forward(x, &mut Mode::eval())?.to_vec();
                Ok(Prediction::from_probs(&p))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let predicted: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let confusion = Confusion::from_predictions(&predicted, labels)?;
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        confusion,
        predictions,
    })
}

pub fn evaluate(pipeline: &Pipeline, dataset: &Dataset) -> Result<EvalReport> {
    let inputs = prepare_all(pipeline, dataset)?;
    evaluate_prepared(&pipeline.model, &inputs, &dataset.labels())
}

pub fn prepare_all(pipeline: &Pipeline, dataset: &Dataset) -> Result<Vec<PairInputs>> {
    dataset
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            pipeline.prepare(p).map_err(|e| match e {
                Error::Input(m) => Error::Input(format!("{} pair {}: {m}", dataset.split(), i + 1)),
                other => other,
            })
        })
        .collect()
}

/// Among the examples system `a` gets wrong, the fraction system `b` gets
/// right. `None` when `a` makes no mistakes.
pub fn error_overlap(preds_a: &[u8], preds_b: &[u8], labels: &[u8]) -> Result<Option<f64>> {
    if preds_a.len() != labels.len() || preds_b.len() != labels.len() {
        return Err(Error::usage(format!(
            "prediction lists of length {} and {} for {} labels",
            preds_a.len(),
            preds_b.len(),
            labels.len()
        )));
    }
    let (mut wrong, mut fixed) = (0usize, 0usize);
    for ((&a, &b), &y) in preds_a.iter().zip(preds_b).zip(labels) {
        if a != y {
            wrong += 1;
            fixed += (b == y) as usize;
        }
    }
    Ok((wrong > 0).then(|| fixed as f64 / wrong as f64))
}

pub fn count_trainable_params(model: &ParaphraseModel) -> usize {
    model.params.trainable_count()
}

/// Trainable count for `config` with the top `k` layers tuned, from shapes alone.
pub fn count_trainable_params_for(config: &ModelConfig, k: usize) -> usize {
    count_trainable_for(config, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once an epoch ends with this training accuracy.
    #[serde(default)]
    pub target_train_accuracy: Option<f64>,
    /// Also measure accuracy on the training set each epoch.
    #[serde(default = "yes")]
    pub eval_train: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            adam: AdamConfig::default(),
            seed: 0,
            target_train_accuracy: None,
            eval_train: true,
        }
    }
}

/// Metrics of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: f64,
    pub val_f1: f64,
    /// Seconds spent on the epoch. Not written to history files so that
    /// reruns with the same seed produce identical files.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }
}

/// Trains `model` on pre-encoded pairs and keeps the parameters of the epoch
/// with the best validation accuracy. The single `rng` drives sampling and
/// dropout.
pub fn train_prepared(
    model: &ParaphraseModel,
    train: (&[PairInputs], &[u8]),
    val: (&[PairInputs], &[u8]),
    config: &TrainConfig,
    rng: &mut ModelRng,
) -> Result<TrainHistory> {
    let (train_x, train_y) = train;
    let (val_x, val_y) = val;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(Error::usage("training and validation sets must be non-empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut history = TrainHistory {
        seed: config.seed,
        ..TrainHistory::default()
    };
    if config.epochs == 0 {
        return Ok(history);
    }
    // checks class balance up front, before any parameter moves
    weighted_sample_indices_with(train_y, 0, rng)?;

    let params = &model.params;
    let mut adam = AdamState::new(params, config.adam);
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    params.zero_grad();

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = weighted_sample_indices_with(train_y, train_x.len(), rng)?;
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let probs = model.forward(&train_x[i], &mut Mode::train(rng))?;
                let loss = cross_entropy(&probs, train_y[i])?;
                let value = loss.item()?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {value} in epoch {epoch} on training pair {} (probabilities {:?})",
                        i + 1,
                        probs.to_vec()
                    )));
                }
                loss_sum += value;
                loss.scale(scale).backward()?;
            }
            adam_step(params, &mut adam)?;
            model.round_to_precision();
        }
        let val_report = evaluate_prepared(model, val_x, val_y)?;
        let train_accuracy = if config.eval_train {
            Some(evaluate_prepared(model, train_x, train_y)?.accuracy)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy,
            val_accuracy: val_report.accuracy,
            val_f1: val_report.f1,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val acc {:.4} f1 {:.4}",
            record.train_loss,
            record.val_accuracy,
            record.val_f1
        );
        if best.as_ref().is_none_or(|(acc, _)| record.val_accuracy > *acc) {
            best = Some((record.val_accuracy, params.snapshot()));
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(record);
        if let (Some(target), Some(acc)) = (config.target_train_accuracy, train_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        params.restore(&snapshot)?;
    }
    Ok(history)
}

/// Tokenizes both datasets with the pipeline's vocabulary and trains.
pub fn train(
    pipeline: &Pipeline,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    rng: &mut ModelRng,
) -> Result<TrainHistory> {
    let train_x = prepare_all(pipeline, train_set)?;
    let val_x = prepare_all(pipeline, val_set)?;
    train_prepared(
        &pipeline.model,
        (&train_x, &train_set.labels()),
        (&val_x, &val_set.labels()),
        config,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{HeadKind, Setup};
    use crate::dataset::Split;
    use crate::pipelines::fixtures::pipeline;
    use crate::pipelines::QuestionPair;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn cross_entropy_examples() {
        let half = Tensor::from_vec(vec![0.5, 0.5]).unwrap();
        for l in [0, 1] {
            assert!((cross_entropy(&half, l).unwrap().item().unwrap() - 2f64.ln()).abs() < 1e-15);
        }
        let p = Tensor::from_vec(vec![0.9, 0.1]).unwrap();
        assert!((cross_entropy(&p, 1).unwrap().item().unwrap() + 0.1f64.ln()).abs() < 1e-12);
        let sure = Tensor::from_vec(vec![0.0, 1.0]).unwrap();
        assert_eq!(cross_entropy(&sure, 1).unwrap().item().unwrap(), 0.0);
        assert!(cross_entropy(&sure, 0).unwrap().item().unwrap().is_finite());
        assert!(matches!(cross_entropy(&half, 2), Err(Error::Usage(_))));
    }

    fn scalar_registry(value: f64) -> (ParamRegistry, Tensor) {
        let mut reg = ParamRegistry::new();
        let p = Tensor::param(&[1], vec![value]).unwrap();
        reg.insert("p", p.clone()).unwrap();
        (reg, p)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (reg, p) = scalar_registry(1.5);
        let mut st = AdamState::new(&reg, AdamConfig::default());
        reg.zero_grad();
        adam_step(&reg, &mut st).unwrap();
        assert_eq!(p.to_vec(), vec![1.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let (reg, p) = scalar_registry(0.0);
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&reg, cfg);
        // independent scalar recursion
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut x = 0.0f64;
        let g = 0.37;
        for t in 1..=2000 {
            let before = p.to_vec()[0];
            p.set_grad(vec![g]).unwrap();
            adam_step(&reg, &mut st).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((p.to_vec()[0] - x).abs() < 1e-12);
            if t == 2000 {
                let step = before - p.to_vec()[0];
                assert!((step - 1e-3).abs() < 1e-8, "{step}");
            }
        }
    }

    #[test]
    fn frozen_params_stay_bitwise() {
        let (mut reg, _) = scalar_registry(0.25);
        let frozen = Tensor::param(&[2], vec![0.1, 0.2]).unwrap();
        reg.insert("frozen", frozen.clone()).unwrap();
        reg.set_trainable("frozen", false).unwrap();
        let mut st = AdamState::new(&reg, AdamConfig::default());
        reg.get("p").unwrap().set_grad(vec![1.0]).unwrap();
        frozen.set_grad(vec![5.0, 5.0]).unwrap();
        adam_step(&reg, &mut st).unwrap();
        assert_eq!(frozen.to_vec(), vec![0.1, 0.2]);
        assert_ne!(reg.get("p").unwrap().to_vec(), vec![0.25]);
        assert_eq!(reg.get("p").unwrap().grad(), Some(vec![0.0]));
    }

    #[test]
    fn missing_gradient_is_consistency_error() {
        let (reg, _) = scalar_registry(0.0);
        let mut st = AdamState::new(&reg, AdamConfig::default());
        assert!(matches!(adam_step(&reg, &mut st), Err(Error::Consistency(_))));
    }

    fn positive_fraction(labels: &[u8], seed: u64) -> f64 {
        let idx = weighted_sample_indices(labels, 100_000, seed).unwrap();
        idx.iter().filter(|&&i| labels[i] == 1).count() as f64 / idx.len() as f64
    }

    #[test]
    fn sampler_balances_classes() {
        let balanced: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
        assert!((positive_fraction(&balanced, 1) - 0.5).abs() <= 0.02);
        let skewed: Vec<u8> = (0..1000).map(|i| (i >= 630) as u8).collect();
        assert!((positive_fraction(&skewed, 2) - 0.5).abs() <= 0.02);
        assert_eq!(
            weighted_sample_indices(&skewed, 50, 3).unwrap(),
            weighted_sample_indices(&skewed, 50, 3).unwrap()
        );
        assert!(matches!(
            weighted_sample_indices(&[1, 1, 1], 5, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn confusion_arithmetic() {
        let c = Confusion {
            tp: 3,
            fp: 1,
            fn_: 2,
            tn: 4,
        };
        assert!((c.precision() - 0.75).abs() < 1e-15);
        assert!((c.recall() - 0.6).abs() < 1e-15);
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.accuracy() - 0.7).abs() < 1e-15);
        let all_zero = Confusion::from_predictions(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap();
        assert_eq!((all_zero.accuracy(), all_zero.f1()), (0.5, 0.0));
        let perfect = Confusion::from_predictions(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((perfect.accuracy(), perfect.f1()), (1.0, 1.0));
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(error_overlap(&[0, 0], &[1, 1], &[1, 1]).unwrap(), Some(1.0));
        assert_eq!(error_overlap(&[1, 1], &[0, 0], &[1, 1]).unwrap(), None);
        let labels = [1, 1, 1, 1];
        let a = [1, 0, 0, 0]; // wrong on 1,2,3
        let b = [0, 1, 1, 0]; // right on 1,2
        assert_eq!(error_overlap(&a, &b, &labels).unwrap(), Some(2.0 / 3.0));
        assert!(error_overlap(&a, &b, &labels[..3]).is_err());
    }

    #[test]
    fn per_layer_increment_is_constant() {
        let c = ModelConfig::base(Setup::MatchedAggregation, HeadKind::Cnn);
        let counts: Vec<usize> = (0..=12).map(|k| count_trainable_params_for(&c, k)).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        let step = counts[2] - counts[1];
        assert!((1..11).all(|k| counts[k + 1] - counts[k] == step));
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let words = ["good", "great", "rap", "songs", "geologist", "sky", "blue", "birds"];
        let pairs = (0..n)
            .map(|i| {
                let w = words[i % words.len()];
                let same = i % 2 == 0;
                let b = if same {
                    format!("what is {w} ?")
                } else {
                    format!("why do {w} fly")
                };
                QuestionPair::new(format!("what is {w} ?"), b, Some(same as u8)).unwrap()
            })
            .collect();
        Dataset::new(pairs, Split::Train).unwrap()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let p = pipeline(Setup::Siamese, HeadKind::Cnn, 0);
        let before = p.model.params.snapshot();
        let d = tiny_dataset(4);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let h = train(&p, &d, &d, &cfg, &mut ModelRng::seed_from_u64(0)).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(p.model.params.snapshot(), before);
    }

    #[test]
    fn small_step_lowers_batch_loss() {
        let p = pipeline(Setup::MatchedAggregation, HeadKind::Cnn, 1);
        let d = tiny_dataset(8);
        let inputs = prepare_all(&p, &d).unwrap();
        let labels = d.labels();
        let loss = || -> f64 {
            inputs
                .iter()
                .zip(&labels)
                .map(|(x, &y)| {
                    cross_entropy(&p.model.forward(x, &mut Mode::eval()).unwrap(), y)
                        .unwrap()
                        .item()
                        .unwrap()
                })
                .sum::<f64>()
                / inputs.len() as f64
        };
        // adam_step alone never rounds, so a 1e-6 step is not lost to f32
        let before = loss();
        let mut adam = AdamState::new(
            &p.model.params,
            AdamConfig {
                lr: 1e-6,
                ..AdamConfig::default()
            },
        );
        p.model.params.zero_grad();
        for (x, &y) in inputs.iter().zip(&labels) {
            cross_entropy(&p.model.forward(x, &mut Mode::eval()).unwrap(), y)
                .unwrap()
                .scale(1.0 / 8.0)
                .backward()
                .unwrap();
        }
        adam_step(&p.model.params, &mut adam).unwrap();
        assert!(loss() < before);
    }

    #[test]
    fn same_seed_same_history() {
        let run = || {
            let p = pipeline(Setup::Siamese, HeadKind::MeanPool, 2);
            let d = tiny_dataset(8);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                seed: 5,
                ..TrainConfig::default()
            };
            let h = train(&p, &d, &d, &cfg, &mut ModelRng::seed_from_u64(5)).unwrap();
            (h.to_jsonl(), p.model.params.snapshot())
        };
        let (a, pa) = run();
        assert_eq!(a.lines().count(), 2);
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn evaluation_ignores_order(seed in any::<u64>()) {
            let p = pipeline(Setup::MatchedAggregation, HeadKind::MeanPool, 3);
            let d = tiny_dataset(6);
            let inputs = prepare_all(&p, &d).unwrap();
            let labels = d.labels();
            let mut order: Vec<usize> = (0..6).collect();
            let mut rng = ModelRng::seed_from_u64(seed);
            for i in (1..6).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let shuffled: Vec<PairInputs> = order.iter().map(|&i| inputs[i].clone()).collect();
            let shuffled_labels: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
            let a = evaluate_prepared(&p.model, &inputs, &labels).unwrap();
            let b = evaluate_prepared(&p.model, &shuffled, &shuffled_labels).unwrap();
            prop_assert_eq!(a.confusion, b.confusion);
        }
    }
}
