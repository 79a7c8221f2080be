//! Mini-batch training with per-epoch validation, best-checkpoint selection
//! and optional early stopping.
//!
//! Every random draw (initialisation, shuffling, augmentation, dropout)
//! comes from a stream derived from `TrainConfig::seed` and the position in
//! the run, so a run is bit-reproducible.

use std::fmt::Write as _;

use thiserror::Error;

use crate::augment::{augment_image, expand_dataset, AugmentConfig, AugmentError};
use crate::dataset::{one_hot, stack, CarrotClass, DatasetSplit, LabeledImage, NUM_CLASSES};
use crate::image::{fuzzy_filter, resize_bilinear, to_input_tensor, FuzzyFilterConfig, ImageError, RgbImage};
use crate::model::{Model, ModelError, ModelSpec};
use crate::nn::{cross_entropy, NnError, OptimizerKind, OptimizerState, ParamUpdate};
use crate::seed;
use crate::tensor::Tensor;

const MODEL_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;
const EXPAND_STREAM: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(ModelError::Nn(e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    /// Used by callers that split a corpus before calling [`fit`].
    pub val_fraction: f64,
    /// On-the-fly augmentation of training batches; `None` disables it.
    pub augment: Option<AugmentConfig>,
    /// When non-zero, the training set is expanded once with this many
    /// augmented copies per image and no per-epoch augmentation is applied.
    pub pre_expand_copies: usize,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
    pub fuzzy: FuzzyFilterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            val_fraction: 0.2,
            augment: Some(AugmentConfig::default()),
            pre_expand_copies: 0,
            seed: 0,
            early_stop_patience: Some(10),
            fuzzy: FuzzyFilterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.early_stop_patience == Some(0) {
            return Err(TrainError::Config("early-stop patience must be >= 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.fuzzy.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_acc >= r.val_acc => Some(b),
            _ => Some(r),
        })
    }
}

pub fn history_to_csv(history: &TrainHistory) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for r in &history.records {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc);
    }
    out
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of a `[B, 4]` probability tensor.
pub fn predicted_classes(probs: &Tensor) -> Vec<CarrotClass> {
    probs
        .data()
        .chunks_exact(NUM_CLASSES)
        .map(|row| CarrotClass::from_id(argmax(row)).expect("row width is the class count"))
        .collect()
}

fn to_tensor(img: &RgbImage, size: usize) -> Result<Tensor, ImageError> {
    to_input_tensor(&resize_bilinear(img, size, size)?, size)
}

fn correct(probs: &Tensor, labels: &[CarrotClass]) -> usize {
    predicted_classes(probs).iter().zip(labels).filter(|(p, t)| p == t).count()
}

/// Mean loss and accuracy of `model` over prepared inputs.
fn score(
    model: &Model,
    inputs: &[Tensor],
    labels: &[CarrotClass],
    batch_size: usize,
) -> Result<(f64, f64), TrainError> {
    let (mut loss, mut hits) = (0.0f64, 0usize);
    for (xs, ys) in inputs.chunks(batch_size).zip(labels.chunks(batch_size)) {
        let refs: Vec<&Tensor> = xs.iter().collect();
        let probs = model.predict(&stack(&refs))?;
        loss += cross_entropy(&probs, &one_hot(ys))? as f64 * ys.len() as f64;
        hits += correct(&probs, ys);
    }
    Ok((loss / labels.len() as f64, hits as f64 / labels.len() as f64))
}

fn denoise(items: &[LabeledImage], fuzzy: &FuzzyFilterConfig) -> Result<Vec<LabeledImage>, TrainError> {
    items.iter().map(|item| Ok(LabeledImage { image: fuzzy_filter(&item.image, fuzzy)?, ..item.clone() })).collect()
}

/// Train `spec` on `data.train`, validating on `data.validation` after each
/// epoch. Returns the weights from the epoch with the highest validation
/// accuracy (the earliest on ties) and the full history.
pub fn fit(spec: ModelSpec, data: &DatasetSplit, cfg: &TrainConfig) -> Result<(Model, TrainHistory), TrainError> {
    cfg.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(TrainError::Data(format!(
            "need non-empty train and validation sets, got {} and {}",
            data.train.len(),
            data.validation.len()
        )));
    }
    let mut model = Model::init(spec, seed::derive(cfg.seed, &[MODEL_STREAM]))?;
    model.metadata.seed = cfg.seed;
    model.metadata.fuzzy = cfg.fuzzy;
    model.metadata.corpus_size = data.train.len() + data.validation.len();
    let size = model.input_size();

    let mut train = denoise(&data.train, &cfg.fuzzy)?;
    let mut augment = cfg.augment.map(|a| AugmentConfig { seed: seed::derive(cfg.seed, &[AUGMENT_STREAM]), ..a });
    if cfg.pre_expand_copies > 0 {
        if let Some(a) = augment.take() {
            let a = AugmentConfig { seed: seed::derive(cfg.seed, &[EXPAND_STREAM]), ..a };
            train = expand_dataset(&train, &a, cfg.pre_expand_copies)?;
        }
    }
    let train_labels: Vec<CarrotClass> = train.iter().map(|i| i.label).collect();
    let fixed_train: Option<Vec<Tensor>> = match augment {
        None => Some(train.iter().map(|i| to_tensor(&i.image, size)).collect::<Result<_, _>>()?),
        Some(_) => None,
    };
    let val_inputs: Vec<Tensor> =
        denoise(&data.validation, &cfg.fuzzy)?.iter().map(|i| to_tensor(&i.image, size)).collect::<Result<_, _>>()?;
    let val_labels: Vec<CarrotClass> = data.validation.iter().map(|i| i.label).collect();

    let mut optimizer = OptimizerState::new(cfg.optimizer, cfg.learning_rate)?;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let order = crate::dataset::batch_order(
            train.len(),
            cfg.batch_size,
            Some(seed::derive(cfg.seed, &[SHUFFLE_STREAM, epoch as u64])),
        );
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for (b, idx) in order.iter().enumerate() {
            let inputs: Vec<Tensor> = match (&fixed_train, &augment) {
                (Some(fixed), _) => idx.iter().map(|&i| fixed[i].clone()).collect(),
                (None, Some(a)) => idx
                    .iter()
                    .map(|&i| Ok(to_tensor(&augment_image(&train[i].image, a, &[epoch as u64, i as u64])?, size)?))
                    .collect::<Result<_, TrainError>>()?,
                (None, None) => unreachable!("fixed inputs exist when augmentation is off"),
            };
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let labels: Vec<CarrotClass> = idx.iter().map(|&i| train_labels[i]).collect();
            let y = one_hot(&labels);
            let mut rng = seed::rng(cfg.seed, &[DROPOUT_STREAM, epoch as u64, b as u64]);
            let diverged = |detail: String| TrainError::Diverged { epoch: epoch + 1, batch: b, detail };
            let numeric = |e: ModelError| match e {
                ModelError::Nn(NnError::Numeric(m)) => diverged(m),
                other => other.into(),
            };
            let trace = model.forward_train(&stack(&refs), &mut rng).map_err(numeric)?;
            let loss = cross_entropy(trace.probabilities(), &y)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            loss_sum += loss as f64 * labels.len() as f64;
            hits += correct(trace.probabilities(), &labels);
            let grads = model.backward(&trace, &y).map_err(numeric)?;
            let mut tensors = model.tensors_mut();
            let mut updates: Vec<ParamUpdate<'_>> = tensors
                .iter_mut()
                .zip(&grads.0)
                .map(|((name, value), grad)| ParamUpdate { name: name.as_str(), value, grad })
                .collect();
            optimizer.step(&mut updates).map_err(|e| diverged(e.to_string()))?;
        }
        let (val_loss, val_acc) = score(&model, &val_inputs, &val_labels, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            record.epoch,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        history.records.push(record);
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            let mut snapshot = model.clone();
            snapshot.metadata.best_epoch = epoch + 1;
            best = Some((val_acc, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop after epoch {}", epoch + 1);
                break;
            }
        }
    }
    let mut out = best.map(|(_, m)| m).unwrap_or(model);
    out.metadata.epochs_trained = history.records.len();
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, split_stratified};
    use crate::model::LayerSpec;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            name: "small".into(),
            input: [16, 16, 3],
            layers: vec![
                LayerSpec::conv(4),
                LayerSpec::Maxpool2x2,
                LayerSpec::conv(8),
                LayerSpec::Maxpool2x2,
                LayerSpec::dropout(0.25),
                LayerSpec::Flatten,
                LayerSpec::output(),
            ],
        }
    }

    fn small_split() -> DatasetSplit {
        split_stratified(&generate_synthetic(6, 24, 4).unwrap(), 0.34, 2).unwrap()
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 4, seed: 21, ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let (model, history) = fit(small_spec(), &small_split(), &small_cfg(0)).unwrap();
        assert!(history.records.is_empty());
        let init = Model::init(small_spec(), seed::derive(21, &[MODEL_STREAM])).unwrap();
        assert_eq!(model.tensors(), init.tensors());
        assert_eq!(model.metadata.epochs_trained, 0);
    }

    #[test]
    fn deterministic_and_best_checkpoint() {
        let split = small_split();
        let (m1, h1) = fit(small_spec(), &split, &small_cfg(3)).unwrap();
        let (m2, h2) = fit(small_spec(), &split, &small_cfg(3)).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.records.len(), 3);
        for r in &h1.records {
            assert!((0.0..=1.0).contains(&r.train_acc) && (0.0..=1.0).contains(&r.val_acc));
        }
        // The kept weights reproduce the best recorded validation accuracy.
        let best = h1.best().unwrap();
        assert_eq!(m1.metadata.best_epoch, best.epoch);
        let images: Vec<&RgbImage> = split.validation.iter().map(|i| &i.image).collect();
        let probs = m1.classify(&images).unwrap();
        let truth: Vec<CarrotClass> = split.validation.iter().map(|i| i.label).collect();
        assert_eq!(correct(&probs, &truth) as f64 / truth.len() as f64, best.val_acc);

        let (_, other) = fit(small_spec(), &split, &TrainConfig { seed: 22, ..small_cfg(3) }).unwrap();
        assert_ne!(other, h1);
    }

    #[test]
    fn early_stop_and_pre_expand() {
        let split = small_split();
        let cfg = TrainConfig {
            learning_rate: 1e-9,
            optimizer: OptimizerKind::Sgd,
            early_stop_patience: Some(2),
            ..small_cfg(10)
        };
        let (_, h) = fit(small_spec(), &split, &cfg).unwrap();
        assert!(h.records.len() < 10, "{}", h.records.len());

        let cfg = TrainConfig { pre_expand_copies: 2, ..small_cfg(1) };
        let (m, _) = fit(small_spec(), &split, &cfg).unwrap();
        assert_eq!(m.metadata.corpus_size, split.train.len() + split.validation.len());
    }

    #[test]
    fn divergence_reports_position() {
        let cfg = TrainConfig { learning_rate: 1e30, optimizer: OptimizerKind::Sgd, augment: None, ..small_cfg(5) };
        match fit(small_spec(), &small_split(), &cfg) {
            Err(TrainError::Diverged { epoch, batch, .. }) => assert!(epoch >= 1 && batch < 4),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_and_data_errors() {
        let split = small_split();
        assert!(fit(small_spec(), &split, &TrainConfig { batch_size: 0, ..small_cfg(1) }).is_err());
        assert!(fit(small_spec(), &split, &TrainConfig { val_fraction: 1.0, ..small_cfg(1) }).is_err());
        let empty = DatasetSplit { train: split.train.clone(), validation: Vec::new(), seed: 0 };
        assert!(matches!(fit(small_spec(), &empty, &small_cfg(1)), Err(TrainError::Data(_))));
    }

    #[test]
    fn history_csv() {
        let mut h = TrainHistory::default();
        assert_eq!(history_to_csv(&h), "epoch,train_loss,train_acc,val_loss,val_acc\n");
        h.records.push(EpochRecord { epoch: 1, train_loss: 1.25, train_acc: 0.5, val_loss: 1.0 / 3.0, val_acc: 0.75 });
        h.records.push(EpochRecord { epoch: 2, train_loss: 0.9, train_acc: 0.625, val_loss: 0.8, val_acc: 0.875 });
        let text = history_to_csv(&h);
        assert_eq!(text.lines().count(), 3);
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(reader.headers().unwrap(), vec!["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]);
        for (row, want) in reader.records().zip(&h.records) {
            let row = row.unwrap();
            let vals: Vec<f64> = row.iter().map(|v| v.parse().unwrap()).collect();
            let expect = [want.epoch as f64, want.train_loss, want.train_acc, want.val_loss, want.val_acc];
            for (a, b) in vals.iter().zip(expect) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    /// A small learning-rate step does not increase the loss on a fixed
    /// batch (19 of 20 random trials).
    #[test]
    fn small_step_descends() {
        let spec = small_spec();
        let items = generate_synthetic(2, 16, 9).unwrap();
        let refs: Vec<Tensor> = items.iter().map(|i| to_tensor(&i.image, 16).unwrap()).collect();
        let x = stack(&refs.iter().collect::<Vec<_>>());
        let y = one_hot(&items.iter().map(|i| i.label).collect::<Vec<_>>());
        let no_dropout = ModelSpec {
            layers: spec
                .layers
                .iter()
                .map(|l| if let LayerSpec::Dropout { .. } = l { LayerSpec::dropout(0.0) } else { *l })
                .collect(),
            ..spec
        };
        let mut ok = 0;
        for trial in 0..20 {
            let mut model = Model::init(no_dropout.clone(), trial).unwrap();
            let before = cross_entropy(&model.predict(&x).unwrap(), &y).unwrap();
            let trace = model.forward_train(&x, &mut seed::rng(trial, &[])).unwrap();
            let grads = model.backward(&trace, &y).unwrap();
            let mut opt = OptimizerState::new(OptimizerKind::Sgd, 1e-3).unwrap();
            let mut tensors = model.tensors_mut();
            let mut updates: Vec<ParamUpdate<'_>> = tensors
                .iter_mut()
                .zip(&grads.0)
                .map(|((name, value), grad)| ParamUpdate { name: name.as_str(), value, grad })
                .collect();
            opt.step(&mut updates).unwrap();
            let after = cross_entropy(&model.predict(&x).unwrap(), &y).unwrap();
            if after <= before {
                ok += 1;
            }
        }
        assert!(ok >= 19, "{ok}/20");
    }
}
