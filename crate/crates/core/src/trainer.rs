//! Frame-classification training harness.
//!
//! The model is an input projection, the encoder stack, and a per-frame
//! linear readout trained with mean cross-entropy. Utterances are processed
//! one at a time on fresh tapes; batch gradients accumulate in utterance-id
//! order so runs are reproducible to the bit.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{xavier, TermDrop};
use crate::encoder::{encode_on_tape, sinusoidal_pe, CollectedMaps, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numeric::{real, Matrix, Scalar, Tape, ValueId};
use crate::phoneme::Utterance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.56e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
            seed: 7,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".to_string()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        Ok(())
    }
}

/// Encoder plus task dimensions; everything the checkpoint needs to rebuild
/// the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub d_in: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.d_in == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "bad classifier dims d_in={} num_classes={}",
                self.d_in, self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> LinearParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LinearParams<U> {
        LinearParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierParams<T> {
    pub in_proj: LinearParams<T>,
    pub encoder: EncoderParams<T>,
    pub readout: LinearParams<T>,
}

impl<T> ClassifierParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ClassifierParams<U> {
        ClassifierParams {
            in_proj: self.in_proj.map(&mut f),
            encoder: self.encoder.map(&mut f),
            readout: self.readout.map(&mut f),
        }
    }

    /// Every tensor, for checkpointing.
    pub fn for_each(&self, mut f: impl FnMut(String, &T)) {
        f("in_proj.weight".to_string(), &self.in_proj.weight);
        f("in_proj.bias".to_string(), &self.in_proj.bias);
        self.encoder.for_each(&mut f);
        f("readout.weight".to_string(), &self.readout.weight);
        f("readout.bias".to_string(), &self.readout.bias);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut T)) {
        f("in_proj.weight".to_string(), &mut self.in_proj.weight);
        f("in_proj.bias".to_string(), &mut self.in_proj.bias);
        self.encoder.for_each_mut(&mut f);
        f("readout.weight".to_string(), &mut self.readout.weight);
        f("readout.bias".to_string(), &mut self.readout.bias);
    }

    pub fn for_each_trainable(&self, cfg: &EncoderConfig, mut f: impl FnMut(String, &T)) {
        f("in_proj.weight".to_string(), &self.in_proj.weight);
        f("in_proj.bias".to_string(), &self.in_proj.bias);
        self.encoder.for_each_trainable(cfg, &mut f);
        f("readout.weight".to_string(), &self.readout.weight);
        f("readout.bias".to_string(), &self.readout.bias);
    }

    pub fn for_each_trainable_mut(
        &mut self,
        cfg: &EncoderConfig,
        mut f: impl FnMut(String, &mut T),
    ) {
        f("in_proj.weight".to_string(), &mut self.in_proj.weight);
        f("in_proj.bias".to_string(), &mut self.in_proj.bias);
        self.encoder.for_each_trainable_mut(cfg, &mut f);
        f("readout.weight".to_string(), &mut self.readout.weight);
        f("readout.bias".to_string(), &mut self.readout.bias);
    }
}

impl<F: Scalar> ClassifierParams<Matrix<F>> {
    pub fn init(cfg: &ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder.seed);
        Ok(ClassifierParams {
            in_proj: LinearParams {
                weight: xavier(cfg.d_in, cfg.encoder.d_model, &mut rng),
                bias: Matrix::zeros(1, cfg.encoder.d_model),
            },
            encoder: EncoderParams::init_with_rng(&cfg.encoder, &mut rng)?,
            readout: LinearParams {
                weight: xavier(cfg.encoder.d_model, cfg.num_classes, &mut rng),
                bias: Matrix::zeros(1, cfg.num_classes),
            },
        })
    }

    pub fn stage(&self, tape: &mut Tape<F>) -> ClassifierParams<ValueId> {
        self.map(|m| tape.leaf(m.clone()))
    }
}

/// Per-frame logits for one utterance. Positional encoding is added to the
/// projected stream when the encoder config calls for it.
pub fn classifier_logits<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ClassifierConfig,
    params: &ClassifierParams<ValueId>,
    features: ValueId,
) -> Result<ValueId> {
    let h = tape.matmul(features, params.in_proj.weight)?;
    let mut h = tape.add_row_broadcast(h, params.in_proj.bias)?;
    if cfg.encoder.applies_pe() {
        let t = tape.value(h).rows();
        let pe = tape.leaf(sinusoidal_pe(t, cfg.encoder.d_model));
        h = tape.add(h, pe)?;
    }
    let (feats, _) = encode_on_tape(tape, &cfg.encoder, &params.encoder, h, false, None)?;
    let logits = tape.matmul(feats, params.readout.weight)?;
    tape.add_row_broadcast(logits, params.readout.bias)
}

/// Attention maps of the full classifier path for one utterance, with an
/// optional score-term ablation replayed in the phonetic layers.
pub fn classifier_maps<F: Scalar>(
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<F>>,
    features: &Matrix<F>,
    drop: Option<TermDrop>,
) -> Result<CollectedMaps> {
    if drop.is_some() && cfg.encoder.num_phsa_layers == 0 {
        return Err(Error::Config(
            "term ablation requires at least one phonetic layer".to_string(),
        ));
    }
    let mut tape = Tape::new();
    let staged = params.stage(&mut tape);
    let x = tape.leaf(features.clone());
    let h = tape.matmul(x, staged.in_proj.weight)?;
    let mut h = tape.add_row_broadcast(h, staged.in_proj.bias)?;
    if cfg.encoder.applies_pe() {
        let t = tape.value(h).rows();
        let pe = tape.leaf(sinusoidal_pe(t, cfg.encoder.d_model));
        h = tape.add(h, pe)?;
    }
    let (_, maps) = encode_on_tape(&mut tape, &cfg.encoder, &staged.encoder, h, true, drop)?;
    let maps = maps.expect("maps requested");
    Ok(maps
        .into_iter()
        .map(|heads| {
            heads
                .into_iter()
                .map(|id| tape.value(id).to_f64())
                .collect()
        })
        .collect())
}

/// Adam with bias correction and decoupled weight decay, state indexed by
/// trainable-tensor slot.
struct Adam<F: Scalar> {
    m: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update_tensor(&mut self, cfg: &TrainConfig, slot: usize, param: &mut Matrix<F>, grad: &Matrix<F>) {
        let lr = real::<F>(cfg.learning_rate);
        let wd = real::<F>(cfg.weight_decay);
        let b1 = real::<F>(cfg.beta1);
        let b2 = real::<F>(cfg.beta2);
        let eps = real::<F>(cfg.epsilon);
        let bc1 = F::one() - real::<F>(cfg.beta1.powi(self.step as i32));
        let bc2 = F::one() - real::<F>(cfg.beta2.powi(self.step as i32));
        let pd = param.data_mut();
        let gd = grad.data();
        let md = self.m[slot].data_mut();
        let vd = self.v[slot].data_mut();
        for k in 0..pd.len() {
            md[k] = b1 * md[k] + (F::one() - b1) * gd[k];
            vd[k] = b2 * vd[k] + (F::one() - b2) * gd[k] * gd[k];
            let m_hat = md[k] / bc1;
            let v_hat = vd[k] / bc2;
            pd[k] = pd[k] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[k]);
        }
    }
}

/// One history row. Epoch 0 is the pre-training evaluation; later rows
/// report the running loss/accuracy seen during that epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn check_data<F: Scalar>(cfg: &ClassifierConfig, data: &[Utterance<F>]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".to_string()));
    }
    for utt in data {
        utt.validate(cfg.num_classes)?;
        if utt.features.cols() != cfg.d_in {
            return Err(Error::Data(format!(
                "utterance {} has {} feature dims, model expects {}",
                utt.id,
                utt.features.cols(),
                cfg.d_in
            )));
        }
    }
    Ok(())
}

/// Mean loss and frame accuracy over a dataset, without updating anything.
pub fn dataset_loss<F: Scalar>(
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<F>>,
    data: &[Utterance<F>],
) -> Result<(f64, f64)> {
    check_data(cfg, data)?;
    let mut total_loss = 0.0;
    let mut correct = 0u64;
    let mut frames = 0u64;
    for utt in data {
        let mut tape = Tape::new();
        let staged = params.stage(&mut tape);
        let x = tape.leaf(utt.features.clone());
        let logits = classifier_logits(&mut tape, cfg, &staged, x)?;
        let loss = tape.cross_entropy_mean(logits, &utt.labels)?;
        let t = utt.labels.len() as u64;
        total_loss += tape.value(loss).item().to_f64_lossy() * t as f64;
        correct += count_correct(tape.value(logits), &utt.labels);
        frames += t;
    }
    Ok((total_loss / frames as f64, correct as f64 / frames as f64))
}

fn count_correct<F: Scalar>(logits: &Matrix<F>, labels: &[usize]) -> u64 {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| argmax(logits.row(i)) == label)
        .count() as u64
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Trains the classifier. Returns the final parameters and per-epoch
/// history; aborts with [`Error::Diverged`] on a non-finite loss.
pub fn train<F: Scalar>(
    train_cfg: &TrainConfig,
    model_cfg: &ClassifierConfig,
    data: &[Utterance<F>],
) -> Result<(ClassifierParams<Matrix<F>>, Vec<EpochStats>)> {
    train_with_callback(train_cfg, model_cfg, data, |_, _| Ok(()))
}

/// Like [`train`], invoking `on_epoch(epoch, params)` after each update
/// epoch (for checkpointing).
pub fn train_with_callback<F: Scalar>(
    train_cfg: &TrainConfig,
    model_cfg: &ClassifierConfig,
    data: &[Utterance<F>],
    mut on_epoch: impl FnMut(usize, &ClassifierParams<Matrix<F>>) -> Result<()>,
) -> Result<(ClassifierParams<Matrix<F>>, Vec<EpochStats>)> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    check_data(model_cfg, data)?;

    let mut params = ClassifierParams::<Matrix<F>>::init(model_cfg)?;
    let mut history = Vec::with_capacity(train_cfg.epochs + 1);
    let (loss0, acc0) = dataset_loss(model_cfg, &params, data)?;
    history.push(EpochStats {
        epoch: 0,
        loss: loss0,
        accuracy: acc0,
    });

    let mut shapes = Vec::new();
    params.for_each_trainable(&model_cfg.encoder, |_, m| shapes.push(m.shape()));
    let mut adam = Adam::<F>::new(&shapes);

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=train_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0u64;
        let mut epoch_frames = 0u64;

        for (batch_index, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            // fixed accumulation order regardless of the shuffle
            let mut batch: Vec<&Utterance<F>> = batch.iter().map(|&i| &data[i]).collect();
            batch.sort_by_key(|u| u.id);
            let batch_frames: usize = batch.iter().map(|u| u.labels.len()).sum();

            let mut grad_acc: Vec<Matrix<F>> = shapes
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect();
            let mut batch_loss = 0.0;

            for utt in &batch {
                let mut tape = Tape::new();
                let staged = params.stage(&mut tape);
                let x = tape.leaf(utt.features.clone());
                let logits = classifier_logits(&mut tape, model_cfg, &staged, x)?;
                let loss = tape.cross_entropy_mean(logits, &utt.labels)?;
                let weight = utt.labels.len() as f64 / batch_frames as f64;

                let loss_value = tape.value(loss).item().to_f64_lossy();
                if !loss_value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_index,
                    });
                }
                batch_loss += loss_value * weight;
                epoch_correct += count_correct(tape.value(logits), &utt.labels);

                let grads = tape.backward_weighted(loss, real::<F>(weight))?;
                let mut slot = 0;
                staged.for_each_trainable(&model_cfg.encoder, |_, &id| {
                    if let Some(g) = grads.try_get(id) {
                        grad_acc[slot] = grad_acc[slot].add(g).expect("gradient shape");
                    }
                    slot += 1;
                });
            }

            adam.begin_step();
            let mut slot = 0;
            params.for_each_trainable_mut(&model_cfg.encoder, |_, m| {
                adam.update_tensor(train_cfg, slot, m, &grad_acc[slot]);
                slot += 1;
            });

            epoch_loss += batch_loss * batch_frames as f64;
            epoch_frames += batch_frames as u64;
        }

        history.push(EpochStats {
            epoch,
            loss: epoch_loss / epoch_frames as f64,
            accuracy: epoch_correct as f64 / epoch_frames as f64,
        });
        on_epoch(epoch, &params)?;
    }
    Ok((params, history))
}

/// Evaluation summary: frame accuracy plus a true-class-by-predicted-class
/// confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: u64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let frames: u64 = confusion.iter().flatten().sum();
        let correct: u64 = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .sum();
        EvalReport {
            frames,
            accuracy: if frames == 0 {
                0.0
            } else {
                correct as f64 / frames as f64
            },
            confusion,
        }
    }

    pub fn class_count(&self) -> usize {
        self.confusion.len()
    }
}

pub fn confusion_from_predictions(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<u64>>> {
    if labels.len() != predictions.len() {
        return Err(Error::Data(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&truth, &pred) in labels.iter().zip(predictions.iter()) {
        if truth >= num_classes || pred >= num_classes {
            return Err(Error::Data(format!(
                "class out of range: truth {truth}, pred {pred}"
            )));
        }
        confusion[truth][pred] += 1;
    }
    Ok(confusion)
}

/// Per-frame argmax predictions for one utterance.
pub fn predict<F: Scalar>(
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<F>>,
    utt: &Utterance<F>,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let staged = params.stage(&mut tape);
    let x = tape.leaf(utt.features.clone());
    let logits = classifier_logits(&mut tape, cfg, &staged, x)?;
    let lm = tape.value(logits);
    Ok((0..lm.rows()).map(|i| argmax(lm.row(i))).collect())
}

/// Frame accuracy and confusion matrix over a dataset.
pub fn evaluate<F: Scalar>(
    cfg: &ClassifierConfig,
    params: &ClassifierParams<Matrix<F>>,
    data: &[Utterance<F>],
) -> Result<EvalReport> {
    check_data(cfg, data)?;
    let mut confusion = vec![vec![0u64; cfg.num_classes]; cfg.num_classes];
    for utt in data {
        let preds = predict(cfg, params, utt)?;
        for (&truth, &pred) in utt.labels.iter().zip(preds.iter()) {
            confusion[truth][pred] += 1;
        }
    }
    Ok(EvalReport::from_confusion(confusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::VariantId;
    use crate::phoneme::{generate_dataset, DatasetConfig};
    use rand::Rng;

    fn tiny_model(d_in: usize, num_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            d_in,
            num_classes,
            encoder: EncoderConfig {
                num_layers: 1,
                num_heads: 2,
                d_model: 8,
                d_h: 4,
                ffn_dim: 16,
                num_phsa_layers: 1,
                variant_for_upper: VariantId::M2,
                use_abs_pe: true,
                scale_scores: true,
                seed: 5,
            },
        }
    }

    fn readout_only(d_in: usize, num_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            d_in,
            num_classes,
            encoder: EncoderConfig {
                num_layers: 0,
                num_heads: 1,
                d_model: 8,
                d_h: 8,
                ffn_dim: 8,
                num_phsa_layers: 0,
                variant_for_upper: VariantId::M2,
                use_abs_pe: false,
                scale_scores: true,
                seed: 5,
            },
        }
    }

    fn small_dataset(n: usize, seed: u64) -> Vec<Utterance<f64>> {
        let cfg = DatasetConfig {
            n_utterances: n,
            t_min: 6,
            t_max: 10,
            d_in: 8,
            seed,
            inventory: crate::phoneme::PhonemeInventory {
                num_classes: 4,
                confusable_groups: vec![vec![1, 2]],
            },
            ..DatasetConfig::default()
        };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_noop() {
        let data = small_dataset(6, 1);
        let model_cfg = tiny_model(8, 4);
        let train_cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let (params, history) = train(&train_cfg, &model_cfg, &data).unwrap();
        let init = ClassifierParams::<Matrix<f64>>::init(&model_cfg).unwrap();
        let mut trained = Vec::new();
        params.for_each(|_, m| trained.push(m.clone()));
        let mut idx = 0;
        init.for_each(|_, m| {
            assert_eq!(*m, trained[idx]);
            idx += 1;
        });
        // loss identical across epochs
        assert!((history[0].loss - history[1].loss).abs() < 1e-12);
        assert!((history[1].loss - history[2].loss).abs() < 1e-12);
    }

    #[test]
    fn loss_drops_on_small_task() {
        let data = small_dataset(16, 2);
        let model_cfg = tiny_model(8, 4);
        let train_cfg = TrainConfig {
            epochs: 6,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let (_, history) = train(&train_cfg, &model_cfg, &data).unwrap();
        let initial = history.first().unwrap().loss;
        let last = history.last().unwrap().loss;
        assert!(
            last < initial,
            "loss did not decrease: {initial} -> {last}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_dataset(6, 3);
        let model_cfg = tiny_model(8, 4);
        let train_cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let (pa, ha) = train(&train_cfg, &model_cfg, &data).unwrap();
        let (pb, hb) = train(&train_cfg, &model_cfg, &data).unwrap();
        assert_eq!(ha, hb);
        let mut mats_a = Vec::new();
        pa.for_each(|_, m| mats_a.push(m.clone()));
        let mut idx = 0;
        pb.for_each(|_, m| {
            assert_eq!(*m, mats_a[idx]);
            idx += 1;
        });
    }

    #[test]
    fn separable_classes_reach_full_accuracy_with_readout_only() {
        // no noise, no speaker offset, no confusable sharing: a linear
        // readout must classify every frame
        let cfg = DatasetConfig {
            n_utterances: 12,
            t_min: 6,
            t_max: 10,
            d_in: 8,
            seed: 4,
            speaker_scale: 0.0,
            noise_scale: 0.0,
            inventory: crate::phoneme::PhonemeInventory {
                num_classes: 4,
                confusable_groups: vec![],
            },
            ..DatasetConfig::default()
        };
        let data = generate_dataset::<f64>(&cfg).unwrap();
        let model_cfg = readout_only(8, 4);
        let train_cfg = TrainConfig {
            epochs: 60,
            learning_rate: 5e-2,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let (params, _) = train(&train_cfg, &model_cfg, &data).unwrap();
        let report = evaluate(&model_cfg, &params, &data).unwrap();
        assert_eq!(report.accuracy, 1.0, "confusion: {:?}", report.confusion);
    }

    #[test]
    fn identical_feature_classes_cap_at_half_accuracy() {
        // two classes with byte-identical features cannot be told apart
        let mut data = small_dataset(10, 5);
        for utt in &mut data {
            for (i, label) in utt.labels.iter_mut().enumerate() {
                *label = if i % 2 == 0 { 1 } else { 2 };
                for j in 0..utt.features.cols() {
                    utt.features.set(i, j, utt.features.get(0, j));
                }
            }
        }
        let model_cfg = readout_only(8, 4);
        let train_cfg = TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (params, _) = train(&train_cfg, &model_cfg, &data).unwrap();
        let report = evaluate(&model_cfg, &params, &data).unwrap();
        let class1: u64 = report.confusion[1].iter().sum();
        let class2: u64 = report.confusion[2].iter().sum();
        let correct = report.confusion[1][1] + report.confusion[2][2];
        let ceiling = 0.5 + 1e-9;
        assert!(
            (correct as f64) / ((class1 + class2) as f64) <= ceiling + 0.05,
            "confusable accuracy above information ceiling"
        );
    }

    #[test]
    fn confusion_row_sums_match_class_counts() {
        let data = small_dataset(8, 6);
        let model_cfg = tiny_model(8, 4);
        let params = ClassifierParams::<Matrix<f64>>::init(&model_cfg).unwrap();
        let report = evaluate(&model_cfg, &params, &data).unwrap();
        let mut counts = vec![0u64; 4];
        for utt in &data {
            for &l in &utt.labels {
                counts[l] += 1;
            }
        }
        for (class, row) in report.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), counts[class]);
        }
    }

    #[test]
    fn perfect_predictions_give_diagonal_confusion() {
        let labels = vec![0, 1, 2, 1, 0];
        let confusion = confusion_from_predictions(&labels, &labels, 3).unwrap();
        let report = EvalReport::from_confusion(confusion);
        assert_eq!(report.accuracy, 1.0);
        for (i, row) in report.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(v, 0);
                }
            }
        }
    }

    #[test]
    fn uniform_random_predictor_sits_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 24_000;
        let num_classes = 12;
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..num_classes)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..num_classes)).collect();
        let report =
            EvalReport::from_confusion(confusion_from_predictions(&labels, &preds, 12).unwrap());
        let chance = 1.0 / 12.0;
        assert!((report.accuracy - chance).abs() < 0.01);
    }

    #[test]
    fn divergence_is_reported_with_location() {
        // lr large enough that the query-key products overflow f64 on the
        // next forward pass (layer norm shields anything smaller)
        let data = small_dataset(6, 7);
        let model_cfg = tiny_model(8, 4);
        let train_cfg = TrainConfig {
            learning_rate: 1e160,
            epochs: 4,
            ..TrainConfig::default()
        };
        match train(&train_cfg, &model_cfg, &data) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let model_cfg = tiny_model(6, 3);
        let mut params = ClassifierParams::<Matrix<f64>>::init(&model_cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for layer in &mut params.encoder.layers {
            for head in &mut layer.attn.heads {
                head.c = Matrix::from_fn(1, 4, |_, _| rng.gen_range(-0.5..0.5));
                head.alpha_s = Matrix::scalar(rng.gen_range(0.6..1.4));
                head.alpha_c = Matrix::scalar(rng.gen_range(0.6..1.4));
            }
        }
        let x = Matrix::from_fn(5, 6, |_, _| rng.gen_range(-1.0..1.0));
        let labels = vec![0usize, 2, 1, 1, 0];

        let mut named = Vec::new();
        params.for_each_trainable(&model_cfg.encoder, |name, m| named.push((name, m.clone())));
        let template = params.clone();
        let cfg2 = model_cfg.clone();
        let report = crate::numeric::grad_check(&named, 1e-5, move |tape, ids| {
            let mut staged = template.stage(tape);
            let mut idx = 0;
            staged.for_each_trainable_mut(&cfg2.encoder, |_, slot| {
                *slot = ids[idx];
                idx += 1;
            });
            let xid = tape.leaf(x.clone());
            let logits = classifier_logits(tape, &cfg2, &staged, xid)?;
            tape.cross_entropy_mean(logits, &labels)
        })
        .expect("grad check");
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
