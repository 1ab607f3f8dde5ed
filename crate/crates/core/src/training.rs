//! Optimization loop: Adam, masking, epoch scheduling and model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{rank_from_scores, score_catalog};
use crate::models::{Model, ModelConfig, Reduction, TrainingExample};
use crate::objective::{sample_negatives, LossConfig};
use crate::params::ParamSet;
use crate::rng::{substream, Stream};
use crate::session_data::{holdout_split, Session};

pub const MODEL_KIND: &str = "model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves everything
/// untouched and reports the step number.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Data("gradient layout does not match parameters".into()));
    }
    if !grads.all_finite() {
        let bad = grads
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n.to_string())
            .unwrap_or_default();
        return Err(Error::Numeric {
            batch: state.step as usize,
            message: format!("non-finite gradient in {bad}"),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let lr = config.learning_rate;
    let eps = config.epsilon;
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let p = p.data_mut();
        let g = g.data();
        let m = m.data_mut();
        let v = v.data_mut();
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Replaces each position by the mask token with probability `p`, forcing one
/// uniformly chosen position when none is drawn. Returns the masked sequence
/// and the sorted masked positions; the original items stay the labels.
pub fn mask_sequence<R: Rng + ?Sized>(prefix: &[usize], p: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut masked = prefix.to_vec();
    let mut positions = Vec::new();
    if prefix.is_empty() {
        return (masked, positions);
    }
    for (i, slot) in masked.iter_mut().enumerate() {
        if rng.random::<f64>() < p {
            *slot = crate::session_data::MASK;
            positions.push(i);
        }
    }
    if positions.is_empty() {
        let i = rng.random_range(0..prefix.len());
        masked[i] = crate::session_data::MASK;
        positions.push(i);
    }
    (masked, positions)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub nll: f64,
    pub nce: f64,
    pub combined: f64,
    pub val_hr10: f64,
    pub wallclock_ms: u64,
}

impl EpochRecord {
    pub fn to_ndjson(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

/// Training prefix and validation target of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSession {
    pub prefix: Session,
    pub validation_target: (usize, bool),
}

pub fn training_sessions(dataset: &Dataset) -> Vec<TrainingSession> {
    dataset
        .sessions
        .iter()
        .filter_map(|s| holdout_split(s).ok())
        .map(|h| TrainingSession {
            prefix: h.train_prefix,
            validation_target: h.validation_target,
        })
        .collect()
}

/// Sampled-softmax negatives for every session of one epoch, with the number
/// of sessions whose eligible pool was smaller than requested.
pub fn epoch_negatives(
    sessions: &[TrainingSession],
    vocab_size: usize,
    num_negatives: usize,
    seed: u64,
    epoch: usize,
) -> (Vec<Vec<usize>>, usize) {
    let mut rng = substream(seed, Stream::Negatives, epoch as u64);
    let mut short = 0;
    let negs = sessions
        .iter()
        .map(|s| {
            let r = sample_negatives(vocab_size, &s.prefix, num_negatives, &mut rng);
            short += usize::from(r.short);
            r.items
        })
        .collect();
    (negs, short)
}

/// HR@10 over positive validation targets; 0 when there are none.
pub fn validation_hr10(model: &Model, sessions: &[TrainingSession]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for s in sessions {
        let (target, skipped) = s.validation_target;
        if skipped || s.prefix.is_empty() {
            continue;
        }
        let pred = model.predict_next(s.prefix.items())?;
        if rank_from_scores(&score_catalog(&pred, model), target) <= 10 {
            hits += 1;
        }
        total += 1;
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Fixed batches of sessions with similar prefix lengths.
fn length_batches(sessions: &[TrainingSession], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.sort_by_key(|&i| sessions[i].prefix.len());
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation HR@10 (the
    /// initialization if no epoch finished).
    pub model: Model,
    /// 0 when no epoch finished.
    pub best_epoch: usize,
    pub best_val_hr10: f64,
    pub log: Vec<EpochRecord>,
    /// Per epoch, sessions whose negative pool was smaller than requested.
    pub short_negative_sessions: Vec<usize>,
    pub stopped_early: bool,
    /// Set when training diverged; `model` then holds the last good selection.
    pub aborted: Option<Error>,
}

pub fn train(
    dataset: &Dataset,
    model_config: ModelConfig,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(dataset, model_config, loss, config, |_| {})
}

/// Same as [`train`], calling `on_epoch` after every finished epoch.
pub fn train_with(
    dataset: &Dataset,
    model_config: ModelConfig,
    loss: &LossConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    loss.validate()?;
    if model_config.vocab_size != dataset.vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match dataset vocabulary {}",
            model_config.vocab_size,
            dataset.vocab.len()
        )));
    }
    let sessions = training_sessions(dataset);
    if sessions.is_empty() {
        return Err(Error::Data("dataset has no session with a holdout split".into()));
    }
    let too_long = sessions.iter().map(|s| s.prefix.len()).max().unwrap_or(0);
    if too_long > model_config.max_len {
        return Err(Error::Conflict {
            first: "max_len".into(),
            second: "dataset".into(),
            message: format!(
                "training prefixes reach length {too_long} but max_len is {}",
                model_config.max_len
            ),
        });
    }

    let mut model = Model::init(model_config, config.seed)?;
    let mut adam = AdamState::new(&model.params);
    let batches = length_batches(&sessions, config.batch_size);
    let bidirectional = !model.config.architecture.is_causal();

    let mut outcome = TrainOutcome {
        model: model.clone(),
        best_epoch: 0,
        best_val_hr10: f64::NEG_INFINITY,
        log: Vec::new(),
        short_negative_sessions: Vec::new(),
        stopped_early: false,
        aborted: None,
    };
    let start = Instant::now();
    let mut since_best = 0;
    let mut global_batch = 0usize;

    'epochs: for epoch in 1..=config.epochs {
        let (negatives, short) = epoch_negatives(
            &sessions,
            model.config.vocab_size,
            loss.num_negatives,
            config.seed,
            epoch,
        );
        if short > 0 {
            log::warn!(
                "epoch {epoch}: {short} sessions had fewer than {} eligible negatives",
                loss.num_negatives
            );
        }
        outcome.short_negative_sessions.push(short);

        let mut mask_rng = substream(config.seed, Stream::Masking, epoch as u64);
        let masks: Vec<Vec<usize>> = sessions
            .iter()
            .map(|s| {
                if bidirectional {
                    // the last prefix position carries the end token
                    let n = s.prefix.len();
                    mask_sequence(&s.prefix.items()[..n - 1], model.config.mask_prob, &mut mask_rng).1
                } else {
                    Vec::new()
                }
            })
            .collect();

        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut substream(config.seed, Stream::Batching, epoch as u64));

        let (mut nll, mut nce, mut combined, mut counted) = (0.0, 0.0, 0.0, 0usize);
        for &b in &order {
            global_batch += 1;
            let examples: Vec<TrainingExample> = batches[b]
                .iter()
                .map(|&i| TrainingExample {
                    session: sessions[i].prefix.clone(),
                    negatives: negatives[i].clone(),
                    masked: masks[i].clone(),
                })
                .collect();
            // batches without a next-positive target are skipped
            let step = model
                .loss_and_gradients(&examples, loss, Reduction::Mean, true, global_batch)
                .and_then(|(breakdown, grads)| {
                    if breakdown.positions > 0 {
                        let grads = grads.expect("gradient requested");
                        adam_step(&mut model.params, &grads, &mut adam, config)?;
                    }
                    Ok(breakdown)
                });
            match step {
                Ok(breakdown) => {
                    if breakdown.positions > 0 {
                        nll += breakdown.nll;
                        nce += breakdown.nce;
                        combined += breakdown.combined;
                        counted += 1;
                    }
                }
                Err(e @ Error::Numeric { .. }) => {
                    let e = match e {
                        Error::Numeric { message, .. } => Error::Numeric {
                            batch: global_batch,
                            message,
                        },
                        other => other,
                    };
                    log::error!("training aborted in epoch {epoch}: {e}");
                    outcome.aborted = Some(e);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if !model.params.all_finite() {
            outcome.aborted = Some(Error::Numeric {
                batch: global_batch,
                message: "parameters became non-finite".into(),
            });
            break;
        }

        let val_hr10 = validation_hr10(&model, &sessions)?;
        let denom = counted.max(1) as f64;
        let record = EpochRecord {
            epoch,
            nll: nll / denom,
            nce: nce / denom,
            combined: combined / denom,
            val_hr10,
            wallclock_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        outcome.log.push(record);

        if val_hr10 > outcome.best_val_hr10 {
            outcome.best_val_hr10 = val_hr10;
            outcome.best_epoch = epoch;
            outcome.model = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    if outcome.best_epoch == 0 {
        outcome.best_val_hr10 = validation_hr10(&outcome.model, &sessions)?;
    }
    Ok(outcome)
}

/// Configuration block stored with a trained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpointConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub dataset_hash: String,
    pub best_epoch: usize,
    pub val_hr10: f64,
}

pub fn model_checkpoint(model: &Model, config: &ModelCheckpointConfig, vocab_hash: &str) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: MODEL_KIND.into(),
        config: serde_json::to_value(config)?,
        vocab_hash: vocab_hash.to_string(),
        tensors: model.params.clone(),
    })
}

/// Restores the encoder and its configuration block from a checkpoint.
pub fn load_model(checkpoint: &Checkpoint) -> Result<(Model, ModelCheckpointConfig)> {
    if checkpoint.kind != MODEL_KIND {
        return Err(Error::Integrity(format!(
            "checkpoint holds a `{}`, not a trained encoder",
            checkpoint.kind
        )));
    }
    let config: ModelCheckpointConfig = serde_json::from_value(checkpoint.config.clone())?;
    let model = Model::from_params(config.model.clone(), checkpoint.tensors.clone())?;
    Ok((model, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::models::Architecture;
    use crate::rng::stream;
    use crate::synthetic::{generate_dataset, SyntheticConfig};

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", Matrix::from_vec(1, 1, vec![v]));
        p
    }

    #[test]
    fn first_adam_step_closed_form() {
        let mut p = scalar_params(0.0);
        let g = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        let expected = -0.005 / (1.0 + 1e-8);
        assert!((p.flat().next().unwrap() - expected).abs() < 1e-18);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = scalar_params(0.3);
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &scalar_params(0.0), &mut s, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p.flat().next(), Some(0.3));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_params(0.3);
        let mut s = AdamState::new(&p);
        let r = adam_step(&mut p, &scalar_params(f64::NAN), &mut s, &TrainConfig::default());
        assert!(matches!(r, Err(Error::Numeric { .. })));
        assert_eq!(p.flat().next(), Some(0.3));
    }

    #[test]
    fn masking_extremes_and_rate() {
        let mut rng = stream(1, Stream::Masking);
        let items: Vec<usize> = (3..23).collect();
        let (m, pos) = mask_sequence(&items, 1.0, &mut rng);
        assert!(m.iter().all(|&t| t == crate::session_data::MASK));
        assert_eq!(pos.len(), 20);
        let (m, pos) = mask_sequence(&items, 0.0, &mut rng);
        assert_eq!(pos.len(), 1);
        assert_eq!(m.iter().filter(|&&t| t == crate::session_data::MASK).count(), 1);

        let trials = 10_000;
        let mut masked = 0usize;
        for _ in 0..trials {
            masked += mask_sequence(&items, 0.2, &mut rng).1.len();
        }
        let rate = masked as f64 / (trials * 20) as f64;
        // forcing adds P(no mask) / 20 on average
        let expected = 0.2 + 0.8f64.powi(20) / 20.0;
        let sigma = (0.2 * 0.8 / (trials * 20) as f64).sqrt();
        assert!((rate - expected).abs() < 3.0 * sigma, "rate {rate}");
    }

    fn tiny() -> Dataset {
        let cfg = SyntheticConfig {
            catalog_size: 40,
            latent_dim: 4,
            sessions: 60,
            session_length_range: (5, 9),
            skip_threshold: 0.0,
            coherence: 0.6,
            seed: 3,
        };
        generate_dataset(&cfg).unwrap().0
    }

    fn quick(arch: Architecture, vocab: usize) -> (ModelConfig, LossConfig, TrainConfig) {
        let mut m = ModelConfig::new(arch, vocab);
        m.embed_dim = 8;
        m.heads = 2;
        let loss = LossConfig {
            num_negatives: 10,
            ..LossConfig::default()
        };
        let t = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 5,
            patience: 0,
            ..TrainConfig::default()
        };
        (m, loss, t)
    }

    #[test]
    fn runs_are_reproducible_and_select_best() {
        let d = tiny();
        for arch in Architecture::ALL {
            let (m, l, t) = quick(arch, d.vocab.len());
            let a = train(&d, m.clone(), &l, &t).unwrap();
            let b = train(&d, m, &l, &t).unwrap();
            assert_eq!(a.model, b.model, "{arch}");
            assert_eq!(a.log.len(), 3);
            assert!(a.aborted.is_none());
            let best = a.log.iter().map(|r| r.val_hr10).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(a.best_val_hr10, best);
            assert_eq!(a.log[a.best_epoch - 1].val_hr10, best);
            assert!(a.log.iter().all(|r| r.combined.is_finite()));
        }
    }

    #[test]
    fn negatives_change_between_epochs() {
        let d = tiny();
        let s = training_sessions(&d);
        let (e1, _) = epoch_negatives(&s, d.vocab.len(), 5, 9, 1);
        let (e2, _) = epoch_negatives(&s, d.vocab.len(), 5, 9, 2);
        assert!(e1.iter().zip(&e2).any(|(a, b)| a != b));
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = tiny();
        let (m, l, mut t) = quick(Architecture::Recurrent, d.vocab.len());
        t.epochs = 1;
        let out = train(&d, m.clone(), &l, &t).unwrap();
        let cfg = ModelCheckpointConfig {
            model: m,
            loss: l,
            train: t,
            dataset_hash: d.content_hash(),
            best_epoch: out.best_epoch,
            val_hr10: out.best_val_hr10,
        };
        let ck = model_checkpoint(&out.model, &cfg, &d.vocab.hash()).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("x")).unwrap();
        let (model, c) = load_model(&back).unwrap();
        assert_eq!(model, out.model);
        assert_eq!(c, cfg);
    }

    #[test]
    fn bad_configs() {
        let d = tiny();
        let (m, l, mut t) = quick(Architecture::Recurrent, d.vocab.len());
        t.epochs = 0;
        assert!(train(&d, m.clone(), &l, &t).is_err());
        t.epochs = 1;
        let mut short = m.clone();
        short.max_len = 3;
        assert!(matches!(train(&d, short, &l, &t), Err(Error::Conflict { .. })));
        let mut wrong = m;
        wrong.vocab_size += 1;
        assert!(train(&d, wrong, &l, &t).is_err());
    }
}
