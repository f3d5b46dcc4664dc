//! Masked-token pretraining and supervised fine-tuning.

mod checkpoint;
mod masking;

pub use checkpoint::{sha256_hex, AdamSettings, Checkpoint, CheckpointKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use masking::{make_pretrain_pairs, mask_count, mask_sequence, pretrain_partners, MaskingPlan};

use kite_smiles::{encode_pair, randomize_smiles, TokenSequence, Vocabulary};
use kite_tensor::{Adam, AdamConfig, ParamStore, Var, WeightDecay};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{CoreError, Result};
use crate::kg::{pair_embedding, IdMap, MissCounter, NamedEmbeddings};
use crate::metrics::argmax;
use crate::model::{apply_bn_updates, Forward, ModelConfig};
use crate::seed::{derive_seed, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 700,
            batch_size: 8,
            lr: 1e-5,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr <= 0.0 || !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(CoreError::Config(format!("invalid pretraining settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Re-spell both SMILES of every training pair each epoch.
    pub randomize: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            batch_size: 32,
            lr: 5e-5,
            weight_decay: 1e-5,
            randomize: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::Config(format!("invalid fine-tuning settings {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            decay: WeightDecay::Coupled,
            ..AdamConfig::new(self.lr).with_weight_decay(self.weight_decay)
        }
    }
}

/// Batch boundaries; a trailing batch of one sample is folded into the
/// previous batch so batch statistics always see two or more rows.
pub fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n).step_by(batch.max(1)).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Cuts trailing positions that are padding in every sequence. Attention
/// never reads padded keys, so real positions are unaffected.
pub fn trim_padding(seqs: &[TokenSequence]) -> Vec<TokenSequence> {
    let keep = seqs.iter().map(|s| s.real_len()).max().unwrap_or(0).max(1);
    seqs.iter()
        .map(|s| {
            let n = keep.min(s.len());
            TokenSequence {
                ids: s.ids[..n].to_vec(),
                segments: s.segments[..n].to_vec(),
                mask: s.mask[..n].to_vec(),
                full_len: s.full_len,
            }
        })
        .collect()
}

fn check_finite(loss: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite {
            what: what.to_string(),
            epoch,
            step,
        })
    }
}

/// One optimizer step from a recorded loss.
fn apply_step(
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    tape: &kite_tensor::Tape<f32>,
    loss: Var,
    bn: &[(String, kite_tensor::BatchStats<f32>)],
    momentum: f64,
) -> Result<()> {
    store.zero_grad();
    tape.backward_into(loss, store)?;
    adam.step(store)?;
    apply_bn_updates(store, bn, momentum)
}

/// Masked pairs with their targets, ready for the masked-token head.
pub struct MaskedBatch {
    pub seqs: Vec<TokenSequence>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MaskedBatch {
    pub fn new<R: rand::Rng + ?Sized>(pairs: &[TokenSequence], rate: f64, rng: &mut R) -> Self {
        let mut seqs = Vec::with_capacity(pairs.len());
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        let masked: Vec<_> = pairs.iter().map(|p| mask_sequence(p, rate, rng)).collect();
        let masked_seqs: Vec<TokenSequence> = masked.iter().map(|(s, _)| s.clone()).collect();
        let trimmed = trim_padding(&masked_seqs);
        let len = trimmed.first().map_or(0, TokenSequence::len);
        for (b, ((_, plan), s)) in masked.into_iter().zip(trimmed).enumerate() {
            positions.extend(plan.positions.iter().map(|&p| b * len + p));
            targets.extend(plan.originals);
            seqs.push(s);
        }
        MaskedBatch {
            seqs,
            positions,
            targets,
        }
    }
}

/// Mean cross entropy at masked positions, or `None` if nothing was masked.
pub fn masked_loss(forward: &mut Forward<'_, f32>, batch: &MaskedBatch) -> Result<Option<Var>> {
    if batch.positions.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&TokenSequence> = batch.seqs.iter().collect();
    let logits = forward.mlm_logits(&refs, &batch.positions)?;
    Ok(Some(forward.tape.cross_entropy(logits, &batch.targets)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean masked-token loss over the epoch's training batches.
    pub train_loss: f64,
    /// Eval-mode loss on the fixed probe batches.
    pub probe_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Probe loss of the weights before the first step.
    pub initial_probe_loss: f64,
    pub epochs: Vec<PretrainEpoch>,
}

/// Mean eval-mode loss over fixed masked batches, weighted by masked count.
pub fn probe_loss(store: &ParamStore<f32>, model: &ModelConfig, batches: &[MaskedBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let mut f = Forward::eval(model, store);
        if let Some(loss) = masked_loss(&mut f, b)? {
            total += f64::from(f.tape.value(loss).item()) * b.targets.len() as f64;
            count += b.targets.len();
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Fixed probe: one pairing and masking of the corpus from its own stream.
pub fn probe_batches(
    corpus: &[String],
    vocab: &Vocabulary,
    model: &ModelConfig,
    config: &PretrainConfig,
) -> Result<Vec<MaskedBatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pretrain.probe"));
    let pairs = make_pretrain_pairs(corpus, vocab, model.max_len, &mut rng)?;
    Ok(batch_ranges(pairs.len(), config.batch_size)
        .into_iter()
        .map(|r| MaskedBatch::new(&pairs[r], config.mask_rate, &mut rng))
        .collect())
}

/// Trains embeddings, encoder and masked-token head in `store`.
/// `on_epoch` sees every finished epoch and may stop the run by
/// returning `false`.
pub fn mlm_pretrain(
    store: &mut ParamStore<f32>,
    model: &ModelConfig,
    corpus: &[String],
    vocab: &Vocabulary,
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(&PretrainEpoch, &ParamStore<f32>) -> bool,
) -> Result<(PretrainReport, Adam<f32>, ChaCha8Rng)> {
    config.validate()?;
    model.validate()?;
    if vocab.len() != model.vocab_size {
        return Err(CoreError::Config(format!(
            "model.vocab_size {} but the vocabulary has {} tokens",
            model.vocab_size,
            vocab.len()
        )));
    }
    let probe = probe_batches(corpus, vocab, model, config)?;
    let initial_probe_loss = probe_loss(store, model, &probe)?;
    check_finite(initial_probe_loss, "initial masked-token loss", 0, 0)?;
    let mut adam = Adam::new(AdamConfig::new(config.lr), store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "pretrain"));
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut pairs = make_pretrain_pairs(corpus, vocab, model.max_len, &mut rng)?;
        pairs.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, r) in batch_ranges(pairs.len(), config.batch_size).into_iter().enumerate() {
            let batch = MaskedBatch::new(&pairs[r], config.mask_rate, &mut rng);
            let mut f = Forward::train(model, store, &mut rng);
            let Some(loss) = masked_loss(&mut f, &batch)? else {
                continue;
            };
            let Forward { tape, bn_updates, .. } = f;
            let value = f64::from(tape.value(loss).item());
            check_finite(value, "masked-token loss", epoch, step)?;
            apply_step(store, &mut adam, &tape, loss, &bn_updates, model.bn_momentum)?;
            sum += value * batch.targets.len() as f64;
            count += batch.targets.len();
        }
        let record = PretrainEpoch {
            epoch,
            train_loss: if count == 0 { 0.0 } else { sum / count as f64 },
            probe_loss: probe_loss(store, model, &probe)?,
        };
        check_finite(record.probe_loss, "probe masked-token loss", epoch, 0)?;
        epochs.push(record);
        if !on_epoch(&record, store) {
            break;
        }
    }
    Ok((
        PretrainReport {
            initial_probe_loss,
            epochs,
        },
        adam,
        rng,
    ))
}

/// Drug pairs with labels and KG pair vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub smiles: Vec<(String, String)>,
    pub labels: Vec<usize>,
    /// Row-major `[len, kg_dim]`.
    pub kg: Vec<f32>,
    pub kg_dim: usize,
}

impl PairSet {
    /// Selected events of `dataset`. Without a KG table every pair vector
    /// is zero; drugs missing from the table are counted in `misses`.
    pub fn from_events(
        dataset: &Dataset,
        events: &[usize],
        kg: Option<&NamedEmbeddings>,
        id_map: &IdMap,
        kg_dim: usize,
        misses: &mut MissCounter,
    ) -> Result<Self> {
        if let Some(t) = kg {
            if 2 * t.dim != kg_dim {
                return Err(CoreError::Config(format!(
                    "model.kg_dim {kg_dim} is not twice the KG embedding width {}",
                    t.dim
                )));
            }
        }
        let mut set = PairSet {
            smiles: Vec::with_capacity(events.len()),
            labels: Vec::with_capacity(events.len()),
            kg: Vec::with_capacity(events.len() * kg_dim),
            kg_dim,
        };
        for &i in events {
            let e = dataset
                .events
                .get(i)
                .ok_or_else(|| CoreError::Data(format!("event index {i} out of range")))?;
            let (a, b) = dataset.smiles_of(e);
            set.smiles.push((a.to_string(), b.to_string()));
            set.labels.push(e.label);
            match kg {
                Some(t) => set.kg.extend(pair_embedding(
                    &dataset.drugs[e.a].id,
                    &dataset.drugs[e.b].id,
                    t,
                    id_map,
                    misses,
                )),
                None => set.kg.extend(std::iter::repeat_n(0.0, kg_dim)),
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn kg_rows(&self, idx: &[usize]) -> Vec<f32> {
        idx.iter()
            .flat_map(|&i| &self.kg[i * self.kg_dim..(i + 1) * self.kg_dim])
            .copied()
            .collect()
    }

    fn check(&self, model: &ModelConfig) -> Result<()> {
        if self.kg_dim != model.kg_dim || self.kg.len() != self.len() * self.kg_dim {
            return Err(CoreError::Config(format!(
                "pair vectors of width {} for a model with kg_dim {}",
                self.kg_dim, model.kg_dim
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= model.n_classes) {
            return Err(CoreError::Data(format!("class label {l} >= n_classes {}", model.n_classes)));
        }
        Ok(())
    }
}

/// Stored-form encodings of every pair.
pub fn encode_set(set: &PairSet, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    set.smiles
        .iter()
        .map(|(a, b)| Ok(encode_pair(a, b, vocab, max_len)?))
        .collect()
}

/// Eval-mode class probabilities, row-major `[len, n_classes]`, in double
/// precision.
pub fn predict(
    store: &ParamStore<f32>,
    model: &ModelConfig,
    vocab: &Vocabulary,
    set: &PairSet,
    batch_size: usize,
) -> Result<Vec<f64>> {
    set.check(model)?;
    let seqs = encode_set(set, vocab, model.max_len)?;
    let mut probs = Vec::with_capacity(set.len() * model.n_classes);
    for r in (0..set.len()).step_by(batch_size.max(1)).map(|s| s..(s + batch_size).min(set.len())) {
        let idx: Vec<usize> = r.collect();
        let refs: Vec<&TokenSequence> = idx.iter().map(|&i| &seqs[i]).collect();
        let mut f = Forward::eval(model, store);
        let logits = f.logits(&refs, &set.kg_rows(&idx))?;
        for row in f.tape.value(logits).data().chunks(model.n_classes) {
            probs.extend(softmax_f64(row));
        }
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(CoreError::NonFinite {
            what: "class probabilities".into(),
            epoch: 0,
            step: 0,
        });
    }
    Ok(probs)
}

pub fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().map(|&v| f64::from(v)).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Accuracy and mean cross entropy of eval-mode predictions.
pub fn accuracy_and_loss(probs: &[f64], labels: &[usize], m: usize) -> (f64, f64) {
    if labels.is_empty() {
        return (0.0, 0.0);
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, &y) in probs.chunks(m).zip(labels) {
        correct += usize::from(argmax(row) == y);
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
    }
    let n = labels.len() as f64;
    (correct as f64 / n, loss / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

pub struct FinetuneOutcome {
    pub history: Vec<FinetuneEpoch>,
    /// Parameters of the epoch with the highest eval accuracy (earliest on
    /// ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    /// State after the final epoch.
    pub last: Checkpoint,
}

/// Training loop over `train`, selecting the best epoch on `eval`.
/// `vocab` must be the vocabulary the embeddings were built for.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    mut store: ParamStore<f32>,
    model: &ModelConfig,
    vocab: &Vocabulary,
    train: &PairSet,
    eval: &PairSet,
    config: &FinetuneConfig,
    fingerprint: &str,
    mut on_epoch: impl FnMut(&FinetuneEpoch),
) -> Result<FinetuneOutcome> {
    config.validate()?;
    model.validate()?;
    train.check(model)?;
    eval.check(model)?;
    if train.is_empty() {
        return Err(CoreError::Data("empty training split".into()));
    }
    let mut adam = Adam::new(config.adam(), &store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "finetune"));
    let stored = encode_set(train, vocab, model.max_len)?;
    let snapshot = |store: &ParamStore<f32>, adam: &Adam<f32>, rng: &ChaCha8Rng, epoch: usize, acc: f64| Checkpoint {
        kind: CheckpointKind::Finetune,
        model: model.clone(),
        vocab: vocab.tokens().to_vec(),
        epoch: epoch as u64,
        rng: RngState::capture(rng),
        fingerprint: fingerprint.to_string(),
        store: store.clone(),
        optimizer: Some(adam.clone()),
        meta: serde_json::json!({ "eval_accuracy": acc }),
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, r) in batch_ranges(order.len(), config.batch_size).into_iter().enumerate() {
            let idx = &order[r];
            let seqs: Vec<TokenSequence> = if config.randomize {
                idx.iter()
                    .map(|&i| {
                        let (a, b) = &train.smiles[i];
                        let a = randomize_smiles(a, &mut rng)?;
                        let b = randomize_smiles(b, &mut rng)?;
                        Ok(encode_pair(&a, &b, vocab, model.max_len)?)
                    })
                    .collect::<Result<_>>()?
            } else {
                idx.iter().map(|&i| stored[i].clone()).collect()
            };
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let targets: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut f = Forward::train(model, &store, &mut rng);
            let logits = f.logits(&refs, &train.kg_rows(idx))?;
            let loss = f.tape.cross_entropy(logits, &targets)?;
            let Forward { tape, bn_updates, .. } = f;
            let value = f64::from(tape.value(loss).item());
            check_finite(value, "classification loss", epoch, step)?;
            for (row, &y) in tape.value(logits).data().chunks(model.n_classes).zip(&targets) {
                let row: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
                correct += usize::from(argmax(&row) == y);
            }
            apply_step(&mut store, &mut adam, &tape, loss, &bn_updates, model.bn_momentum)?;
            loss_sum += value * idx.len() as f64;
        }
        let (eval_accuracy, eval_loss) = if eval.is_empty() {
            (0.0, 0.0)
        } else {
            let probs = predict(&store, model, vocab, eval, config.batch_size)?;
            accuracy_and_loss(&probs, &eval.labels, model.n_classes)
        };
        let record = FinetuneEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_loss,
            eval_accuracy,
        };
        history.push(record);
        on_epoch(&record);
        if best.as_ref().is_none_or(|(acc, _, _)| eval_accuracy > *acc) {
            best = Some((eval_accuracy, epoch, snapshot(&store, &adam, &rng, epoch, eval_accuracy)));
        }
    }
    let last_acc = history.last().map_or(0.0, |h| h.eval_accuracy);
    let last = snapshot(&store, &adam, &rng, config.epochs, last_acc);
    let (best_epoch, best) = match best {
        Some((_, e, c)) => (e, c),
        None => (0, last.clone()),
    };
    Ok(FinetuneOutcome {
        history,
        best,
        best_epoch,
        last,
    })
}

pub fn pretrain_history_csv(report: &PretrainReport) -> String {
    let mut out = String::from("epoch,train_loss,probe_loss\n");
    out.push_str(&format!("0,,{}\n", report.initial_probe_loss));
    for e in &report.epochs {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.probe_loss));
    }
    out
}

pub fn finetune_history_csv(history: &[FinetuneEpoch]) -> String {
    let mut out = String::from("epoch,train_loss,train_accuracy,eval_loss,eval_accuracy\n");
    for e in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.train_accuracy, e.eval_loss, e.eval_accuracy
        ));
    }
    out
}
