//! The interaction classifier: token/segment/position embeddings, a
//! post-norm transformer encoder, a residual 1-d conv stack, a
//! self-attention layer over the two KG drug vectors, and two MLPs.
//!
//! Parameters live in a [`ParamStore`] under dotted names so the encoder
//! half can be copied between the pretraining and fine-tuning models.
//! [`Forward`] records one pass on a fresh tape.

mod config;

pub use config::ModelConfig;

use kite_smiles::TokenSequence;
use kite_tensor::{BatchNormMode, BatchStats, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::seed::rng_for;

/// Prefixes shared by the pretraining and fine-tuning stores.
pub const TRANSFER_PREFIXES: [&str; 2] = ["embed.", "encoder."];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreKind {
    /// Embeddings, encoder and the masked-token head.
    Pretrain,
    /// Embeddings, encoder, conv stack, KG attention and both MLPs.
    Finetune,
}

struct Init<'s, T: Real, R: Rng> {
    store: &'s mut ParamStore<T>,
    rng: R,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)?;
        Ok(())
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data: Vec<T> = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)?;
        Ok(())
    }

    fn full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.store.add(name, Tensor::full(shape, T::of(v)))?;
        Ok(())
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.uniform(&format!("{prefix}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt())?;
        self.full(&format!("{prefix}.b"), &[d_out], 0.0)
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.full(&format!("{prefix}.gain"), &[d], 1.0)?;
        self.full(&format!("{prefix}.bias"), &[d], 0.0)
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.layer_norm(prefix, c)?;
        self.store
            .add_buffer(&format!("{prefix}.running_mean"), Tensor::full(&[c], T::zero()))?;
        self.store
            .add_buffer(&format!("{prefix}.running_var"), Tensor::full(&[c], T::one()))?;
        Ok(())
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{p}"), d, d)?;
        }
        Ok(())
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), d_in, hidden)?;
        self.batch_norm(&format!("{prefix}.bn"), hidden)?;
        self.linear(&format!("{prefix}.fc2"), hidden, d_out)
    }

    fn conv(&mut self, prefix: &str, c: usize, k: usize) -> Result<()> {
        self.uniform(&format!("{prefix}.w"), &[c, c, k], 1.0 / ((c * k) as f64).sqrt())?;
        self.full(&format!("{prefix}.b"), &[c], 0.0)
    }
}

/// Freshly initialized parameters. Weights are uniform in ±1/√fan_in,
/// embeddings and the masked-token head normal with std 0.02, biases zero.
pub fn init_store<T: Real>(config: &ModelConfig, kind: StoreKind, seed: u64) -> Result<ParamStore<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: rng_for(seed, "init"),
    };
    let d = config.d_model;
    init.normal("embed.token", &[config.vocab_size, d], 0.02)?;
    init.normal("embed.segment", &[config.n_segments, d], 0.02)?;
    init.normal("embed.position", &[config.max_len, d], 0.02)?;
    for i in 0..config.n_layers {
        let p = format!("encoder.{i}");
        init.attention(&format!("{p}.attn"), d)?;
        init.layer_norm(&format!("{p}.ln1"), d)?;
        init.linear(&format!("{p}.ffn.fc1"), d, config.d_ff)?;
        init.linear(&format!("{p}.ffn.fc2"), config.d_ff, d)?;
        init.layer_norm(&format!("{p}.ln2"), d)?;
    }
    match kind {
        StoreKind::Pretrain => {
            init.normal("mlm.w", &[d, config.vocab_size], 0.02)?;
            init.full("mlm.b", &[config.vocab_size], 0.0)?;
        }
        StoreKind::Finetune => {
            for k in 0..config.conv_blocks {
                let p = format!("conv.{k}");
                init.conv(&format!("{p}.conv1"), d, config.conv_kernel)?;
                init.batch_norm(&format!("{p}.bn1"), d)?;
                init.conv(&format!("{p}.conv2"), d, config.conv_kernel)?;
                init.batch_norm(&format!("{p}.bn2"), d)?;
            }
            init.mlp("mlp1", config.conv_flat(), config.mlp1_hidden, config.mlp1_out)?;
            init.attention("kg.attn", config.kg_dim / 2)?;
            init.layer_norm("kg.ln", config.kg_dim / 2)?;
            init.mlp("mlp2", config.fused_width(), config.mlp2_hidden, config.n_classes)?;
        }
    }
    Ok(store)
}

/// Number of trainable scalars of a store built by [`init_store`].
pub fn param_count(config: &ModelConfig, kind: StoreKind) -> usize {
    let d = config.d_model;
    let linear = |i: usize, o: usize| i * o + o;
    let attention = |w: usize| 4 * linear(w, w);
    let mlp = |i: usize, h: usize, o: usize| linear(i, h) + 2 * h + linear(h, o);
    let layer = attention(d) + 2 * d + linear(d, config.d_ff) + linear(config.d_ff, d) + 2 * d;
    let shared = (config.vocab_size + config.n_segments + config.max_len) * d + config.n_layers * layer;
    match kind {
        StoreKind::Pretrain => shared + linear(d, config.vocab_size),
        StoreKind::Finetune => {
            let block = 2 * (d * d * config.conv_kernel + d) + 4 * d;
            let half = config.kg_dim / 2;
            shared
                + config.conv_blocks * block
                + mlp(config.conv_flat(), config.mlp1_hidden, config.mlp1_out)
                + attention(half)
                + 2 * half
                + mlp(config.fused_width(), config.mlp2_hidden, config.n_classes)
        }
    }
}

/// Attention `softmax(QKᵀ/√d_k) V` over `[g, n, d_k]` inputs. Key `j` of
/// group `i` takes part only if `key_mask[(i / rep) * n + j]`, where
/// `rep = g · n / key_mask.len()`.
pub fn scaled_dot_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Var> {
    let d_k = *tape.shape(q).last().expect("rank 3") as f64;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::of(1.0 / d_k.sqrt()));
    let weights = tape.masked_softmax(scores, key_mask)?;
    Ok(tape.batch_matmul(weights, v, false)?)
}

/// One recorded forward pass.
pub struct Forward<'a, T: Real> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    config: &'a ModelConfig,
    rng: Option<&'a mut dyn RngCore>,
    /// Batch statistics of every batch norm in training mode, by prefix.
    pub bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Forward<'a, T> {
    /// Inference mode: no dropout, batch norm from running statistics.
    pub fn eval(config: &'a ModelConfig, store: &'a ParamStore<T>) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            config,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    /// Training mode: dropout drawn from `rng`, batch norm from batch
    /// statistics.
    pub fn train(config: &'a ModelConfig, store: &'a ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            config,
            rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| CoreError::Config(format!("model has no parameter {name}")))?;
        Ok(self.tape.param(self.store, id))
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.tape.linear(x, w, Some(b))?)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.tape.layer_norm(x, g, b, self.config.ln_eps)?)
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let eps = self.config.bn_eps;
        if self.is_training() {
            let (y, stats) = self.tape.batch_norm(x, g, b, BatchNormMode::Train, eps)?;
            self.bn_updates.push((prefix.to_string(), stats.expect("train mode reports stats")));
            Ok(y)
        } else {
            let buf = |s: &str| {
                self.store
                    .by_name(&format!("{prefix}.{s}"))
                    .map(|p| p.value.data())
                    .ok_or_else(|| CoreError::Config(format!("model has no buffer {prefix}.{s}")))
            };
            let (mean, var) = (buf("running_mean")?, buf("running_var")?);
            let (y, _) = self.tape.batch_norm(x, g, b, BatchNormMode::Eval { mean, var }, eps)?;
            Ok(y)
        }
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.config.dropout > 0.0 => Ok(self.tape.dropout(x, self.config.dropout, rng)?),
            _ => Ok(x),
        }
    }

    /// Multi-head self-attention of `[b, n, d]` input; `key_mask` has
    /// `b · n` flags.
    pub fn multi_head_attention(&mut self, x: Var, prefix: &str, heads: usize, key_mask: &[bool]) -> Result<Var> {
        let shape = self.tape.shape(x).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let split = |f: &mut Self, name: &str| -> Result<Var> {
            let y = f.linear(x, &format!("{prefix}.{name}"))?;
            let y = f.tape.reshape(y, &[b, n, heads, dh])?;
            let y = f.tape.permute(y, &[0, 2, 1, 3])?;
            Ok(f.tape.reshape(y, &[b * heads, n, dh])?)
        };
        let q = split(self, "q")?;
        let k = split(self, "k")?;
        let v = split(self, "v")?;
        let heads_out = scaled_dot_attention(&mut self.tape, q, k, v, key_mask)?;
        let y = self.tape.reshape(heads_out, &[b, heads, n, dh])?;
        let y = self.tape.permute(y, &[0, 2, 1, 3])?;
        let y = self.tape.reshape(y, &[b, n, d])?;
        self.linear(y, &format!("{prefix}.o"))
    }

    /// Sum of token, segment and position embeddings, `[b, len, d]`, and
    /// the key mask of real tokens.
    pub fn embed(&mut self, seqs: &[&TokenSequence]) -> Result<(Var, Vec<bool>)> {
        let first = seqs.first().ok_or_else(|| CoreError::Data("empty batch".into()))?;
        let len = first.len();
        if len == 0 || len > self.config.max_len || seqs.iter().any(|s| s.len() != len) {
            return Err(CoreError::Data(format!(
                "batch sequences must share one length between 1 and {}",
                self.config.max_len
            )));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * len);
        let mut segments = Vec::with_capacity(seqs.len() * len);
        let mut positions = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            tokens.extend_from_slice(&s.ids);
            segments.extend(s.segments.iter().map(|&g| g as usize));
            positions.extend(0..len);
            mask.extend_from_slice(&s.mask);
        }
        let table = self.p("embed.token")?;
        let t = self.tape.gather_rows(table, &tokens)?;
        let table = self.p("embed.segment")?;
        let g = self.tape.gather_rows(table, &segments)?;
        let table = self.p("embed.position")?;
        let p = self.tape.gather_rows(table, &positions)?;
        let sum = self.tape.add(t, g)?;
        let sum = self.tape.add(sum, p)?;
        let x = self.tape.reshape(sum, &[seqs.len(), len, self.config.d_model])?;
        Ok((x, mask))
    }

    /// Post-norm encoder layers over `[b, len, d]`.
    pub fn encoder(&mut self, mut x: Var, mask: &[bool]) -> Result<Var> {
        for i in 0..self.config.n_layers {
            let p = format!("encoder.{i}");
            let a = self.multi_head_attention(x, &format!("{p}.attn"), self.config.n_heads, mask)?;
            let a = self.dropout(a)?;
            let r = self.tape.add(x, a)?;
            x = self.layer_norm(r, &format!("{p}.ln1"))?;
            let h = self.linear(x, &format!("{p}.ffn.fc1"))?;
            let h = self.tape.relu(h);
            let h = self.linear(h, &format!("{p}.ffn.fc2"))?;
            let h = self.dropout(h)?;
            let r = self.tape.add(x, h)?;
            x = self.layer_norm(r, &format!("{p}.ln2"))?;
        }
        Ok(x)
    }

    /// Embeddings followed by the encoder.
    pub fn encode(&mut self, seqs: &[&TokenSequence]) -> Result<(Var, Vec<bool>)> {
        let (x, mask) = self.embed(seqs)?;
        Ok((self.encoder(x, &mask)?, mask))
    }

    /// Residual conv blocks with max pooling, flattened to `[b, flat]`.
    pub fn conv_module(&mut self, h: Var) -> Result<Var> {
        let b = self.tape.shape(h)[0];
        let mut x = self.tape.permute(h, &[0, 2, 1])?;
        let pad = self.config.conv_kernel / 2;
        for k in 0..self.config.conv_blocks {
            let p = format!("conv.{k}");
            let w = self.p(&format!("{p}.conv1.w"))?;
            let bias = self.p(&format!("{p}.conv1.b"))?;
            let y = self.tape.conv1d(x, w, bias, 1, pad)?;
            let y = self.batch_norm(y, &format!("{p}.bn1"))?;
            let y = self.tape.relu(y);
            let w = self.p(&format!("{p}.conv2.w"))?;
            let bias = self.p(&format!("{p}.conv2.b"))?;
            let y = self.tape.conv1d(y, w, bias, 1, pad)?;
            let y = self.batch_norm(y, &format!("{p}.bn2"))?;
            let r = self.tape.add(x, y)?;
            x = self.tape.max_pool1d(r, self.config.pool_stride, self.config.pool_stride)?;
        }
        let flat = self.tape.value(x).numel() / b;
        Ok(self.tape.reshape(x, &[b, flat])?)
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.batch_norm(h, &format!("{prefix}.bn"))?;
        let h = self.tape.leaky_relu(h, T::of(self.config.leaky_slope));
        self.linear(h, &format!("{prefix}.fc2"))
    }

    /// Self-attention between the two drug halves of `[b, kg_dim]` pair
    /// vectors, with residual and layer norm.
    pub fn kg_attention(&mut self, pair: Var) -> Result<Var> {
        let b = self.tape.shape(pair)[0];
        let half = self.config.kg_dim / 2;
        let x = self.tape.reshape(pair, &[b, 2, half])?;
        let mask = vec![true; b * 2];
        let a = self.multi_head_attention(x, "kg.attn", self.config.kg_heads, &mask)?;
        let r = self.tape.add(x, a)?;
        let y = self.layer_norm(r, "kg.ln")?;
        Ok(self.tape.reshape(y, &[b, self.config.kg_dim])?)
    }

    /// Class logits `[b, n_classes]` for encoded pairs and their row-major
    /// `[b, kg_dim]` KG vectors.
    pub fn logits(&mut self, seqs: &[&TokenSequence], kg: &[f32]) -> Result<Var> {
        let b = seqs.len();
        if kg.len() != b * self.config.kg_dim {
            return Err(CoreError::Data(format!(
                "{} KG values for {b} pairs of width {}",
                kg.len(),
                self.config.kg_dim
            )));
        }
        if seqs.iter().any(|s| s.len() != self.config.max_len) {
            return Err(CoreError::Data(format!(
                "classifier input must be padded to {} tokens",
                self.config.max_len
            )));
        }
        let (h, _) = self.encode(seqs)?;
        let conv = self.conv_module(h)?;
        let m1 = self.mlp(conv, "mlp1")?;
        let pair = Tensor::new(vec![b, self.config.kg_dim], kg.iter().map(|&v| T::of(f64::from(v))).collect())?;
        let pair = self.tape.constant(pair);
        let kg = self.kg_attention(pair)?;
        let fused = self.tape.concat(&[m1, kg], 1)?;
        self.mlp(fused, "mlp2")
    }

    /// Vocabulary logits `[k, vocab]` at flat positions `batch · len + i`.
    pub fn mlm_logits(&mut self, seqs: &[&TokenSequence], positions: &[usize]) -> Result<Var> {
        let (h, _) = self.encode(seqs)?;
        let shape = self.tape.shape(h).to_vec();
        let flat = self.tape.reshape(h, &[shape[0] * shape[1], shape[2]])?;
        let rows = self.tape.gather_rows(flat, positions)?;
        self.linear(rows, "mlm")
    }
}

/// Folds training-mode batch statistics into the running buffers.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for (prefix, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let id = store
                .id(&name)
                .ok_or_else(|| CoreError::Config(format!("model has no buffer {name}")))?;
            for (r, &b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
    Ok(())
}
