//! Decoder-only transformer over solvent property sequences.
//!
//! Position layout: an optional solvent-type token at position 0, followed by
//! the 12 property items. Each item embeds as `prop_embed[p] + valueProj(v)`,
//! or `prop_embed[p] + mask_embed` when the value is hidden or missing. There
//! are no positional embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var, MASK_NEG};
use crate::dataio::N_PROPS;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::seqgen::MaskedBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub n_properties: usize,
    pub type_vocab: usize,
    pub dropout: f64,
    pub use_type_token: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 16,
            layers: 5,
            ffn_dim: 256,
            n_properties: N_PROPS,
            type_vocab: 1,
            dropout: 0.1,
            use_type_token: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layers and ffn_dim must be positive".into()));
        }
        if self.n_properties != N_PROPS {
            return Err(Error::Config(format!("n_properties must be {N_PROPS}")));
        }
        if self.type_vocab == 0 {
            return Err(Error::Config("type_vocab must include the unknown token".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Sequence length seen by the model.
    pub fn seq_len(&self) -> usize {
        N_PROPS + self.offset()
    }

    /// Position of the first property item.
    pub fn offset(&self) -> usize {
        usize::from(self.use_type_token)
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles plus configuration; owns no weights.
#[derive(Debug, Clone)]
pub struct Layout {
    pub config: ModelConfig,
    prop_embed: ParamId,
    type_embed: ParamId,
    mask_embed: ParamId,
    value_w: ParamId,
    value_b: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter, in store order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let lin = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let mut v = vec![
        ("prop_embed".to_string(), vec![N_PROPS, d], Init::Normal(1.0)),
        ("type_embed".to_string(), vec![c.type_vocab, d], Init::Normal(1.0)),
        ("mask_embed".to_string(), vec![1, d], Init::Normal(1.0)),
        ("value_w".to_string(), vec![1, d], Init::Normal(1.0)),
        ("value_b".to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..c.layers {
        let p = |s: &str| format!("block{l}.{s}");
        v.extend([
            (p("ln1.g"), vec![d], Init::Ones),
            (p("ln1.b"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], lin(d)),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], lin(d)),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], lin(d)),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], lin(d)),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.g"), vec![d], Init::Ones),
            (p("ln2.b"), vec![d], Init::Zeros),
            (p("ffn.w1"), vec![d, c.ffn_dim], lin(d)),
            (p("ffn.b1"), vec![c.ffn_dim], Init::Zeros),
            (p("ffn.w2"), vec![c.ffn_dim, d], lin(c.ffn_dim)),
            (p("ffn.b2"), vec![d], Init::Zeros),
        ]);
    }
    v.extend([
        ("lnf.g".to_string(), vec![d], Init::Ones),
        ("lnf.b".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, N_PROPS], lin(d)),
        ("head.b".to_string(), vec![N_PROPS], Init::Zeros),
    ]);
    v
}

impl Layout {
    /// Handles for a store filled in `param_specs` order.
    fn from_order(config: ModelConfig, ids: Vec<ParamId>) -> Self {
        let mut it = ids.into_iter();
        let mut next = || it.next().expect("parameter count matches layout");
        let (prop_embed, type_embed, mask_embed, value_w, value_b) = (next(), next(), next(), next(), next());
        let blocks = (0..config.layers)
            .map(|_| BlockIds {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let (lnf_g, lnf_b, head_w, head_b) = (next(), next(), next(), next());
        Self { config, prop_embed, type_embed, mask_embed, value_w, value_b, blocks, lnf_g, lnf_b, head_w, head_b }
    }

    /// Additive attention bias `[B * heads, L, L]`: query `i` may see key `j`
    /// when `j <= i` and the key is not a missing value (itself always).
    pub fn attention_bias<T: Scalar>(&self, batch: &MaskedBatch) -> Tensor<T> {
        let (l, h, off) = (self.config.seq_len(), self.config.heads, self.config.offset());
        let neg = T::of(MASK_NEG);
        let mut data = Vec::with_capacity(batch.size * h * l * l);
        for b in 0..batch.size {
            let hidden = |j: usize| j >= off && batch.missing[b * N_PROPS + j - off];
            let mut block = vec![T::zero(); l * l];
            for i in 0..l {
                for j in 0..l {
                    if j > i || (j != i && hidden(j)) {
                        block[i * l + j] = neg;
                    }
                }
            }
            for _ in 0..h {
                data.extend_from_slice(&block);
            }
        }
        Tensor::new(vec![batch.size * h, l, l], data).expect("mask shape")
    }

    fn embed<T: Scalar>(&self, t: &mut Tape<T>, p: &Bound, batch: &MaskedBatch) -> Result<Var> {
        let (bsz, d) = (batch.size, self.config.d_model);
        let n = bsz * N_PROPS;
        if batch.props.len() != n || batch.values.len() != n || batch.missing.len() != n || batch.masked.len() != n {
            return Err(Error::Shape(format!("batch arrays do not match size {bsz}")));
        }
        let visible: Vec<bool> = batch.masked.iter().zip(&batch.missing).map(|(&m, &x)| !m && !x).collect();
        let vals: Vec<T> =
            batch.values.iter().zip(&visible).map(|(&v, &s)| if s { T::of(v) } else { T::zero() }).collect();
        let mut keep = Vec::with_capacity(n * d);
        let mut hide = Vec::with_capacity(n * d);
        for &s in &visible {
            let (k, h) = if s { (T::one(), T::zero()) } else { (T::zero(), T::one()) };
            keep.extend(std::iter::repeat_n(k, d));
            hide.extend(std::iter::repeat_n(h, d));
        }
        let props = t.gather_rows(p.get(self.prop_embed), &batch.props)?;
        let vals = t.constant(Tensor::new(vec![n, 1], vals)?);
        let proj = t.linear(vals, p.get(self.value_w), p.get(self.value_b))?;
        let keep = t.constant(Tensor::new(vec![n, d], keep)?);
        let proj = t.mul(proj, keep)?;
        let mask = t.gather_rows(p.get(self.mask_embed), &vec![0; n])?;
        let hide = t.constant(Tensor::new(vec![n, d], hide)?);
        let mask = t.mul(mask, hide)?;
        let x = t.add(props, proj)?;
        let x = t.add(x, mask)?;
        let x = t.reshape(x, &[bsz, N_PROPS, d])?;
        if !self.config.use_type_token {
            return Ok(x);
        }
        if let Some(&bad) = batch.type_tokens.iter().find(|&&k| k >= self.config.type_vocab) {
            return Err(Error::Shape(format!("type token {bad} outside vocabulary of {}", self.config.type_vocab)));
        }
        let ty = t.gather_rows(p.get(self.type_embed), &batch.type_tokens)?;
        let ty = t.reshape(ty, &[bsz, 1, d])?;
        t.concat(&[ty, x], 1)
    }

    fn split_heads<T: Scalar>(&self, t: &mut Tape<T>, x: Var, bsz: usize) -> Result<Var> {
        let (l, h) = (self.config.seq_len(), self.config.heads);
        let dh = self.config.d_model / h;
        let x = t.reshape(x, &[bsz, l, h, dh])?;
        let x = t.permute(x, &[0, 2, 1, 3])?;
        t.reshape(x, &[bsz * h, l, dh])
    }

    fn block<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        ids: &BlockIds,
        x: Var,
        bias: Var,
        bsz: usize,
        rng: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        let (l, h, d) = (c.seq_len(), c.heads, c.d_model);
        let dh = d / h;
        let y = t.layer_norm(x, p.get(ids.ln1_g), p.get(ids.ln1_b))?;
        let q = t.linear(y, p.get(ids.wq), p.get(ids.bq))?;
        let k = t.linear(y, p.get(ids.wk), p.get(ids.bk))?;
        let v = t.linear(y, p.get(ids.wv), p.get(ids.bv))?;
        let (q, k, v) = (self.split_heads(t, q, bsz)?, self.split_heads(t, k, bsz)?, self.split_heads(t, v, bsz)?);
        let s = t.bmm(q, k, true)?;
        let s = t.scale(s, 1.0 / (dh as f64).sqrt());
        let s = t.add(s, bias)?;
        let a = t.softmax(s);
        let o = t.bmm(a, v, false)?;
        let o = t.reshape(o, &[bsz, h, l, dh])?;
        let o = t.permute(o, &[0, 2, 1, 3])?;
        let o = t.reshape(o, &[bsz, l, d])?;
        let o = t.linear(o, p.get(ids.wo), p.get(ids.bo))?;
        let o = self.maybe_dropout(t, o, rng);
        let x = t.add(x, o)?;
        let y = t.layer_norm(x, p.get(ids.ln2_g), p.get(ids.ln2_b))?;
        let f = t.linear(y, p.get(ids.w1), p.get(ids.b1))?;
        let f = t.gelu(f);
        let f = t.linear(f, p.get(ids.w2), p.get(ids.b2))?;
        let f = self.maybe_dropout(t, f, rng);
        t.add(x, f)
    }

    fn maybe_dropout<T: Scalar>(&self, t: &mut Tape<T>, x: Var, rng: &mut Option<&mut Rng>) -> Var {
        match rng {
            Some(r) if self.config.dropout > 0.0 => t.dropout(x, self.config.dropout, r),
            _ => x,
        }
    }

    /// Record a forward pass. Dropout is active only when `rng` is given.
    pub fn forward<T: Scalar>(
        &self,
        t: &mut Tape<T>,
        p: &Bound,
        batch: &MaskedBatch,
        mut rng: Option<&mut Rng>,
    ) -> Result<Forward> {
        let bsz = batch.size;
        let mut x = self.embed(t, p, batch)?;
        let bias = t.constant(self.attention_bias(batch));
        for ids in &self.blocks {
            x = self.block(t, p, ids, x, bias, bsz, &mut rng)?;
        }
        let hidden = t.layer_norm(x, p.get(self.lnf_g), p.get(self.lnf_b))?;
        let preds = t.linear(hidden, p.get(self.head_w), p.get(self.head_b))?;
        Ok(Forward { hidden, preds })
    }

    /// Mean squared error over masked positions, each scored on the head
    /// column of its own property.
    pub fn masked_loss<T: Scalar>(&self, t: &mut Tape<T>, fwd: &Forward, batch: &MaskedBatch) -> Result<Var> {
        let (l, off) = (self.config.seq_len(), self.config.offset());
        let rows = batch.size * l;
        let mut cols = vec![0usize; rows];
        let mut target = vec![T::zero(); rows];
        let mut selected = vec![false; rows];
        for b in 0..batch.size {
            for i in 0..N_PROPS {
                let (r, k) = (b * l + off + i, b * N_PROPS + i);
                cols[r] = batch.props[k];
                if batch.masked[k] {
                    selected[r] = true;
                    target[r] = T::of(batch.targets[k]);
                }
            }
        }
        if !selected.iter().any(|&s| s) {
            return Err(Error::Training("batch has no masked positions".into()));
        }
        let flat = t.reshape(fwd.preds, &[rows, N_PROPS])?;
        let picked = t.gather_last(flat, &cols)?;
        t.masked_mse(picked, &target, &selected)
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Final-layer-norm output `[B, L, d_model]`.
    pub hidden: Var,
    /// Head output `[B, L, 12]`.
    pub preds: Var,
}

/// Evaluated forward outputs as plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs<T> {
    pub hidden: Tensor<T>,
    pub preds: Tensor<T>,
}

impl<T: Scalar> Outputs<T> {
    /// Prediction for item `i` of example `b` on its own property column.
    pub fn item_prediction(&self, config: &ModelConfig, batch: &MaskedBatch, b: usize, i: usize) -> f64 {
        let row = b * config.seq_len() + config.offset() + i;
        self.preds.data()[row * N_PROPS + batch.props[b * N_PROPS + i]].as_f64()
    }

    /// Hidden state at the last position of example `b`.
    pub fn last_hidden(&self, config: &ModelConfig, b: usize) -> &[T] {
        let (l, d) = (config.seq_len(), config.d_model);
        let start = (b * l + l - 1) * d;
        &self.hidden.data()[start..start + d]
    }
}

/// Weights plus layout.
#[derive(Debug, Clone)]
pub struct Transformer<T> {
    pub layout: Layout,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ids = param_specs(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Normal(std) => Tensor::randn(&shape, std, rng),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                };
                store.add(name, value)
            })
            .collect();
        Ok(Self { layout: Layout::from_order(config, ids), store })
    }

    /// Rebuild from named tensors; names and shapes must match the layout.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", specs.len(), tensors.len())));
        }
        let mut store = ParamStore::new();
        let mut ids = Vec::with_capacity(specs.len());
        for ((name, shape, _), (found, value)) in specs.into_iter().zip(tensors) {
            if name != found || shape != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{found}` {:?} where `{name}` {shape:?} was expected",
                    value.shape()
                )));
            }
            ids.push(store.add(name, value));
        }
        Ok(Self { layout: Layout::from_order(config, ids), store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.store.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Forward pass without dropout, returning plain arrays.
    pub fn infer(&self, batch: &MaskedBatch) -> Result<Outputs<T>> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let fwd = self.layout.forward(&mut t, &p, batch, None)?;
        Ok(Outputs { hidden: t.value(fwd.hidden).clone(), preds: t.value(fwd.preds).clone() })
    }

    /// Masked loss of one batch, evaluated without dropout.
    pub fn loss(&self, batch: &MaskedBatch) -> Result<f64> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let fwd = self.layout.forward(&mut t, &p, batch, None)?;
        let loss = self.layout.masked_loss(&mut t, &fwd, batch)?;
        Ok(t.scalar(loss))
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        let tensors = self.store.iter().map(|p| (p.name.clone(), p.value.cast::<U>())).collect();
        Transformer::from_named(self.layout.config.clone(), tensors).expect("same layout")
    }
}

/// Explicit-loop masked MSE over a prediction array `[B, L, 12]`.
pub fn masked_loss_reference(config: &ModelConfig, preds: &[f64], batch: &MaskedBatch) -> f64 {
    let (l, off) = (config.seq_len(), config.offset());
    let (mut acc, mut count) = (0.0, 0usize);
    for b in 0..batch.size {
        for i in 0..N_PROPS {
            let k = b * N_PROPS + i;
            if batch.masked[k] {
                let pred = preds[((b * l) + off + i) * N_PROPS + batch.props[k]];
                acc += (pred - batch.targets[k]).powi(2);
                count += 1;
            }
        }
    }
    acc / count as f64
}
