//! Learnable components: per-modality encoders, contrastive projection
//! heads, per-label projection heads, the label-relation attention module,
//! and per-label classification heads.
//!
//! Components describe themselves as name prefixes into a shared
//! [`ParamSet`]; forward passes run on a [`Tape`] so one backward call
//! reaches every parameter.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::params::{ParamSet, ParamVars};
use crate::rng::Rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Relu,
    Tanh,
}

impl Act {
    fn apply(self, tape: &mut Tape, x: ValueId) -> ValueId {
        match self {
            Act::Relu => tape.relu(x),
            Act::Tanh => tape.tanh(x),
        }
    }
}

/// Fully-connected stack; the workhorse behind encoders and all heads.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub widths: Vec<usize>,
    pub act: Act,
    /// Apply the activation after the final layer too.
    pub act_after_last: bool,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>, act: Act) -> Self {
        assert!(widths.len() >= 2, "Mlp needs at least input and output dims");
        Self {
            prefix: prefix.into(),
            widths,
            act,
            act_after_last: false,
        }
    }

    /// Single fully-connected layer, no activation.
    pub fn linear(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Self::new(prefix, vec![input, output], Act::Relu)
    }

    pub fn with_act_after_last(mut self) -> Self {
        self.act_after_last = true;
        self
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn init(&self, params: &mut ParamSet, seed: u64) {
        for l in 0..self.widths.len() - 1 {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            params.init_uniform(
                &format!("{}.layer{l}.w", self.prefix),
                vec![fan_in, fan_out],
                fan_in,
                seed,
            );
            params.init_uniform(
                &format!("{}.layer{l}.b", self.prefix),
                vec![fan_out],
                fan_in,
                seed,
            );
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.widths.len() - 1)
            .flat_map(|l| {
                [
                    format!("{}.layer{l}.w", self.prefix),
                    format!("{}.layer{l}.b", self.prefix),
                ]
            })
            .collect()
    }

    /// x: (batch, widths[0]) → (batch, widths[last]).
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: ValueId) -> ValueId {
        let layers = self.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let w = vars.id(&format!("{}.layer{l}.w", self.prefix));
            let b = vars.id(&format!("{}.layer{l}.b", self.prefix));
            h = tape.matmul(h, w);
            h = tape.add_bias(h, b);
            if l + 1 < layers || self.act_after_last {
                h = self.act.apply(tape, h);
            }
        }
        h
    }
}

fn dropout(tape: &mut Tape, x: ValueId, p: f64, rng: Option<&mut Rng>) -> ValueId {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data).unwrap());
    tape.mul(x, mask)
}

/// Bare single-head self-attention with residual connection; the attention
/// sub-block shared by [`MsaBlock`] and [`EncoderLayer`].
fn self_attention(
    tape: &mut Tape,
    vars: &ParamVars,
    prefix: &str,
    x: ValueId,
    dim: usize,
) -> ValueId {
    let q = {
        let w = vars.id(&format!("{prefix}.wq"));
        let b = vars.id(&format!("{prefix}.bq"));
        let h = tape.matmul(x, w);
        tape.add_bias(h, b)
    };
    let k = {
        let w = vars.id(&format!("{prefix}.wk"));
        let b = vars.id(&format!("{prefix}.bk"));
        let h = tape.matmul(x, w);
        tape.add_bias(h, b)
    };
    let v = {
        let w = vars.id(&format!("{prefix}.wv"));
        let b = vars.id(&format!("{prefix}.bv"));
        let h = tape.matmul(x, w);
        tape.add_bias(h, b)
    };
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    let attn = tape.softmax_rows(scores);
    let ctx = tape.matmul(attn, v);
    let w = vars.id(&format!("{prefix}.wo"));
    let b = vars.id(&format!("{prefix}.bo"));
    let out = tape.matmul(ctx, w);
    tape.add_bias(out, b)
}

fn init_attention(params: &mut ParamSet, prefix: &str, dim: usize, seed: u64) {
    for name in ["wq", "wk", "wv", "wo"] {
        params.init_uniform(&format!("{prefix}.{name}"), vec![dim, dim], dim, seed);
    }
    for name in ["bq", "bk", "bv", "bo"] {
        params.init_zeros(&format!("{prefix}.{name}"), vec![dim]);
    }
}

fn attention_param_names(prefix: &str) -> Vec<String> {
    ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"]
        .iter()
        .map(|n| format!("{prefix}.{n}"))
        .collect()
}

/// One Transformer encoder layer over K label tokens: single-head
/// self-attention and a position-wise feed-forward block, each with a
/// residual connection followed by layer norm. No positional encoding, so
/// the layer is permutation-equivariant over tokens.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub prefix: String,
    pub dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(prefix: impl Into<String>, dim: usize, ffn_dim: usize, dropout: f64) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
            ffn_dim,
            dropout,
        }
    }

    pub fn init(&self, params: &mut ParamSet, seed: u64) {
        init_attention(params, &format!("{}.attn", self.prefix), self.dim, seed);
        params.init_uniform(
            &format!("{}.ffn.w1", self.prefix),
            vec![self.dim, self.ffn_dim],
            self.dim,
            seed,
        );
        params.init_zeros(&format!("{}.ffn.b1", self.prefix), vec![self.ffn_dim]);
        params.init_uniform(
            &format!("{}.ffn.w2", self.prefix),
            vec![self.ffn_dim, self.dim],
            self.ffn_dim,
            seed,
        );
        params.init_zeros(&format!("{}.ffn.b2", self.prefix), vec![self.dim]);
        params.init_ones(&format!("{}.ln1.g", self.prefix), vec![self.dim]);
        params.init_zeros(&format!("{}.ln1.b", self.prefix), vec![self.dim]);
        params.init_ones(&format!("{}.ln2.g", self.prefix), vec![self.dim]);
        params.init_zeros(&format!("{}.ln2.b", self.prefix), vec![self.dim]);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = attention_param_names(&format!("{}.attn", self.prefix));
        for n in ["ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln1.g", "ln1.b", "ln2.g", "ln2.b"] {
            names.push(format!("{}.{n}", self.prefix));
        }
        names
    }

    /// tokens: (K, dim) → (K, dim). Dropout fires only when `train_rng` is
    /// provided.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        tokens: ValueId,
        mut train_rng: Option<&mut Rng>,
    ) -> ValueId {
        let attn = self_attention(tape, vars, &format!("{}.attn", self.prefix), tokens, self.dim);
        let attn = dropout(tape, attn, self.dropout, train_rng.as_deref_mut());
        let x = tape.add(tokens, attn);
        let g1 = vars.id(&format!("{}.ln1.g", self.prefix));
        let b1 = vars.id(&format!("{}.ln1.b", self.prefix));
        let x = tape.layer_norm_rows(x, g1, b1);

        let w1 = vars.id(&format!("{}.ffn.w1", self.prefix));
        let fb1 = vars.id(&format!("{}.ffn.b1", self.prefix));
        let w2 = vars.id(&format!("{}.ffn.w2", self.prefix));
        let fb2 = vars.id(&format!("{}.ffn.b2", self.prefix));
        let f = tape.matmul(x, w1);
        let f = tape.add_bias(f, fb1);
        let f = tape.relu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_bias(f, fb2);
        let f = dropout(tape, f, self.dropout, train_rng);
        let x = tape.add(x, f);
        let g2 = vars.id(&format!("{}.ln2.g", self.prefix));
        let b2 = vars.id(&format!("{}.ln2.b", self.prefix));
        tape.layer_norm_rows(x, g2, b2)
    }
}

/// The ablation family for the label-relation module W(·).
#[derive(Debug, Clone)]
pub enum RelationModule {
    /// No relation module (the `no_proj` and `proj` strategies).
    None,
    /// Bare single-head self-attention with residual, no feed-forward, no
    /// layer norm (`msa`).
    Msa {
        prefix: String,
        dim: usize,
        dropout: f64,
    },
    /// Transformer encoder layers: one for `tel`, two for `te`.
    Encoder(Vec<EncoderLayer>),
}

impl RelationModule {
    pub fn none() -> Self {
        RelationModule::None
    }

    pub fn msa(prefix: impl Into<String>, dim: usize, dropout: f64) -> Self {
        RelationModule::Msa {
            prefix: prefix.into(),
            dim,
            dropout,
        }
    }

    pub fn encoder_stack(
        prefix: &str,
        layers: usize,
        dim: usize,
        ffn_dim: usize,
        dropout: f64,
    ) -> Self {
        RelationModule::Encoder(
            (0..layers)
                .map(|i| EncoderLayer::new(format!("{prefix}.layer{i}"), dim, ffn_dim, dropout))
                .collect(),
        )
    }

    pub fn init(&self, params: &mut ParamSet, seed: u64) {
        match self {
            RelationModule::None => {}
            RelationModule::Msa { prefix, dim, .. } => {
                init_attention(params, &format!("{prefix}.attn"), *dim, seed)
            }
            RelationModule::Encoder(layers) => {
                for l in layers {
                    l.init(params, seed);
                }
            }
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            RelationModule::None => vec![],
            RelationModule::Msa { prefix, .. } => attention_param_names(&format!("{prefix}.attn")),
            RelationModule::Encoder(layers) => {
                layers.iter().flat_map(|l| l.param_names()).collect()
            }
        }
    }

    pub fn num_encoder_layers(&self) -> usize {
        match self {
            RelationModule::Encoder(layers) => layers.len(),
            _ => 0,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        tokens: ValueId,
        mut train_rng: Option<&mut Rng>,
    ) -> ValueId {
        match self {
            RelationModule::None => tokens,
            RelationModule::Msa {
                prefix,
                dim,
                dropout: p,
            } => {
                let attn = self_attention(tape, vars, &format!("{prefix}.attn"), tokens, *dim);
                let attn = dropout(tape, attn, *p, train_rng);
                tape.add(tokens, attn)
            }
            RelationModule::Encoder(layers) => {
                let mut x = tokens;
                for l in layers {
                    x = l.forward(tape, vars, x, train_rng.as_deref_mut());
                }
                x
            }
        }
    }
}
