//! Graph transformer layers over linkless subgraphs.

use gbert_tensor::{BoundParams, ParamId, ParamStore, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{affine, ones, zeros, Init};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    None,
    /// Each row's own raw features, `X_i·W_res`.
    Raw,
    /// The target row's `x_i·W_res`, added to every row.
    #[default]
    GraphRaw,
    /// The target row of `Â·X` (GCN-normalized adjacency with self-loops),
    /// projected and added to every row.
    GraphRawAdjacency,
}

impl std::str::FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(Self::None),
            "raw" => Ok(Self::Raw),
            "graph_raw" => Ok(Self::GraphRaw),
            "graph_raw_adjacency" | "adjacency" => Ok(Self::GraphRawAdjacency),
            _ => Err(Error::Config(format!("unknown residual mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Raw => "raw",
            Self::GraphRaw => "graph_raw",
            Self::GraphRawAdjacency => "graph_raw_adjacency",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub intermediate_size: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub residual_mode: ResidualMode,
    /// Scale scores by `√(d_h / heads)` instead of `√d_h`.
    pub per_head_scaling: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            depth: 2,
            heads: 2,
            intermediate_size: 32,
            hidden_dropout: 0.5,
            attention_dropout: 0.3,
            residual_mode: ResidualMode::GraphRaw,
            per_head_scaling: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        for (name, r) in [
            ("hidden_dropout", self.hidden_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn register(
        store: &mut ParamStore<f32>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let (w, b) = affine(init, fan_in, fan_out);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bp: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bp.var(self.weight))?;
        Ok(tape.add(y, bp.var(self.bias))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn register(store: &mut ParamStore<f32>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), ones(d))?,
            beta: store.add(format!("{name}.beta"), zeros(d))?,
        })
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bp: &BoundParams, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, bp.var(self.gamma), bp.var(self.beta))?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub norm1: Norm,
    pub ffn_in: Affine,
    pub ffn_out: Affine,
    pub norm2: Norm,
}

impl LayerParams {
    pub fn register(
        store: &mut ParamStore<f32>,
        prefix: &str,
        cfg: &EncoderConfig,
        init: &mut Init,
    ) -> Result<Self> {
        let d = cfg.hidden;
        let i = cfg.intermediate_size;
        Ok(Self {
            query: Affine::register(store, &format!("{prefix}.attn.query"), d, d, init)?,
            key: Affine::register(store, &format!("{prefix}.attn.key"), d, d, init)?,
            value: Affine::register(store, &format!("{prefix}.attn.value"), d, d, init)?,
            output: Affine::register(store, &format!("{prefix}.attn.output"), d, d, init)?,
            norm1: Norm::register(store, &format!("{prefix}.norm1"), d)?,
            ffn_in: Affine::register(store, &format!("{prefix}.ffn.in"), d, i, init)?,
            ffn_out: Affine::register(store, &format!("{prefix}.ffn.out"), i, d, init)?,
            norm2: Norm::register(store, &format!("{prefix}.norm2"), d)?,
        })
    }
}

/// One layer on `h` of shape `[batch, rows, d_h]`. `residual`, when given,
/// has the same shape and is added before the first layer norm. Returns the
/// new hidden states and the attention probabilities of every head.
pub fn g_transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    bp: &BoundParams,
    p: &LayerParams,
    cfg: &EncoderConfig,
    h: Var,
    residual: Option<Var>,
    layer: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = cfg.hidden;
    let dh = d / cfg.heads;
    let q = p.query.apply(tape, bp, h)?;
    let k = p.key.apply(tape, bp, h)?;
    let v = p.value.apply(tape, bp, h)?;
    let scale = if cfg.per_head_scaling { dh } else { d } as f64;
    let scale = T::from_f64(1.0 / scale.sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.narrow(q, head * dh, dh)?,
                tape.narrow(k, head * dh, dh)?,
                tape.narrow(v, head * dh, dh)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        if !tape.value(scores).all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite attention scores in layer {layer}, head {head}"
            )));
        }
        let a = tape.softmax(scores);
        probs.push(a);
        let a = tape.dropout(a, cfg.attention_dropout)?;
        heads.push(tape.matmul(a, vh)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads)?
    };
    let o = p.output.apply(tape, bp, ctx)?;
    let o = tape.dropout(o, cfg.hidden_dropout)?;
    let mut s = tape.add(h, o)?;
    if let Some(r) = residual {
        s = tape.add(s, r)?;
    }
    let h1 = p.norm1.apply(tape, bp, s)?;
    let f = p.ffn_in.apply(tape, bp, h1)?;
    let f = tape.gelu(f);
    let f = p.ffn_out.apply(tape, bp, f)?;
    let f = tape.dropout(f, cfg.hidden_dropout)?;
    let s2 = tape.add(h1, f)?;
    Ok((p.norm2.apply(tape, bp, s2)?, probs))
}
