//! The full model: embeddings, encoder stack, fusion and heads.

use std::sync::Arc;

use gbert_tensor::{BoundParams, CsrMatrix, ParamId, ParamStore, Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::embedding::{code_embeddings, EmbeddingSources, SinusoidVariant, SubgraphBatch};
use crate::encoder::{g_transformer_layer, Affine, EncoderConfig, LayerParams, ResidualMode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::{linear, Init};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub encoder: EncoderConfig,
    pub embeddings: EmbeddingSources,
    pub sinusoid: SinusoidVariant,
}

/// Feature matrices shared by every batch of one graph.
pub struct GraphData<T> {
    pub features: Arc<CsrMatrix<T>>,
    /// `Â·X`, needed only for [`ResidualMode::GraphRawAdjacency`].
    pub propagated: Option<Arc<CsrMatrix<T>>>,
}

impl<T: Scalar> GraphData<T> {
    pub fn new(graph: &Graph, mode: ResidualMode) -> Self {
        Self {
            features: Arc::new(graph.features.cast()),
            propagated: (mode == ResidualMode::GraphRawAdjacency)
                .then(|| Arc::new(propagate_features(graph).cast())),
        }
    }
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}·X` as a sparse matrix.
pub fn propagate_features(graph: &Graph) -> CsrMatrix<f32> {
    let n = graph.node_count();
    let d = graph.feature_dim();
    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + graph.neighbors(i).iter().map(|e| e.weight as f64).sum::<f64>())
        .collect();
    let mut triplets = Vec::new();
    let mut acc = vec![0.0f64; d];
    let mut touched = Vec::new();
    for i in 0..n {
        let mut push = |j: usize, w: f64| {
            let c = w / (deg[i] * deg[j]).sqrt();
            for (col, v) in graph.features.row(j) {
                if acc[col] == 0.0 {
                    touched.push(col);
                }
                acc[col] += c * v as f64;
            }
        };
        push(i, 1.0);
        for e in graph.neighbors(i) {
            push(e.target, e.weight as f64);
        }
        touched.sort_unstable();
        touched.dedup();
        for &col in &touched {
            if acc[col] != 0.0 {
                triplets.push((i, col, acc[col] as f32));
            }
            acc[col] = 0.0;
        }
        touched.clear();
    }
    CsrMatrix::from_triplets(n, d, triplets)
}

/// Per-batch constant inputs.
pub struct BatchInputs<T> {
    pub batch: usize,
    pub rows: usize,
    /// Raw features of every batch row, `batch·rows × d_x`.
    pub raw: Arc<CsrMatrix<T>>,
    /// Source rows of the graph residual, `batch × d_x`.
    pub target_raw: Option<Arc<CsrMatrix<T>>>,
    pub codes: Option<gbert_tensor::Tensor<T>>,
}

pub struct Encoded {
    /// Fused target representations, `[batch, d_h]`.
    pub z: Var,
    /// Final hidden states, `[batch, rows, d_h]`.
    pub hidden: Var,
    /// Attention probabilities per layer and head, `[batch, rows, rows]`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: Affine,
    residual: ParamId,
    layers: Vec<LayerParams>,
    reconstruct: Affine,
    classify: Affine,
}

#[derive(Clone, Debug)]
pub struct GraphBert {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub class_count: usize,
    pub params: ParamStore<f32>,
    ids: Ids,
}

/// Parameter-name prefixes that must survive a checkpoint transfer.
pub const SHARED_PREFIXES: [&str; 2] = ["embed.", "encoder."];

impl GraphBert {
    pub fn new(config: ModelConfig, feature_dim: usize, class_count: usize, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if !config.encoder.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden size must be even, got {}",
                config.encoder.hidden
            )));
        }
        if config.embeddings.is_empty() {
            return Err(Error::Config("at least one embedding source is required".into()));
        }
        let d = config.encoder.hidden;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let embed = Affine::register(&mut store, "embed.raw", feature_dim, d, &mut init)?;
        let residual = store.add("encoder.residual.weight", linear(&mut init, feature_dim, d))?;
        let layers = (0..config.encoder.depth)
            .map(|l| LayerParams::register(&mut store, &format!("encoder.layer{l}"), &config.encoder, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let reconstruct = Affine::register(&mut store, "head.reconstruct", d, feature_dim, &mut init)?;
        let classify = Affine::register(&mut store, "head.classify", d, class_count, &mut init)?;
        Ok(Self {
            config,
            feature_dim,
            class_count,
            params: store,
            ids: Ids {
                embed,
                residual,
                layers,
                reconstruct,
                classify,
            },
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.encoder.hidden
    }

    pub fn embed_id(&self) -> Affine {
        self.ids.embed
    }

    pub fn prepare<T: Scalar>(&self, data: &GraphData<T>, batch: &SubgraphBatch) -> Result<BatchInputs<T>> {
        if data.features.cols() != self.feature_dim {
            return Err(Error::Config(format!(
                "model expects {} raw features, graph has {}",
                self.feature_dim,
                data.features.cols()
            )));
        }
        let src = self.config.embeddings;
        let codes = (src.wl || src.position || src.hop)
            .then(|| code_embeddings(batch, src, self.hidden(), self.config.sinusoid))
            .transpose()?;
        let target_raw = match self.config.encoder.residual_mode {
            ResidualMode::GraphRaw => Some(Arc::new(data.features.select_rows(&batch.targets))),
            ResidualMode::GraphRawAdjacency => {
                let p = data
                    .propagated
                    .as_ref()
                    .ok_or_else(|| Error::Config("adjacency residual needs propagated features".into()))?;
                Some(Arc::new(p.select_rows(&batch.targets)))
            }
            _ => None,
        };
        Ok(BatchInputs {
            batch: batch.len(),
            rows: batch.rows,
            raw: Arc::new(data.features.select_rows(&batch.nodes)),
            target_raw,
            codes,
        })
    }

    /// Summed initial embeddings `H⁽⁰⁾`, `[batch, rows, d_h]`.
    pub fn embed_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        inputs: &BatchInputs<T>,
    ) -> Result<Var> {
        let shape = [inputs.batch, inputs.rows, self.hidden()];
        let codes = inputs.codes.clone().map(|c| tape.constant(c));
        if !self.config.embeddings.raw {
            return codes.ok_or_else(|| Error::Config("no embedding source selected".into()));
        }
        let e = tape.spmm(&inputs.raw, bp.var(self.ids.embed.weight))?;
        let e = tape.add(e, bp.var(self.ids.embed.bias))?;
        let e = tape.reshape(e, &shape)?;
        Ok(match codes {
            Some(c) => tape.add(e, c)?,
            None => e,
        })
    }

    /// The residual term added in every layer, `[batch, rows, d_h]`.
    pub fn residual<T: Scalar>(&self, tape: &mut Tape<T>, bp: &BoundParams, inputs: &BatchInputs<T>) -> Result<Option<Var>> {
        let w = bp.var(self.ids.residual);
        let d = self.hidden();
        Ok(match self.config.encoder.residual_mode {
            ResidualMode::None => None,
            ResidualMode::Raw => {
                let r = tape.spmm(&inputs.raw, w)?;
                Some(tape.reshape(r, &[inputs.batch, inputs.rows, d])?)
            }
            ResidualMode::GraphRaw | ResidualMode::GraphRawAdjacency => {
                let src = inputs.target_raw.as_ref().expect("prepared with a target residual");
                let r = tape.spmm(src, w)?;
                Some(tape.expand(r, 1, inputs.rows)?)
            }
        })
    }

    /// Runs the encoder stack from precomputed `H⁽⁰⁾`.
    pub fn encode_from<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bp: &BoundParams,
        inputs: &BatchInputs<T>,
        h0: Var,
    ) -> Result<Encoded> {
        let residual = self.residual(tape, bp, inputs)?;
        let mut h = h0;
        let mut attention = Vec::with_capacity(self.ids.layers.len());
        for (l, p) in self.ids.layers.iter().enumerate() {
            let (next, probs) = g_transformer_layer(tape, bp, p, &self.config.encoder, h, residual, l)?;
            h = next;
            attention.push(probs);
        }
        let z = tape.mean_axis(h, 1)?;
        Ok(Encoded {
            z,
            hidden: h,
            attention,
        })
    }

    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, bp: &BoundParams, inputs: &BatchInputs<T>) -> Result<Encoded> {
        let h0 = self.embed_batch(tape, bp, inputs)?;
        self.encode_from(tape, bp, inputs, h0)
    }

    pub fn classify<T: Scalar>(&self, tape: &mut Tape<T>, bp: &BoundParams, z: Var) -> Result<Var> {
        self.ids.classify.apply(tape, bp, z)
    }

    pub fn reconstruct<T: Scalar>(&self, tape: &mut Tape<T>, bp: &BoundParams, z: Var) -> Result<Var> {
        self.ids.reconstruct.apply(tape, bp, z)
    }

    /// Copies same-named, same-shaped tensors from `source`. Every shared
    /// embedding and encoder tensor must be present; heads are optional.
    /// Returns the names copied.
    pub fn transfer_from(&mut self, source: &ParamStore<f32>) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        let mut plan = Vec::new();
        for (id, name, t) in self.params.iter() {
            let shared = SHARED_PREFIXES.iter().any(|p| name.starts_with(p));
            match source.by_name(name) {
                Some(s) if s.shape() == t.shape() => plan.push((id, s.clone())),
                Some(s) if shared => bad.push(format!("{name} {:?} vs {:?}", t.shape(), s.shape())),
                None if shared => bad.push(format!("{name} missing")),
                _ => {}
            }
        }
        if !bad.is_empty() {
            return Err(Error::Transfer { tensors: bad });
        }
        let mut copied = Vec::with_capacity(plan.len());
        for (id, t) in plan {
            copied.push(self.params.name(id).to_string());
            *self.params.get_mut(id) = t;
        }
        Ok(copied)
    }
}
