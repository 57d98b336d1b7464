//! Pre-training and fine-tuning objectives and their training loops.

use std::time::Instant;

use gbert_tensor::optim::{Adam, AdamConfig};
use gbert_tensor::{BoundParams, ParamStore, Reduction, Scalar, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::SubgraphBatch;
use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, Graph};
use crate::model::{BatchInputs, GraphBert, GraphData};
use crate::preprocess::ContextCache;

/// `(1/n)·Σ_i ‖x_i − x̂_i‖₂`.
pub fn loss_reconstruction<T: Scalar>(tape: &mut Tape<T>, x_hat: Var, x: Var) -> Result<Var> {
    let diff = tape.sub(x_hat, x)?;
    let norms = tape.row_norm(diff)?;
    Ok(tape.mean(norms))
}

/// `‖S − Ŝ‖_F² / n²` with `Ŝ` the pairwise cosine of the rows of `z`.
/// `nodes[r]` names row `r` in errors.
pub fn loss_structure<T: Scalar>(tape: &mut Tape<T>, z: Var, s: Var, nodes: &[usize]) -> Result<Var> {
    let n = tape.shape(z)[0];
    let s_hat = cosine(tape, z, nodes)?;
    let d = tape.sq_dist(s_hat, s)?;
    Ok(tape.scale(d, T::from_f64(1.0 / (n * n) as f64)))
}

fn cosine<T: Scalar>(tape: &mut Tape<T>, z: Var, nodes: &[usize]) -> Result<Var> {
    tape.pairwise_cosine(z).map_err(|e| match e {
        TensorError::ZeroNorm { row, .. } => Error::Numerical(format!(
            "embedding of node {} has zero norm",
            nodes.get(row).copied().unwrap_or(row)
        )),
        e => e.into(),
    })
}

/// Unbiased estimate of the structure loss from `m` sampled rows: the mean
/// squared error over the off-diagonal positions of the `m × m` block.
/// Row `a` of `z` and `s_block` belongs to node `nodes[a]`.
pub fn loss_structure_sampled<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    s_block: &Tensor<T>,
    nodes: &[usize],
) -> Result<Var> {
    let m = tape.shape(z)[0];
    if m < 2 {
        return Err(Error::Config("sampled structure loss needs at least 2 rows".into()));
    }
    let s_hat = cosine(tape, z, nodes)?;
    let mask = Tensor::from_fn(&[m, m], |i| if i / m == i % m { T::zero() } else { T::one() });
    let masked_target = Tensor::new(
        &[m, m],
        s_block.data().iter().zip(mask.data()).map(|(&a, &b)| a * b).collect(),
    )?;
    let mask = tape.constant(mask);
    let s_hat = tape.mul(s_hat, mask)?;
    let target = tape.constant(masked_target);
    let d = tape.sq_dist(s_hat, target)?;
    Ok(tape.scale(d, T::from_f64(1.0 / (m * (m - 1)) as f64)))
}

/// Summed softmax cross-entropy.
pub fn loss_classify<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, labels, Reduction::Sum)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Targets per optimizer step; `None` takes the whole set at once.
    pub batch_size: Option<usize>,
    /// Above this many nodes the structure loss is estimated from samples.
    pub structure_exact_limit: usize,
    pub structure_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 0.01,
            weight_decay: 5e-4,
            seed: 0,
            batch_size: None,
            structure_exact_limit: 8_000,
            structure_sample: 512,
        }
    }
}

impl TrainConfig {
    /// Defaults for a named benchmark.
    pub fn for_dataset(name: &str) -> Self {
        let (lr, epochs) = match name {
            "citeseer" => (0.001, 2000),
            "pubmed" => (0.0005, 500),
            _ => (0.01, 150),
        };
        Self {
            lr,
            epochs,
            ..Self::default()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn chunks<'a>(&self, targets: &'a [usize]) -> Vec<&'a [usize]> {
        match self.batch_size {
            Some(b) if b > 0 && b < targets.len() => targets.chunks(b).collect(),
            _ => vec![targets],
        }
    }
}

fn tape_seed(seed: u64, stage: u64, epoch: usize, chunk: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stage << 56));
    rng.set_stream(((epoch as u64) << 20) ^ chunk as u64);
    rng.gen()
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical(reason) => Error::Diverged { epoch, reason },
        e => e,
    }
}

fn optimizer_step(
    model: &mut GraphBert,
    opt: &mut Adam<f32>,
    tape: &Tape<f32>,
    bp: &BoundParams,
    loss: Var,
    epoch: usize,
) -> Result<f64> {
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Diverged {
            epoch,
            reason: format!("loss is {value}"),
        });
    }
    let mut grads = tape.backward(loss)?;
    let grads = bp.collect(&mut grads);
    opt.step(&mut model.params, &grads).map_err(|e| Error::Diverged {
        epoch,
        reason: e.to_string(),
    })?;
    Ok(value)
}

struct Prepared {
    batch: SubgraphBatch,
    inputs: BatchInputs<f32>,
}

fn prepare(model: &GraphBert, data: &GraphData<f32>, cache: &ContextCache, targets: &[usize]) -> Result<Prepared> {
    let batch = SubgraphBatch::from_cache(cache, targets)?;
    let inputs = model.prepare(data, &batch)?;
    Ok(Prepared { batch, inputs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainTask {
    Reconstruct,
    Recover,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub train_seconds: f64,
}

/// Intimacy entries for the structure loss.
pub enum IntimacySource<'a> {
    /// Row-major `|V| × |V|`.
    Dense(&'a [f32]),
    /// Rows recomputed on demand from `Āᵀ`.
    OnDemand {
        abar_t: &'a gbert_tensor::CsrMatrix<f64>,
        alpha: f64,
        tol: f64,
        max_iter: usize,
    },
}

impl IntimacySource<'_> {
    fn block(&self, n: usize, nodes: &[usize]) -> Result<Tensor<f32>> {
        let m = nodes.len();
        let mut out = vec![0.0f32; m * m];
        match self {
            IntimacySource::Dense(s) => {
                for (a, &i) in nodes.iter().enumerate() {
                    for (b, &j) in nodes.iter().enumerate() {
                        out[a * m + b] = s[i * n + j];
                    }
                }
            }
            IntimacySource::OnDemand {
                abar_t,
                alpha,
                tol,
                max_iter,
            } => {
                let rows: Vec<Vec<f64>> = nodes
                    .par_iter()
                    .map(|&i| crate::preprocess::intimacy_row(abar_t, i, *alpha, *tol, *max_iter))
                    .collect::<Result<_>>()?;
                for (a, row) in rows.iter().enumerate() {
                    for (b, &j) in nodes.iter().enumerate() {
                        out[a * m + b] = row[j] as f32;
                    }
                }
            }
        }
        Ok(Tensor::new(&[m, m], out)?)
    }
}

/// One pre-training stage over every node of the graph.
pub fn pretrain_stage(
    model: &mut GraphBert,
    graph: &Graph,
    cache: &ContextCache,
    intimacy: Option<&IntimacySource<'_>>,
    task: PretrainTask,
    config: &TrainConfig,
) -> Result<StageReport> {
    let n = graph.node_count();
    let data = GraphData::new(graph, model.config.encoder.residual_mode);
    let all: Vec<usize> = (0..n).collect();
    let stage = match task {
        PretrainTask::Reconstruct => 1,
        PretrainTask::Recover => 2,
    };
    let exact = n <= config.structure_exact_limit;
    if task == PretrainTask::Recover && intimacy.is_none() {
        return Err(Error::Config(
            "structure recovery needs the intimacy matrix; rebuild the cache with it".into(),
        ));
    }
    let prepared: Vec<Prepared> = if task == PretrainTask::Recover && !exact {
        Vec::new()
    } else {
        config
            .chunks(&all)
            .into_iter()
            .map(|c| prepare(model, &data, cache, c))
            .collect::<Result<_>>()?
    };
    let targets: Vec<Tensor<f32>> = if task == PretrainTask::Reconstruct {
        prepared
            .iter()
            .map(|p| graph.features.gather_dense(&p.batch.targets))
            .collect()
    } else {
        Vec::new()
    };
    let blocks: Vec<Tensor<f32>> = if task == PretrainTask::Recover && exact {
        prepared
            .iter()
            .map(|p| intimacy.unwrap().block(n, &p.batch.targets))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut opt = Adam::new(config.adam(), &model.params);
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a3c);
    let mut report = StageReport::default();
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        if task == PretrainTask::Recover && !exact {
            let m = config.structure_sample.min(n);
            let sample: Vec<usize> = (0..m).map(|_| sampler.gen_range(0..n)).collect();
            let p = prepare(model, &data, cache, &sample)?;
            let block = intimacy.unwrap().block(n, &sample)?;
            let mut tape = Tape::new(tape_seed(config.seed, stage, epoch, 0));
            let bp = model.params.bind(&mut tape);
            let loss = model
                .encode(&mut tape, &bp, &p.inputs)
                .and_then(|enc| loss_structure_sampled(&mut tape, enc.z, &block, &sample))
                .map_err(diverged(epoch))?;
            total = optimizer_step(model, &mut opt, &tape, &bp, loss, epoch)?;
        } else {
            for (c, p) in prepared.iter().enumerate() {
                let mut tape = Tape::new(tape_seed(config.seed, stage, epoch, c));
                let bp = model.params.bind(&mut tape);
                let loss = model
                    .encode(&mut tape, &bp, &p.inputs)
                    .and_then(|enc| match task {
                        PretrainTask::Reconstruct => {
                            let x_hat = model.reconstruct(&mut tape, &bp, enc.z)?;
                            let x = tape.constant(targets[c].clone());
                            loss_reconstruction(&mut tape, x_hat, x)
                        }
                        PretrainTask::Recover => {
                            let s = tape.constant(blocks[c].clone());
                            loss_structure(&mut tape, enc.z, s, &p.batch.targets)
                        }
                    })
                    .map_err(diverged(epoch))?;
                let w = p.batch.len() as f64 / n as f64;
                total += w * optimizer_step(model, &mut opt, &tape, &bp, loss, epoch)?;
            }
        }
        log::debug!("{task:?} epoch {epoch}: loss {total:.6}");
        report.losses.push(total);
    }
    report.train_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub reconstruct: StageReport,
    pub recover: StageReport,
}

/// Reconstruction for `reconstruct_epochs`, then structure recovery on the
/// same weights for `recover_epochs`.
pub fn pretrain(
    model: &mut GraphBert,
    graph: &Graph,
    cache: &ContextCache,
    intimacy: Option<&IntimacySource<'_>>,
    config: &TrainConfig,
    reconstruct_epochs: usize,
    recover_epochs: usize,
) -> Result<PretrainReport> {
    let stage = |epochs| TrainConfig {
        epochs,
        ..config.clone()
    };
    let reconstruct = pretrain_stage(model, graph, cache, intimacy, PretrainTask::Reconstruct, &stage(reconstruct_epochs))?;
    let recover = pretrain_stage(model, graph, cache, intimacy, PretrainTask::Recover, &stage(recover_epochs))?;
    Ok(PretrainReport { reconstruct, recover })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_step_loss: f64,
    pub train: SplitMetrics,
    pub validation: SplitMetrics,
    pub test: SplitMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_validation: f64,
    pub test_at_best: f64,
    pub train_at_best: f64,
    /// Wall-clock seconds of the epoch loop, per-epoch evaluation included.
    pub train_seconds: f64,
}

pub enum FinetuneInit<'a> {
    Scratch,
    FromCheckpoint(&'a ParamStore<f32>),
}

const EVAL_CHUNK: usize = 512;

/// Prepared eval-mode inputs for a fixed target list, split into chunks
/// that run on the rayon pool.
pub struct EvalSet {
    chunks: Vec<Prepared>,
    len: usize,
}

impl EvalSet {
    pub fn new(model: &GraphBert, data: &GraphData<f32>, cache: &ContextCache, targets: &[usize]) -> Result<Self> {
        let chunks = targets
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| prepare(model, data, cache, chunk))
            .collect::<Result<_>>()?;
        Ok(Self {
            chunks,
            len: targets.len(),
        })
    }

    fn run(&self, model: &GraphBert, width: usize, logits: bool) -> Result<Tensor<f32>> {
        let parts: Vec<Vec<f32>> = self
            .chunks
            .par_iter()
            .map(|p| {
                let mut tape = Tape::new(0);
                tape.set_training(false);
                let bp = model.params.bind_frozen(&mut tape);
                let enc = model.encode(&mut tape, &bp, &p.inputs)?;
                let out = if logits { model.classify(&mut tape, &bp, enc.z)? } else { enc.z };
                Ok(tape.value(out).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::new(&[self.len, width], parts.into_iter().flatten().collect())?)
    }

    /// Classification logits, `[len, d_y]`.
    pub fn logits(&self, model: &GraphBert) -> Result<Tensor<f32>> {
        self.run(model, model.class_count, true)
    }

    /// Fused representations `z_i`, `[len, d_h]`.
    pub fn embeddings(&self, model: &GraphBert) -> Result<Tensor<f32>> {
        self.run(model, model.hidden(), false)
    }
}

/// Logits of `targets` in eval mode.
pub fn predict_logits(
    model: &GraphBert,
    data: &GraphData<f32>,
    cache: &ContextCache,
    targets: &[usize],
) -> Result<Tensor<f32>> {
    EvalSet::new(model, data, cache, targets)?.logits(model)
}

/// Fused representations `z_i` of `targets` in eval mode, `[len, d_h]`.
pub fn embed_nodes(
    model: &GraphBert,
    data: &GraphData<f32>,
    cache: &ContextCache,
    targets: &[usize],
) -> Result<Tensor<f32>> {
    EvalSet::new(model, data, cache, targets)?.embeddings(model)
}

/// Mean cross-entropy and accuracy of `logits` against `labels`.
pub fn score(logits: &Tensor<f32>, labels: &[usize]) -> SplitMetrics {
    let c = logits.cols();
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
        let p = (row[y] as f64 - mx).exp() / z;
        loss -= p.max(1e-12).ln();
        let arg = (0..c)
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        correct += usize::from(arg == y);
    }
    let n = labels.len().max(1) as f64;
    SplitMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    }
}

/// Trains the classification head and encoder, evaluating every split after
/// each epoch. The model ends at the epoch with the best validation accuracy
/// (earliest on ties).
pub fn finetune_classify(
    model: &mut GraphBert,
    graph: &Graph,
    cache: &ContextCache,
    split: &DatasetSplit,
    config: &TrainConfig,
    init: FinetuneInit<'_>,
) -> Result<ClassifyReport> {
    if let FinetuneInit::FromCheckpoint(source) = init {
        model.transfer_from(source)?;
    }
    split.validate(graph.node_count())?;
    if split.train.is_empty() {
        return Err(Error::Split("training set is empty".into()));
    }
    let data = GraphData::new(graph, model.config.encoder.residual_mode);
    let labels_of = |set: &[usize]| set.iter().map(|&i| graph.labels[i]).collect::<Vec<_>>();
    let chunks: Vec<(Prepared, Vec<usize>)> = config
        .chunks(&split.train)
        .into_iter()
        .map(|c| Ok((prepare(model, &data, cache, c)?, labels_of(c))))
        .collect::<Result<_>>()?;
    let eval_targets: Vec<usize> = split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .copied()
        .collect();
    let eval_labels = labels_of(&eval_targets);
    let eval_set = EvalSet::new(model, &data, cache, &eval_targets)?;
    let (nt, nv) = (split.train.len(), split.validation.len());
    let mut opt = Adam::new(config.adam(), &model.params);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, f64, f64)> = None;
    let mut best_params = model.params.clone();
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let mut step_loss = 0.0;
        for (c, (p, labels)) in chunks.iter().enumerate() {
            let mut tape = Tape::new(tape_seed(config.seed, 3, epoch, c));
            let bp = model.params.bind(&mut tape);
            let loss = model
                .encode(&mut tape, &bp, &p.inputs)
                .and_then(|enc| model.classify(&mut tape, &bp, enc.z))
                .and_then(|logits| loss_classify(&mut tape, logits, labels))
                .map_err(diverged(epoch))?;
            step_loss += optimizer_step(model, &mut opt, &tape, &bp, loss, epoch)?;
        }
        let logits = eval_set.logits(model)?;
        let slice = |a: usize, b: usize| -> Tensor<f32> {
            let c = logits.cols();
            Tensor::new(&[b - a, c], logits.data()[a * c..b * c].to_vec()).expect("row range")
        };
        let train = score(&slice(0, nt), &eval_labels[..nt]);
        let validation = score(&slice(nt, nt + nv), &eval_labels[nt..nt + nv]);
        let test = score(&slice(nt + nv, eval_targets.len()), &eval_labels[nt + nv..]);
        if best.is_none_or(|b| validation.accuracy > b.1) {
            best = Some((epoch, validation.accuracy, test.accuracy, train.accuracy));
            best_params = model.params.clone();
        }
        epochs.push(EpochMetrics {
            epoch,
            train_step_loss: step_loss,
            train,
            validation,
            test,
        });
    }
    let train_seconds = start.elapsed().as_secs_f64();
    if best.is_some() {
        model.params = best_params;
    }
    let (best_epoch, best_validation, test_at_best, train_at_best) = match best {
        Some((e, v, t, tr)) => (Some(e), v, t, tr),
        None => (None, 0.0, 0.0, 0.0),
    };
    Ok(ClassifyReport {
        epochs,
        best_epoch,
        best_validation,
        test_at_best,
        train_at_best,
        train_seconds,
    })
}
