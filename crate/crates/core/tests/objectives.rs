mod common;

use gbert_tensor::{Tape, Tensor};
use graphbert::graph::{DatasetSplit, Graph};
use graphbert::model::{GraphBert, ModelConfig};
use graphbert::objectives::{
    finetune_classify, loss_classify, loss_reconstruction, loss_structure, loss_structure_sampled,
    pretrain, pretrain_stage, FinetuneInit, IntimacySource, PretrainTask, TrainConfig,
};
use graphbert::preprocess::{build_cache, intimacy_dense, normalized_adjacency, CacheConfig, ContextCache};
use graphbert::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn reconstruction(x_hat: Tensor<f64>, x: Tensor<f64>) -> f64 {
    let mut tape = Tape::new(0);
    let a = tape.constant(x_hat);
    let b = tape.constant(x);
    let l = loss_reconstruction(&mut tape, a, b).unwrap();
    tape.value(l).item()
}

fn structure(z: Tensor<f64>, s: Tensor<f64>) -> graphbert::Result<f64> {
    let mut tape = Tape::new(0);
    let nodes: Vec<usize> = (0..z.rows()).collect();
    let a = tape.constant(z);
    let b = tape.constant(s);
    let l = loss_structure(&mut tape, a, b, &nodes)?;
    Ok(tape.value(l).item())
}

#[test]
fn reconstruction_examples() {
    let x = t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(reconstruction(x.clone(), x.clone()), 0.0);
    assert!((reconstruction(Tensor::zeros(&[2, 3]), x) - 1.0).abs() < 1e-12);
    let x = Tensor::zeros(&[2, 2]);
    let x_hat = t(&[2, 2], &[0.6, 0.8, 0.0, 3.0]);
    assert!((reconstruction(x_hat, x) - 2.0).abs() < 1e-12);
}

#[test]
fn structure_examples() {
    let z = t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    assert!(structure(z, Tensor::full(&[3, 3], 1.0)).unwrap().abs() < 1e-12);
    let z = t(&[2, 2], &[0.0, 3.0, 2.0, 0.0]);
    assert!(structure(z.clone(), Tensor::eye(2)).unwrap().abs() < 1e-12);

    let g = Graph::from_edge_list(2, &[(0, 1)]);
    let s = intimacy_dense(&normalized_adjacency(&g), 0.15).unwrap();
    let mut oracle = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let target = if i == j { 1.0 } else { 0.0 };
            oracle += (s.get(i, j) - target).powi(2);
        }
    }
    oracle /= 4.0;
    let got = structure(z, Tensor::new(&[2, 2], s.data.clone()).unwrap()).unwrap();
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 0.4595f64.powi(2)).abs() < 1e-4);
}

#[test]
fn structure_names_zero_norm_node() {
    let mut tape = Tape::new(0);
    let z = tape.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
    let s = tape.constant(Tensor::eye(3));
    match loss_structure(&mut tape, z, s, &[40, 41, 42]) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("node 41"), "{msg}"),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn classification_examples() {
    let ce = |logits: Tensor<f64>, labels: &[usize]| {
        let mut tape = Tape::new(0);
        let v = tape.constant(logits);
        let l = loss_classify(&mut tape, v, labels).unwrap();
        tape.value(l).item()
    };
    assert!(ce(t(&[1, 2], &[0.0, 800.0]), &[1]).abs() < 1e-12);
    assert!((ce(Tensor::zeros(&[1, 7]), &[3]) - 7f64.ln()).abs() < 1e-12);
    assert!((ce(Tensor::zeros(&[2, 7]), &[0, 6]) - 2.0 * 7f64.ln()).abs() < 1e-12);
}

#[test]
fn sampled_structure_loss_is_unbiased() {
    let n = 50;
    let g = common::random_graph(n, 4, 2, 0.08, 21);
    let s = intimacy_dense(&normalized_adjacency(&g), 0.15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cos = |i: usize, j: usize| {
        let (a, b) = (&z[i * 4..i * 4 + 4], &z[j * 4..j * 4 + 4]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut exact = 0.0;
    for i in 0..n {
        for j in 0..n {
            exact += (s.get(i, j) - cos(i, j)).powi(2);
        }
    }
    exact /= (n * n) as f64;
    let full = structure(Tensor::new(&[n, 4], z.clone()).unwrap(), Tensor::new(&[n, n], s.data.clone()).unwrap()).unwrap();
    assert!((full - exact).abs() < 1e-12);

    let m = 10;
    let mut total = 0.0;
    let resamples = 1000;
    for _ in 0..resamples {
        let nodes: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let rows: Vec<f64> = nodes.iter().flat_map(|&i| z[i * 4..i * 4 + 4].to_vec()).collect();
        let block = Tensor::from_fn(&[m, m], |p| s.get(nodes[p / m], nodes[p % m]));
        let mut tape = Tape::new(0);
        let zv = tape.constant(Tensor::new(&[m, 4], rows).unwrap());
        let l = loss_structure_sampled(&mut tape, zv, &block, &nodes).unwrap();
        total += tape.value(l).item();
    }
    let mean = total / resamples as f64;
    assert!((mean - exact).abs() / exact < 0.02, "sampled mean {mean} vs exact {exact}");
}

fn fixture() -> (Graph, ContextCache, DatasetSplit) {
    let g = common::random_graph(40, 8, 3, 0.1, 13);
    let cache = build_cache(&g, &CacheConfig { k: 4, ..CacheConfig::default() }).unwrap();
    let split = DatasetSplit {
        train: (0..12).collect(),
        validation: (12..24).collect(),
        test: (24..40).collect(),
    };
    (g, cache, split)
}

fn tiny_model(g: &Graph) -> GraphBert {
    let mut cfg = ModelConfig::default();
    cfg.encoder.hidden = 8;
    cfg.encoder.intermediate_size = 8;
    GraphBert::new(cfg, g.feature_dim(), g.class_count(), 3).unwrap()
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_leave_initialization() {
    let (g, cache, _) = fixture();
    let mut model = tiny_model(&g);
    let before = model.params.clone();
    let s = cache.intimacy.clone().unwrap();
    let report = pretrain(&mut model, &g, &cache, Some(&IntimacySource::Dense(&s)), &train_config(0), 0, 0).unwrap();
    assert!(report.reconstruct.losses.is_empty());
    assert_eq!(model.params.tensors(), before.tensors());
}

#[test]
fn pretraining_losses_fall_and_runs_repeat() {
    let (g, cache, _) = fixture();
    let s = cache.intimacy.clone().unwrap();
    let src = IntimacySource::Dense(&s);
    let run = || {
        let mut model = tiny_model(&g);
        let r = pretrain(&mut model, &g, &cache, Some(&src), &train_config(20), 20, 20).unwrap();
        (r, model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.reconstruct.losses, b.reconstruct.losses);
    assert_eq!(a.recover.losses, b.recover.losses);
    assert_eq!(pa.tensors(), pb.tensors());
    assert!(a.reconstruct.losses[19] < a.reconstruct.losses[0]);
    assert!(a.recover.losses[19] < a.recover.losses[0]);
}

#[test]
fn sampled_recovery_trains() {
    let (g, cache, _) = fixture();
    let s = cache.intimacy.clone().unwrap();
    let mut model = tiny_model(&g);
    let config = TrainConfig {
        structure_exact_limit: 10,
        structure_sample: 16,
        ..train_config(5)
    };
    let r = pretrain_stage(&mut model, &g, &cache, Some(&IntimacySource::Dense(&s)), PretrainTask::Recover, &config).unwrap();
    assert_eq!(r.losses.len(), 5);
    assert!(r.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn recovery_without_intimacy_is_a_config_error() {
    let (g, cache, _) = fixture();
    let mut model = tiny_model(&g);
    let r = pretrain_stage(&mut model, &g, &cache, None, PretrainTask::Recover, &train_config(1));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn divergence_keeps_last_good_state() {
    let (g, cache, _) = fixture();
    let mut model = tiny_model(&g);
    let id = model.params.id("embed.raw.weight").unwrap();
    model.params.get_mut(id).data_mut()[0] = f32::NAN;
    let before: Vec<Vec<u32>> = model
        .params
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let r = pretrain_stage(&mut model, &g, &cache, None, PretrainTask::Reconstruct, &train_config(3));
    assert!(matches!(r, Err(Error::Diverged { epoch: 0, .. })), "{r:?}");
    let after: Vec<Vec<u32>> = model
        .params
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn finetune_selects_best_validation_epoch() {
    let (g, cache, split) = fixture();
    let mut model = tiny_model(&g);
    let report = finetune_classify(&mut model, &g, &cache, &split, &train_config(15), FinetuneInit::Scratch).unwrap();
    assert_eq!(report.epochs.len(), 15);
    let best = report.best_epoch.unwrap();
    let max = report.epochs.iter().map(|e| e.validation.accuracy).fold(0.0, f64::max);
    assert_eq!(report.best_validation, max);
    let first = report.epochs.iter().position(|e| e.validation.accuracy == max).unwrap();
    assert_eq!(best, first);
    assert_eq!(report.test_at_best, report.epochs[best].test.accuracy);

    let again = {
        let mut m = tiny_model(&g);
        finetune_classify(&mut m, &g, &cache, &split, &train_config(15), FinetuneInit::Scratch).unwrap()
    };
    assert_eq!(report.epochs, again.epochs);

    let data = graphbert::model::GraphData::new(&g, model.config.encoder.residual_mode);
    let logits = graphbert::objectives::predict_logits(&model, &data, &cache, &split.validation).unwrap();
    let labels: Vec<usize> = split.validation.iter().map(|&i| g.labels[i]).collect();
    assert_eq!(graphbert::objectives::score(&logits, &labels).accuracy, max);
}

#[test]
fn finetune_from_checkpoint_rejects_incompatible_store() {
    let (g, cache, split) = fixture();
    let mut other = ModelConfig::default();
    other.encoder.hidden = 16;
    let source = GraphBert::new(other, g.feature_dim(), g.class_count(), 1).unwrap();
    let mut model = tiny_model(&g);
    let r = finetune_classify(&mut model, &g, &cache, &split, &train_config(1), FinetuneInit::FromCheckpoint(&source.params));
    assert!(matches!(r, Err(Error::Transfer { .. })));
}

#[test]
fn overlapping_split_is_rejected() {
    let (g, cache, mut split) = fixture();
    split.test.push(0);
    let mut model = tiny_model(&g);
    let r = finetune_classify(&mut model, &g, &cache, &split, &train_config(1), FinetuneInit::Scratch);
    assert!(matches!(r, Err(Error::Split(_))));
}
