//! Cross-module flows: synthetic corpus into the trainer, retrieval metrics
//! over held-out evaluation passes, and checkpoint round trips driving
//! inference.

use tempfile::tempdir;

use spanset_core::corpus::{generate, CorpusSpec, GroundingSample};
use spanset_core::metrics::{MetricAccumulator, MetricReport};
use spanset_core::model::{GroundingModel, ModelConfig};
use spanset_core::train::{load_model, StepLog, TrainConfig, Trainer};

fn micro_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 2,
        ffn_width: 64,
        proposals_per_query: 4,
        max_queries: 3,
        frame_count: 16,
        d_in: 8,
        dropout: 0.05,
        corr_temperature: 0.07,
    }
}

fn micro_corpus(n: usize, seed: u64) -> Vec<GroundingSample> {
    generate(&CorpusSpec {
        n_samples: n,
        frame_count: 16,
        d_in: 8,
        k_min: 1,
        k_max: 3,
        noise: 0.05,
        bank_size: 12,
        seed,
    })
    .unwrap()
}

fn micro_train(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        total_steps: steps,
        batch_size: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn evaluate(model: &GroundingModel, corpus: &[GroundingSample]) -> MetricReport {
    let mut acc = MetricAccumulator::new();
    for s in corpus {
        let out = model.infer(&s.frames, &s.queries, s.k()).unwrap();
        acc.add_output(&out, &s.spans).unwrap();
    }
    acc.report()
}

fn mean_total(logs: &[StepLog]) -> f64 {
    logs.iter().map(|l| l.total).sum::<f64>() / logs.len() as f64
}

#[test]
fn training_improves_localization_over_init() {
    let mut model = GroundingModel::new(micro_model()).unwrap();
    model.init(7);
    let corpus = micro_corpus(24, 3);
    let before = evaluate(&model, &corpus);

    let mut trainer = Trainer::new(model, corpus.clone(), micro_train(400, 5)).unwrap();
    let logs = trainer.run_to_end().unwrap();
    let after = evaluate(trainer.model(), &corpus);

    assert!(
        mean_total(&logs[380..]) < mean_total(&logs[..20]),
        "loss did not decrease: head {} tail {}",
        mean_total(&logs[..20]),
        mean_total(&logs[380..])
    );
    assert!(
        after.mean_iou > before.mean_iou + 0.1,
        "mIoU {} -> {}",
        before.mean_iou,
        after.mean_iou
    );
    assert_eq!(trainer.skipped_steps, 0);
}

#[test]
fn checkpoint_reload_reproduces_inference() {
    let mut model = GroundingModel::new(micro_model()).unwrap();
    model.init(19);
    let corpus = micro_corpus(12, 8);
    let mut trainer = Trainer::new(model, corpus.clone(), micro_train(40, 2)).unwrap();
    trainer.run_to_end().unwrap();

    let dir = tempdir().unwrap();
    let path = dir.path().join("trained.ckpt");
    trainer.save_checkpoint(&path).unwrap();
    let (meta, reloaded) = load_model(&path).unwrap();
    assert_eq!(meta.next_step, 40);

    for s in &corpus {
        let live = trainer.model().infer(&s.frames, &s.queries, s.k()).unwrap();
        let cold = reloaded.infer(&s.frames, &s.queries, s.k()).unwrap();
        assert_eq!(live.spans, cold.spans);
        assert_eq!(live.correspondence, cold.correspondence);
        assert_eq!(live.cross_attention, cold.cross_attention);
    }
}

#[test]
fn identical_seeds_reproduce_the_run_exactly() {
    let run = |model_seed: u64, train_seed: u64| -> (Vec<String>, Vec<f64>) {
        let mut model = GroundingModel::new(micro_model()).unwrap();
        model.init(model_seed);
        let mut trainer =
            Trainer::new(model, micro_corpus(16, 4), micro_train(60, train_seed)).unwrap();
        let rows = trainer
            .run_to_end()
            .unwrap()
            .iter()
            .map(StepLog::csv_row)
            .collect();
        let params = trainer
            .model()
            .params
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        (rows, params)
    };
    let (rows_a, params_a) = run(21, 6);
    let (rows_b, params_b) = run(21, 6);
    assert_eq!(rows_a, rows_b);
    assert!(params_a.iter().zip(&params_b).all(|(x, y)| x == y));

    // Same weights, different batch order and dropout: the curve must move.
    let (rows_c, _) = run(21, 7);
    assert_ne!(rows_a, rows_c);
}
