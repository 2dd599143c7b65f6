use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tokentune::data::{gen_classification, ClassificationSpec};
use tokentune::parallel::Execution;
use tokentune::train::{Example, Regime, TrainConfig, Trainer};
use tokentune::transformer::{ModelConfig, TransformerModel};
use tokentune::verify::{equivalence_suite, SuiteOptions};
use tokentune::Dtype;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn data() -> Vec<Example> {
    let spec = ClassificationSpec { n_examples: 16, seq_len: 64, n_classes: 2, difficulty: 0.2, seed: 0 };
    gen_classification(&spec).expect("valid spec")
}

fn train_step(c: &mut Criterion) {
    let model_cfg = ModelConfig {
        vocab_size: 64,
        max_positions: 64,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        n_layers: 2,
        causal: false,
        n_classes: 2,
        init_std: 0.02,
    };
    let model = TransformerModel::new(model_cfg, Dtype::F32, 0).expect("valid model");
    let data = data();
    let batch: Vec<(usize, &Example)> = data.iter().enumerate().collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (regime, k) in [(Regime::Full, None), (Regime::TokenTune, Some(16))] {
        for exec in MODES {
            let cfg = TrainConfig { regime, k, batch_size: 16, execution: exec, ..TrainConfig::default() };
            let mut trainer = Trainer::new(model.clone(), cfg).expect("valid config");
            group.bench_function(BenchmarkId::new(regime.name(), format!("{exec:?}")), |b| {
                b.iter(|| black_box(trainer.train_step(&batch, 0).expect("finite step")))
            });
        }
    }
    group.finish();
}

fn suite(c: &mut Criterion) {
    let mut group = c.benchmark_group("equivalence_suite");
    group.sample_size(10);
    for exec in MODES {
        let opts = SuiteOptions { points: 16, execution: exec, ..SuiteOptions::default() };
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| black_box(equivalence_suite(&opts).expect("suite runs"))));
    }
    group.finish();
}

criterion_group!(benches, train_step, suite);
criterion_main!(benches);
