use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use slu_core::config::ExperimentConfig;
use slu_core::corpus::{generate_corpus, Grammar};
use slu_core::exec::Execution;
use slu_core::model::ModelParameters;
use slu_core::seqloss::Method;
use slu_core::trainer::{ce_loss, evaluate, prepare, Stage};

fn bench(c: &mut Criterion) {
    let g = Grammar::default_grammar().compile().unwrap();
    let utts = generate_corpus(&g, 64, 1, 1.0).unwrap();
    let data = prepare(&utts, &g.inventory);
    let exp = ExperimentConfig::default();
    let params = ModelParameters::init(&exp.model_config(&g.inventory)).unwrap();
    let seq = exp.seq_config(Method::MSlu, 24);

    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    for (name, ex) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(format!("ce_loss/{name}"), |b| {
            b.iter(|| ex.map(&data[..16], |i, s| ce_loss(&params, s, Stage::JointCe, i as u64).unwrap().0))
        });
        group.bench_function(format!("nbest_objective/{name}"), |b| {
            b.iter(|| {
                ex.map(&data[..16], |i, s| {
                    let mut r = slu_core::rng::stream(7, &[i as u64]);
                    slu_core::seqloss::total_objective(&params, &g.inventory, &s.example(), &seq, &mut r)
                        .unwrap()
                        .loss
                })
            })
        });
        group.bench_function(format!("evaluate/{name}"), |b| {
            b.iter(|| black_box(evaluate(&params, &data, &g.inventory, 24, ex).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
