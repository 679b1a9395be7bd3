use criterion::{criterion_group, criterion_main, Criterion};
use ltg_core::agm::{target_pieces, AgmConfig, AgmModel, DecodeConfig};
use ltg_core::alm::{AlmConfig, AlmModel};
use ltg_core::autograd::Graph;
use ltg_core::dataworld::generate_dataset;
use ltg_core::params::Grads;
use ltg_core::preprocess::build_targets;
use ltg_core::WorldConfig;

fn models(c: &mut Criterion) {
    let world = WorldConfig {
        n_train: 16,
        n_test: 0,
        ..WorldConfig::default()
    };
    let scenes = generate_dataset(&world, 0).unwrap().train.instances;
    let alm = AlmModel::new(AlmConfig::default(), 0).unwrap();
    let agm = AgmModel::new(AgmConfig::default(), 0).unwrap();

    c.bench_function("locator forward x16", |b| {
        b.iter(|| {
            for s in &scenes {
                let mut g = Graph::new(&alm.store);
                alm.forward(&mut g, &s.question, &s.tokens, &s.visual_grid).unwrap();
            }
        })
    });
    let mut grads = Grads::new(&alm.store);
    c.bench_function("locator forward+backward x16", |b| {
        b.iter(|| {
            for s in &scenes {
                let t = build_targets(&s.answer_tokens, &s.tokens);
                alm.loss_and_grads(s, &t, &mut grads).unwrap();
            }
        })
    });
    let mut grads = Grads::new(&agm.store);
    c.bench_function("generator forward+backward x16", |b| {
        b.iter(|| {
            for s in &scenes {
                let mut batch = agm.batch(&s.question, &s.answer_tokens, &s.token_words()).unwrap();
                batch.target_ids = target_pieces(agm.vocab(), &s.answer_tokens);
                agm.loss_and_grads(&batch, &mut grads).unwrap();
            }
        })
    });
    let decode = DecodeConfig::default();
    c.bench_function("generator greedy decode x16", |b| {
        b.iter(|| {
            for s in &scenes {
                let batch = agm.batch(&s.question, &s.answer_tokens, &s.token_words()).unwrap();
                agm.generate_pieces(&batch, &decode).unwrap();
            }
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = models
}
criterion_main!(benches);
