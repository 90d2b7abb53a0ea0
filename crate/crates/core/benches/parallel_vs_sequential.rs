use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use trajforge::netgrid::{GridSpec, Network};
use trajforge::par;
use trajforge::pretrain::{batch_grads, encode_all, training_windows};
use trajforge::synthgen::{gen_dataset, SynthConfig};
use trajforge::tokenizer::{ContextWindow, VocabSpec};
use trajforge::trajmodel::{contexts_from, generate_corpus, ModelConfig, PolicyModel};

fn setup() -> (trajforge::synthgen::Dataset, PolicyModel) {
    let net = Network::Grid(GridSpec::new(5, 5).unwrap());
    let cfg = SynthConfig {
        users: 8,
        trajectories: 64,
        archetypes: vec![[5.0, -3.0, -4.0], [5.0, 2.0, -4.0]],
        theta_noise: 0.1,
        max_len: 50,
        od_pool: 0,
        depart_jitter: 1,
        speed_jitter: 3.0,
    };
    let (ds, _) = gen_dataset(&net, &cfg, 1).unwrap();
    let vocab = VocabSpec::for_network(&net, 8, 64, false).unwrap();
    let model = PolicyModel::new(ModelConfig::default(), vocab, 2).unwrap();
    (ds, model)
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench(c: &mut Criterion) {
    let (ds, model) = setup();
    let net = &ds.network;
    let eps = encode_all(ds.trajectories.iter()).unwrap();
    let k = model.cfg.context;
    let windows: Vec<ContextWindow> = training_windows(&eps, k, k / 2)
        .unwrap()
        .into_iter()
        .take(64)
        .map(|(e, s, l)| eps[e].window(s, l))
        .collect();
    let pool: Vec<_> = ds.trajectories.iter().collect();
    let contexts = contexts_from(&pool, 32, 50, 1.0, 3).unwrap();

    let mut g = c.benchmark_group("batch_grads_64_windows");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| batch_grads(&model, &windows, net, 0, true).unwrap());
        });
    }
    g.finish();

    let mut g = c.benchmark_group("generate_32_trajectories");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(seq);
            b.iter(|| generate_corpus(&contexts, &model, net));
        });
    }
    g.finish();
    par::set_sequential(false);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench
}
criterion_main!(benches);
