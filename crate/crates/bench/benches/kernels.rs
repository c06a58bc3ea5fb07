use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use rsmamba::mixer::{mixer_forward, MixerConfig, MixerLayout};
use rsmamba::model::{Model, ModelConfig};
use rsmamba::multipath::ShuffleSeed;
use rsmamba::params::{ParamStore, SpecBuilder};
use rsmamba::ssm::{selective_scan, BDiscretization};
use rsmamba::Tape;
use rsmamba_bench::{filled, scan_input};

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("selective_scan");
    for len in [64, 256, 729] {
        let inp = scan_input::<f32>(len, 64, 16);
        g.bench_with_input(BenchmarkId::new("forward", len), &inp, |b, inp| {
            b.iter(|| selective_scan(black_box(inp), BDiscretization::ZeroOrderHold).unwrap())
        });
    }
    let inp = scan_input::<f32>(256, 64, 16);
    g.bench_function("backward/256", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let v = [&inp.u, &inp.delta, &inp.a, &inp.b, &inp.c, &inp.d_skip].map(|t| tape.leaf(t.clone()));
            let y = tape
                .selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], BDiscretization::ZeroOrderHold)
                .unwrap();
            tape.backward(y.sum()).unwrap()
        })
    });
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for (m, k, n) in [(64, 64, 64), (729, 192, 384)] {
        let a = filled::<f32>(&[m, k], 0.1);
        let w = filled::<f32>(&[k, n], 0.2);
        g.bench_function(format!("{m}x{k}x{n}"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                tape.constant(a.clone()).matmul(tape.constant(w.clone())).unwrap().value()
            })
        });
    }
    g.finish();
}

fn mixer(c: &mut Criterion) {
    let cfg = MixerConfig {
        hidden_size: 64,
        intermediate_size: 128,
        time_step_rank: 4,
        state_size: 16,
        conv_width: MixerConfig::DEFAULT_CONV_WIDTH,
    };
    let mut sb = SpecBuilder::new();
    let layout = MixerLayout::register(&mut sb, "m", &cfg);
    let store = ParamStore::<f32>::init(&sb.finish(), 0).unwrap();
    let x = filled::<f32>(&[196, 64], 0.3);
    let mut g = c.benchmark_group("mixer");
    g.bench_function("forward/196x64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            let y = mixer_forward(&tape, &p, &layout, &cfg, BDiscretization::ZeroOrderHold, tape.constant(x.clone()), "m");
            y.unwrap().value()
        })
    });
    g.bench_function("forward_backward/196x64", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let y = mixer_forward(&tape, &p, &layout, &cfg, BDiscretization::ZeroOrderHold, tape.constant(x.clone()), "m");
            tape.backward(y.unwrap().sum()).unwrap()
        })
    });
    g.finish();
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::tiny(4, 64, 4, 32, 8, 4, 8);
    let model = Model::<f32>::init(cfg, 0).unwrap();
    let image = filled::<f32>(&[32, 32, 3], 0.4);
    let seed = ShuffleSeed::Train {
        run_seed: 0,
        step: 0,
        sample: 0,
    };
    c.bench_function("model/train_sample/32px", |b| {
        b.iter(|| model.loss_and_grads(black_box(&image), 1, seed).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = scan, matmul, mixer, model
}
criterion_main!(benches);
