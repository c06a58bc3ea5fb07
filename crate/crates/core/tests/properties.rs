use proptest::prelude::*;

use rsmamba::io::{decode_checkpoint, encode_checkpoint, DataSource, KvFile, RunSettings};
use rsmamba::mixer::{mixer_forward, MixerConfig, MixerLayout};
use rsmamba::model::{Model, ModelConfig, PeKind};
use rsmamba::multipath::{PathSet, Permutation};
use rsmamba::params::{ParamStore, SpecBuilder};
use rsmamba::ssm::BDiscretization;
use rsmamba::train::{cosine_warmup_lr, macro_prf1, NormStats};
use rsmamba::{Tape, Tensor};

fn naive_f1(preds: &[usize], labels: &[usize], c: usize) -> Option<f64> {
    let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
    let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
    let actual = labels.iter().filter(|&&l| l == c).count() as f64;
    if predicted + actual == 0.0 {
        return None;
    }
    // 2·tp / (predicted + actual) is the harmonic mean of precision and recall
    Some(2.0 * tp / (predicted + actual))
}

fn values(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as u64 ^ seed) as f64 * 0.37).sin()).collect();
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn macro_f1_matches_a_recount(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..60)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = macro_prf1(&preds, &labels, 5).unwrap();
        let f1s: Vec<f64> = (0..5).filter_map(|c| naive_f1(&preds, &labels, c)).collect();
        let want = f1s.iter().sum::<f64>() / f1s.len() as f64;
        prop_assert!((m.macro_f1 - want).abs() < 1e-12);
        let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64;
        prop_assert_eq!(m.accuracy, acc);
        let total: usize = m.confusion.iter().flatten().sum();
        prop_assert_eq!(total, preds.len());
    }

    #[test]
    fn schedule_is_bounded_and_continuous(warmup in 0u64..50, extra in 1u64..500, lr0 in 1e-5f64..1.0) {
        let total = warmup + extra;
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = cosine_warmup_lr(step, warmup, total, lr0);
            prop_assert!((0.0..=lr0 * (1.0 + 1e-12)).contains(&lr));
            if step >= warmup {
                prop_assert!(lr <= prev + 1e-15, "not decaying at step {}", step);
                prev = lr;
            }
        }
        prop_assert!((cosine_warmup_lr(warmup, warmup, total, lr0) - lr0).abs() <= 1e-12 * lr0);
        if warmup > 0 {
            // the last warmup step sits one increment below the peak
            let below = cosine_warmup_lr(warmup - 1, warmup, total, lr0);
            prop_assert!((lr0 - below - lr0 / warmup as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn permutation_inverse_composes_to_identity(len in 1usize..200, seed: u64) {
        let p = Permutation::shuffled(len, seed);
        for (i, &j) in p.order().iter().enumerate() {
            prop_assert_eq!(p.inverse()[j], i);
        }
    }

    #[test]
    fn mixer_is_causal(len in 2usize..12, d in 1usize..6, cut_frac in 0.0f64..1.0, seed: u64) {
        let cfg = MixerConfig {
            hidden_size: d,
            intermediate_size: 2 * d,
            time_step_rank: 1,
            state_size: 2,
            conv_width: MixerConfig::DEFAULT_CONV_WIDTH,
        };
        let mut b = SpecBuilder::new();
        let layout = MixerLayout::register(&mut b, "m", &cfg);
        let store = ParamStore::<f64>::init(&b.finish(), seed).unwrap();
        let cut = 1 + ((len - 1) as f64 * cut_frac) as usize;
        let x = values(&[len, d], seed);
        let mut bumped = x.data().to_vec();
        for v in &mut bumped[cut * d..] {
            *v += 1.5;
        }
        let run = |x: Tensor<f64>| {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            mixer_forward(&tape, &p, &layout, &cfg, BDiscretization::ZeroOrderHold, tape.constant(x), "m")
                .unwrap()
                .value()
        };
        let (a, b) = (run(x.clone()), run(Tensor::new([len, d], bumped).unwrap()));
        prop_assert_eq!(&a.data()[..cut * d], &b.data()[..cut * d]);
        prop_assert_ne!(&a.data()[cut * d..], &b.data()[cut * d..]);
    }

    #[test]
    fn checkpoints_round_trip(blocks in 1usize..3, d in 2usize..10, classes in 2usize..6, seed: u64, all in any::<bool>()) {
        let mut cfg = ModelConfig::tiny(blocks, d, 2, 8, 4, 2, classes);
        cfg.paths = if all { PathSet::All } else { PathSet::Forward };
        cfg.pe_kind = PeKind::Fourier;
        let model = Model::<f32>::init(cfg, seed).unwrap();
        let norm = NormStats { mean: [0.1, 0.2, 0.3], std: [1.1, 0.9, 1.0 / 3.0] };
        let bytes = encode_checkpoint(&model, &norm, seed);
        let ck = decode_checkpoint::<f32>(&bytes).unwrap();
        prop_assert_eq!(ck.header.norm, norm);
        let back = ck.into_model().unwrap();
        prop_assert_eq!(encode_checkpoint(&back, &norm, seed), bytes);
    }

    #[test]
    fn kv_text_round_trips(entries in prop::collection::btree_map("[a-z][a-z0-9-]{0,8}", "[A-Za-z0-9.,_/-]{1,12}", 0..10)) {
        let mut kv = KvFile::new();
        for (k, v) in &entries {
            kv.set(k.clone(), v);
        }
        let back = KvFile::parse(&kv.to_string()).unwrap();
        prop_assert_eq!(back, kv);
    }

    #[test]
    fn settings_round_trip(epochs in 1usize..100, lr in 1e-6f64..1.0, seed: u64, noise in 0.0f64..5.0, blocks in 1usize..5) {
        let mut s = RunSettings::default();
        s.train.epochs = epochs;
        s.train.lr0 = lr;
        s.train.seed = seed;
        s.model.num_blocks = blocks;
        if let DataSource::Synthetic(syn) = &mut s.data {
            syn.noise_std = noise;
        }
        let back = RunSettings::from_kv(&KvFile::parse(&s.to_kv().to_string()).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }
}
