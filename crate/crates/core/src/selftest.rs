//! Built-in oracle suites: LTI duality, selective-scan reduction, gradient
//! checks, zero-order-hold exactness, parameter counts, sequence geometry,
//! multi-path invariants and checkpoint round-trips.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradients, Attrs, Tape, PRIMITIVES};
use crate::io::{decode_checkpoint, encode_checkpoint};
use crate::mixer::{mixer_forward, MixerConfig, MixerLayout};
use crate::model::{count_parameters, Model, ModelConfig, Preset};
use crate::multipath::{
    block_forward, gate_weights, BlockConfig, BlockLayout, Fusion, PathKind, PathSet, Permutation,
    ShuffleSeed,
};
use crate::params::{Bound, ParamStore, SpecBuilder};
use crate::ssm::{
    conv_apply, conv_kernel, recurrent_scan, selective_scan, zoh_discretize, BDiscretization, LtiSystem,
    SelectiveScanInput,
};
use crate::tensor::{Result, Tensor, TensorError};
use crate::train::NormStats;

/// Published sizes in millions of parameters, for 30 classes at 224².
pub const PAPER_PARAMS_M: [(Preset, f64); 3] = [(Preset::Base, 6.4), (Preset::Large, 16.2), (Preset::Huge, 33.1)];
pub const PARAM_TOLERANCE: f64 = 0.15;
pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<22} {} ({:.2}s)",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail,
                c.elapsed.as_secs_f64()
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub fn run(seed: u64) -> SelftestReport {
    SelftestReport {
        checks: vec![
            lti_duality(seed, 100),
            selective_reduction(seed, 50),
            gradient_suite(seed),
            zoh_exactness(),
            parameter_counts(),
            geometry(),
            multipath_invariants(seed, 64),
            checkpoint_round_trip(seed),
        ],
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| uniform(rng, lo, hi)).collect()).expect("shape matches data")
}

fn random_system(rng: &mut impl Rng, n: usize, delta: f64) -> Result<LtiSystem> {
    let a = (0..n).map(|_| -uniform(rng, 0.05, 2.0)).collect();
    let b = (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect();
    let c = (0..n).map(|_| uniform(rng, -1.0, 1.0)).collect();
    Ok(LtiSystem::diagonal(a, b, c, delta)?)
}

/// Recurrent and convolutional realizations of random diagonal LTI systems.
pub fn lti_duality(seed: u64, cases: usize) -> Check {
    timed("ssm duality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let n = rng.gen_range(1..=8);
            let len = rng.gen_range(1..=64);
            let delta = uniform(&mut rng, 0.01, 1.0);
            let sys = random_system(&mut rng, n, delta)?;
            let x: Vec<f64> = (0..len).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let disc = zoh_discretize(&sys)?;
            let rec = recurrent_scan(&disc, sys.c(), &x)?;
            let conv = conv_apply(&x, &conv_kernel(&disc, sys.c(), len)?)?;
            for (r, c) in rec.iter().zip(&conv) {
                worst = worst.max((r - c).abs());
            }
        }
        Ok((worst <= 1e-10, format!("max |recurrent - conv| = {worst:.2e} over {cases} systems")))
    })
}

/// With step size, B and C held constant the selective scan is an LTI recurrence.
pub fn selective_reduction(seed: u64, cases: usize) -> Check {
    timed("selective reduction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e1e);
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let (ch, n, len) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=32));
            let steps: Vec<f64> = (0..ch).map(|_| uniform(&mut rng, 0.01, 1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let a: Vec<f64> = (0..ch * n).map(|_| -uniform(&mut rng, 0.05, 2.0)).collect();
            let u = random_tensor(&mut rng, &[len, ch], -1.0, 1.0);
            let inp = SelectiveScanInput {
                u: u.clone(),
                delta: Tensor::new([len, ch], (0..len * ch).map(|i| steps[i % ch]).collect())?,
                a: Tensor::new([ch, n], a.clone())?,
                b: Tensor::new([len, n], b.iter().copied().cycle().take(len * n).collect())?,
                c: Tensor::new([len, n], c.iter().copied().cycle().take(len * n).collect())?,
                d_skip: Tensor::zeros([ch])?,
            };
            let y = selective_scan(&inp, BDiscretization::ZeroOrderHold)?;
            for d in 0..ch {
                let sys = LtiSystem::diagonal(a[d * n..(d + 1) * n].to_vec(), b.clone(), c.clone(), steps[d])?;
                let x: Vec<f64> = (0..len).map(|t| u.data()[t * ch + d]).collect();
                let want = recurrent_scan(&zoh_discretize(&sys)?, &c, &x)?;
                for t in 0..len {
                    worst = worst.max((y.data()[t * ch + d] - want[t]).abs());
                }
            }
        }
        Ok((worst <= 1e-10, format!("max |selective - LTI| = {worst:.2e} over {cases} cases")))
    })
}

/// Inputs and attributes for a gradient check of primitive `name`. Values
/// stay away from the edges of each primitive's domain.
pub fn primitive_case(name: &str, rng: &mut impl Rng) -> (Vec<Tensor<f64>>, Attrs) {
    let mut t = |shape: &[usize]| random_tensor(rng, shape, -1.0, 1.0);
    let none = Attrs::default();
    match name {
        "add" | "sub" | "mul" => (vec![t(&[3, 4]), t(&[4])], none),
        "scale" => (
            vec![t(&[3, 2])],
            Attrs {
                factor: Some(-1.7),
                ..none
            },
        ),
        "neg" | "exp" | "softplus" | "silu" | "sigmoid" | "sum" | "transpose" => (vec![t(&[3, 4])], none),
        "log" => (vec![t(&[3, 4]).map(|v| 1.2 + v)], none),
        "matmul" => (vec![t(&[3, 4]), t(&[4, 2])], none),
        "reshape" => (
            vec![t(&[3, 4])],
            Attrs {
                shape: Some(vec![2, 6]),
                ..none
            },
        ),
        "softmax" | "mean" => (
            vec![t(&[3, 4, 2])],
            Attrs {
                axis: Some(1),
                ..none
            },
        ),
        "layer_norm" => (
            vec![t(&[3, 5]), t(&[5]).map(|v| 1.0 + 0.5 * v), t(&[5])],
            Attrs {
                eps: Some(1e-5),
                ..none
            },
        ),
        "conv2d" => (
            vec![t(&[6, 5, 3]), t(&[3, 3, 3, 2]), t(&[2])],
            Attrs {
                stride: Some(2),
                ..none
            },
        ),
        "causal_conv1d" => (vec![t(&[6, 3]), t(&[3, 4]), t(&[3])], none),
        "concat" => (
            vec![t(&[2, 3]), t(&[4, 3])],
            Attrs {
                axis: Some(0),
                ..none
            },
        ),
        "slice" => (
            vec![t(&[3, 6])],
            Attrs {
                axis: Some(1),
                start: Some(1),
                end: Some(4),
                ..none
            },
        ),
        "gather_rows" => (
            vec![t(&[4, 3])],
            Attrs {
                index: Some(vec![2, 0, 3, 1, 2]),
                ..none
            },
        ),
        "selective_scan" => {
            let (len, ch, n) = (5, 3, 2);
            (
                vec![
                    t(&[len, ch]),
                    t(&[len, ch]).map(|v| 0.6 + 0.4 * v),
                    t(&[ch, n]).map(|v| -1.1 + 0.6 * v),
                    t(&[len, n]),
                    t(&[len, n]),
                    t(&[ch]),
                ],
                Attrs {
                    policy: Some(BDiscretization::ZeroOrderHold),
                    ..none
                },
            )
        }
        "cross_entropy" => (
            vec![t(&[3, 4])],
            Attrs {
                labels: Some(vec![1, 3, 0]),
                ..none
            },
        ),
        other => panic!("no gradient case for `{other}`"),
    }
}

/// Worst relative error for each primitive.
pub fn primitive_gradients(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a4d);
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for &name in PRIMITIVES {
        let (inputs, attrs) = primitive_case(name, &mut rng);
        let r = check_gradients(&inputs, eps, |tape, vars| tape.apply(name, vars, &attrs)).map_err(grad_err)?;
        out.push((name, r.max_rel_err));
    }
    out.push(("selective_scan (simplified B)", simplified_scan_gradient(&mut rng, eps)?));
    Ok(out)
}

fn simplified_scan_gradient(rng: &mut impl Rng, eps: f64) -> Result<f64> {
    let (inputs, _) = primitive_case("selective_scan", rng);
    let attrs = Attrs {
        policy: Some(BDiscretization::Simplified),
        ..Attrs::default()
    };
    Ok(check_gradients(&inputs, eps, |tape, vars| tape.apply("selective_scan", vars, &attrs))
        .map_err(grad_err)?
        .max_rel_err)
}

fn grad_err(e: crate::autodiff::GradCheckError) -> TensorError {
    match e {
        crate::autodiff::GradCheckError::Tensor(t) => t,
        other => TensorError::invalid("gradient check", other.to_string()),
    }
}

fn small_mixer(d: usize) -> MixerConfig {
    MixerConfig {
        hidden_size: d,
        intermediate_size: 2 * d,
        time_step_rank: 2,
        state_size: 3,
        conv_width: MixerConfig::DEFAULT_CONV_WIDTH,
    }
}

/// Parameters perturbed away from their initial values so that every path
/// through the mixer carries gradient.
fn jittered(store: ParamStore<f64>, rng: &mut impl Rng) -> Vec<Tensor<f64>> {
    store
        .tensors()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|&v| v + 0.1 * rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(t.shape(), data).expect("same shape")
        })
        .collect()
}

/// Gradient check of one mixer, `L = len`, hidden size `d`.
pub fn mixer_gradients(seed: u64, len: usize, d: usize, eps: f64) -> Result<f64> {
    let cfg = small_mixer(d);
    let mut b = SpecBuilder::new();
    let layout = MixerLayout::register(&mut b, "mixer", &cfg);
    let specs = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a1);
    let mut inputs = vec![random_tensor(&mut rng, &[len, d], -1.0, 1.0)];
    inputs.extend(jittered(ParamStore::init(&specs, seed)?, &mut rng));
    let r = check_gradients(&inputs, eps, |tape, vars| {
        let p = Bound::from_vars(vars[1..].to_vec());
        mixer_forward(tape, &p, &layout, &cfg, BDiscretization::ZeroOrderHold, vars[0], "mixer")
    })
    .map_err(grad_err)?;
    Ok(r.max_rel_err)
}

/// Gradient check of a full three-path gated block with pre-norm.
pub fn block_gradients(seed: u64, len: usize, d: usize, eps: f64) -> Result<f64> {
    let cfg = BlockConfig {
        mixer: small_mixer(d),
        paths: PathSet::All,
        fusion: Fusion::Gate,
        pre_norm: true,
        b_discretization: BDiscretization::ZeroOrderHold,
    };
    let mut b = SpecBuilder::new();
    let layout = BlockLayout::register(&mut b, "block", &cfg);
    let specs = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let mut inputs = vec![random_tensor(&mut rng, &[len, d], -1.0, 1.0)];
    inputs.extend(jittered(ParamStore::init(&specs, seed)?, &mut rng));
    let shuffle = Permutation::shuffled(len, seed);
    let r = check_gradients(&inputs, eps, |tape, vars| {
        let p = Bound::from_vars(vars[1..].to_vec());
        block_forward(tape, &p, &layout, &cfg, vars[0], &shuffle, "block")
    })
    .map_err(grad_err)?;
    Ok(r.max_rel_err)
}

/// The tiny end-to-end model: 2 blocks, d = 16, 3×3 tokens, 3 classes.
pub fn tiny_gradcheck_config() -> ModelConfig {
    ModelConfig::tiny(2, 16, 4, 8, 4, 2, 3)
}

/// Gradient of the cross-entropy loss with respect to every model parameter.
pub fn model_gradients(seed: u64, cfg: &ModelConfig, eps: f64) -> Result<f64> {
    let model = Model::<f64>::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70de1);
    let image = random_tensor(&mut rng, &[cfg.image_height, cfg.image_width, 3], -1.0, 1.0);
    let params = jittered(model.params().clone(), &mut rng);
    let shuffle = ShuffleSeed::Train {
        run_seed: seed,
        step: 0,
        sample: 0,
    };
    let label = 1 % cfg.num_classes;
    let r = check_gradients(&params, eps, |tape, vars| {
        let p = Bound::from_vars(vars.to_vec());
        model.forward_sample(tape, &p, &image, shuffle)?.cross_entropy(&[label])
    })
    .map_err(grad_err)?;
    Ok(r.max_rel_err)
}

pub fn gradient_suite(seed: u64) -> Check {
    timed("gradient checks", || {
        let mut worst = ("", 0.0f64);
        let mut note = |name: &'static str, err: f64| {
            if !(err <= worst.1) {
                worst = (name, err);
            }
        };
        for (name, err) in primitive_gradients(seed, GRAD_EPS)? {
            note(name, err);
        }
        note("mixer", mixer_gradients(seed, 6, 8, GRAD_EPS)?);
        note("block", block_gradients(seed, 6, 8, GRAD_EPS)?);
        note("tiny model", model_gradients(seed, &tiny_gradcheck_config(), GRAD_EPS)?);
        Ok((
            worst.1 <= GRAD_TOL,
            format!(
                "{} primitives, mixer, block, model; worst rel err {:.2e} ({})",
                PRIMITIVES.len(),
                worst.1,
                worst.0
            ),
        ))
    })
}

pub fn zoh_exactness() -> Check {
    timed("zoh exactness", || {
        let b = 1.7;
        let disc = zoh_discretize(&LtiSystem::diagonal(vec![-1.0], vec![b], vec![1.0], 2f64.ln())?)?;
        let crate::ssm::StateMatrix::Diagonal(a_bar) = &disc.a_bar else {
            unreachable!("diagonal input stays diagonal")
        };
        let ea = (a_bar[0] - 0.5).abs();
        let eb = (disc.b_bar[0] - 0.5 * b).abs();
        Ok((
            ea <= 1e-12 && eb <= 1e-12,
            format!("|Ā - 0.5| = {ea:.1e}, |B̄ - 0.5B| = {eb:.1e}"),
        ))
    })
}

pub fn parameter_counts() -> Check {
    timed("parameter counts", || {
        let mut ok = true;
        let mut parts = Vec::new();
        for (p, millions) in PAPER_PARAMS_M {
            let n = count_parameters(&ModelConfig::preset(p, 30)) as f64 / 1e6;
            ok &= (n - millions).abs() <= PARAM_TOLERANCE * millions;
            parts.push(format!("{p} {n:.2}M vs {millions}M"));
        }
        Ok((ok, parts.join(", ")))
    })
}

pub fn geometry() -> Check {
    timed("geometry", || {
        let mut cfg = ModelConfig::preset(Preset::Base, 30);
        let overlap = cfg.seq_len();
        cfg.patch_stride = 16;
        let plain = cfg.seq_len();
        Ok((
            overlap == 729 && plain == 196,
            format!("224², k=16: s=8 → L={overlap}, s=16 → L={plain}"),
        ))
    })
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn multipath_invariants(seed: u64, cases: usize) -> Check {
    timed("multi-path invariants", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9a7e);
        let (mut simplex, mut forced, mut collapse): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for case in 0..cases {
            let len = rng.gen_range(1..=12);
            let d = rng.gen_range(1..=6);
            let x = random_tensor(&mut rng, &[len, d], -2.0, 2.0);
            for kind in PathKind::ALL {
                let perm = Permutation::for_path(kind, len, rng.gen());
                let tape = Tape::new();
                let there = crate::multipath::apply_path(tape.constant(x.clone()), &perm)?;
                let back = crate::multipath::revert_path(there, &perm)?.value();
                if !back.bitwise_eq(&x) {
                    return Ok((false, format!("revert∘apply changed the input (case {case}, {kind:?})")));
                }
            }

            let k = rng.gen_range(2..=3);
            let tape = Tape::new();
            let outs: Vec<_> = (0..k)
                .map(|_| tape.constant(random_tensor(&mut rng, &[len, d], -2.0, 2.0)))
                .collect();
            let w = tape.constant(random_tensor(&mut rng, &[k * d, k], -3.0, 3.0));
            let bias = tape.constant(random_tensor(&mut rng, &[k], -3.0, 3.0));
            let g = gate_weights(&tape, &outs, w, bias)?.value();
            simplex = simplex.max((g.data().iter().sum::<f64>() - 1.0).abs());
            if g.data().iter().any(|&v| v < 0.0) {
                return Ok((false, format!("negative gate weight in case {case}")));
            }

            let (f, c) = gate_cases(&mut rng, seed + case as u64, len, d)?;
            forced = forced.max(f);
            collapse = collapse.max(c);
        }
        Ok((
            simplex <= 1e-12 && forced == 0.0 && collapse <= 1e-12,
            format!(
                "{cases} shapes: revert∘apply bitwise, |Σg - 1| ≤ {simplex:.1e}, forced gate Δ = {forced:.1e}, L=1 collapse Δ = {collapse:.1e}"
            ),
        ))
    })
}

/// Returns (gate forced to the forward path vs. plain mixer, single-token
/// block vs. plain mixer).
fn gate_cases(rng: &mut impl Rng, seed: u64, len: usize, d: usize) -> Result<(f64, f64)> {
    let cfg = BlockConfig {
        mixer: small_mixer(d),
        paths: PathSet::All,
        fusion: Fusion::Gate,
        pre_norm: false,
        b_discretization: BDiscretization::ZeroOrderHold,
    };
    let mut b = SpecBuilder::new();
    let layout = BlockLayout::register(&mut b, "block", &cfg);
    let mut store = ParamStore::<f64>::init(&b.finish(), seed)?;
    let (gw, gb) = layout.gate.expect("gated block");
    let shuffle_seed: u64 = rng.gen();

    let run = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<(Tensor<f64>, Tensor<f64>)> {
        let shuffle = Permutation::shuffled(x.shape()[0], shuffle_seed);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let block = block_forward(&tape, &p, &layout, &cfg, xv, &shuffle, "block")?.value();
        let plain = mixer_forward(&tape, &p, &layout.mixer, &cfg.mixer, cfg.b_discretization, xv, "mixer")?.value();
        Ok((block, plain))
    };

    let x = random_tensor(rng, &[len, d], -2.0, 2.0);
    let mut forced_store = store.clone();
    forced_store.set(gw, Tensor::zeros([3 * d, 3])?)?;
    forced_store.set(gb, Tensor::from_f64([3], &[1e4, -1e4, -1e4])?)?;
    let (block, plain) = run(&forced_store, &x)?;
    let forced = max_abs(&block, &plain);

    store.set(gw, random_tensor(rng, &[3 * d, 3], -1.0, 1.0))?;
    let single = random_tensor(rng, &[1, d], -2.0, 2.0);
    let (block, plain) = run(&store, &single)?;
    Ok((forced, max_abs(&block, &plain)))
}

pub fn checkpoint_round_trip(seed: u64) -> Check {
    timed("checkpoint round-trip", || {
        let model = Model::<f32>::init(ModelConfig::tiny(2, 8, 2, 8, 4, 2, 3), seed)?;
        let norm = NormStats::default();
        let bytes = encode_checkpoint(&model, &norm, seed);
        let back = decode_checkpoint::<f32>(&bytes)
            .and_then(|c| c.into_model())
            .map_err(|e| TensorError::invalid("checkpoint", e.to_string()))?;
        let same = back.config() == model.config()
            && back
                .params()
                .tensors()
                .iter()
                .zip(model.params().tensors())
                .all(|(a, b)| a.bitwise_eq(b));
        Ok((same, format!("{} tensors, {} bytes", model.params().len(), bytes.len())))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_has_a_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &name in PRIMITIVES {
            let (inputs, attrs) = primitive_case(name, &mut rng);
            let tape = Tape::<f64>::new();
            let vars: Vec<_> = inputs.into_iter().map(|t| tape.leaf(t)).collect();
            tape.apply(name, &vars, &attrs).unwrap();
        }
    }

    #[test]
    fn cheap_checks_pass() {
        for c in [zoh_exactness(), parameter_counts(), geometry(), checkpoint_round_trip(1)] {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        let c = lti_duality(3, 20);
        assert!(c.passed, "{}", c.detail);
        let c = selective_reduction(3, 10);
        assert!(c.passed, "{}", c.detail);
        let c = multipath_invariants(3, 8);
        assert!(c.passed, "{}", c.detail);
    }
}
