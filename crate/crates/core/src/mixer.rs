//! Gated selective-SSM mixer: input projection into a value and a gate branch,
//! depthwise causal convolution, input-dependent `Δ, B, C`, selective scan,
//! and output projection.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, Init, ParamId, SpecBuilder};
use crate::ssm::BDiscretization;
use crate::tensor::{Element, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub time_step_rank: usize,
    pub state_size: usize,
    pub conv_width: usize,
}

impl MixerConfig {
    pub const DEFAULT_CONV_WIDTH: usize = 4;

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("time_step_rank", self.time_step_rank),
            ("state_size", self.state_size),
            ("conv_width", self.conv_width),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(TensorError::invalid("mixer", format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Ids of one mixer's parameters. Linear maps store weights as `[in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerLayout {
    pub in_proj: ParamId,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub x_proj: ParamId,
    pub dt_proj_weight: ParamId,
    pub dt_proj_bias: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: ParamId,
}

impl MixerLayout {
    pub fn register(b: &mut SpecBuilder, prefix: &str, cfg: &MixerConfig) -> Self {
        let d = cfg.hidden_size;
        let inner = cfg.intermediate_size;
        let rank = cfg.time_step_rank;
        let n = cfg.state_size;
        let w = cfg.conv_width;
        let fan = |f: usize| Init::Uniform(1.0 / (f as f64).sqrt());
        Self {
            in_proj: b.add(format!("{prefix}.in_proj"), [d, 2 * inner], fan(d)),
            conv_weight: b.add(format!("{prefix}.conv.weight"), [inner, w], fan(w)),
            conv_bias: b.add(format!("{prefix}.conv.bias"), [inner], fan(w)),
            x_proj: b.add(format!("{prefix}.x_proj"), [inner, rank + 2 * n], fan(inner)),
            dt_proj_weight: b.add(format!("{prefix}.dt_proj.weight"), [rank, inner], fan(rank)),
            dt_proj_bias: b.add(
                format!("{prefix}.dt_proj.bias"),
                [inner],
                Init::InverseSoftplusLogUniform { min: 1e-3, max: 1e-1 },
            ),
            a_log: b.add(format!("{prefix}.a_log"), [inner, n], Init::LogRange),
            d_skip: b.add(format!("{prefix}.d_skip"), [inner], Init::Ones),
            out_proj: b.add(format!("{prefix}.out_proj"), [inner, d], fan(inner)),
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.in_proj,
            self.conv_weight,
            self.conv_bias,
            self.x_proj,
            self.dt_proj_weight,
            self.dt_proj_bias,
            self.a_log,
            self.d_skip,
            self.out_proj,
        ]
    }
}

/// Learnable scalars in one mixer, summed per component.
pub fn count_mixer_params(cfg: &MixerConfig) -> usize {
    let (d, inner, rank, n, w) = (
        cfg.hidden_size,
        cfg.intermediate_size,
        cfg.time_step_rank,
        cfg.state_size,
        cfg.conv_width,
    );
    let in_proj = d * 2 * inner;
    let conv = inner * w + inner;
    let x_proj = inner * (rank + 2 * n);
    let dt_proj = rank * inner + inner;
    let a_log = inner * n;
    let d_skip = inner;
    let out_proj = inner * d;
    in_proj + conv + x_proj + dt_proj + a_log + d_skip + out_proj
}

/// `[L×d] → [L×d]`. `label` names the mixer in non-finite errors.
pub fn mixer_forward<'t, T: Element>(
    tape: &'t Tape<T>,
    params: &Bound<'t, T>,
    layout: &MixerLayout,
    cfg: &MixerConfig,
    policy: BDiscretization,
    x: Var<'t, T>,
    label: &str,
) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != cfg.hidden_size {
        return Err(TensorError::invalid(
            "mixer",
            format!("expected [L, {}], got {shape:?}", cfg.hidden_size),
        ));
    }
    let inner = cfg.intermediate_size;
    let (rank, n) = (cfg.time_step_rank, cfg.state_size);
    let p = |id| params.var(id);

    let xz = x.matmul(p(layout.in_proj))?;
    let u = xz.slice(1, 0, inner)?;
    let z = xz.slice(1, inner, 2 * inner)?;
    let u = u
        .causal_conv1d(p(layout.conv_weight), p(layout.conv_bias))?
        .silu();

    let dbc = u.matmul(p(layout.x_proj))?;
    let dt = dbc.slice(1, 0, rank)?;
    let b = dbc.slice(1, rank, rank + n)?;
    let c = dbc.slice(1, rank + n, rank + 2 * n)?;
    let delta = dt
        .matmul(p(layout.dt_proj_weight))?
        .add(p(layout.dt_proj_bias))?
        .softplus()
        .ensure_finite(|| format!("{label}: step sizes"))?;
    let a = p(layout.a_log).exp().neg();

    let y = tape
        .selective_scan(u, delta, a, b, c, p(layout.d_skip), policy)?
        .ensure_finite(|| format!("{label}: scan output"))?;
    y.mul(z.silu())?
        .matmul(p(layout.out_proj))?
        .ensure_finite(|| format!("{label}: output"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn toy() -> MixerConfig {
        MixerConfig {
            hidden_size: 4,
            intermediate_size: 8,
            time_step_rank: 2,
            state_size: 2,
            conv_width: 4,
        }
    }

    #[test]
    fn analytic_count_matches_registry() {
        for cfg in [
            toy(),
            MixerConfig {
                hidden_size: 192,
                intermediate_size: 384,
                time_step_rank: 12,
                state_size: 16,
                conv_width: 4,
            },
        ] {
            let mut b = SpecBuilder::new();
            MixerLayout::register(&mut b, "m", &cfg);
            let total: usize = b.finish().iter().map(|s| s.numel()).sum();
            assert_eq!(count_mixer_params(&cfg), total);
        }
    }

    #[test]
    fn doubling_hidden_adds_only_projection_delta() {
        let cfg = toy();
        let wide = MixerConfig {
            hidden_size: 8,
            ..cfg
        };
        let delta = count_mixer_params(&wide) - count_mixer_params(&cfg);
        // in_proj grows by d·2·IS, out_proj by IS·d
        assert_eq!(delta, 4 * 2 * 8 + 8 * 4);
    }

    #[test]
    fn zero_out_proj_annihilates() {
        let cfg = toy();
        let mut b = SpecBuilder::new();
        let layout = MixerLayout::register(&mut b, "m", &cfg);
        let specs = b.finish();
        let mut store = ParamStore::<f64>::init(&specs, 1).unwrap();
        store
            .set(layout.out_proj, Tensor::zeros([8, 4]).unwrap())
            .unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.constant(Tensor::from_f64([5, 4], &[0.7; 20]).unwrap());
        let y = mixer_forward(&tape, &bound, &layout, &cfg, Default::default(), x, "m").unwrap();
        assert_eq!(y.shape(), vec![5, 4]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_width() {
        let cfg = toy();
        let mut b = SpecBuilder::new();
        let layout = MixerLayout::register(&mut b, "m", &cfg);
        let store = ParamStore::<f64>::init(&b.finish(), 1).unwrap();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let x = tape.constant(Tensor::zeros([5, 3]).unwrap());
        assert!(mixer_forward(&tape, &bound, &layout, &cfg, Default::default(), x, "m").is_err());
    }
}
