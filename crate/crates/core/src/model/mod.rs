//! The image classifier: overlapping patch embedding, positional encoding,
//! residual multi-path blocks and a pooled (or class-token) linear head.

mod config;

pub use config::{HeadKind, ModelConfig, PeKind, Preset};

use std::f64::consts::PI;

use crate::autodiff::{Tape, Var};
use crate::multipath::{block_forward, BlockLayout, ShuffleSeed, LAYER_NORM_EPS};
use crate::params::{Bound, Init, ParamId, ParamSpec, ParamStore, SpecBuilder};
use crate::tensor::{Element, Result, Tensor, TensorError};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub pos_embedding: Option<ParamId>,
    pub class_token: Option<ParamId>,
    pub blocks: Vec<BlockLayout>,
    pub norm: (ParamId, ParamId),
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl ModelLayout {
    pub fn build(cfg: &ModelConfig) -> (Self, Vec<ParamSpec>) {
        let d = cfg.hidden_size;
        let k = cfg.patch_kernel;
        let mut b = SpecBuilder::new();
        let fan = 1.0 / ((k * k * IMAGE_CHANNELS) as f64).sqrt();
        let patch_weight = b.add("patch.weight", [k, k, IMAGE_CHANNELS, d], Init::Uniform(fan));
        let patch_bias = b.add("patch.bias", [d], Init::Uniform(fan));
        let pos_embedding = (cfg.pe_kind == PeKind::Learnable)
            .then(|| b.add("pos_embedding", [cfg.seq_len(), d], Init::Normal(0.02)));
        let class_token = cfg
            .head_kind
            .uses_class_token()
            .then(|| b.add("class_token", [d], Init::Normal(0.02)));
        let block_cfg = cfg.block();
        let blocks = (0..cfg.num_blocks)
            .map(|i| BlockLayout::register(&mut b, &format!("blocks.{i}"), &block_cfg))
            .collect();
        let norm = (
            b.add("norm.gamma", [d], Init::Ones),
            b.add("norm.beta", [d], Init::Zeros),
        );
        let head_weight = b.add(
            "head.weight",
            [d, cfg.num_classes],
            Init::Uniform(1.0 / (d as f64).sqrt()),
        );
        let head_bias = b.add("head.bias", [cfg.num_classes], Init::Zeros);
        let layout = Self {
            patch_weight,
            patch_bias,
            pos_embedding,
            class_token,
            blocks,
            norm,
            head_weight,
            head_bias,
        };
        (layout, b.finish())
    }
}

/// Total learnable scalars for `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    ModelLayout::build(cfg).1.iter().map(ParamSpec::numel).sum()
}

/// Fixed sin/cos features of the patch grid, `[rows·cols, d]`.
///
/// Each axis gets `d/4` frequencies spaced geometrically from 1 to `L`; a row
/// holds `(sin, cos)` pairs for the row coordinate, then for the column
/// coordinate. Columns beyond `4·(d/4)` are zero.
pub fn fourier_encoding(rows: usize, cols: usize, d: usize) -> Vec<f64> {
    let len = rows * cols;
    let nf = d / 4;
    let freqs: Vec<f64> = (0..nf)
        .map(|j| {
            if nf == 1 {
                1.0
            } else {
                (len as f64).powf(j as f64 / (nf - 1) as f64)
            }
        })
        .collect();
    let mut out = vec![0.0; len * d];
    for r in 0..rows {
        for c in 0..cols {
            let row = &mut out[(r * cols + c) * d..(r * cols + c + 1) * d];
            let coords = [r as f64 / rows as f64, c as f64 / cols as f64];
            for (axis, &pos) in coords.iter().enumerate() {
                for (j, &f) in freqs.iter().enumerate() {
                    let angle = PI * f * pos;
                    let at = 2 * (axis * nf + j);
                    row[at] = angle.sin();
                    row[at + 1] = angle.cos();
                }
            }
        }
    }
    out
}

/// Which randomness a forward pass uses for shuffle paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train { run_seed: u64, step: u64 },
    Eval { seed: u64 },
}

impl ForwardMode {
    pub fn shuffle_for(&self, sample: u64) -> ShuffleSeed {
        match *self {
            ForwardMode::Train { run_seed, step } => ShuffleSeed::Train {
                run_seed,
                step,
                sample,
            },
            ForwardMode::Eval { seed } => ShuffleSeed::Eval { seed },
        }
    }
}

/// Configuration, layout and parameters together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element> {
    config: ModelConfig,
    layout: ModelLayout,
    specs: Vec<ParamSpec>,
    params: ParamStore<T>,
    fourier: Option<Tensor<T>>,
}

impl<T: Element> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = ModelLayout::build(&config);
        let params = ParamStore::init(&specs, seed)?;
        Ok(Self::assemble(config, layout, specs, params))
    }

    /// Wraps existing parameters; shapes and order must match `config`.
    pub fn from_params(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = ModelLayout::build(&config);
        let params = ParamStore::from_tensors(&specs, tensors)?;
        Ok(Self::assemble(config, layout, specs, params))
    }

    fn assemble(config: ModelConfig, layout: ModelLayout, specs: Vec<ParamSpec>, params: ParamStore<T>) -> Self {
        let fourier = (config.pe_kind == PeKind::Fourier).then(|| {
            let (r, c) = config.grid();
            Tensor::from_f64([r * c, config.hidden_size], &fourier_encoding(r, c, config.hidden_size))
                .expect("grid is non-empty")
        });
        Self {
            config,
            layout,
            specs,
            params,
            fourier,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model::assemble(
            self.config.clone(),
            self.layout.clone(),
            self.specs.clone(),
            self.params.cast(),
        )
    }

    /// `H×W×3` image to `[L, d]` patch tokens (row-major over the grid).
    pub fn patch_embed<'t>(&self, tape: &'t Tape<T>, p: &Bound<'t, T>, image: &Tensor<T>) -> Result<Var<'t, T>> {
        let c = &self.config;
        let want = [c.image_height, c.image_width, IMAGE_CHANNELS];
        if image.shape() != want {
            return Err(TensorError::ShapeMismatch {
                op: "patch_embed",
                lhs: want.to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        tape.constant(image.clone())
            .conv2d(p.var(self.layout.patch_weight), p.var(self.layout.patch_bias), c.patch_stride)?
            .reshape([c.seq_len(), c.hidden_size])
    }

    pub fn add_position_encoding<'t>(&self, tape: &'t Tape<T>, p: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        match (self.config.pe_kind, self.layout.pos_embedding, &self.fourier) {
            (PeKind::Learnable, Some(id), _) => tokens.add(p.var(id)),
            (PeKind::Fourier, _, Some(table)) => tokens.add(tape.constant(table.clone())),
            _ => Ok(tokens),
        }
    }

    /// Logits `[1, C]` for one image.
    pub fn forward_sample<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        image: &Tensor<T>,
        shuffle: ShuffleSeed,
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let d = cfg.hidden_size;
        let tokens = self.patch_embed(tape, p, image)?;
        let tokens = self.add_position_encoding(tape, p, tokens)?;
        let len = cfg.seq_len();

        let (mut x, readout): (Var<'t, T>, Vec<usize>) = match self.layout.class_token {
            None => (tokens, Vec::new()),
            Some(id) => {
                let cls = p.var(id).reshape([1, d])?;
                match cfg.head_kind {
                    HeadKind::ClsHead => (tape.concat(&[cls, tokens], 0)?, vec![0]),
                    HeadKind::ClsTail => (tape.concat(&[tokens, cls], 0)?, vec![len]),
                    HeadKind::ClsHeadTail => (tape.concat(&[cls, tokens, cls], 0)?, vec![0, len + 1]),
                    HeadKind::ClsMiddle => {
                        let m = len / 2;
                        let mut parts = Vec::with_capacity(3);
                        if m > 0 {
                            parts.push(tokens.slice(0, 0, m)?);
                        }
                        parts.push(cls);
                        parts.push(tokens.slice(0, m, len)?);
                        (tape.concat(&parts, 0)?, vec![m])
                    }
                    HeadKind::MeanPool => unreachable!("mean pooling has no class token"),
                }
            }
        };

        let block_cfg = cfg.block();
        let seq = x.shape()[0];
        for (i, layout) in self.layout.blocks.iter().enumerate() {
            let label = format!("block {i}");
            let perm = shuffle.permutation(i, seq);
            let y = block_forward(tape, p, layout, &block_cfg, x, &perm, &label)?;
            x = x.add(y)?.ensure_finite(|| label.clone())?;
        }

        let feature = match readout.as_slice() {
            [] => x.mean(0)?.reshape([1, d])?,
            [at] => x.slice(0, *at, at + 1)?,
            [a, b] => x
                .slice(0, *a, a + 1)?
                .add(x.slice(0, *b, b + 1)?)?
                .scale(0.5),
            _ => unreachable!(),
        };
        let (g, b) = self.layout.norm;
        feature
            .layer_norm(p.var(g), p.var(b), LAYER_NORM_EPS)?
            .matmul(p.var(self.layout.head_weight))?
            .add(p.var(self.layout.head_bias))?
            .ensure_finite(|| "head".to_string())
    }

    /// Logits `[B, C]` without recording gradients.
    pub fn forward(&self, images: &[Tensor<T>], mode: ForwardMode) -> Result<Tensor<T>> {
        let c = self.config.num_classes;
        let mut out = Vec::with_capacity(images.len() * c);
        for (i, img) in images.iter().enumerate() {
            out.extend_from_slice(self.logits(img, mode.shuffle_for(i as u64))?.data());
        }
        Tensor::new([images.len(), c], out)
    }

    /// Logits `[1, C]` for one image without recording gradients.
    pub fn logits(&self, image: &Tensor<T>, shuffle: ShuffleSeed) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Ok(self.forward_sample(&tape, &p, image, shuffle)?.value())
    }

    /// Cross-entropy loss, logits and parameter gradients for one labelled image.
    pub fn loss_and_grads(&self, image: &Tensor<T>, label: usize, shuffle: ShuffleSeed) -> Result<SampleGrad<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let logits = self.forward_sample(&tape, &p, image, shuffle)?;
        let loss = logits.cross_entropy(&[label])?;
        let grads = tape.backward(loss)?;
        Ok(SampleGrad {
            loss: loss.value().item()?.as_f64(),
            logits: logits.value(),
            grads: p.grads(&grads),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SampleGrad<T: Element> {
    pub loss: f64,
    pub logits: Tensor<T>,
    pub grads: Vec<Tensor<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(head: HeadKind) -> ModelConfig {
        ModelConfig {
            head_kind: head,
            ..ModelConfig::tiny(1, 8, 2, 8, 4, 2, 3)
        }
    }

    fn image(cfg: &ModelConfig, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = cfg.image_height * cfg.image_width * 3;
        Tensor::from_f64([cfg.image_height, cfg.image_width, 3], &(0..n).map(f).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn constant_image_gives_identical_rows() {
        let cfg = tiny(HeadKind::MeanPool);
        let m = Model::<f64>::init(cfg.clone(), 0).unwrap();
        let tape = Tape::new();
        let p = m.params().bind_frozen(&tape);
        let t = m.patch_embed(&tape, &p, &image(&cfg, |_| 0.3)).unwrap().value();
        let d = cfg.hidden_size;
        for r in 1..cfg.seq_len() {
            assert_eq!(&t.data()[r * d..(r + 1) * d], &t.data()[..d]);
        }
    }

    #[test]
    fn fourier_origin_is_zero_one_pattern() {
        let pe = fourier_encoding(3, 3, 8);
        assert_eq!(&pe[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let cfg = tiny(HeadKind::ClsHeadTail);
        let mut m = Model::<f64>::init(cfg.clone(), 1).unwrap();
        let w = m.layout().head_weight;
        m.params_mut().set(w, Tensor::zeros([8, 3]).unwrap()).unwrap();
        let g = m
            .loss_and_grads(&image(&cfg, |i| (i as f64).sin()), 2, ShuffleSeed::Eval { seed: 0 })
            .unwrap();
        assert!(g.logits.data().iter().all(|&v| v == 0.0));
        assert!((g.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let cfg = tiny(HeadKind::MeanPool);
        let m = Model::<f64>::init(cfg, 0).unwrap();
        let bad = Tensor::zeros([8, 8, 1]).unwrap();
        assert!(m.logits(&bad, ShuffleSeed::Eval { seed: 0 }).is_err());
    }

    #[test]
    fn parameter_count_tracks_optional_tensors() {
        let base = tiny(HeadKind::MeanPool);
        let cls = tiny(HeadKind::ClsHead);
        assert_eq!(count_parameters(&cls) - count_parameters(&base), 8);
        let fourier = ModelConfig {
            pe_kind: PeKind::Fourier,
            ..base.clone()
        };
        assert_eq!(count_parameters(&base) - count_parameters(&fourier), 9 * 8);
    }
}
