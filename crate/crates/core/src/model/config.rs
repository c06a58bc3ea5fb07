use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mixer::MixerConfig;
use crate::multipath::{BlockConfig, Fusion, PathSet};
use crate::ssm::BDiscretization;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Base,
    Large,
    Huge,
}

impl Preset {
    /// `(blocks, hidden, intermediate, time-step rank, state size)`.
    pub fn sizes(self) -> (usize, usize, usize, usize, usize) {
        match self {
            Preset::Base => (24, 192, 384, 12, 16),
            Preset::Large => (36, 256, 512, 16, 16),
            Preset::Huge => (48, 320, 640, 20, 16),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeKind {
    None,
    Fourier,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    MeanPool,
    ClsHead,
    ClsTail,
    ClsHeadTail,
    ClsMiddle,
}

impl HeadKind {
    pub fn uses_class_token(self) -> bool {
        self != HeadKind::MeanPool
    }
}

macro_rules! name_table {
    ($ty:ty, $what:literal, $($v:expr => $s:literal),+ $(,)?) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                $(if self == $v { return $s; })+
                unreachable!()
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($s),+].join(", ")
                    )),
                }
            }
        }
    };
}

name_table!(Preset, "preset", Preset::Base => "base", Preset::Large => "large", Preset::Huge => "huge");
name_table!(PeKind, "positional encoding", PeKind::None => "none", PeKind::Fourier => "fourier", PeKind::Learnable => "learnable");
name_table!(
    HeadKind, "head",
    HeadKind::MeanPool => "mean-pool",
    HeadKind::ClsHead => "cls-head",
    HeadKind::ClsTail => "cls-tail",
    HeadKind::ClsHeadTail => "cls-head-tail",
    HeadKind::ClsMiddle => "cls-middle",
);
name_table!(PathSet, "path set", PathSet::Forward => "forward", PathSet::ForwardReverse => "forward-reverse", PathSet::All => "all");
name_table!(Fusion, "fusion", Fusion::Mean => "mean", Fusion::Gate => "gate");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Option<Preset>,
    pub num_blocks: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub time_step_rank: usize,
    pub state_size: usize,
    pub conv_width: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub num_classes: usize,
    pub pe_kind: PeKind,
    pub head_kind: HeadKind,
    pub paths: PathSet,
    pub fusion: Fusion,
    pub pre_norm: bool,
    pub simplified_b: bool,
}

impl ModelConfig {
    /// A preset at 224×224 with 16×16 patches at stride 8.
    pub fn preset(preset: Preset, num_classes: usize) -> Self {
        let (n, d, inner, rank, state) = preset.sizes();
        Self {
            preset: Some(preset),
            num_blocks: n,
            hidden_size: d,
            intermediate_size: inner,
            time_step_rank: rank,
            state_size: state,
            conv_width: MixerConfig::DEFAULT_CONV_WIDTH,
            image_height: 224,
            image_width: 224,
            patch_kernel: 16,
            patch_stride: 8,
            num_classes,
            pe_kind: PeKind::Learnable,
            head_kind: HeadKind::MeanPool,
            paths: PathSet::All,
            fusion: Fusion::Gate,
            pre_norm: true,
            simplified_b: false,
        }
    }

    /// Small custom model: intermediate size `2d`, time-step rank `⌈d/16⌉`.
    pub fn tiny(num_blocks: usize, hidden_size: usize, state_size: usize, image: usize, kernel: usize, stride: usize, num_classes: usize) -> Self {
        Self {
            preset: None,
            num_blocks,
            hidden_size,
            intermediate_size: 2 * hidden_size,
            time_step_rank: hidden_size.div_ceil(16),
            state_size,
            image_height: image,
            image_width: image,
            patch_kernel: kernel,
            patch_stride: stride,
            ..Self::preset(Preset::Base, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::invalid("model config", msg));
        self.mixer().validate()?;
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        let k = self.patch_kernel;
        if k == 0 || k > self.image_height || k > self.image_width {
            return bad(format!(
                "patch kernel {k} does not fit a {}×{} image",
                self.image_height, self.image_width
            ));
        }
        if self.patch_stride == 0 || self.patch_stride > k {
            return bad(format!("stride {} must be in 1..={k}", self.patch_stride));
        }
        if let Some(p) = self.preset {
            let (n, d, inner, rank, state) = p.sizes();
            let actual = (
                self.num_blocks,
                self.hidden_size,
                self.intermediate_size,
                self.time_step_rank,
                self.state_size,
            );
            if actual != (n, d, inner, rank, state) {
                return bad(format!("sizes {actual:?} do not match preset {p}"));
            }
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        let k = self.patch_kernel;
        let s = self.patch_stride;
        (
            (self.image_height - k) / s + 1,
            (self.image_width - k) / s + 1,
        )
    }

    /// Number of patch tokens.
    pub fn seq_len(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn b_discretization(&self) -> BDiscretization {
        if self.simplified_b {
            BDiscretization::Simplified
        } else {
            BDiscretization::ZeroOrderHold
        }
    }

    pub fn mixer(&self) -> MixerConfig {
        MixerConfig {
            hidden_size: self.hidden_size,
            intermediate_size: self.intermediate_size,
            time_step_rank: self.time_step_rank,
            state_size: self.state_size,
            conv_width: self.conv_width,
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            mixer: self.mixer(),
            paths: self.paths,
            fusion: self.fusion,
            pre_norm: self.pre_norm,
            b_discretization: self.b_discretization(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_geometry() {
        let mut c = ModelConfig::preset(Preset::Base, 30);
        assert_eq!(c.seq_len(), 729);
        c.patch_stride = 16;
        assert_eq!(c.seq_len(), 196);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut c = ModelConfig::tiny(1, 8, 2, 8, 4, 2, 3);
        c.validate().unwrap();
        c.patch_stride = 5;
        assert!(c.validate().is_err());
        c.patch_stride = 2;
        c.patch_kernel = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_sizes_are_enforced() {
        let mut c = ModelConfig::preset(Preset::Large, 30);
        c.validate().unwrap();
        c.hidden_size = 200;
        assert!(c.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for h in [
            HeadKind::MeanPool,
            HeadKind::ClsHead,
            HeadKind::ClsTail,
            HeadKind::ClsHeadTail,
            HeadKind::ClsMiddle,
        ] {
            assert_eq!(h.as_str().parse::<HeadKind>().unwrap(), h);
        }
        assert!("sideways".parse::<PeKind>().is_err());
    }
}
