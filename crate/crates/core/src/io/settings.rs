//! Every knob of a run as flat keys. The same keys serve config files, CLI
//! flags (`--key value`) and manifests, so a manifest fed back as a config
//! reproduces the run.

use std::path::PathBuf;

use thiserror::Error;

use super::kv::{KvError, KvFile};
use crate::model::{ModelConfig, Preset};
use crate::train::{SyntheticSpec, TrainConfig};

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {msg}")]
    Invalid { key: &'static str, msg: String },
}

/// Synthetic grating data. Image size and class count come from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub amplitude: f64,
    pub radii: (f64, f64),
}

impl SynthSettings {
    /// Training and validation specs; validation uses `seed + 1`.
    pub fn specs(&self, model: &ModelConfig) -> (SyntheticSpec, SyntheticSpec) {
        let train = SyntheticSpec {
            num_classes: model.num_classes,
            samples_per_class: self.per_class,
            height: model.image_height,
            width: model.image_width,
            seed: self.seed,
            noise_std: self.noise_std,
            amplitude: self.amplitude,
            radii: self.radii,
        };
        let val = SyntheticSpec {
            samples_per_class: self.val_per_class,
            seed: self.seed.wrapping_add(1),
            ..train.clone()
        };
        (train, val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SynthSettings),
    Raw { train_index: PathBuf, val_index: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub init_seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(4, 64, 4, 32, 8, 4, 8),
            train: TrainConfig::default(),
            data: DataSource::Synthetic(SynthSettings {
                per_class: 32,
                val_per_class: 32,
                seed: 0,
                noise_std: 0.5,
                amplitude: 1.0,
                radii: (2.0, 4.0),
            }),
            init_seed: 0,
        }
    }
}

fn opt_str<V: ToString>(v: &Option<V>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), V::to_string)
}

fn parse_opt<V: std::str::FromStr>(key: &'static str, s: &str) -> Result<Option<V>, SettingsError> {
    if s == "none" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| SettingsError::Invalid {
        key,
        msg: format!("cannot parse `{s}`"),
    })
}

const SYNTH_KEYS: [&str; 6] = [
    "synth-per-class",
    "synth-val-per-class",
    "synth-seed",
    "noise",
    "amplitude",
    "radii",
];
const RAW_KEYS: [&str; 2] = ["train-index", "val-index"];

impl RunSettings {
    pub fn to_kv(&self) -> KvFile {
        let m = &self.model;
        let t = &self.train;
        let mut kv = KvFile::new();
        kv.set("preset", opt_str(&m.preset));
        kv.set("classes", m.num_classes);
        kv.set("blocks", m.num_blocks);
        kv.set("hidden", m.hidden_size);
        kv.set("intermediate", m.intermediate_size);
        kv.set("rank", m.time_step_rank);
        kv.set("state", m.state_size);
        kv.set("conv-width", m.conv_width);
        kv.set("image-height", m.image_height);
        kv.set("image-width", m.image_width);
        kv.set("kernel", m.patch_kernel);
        kv.set("stride", m.patch_stride);
        kv.set("pe", m.pe_kind);
        kv.set("head", m.head_kind);
        kv.set("paths", m.paths);
        kv.set("fusion", m.fusion);
        kv.set("pre-norm", m.pre_norm);
        kv.set("simplified-b", m.simplified_b);

        kv.set("lr", t.lr0);
        kv.set("weight-decay", t.weight_decay);
        kv.set("warmup", opt_str(&t.warmup_steps));
        kv.set("epochs", t.epochs);
        kv.set("batch-size", t.batch_size);
        kv.set("seed", t.seed);
        kv.set("eval-seed", t.eval_seed);
        kv.set("crop-padding", t.augment.crop_padding);
        kv.set("hflip", t.augment.hflip);
        kv.set("vflip", t.augment.vflip);
        kv.set("threads", t.threads);
        kv.set("target-train-acc", opt_str(&t.target_train_accuracy));
        kv.set("eval-train", t.eval_train);
        kv.set("init-seed", self.init_seed);

        match &self.data {
            DataSource::Synthetic(s) => {
                kv.set("data", "synthetic");
                kv.set("synth-per-class", s.per_class);
                kv.set("synth-val-per-class", s.val_per_class);
                kv.set("synth-seed", s.seed);
                kv.set("noise", s.noise_std);
                kv.set("amplitude", s.amplitude);
                kv.set("radii", format!("{},{}", s.radii.0, s.radii.1));
            }
            DataSource::Raw { train_index, val_index } => {
                kv.set("data", "raw");
                kv.set("train-index", train_index.display());
                kv.set(
                    "val-index",
                    val_index.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string()),
                );
            }
        }
        kv
    }

    /// Applies `kv` on top of `self`. A `preset` other than `none` first
    /// resets every model size to that preset; the remaining keys then
    /// override individual fields. `image` sets both image dimensions.
    pub fn apply(&mut self, kv: &KvFile) -> Result<(), SettingsError> {
        if let Some(c) = kv.parse_value::<usize>("classes")? {
            self.model.num_classes = c;
        }
        if let Some(p) = kv.get("preset") {
            match parse_opt::<Preset>("preset", p)? {
                Some(p) => self.model = ModelConfig::preset(p, self.model.num_classes),
                None => self.model.preset = None,
            }
        }
        match kv.get("data") {
            None => {}
            Some("synthetic") => {
                if !matches!(self.data, DataSource::Synthetic(_)) {
                    self.data = RunSettings::default().data;
                }
            }
            Some("raw") => {
                if !matches!(self.data, DataSource::Raw { .. }) {
                    let train_index = kv.get("train-index").ok_or(SettingsError::Invalid {
                        key: "train-index",
                        msg: "required when data = raw".into(),
                    })?;
                    self.data = DataSource::Raw {
                        train_index: train_index.into(),
                        val_index: None,
                    };
                }
            }
            Some(other) => {
                return Err(SettingsError::Invalid {
                    key: "data",
                    msg: format!("expected `synthetic` or `raw`, got `{other}`"),
                })
            }
        }

        for key in kv.keys() {
            let v = kv.get(key).unwrap();
            let m = &mut self.model;
            let t = &mut self.train;
            macro_rules! set {
                ($field:expr) => {
                    $field = kv.parse_value(key)?.unwrap()
                };
            }
            match key {
                "preset" | "classes" | "data" => {}
                "blocks" => set!(m.num_blocks),
                "hidden" => set!(m.hidden_size),
                "intermediate" => set!(m.intermediate_size),
                "rank" => set!(m.time_step_rank),
                "state" => set!(m.state_size),
                "conv-width" => set!(m.conv_width),
                "image" => {
                    set!(m.image_height);
                    m.image_width = m.image_height;
                }
                "image-height" => set!(m.image_height),
                "image-width" => set!(m.image_width),
                "kernel" => set!(m.patch_kernel),
                "stride" => set!(m.patch_stride),
                "pe" => set!(m.pe_kind),
                "head" => set!(m.head_kind),
                "paths" => set!(m.paths),
                "fusion" => set!(m.fusion),
                "pre-norm" => set!(m.pre_norm),
                "simplified-b" => set!(m.simplified_b),
                "lr" => set!(t.lr0),
                "weight-decay" => set!(t.weight_decay),
                "warmup" => t.warmup_steps = parse_opt("warmup", v)?,
                "epochs" => set!(t.epochs),
                "batch-size" => set!(t.batch_size),
                "seed" => set!(t.seed),
                "eval-seed" => set!(t.eval_seed),
                "crop-padding" => set!(t.augment.crop_padding),
                "hflip" => set!(t.augment.hflip),
                "vflip" => set!(t.augment.vflip),
                "threads" => set!(t.threads),
                "target-train-acc" => t.target_train_accuracy = parse_opt("target-train-acc", v)?,
                "eval-train" => set!(t.eval_train),
                "init-seed" => set!(self.init_seed),
                k if SYNTH_KEYS.contains(&k) => {
                    let DataSource::Synthetic(s) = &mut self.data else {
                        return Err(SettingsError::Invalid {
                            key: "data",
                            msg: format!("`{k}` only applies to synthetic data"),
                        });
                    };
                    match k {
                        "synth-per-class" => set!(s.per_class),
                        "synth-val-per-class" => set!(s.val_per_class),
                        "synth-seed" => set!(s.seed),
                        "noise" => set!(s.noise_std),
                        "amplitude" => set!(s.amplitude),
                        _ => {
                            let (a, b) = v.split_once(',').ok_or(SettingsError::Invalid {
                                key: "radii",
                                msg: "expected two radii as `a,b`".into(),
                            })?;
                            let num = |s: &str| {
                                s.trim().parse::<f64>().map_err(|_| SettingsError::Invalid {
                                    key: "radii",
                                    msg: format!("`{s}` is not a number"),
                                })
                            };
                            s.radii = (num(a)?, num(b)?);
                        }
                    }
                }
                k if RAW_KEYS.contains(&k) => {
                    let DataSource::Raw { train_index, val_index } = &mut self.data else {
                        return Err(SettingsError::Invalid {
                            key: "data",
                            msg: format!("`{k}` needs `data = raw`"),
                        });
                    };
                    if k == "train-index" {
                        *train_index = v.into();
                    } else {
                        *val_index = parse_opt::<PathBuf>("val-index", v)?;
                    }
                }
                other => return Err(SettingsError::UnknownKey(other.to_string())),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self, SettingsError> {
        let mut s = Self::default();
        s.apply(kv)?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, PeKind};
    use crate::multipath::PathSet;

    #[test]
    fn round_trip_through_text() {
        let mut s = RunSettings::default();
        s.model.head_kind = HeadKind::ClsMiddle;
        s.model.pe_kind = PeKind::Fourier;
        s.train.warmup_steps = Some(7);
        s.train.target_train_accuracy = Some(0.99);
        s.train.augment.crop_padding = 2;
        s.init_seed = 42;
        let text = s.to_kv().to_string();
        assert_eq!(RunSettings::from_kv(&KvFile::parse(&text).unwrap()).unwrap(), s);

        s.data = DataSource::Raw {
            train_index: "a/index.txt".into(),
            val_index: Some("b/index.txt".into()),
        };
        assert_eq!(RunSettings::from_kv(&s.to_kv()).unwrap(), s);
    }

    #[test]
    fn preset_then_overrides() {
        let kv = KvFile::parse("preset = base\nclasses = 30\nblocks = 2\npaths = forward").unwrap();
        let s = RunSettings::from_kv(&kv).unwrap();
        let mut want = ModelConfig::preset(Preset::Base, 30);
        want.num_blocks = 2;
        want.paths = PathSet::Forward;
        assert_eq!(s.model, want);
    }

    #[test]
    fn rejects_unknown_and_misplaced_keys() {
        let kv = KvFile::parse("colour = red").unwrap();
        assert!(matches!(RunSettings::from_kv(&kv), Err(SettingsError::UnknownKey(_))));
        let kv = KvFile::parse("data = raw\ntrain-index = i\nnoise = 1").unwrap();
        assert!(RunSettings::from_kv(&kv).is_err());
        let kv = KvFile::parse("data = raw").unwrap();
        assert!(RunSettings::from_kv(&kv).is_err());
    }
}
