//! Directional ablations on the synthetic benchmark. Every variant of a suite
//! trains with the same budget, data and seeds; rows report validation
//! precision, recall and F1 (percent) averaged over seeds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::SyntheticSpec;
use crate::io::{DataSource, RunSettings, SynthSettings};
use super::trainer::{train, TrainConfig, TrainError};
use crate::model::{HeadKind, ModelConfig, PeKind};
use crate::multipath::{Fusion, PathSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Head,
    Paths,
    Pe,
    Tokens,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Head, Suite::Paths, Suite::Pe, Suite::Tokens];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Head => "head",
            Suite::Paths => "paths",
            Suite::Pe => "pe",
            Suite::Tokens => "tokens",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown suite `{s}` (expected one of: head, paths, pe, tokens)"))
    }
}

/// Shared budget for every variant of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    /// Starting point for every variant; suites change only their own switches.
    pub base: ModelConfig,
    pub train: TrainConfig,
    /// Training data; validation uses the same generator with `seed + 1`.
    pub data: SyntheticSpec,
    pub val_per_class: usize,
    pub seeds: Vec<u64>,
}

impl AblationSettings {
    /// Desk-scale benchmark: 16×16 gratings over 8 classes, one block, 4×4
    /// tokens. Noise is set so the forward-only model lands near 80% while
    /// the Fourier-peak oracle stays above 97%.
    pub fn desk(seed: u64) -> Self {
        let mut base = ModelConfig::tiny(1, 32, 4, 16, 4, 4, 8);
        base.pe_kind = PeKind::Learnable;
        Self {
            base,
            train: TrainConfig {
                lr0: 3e-3,
                epochs: 20,
                batch_size: 32,
                eval_train: false,
                seed,
                ..Default::default()
            },
            data: SyntheticSpec::new(8, 200, 16, 1000 + seed, 4.0),
            val_per_class: 200,
            seeds: vec![seed, seed + 1, seed + 2],
        }
    }
}

impl AblationSettings {
    /// Flat form; the first seed becomes the training and init seed.
    pub fn to_run(&self) -> RunSettings {
        let first = self.seeds.first().copied().unwrap_or(0);
        RunSettings {
            model: self.base.clone(),
            train: TrainConfig {
                seed: first,
                ..self.train.clone()
            },
            data: DataSource::Synthetic(SynthSettings {
                per_class: self.data.samples_per_class,
                val_per_class: self.val_per_class,
                seed: self.data.seed,
                noise_std: self.data.noise_std,
                amplitude: self.data.amplitude,
                radii: self.data.radii,
            }),
            init_seed: first,
        }
    }

    /// Inverse of [`to_run`](Self::to_run) with `count` consecutive seeds
    /// starting at the training seed.
    pub fn from_run(run: &RunSettings, count: usize) -> Result<Self, TrainError> {
        let DataSource::Synthetic(synth) = &run.data else {
            return Err(TrainError::Config("ablations run on synthetic data".into()));
        };
        let (data, _) = synth.specs(&run.model);
        Ok(Self {
            base: run.model.clone(),
            train: run.train.clone(),
            data,
            val_per_class: synth.val_per_class,
            seeds: (0..count as u64).map(|i| run.train.seed + i).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub cells: Vec<String>,
    pub model: ModelConfig,
}

fn mark(on: bool) -> String {
    if on { "✓" } else { "" }.to_string()
}

pub fn columns(suite: Suite) -> Vec<&'static str> {
    match suite {
        Suite::Head => vec!["Head", "Tail", "Middle", "Mean Pooling"],
        Suite::Paths => vec!["Forward", "Reverse", "Shuffle", "Mean/Gate"],
        Suite::Pe => vec!["PE"],
        Suite::Tokens => vec!["Token"],
    }
}

/// Rows in the order of the corresponding table.
pub fn variants(suite: Suite, base: &ModelConfig) -> Vec<Variant> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut m = base.clone();
        f(&mut m);
        m
    };
    match suite {
        Suite::Head => [
            (HeadKind::ClsHead, [true, false, false, false]),
            (HeadKind::ClsTail, [false, true, false, false]),
            (HeadKind::ClsHeadTail, [true, true, false, false]),
            (HeadKind::ClsMiddle, [false, false, true, false]),
            (HeadKind::MeanPool, [false, false, false, true]),
        ]
        .into_iter()
        .map(|(h, marks)| Variant {
            cells: marks.into_iter().map(mark).collect(),
            model: with(&|m| m.head_kind = h),
        })
        .collect(),
        Suite::Paths => [
            (PathSet::Forward, Fusion::Gate, "-"),
            (PathSet::ForwardReverse, Fusion::Mean, "Mean"),
            (PathSet::ForwardReverse, Fusion::Gate, "Gate"),
            (PathSet::All, Fusion::Gate, "Gate"),
        ]
        .into_iter()
        .map(|(p, fu, label)| {
            let kinds = p.kinds().len();
            Variant {
                cells: vec![mark(true), mark(kinds >= 2), mark(kinds == 3), label.to_string()],
                model: with(&|m| {
                    m.paths = p;
                    m.fusion = fu;
                }),
            }
        })
        .collect(),
        Suite::Pe => [("None", PeKind::None), ("Fourier", PeKind::Fourier), ("Learnable", PeKind::Learnable)]
            .into_iter()
            .map(|(label, pe)| Variant {
                cells: vec![label.to_string()],
                model: with(&|m| m.pe_kind = pe),
            })
            .collect(),
        Suite::Tokens => {
            let k = base.patch_kernel;
            let size = base.image_height;
            let large = size + size / 2;
            [(size, k), (size, (k / 2).max(1)), (large, (k / 2).max(1))]
                .into_iter()
                .map(|(px, s)| Variant {
                    cells: vec![format!("{px}²px, k={k}, s={s}")],
                    model: with(&|m| {
                        m.image_height = px;
                        m.image_width = px;
                        m.patch_stride = s;
                    }),
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cells: Vec<String>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_seed_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

pub fn run_ablation(suite: Suite, settings: &AblationSettings) -> Result<AblationTable, TrainError> {
    if settings.seeds.is_empty() {
        return Err(TrainError::Config("an ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for v in variants(suite, &settings.base) {
        let mut data = settings.data.clone();
        data.height = v.model.image_height;
        data.width = v.model.image_width;
        let mut val = data.clone();
        val.seed = data.seed.wrapping_add(1);
        val.samples_per_class = settings.val_per_class;
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        let mut per_seed = Vec::with_capacity(settings.seeds.len());
        for &seed in &settings.seeds {
            let cfg = TrainConfig {
                seed,
                ..settings.train.clone()
            };
            let out = train(&v.model, &cfg, &data, Some(&val), seed)?;
            let m = out
                .log
                .last()
                .and_then(|e| e.val.clone())
                .expect("validation runs every epoch");
            p += m.macro_precision;
            r += m.macro_recall;
            f += m.macro_f1;
            per_seed.push(100.0 * m.macro_f1);
        }
        let k = 100.0 / settings.seeds.len() as f64;
        rows.push(AblationRow {
            cells: v.cells,
            precision: p * k,
            recall: r * k,
            f1: f * k,
            per_seed_f1: per_seed,
        });
    }
    Ok(AblationTable {
        suite,
        columns: columns(suite).into_iter().map(String::from).collect(),
        rows,
    })
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut header: Vec<String> = self.columns.clone();
        header.extend(["P", "R", "F1"].map(String::from));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut cells = r.cells.clone();
                cells.extend([r.precision, r.recall, r.f1].map(|v| format!("{v:.2}")));
                cells
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                body.iter()
                    .map(|row| row[c].chars().count())
                    .chain([header[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            format!("| {} |", padded.join(" | "))
        };
        writeln!(f, "{}", line(&header))?;
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        writeln!(f, "{}", line(&rule))?;
        for row in &body {
            writeln!(f, "{}", line(row))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_rows_mirror_tables() {
        let base = AblationSettings::desk(0).base;
        assert_eq!(variants(Suite::Head, &base).len(), 5);
        let paths = variants(Suite::Paths, &base);
        assert_eq!(paths.len(), 4);
        assert_eq!(paths[0].model.paths, PathSet::Forward);
        assert_eq!(paths[1].model.fusion, Fusion::Mean);
        assert_eq!(paths[3].model.paths, PathSet::All);
        let pe: Vec<_> = variants(Suite::Pe, &base).into_iter().map(|v| v.cells[0].clone()).collect();
        assert_eq!(pe, ["None", "Fourier", "Learnable"]);
        for v in variants(Suite::Tokens, &base) {
            v.model.validate().unwrap();
        }
    }

    #[test]
    fn flat_form_round_trips() {
        let a = AblationSettings::desk(7);
        assert_eq!(AblationSettings::from_run(&a.to_run(), 3).unwrap(), a);
    }

    #[test]
    fn names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("colour".parse::<Suite>().is_err());
    }

    #[test]
    fn table_renders_aligned() {
        let t = AblationTable {
            suite: Suite::Pe,
            columns: vec!["PE".into()],
            rows: vec![AblationRow {
                cells: vec!["None".into()],
                precision: 50.0,
                recall: 40.0,
                f1: 44.444,
                per_seed_f1: vec![44.444],
            }],
        };
        let s = t.to_string();
        assert!(s.contains("| None | 50.00 | 40.00 | 44.44 |"), "{s}");
    }
}
