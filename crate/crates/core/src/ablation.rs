//! Ablation and hyperparameter sweeps on the synthetic zero-shot benchmark.

use std::fmt::Write as _;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{prepare_all, Model, PreparedSample, Scoring};
use crate::synth::{split_by_class, synthesize_dataset};
use crate::training::{train, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationVariant {
    /// Level loss on the top level only, scored on the top level.
    BaselineTopLevel,
    /// Mean of the level dissimilarities, every gate at 1.
    MultiLayer,
    /// Mean of the gate-weighted level dissimilarities.
    MultiLayerReliability,
    /// One distance between normalized concatenated embeddings.
    Concat,
    /// Rectified overall dissimilarity.
    FullAvsl,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::BaselineTopLevel,
        AblationVariant::MultiLayer,
        AblationVariant::MultiLayerReliability,
        AblationVariant::Concat,
        AblationVariant::FullAvsl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::BaselineTopLevel => "baseline_top_level",
            AblationVariant::MultiLayer => "multi_layer",
            AblationVariant::MultiLayerReliability => "multi_layer_reliability",
            AblationVariant::Concat => "concat",
            AblationVariant::FullAvsl => "full_avsl",
        }
    }

    pub fn scoring(self) -> Scoring {
        match self {
            AblationVariant::BaselineTopLevel => Scoring::TopLevel,
            AblationVariant::MultiLayer => Scoring::MultiLayerMean,
            AblationVariant::MultiLayerReliability => Scoring::MultiLayerReliability,
            AblationVariant::Concat => Scoring::Concat,
            AblationVariant::FullAvsl => Scoring::Rectified,
        }
    }

    /// Training switches: the baseline learns only the top level.
    pub fn train_options(self) -> TrainOptions {
        match self {
            AblationVariant::BaselineTopLevel => TrainOptions {
                level_loss: true,
                overall_loss: false,
                update_edges: false,
                top_level_only: true,
            },
            _ => TrainOptions::default(),
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation variant '{s}'")))
    }
}

/// Synthetic train/test split of one seed, already linearized.
pub fn synthetic_split(cfg: &Config, seed: u64) -> Result<(Vec<PreparedSample>, Vec<PreparedSample>)> {
    let data = synthesize_dataset(&cfg.synth, seed)?;
    let (train, test) = split_by_class(data, cfg.synth.classes);
    Ok((prepare_all(&train), prepare_all(&test)))
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Recall@K over seeds for one row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    pub ks: Vec<usize>,
    /// `per_seed[s][k]`.
    pub per_seed: Vec<Vec<f64>>,
}

impl ResultRow {
    pub fn mean_std(&self, k_index: usize) -> (f64, f64) {
        let xs: Vec<f64> = self.per_seed.iter().map(|r| r[k_index]).collect();
        mean_std(&xs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    /// Name of the first CSV column.
    pub axis: String,
    pub rows: Vec<ResultRow>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

impl ResultsTable {
    pub fn row(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One line per row and K: label, K, mean and std of Recall@K over seeds, the
    /// seed count and the config hash.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},k,recall_mean,recall_std,n_seeds,config_hash\n", self.axis);
        for row in &self.rows {
            for (i, k) in row.ks.iter().enumerate() {
                let (m, s) = row.mean_std(i);
                writeln!(
                    out,
                    "{},{k},{m:.6},{s:.6},{},{}",
                    row.label,
                    self.seeds.len(),
                    self.config_hash
                )
                .expect("writing to a String");
            }
        }
        out
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    Ok(())
}

fn train_model(cfg: &Config, seed: u64, train_set: &[PreparedSample], options: TrainOptions) -> Result<Model> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    Ok(train(&cfg, train_set, options)?.0.model)
}

/// Recall@K per variant and seed on the synthetic benchmark. All multi-level
/// variants share one trained model per seed.
pub fn run_ablation(
    cfg: &Config,
    variants: &[AblationVariant],
    seeds: &[u64],
    ks: &[usize],
    slice_rows: usize,
) -> Result<ResultsTable> {
    if variants.is_empty() {
        return Err(Error::config("at least one ablation variant is required"));
    }
    check_seeds(seeds)?;
    let mut rows: Vec<ResultRow> = variants
        .iter()
        .map(|v| ResultRow {
            label: v.name().to_string(),
            ks: ks.to_vec(),
            per_seed: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let (train_set, test_set) = synthetic_split(cfg, seed)?;
        let needs_shared = variants.iter().any(|v| *v != AblationVariant::BaselineTopLevel);
        let shared = if needs_shared {
            Some(train_model(cfg, seed, &train_set, TrainOptions::default())?)
        } else {
            None
        };
        for (row, v) in rows.iter_mut().zip(variants) {
            let baseline;
            let model = match v {
                AblationVariant::BaselineTopLevel => {
                    baseline = train_model(cfg, seed, &train_set, v.train_options())?;
                    &baseline
                }
                _ => shared.as_ref().expect("trained above"),
            };
            let r = evaluate(model, &test_set, v.scoring(), ks, slice_rows)?;
            row.per_seed.push(r.recalls);
        }
    }
    Ok(ResultsTable {
        axis: "variant".into(),
        rows,
        seeds: seeds.to_vec(),
        config_hash: cfg.hash(),
    })
}

/// Powers of two up to and including `r`.
pub fn default_k_values(r: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |k| k.checked_mul(2))
        .take_while(|&k| k <= r)
        .collect()
}

pub const DEFAULT_R_VALUES: [usize; 3] = [32, 64, 128];

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    R,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::K),
            "r" => Ok(SweepAxis::R),
            other => Err(Error::config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

/// Rectified Recall@K as `k` or `r` varies; each value is trained from scratch.
pub fn run_sweep(
    cfg: &Config,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
    ks: &[usize],
    slice_rows: usize,
) -> Result<ResultsTable> {
    check_seeds(seeds)?;
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::K => c.k = v,
            SweepAxis::R => {
                c.r = v;
                c.k = c.k.min(v);
            }
        }
        c.validate()?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (train_set, test_set) = synthetic_split(&c, seed)?;
            let model = train_model(&c, seed, &train_set, TrainOptions::default())?;
            per_seed.push(evaluate(&model, &test_set, Scoring::Rectified, ks, slice_rows)?.recalls);
        }
        rows.push(ResultRow {
            label: v.to_string(),
            ks: ks.to_vec(),
            per_seed,
        });
    }
    Ok(ResultsTable {
        axis: match axis {
            SweepAxis::K => "k_top".into(),
            SweepAxis::R => "r".into(),
        },
        rows,
        seeds: seeds.to_vec(),
        config_hash: cfg.hash(),
    })
}
