//! Ablation suites: train and evaluate controlled variants on the same
//! seeded synthetic dataset and emit a machine-readable table.

use std::str::FromStr;

use super::track::evaluate_dataset;
use super::train::train;
use super::{make_dataset, streams, TrackletSequence};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::compute_ope;
use crate::io::ResultRow;
use crate::model::{NetConfig, TrackNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Sampling,
    Components,
    AttentionParts,
    FusionModes,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampling" => Ok(Suite::Sampling),
            "components" => Ok(Suite::Components),
            "attention" => Ok(Suite::AttentionParts),
            "fusion" => Ok(Suite::FusionModes),
            other => Err(Error::Config(format!(
                "unknown suite '{other}' (expected sampling|components|attention|fusion)"
            ))),
        }
    }
}

/// `(row name, config overrides)` per variant.
fn variants(suite: Suite) -> Vec<(&'static str, Vec<(&'static str, &'static str)>)> {
    match suite {
        Suite::Sampling => vec![
            ("random", vec![("sampling_strategy", "random")]),
            ("dfps", vec![("sampling_strategy", "dfps")]),
            ("ffps", vec![("sampling_strategy", "ffps")]),
            ("ras_hybrid", vec![("sampling_strategy", "ras_hybrid")]),
        ],
        Suite::Components => vec![
            ("none", vec![("use_prt", "false"), ("use_refine", "false")]),
            ("prt", vec![("use_prt", "true"), ("use_refine", "false")]),
            ("prm", vec![("use_prt", "false"), ("use_refine", "true")]),
            ("prt+prm", vec![("use_prt", "true"), ("use_refine", "true")]),
        ],
        Suite::AttentionParts => vec![
            ("none", vec![("ram_normalize", "false"), ("ram_offset", "false")]),
            ("offset", vec![("ram_normalize", "false"), ("ram_offset", "true")]),
            ("norm", vec![("ram_normalize", "true"), ("ram_offset", "false")]),
            ("offset+norm", vec![("ram_normalize", "true"), ("ram_offset", "true")]),
        ],
        Suite::FusionModes => vec![
            ("addition_point", vec![("fusion_mode", "addition"), ("fusion_branch", "point")]),
            ("addition_bev", vec![("fusion_mode", "addition"), ("fusion_branch", "bev")]),
            ("global_point", vec![("fusion_mode", "global"), ("fusion_branch", "point")]),
            ("global_bev", vec![("fusion_mode", "global"), ("fusion_branch", "bev")]),
            ("point_wise_point", vec![("fusion_mode", "point_wise"), ("fusion_branch", "point")]),
            ("point_wise_bev", vec![("fusion_mode", "point_wise"), ("fusion_branch", "bev")]),
        ],
    }
}

/// Train and evaluate one configured variant; returns the pooled row.
pub fn run_variant(
    variant: &str,
    run: &RunConfig,
    train_set: &[TrackletSequence],
    eval_set: &[TrackletSequence],
) -> Result<ResultRow> {
    let net_cfg = NetConfig::from_run(run)?;
    let mut net = TrackNet::<f32>::new(&net_cfg, run.seed)?;
    train(&mut net, &net_cfg, run, train_set, None)?;
    let results = evaluate_dataset(&net, &net_cfg, run, eval_set)?;
    let pooled: Vec<(f64, f64)> = results
        .iter()
        .flat_map(|r| r.per_frame.iter().copied())
        .collect();
    let (success, precision) = compute_ope(&pooled)?;
    Ok(ResultRow {
        variant: variant.to_string(),
        class_tag: "all".to_string(),
        success,
        precision,
        frames: pooled.len(),
    })
}

/// Run a whole suite on fresh seeded train and held-out eval datasets.
pub fn run_ablation(suite: Suite, base: &RunConfig, eval_tracklets: usize) -> Result<Vec<ResultRow>> {
    let train_set = make_dataset(base, base.seed, streams::TRAIN_DATA, base.n_tracklets)?;
    let eval_set = make_dataset(base, base.seed, streams::EVAL_DATA, eval_tracklets)?;
    let mut rows = Vec::new();
    for (name, overrides) in variants(suite) {
        let mut cfg = base.clone();
        if suite == Suite::FusionModes {
            cfg.set("model", "pttr++")?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        log::info!("ablation {suite:?}: variant {name}");
        rows.push(run_variant(name, &cfg, &train_set, &eval_set)?);
    }
    Ok(rows)
}
