//! Training orchestration: consecutive-frame pairs with box distortion,
//! Adam with a step-decay schedule, deterministic under a fixed seed.

use std::path::Path;

use rand::Rng;

use super::{streams, TrackletSequence};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{crop_to_box, distort_box, make_search_region, wrap_angle, Box3D};
use crate::model::{NetConfig, TrackNet};
use crate::rng::rng_stream;
use crate::tensor::Adam;

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
    pub skipped_pairs: usize,
}

/// Step-decay schedule: divide the base rate by `lr_decay_factor` every
/// `lr_decay_every` epochs.
pub fn lr_at_epoch(run: &RunConfig, epoch: usize) -> f64 {
    if run.lr_decay_every == 0 {
        return run.lr;
    }
    run.lr / run.lr_decay_factor.powi((epoch / run.lr_decay_every) as i32)
}

/// Train in place over consecutive-frame pairs. The reference box for each
/// pair is the earlier ground truth with a random center distortion; the
/// loss targets the later ground truth inside that reference frame. A
/// non-finite loss aborts with the offending pair serialized under
/// `diag_dir`.
pub fn train(
    net: &mut TrackNet<f32>,
    net_cfg: &NetConfig,
    run: &RunConfig,
    dataset: &[TrackletSequence],
    diag_dir: Option<&Path>,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("train: empty dataset".into()));
    }
    let mut pairs = Vec::new();
    for (si, seq) in dataset.iter().enumerate() {
        for fi in 0..seq.frames.len() - 1 {
            pairs.push((si, fi));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("train: no consecutive frame pairs".into()));
    }

    let mut rng = rng_stream(run.seed, streams::TRAIN_LOOP);
    let mut adam = Adam::new(run.adam_beta1, run.adam_beta2, run.adam_eps);
    let mut report = TrainReport {
        loss_curve: Vec::with_capacity(run.epochs),
        steps: 0,
        skipped_pairs: 0,
    };

    for epoch in 0..run.epochs {
        let lr = lr_at_epoch(run, epoch);
        // In-place shuffle, seeded.
        for i in (1..pairs.len()).rev() {
            let j = rng.random_range(0..=i);
            pairs.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut epoch_steps = 0usize;
        for &(si, fi) in &pairs {
            let seq = &dataset[si];
            let prev = &seq.frames[fi];
            let next = &seq.frames[fi + 1];
            let template_world = crop_to_box(&prev.scene, &prev.gt, run.template_extend_ratio);
            if template_world.is_empty() {
                report.skipped_pairs += 1;
                continue;
            }
            let template = template_world.to_canonical(&prev.gt);
            let reference = distort_box(&prev.gt, &mut rng, run.distort_range_m);
            let search_world = make_search_region(&next.scene, &reference, run.search_margin_m);
            if search_world.is_empty() {
                report.skipped_pairs += 1;
                continue;
            }
            let search = search_world.to_canonical(&reference);
            let gt_canonical = Box3D {
                center: reference.to_canonical(next.gt.center),
                size: next.gt.size,
                yaw: wrap_angle(next.gt.yaw - reference.yaw),
            };
            let out = net.forward(net_cfg, &template, &search, reference.size, &mut rng)?;
            let loss = net.loss(net_cfg, &out, &gt_canonical, reference.size)?;
            if loss.ensure_finite("training loss").is_err() {
                if let Some(dir) = diag_dir {
                    let diag = dir.join("diagnostics");
                    crate::io::write_pcd(&diag.join("template.pcd"), &template)?;
                    crate::io::write_pcd(&diag.join("search.pcd"), &search)?;
                    crate::io::write_manifest(
                        &diag.join("boxes.txt"),
                        &[
                            ("template.pcd".into(), prev.gt),
                            ("search.pcd".into(), gt_canonical),
                        ],
                    )?;
                }
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, tracklet {}, frame {fi}",
                    seq.object_id
                )));
            }
            let value = loss.item() as f64;
            let grads = loss.backward()?;
            adam.step(&mut net.params_mut(), &grads, lr)?;
            epoch_loss += value;
            epoch_steps += 1;
            report.steps += 1;
        }
        report
            .loss_curve
            .push(if epoch_steps > 0 { epoch_loss / epoch_steps as f64 } else { f64::NAN });
    }
    Ok(report)
}
