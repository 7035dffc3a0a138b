//! The frame-by-frame tracking loop with template update.

use rayon::prelude::*;

use super::metrics::compute_ope;
use super::{streams, OpeResult, TrackletSequence};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{box_iou_3d, center_distance, crop_to_box, make_search_region, wrap_angle, Box3D};
use crate::io::ResultRow;
use crate::model::{NetConfig, TrackNet};
use crate::rng::{rng_stream, RandomState};

/// Track one sequence: the first template comes from the ground-truth box,
/// every later one from the previous prediction. Empty search regions make
/// the tracker coast (repeat the previous box, flagged).
pub fn track_sequence(
    net: &TrackNet<f32>,
    net_cfg: &NetConfig,
    run: &RunConfig,
    seq: &TrackletSequence,
    rng: &mut RandomState,
) -> Result<OpeResult> {
    if seq.frames.len() < 2 {
        return Err(Error::InvalidArgument(
            "track_sequence: need at least two frames".into(),
        ));
    }
    let first = &seq.frames[0];
    let mut template_box = first.gt;
    let mut template = crop_to_box(&first.scene, &template_box, run.template_extend_ratio)
        .to_canonical(&template_box);
    if template.is_empty() {
        return Err(Error::EmptyInput(format!(
            "track_sequence: first frame of {} has no template points",
            seq.object_id
        )));
    }
    let mut prev_box = first.gt;
    let mut per_frame = Vec::with_capacity(seq.frames.len() - 1);
    let mut coasted = 0usize;

    for frame in &seq.frames[1..] {
        let search_world = make_search_region(&frame.scene, &prev_box, run.search_margin_m);
        let pred_world = if search_world.is_empty() {
            coasted += 1;
            prev_box
        } else {
            let search = search_world.to_canonical(&prev_box);
            let out = net.forward(net_cfg, &template, &search, prev_box.size, rng)?;
            let canon = net.decode(net_cfg, &out, prev_box.size)?;
            Box3D {
                center: prev_box.to_world(canon.center),
                size: prev_box.size,
                yaw: wrap_angle(prev_box.yaw + canon.yaw),
            }
        };
        per_frame.push((
            box_iou_3d(&pred_world, &frame.gt),
            center_distance(&pred_world, &frame.gt),
        ));
        // Template update from the prediction; an empty crop keeps the old
        // template.
        let new_template = crop_to_box(&frame.scene, &pred_world, run.template_extend_ratio);
        if !new_template.is_empty() {
            template = new_template.to_canonical(&pred_world);
            template_box = pred_world;
        }
        let _ = template_box;
        prev_box = pred_world;
    }
    let (success, precision) = compute_ope(&per_frame)?;
    Ok(OpeResult {
        success,
        precision,
        per_frame,
        coasted,
    })
}

/// Evaluate sequences in parallel with per-sequence rng streams. Results
/// come back in input order; thread count follows the config (then
/// `PTTRKIT_THREADS`, then the hardware).
pub fn evaluate_dataset(
    net: &TrackNet<f32>,
    net_cfg: &NetConfig,
    run: &RunConfig,
    seqs: &[TrackletSequence],
) -> Result<Vec<OpeResult>> {
    let threads = run.effective_threads();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        seqs.par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let mut rng = rng_stream(run.seed, streams::TRACK + i as u64);
                track_sequence(net, net_cfg, run, seq, &mut rng)
            })
            .collect()
    })
}

/// Pool per-frame results per class (plus an `all` row) into result rows.
pub fn summarize_by_class(
    variant: &str,
    seqs: &[TrackletSequence],
    results: &[OpeResult],
) -> Result<Vec<ResultRow>> {
    let mut classes: Vec<String> = seqs.iter().map(|s| s.class_tag.clone()).collect();
    classes.sort();
    classes.dedup();
    let mut rows = Vec::new();
    let mut pool_all = Vec::new();
    for class in &classes {
        let mut pooled = Vec::new();
        for (seq, res) in seqs.iter().zip(results) {
            if &seq.class_tag == class {
                pooled.extend_from_slice(&res.per_frame);
            }
        }
        let (success, precision) = compute_ope(&pooled)?;
        rows.push(ResultRow {
            variant: variant.to_string(),
            class_tag: class.clone(),
            success,
            precision,
            frames: pooled.len(),
        });
        pool_all.extend(pooled);
    }
    let (success, precision) = compute_ope(&pool_all)?;
    rows.push(ResultRow {
        variant: variant.to_string(),
        class_tag: "all".to_string(),
        success,
        precision,
        frames: pool_all.len(),
    });
    Ok(rows)
}
