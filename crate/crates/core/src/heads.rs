//! Per-point prediction heads, target assignment, box decoding and the
//! two-stage loss.

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box3D};
use crate::nn::Mlp;
use crate::rng::RandomState;
use crate::sampling::ball_query;
use crate::tensor::{Parameter, Real, Tensor};

/// Objectness logits and per-point box offsets, row-aligned with the
/// sampled search points.
pub struct TrackPrediction<T: Real = f32> {
    pub cls: Tensor<T>,
    pub reg: Tensor<T>,
}

/// Training targets: inside-box positivity, center offsets, and the
/// regression mask (equal to the positive set).
pub struct TargetAssignment<T: Real = f32> {
    pub cls_target: Tensor<T>,
    pub reg_target: Tensor<T>,
    pub reg_mask: Tensor<T>,
    pub positive_count: usize,
}

/// Two parallel 3-layer MLPs on the matched features.
pub struct CoarseHead<T: Real = f32> {
    pub cls: Mlp<T>,
    pub reg: Mlp<T>,
}

impl<T: Real> CoarseHead<T> {
    pub fn new(name: &str, width: usize, rng: &mut RandomState) -> Result<Self> {
        let widths = |out: usize| vec![width, width, width / 2, out];
        Ok(CoarseHead {
            cls: Mlp::new(&format!("{name}.cls"), &widths(1), false, rng)?,
            reg: Mlp::new(&format!("{name}.reg"), &widths(4), false, rng)?,
        })
    }

    pub fn forward(&self, matched: &Tensor<T>) -> Result<TrackPrediction<T>> {
        Ok(TrackPrediction {
            cls: self.cls.forward(matched)?,
            reg: self.reg.forward(matched)?,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.cls.params();
        p.extend(self.reg.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.cls.params_mut();
        p.extend(self.reg.params_mut());
        p
    }
}

/// Which direction the coarse offsets are applied when estimating the
/// template-side correspondence of a search seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetDirection {
    /// `query = seed − Δ` (default: the offset tracks template→search
    /// motion, so subtracting inverts it).
    Subtract,
    Add,
}

impl OffsetDirection {
    fn sign(self) -> f64 {
        match self {
            OffsetDirection::Subtract => -1.0,
            OffsetDirection::Add => 1.0,
        }
    }
}

/// Second stage: pool local features around the seeds and their estimated
/// template correspondences, concatenate with the matched features, and
/// re-predict through 5-layer MLPs.
pub struct RefineHead<T: Real = f32> {
    pub cls: Mlp<T>,
    pub reg: Mlp<T>,
    pub pool_radius: f64,
    pub pool_neighbors: usize,
    pub direction: OffsetDirection,
}

impl<T: Real> RefineHead<T> {
    pub fn new(
        name: &str,
        pooled_width: usize,
        matched_width: usize,
        pool_radius: f64,
        pool_neighbors: usize,
        direction: OffsetDirection,
        rng: &mut RandomState,
    ) -> Result<Self> {
        // Input is [pooled search, pooled template, matched].
        let in_dim = 2 * pooled_width + matched_width;
        let width = pooled_width.max(4);
        let widths = |out: usize| vec![in_dim, width, width, width / 2, width / 2, out];
        Ok(RefineHead {
            cls: Mlp::new(&format!("{name}.cls"), &widths(1), false, rng)?,
            reg: Mlp::new(&format!("{name}.reg"), &widths(4), false, rng)?,
            pool_radius,
            pool_neighbors,
            direction,
        })
    }

    pub fn forward(
        &self,
        coarse: &TrackPrediction<T>,
        seeds: &[[f64; 3]],
        search_xyz: &[[f64; 3]],
        search_feats: &Tensor<T>,
        template_xyz: &[[f64; 3]],
        template_feats: &Tensor<T>,
        matched: &Tensor<T>,
    ) -> Result<TrackPrediction<T>> {
        let queries = refine_queries(seeds, coarse.reg.data(), self.direction);
        let pooled_search = pool_features(seeds, search_xyz, search_feats, self.pool_radius, self.pool_neighbors)?;
        let pooled_template = pool_features(&queries, template_xyz, template_feats, self.pool_radius, self.pool_neighbors)?;
        let joint = Tensor::concat_last_dim(&[&pooled_search, &pooled_template, matched])?;
        Ok(TrackPrediction {
            cls: self.cls.forward(&joint)?,
            reg: self.reg.forward(&joint)?,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.cls.params();
        p.extend(self.reg.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.cls.params_mut();
        p.extend(self.reg.params_mut());
        p
    }
}

/// Template-side query points: seed plus the signed coarse offset.
pub fn refine_queries<T: Real>(
    seeds: &[[f64; 3]],
    reg: &[T],
    direction: OffsetDirection,
) -> Vec<[f64; 3]> {
    let sign = direction.sign();
    seeds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            [
                p[0] + sign * reg[i * 4].as_f64(),
                p[1] + sign * reg[i * 4 + 1].as_f64(),
                p[2] + sign * reg[i * 4 + 2].as_f64(),
            ]
        })
        .collect()
}

/// Differentiable local max pooling: ball query for the member sets, then
/// channel max over the feature rows.
pub fn pool_features<T: Real>(
    centers: &[[f64; 3]],
    cloud_xyz: &[[f64; 3]],
    feats: &Tensor<T>,
    radius: f64,
    max_neighbors: usize,
) -> Result<Tensor<T>> {
    let query = ball_query(centers, cloud_xyz, radius, max_neighbors)?;
    feats.group_max_rows(&query.groups())
}

/// Inside-box positivity with center-offset regression targets. A gt box
/// with no interior points promotes the nearest point instead.
pub fn assign_targets<T: Real>(
    search_xyz: &[[f64; 3]],
    gt_box: &Box3D,
    ref_box: &Box3D,
) -> Result<TargetAssignment<T>> {
    let n = search_xyz.len();
    if n == 0 {
        return Err(Error::EmptyInput("assign_targets: no points".into()));
    }
    let mut cls = vec![T::zero(); n];
    let mut mask = vec![T::zero(); n];
    let mut reg = vec![T::zero(); n * 4];
    let d_yaw = wrap_angle(gt_box.yaw - ref_box.yaw);
    let mut any = false;
    for (i, &p) in search_xyz.iter().enumerate() {
        if gt_box.contains(p, 0.0) {
            any = true;
            cls[i] = T::one();
            mask[i] = T::one();
        }
        reg[i * 4] = T::from_f64(gt_box.center[0] - p[0]);
        reg[i * 4 + 1] = T::from_f64(gt_box.center[1] - p[1]);
        reg[i * 4 + 2] = T::from_f64(gt_box.center[2] - p[2]);
        reg[i * 4 + 3] = T::from_f64(d_yaw);
    }
    if !any {
        let nearest = search_xyz
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = dist2(**a, gt_box.center);
                let db = dist2(**b, gt_box.center);
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
            })
            .map(|(i, _)| i)
            .unwrap();
        cls[nearest] = T::one();
        mask[nearest] = T::one();
    }
    let positive_count = cls.iter().filter(|&&c| c == T::one()).count();
    Ok(TargetAssignment {
        cls_target: Tensor::from_vec(&[n, 1], cls)?,
        reg_target: Tensor::from_vec(&[n, 4], reg)?,
        reg_mask: Tensor::from_vec(&[n, 1], mask)?,
        positive_count,
    })
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// How per-point predictions collapse into one box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeRule {
    /// Highest-logit point wins, ties to the lowest index.
    Argmax,
    /// Softmax-weighted mean of the top-k scored points.
    TopKWeighted { k: usize },
}

/// Collapse per-point predictions into a box: offsets applied to the
/// selected point(s), yaw offset added to the reference, size carried over
/// from the reference (sizes are tracked, not re-estimated).
pub fn decode_box<T: Real>(
    pred: &TrackPrediction<T>,
    search_xyz: &[[f64; 3]],
    ref_box: &Box3D,
    rule: DecodeRule,
) -> Result<Box3D> {
    let n = search_xyz.len();
    if n == 0 {
        return Err(Error::EmptyInput("decode_box: no points".into()));
    }
    let cls = pred.cls.data();
    let reg = pred.reg.data();
    let decode_at = |i: usize| {
        [
            search_xyz[i][0] + reg[i * 4].as_f64(),
            search_xyz[i][1] + reg[i * 4 + 1].as_f64(),
            search_xyz[i][2] + reg[i * 4 + 2].as_f64(),
        ]
    };
    let (center, d_yaw) = match rule {
        DecodeRule::Argmax => {
            let mut best = 0;
            for i in 1..n {
                if cls[i] > cls[best] {
                    best = i;
                }
            }
            (decode_at(best), reg[best * 4 + 3].as_f64())
        }
        DecodeRule::TopKWeighted { k } => {
            let k = k.max(1).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                cls[b]
                    .partial_cmp(&cls[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let top = &order[..k];
            let max_logit = cls[top[0]].as_f64();
            let weights: Vec<f64> = top
                .iter()
                .map(|&i| (cls[i].as_f64() - max_logit).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut center = [0.0; 3];
            let mut d_yaw = 0.0;
            for (&i, &w) in top.iter().zip(&weights) {
                let c = decode_at(i);
                let w = w / total;
                for a in 0..3 {
                    center[a] += w * c[a];
                }
                d_yaw += w * reg[i * 4 + 3].as_f64();
            }
            (center, d_yaw)
        }
    };
    Ok(Box3D {
        center,
        size: ref_box.size,
        yaw: wrap_angle(ref_box.yaw + d_yaw),
    })
}

/// Two-stage loss: coarse BCE + masked MSE, plus `λ` times the same for
/// the refined prediction.
pub fn total_loss<T: Real>(
    coarse: &TrackPrediction<T>,
    fine: Option<&TrackPrediction<T>>,
    tgt: &TargetAssignment<T>,
    lambda: f64,
) -> Result<Tensor<T>> {
    let stage = |p: &TrackPrediction<T>| -> Result<Tensor<T>> {
        let cls = p.cls.bce_with_logits(&tgt.cls_target)?;
        let reg = p.reg.mse_masked(&tgt.reg_target, Some(&tgt.reg_mask))?;
        cls.add(&reg)
    };
    let mut loss = stage(coarse)?;
    if let Some(fine) = fine {
        loss = loss.add(&stage(fine)?.scale(T::from_f64(lambda)))?;
    }
    Ok(loss)
}
