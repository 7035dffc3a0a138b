//! The bird's-eye-view branch: pillarization, token matching on the BEV
//! grid, a strided convolutional backbone, cross-view feature mapping in
//! both directions, and gated fusion of the two views.
//!
//! Clouds entering this module are expected in the reference box's
//! canonical frame.

use rand::Rng;

use crate::attention::{prt_forward, sinusoidal_pe_2d, PrtWeights};
use crate::error::{Error, Result};
use crate::heads::{TargetAssignment, TrackPrediction};
use crate::nn::Linear;
use crate::rng::RandomState;
use crate::tensor::{Parameter, Real, Tensor};

/// Metric layout of a BEV grid: `row ↔ y`, `col ↔ x`, world→cell by floor
/// division.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGeometry {
    pub x0: f64,
    pub y0: f64,
    pub cell: f64,
    pub h: usize,
    pub w: usize,
    pub z0: f64,
    pub z1: f64,
}

impl BevGeometry {
    /// Validates that the range extents are positive multiples of the
    /// cell size.
    pub fn from_range(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        cell: f64,
    ) -> Result<Self> {
        if cell <= 0.0 {
            return Err(Error::Config("bev: cell size must be positive".into()));
        }
        let count = |lo: f64, hi: f64, axis: &str| -> Result<usize> {
            let extent = hi - lo;
            if extent <= 0.0 {
                return Err(Error::Config(format!("bev: empty {axis} range")));
            }
            let n = extent / cell;
            if (n - n.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "bev: {axis} extent {extent} is not a multiple of cell {cell}"
                )));
            }
            Ok(n.round() as usize)
        };
        let w = count(x_range.0, x_range.1, "x")?;
        let h = count(y_range.0, y_range.1, "y")?;
        if z_range.1 <= z_range.0 {
            return Err(Error::Config("bev: empty z range".into()));
        }
        Ok(BevGeometry {
            x0: x_range.0,
            y0: y_range.0,
            cell,
            h,
            w,
            z0: z_range.0,
            z1: z_range.1,
        })
    }

    /// Cell of a world point, or `None` outside the range. The x/y bounds
    /// are half-open at the top, z is closed.
    pub fn cell_of(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        if p[2] < self.z0 || p[2] > self.z1 {
            return None;
        }
        let col = ((p[0] - self.x0) / self.cell).floor();
        let row = ((p[1] - self.y0) / self.cell).floor();
        if col < 0.0 || row < 0.0 || col >= self.w as f64 || row >= self.h as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x0 + (col as f64 + 0.5) * self.cell,
            self.y0 + (row as f64 + 0.5) * self.cell,
        )
    }

    fn downsampled(&self) -> BevGeometry {
        BevGeometry {
            cell: self.cell * 2.0,
            h: self.h / 2,
            w: self.w / 2,
            ..*self
        }
    }
}

/// Dense feature map over a [`BevGeometry`], stored as `[h, w, c]`.
pub struct BevGrid<T: Real = f32> {
    pub geom: BevGeometry,
    pub features: Tensor<T>,
}

impl<T: Real> BevGrid<T> {
    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    /// Tokens as a `[h·w, c]` view.
    pub fn flat(&self) -> Result<Tensor<T>> {
        let c = self.channels();
        self.features.reshape(&[self.geom.h * self.geom.w, c])
    }
}

/// Non-empty pillars with their 11-dimensional augmented point rows:
/// `(x, y, z, x_c, y_c, z_c, x_p, y_p, w, h, l)`.
pub struct PillarPoints {
    pub geom: BevGeometry,
    pub cells: Vec<(usize, usize)>,
    pub rows: Vec<Vec<[f64; 11]>>,
}

impl PillarPoints {
    pub fn total_points(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }
}

/// Bucket a canonical-frame cloud into pillars and augment each member
/// point with the pillar mean, the offset from the cell center, and the
/// tracked box size.
pub fn pillarize(
    points: &[[f64; 3]],
    geom: &BevGeometry,
    box_size: [f64; 3],
) -> Result<PillarPoints> {
    let mut buckets: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, &p) in points.iter().enumerate() {
        if let Some(cell) = geom.cell_of(p) {
            buckets.entry(cell).or_default().push(i);
        }
    }
    let mut cells = Vec::with_capacity(buckets.len());
    let mut rows = Vec::with_capacity(buckets.len());
    // Attached as (w, h, l).
    let (bw, bh, bl) = (box_size[0], box_size[2], box_size[1]);
    for ((row, col), members) in buckets {
        let inv = 1.0 / members.len() as f64;
        let mut mean = [0.0f64; 3];
        for &i in &members {
            for a in 0..3 {
                mean[a] += points[i][a] * inv;
            }
        }
        let (cx, cy) = geom.cell_center(row, col);
        let pillar_rows: Vec<[f64; 11]> = members
            .iter()
            .map(|&i| {
                let p = points[i];
                [
                    p[0], p[1], p[2], mean[0], mean[1], mean[2], p[0] - cx, p[1] - cy, bw, bh, bl,
                ]
            })
            .collect();
        cells.push((row, col));
        rows.push(pillar_rows);
    }
    Ok(PillarPoints {
        geom: *geom,
        cells,
        rows,
    })
}

/// Linear-encode every pillar point, max-pool per pillar, scatter into the
/// zero grid.
pub fn encode_pillars<T: Real>(pillars: &PillarPoints, enc: &Parameter<T>) -> Result<BevGrid<T>> {
    let c = match enc.shape() {
        [11, c] => *c,
        other => {
            return Err(Error::InvalidArgument(format!(
                "encode_pillars: encoder must be [11, C], got {other:?}"
            )))
        }
    };
    let geom = pillars.geom;
    let n_cells = geom.h * geom.w;
    if pillars.cells.is_empty() {
        return Ok(BevGrid {
            geom,
            features: Tensor::zeros(&[geom.h, geom.w, c]),
        });
    }
    let total = pillars.total_points();
    let mut data = Vec::with_capacity(total * 11);
    let mut groups = Vec::with_capacity(pillars.rows.len());
    let mut cursor = 0usize;
    for rows in &pillars.rows {
        groups.push((cursor..cursor + rows.len()).collect::<Vec<_>>());
        for r in rows {
            data.extend(r.iter().map(|&v| T::from_f64(v)));
        }
        cursor += rows.len();
    }
    let inputs = Tensor::from_vec(&[total, 11], data)?;
    let encoded = inputs.matmul(&enc.tensor)?;
    let pooled = encoded.group_max_rows(&groups)?;
    let positions: Vec<usize> = pillars.cells.iter().map(|&(r, col)| r * geom.w + col).collect();
    let grid = pooled.scatter_rows(&positions, n_cells)?;
    Ok(BevGrid {
        geom,
        features: grid.reshape(&[geom.h, geom.w, c])?,
    })
}

/// Match the two grids as token sets: add the sinusoidal positional
/// embedding, run the relation transformer with the search grid as query,
/// reshape back to the search grid's layout.
pub fn bev_match<T: Real>(
    search: &BevGrid<T>,
    template: &BevGrid<T>,
    w: &PrtWeights<T>,
) -> Result<BevGrid<T>> {
    let c = search.channels();
    if template.channels() != c {
        return Err(Error::ShapeMismatch {
            op: "bev_match",
            lhs: search.features.shape().to_vec(),
            rhs: template.features.shape().to_vec(),
        });
    }
    let pe_s = sinusoidal_pe_2d::<T>(search.geom.h, search.geom.w, c)?;
    let pe_t = sinusoidal_pe_2d::<T>(template.geom.h, template.geom.w, c)?;
    let search_tokens = search.flat()?.add(&pe_s)?;
    let template_tokens = template.flat()?.add(&pe_t)?;
    let out = prt_forward(&search_tokens, &template_tokens, w)?;
    Ok(BevGrid {
        geom: search.geom,
        features: out
            .matched
            .reshape(&[search.geom.h, search.geom.w, c])?,
    })
}

struct ConvLayer<T: Real> {
    w: Parameter<T>,
    b: Parameter<T>,
    stride: usize,
}

impl<T: Real> ConvLayer<T> {
    fn new(name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut RandomState) -> Result<Self> {
        let fan_in = c_in * 9;
        let fan_out = c_out * 9;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..c_out * c_in * 9)
            .map(|_| T::from_f64(rng.random_range(-limit..limit)))
            .collect();
        Ok(ConvLayer {
            w: Parameter::new(format!("{name}.w"), &[c_out, c_in, 3, 3], data)?,
            b: Parameter::zeros(format!("{name}.b"), &[c_out]),
            stride,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.w.tensor, Some(&self.b.tensor), self.stride, 1)
            .map(|t| t.relu())
    }
}

/// Strided convolutional stack: each block halves the spatial resolution
/// with one stride-2 conv and one stride-1 conv, both 3×3 with ReLU.
pub struct BevBackbone<T: Real = f32> {
    layers: Vec<ConvLayer<T>>,
    blocks: usize,
}

impl<T: Real> BevBackbone<T> {
    pub fn new(name: &str, c_in: usize, channels: &[usize], rng: &mut RandomState) -> Result<Self> {
        let mut layers = Vec::with_capacity(channels.len() * 2);
        let mut prev = c_in;
        for (i, &c) in channels.iter().enumerate() {
            layers.push(ConvLayer::new(&format!("{name}.b{i}.c0"), prev, c, 2, rng)?);
            layers.push(ConvLayer::new(&format!("{name}.b{i}.c1"), c, c, 1, rng)?);
            prev = c;
        }
        Ok(BevBackbone {
            layers,
            blocks: channels.len(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.w.shape()[0]).unwrap_or(0)
    }

    pub fn forward(&self, grid: &BevGrid<T>) -> Result<BevGrid<T>> {
        let factor = 1usize << self.blocks;
        if grid.geom.h % factor != 0 || grid.geom.w % factor != 0 {
            return Err(Error::Config(format!(
                "bev backbone: grid {}x{} not divisible by {}",
                grid.geom.h, grid.geom.w, factor
            )));
        }
        let mut features = grid.features.clone();
        let mut geom = grid.geom;
        for (i, layer) in self.layers.iter().enumerate() {
            features = layer.forward(&features)?;
            if i % 2 == 0 {
                geom = geom.downsampled();
            }
        }
        Ok(BevGrid { geom, features })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| vec![&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| vec![&mut l.w, &mut l.b])
            .collect()
    }
}

/// Grid-based average pooling of point features into a BEV layout.
pub fn point_to_bev<T: Real>(
    point_feats: &Tensor<T>,
    point_xyz: &[[f64; 3]],
    geom: &BevGeometry,
) -> Result<BevGrid<T>> {
    let (k, c) = match point_feats.shape() {
        [k, c] => (*k, *c),
        other => {
            return Err(Error::InvalidArgument(format!(
                "point_to_bev: features must be [K, C], got {other:?}"
            )))
        }
    };
    if k != point_xyz.len() {
        return Err(Error::InvalidArgument(format!(
            "point_to_bev: {} coordinates for {} feature rows",
            point_xyz.len(),
            k
        )));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); geom.h * geom.w];
    for (i, &p) in point_xyz.iter().enumerate() {
        if let Some((row, col)) = geom.cell_of(p) {
            groups[row * geom.w + col].push(i);
        }
    }
    let pooled = point_feats.group_mean_rows(&groups)?;
    Ok(BevGrid {
        geom: *geom,
        features: pooled.reshape(&[geom.h, geom.w, c])?,
    })
}

/// Bilinear resampling of grid features at point x/y positions. Sample
/// sites are cell centers; queries outside the center hull clamp to the
/// border cell.
pub fn bev_to_point<T: Real>(grid: &BevGrid<T>, point_xyz: &[[f64; 3]]) -> Result<Tensor<T>> {
    let geom = grid.geom;
    let flat = grid.flat()?;
    // Queries within one part in 10⁹ of a cell center snap onto it, so
    // "exactly at a center" holds under inexact cell arithmetic.
    let snap = |u: f64| {
        if (u - u.round()).abs() < 1e-9 {
            u.round()
        } else {
            u
        }
    };
    let mut combos: Vec<Vec<(usize, T)>> = Vec::with_capacity(point_xyz.len());
    for &p in point_xyz {
        let u = snap((p[0] - geom.x0) / geom.cell - 0.5).clamp(0.0, (geom.w - 1) as f64);
        let v = snap((p[1] - geom.y0) / geom.cell - 0.5).clamp(0.0, (geom.h - 1) as f64);
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let c1 = (c0 + 1).min(geom.w - 1);
        let r1 = (r0 + 1).min(geom.h - 1);
        let fx = u - c0 as f64;
        let fy = v - r0 as f64;
        combos.push(vec![
            (r0 * geom.w + c0, T::from_f64((1.0 - fx) * (1.0 - fy))),
            (r0 * geom.w + c1, T::from_f64(fx * (1.0 - fy))),
            (r1 * geom.w + c0, T::from_f64((1.0 - fx) * fy)),
            (r1 * geom.w + c1, T::from_f64(fx * fy)),
        ]);
    }
    flat.linear_combine_rows(&combos)
}

/// Gating flavor of [`selective_fuse`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseMode {
    /// Plain `a + b` (no weights involved).
    Addition,
    /// One channel-weight vector from the average-pooled sum.
    Global,
    /// Per-row channel weights, no pooling.
    PointWise,
}

/// Squeeze-excitation style bottleneck used by the gated fusion modes.
pub struct SffWeights<T: Real = f32> {
    pub squeeze: Linear<T>,
    pub excite: Linear<T>,
    pub width: usize,
}

impl<T: Real> SffWeights<T> {
    pub fn new(name: &str, width: usize, reduction: usize, rng: &mut RandomState) -> Result<Self> {
        if reduction == 0 || width % reduction != 0 {
            return Err(Error::Config(format!(
                "selective fusion: width {width} not divisible by reduction {reduction}"
            )));
        }
        let mid = width / reduction;
        Ok(SffWeights {
            squeeze: Linear::new(&format!("{name}.squeeze"), width, mid, true, rng)?,
            excite: Linear::new(&format!("{name}.excite"), mid, width, true, rng)?,
            width,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.squeeze.params();
        p.extend(self.excite.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.squeeze.params_mut();
        p.extend(self.excite.params_mut());
        p
    }

    fn gate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.excite
            .forward(&self.squeeze.forward(x)?.relu())
            .map(|t| t.sigmoid())
    }
}

/// `w ⊙ a + (1−w) ⊙ b` with the gate computed from `a + b`. Addition mode
/// skips the gate entirely.
pub fn selective_fuse<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: FuseMode,
    se: Option<&SffWeights<T>>,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "selective_fuse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sum = a.add(b)?;
    let weights = match mode {
        FuseMode::Addition => return Ok(sum),
        FuseMode::Global => {
            let se = se.ok_or_else(|| Error::Config("selective_fuse: missing weights".into()))?;
            se.gate(&sum.mean_over_axis(0)?)?
        }
        FuseMode::PointWise => {
            let se = se.ok_or_else(|| Error::Config("selective_fuse: missing weights".into()))?;
            se.gate(&sum)?
        }
    };
    let inverse = weights.neg().add_scalar(T::one());
    a.mul(&weights)?.add(&b.mul(&inverse)?)
}

/// Dual-branch loss: point BCE + α·MSE plus BEV BCE + β·MSE.
pub fn dual_loss<T: Real>(
    point_pred: &TrackPrediction<T>,
    bev_pred: &TrackPrediction<T>,
    tgt_point: &TargetAssignment<T>,
    tgt_bev: &TargetAssignment<T>,
    alpha: f64,
    beta: f64,
) -> Result<Tensor<T>> {
    let p_cls = point_pred.cls.bce_with_logits(&tgt_point.cls_target)?;
    let p_reg = point_pred
        .reg
        .mse_masked(&tgt_point.reg_target, Some(&tgt_point.reg_mask))?;
    let b_cls = bev_pred.cls.bce_with_logits(&tgt_bev.cls_target)?;
    let b_reg = bev_pred
        .reg
        .mse_masked(&tgt_bev.reg_target, Some(&tgt_bev.reg_mask))?;
    p_cls
        .add(&p_reg.scale(T::from_f64(alpha)))?
        .add(&b_cls)?
        .add(&b_reg.scale(T::from_f64(beta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::fd::{check_gradient, probe_values};

    fn small_geom() -> BevGeometry {
        BevGeometry::from_range((-2.4, 2.4), (-2.4, 2.4), (-1.5, 1.5), 0.3).unwrap()
    }

    #[test]
    fn geometry_validation() {
        assert!(BevGeometry::from_range((-4.8, 4.8), (-4.8, 4.8), (-1.5, 1.5), 0.3).is_ok());
        assert!(BevGeometry::from_range((-1.0, 1.05), (-1.0, 1.0), (-1.0, 1.0), 0.3).is_err());
        assert!(BevGeometry::from_range((-1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), 0.5).is_err());
        let g = small_geom();
        assert_eq!((g.h, g.w), (16, 16));
    }

    #[test]
    fn pillarize_single_point_at_cell_center() {
        let g = small_geom();
        let (cx, cy) = g.cell_center(3, 5);
        let pts = vec![[cx, cy, 0.2]];
        let p = pillarize(&pts, &g, [4.0, 2.0, 1.5]).unwrap();
        assert_eq!(p.cells, vec![(3, 5)]);
        let row = p.rows[0][0];
        assert_eq!(&row[..3], &[cx, cy, 0.2]);
        assert_eq!(&row[3..6], &[cx, cy, 0.2]); // mean of one point
        assert!(row[6].abs() < 1e-12 && row[7].abs() < 1e-12);
        assert_eq!(&row[8..], &[4.0, 1.5, 2.0]); // (w, h, l)
    }

    #[test]
    fn pillarize_shares_mean_within_pillar() {
        let g = small_geom();
        let (cx, cy) = g.cell_center(0, 0);
        let pts = vec![[cx - 0.05, cy, 0.0], [cx + 0.05, cy, 0.4]];
        let p = pillarize(&pts, &g, [1.0; 3]).unwrap();
        assert_eq!(p.rows[0].len(), 2);
        for row in &p.rows[0] {
            assert!((row[3] - cx).abs() < 1e-12);
            assert!((row[4] - cy).abs() < 1e-12);
            assert!((row[5] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn pillarize_bucketing_matches_floor_oracle() {
        let g = small_geom();
        let mut rng = rng_from_seed(1);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let p = pillarize(&pts, &g, [1.0; 3]).unwrap();
        let mut count_in = 0;
        for &q in &pts {
            let inside = q[0] >= -2.4
                && q[0] < 2.4
                && q[1] >= -2.4
                && q[1] < 2.4
                && q[2] >= -1.5
                && q[2] <= 1.5;
            if !inside {
                continue;
            }
            count_in += 1;
            let col = ((q[0] + 2.4) / 0.3).floor() as usize;
            let row = ((q[1] + 2.4) / 0.3).floor() as usize;
            let slot = p.cells.iter().position(|&c| c == (row, col));
            let slot = slot.unwrap_or_else(|| panic!("cell ({row},{col}) missing"));
            assert!(
                p.rows[slot].iter().any(|r| r[0] == q[0] && r[1] == q[1]),
                "point not in its floor-division cell"
            );
        }
        assert_eq!(p.total_points(), count_in);
    }

    #[test]
    fn encode_leaves_empty_cells_zero_and_ignores_order() {
        let g = small_geom();
        let mut rng = rng_from_seed(2);
        let enc = Parameter::<f32>::new(
            "enc",
            &[11, 8],
            (0..88).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let pts = vec![
            [0.1, 0.1, 0.0],
            [0.12, 0.11, 0.3],
            [-1.0, 0.5, 0.0],
        ];
        let p = pillarize(&pts, &g, [1.0; 3]).unwrap();
        let grid = encode_pillars(&p, &enc).unwrap();
        // Count nonzero cells.
        let c = grid.channels();
        let data = grid.features.data();
        let nonzero: Vec<usize> = (0..g.h * g.w)
            .filter(|&i| data[i * c..(i + 1) * c].iter().any(|&v| v != 0.0))
            .collect();
        assert_eq!(nonzero.len(), 2);

        // Reversed point order produces the identical grid.
        let rev: Vec<[f64; 3]> = pts.iter().rev().copied().collect();
        let p2 = pillarize(&rev, &g, [1.0; 3]).unwrap();
        let grid2 = encode_pillars(&p2, &enc).unwrap();
        assert_eq!(
            grid.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            grid2.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn encode_single_point_pillar_equals_its_encoding() {
        let g = small_geom();
        let enc = Parameter::<f64>::new("enc", &[11, 4], probe_values(44, 3)).unwrap();
        let (cx, cy) = g.cell_center(2, 2);
        let p = pillarize(&[[cx, cy, 0.1]], &g, [2.0, 1.0, 0.5]).unwrap();
        let grid = encode_pillars(&p, &enc).unwrap();
        let row = Tensor::from_vec(&[1, 11], p.rows[0][0].to_vec()).unwrap();
        let want = row.matmul(&enc.tensor).unwrap();
        let cell = 2 * g.w + 2;
        let got = &grid.features.data()[cell * 4..(cell + 1) * 4];
        for (a, b) in got.iter().zip(want.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bev_match_dims_and_pe_sensitivity() {
        let mut rng = rng_from_seed(4);
        let g = BevGeometry::from_range((-1.2, 1.2), (-1.2, 1.2), (-1.0, 1.0), 0.3).unwrap();
        let c = 8;
        let w = PrtWeights::<f32>::new("prt", c, &mut rng).unwrap();
        let feats: Vec<f32> = (0..g.h * g.w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let search = BevGrid {
            geom: g,
            features: Tensor::from_vec(&[g.h, g.w, c], feats.clone()).unwrap(),
        };
        // Template content shifted by one column.
        let mut shifted = vec![0.0f32; feats.len()];
        for row in 0..g.h {
            for col in 0..g.w {
                let src = (row * g.w + col) * c;
                let dst = (row * g.w + (col + 1) % g.w) * c;
                shifted[dst..dst + c].copy_from_slice(&feats[src..src + c]);
            }
        }
        let template = BevGrid {
            geom: g,
            features: Tensor::from_vec(&[g.h, g.w, c], feats.clone()).unwrap(),
        };
        let template_shifted = BevGrid {
            geom: g,
            features: Tensor::from_vec(&[g.h, g.w, c], shifted).unwrap(),
        };
        let out = bev_match(&search, &template, &w).unwrap();
        assert_eq!(out.features.shape(), &[g.h, g.w, c]);
        let out_shifted = bev_match(&search, &template_shifted, &w).unwrap();
        // Positional embeddings break translation invariance.
        let diff: f32 = out
            .features
            .data()
            .iter()
            .zip(out_shifted.features.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-4, "shifting the template had no effect");

        // Zero grids: deterministic, finite.
        let zero = BevGrid {
            geom: g,
            features: Tensor::zeros(&[g.h, g.w, c]),
        };
        let za = bev_match(&zero, &zero, &w).unwrap();
        let zb = bev_match(&zero, &zero, &w).unwrap();
        assert_eq!(za.features.data(), zb.features.data());
        za.features.ensure_finite("zero grid match").unwrap();
    }

    #[test]
    fn bev_backbone_shapes_and_zero_propagation() {
        let mut rng = rng_from_seed(5);
        let bb = BevBackbone::<f32>::new("bb", 8, &[8, 8, 16], &mut rng).unwrap();
        let g = BevGeometry::from_range((-4.8, 4.8), (-4.8, 4.8), (-1.5, 1.5), 0.3).unwrap();
        assert_eq!((g.h, g.w), (32, 32));
        let grid = BevGrid {
            geom: g,
            features: Tensor::zeros(&[32, 32, 8]),
        };
        let out = bb.forward(&grid).unwrap();
        assert_eq!(out.features.shape(), &[4, 4, 16]);
        assert!((out.geom.cell - 2.4).abs() < 1e-12);
        // Zero input with zero bias stays zero through ReLU convs.
        assert!(out.features.data().iter().all(|&v| v == 0.0));

        let bad = BevGrid {
            geom: BevGeometry::from_range((-1.8, 1.8), (-1.8, 1.8), (-1.0, 1.0), 0.3).unwrap(),
            features: Tensor::zeros(&[12, 12, 8]),
        };
        assert!(bb.forward(&bad).is_err());
    }

    #[test]
    fn point_to_bev_average_and_range() {
        let g = small_geom();
        let (cx, cy) = g.cell_center(4, 4);
        let xyz = vec![
            [cx, cy, 0.0],
            [cx + 0.01, cy, 0.0],
            [99.0, 0.0, 0.0], // outside: contributes nowhere
        ];
        let feats = Tensor::<f64>::from_vec(&[3, 2], vec![1.0, 0.0, 3.0, 2.0, 7.0, 7.0]).unwrap();
        let grid = point_to_bev(&feats, &xyz, &g).unwrap();
        let cell = 4 * g.w + 4;
        let got = &grid.features.data()[cell * 2..cell * 2 + 2];
        assert_eq!(got, &[2.0, 1.0]);
        let total: f64 = grid.features.data().iter().sum();
        assert_eq!(total, 3.0, "outside point leaked into the grid");
    }

    #[test]
    fn point_to_bev_matches_brute_force() {
        let g = small_geom();
        let mut rng = rng_from_seed(6);
        let n = 60;
        let xyz: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let c = 3;
        let feats_data = probe_values(n * c, 7);
        let feats = Tensor::<f64>::from_vec(&[n, c], feats_data.clone()).unwrap();
        let grid = point_to_bev(&feats, &xyz, &g).unwrap();
        for row in 0..g.h {
            for col in 0..g.w {
                let members: Vec<usize> = (0..n)
                    .filter(|&i| g.cell_of(xyz[i]) == Some((row, col)))
                    .collect();
                let cell = row * g.w + col;
                for ch in 0..c {
                    let want = if members.is_empty() {
                        0.0
                    } else {
                        members.iter().map(|&i| feats_data[i * c + ch]).sum::<f64>()
                            / members.len() as f64
                    };
                    let got = grid.features.data()[cell * c + ch];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bev_to_point_exact_center_and_midpoint() {
        let g = small_geom();
        let c = 2;
        let feats = probe_values(g.h * g.w * c, 8);
        let grid = BevGrid {
            geom: g,
            features: Tensor::<f64>::from_vec(&[g.h, g.w, c], feats.clone()).unwrap(),
        };
        let (cx, cy) = g.cell_center(5, 7);
        let out = bev_to_point(&grid, &[[cx, cy, 0.0]]).unwrap();
        let cell = 5 * g.w + 7;
        assert_eq!(out.data(), &feats[cell * c..(cell + 1) * c]);

        let (nx, _) = g.cell_center(5, 8);
        let out = bev_to_point(&grid, &[[(cx + nx) / 2.0, cy, 0.0]]).unwrap();
        for ch in 0..c {
            let want = (feats[cell * c + ch] + feats[(cell + 1) * c + ch]) / 2.0;
            assert!((out.data()[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bev_to_point_matches_reference_bilinear() {
        let g = small_geom();
        let c = 4;
        let feats = probe_values(g.h * g.w * c, 9);
        let grid = BevGrid {
            geom: g,
            features: Tensor::<f64>::from_vec(&[g.h, g.w, c], feats.clone()).unwrap(),
        };
        let mut rng = rng_from_seed(10);
        let queries: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    0.0,
                ]
            })
            .collect();
        let got = bev_to_point(&grid, &queries).unwrap();
        // Independent reference implementation.
        for (qi, q) in queries.iter().enumerate() {
            let u = ((q[0] - g.x0) / g.cell - 0.5).clamp(0.0, (g.w - 1) as f64);
            let v = ((q[1] - g.y0) / g.cell - 0.5).clamp(0.0, (g.h - 1) as f64);
            let (c0, r0) = (u.floor() as usize, v.floor() as usize);
            let (c1, r1) = ((c0 + 1).min(g.w - 1), (r0 + 1).min(g.h - 1));
            let (fx, fy) = (u - c0 as f64, v - r0 as f64);
            for ch in 0..c {
                let f = |r: usize, cc: usize| feats[(r * g.w + cc) * c + ch];
                let want = f(r0, c0) * (1.0 - fx) * (1.0 - fy)
                    + f(r0, c1) * fx * (1.0 - fy)
                    + f(r1, c0) * (1.0 - fx) * fy
                    + f(r1, c1) * fx * fy;
                assert!((got.data()[qi * c + ch] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn roundtrip_identity_on_single_point_cells() {
        let g = small_geom();
        let (cx, cy) = g.cell_center(3, 9);
        let xyz = vec![[cx, cy, 0.0]];
        let feats = Tensor::<f64>::from_vec(&[1, 3], vec![0.4, -1.2, 2.5]).unwrap();
        let grid = point_to_bev(&feats, &xyz, &g).unwrap();
        let back = bev_to_point(&grid, &xyz).unwrap();
        assert_eq!(back.data(), feats.data());
    }

    #[test]
    fn selective_fuse_identities_and_bounds() {
        let mut rng = rng_from_seed(11);
        let se = SffWeights::<f64>::new("sff", 8, 4, &mut rng).unwrap();
        let a = Tensor::from_vec(&[5, 8], probe_values(40, 12)).unwrap();
        let b = Tensor::from_vec(&[5, 8], probe_values(40, 13)).unwrap();

        // a == b collapses regardless of the gate.
        for mode in [FuseMode::Global, FuseMode::PointWise] {
            let fused = selective_fuse(&a, &a, mode, Some(&se)).unwrap();
            for (x, y) in fused.data().iter().zip(a.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        // Convex combination bounds per element.
        for mode in [FuseMode::Global, FuseMode::PointWise, FuseMode::Addition] {
            let fused = selective_fuse(&a, &b, mode, Some(&se)).unwrap();
            if mode == FuseMode::Addition {
                continue;
            }
            for ((&f, &x), &y) in fused.data().iter().zip(a.data()).zip(b.data()) {
                assert!(f >= x.min(y) - 1e-12 && f <= x.max(y) + 1e-12);
            }
        }

        // Saturated gate selects a exactly.
        let mut sat = SffWeights::<f64>::new("sat", 8, 4, &mut rng).unwrap();
        for p in sat.params_mut() {
            let n = p.tensor.numel();
            let v = if p.name.ends_with(".b") { 1e4 } else { 0.0 };
            p.set_data(vec![v; n]).unwrap();
        }
        let fused = selective_fuse(&a, &b, FuseMode::PointWise, Some(&sat)).unwrap();
        assert_eq!(fused.data(), a.data());
    }

    #[test]
    fn sff_rejects_bad_reduction() {
        let mut rng = rng_from_seed(14);
        assert!(SffWeights::<f32>::new("s", 10, 4, &mut rng).is_err());
    }

    #[test]
    fn full_bev_chain_gradient() {
        // pillarize → encode → match → backbone → resample → fuse, checked
        // against finite differences through the pillar encoder.
        let mut rng = rng_from_seed(15);
        let g = BevGeometry::from_range((-1.2, 1.2), (-1.2, 1.2), (-1.0, 1.0), 0.3).unwrap();
        let prt = PrtWeights::<f64>::new("prt", 4, &mut rng).unwrap();
        let bb = BevBackbone::<f64>::new("bb", 4, &[4, 4, 4], &mut rng).unwrap();
        let se = SffWeights::<f64>::new("sff", 4, 4, &mut rng).unwrap();
        let cloud = vec![
            [0.1, 0.2, 0.0],
            [-0.4, 0.3, 0.2],
            [0.7, -0.9, -0.1],
            [0.15, 0.22, 0.05],
        ];
        let tmpl_cloud = vec![[0.0, 0.0, 0.0], [-0.3, 0.4, 0.1]];
        let seeds = vec![[0.1, 0.2, 0.0], [-0.4, 0.3, 0.2]];
        let point_feats = Tensor::from_vec(&[2, 4], probe_values(8, 16)).unwrap();
        let pil_s = pillarize(&cloud, &g, [1.0, 0.8, 0.5]).unwrap();
        let pil_t = pillarize(&tmpl_cloud, &g, [1.0, 0.8, 0.5]).unwrap();
        let err = check_gradient(&[11, 4], &probe_values(44, 17), |enc_leaf| {
            let enc = Parameter {
                name: "enc".into(),
                tensor: enc_leaf.clone(),
            };
            let gs = encode_pillars(&pil_s, &enc)?;
            let gt = encode_pillars(&pil_t, &enc)?;
            let matched = bev_match(&gs, &gt, &prt)?;
            let deep = bb.forward(&matched)?;
            let resampled = bev_to_point(&deep, &seeds)?;
            let fused = selective_fuse(&point_feats, &resampled, FuseMode::PointWise, Some(&se))?;
            Ok(fused.sum_all())
        })
        .unwrap();
        assert!(err < 1e-3, "end-to-end bev gradient rel err {err}");
    }

    #[test]
    fn dual_loss_reaches_both_branches() {
        let mut rng = rng_from_seed(18);
        let point_head = crate::heads::CoarseHead::<f64>::new("p", 4, &mut rng).unwrap();
        let bev_head = crate::heads::CoarseHead::<f64>::new("b", 4, &mut rng).unwrap();
        let pf = Tensor::from_vec(&[3, 4], probe_values(12, 19)).unwrap().requires_grad();
        let bf = Tensor::from_vec(&[4, 4], probe_values(16, 20)).unwrap().requires_grad();
        let gt = crate::geom::Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap();
        let tgt_p = crate::heads::assign_targets::<f64>(
            &[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [3.0, 0.0, 0.0]],
            &gt,
            &gt,
        )
        .unwrap();
        let tgt_b = crate::heads::assign_targets::<f64>(
            &[[0.0, 0.0, 0.0], [0.2, 0.1, 0.0], [2.0, 2.0, 0.0], [0.3, 0.0, 0.0]],
            &gt,
            &gt,
        )
        .unwrap();
        let loss = dual_loss(
            &point_head.forward(&pf).unwrap(),
            &bev_head.forward(&bf).unwrap(),
            &tgt_p,
            &tgt_b,
            100.0,
            2.0,
        )
        .unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(&pf).unwrap().iter().any(|&v| v != 0.0));
        assert!(grads.get(&bf).unwrap().iter().any(|&v| v != 0.0));
        for p in point_head.params().into_iter().chain(bev_head.params()) {
            assert!(grads.param(p).is_some(), "{} unreached", p.name);
        }
    }

    #[test]
    fn dual_loss_perfect_predictions_near_zero() {
        let gt = crate::geom::Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap();
        let xyz = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let tgt = crate::heads::assign_targets::<f64>(&xyz, &gt, &gt).unwrap();
        let cls: Vec<f64> = tgt
            .cls_target
            .data()
            .iter()
            .map(|&t| if t == 1.0 { 20.0 } else { -20.0 })
            .collect();
        let pred = TrackPrediction {
            cls: Tensor::from_vec(&[2, 1], cls).unwrap(),
            reg: tgt.reg_target.detach(),
        };
        let loss = dual_loss(&pred, &pred, &tgt, &tgt, 100.0, 2.0).unwrap().item();
        assert!(loss < 1e-3, "loss = {loss}");
    }
}
