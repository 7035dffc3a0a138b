//! Hierarchical set-abstraction backbone.
//!
//! Three levels by default: subsample, group by ball query, run a small
//! per-point MLP on `[neighbor features, relative xyz]`, then channel max
//! per group. The search branch can subsample with relation-aware scores
//! against the template branch's same-level features; the template branch
//! uses plain distance-farthest sampling.


use super::{
    ball_query, sample_dfps, sample_ffps, sample_random, sample_ras, sample_ras_hybrid,
    BallQuery, SampleIndices, Strategy,
};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::RandomState;
use crate::tensor::{Parameter, Real, Tensor};

#[derive(Debug, Clone)]
pub struct LevelConfig {
    pub radius: f64,
    pub max_neighbors: usize,
    pub width: usize,
}

/// Weights-level configuration. Per-level sample counts are a per-call
/// argument, so the template and search branches can share one backbone.
#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub levels: Vec<LevelConfig>,
    /// Linear+ReLU layers per level MLP.
    pub mlp_depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            levels: vec![
                LevelConfig { radius: 0.3, max_neighbors: 16, width: 32 },
                LevelConfig { radius: 0.5, max_neighbors: 16, width: 64 },
                LevelConfig { radius: 0.7, max_neighbors: 16, width: 128 },
            ],
            mlp_depth: 2,
        }
    }
}

/// One level's intermediates, kept for diagnostics and for relation-aware
/// sampling of a sibling branch.
pub struct LevelOutput<T: Real = f32> {
    pub sample: SampleIndices,
    pub xyz: Vec<[f64; 3]>,
    pub features: Tensor<T>,
    pub query: BallQuery,
}

/// Final sampled coordinates and features, with per-level intermediates.
pub struct BackboneOutput<T: Real = f32> {
    pub levels: Vec<LevelOutput<T>>,
    /// Coordinates the backbone actually consumed (after input resampling
    /// upstream); level 0 samples index into these.
    pub input_xyz: Vec<[f64; 3]>,
}

impl<T: Real> BackboneOutput<T> {
    pub fn final_xyz(&self) -> &[[f64; 3]] {
        &self.levels.last().expect("at least one level").xyz
    }

    pub fn final_features(&self) -> &Tensor<T> {
        &self.levels.last().expect("at least one level").features
    }

    /// Features entering level `l`: raw coordinates for level 0, the
    /// previous level's output otherwise.
    fn features_before(&self, level: usize) -> (Vec<T>, usize) {
        if level == 0 {
            let data = self
                .input_xyz
                .iter()
                .flat_map(|p| p.iter().map(|&v| T::from_f64(v)))
                .collect();
            (data, 3)
        } else {
            let f = &self.levels[level - 1].features;
            (f.data().to_vec(), f.shape()[1])
        }
    }
}

/// How the subsampling step picks points at every level.
pub enum BackboneMode<'a, T: Real = f32> {
    /// Distance-farthest sampling (the template branch).
    Template,
    /// Configured strategy, with relation scores against the template
    /// branch's same-level features where the strategy needs them.
    Search {
        template: Option<&'a BackboneOutput<T>>,
        strategy: Strategy,
    },
}

pub struct Backbone<T: Real = f32> {
    pub cfg: BackboneConfig,
    mlps: Vec<Mlp<T>>,
}

impl<T: Real> Backbone<T> {
    pub fn new(name: &str, cfg: BackboneConfig, rng: &mut RandomState) -> Result<Self> {
        let mut mlps = Vec::with_capacity(cfg.levels.len());
        // Level 0 consumes the absolute canonical-frame coordinates as its
        // input features, so positions stay recoverable downstream.
        let mut in_width = 3usize;
        for (l, level) in cfg.levels.iter().enumerate() {
            let mut widths = vec![in_width + 3];
            for _ in 0..cfg.mlp_depth {
                widths.push(level.width);
            }
            mlps.push(Mlp::new(&format!("{name}.sa{l}"), &widths, true, rng)?);
            in_width = level.width;
        }
        Ok(Backbone { cfg, mlps })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.mlps.iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.mlps.iter_mut().flat_map(|m| m.params_mut()).collect()
    }

    pub fn out_width(&self) -> usize {
        self.cfg.levels.last().expect("levels").width
    }

    /// `level_sizes` gives the per-level sample counts, one per configured
    /// level.
    pub fn forward(
        &self,
        xyz: &[[f64; 3]],
        level_sizes: &[usize],
        mode: BackboneMode<'_, T>,
        rng: &mut RandomState,
    ) -> Result<BackboneOutput<T>> {
        if xyz.is_empty() {
            return Err(Error::EmptyInput("backbone: empty cloud".into()));
        }
        if level_sizes.len() != self.cfg.levels.len() {
            return Err(Error::InvalidArgument(format!(
                "backbone: {} level sizes for {} levels",
                level_sizes.len(),
                self.cfg.levels.len()
            )));
        }
        let mut out = BackboneOutput {
            levels: Vec::with_capacity(self.cfg.levels.len()),
            input_xyz: xyz.to_vec(),
        };
        let mut cur_xyz: Vec<[f64; 3]> = xyz.to_vec();
        let coords: Vec<T> = xyz
            .iter()
            .flat_map(|p| p.iter().map(|&v| T::from_f64(v)))
            .collect();
        let mut cur_feat: Tensor<T> = Tensor::from_vec(&[xyz.len(), 3], coords)?;

        for (l, level) in self.cfg.levels.iter().enumerate() {
            let k = level_sizes[l];
            let sample = match &mode {
                BackboneMode::Template => sample_dfps(&cur_xyz, k)?,
                BackboneMode::Search { template, strategy } => {
                    self.subsample_search(l, &cur_xyz, &cur_feat, *template, *strategy, k, rng)?
                }
            };
            let centers: Vec<[f64; 3]> = sample.indices.iter().map(|&i| cur_xyz[i]).collect();
            let query = ball_query(&centers, &cur_xyz, level.radius, level.max_neighbors)?;

            // Assemble grouped rows: [neighbor features | xyz - center].
            let m = centers.len();
            let nbr = level.max_neighbors;
            let flat: Vec<usize> = query.flat().to_vec();
            let mut rel = Vec::with_capacity(m * nbr * 3);
            for (g, &center) in centers.iter().enumerate() {
                for &i in query.row(g) {
                    let p = cur_xyz[i];
                    rel.push(T::from_f64(p[0] - center[0]));
                    rel.push(T::from_f64(p[1] - center[1]));
                    rel.push(T::from_f64(p[2] - center[2]));
                }
            }
            let rel = Tensor::from_vec(&[m * nbr, 3], rel)?;
            let neighbor_feats = cur_feat.gather_rows(&flat)?;
            let grouped = Tensor::concat_last_dim(&[&neighbor_feats, &rel])?;
            let encoded = self.mlps[l].forward(&grouped)?;
            let groups: Vec<Vec<usize>> =
                (0..m).map(|g| (g * nbr..(g + 1) * nbr).collect()).collect();
            let features = encoded.group_max_rows(&groups)?;

            out.levels.push(LevelOutput {
                sample,
                xyz: centers.clone(),
                features: features.clone(),
                query,
            });
            cur_xyz = centers;
            cur_feat = features;
        }
        Ok(out)
    }

    fn subsample_search(
        &self,
        level: usize,
        cur_xyz: &[[f64; 3]],
        cur_feat: &Tensor<T>,
        template: Option<&BackboneOutput<T>>,
        strategy: Strategy,
        k: usize,
        rng: &mut RandomState,
    ) -> Result<SampleIndices> {
        match strategy {
            Strategy::Random => sample_random(cur_xyz.len(), k, rng),
            Strategy::DFps => sample_dfps(cur_xyz, k),
            Strategy::FFps => sample_ffps(cur_feat.data(), cur_feat.shape()[1], k),
            Strategy::Ras | Strategy::RasHybrid => {
                let template = template.ok_or_else(|| {
                    Error::InvalidArgument(
                        "relation-aware sampling needs template features".into(),
                    )
                })?;
                let cols = cur_feat.shape()[1];
                let (tfeat, tcols) = template.features_before(level);
                if cols != tcols {
                    return Err(Error::ShapeMismatch {
                        op: "ras-sampling",
                        lhs: vec![cur_feat.shape()[0], cols],
                        rhs: vec![tfeat.len() / tcols, tcols],
                    });
                }
                if strategy == Strategy::Ras {
                    sample_ras(cur_feat.data(), &tfeat, cols, k)
                } else {
                    sample_ras_hybrid(cur_feat.data(), &tfeat, cols, k, rng)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            levels: vec![
                LevelConfig { radius: 0.3, max_neighbors: 8, width: 16 },
                LevelConfig { radius: 0.5, max_neighbors: 8, width: 16 },
                LevelConfig { radius: 0.7, max_neighbors: 8, width: 24 },
            ],
            mlp_depth: 2,
        }
    }

    const SIZES: [usize; 3] = [64, 32, 16];

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-0.8..0.8),
                ]
            })
            .collect()
    }

    #[test]
    fn template_branch_shape_contract() {
        let mut rng = rng_from_seed(5);
        let bb = Backbone::<f32>::new("tb", small_cfg(), &mut rng).unwrap();
        let out = bb
            .forward(&cloud(128, 9), &SIZES, BackboneMode::Template, &mut rng)
            .unwrap();
        assert_eq!(out.levels.len(), 3);
        assert_eq!(out.final_xyz().len(), 16);
        assert_eq!(out.final_features().shape(), &[16, 24]);
    }

    #[test]
    fn search_branch_with_ras_runs_and_matches_widths() {
        let mut rng = rng_from_seed(6);
        let bb = Backbone::<f32>::new("bb", small_cfg(), &mut rng).unwrap();
        let tmpl = bb
            .forward(&cloud(64, 10), &[32, 16, 8], BackboneMode::Template, &mut rng)
            .unwrap();
        let out = bb
            .forward(
                &cloud(128, 11),
                &SIZES,
                BackboneMode::Search {
                    template: Some(&tmpl),
                    strategy: Strategy::RasHybrid,
                },
                &mut rng,
            )
            .unwrap();
        assert_eq!(out.final_features().shape(), &[16, 24]);
        assert!(bb
            .forward(
                &cloud(16, 12),
                &SIZES,
                BackboneMode::Search { template: None, strategy: Strategy::Ras },
                &mut rng
            )
            .is_err());
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let mut rng = rng_from_seed(7);
        let bb = Backbone::<f32>::new("bb", small_cfg(), &mut rng).unwrap();
        let pts = cloud(100, 13);
        let a = bb
            .forward(&pts, &SIZES, BackboneMode::Template, &mut rng_from_seed(1))
            .unwrap();
        let b = bb
            .forward(&pts, &SIZES, BackboneMode::Template, &mut rng_from_seed(1))
            .unwrap();
        assert_eq!(a.final_features().data(), b.final_features().data());
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.sample, lb.sample);
        }
    }

    #[test]
    fn scaling_coordinates_and_radii_preserves_grouping() {
        let mut rng = rng_from_seed(8);
        let bb = Backbone::<f32>::new("bb", small_cfg(), &mut rng).unwrap();
        let pts = cloud(90, 14);
        let doubled: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] * 2.0, p[1] * 2.0, p[2] * 2.0]).collect();
        let mut cfg2 = small_cfg();
        for l in &mut cfg2.levels {
            l.radius *= 2.0;
        }
        let bb2 = Backbone::<f32>::new("bb", cfg2, &mut rng_from_seed(8)).unwrap();
        let a = bb.forward(&pts, &SIZES, BackboneMode::Template, &mut rng_from_seed(2)).unwrap();
        let b = bb2.forward(&doubled, &SIZES, BackboneMode::Template, &mut rng_from_seed(2)).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            assert_eq!(la.sample.indices, lb.sample.indices, "sampling changed");
            assert_eq!(la.query.flat(), lb.query.flat(), "grouping changed");
        }
    }

    #[test]
    fn gradients_reach_level_mlps() {
        let mut rng = rng_from_seed(9);
        let bb = Backbone::<f64>::new("bb", small_cfg(), &mut rng).unwrap();
        let out = bb
            .forward(&cloud(80, 15), &SIZES, BackboneMode::Template, &mut rng)
            .unwrap();
        let loss = out.final_features().sum_all();
        let grads = loss.backward().unwrap();
        for p in bb.params() {
            assert!(grads.param(p).is_some(), "no grad for {}", p.name);
        }
    }
}
