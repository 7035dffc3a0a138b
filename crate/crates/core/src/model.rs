//! Assembled tracking networks.
//!
//! Both models consume a template cloud in its own box's canonical frame
//! and a search cloud in the reference box's canonical frame, and predict
//! a box in that reference frame. The point branch is shared: resample,
//! Siamese set-abstraction backbone, template/search matching, per-point
//! heads. The dual-branch model adds pillarization, BEV token matching,
//! a convolutional BEV backbone and gated cross-view fusion.

use std::path::Path;

use crate::attention::{prt_forward, PrtWeights, RamOptions};
use crate::bev::{
    bev_match, bev_to_point, dual_loss, encode_pillars, pillarize, point_to_bev, BevBackbone,
    BevGeometry, BevGrid, FuseMode, SffWeights,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{Box3D, PointCloud};
use crate::heads::{
    assign_targets, decode_box, total_loss, CoarseHead, DecodeRule, OffsetDirection, RefineHead,
    TrackPrediction,
};
use crate::rng::{rng_stream, RandomState};
use crate::sampling::{
    sample_random, Backbone, BackboneConfig, BackboneMode, BackboneOutput, LevelConfig, Strategy,
};
use crate::tensor::{load_checkpoint, save_checkpoint, Parameter, Real, Tensor};

const INIT_STREAM: u64 = 0x6d6f64; // model init rng stream tag

/// Which branch the decoded box comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeSource {
    Point,
    Bev,
}

/// Dual-branch operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Fused,
    PointOnly,
    BevOnly,
}

/// Where the gated fusion is applied (and therefore which branch emits the
/// final prediction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionBranch {
    Point,
    Bev,
}

/// Parsed, validated model settings derived from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub kind: ModelKind,
    pub input_points_search: usize,
    pub input_points_template: usize,
    pub sizes_search: Vec<usize>,
    pub sizes_template: Vec<usize>,
    pub backbone: BackboneConfig,
    pub strategy: Strategy,
    pub use_prt: bool,
    pub prt_blocks: usize,
    pub ram_options: RamOptions,
    pub use_refine: bool,
    pub refine_radius: f64,
    pub refine_neighbors: usize,
    pub offset_dir: OffsetDirection,
    pub decode: DecodeRule,
    pub lambda: f64,
    pub bev: Option<BevNetConfig>,
}

#[derive(Debug, Clone)]
pub struct BevNetConfig {
    pub geom: BevGeometry,
    pub pillar_width: usize,
    pub channels: Vec<usize>,
    pub reduction: usize,
    pub fuse_mode: FuseMode,
    pub fuse_branch: FusionBranch,
    pub branch_mode: BranchMode,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Pttr,
    PttrPp,
}

impl NetConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let kind = match cfg.model.as_str() {
            "pttr" => ModelKind::Pttr,
            "pttr++" | "pttrpp" => ModelKind::PttrPp,
            other => return Err(Error::Config(format!("unknown model '{other}'"))),
        };
        let radii: Vec<f64> = RunConfig::parse_list(&cfg.sa_radii, "sa_radii")?;
        let widths: Vec<usize> = RunConfig::parse_list(&cfg.sa_widths, "sa_widths")?;
        let sizes_search: Vec<usize> = RunConfig::parse_list(&cfg.sa_points_search, "sa_points_search")?;
        let sizes_template: Vec<usize> =
            RunConfig::parse_list(&cfg.sa_points_template, "sa_points_template")?;
        if radii.len() != widths.len()
            || sizes_search.len() != radii.len()
            || sizes_template.len() != radii.len()
        {
            return Err(Error::Config(
                "sa_radii, sa_widths, sa_points_search and sa_points_template must have equal length"
                    .into(),
            ));
        }
        let backbone = BackboneConfig {
            levels: radii
                .iter()
                .zip(&widths)
                .map(|(&radius, &width)| LevelConfig {
                    radius,
                    max_neighbors: cfg.sa_max_neighbors,
                    width,
                })
                .collect(),
            mlp_depth: cfg.sa_mlp_depth,
        };
        let strategy = match cfg.sampling_strategy.as_str() {
            "random" => Strategy::Random,
            "dfps" => Strategy::DFps,
            "ffps" => Strategy::FFps,
            "ras" => Strategy::Ras,
            "ras_hybrid" => Strategy::RasHybrid,
            other => return Err(Error::Config(format!("unknown sampling strategy '{other}'"))),
        };
        let offset_dir = match cfg.refine_offset_dir.as_str() {
            "subtract" => OffsetDirection::Subtract,
            "add" => OffsetDirection::Add,
            other => return Err(Error::Config(format!("unknown offset direction '{other}'"))),
        };
        let decode = match cfg.decode_rule.as_str() {
            "argmax" => DecodeRule::Argmax,
            "topk" => DecodeRule::TopKWeighted { k: cfg.decode_topk },
            other => return Err(Error::Config(format!("unknown decode rule '{other}'"))),
        };
        let bev = if kind == ModelKind::PttrPp {
            let r = cfg.bev_range_m;
            let z = cfg.bev_z_range_m;
            let geom = BevGeometry::from_range((-r, r), (-r, r), (-z, z), cfg.bev_cell_m)?;
            let channels: Vec<usize> = RunConfig::parse_list(&cfg.bev_channels, "bev_channels")?;
            if channels.is_empty() {
                return Err(Error::Config("bev_channels is empty".into()));
            }
            let fuse_mode = match cfg.fusion_mode.as_str() {
                "addition" => FuseMode::Addition,
                "global" => FuseMode::Global,
                "point_wise" => FuseMode::PointWise,
                other => return Err(Error::Config(format!("unknown fusion mode '{other}'"))),
            };
            let fuse_branch = match cfg.fusion_branch.as_str() {
                "point" => FusionBranch::Point,
                "bev" => FusionBranch::Bev,
                other => return Err(Error::Config(format!("unknown fusion branch '{other}'"))),
            };
            let branch_mode = match cfg.bev_branch_mode.as_str() {
                "fused" => BranchMode::Fused,
                "point_only" => BranchMode::PointOnly,
                "bev_only" => BranchMode::BevOnly,
                other => return Err(Error::Config(format!("unknown branch mode '{other}'"))),
            };
            if cfg.bev_pillar_width % 4 != 0 {
                return Err(Error::Config(
                    "bev_pillar_width must be divisible by 4 (positional embedding)".into(),
                ));
            }
            if branch_mode == BranchMode::Fused {
                let point_width = *widths.last().unwrap();
                let bev_width = *channels.last().unwrap();
                if point_width != bev_width {
                    return Err(Error::Config(format!(
                        "fusion needs matching widths: final sa width {point_width} vs final bev channel {bev_width} \
                         (align sa_widths and bev_channels)"
                    )));
                }
                if fuse_mode != FuseMode::Addition && point_width % cfg.bev_reduction != 0 {
                    return Err(Error::Config(format!(
                        "width {point_width} not divisible by bev_reduction {}",
                        cfg.bev_reduction
                    )));
                }
            }
            Some(BevNetConfig {
                geom,
                pillar_width: cfg.bev_pillar_width,
                channels,
                reduction: cfg.bev_reduction,
                fuse_mode,
                fuse_branch,
                branch_mode,
                alpha: cfg.alpha,
                beta: cfg.beta,
            })
        } else {
            None
        };
        Ok(NetConfig {
            kind,
            input_points_search: cfg.input_points_search,
            input_points_template: cfg.input_points_template,
            sizes_search,
            sizes_template,
            backbone,
            strategy,
            use_prt: cfg.use_prt,
            prt_blocks: cfg.prt_blocks.max(1),
            ram_options: RamOptions {
                normalize: cfg.ram_normalize,
                offset: cfg.ram_offset,
            },
            use_refine: cfg.use_refine,
            refine_radius: cfg.refine_radius,
            refine_neighbors: cfg.refine_neighbors,
            offset_dir,
            decode,
            lambda: cfg.lambda_refine,
            bev,
        })
    }

    fn feature_width(&self) -> usize {
        self.backbone.levels.last().expect("levels").width
    }
}

/// Feature rows with the carrier coordinates appended: prediction heads
/// see `[features | x, y, z]` so per-point offsets stay anchored.
fn with_coords<T: Real>(features: &Tensor<T>, xyz: &[[f64; 3]]) -> Result<Tensor<T>> {
    let coords: Vec<T> = xyz
        .iter()
        .flat_map(|p| p.iter().map(|&v| T::from_f64(v)))
        .collect();
    let coords = Tensor::from_vec(&[xyz.len(), 3], coords)?;
    Tensor::concat_last_dim(&[features, &coords])
}

/// Template/search matcher: relation transformer blocks, or the plain
/// cosine-similarity baseline with no learned parameters.
pub enum Matcher<T: Real = f32> {
    Prt(Vec<PrtWeights<T>>),
    Cosine,
}

pub struct PointBranch<T: Real = f32> {
    pub backbone: Backbone<T>,
    pub matcher: Matcher<T>,
    pub coarse: CoarseHead<T>,
}

struct PointForward<T: Real> {
    matched: Tensor<T>,
    search_out: BackboneOutput<T>,
    template_out: BackboneOutput<T>,
}

impl<T: Real> PointBranch<T> {
    fn new(cfg: &NetConfig, rng: &mut RandomState) -> Result<Self> {
        let width = cfg.feature_width();
        let matcher = if cfg.use_prt {
            let blocks = (0..cfg.prt_blocks)
                .map(|i| PrtWeights::with_options(&format!("point.prt{i}"), width, cfg.ram_options, rng))
                .collect::<Result<Vec<_>>>()?;
            Matcher::Prt(blocks)
        } else {
            Matcher::Cosine
        };
        Ok(PointBranch {
            backbone: Backbone::new("point.backbone", cfg.backbone.clone(), rng)?,
            matcher,
            coarse: CoarseHead::new("point.coarse", width + 3, rng)?,
        })
    }

    fn forward(
        &self,
        cfg: &NetConfig,
        template: &PointCloud,
        search: &PointCloud,
        rng: &mut RandomState,
    ) -> Result<PointForward<T>> {
        if template.is_empty() {
            return Err(Error::EmptyInput("point branch: empty template".into()));
        }
        if search.is_empty() {
            return Err(Error::EmptyInput("point branch: empty search".into()));
        }
        let t_idx = sample_random(template.len(), cfg.input_points_template, rng)?;
        let s_idx = sample_random(search.len(), cfg.input_points_search, rng)?;
        let t_xyz: Vec<[f64; 3]> = t_idx.indices.iter().map(|&i| template.points()[i]).collect();
        let s_xyz: Vec<[f64; 3]> = s_idx.indices.iter().map(|&i| search.points()[i]).collect();

        let template_out =
            self.backbone
                .forward(&t_xyz, &cfg.sizes_template, BackboneMode::Template, rng)?;
        let search_out = self.backbone.forward(
            &s_xyz,
            &cfg.sizes_search,
            BackboneMode::Search {
                template: Some(&template_out),
                strategy: cfg.strategy,
            },
            rng,
        )?;

        let matched = match &self.matcher {
            Matcher::Prt(blocks) => {
                let mut s = search_out.final_features().clone();
                let mut t = template_out.final_features().clone();
                for block in blocks {
                    let out = prt_forward(&s, &t, block)?;
                    s = out.matched;
                    t = out.enhanced_template;
                }
                s
            }
            Matcher::Cosine => {
                // Normalized dot-product matching: no offset, no learned
                // projection.
                let eps = T::from_f64(1e-12);
                let s = search_out.final_features().l2_normalize_rows(eps)?;
                let t = template_out.final_features().l2_normalize_rows(eps)?;
                s.matmul_nt(&t)?
                    .softmax_rows()?
                    .matmul(template_out.final_features())?
            }
        };
        Ok(PointForward {
            matched,
            search_out,
            template_out,
        })
    }

    fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.backbone.params();
        if let Matcher::Prt(blocks) = &self.matcher {
            for b in blocks {
                p.extend(b.params());
            }
        }
        p.extend(self.coarse.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.backbone.params_mut();
        if let Matcher::Prt(blocks) = &mut self.matcher {
            for b in blocks {
                p.extend(b.params_mut());
            }
        }
        p.extend(self.coarse.params_mut());
        p
    }
}

pub struct PttrNet<T: Real = f32> {
    pub point: PointBranch<T>,
    pub refine: Option<RefineHead<T>>,
}

pub struct PttrPpNet<T: Real = f32> {
    pub point: PointBranch<T>,
    pub pillar_encoder: Parameter<T>,
    pub bev_prt: PrtWeights<T>,
    pub bev_backbone: BevBackbone<T>,
    pub bev_head: CoarseHead<T>,
    pub sff: Option<SffWeights<T>>,
}

/// One forward pass's predictions, in the reference box's canonical frame.
pub struct PipelineOutput<T: Real = f32> {
    pub point_pred: Option<TrackPrediction<T>>,
    pub refined: Option<TrackPrediction<T>>,
    pub bev_pred: Option<TrackPrediction<T>>,
    pub search_xyz: Vec<[f64; 3]>,
    pub bev_cell_xyz: Vec<[f64; 3]>,
    pub decode_from: DecodeSource,
}

pub enum TrackNet<T: Real = f32> {
    Pttr(PttrNet<T>),
    PttrPp(PttrPpNet<T>),
}

impl<T: Real> TrackNet<T> {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_stream(seed, INIT_STREAM);
        let point = PointBranch::new(cfg, &mut rng)?;
        match cfg.kind {
            ModelKind::Pttr => {
                let refine = if cfg.use_refine {
                    Some(RefineHead::new(
                        "refine",
                        cfg.feature_width(),
                        cfg.feature_width() + 3,
                        cfg.refine_radius,
                        cfg.refine_neighbors,
                        cfg.offset_dir,
                        &mut rng,
                    )?)
                } else {
                    None
                };
                Ok(TrackNet::Pttr(PttrNet { point, refine }))
            }
            ModelKind::PttrPp => {
                let bev = cfg.bev.as_ref().expect("pttr++ needs bev config");
                let limit = (6.0 / (11 + bev.pillar_width) as f64).sqrt();
                let data = (0..11 * bev.pillar_width)
                    .map(|_| {
                        use rand::Rng;
                        T::from_f64(rng.random_range(-limit..limit))
                    })
                    .collect();
                let pillar_encoder =
                    Parameter::new("bev.pillar_enc", &[11, bev.pillar_width], data)?;
                let bev_prt = PrtWeights::new("bev.prt", bev.pillar_width, &mut rng)?;
                let bev_backbone =
                    BevBackbone::new("bev.backbone", bev.pillar_width, &bev.channels, &mut rng)?;
                let bev_head = CoarseHead::new("bev.head", bev.channels.last().unwrap() + 3, &mut rng)?;
                let sff = if bev.fuse_mode == FuseMode::Addition {
                    None
                } else {
                    Some(SffWeights::new(
                        "fuse.sff",
                        *bev.channels.last().unwrap(),
                        bev.reduction,
                        &mut rng,
                    )?)
                };
                Ok(TrackNet::PttrPp(PttrPpNet {
                    point,
                    pillar_encoder,
                    bev_prt,
                    bev_backbone,
                    bev_head,
                    sff,
                }))
            }
        }
    }

    /// Run the pipeline. `template` in its box's canonical frame, `search`
    /// in the reference box's canonical frame, `box_size` the tracked
    /// extents (attached to pillar features).
    pub fn forward(
        &self,
        cfg: &NetConfig,
        template: &PointCloud,
        search: &PointCloud,
        box_size: [f64; 3],
        rng: &mut RandomState,
    ) -> Result<PipelineOutput<T>> {
        match self {
            TrackNet::Pttr(net) => {
                let fwd = net.point.forward(cfg, template, search, rng)?;
                let matched_aug = with_coords(&fwd.matched, fwd.search_out.final_xyz())?;
                let coarse = net.point.coarse.forward(&matched_aug)?;
                let refined = match &net.refine {
                    Some(refine) => Some(refine.forward(
                        &coarse,
                        fwd.search_out.final_xyz(),
                        fwd.search_out.final_xyz(),
                        fwd.search_out.final_features(),
                        fwd.template_out.final_xyz(),
                        fwd.template_out.final_features(),
                        &matched_aug,
                    )?),
                    None => None,
                };
                Ok(PipelineOutput {
                    point_pred: Some(coarse),
                    refined,
                    bev_pred: None,
                    search_xyz: fwd.search_out.final_xyz().to_vec(),
                    bev_cell_xyz: Vec::new(),
                    decode_from: DecodeSource::Point,
                })
            }
            TrackNet::PttrPp(net) => {
                let bev_cfg = cfg.bev.as_ref().expect("pttr++ needs bev config");
                if bev_cfg.branch_mode == BranchMode::BevOnly {
                    let (bev_grid, cell_xyz) =
                        net.bev_branch(bev_cfg, template, search, box_size)?;
                    let cells_aug = with_coords(&bev_grid.flat()?, &cell_xyz)?;
                    let bev_pred = net.bev_head.forward(&cells_aug)?;
                    return Ok(PipelineOutput {
                        point_pred: None,
                        refined: None,
                        bev_pred: Some(bev_pred),
                        search_xyz: Vec::new(),
                        bev_cell_xyz: cell_xyz,
                        decode_from: DecodeSource::Bev,
                    });
                }

                let fwd = net.point.forward(cfg, template, search, rng)?;
                if bev_cfg.branch_mode == BranchMode::PointOnly {
                    let matched_aug = with_coords(&fwd.matched, fwd.search_out.final_xyz())?;
                    let pred = net.point.coarse.forward(&matched_aug)?;
                    return Ok(PipelineOutput {
                        point_pred: Some(pred),
                        refined: None,
                        bev_pred: None,
                        search_xyz: fwd.search_out.final_xyz().to_vec(),
                        bev_cell_xyz: Vec::new(),
                        decode_from: DecodeSource::Point,
                    });
                }

                let (bev_grid, cell_xyz) = net.bev_branch(bev_cfg, template, search, box_size)?;
                match bev_cfg.fuse_branch {
                    FusionBranch::Point => {
                        let resampled = bev_to_point(&bev_grid, fwd.search_out.final_xyz())?;
                        let fused = crate::bev::selective_fuse(
                            &fwd.matched,
                            &resampled,
                            bev_cfg.fuse_mode,
                            net.sff.as_ref(),
                        )?;
                        let fused_aug = with_coords(&fused, fwd.search_out.final_xyz())?;
                        let point_pred = net.point.coarse.forward(&fused_aug)?;
                        let cells_aug = with_coords(&bev_grid.flat()?, &cell_xyz)?;
                        let bev_pred = net.bev_head.forward(&cells_aug)?;
                        Ok(PipelineOutput {
                            point_pred: Some(point_pred),
                            refined: None,
                            bev_pred: Some(bev_pred),
                            search_xyz: fwd.search_out.final_xyz().to_vec(),
                            bev_cell_xyz: cell_xyz,
                            decode_from: DecodeSource::Point,
                        })
                    }
                    FusionBranch::Bev => {
                        let projected =
                            point_to_bev(&fwd.matched, fwd.search_out.final_xyz(), &bev_grid.geom)?;
                        let fused = crate::bev::selective_fuse(
                            &bev_grid.flat()?,
                            &projected.flat()?,
                            bev_cfg.fuse_mode,
                            net.sff.as_ref(),
                        )?;
                        let fused_aug = with_coords(&fused, &cell_xyz)?;
                        let bev_pred = net.bev_head.forward(&fused_aug)?;
                        let matched_aug = with_coords(&fwd.matched, fwd.search_out.final_xyz())?;
                        let point_pred = net.point.coarse.forward(&matched_aug)?;
                        Ok(PipelineOutput {
                            point_pred: Some(point_pred),
                            refined: None,
                            bev_pred: Some(bev_pred),
                            search_xyz: fwd.search_out.final_xyz().to_vec(),
                            bev_cell_xyz: cell_xyz,
                            decode_from: DecodeSource::Bev,
                        })
                    }
                }
            }
        }
    }

    /// Collapse a forward pass into a canonical-frame box.
    pub fn decode(&self, cfg: &NetConfig, out: &PipelineOutput<T>, ref_size: [f64; 3]) -> Result<Box3D> {
        let ref_box = Box3D::new([0.0; 3], ref_size, 0.0)?;
        match out.decode_from {
            DecodeSource::Point => {
                let pred = out
                    .refined
                    .as_ref()
                    .or(out.point_pred.as_ref())
                    .ok_or_else(|| Error::Validation("no point prediction to decode".into()))?;
                decode_box(pred, &out.search_xyz, &ref_box, cfg.decode)
            }
            DecodeSource::Bev => {
                let pred = out
                    .bev_pred
                    .as_ref()
                    .ok_or_else(|| Error::Validation("no bev prediction to decode".into()))?;
                decode_box(pred, &out.bev_cell_xyz, &ref_box, cfg.decode)
            }
        }
    }

    /// Training loss against a canonical-frame ground-truth box.
    pub fn loss(
        &self,
        cfg: &NetConfig,
        out: &PipelineOutput<T>,
        gt_canonical: &Box3D,
        ref_size: [f64; 3],
    ) -> Result<Tensor<T>> {
        let ref_box = Box3D::new([0.0; 3], ref_size, 0.0)?;
        match self {
            TrackNet::Pttr(_) => {
                let tgt = assign_targets(&out.search_xyz, gt_canonical, &ref_box)?;
                total_loss(
                    out.point_pred.as_ref().expect("pttr has point prediction"),
                    out.refined.as_ref(),
                    &tgt,
                    cfg.lambda,
                )
            }
            TrackNet::PttrPp(_) => {
                let bev_cfg = cfg.bev.as_ref().expect("pttr++ needs bev config");
                match (out.point_pred.as_ref(), out.bev_pred.as_ref()) {
                    (Some(p), Some(b)) => {
                        let tgt_p = assign_targets(&out.search_xyz, gt_canonical, &ref_box)?;
                        let tgt_b = assign_targets(&out.bev_cell_xyz, gt_canonical, &ref_box)?;
                        dual_loss(p, b, &tgt_p, &tgt_b, bev_cfg.alpha, bev_cfg.beta)
                    }
                    (Some(p), None) => {
                        let tgt = assign_targets(&out.search_xyz, gt_canonical, &ref_box)?;
                        let cls = p.cls.bce_with_logits(&tgt.cls_target)?;
                        let reg = p.reg.mse_masked(&tgt.reg_target, Some(&tgt.reg_mask))?;
                        cls.add(&reg.scale(T::from_f64(bev_cfg.alpha)))
                    }
                    (None, Some(b)) => {
                        let tgt = assign_targets(&out.bev_cell_xyz, gt_canonical, &ref_box)?;
                        let cls = b.cls.bce_with_logits(&tgt.cls_target)?;
                        let reg = b.reg.mse_masked(&tgt.reg_target, Some(&tgt.reg_mask))?;
                        cls.add(&reg.scale(T::from_f64(bev_cfg.beta)))
                    }
                    (None, None) => Err(Error::Validation("forward produced no predictions".into())),
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            TrackNet::Pttr(net) => {
                let mut p = net.point.params();
                if let Some(r) = &net.refine {
                    p.extend(r.params());
                }
                p
            }
            TrackNet::PttrPp(net) => {
                let mut p = net.point.params();
                p.push(&net.pillar_encoder);
                p.extend(net.bev_prt.params());
                p.extend(net.bev_backbone.params());
                p.extend(net.bev_head.params());
                if let Some(s) = &net.sff {
                    p.extend(s.params());
                }
                p
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            TrackNet::Pttr(net) => {
                let mut p = net.point.params_mut();
                if let Some(r) = &mut net.refine {
                    p.extend(r.params_mut());
                }
                p
            }
            TrackNet::PttrPp(net) => {
                let mut p = net.point.params_mut();
                p.push(&mut net.pillar_encoder);
                p.extend(net.bev_prt.params_mut());
                p.extend(net.bev_backbone.params_mut());
                p.extend(net.bev_head.params_mut());
                if let Some(s) = &mut net.sff {
                    p.extend(s.params_mut());
                }
                p
            }
        }
    }
}

impl<T: Real> PttrPpNet<T> {
    /// Pillarize both clouds, match the grids, run the conv backbone.
    /// Returns the deep BEV grid and its cell centers as pseudo points.
    fn bev_branch(
        &self,
        bev_cfg: &BevNetConfig,
        template: &PointCloud,
        search: &PointCloud,
        box_size: [f64; 3],
    ) -> Result<(BevGrid<T>, Vec<[f64; 3]>)> {
        let pillars_t = pillarize(template.points(), &bev_cfg.geom, box_size)?;
        let pillars_s = pillarize(search.points(), &bev_cfg.geom, box_size)?;
        let grid_t = encode_pillars(&pillars_t, &self.pillar_encoder)?;
        let grid_s = encode_pillars(&pillars_s, &self.pillar_encoder)?;
        let matched = bev_match(&grid_s, &grid_t, &self.bev_prt)?;
        let deep = self.bev_backbone.forward(&matched)?;
        let mut cell_xyz = Vec::with_capacity(deep.geom.h * deep.geom.w);
        for row in 0..deep.geom.h {
            for col in 0..deep.geom.w {
                let (x, y) = deep.geom.cell_center(row, col);
                cell_xyz.push([x, y, 0.0]);
            }
        }
        Ok((deep, cell_xyz))
    }
}

impl TrackNet<f32> {
    pub fn save(&self, prefix: &Path) -> Result<()> {
        save_checkpoint(&self.params(), prefix)
    }

    pub fn load(&mut self, prefix: &Path) -> Result<()> {
        load_checkpoint(&mut self.params_mut(), prefix)
    }
}

/// Copy values for every parameter whose name exists in `src`.
pub fn copy_matching_params<T: Real>(
    src: &[&Parameter<T>],
    dst: &mut [&mut Parameter<T>],
) -> Result<usize> {
    let by_name: std::collections::HashMap<&str, &&Parameter<T>> =
        src.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut copied = 0;
    for d in dst.iter_mut() {
        if let Some(s) = by_name.get(d.name.as_str()) {
            if s.shape() != d.shape() {
                return Err(Error::Validation(format!(
                    "parameter '{}': shape {:?} vs {:?}",
                    d.name,
                    s.shape(),
                    d.shape()
                )));
            }
            d.set_data(s.data().to_vec())?;
            copied += 1;
        }
    }
    Ok(copied)
}

/// Small-model config used by unit tests across the crate.
#[cfg(test)]
pub(crate) mod tests_support {
    use crate::config::RunConfig;

    pub(crate) fn fast_config(model: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("model", model),
            ("input_points_search", "96"),
            ("input_points_template", "48"),
            ("sa_points_search", "48,24,12"),
            ("sa_points_template", "24,12,6"),
            ("sa_radii", "0.3,0.5,0.7"),
            ("sa_widths", "16,16,16"),
            ("sa_max_neighbors", "8"),
            ("bev_range_m", "2.4"),
            ("bev_cell_m", "0.3"),
            ("bev_pillar_width", "8"),
            ("bev_channels", "8,8,16"),
            ("bev_reduction", "4"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::fast_config;
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn cloud(n: usize, seed: u64, spread: f64) -> PointCloud {
        let mut rng = rng_from_seed(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-spread..spread),
                        rng.random_range(-spread..spread),
                        rng.random_range(-0.5..0.5),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn pttr_forward_decode_and_loss() {
        let cfg = NetConfig::from_run(&fast_config("pttr")).unwrap();
        let net = TrackNet::<f32>::new(&cfg, 3).unwrap();
        let template = cloud(60, 1, 0.8);
        let search = cloud(200, 2, 2.0);
        let mut rng = rng_from_seed(7);
        let out = net.forward(&cfg, &template, &search, [1.6, 0.8, 1.0], &mut rng).unwrap();
        assert_eq!(out.search_xyz.len(), 12);
        assert!(out.refined.is_some());
        let b = net.decode(&cfg, &out, [1.6, 0.8, 1.0]).unwrap();
        assert_eq!(b.size, [1.6, 0.8, 1.0]);
        let gt = Box3D::new([0.2, 0.1, 0.0], [1.6, 0.8, 1.0], 0.05).unwrap();
        let loss = net.loss(&cfg, &out, &gt, [1.6, 0.8, 1.0]).unwrap();
        loss.ensure_finite("pttr loss").unwrap();
    }

    #[test]
    fn pttr_pp_forward_produces_both_branches() {
        let cfg = NetConfig::from_run(&fast_config("pttr++")).unwrap();
        let net = TrackNet::<f32>::new(&cfg, 4).unwrap();
        let template = cloud(60, 3, 0.8);
        let search = cloud(200, 4, 2.0);
        let mut rng = rng_from_seed(8);
        let out = net.forward(&cfg, &template, &search, [1.6, 0.8, 1.0], &mut rng).unwrap();
        assert!(out.point_pred.is_some());
        assert!(out.bev_pred.is_some());
        assert_eq!(out.bev_cell_xyz.len(), 2 * 2); // 16-cell grid / 8
        let gt = Box3D::new([0.2, 0.1, 0.0], [1.6, 0.8, 1.0], 0.05).unwrap();
        let loss = net.loss(&cfg, &out, &gt, [1.6, 0.8, 1.0]).unwrap();
        loss.ensure_finite("pttr++ loss").unwrap();
        let grads = loss.backward().unwrap();
        for p in net.params() {
            assert!(grads.param(p).is_some(), "no grad for {}", p.name);
        }
    }

    #[test]
    fn mismatched_fusion_widths_rejected() {
        let mut cfg = fast_config("pttr++");
        cfg.set("bev_channels", "8,8,8").unwrap();
        assert!(NetConfig::from_run(&cfg).is_err());
    }

    #[test]
    fn scene_translation_moves_decoded_box_exactly() {
        // The pipeline operates in the reference frame, so translating the
        // whole scene together with the reference box is a no-op there.
        let cfg = NetConfig::from_run(&fast_config("pttr")).unwrap();
        let net = TrackNet::<f32>::new(&cfg, 5).unwrap();
        let template = cloud(50, 9, 0.8);
        let search_world = cloud(150, 10, 2.0);
        let shift = [5.0, -3.0, 1.0];
        let ref_box = Box3D::new([0.0; 3], [1.5, 1.0, 1.0], 0.3).unwrap();
        let ref_shifted = Box3D {
            center: shift,
            ..ref_box
        };
        let moved = PointCloud::new(
            search_world
                .points()
                .iter()
                .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                .collect(),
        );
        let canon_a = search_world.to_canonical(&ref_box);
        let canon_b = moved.to_canonical(&ref_shifted);
        let out_a = net
            .forward(&cfg, &template, &canon_a, ref_box.size, &mut rng_from_seed(11))
            .unwrap();
        let out_b = net
            .forward(&cfg, &template, &canon_b, ref_box.size, &mut rng_from_seed(11))
            .unwrap();
        let box_a = net.decode(&cfg, &out_a, ref_box.size).unwrap();
        let box_b = net.decode(&cfg, &out_b, ref_box.size).unwrap();
        let world_a = ref_box.to_world(box_a.center);
        let world_b = ref_shifted.to_world(box_b.center);
        for a in 0..3 {
            assert!(
                (world_b[a] - world_a[a] - shift[a]).abs() < 1e-9,
                "axis {a}: {} vs {}",
                world_a[a],
                world_b[a]
            );
        }
    }

    #[test]
    fn saturated_gate_reduces_to_point_branch() {
        // With the fusion gate pinned at w = 1, the dual-branch model's
        // point prediction equals the single-branch model's, value for
        // value, given shared point weights and the same seed.
        let pp_cfg = NetConfig::from_run(&fast_config("pttr++")).unwrap();
        let mut pp = TrackNet::<f32>::new(&pp_cfg, 6).unwrap();
        if let TrackNet::PttrPp(net) = &mut pp {
            let sff = net.sff.as_mut().unwrap();
            for p in sff.params_mut() {
                let n = p.tensor.numel();
                let v = if p.name.ends_with(".b") && p.name.contains("excite") {
                    1e4
                } else {
                    0.0
                };
                p.set_data(vec![v; n]).unwrap();
            }
        }
        let mut run = fast_config("pttr");
        run.set("use_refine", "false").unwrap();
        let p_cfg = NetConfig::from_run(&run).unwrap();
        let mut pttr = TrackNet::<f32>::new(&p_cfg, 999).unwrap();
        let copied = copy_matching_params(&pp.params(), &mut pttr.params_mut()).unwrap();
        assert!(copied > 0);
        assert_eq!(copied, pttr.params().len(), "some point weights missing");

        let template = cloud(60, 12, 0.8);
        let search = cloud(180, 13, 2.0);
        let out_pp = pp
            .forward(&pp_cfg, &template, &search, [1.0, 1.0, 1.0], &mut rng_from_seed(21))
            .unwrap();
        let out_p = pttr
            .forward(&p_cfg, &template, &search, [1.0, 1.0, 1.0], &mut rng_from_seed(21))
            .unwrap();
        let a = out_pp.point_pred.as_ref().unwrap();
        let b = out_p.point_pred.as_ref().unwrap();
        assert_eq!(a.cls.data(), b.cls.data(), "cls logits differ");
        assert_eq!(a.reg.data(), b.reg.data(), "reg offsets differ");
    }

    #[test]
    fn checkpoint_roundtrip_restores_forward() {
        let cfg = NetConfig::from_run(&fast_config("pttr")).unwrap();
        let net = TrackNet::<f32>::new(&cfg, 7).unwrap();
        let dir = std::env::temp_dir().join(format!("model_ckpt_{}", std::process::id()));
        let prefix = dir.join("net");
        net.save(&prefix).unwrap();
        let mut other = TrackNet::<f32>::new(&cfg, 1234).unwrap();
        other.load(&prefix).unwrap();
        let template = cloud(40, 14, 0.8);
        let search = cloud(120, 15, 2.0);
        let a = net
            .forward(&cfg, &template, &search, [1.0; 3], &mut rng_from_seed(3))
            .unwrap();
        let b = other
            .forward(&cfg, &template, &search, [1.0; 3], &mut rng_from_seed(3))
            .unwrap();
        assert_eq!(
            a.point_pred.unwrap().cls.data(),
            b.point_pred.unwrap().cls.data()
        );
        std::fs::remove_dir_all(dir).ok();
    }
}
