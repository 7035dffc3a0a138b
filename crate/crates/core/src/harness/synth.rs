//! Synthetic tracklet generation.
//!
//! A rigid surface-point template of a chosen shape moves through a
//! cluttered scene under a constant-speed motion model. Ground-truth boxes
//! follow the rigid transform; frames that end up with too few object
//! points are filtered out, mirroring the usual sparse-tracklet cleanup.

use std::path::Path;

use rand::Rng;

use super::{Frame, TrackletSequence, MIN_FRAMES, MIN_POINTS_IN_GT};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box3D, PointCloud};
use crate::io;
use crate::rng::{rng_stream, RandomState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    BoxCar,
    LPed,
    Cross,
}

#[derive(Debug, Clone, Copy)]
pub struct Motion {
    pub speed: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Noise {
    pub jitter_sd: f64,
    pub dropout_p: f64,
    /// Background points per cubic meter of the scene envelope.
    pub clutter_rate: f64,
}

/// Class presets in the spirit of vehicle / pedestrian / cyclist: smaller
/// objects carry fewer points and move slower.
#[derive(Debug, Clone, Copy)]
pub struct ClassPreset {
    pub class_tag: &'static str,
    pub shape: ShapeKind,
    pub size: [f64; 3],
    pub surface_points: usize,
    pub speed_factor: f64,
}

pub fn class_preset(tag: &str) -> Result<ClassPreset> {
    match tag {
        "car" => Ok(ClassPreset {
            class_tag: "car",
            shape: ShapeKind::BoxCar,
            size: [4.0, 1.8, 1.5],
            surface_points: 320,
            speed_factor: 1.0,
        }),
        "pedestrian" => Ok(ClassPreset {
            class_tag: "pedestrian",
            shape: ShapeKind::LPed,
            size: [0.6, 0.6, 1.7],
            surface_points: 130,
            speed_factor: 0.5,
        }),
        "cyclist" => Ok(ClassPreset {
            class_tag: "cyclist",
            shape: ShapeKind::Cross,
            size: [1.7, 0.6, 1.7],
            surface_points: 200,
            speed_factor: 0.8,
        }),
        other => Err(Error::Config(format!("unknown class tag '{other}'"))),
    }
}

impl ShapeKind {
    pub fn preset(self) -> ClassPreset {
        match self {
            ShapeKind::BoxCar => class_preset("car").unwrap(),
            ShapeKind::LPed => class_preset("pedestrian").unwrap(),
            ShapeKind::Cross => class_preset("cyclist").unwrap(),
        }
    }
}

fn gaussian(rng: &mut RandomState) -> f64 {
    // Box-Muller; the first draw is enough.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform samples on the surface of an axis-aligned cuboid, bottom face
/// excluded (sensors rarely see it).
fn cuboid_surface(
    rng: &mut RandomState,
    center: [f64; 3],
    size: [f64; 3],
    n: usize,
) -> Vec<[f64; 3]> {
    let (sx, sy, sz) = (size[0], size[1], size[2]);
    // Faces: +x, -x, +y, -y, +z with their areas.
    let areas = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy];
    let total: f64 = areas.iter().sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        for (i, &a) in areas.iter().enumerate() {
            if pick < a {
                face = i;
                break;
            }
            pick -= a;
        }
        let u: f64 = rng.random_range(-0.5..0.5);
        let v: f64 = rng.random_range(-0.5..0.5);
        let p = match face {
            0 => [sx / 2.0, u * sy, v * sz],
            1 => [-sx / 2.0, u * sy, v * sz],
            2 => [u * sx, sy / 2.0, v * sz],
            3 => [u * sx, -sy / 2.0, v * sz],
            _ => [u * sx, v * sy, sz / 2.0],
        };
        out.push([p[0] + center[0], p[1] + center[1], p[2] + center[2]]);
    }
    out
}

/// Rigid template points in the object's canonical frame.
fn shape_template(kind: ShapeKind, rng: &mut RandomState) -> (Vec<[f64; 3]>, [f64; 3]) {
    let preset = kind.preset();
    let n = preset.surface_points;
    let pts = match kind {
        ShapeKind::BoxCar => cuboid_surface(rng, [0.0; 3], preset.size, n),
        ShapeKind::LPed => {
            // Vertical body with a forward foot block: an L silhouette.
            let mut pts = cuboid_surface(rng, [0.0, 0.0, 0.15], [0.45, 0.45, 1.35], n * 7 / 10);
            pts.extend(cuboid_surface(
                rng,
                [0.1, 0.0, -0.65],
                [0.38, 0.5, 0.38],
                n - n * 7 / 10,
            ));
            pts
        }
        ShapeKind::Cross => {
            // Long thin slab crossed by a tall narrow one.
            let mut pts = cuboid_surface(rng, [0.0, 0.0, -0.3], [1.65, 0.18, 0.95], n / 2);
            pts.extend(cuboid_surface(rng, [0.0, 0.0, 0.2], [0.4, 0.55, 1.25], n - n / 2));
            pts
        }
    };
    (pts, preset.size)
}

fn poisson_count(rng: &mut RandomState, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    // Knuth's method; lambdas here stay small enough.
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.random_range(0.0..1.0);
        if p <= l {
            return k;
        }
        k += 1;
        if k > 100_000 {
            return k;
        }
    }
}

/// Generate one tracklet: rigid motion, per-point jitter, dropout, uniform
/// clutter, then the sparse-frame filter. Errors when fewer than
/// [`MIN_FRAMES`] frames survive.
pub fn generate_tracklet(
    shape: ShapeKind,
    n_frames: usize,
    motion: Motion,
    noise: Noise,
    rng: &mut RandomState,
) -> Result<TrackletSequence> {
    if n_frames < MIN_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "generate_tracklet: need at least {MIN_FRAMES} frames"
        )));
    }
    let (template, size) = shape_template(shape, rng);
    let yaw0: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);

    // Trajectory first, so the clutter envelope covers all of it.
    let mut centers = Vec::with_capacity(n_frames);
    let mut yaws = Vec::with_capacity(n_frames);
    let mut center = [0.0f64; 3];
    let mut yaw = yaw0;
    for _ in 0..n_frames {
        centers.push(center);
        yaws.push(yaw);
        center[0] += motion.speed * yaw.cos();
        center[1] += motion.speed * yaw.sin();
        yaw = wrap_angle(yaw + motion.yaw_rate);
    }
    let margin = size[0].max(size[1]) / 2.0 + 4.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in &centers {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let bounds = (
        [lo[0] - margin, lo[1] - margin, -2.0],
        [hi[0] + margin, hi[1] + margin, 2.0],
    );
    let volume = (bounds.1[0] - bounds.0[0]) * (bounds.1[1] - bounds.0[1]) * 4.0;

    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let (s, c) = yaws[t].sin_cos();
        let mut scene: Vec<[f64; 3]> = Vec::with_capacity(template.len());
        for p in &template {
            if noise.dropout_p > 0.0 && rng.random_range(0.0..1.0) < noise.dropout_p {
                continue;
            }
            let mut q = [
                c * p[0] - s * p[1] + centers[t][0],
                s * p[0] + c * p[1] + centers[t][1],
                p[2] + centers[t][2],
            ];
            if noise.jitter_sd > 0.0 {
                for axis in &mut q {
                    *axis += noise.jitter_sd * gaussian(rng);
                }
            }
            scene.push(q);
        }
        let clutter = poisson_count(rng, noise.clutter_rate * volume);
        for _ in 0..clutter {
            scene.push([
                rng.random_range(bounds.0[0]..bounds.1[0]),
                rng.random_range(bounds.0[1]..bounds.1[1]),
                rng.random_range(bounds.0[2]..bounds.1[2]),
            ]);
        }
        let gt = Box3D::new(centers[t], size, yaws[t])?;
        let inside = scene.iter().filter(|&&p| gt.contains(p, 0.0)).count();
        if inside >= MIN_POINTS_IN_GT {
            frames.push(Frame {
                scene: PointCloud::new(scene),
                gt,
            });
        }
    }
    if frames.len() < MIN_FRAMES {
        return Err(Error::Generation(format!(
            "only {} of {} frames kept >= {} object points; lower dropout or jitter",
            frames.len(),
            n_frames,
            MIN_POINTS_IN_GT
        )));
    }
    Ok(TrackletSequence {
        frames,
        object_id: String::new(),
        class_tag: shape.preset().class_tag.to_string(),
    })
}

/// Build `count` tracklets with per-class presets, cycling through the
/// configured class mix. Each tracklet draws from its own rng stream.
pub fn make_dataset(
    cfg: &RunConfig,
    seed: u64,
    stream_base: u64,
    count: usize,
) -> Result<Vec<TrackletSequence>> {
    let classes: Vec<String> = cfg
        .class_mix
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if classes.is_empty() {
        return Err(Error::Config("class_mix is empty".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let preset = class_preset(&classes[i % classes.len()])?;
        let mut rng = rng_stream(seed, stream_base + i as u64);
        let motion = Motion {
            speed: cfg.speed * preset.speed_factor,
            yaw_rate: cfg.yaw_rate,
        };
        let noise = Noise {
            jitter_sd: cfg.jitter_sd,
            dropout_p: cfg.dropout_p,
            clutter_rate: cfg.clutter_rate,
        };
        let mut seq = generate_tracklet(
            preset.shape,
            cfg.frames_per_tracklet,
            motion,
            noise,
            &mut rng,
        )?;
        seq.object_id = format!("trk_{i:04}");
        out.push(seq);
    }
    Ok(out)
}

/// Write a dataset as per-tracklet manifests plus a top-level index.
pub fn save_dataset(dir: &Path, seqs: &[TrackletSequence]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for seq in seqs {
        let sub = dir.join(&seq.object_id);
        let mut frames = Vec::with_capacity(seq.frames.len());
        for (i, frame) in seq.frames.iter().enumerate() {
            let name = format!("frame_{i:04}.pcd");
            io::write_pcd(&sub.join(&name), &frame.scene)?;
            frames.push((name, frame.gt));
        }
        io::write_manifest(&sub.join("manifest.txt"), &frames)?;
        index.push_str(&format!(
            "{}/manifest.txt {} {}\n",
            seq.object_id, seq.object_id, seq.class_tag
        ));
    }
    std::fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<TrackletSequence>> {
    let index = std::fs::read_to_string(dir.join("index.txt"))?;
    let mut out = Vec::new();
    for (lineno, line) in index.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(Error::Parse {
                path: dir.join("index.txt").display().to_string(),
                line: lineno + 1,
                msg: format!("expected 3 fields, got {}", tokens.len()),
            });
        }
        let frames = io::read_manifest(&dir.join(tokens[0]))?;
        let mut seq = TrackletSequence {
            frames: Vec::with_capacity(frames.len()),
            object_id: tokens[1].to_string(),
            class_tag: tokens[2].to_string(),
        };
        for (pcd_path, gt) in frames {
            seq.frames.push(Frame {
                scene: io::read_pcd(&pcd_path)?,
                gt,
            });
        }
        out.push(seq);
    }
    Ok(out)
}
