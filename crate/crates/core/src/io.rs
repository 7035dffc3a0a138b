//! On-disk formats: point-cloud text files, tracklet manifests, result
//! CSVs and threshold/fraction curve files.
//!
//! Floats are written in scientific notation with 9 significant digits;
//! writing a parsed value back reproduces the text exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom::{Box3D, PointCloud};

/// 9-significant-digit float formatting shared by all text formats.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

fn parse_f64(token: &str, path: &Path, line: usize) -> Result<f64> {
    token.parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line,
        msg: format!("bad float '{token}'"),
    })
}

/// Write `PCD <n> <c>` followed by one `x y z [f1..fc]` line per point.
pub fn write_pcd(path: &Path, cloud: &PointCloud) -> Result<()> {
    let cols = cloud.features().map(|f| f.cols).unwrap_or(0);
    let mut text = format!("PCD {} {}\n", cloud.len(), cols);
    for (i, p) in cloud.points().iter().enumerate() {
        write!(text, "{} {} {}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2])).unwrap();
        if let Some(f) = cloud.features() {
            for c in 0..f.cols {
                write!(text, " {}", fmt_f64(f.data[i * f.cols + c] as f64)).unwrap();
            }
        }
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_pcd(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let mut it = header.split_whitespace();
    let (magic, n, c) = match (it.next(), it.next(), it.next()) {
        (Some(m), Some(n), Some(c)) => (m, n, c),
        _ => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "expected 'PCD <n> <c>'".into(),
            })
        }
    };
    if magic != "PCD" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("bad magic '{magic}'"),
        });
    }
    let n: usize = n.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: format!("bad count '{n}'"),
    })?;
    let cols: usize = c.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: format!("bad feature count '{c}'"),
    })?;
    let mut points = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * cols);
    for _ in 0..n {
        let (lineno, line) = lines.next().ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg: "truncated point list".into(),
        })?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 + cols {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected {} values, got {}", 3 + cols, tokens.len()),
            });
        }
        points.push([
            parse_f64(tokens[0], path, lineno + 1)?,
            parse_f64(tokens[1], path, lineno + 1)?,
            parse_f64(tokens[2], path, lineno + 1)?,
        ]);
        for t in &tokens[3..] {
            feats.push(parse_f64(t, path, lineno + 1)? as f32);
        }
    }
    if cols == 0 {
        Ok(PointCloud::new(points))
    } else {
        PointCloud::with_features(points, cols, feats)
    }
}

/// One manifest line per frame: `frame_idx pcd_path cx cy cz w l h yaw`.
pub fn write_manifest(path: &Path, frames: &[(String, Box3D)]) -> Result<()> {
    let mut text = String::new();
    for (idx, (pcd_path, b)) in frames.iter().enumerate() {
        writeln!(
            text,
            "{idx} {pcd_path} {} {} {} {} {} {} {}",
            fmt_f64(b.center[0]),
            fmt_f64(b.center[1]),
            fmt_f64(b.center[2]),
            fmt_f64(b.size[0]),
            fmt_f64(b.size[1]),
            fmt_f64(b.size[2]),
            fmt_f64(b.yaw),
        )
        .unwrap();
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Frame paths (resolved relative to the manifest) and ground-truth boxes.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, Box3D)>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 9 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 9 fields, got {}", tokens.len()),
            });
        }
        let f = |i: usize| parse_f64(tokens[i], path, lineno + 1);
        let b = Box3D::new(
            [f(2)?, f(3)?, f(4)?],
            [f(5)?, f(6)?, f(7)?],
            f(8)?,
        )?;
        frames.push((base.join(tokens[1]), b));
    }
    Ok(frames)
}

/// A result table row: `variant,class,success,precision,frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub variant: String,
    pub class_tag: String,
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut text = String::from("variant,class,success,precision,frames\n");
    for r in rows {
        writeln!(
            text,
            "{},{},{:.4},{:.4},{}",
            r.variant, r.class_tag, r.success, r.precision, r.frames
        )
        .unwrap();
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Two-column threshold/fraction curve for external plotting.
pub fn write_curve(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut text = String::new();
    for (t, f) in points {
        writeln!(text, "{} {}", fmt_f64(*t), fmt_f64(*f)).unwrap();
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}
