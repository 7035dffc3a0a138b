//! Parameter checkpointing.
//!
//! A checkpoint is a pair of files: `<prefix>.manifest` with one
//! `name shape offset` line per parameter (shape as `d0xd1x...`, offset in
//! f32 elements), and `<prefix>.bin` holding the little-endian f32 values
//! concatenated in manifest order. Save followed by load is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Parameter;
use crate::error::{Error, Result};

fn shape_token(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(token: &str) -> Result<Vec<usize>> {
    token
        .split('x')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad shape token '{token}'")))
        })
        .collect()
}

pub fn save_checkpoint(params: &[&Parameter<f32>], prefix: &Path) -> Result<()> {
    super::check_unique_names(params)?;
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for p in params {
        manifest.push_str(&format!(
            "{} {} {}\n",
            p.name,
            shape_token(p.shape()),
            offset
        ));
        for &v in p.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.tensor.numel();
    }
    let mut f = fs::File::create(prefix.with_extension("manifest"))?;
    f.write_all(manifest.as_bytes())?;
    let mut f = fs::File::create(prefix.with_extension("bin"))?;
    f.write_all(&blob)?;
    Ok(())
}

/// Load values into an existing parameter set. Every listed parameter must
/// exist in the manifest with a matching shape.
pub fn load_checkpoint(params: &mut [&mut Parameter<f32>], prefix: &Path) -> Result<()> {
    let manifest_path = prefix.with_extension("manifest");
    let text = fs::read_to_string(&manifest_path)?;
    let blob = fs::read(prefix.with_extension("bin"))?;
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint("blob length not a multiple of 4".into()));
    }
    let mut entries = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (name, shape, offset) = match (it.next(), it.next(), it.next()) {
            (Some(n), Some(s), Some(o)) => (n, s, o),
            _ => {
                return Err(Error::Parse {
                    path: manifest_path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected 'name shape offset'".into(),
                })
            }
        };
        let shape = parse_shape(shape)?;
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset '{offset}'")))?;
        entries.insert(name.to_string(), (shape, offset));
    }
    for p in params.iter_mut() {
        let (shape, offset) = entries
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter '{}' not in manifest", p.name)))?;
        if shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}': shape {:?} in manifest, {:?} in model",
                p.name,
                shape,
                p.shape()
            )));
        }
        let n = p.tensor.numel();
        let start = offset * 4;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}': blob too short",
                p.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        p.set_data(data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        let prefix = dir.join("model");
        // Values chosen to exercise non-trivial bit patterns.
        let a = Parameter::new("net.w", &[2, 3], vec![0.1f32, -2.5, 1e-7, 3.3e8, -0.0, 7.25])
            .unwrap();
        let b = Parameter::new("net.b", &[3], vec![f32::MIN_POSITIVE, 1.0, -1.0]).unwrap();
        save_checkpoint(&[&a, &b], &prefix).unwrap();

        let mut a2 = Parameter::zeros("net.w", &[2, 3]);
        let mut b2 = Parameter::zeros("net.b", &[3]);
        load_checkpoint(&mut [&mut a2, &mut b2], &prefix).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // Saving the reloaded copy reproduces the files byte for byte.
        let prefix2 = dir.join("model2");
        save_checkpoint(&[&a2, &b2], &prefix2).unwrap();
        let orig = std::fs::read(prefix.with_extension("bin")).unwrap();
        let copy = std::fs::read(prefix2.with_extension("bin")).unwrap();
        assert_eq!(orig, copy);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_mismatch_{}", std::process::id()));
        let prefix = dir.join("model");
        let a = Parameter::new("w", &[2], vec![1.0f32, 2.0]).unwrap();
        save_checkpoint(&[&a], &prefix).unwrap();
        let mut wrong = Parameter::zeros("w", &[3]);
        assert!(load_checkpoint(&mut [&mut wrong], &prefix).is_err());
        std::fs::remove_dir_all(dir).ok();
    }
}
