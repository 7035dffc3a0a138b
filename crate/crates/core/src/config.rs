//! Run configuration: every hyperparameter of the pipeline, addressable
//! through a flat `key = value` text file. A run is reproducible from
//! `(config, seed)` alone.

use std::path::Path;

use crate::error::{Error, Result};

macro_rules! run_config {
    ($($name:ident : $ty:ty = $default:expr),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $(pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        impl RunConfig {
            /// Set one field from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = value.trim().parse::<$ty>().map_err(|e| {
                            Error::Config(format!(
                                "key '{key}': cannot parse '{value}': {e}"
                            ))
                        })?;
                        Ok(())
                    })*
                    _ => Err(Error::Config(format!("unknown config key '{key}'"))),
                }
            }

            pub fn keys() -> &'static [&'static str] {
                &[$(stringify!($name)),*]
            }

            /// Serialize as the same flat key=value format `parse` accepts.
            pub fn to_kv_string(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($name), self.$name));)*
                out
            }
        }
    };
}

run_config! {
    // Synthetic data.
    n_tracklets: usize = 8,
    frames_per_tracklet: usize = 20,
    class_mix: String = "car,pedestrian,cyclist".to_string(),
    speed: f64 = 0.2,
    yaw_rate: f64 = 0.02,
    jitter_sd: f64 = 0.01,
    dropout_p: f64 = 0.05,
    clutter_rate: f64 = 0.5,

    // Template / search construction.
    template_extend_ratio: f64 = 0.1,
    search_margin_m: f64 = 2.0,
    distort_range_m: f64 = 0.3,
    input_points_search: usize = 256,
    input_points_template: usize = 128,

    // Set-abstraction backbone.
    sa_points_search: String = "128,64,32".to_string(),
    sa_points_template: String = "64,32,16".to_string(),
    sa_radii: String = "0.3,0.5,0.7".to_string(),
    sa_widths: String = "32,64,128".to_string(),
    sa_max_neighbors: usize = 16,
    sa_mlp_depth: usize = 2,
    sampling_strategy: String = "ras_hybrid".to_string(),

    // Matching and heads.
    use_prt: bool = true,
    prt_blocks: usize = 1,
    ram_normalize: bool = true,
    ram_offset: bool = true,
    use_refine: bool = true,
    refine_radius: f64 = 1.0,
    refine_neighbors: usize = 16,
    refine_offset_dir: String = "subtract".to_string(),
    decode_rule: String = "argmax".to_string(),
    decode_topk: usize = 3,
    lambda_refine: f64 = 1.0,

    // Bird's-eye-view branch.
    bev_range_m: f64 = 4.8,
    bev_z_range_m: f64 = 1.5,
    bev_cell_m: f64 = 0.3,
    bev_pillar_width: usize = 32,
    bev_channels: String = "32,32,64".to_string(),
    bev_reduction: usize = 16,
    fusion_mode: String = "point_wise".to_string(),
    fusion_branch: String = "point".to_string(),
    bev_branch_mode: String = "fused".to_string(),
    alpha: f64 = 100.0,
    beta: f64 = 2.0,

    // Model selection and training.
    model: String = "pttr".to_string(),
    epochs: usize = 120,
    lr: f64 = 1e-3,
    lr_decay_every: usize = 40,
    lr_decay_factor: f64 = 5.0,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,

    // Execution.
    seed: u64 = 0,
    threads: usize = 0,
}

impl RunConfig {
    /// Parse a flat key=value file. `#` starts a comment; blank lines are
    /// skipped.
    pub fn from_kv_str(text: &str, path: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: lineno + 1,
                    msg: format!("expected 'key = value', got '{line}'"),
                });
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv_str(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    /// Parse a comma-separated list field.
    pub fn parse_list<T: std::str::FromStr>(field: &str, name: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        field
            .split(',')
            .map(|p| {
                p.trim().parse::<T>().map_err(|e| {
                    Error::Config(format!("{name}: cannot parse '{p}': {e}"))
                })
            })
            .collect()
    }

    /// Evaluation parallelism: explicit config, else `PTTRKIT_THREADS`,
    /// else the hardware count.
    pub fn effective_threads(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        if let Ok(v) = std::env::var("PTTRKIT_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    return n;
                }
            }
        }
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    }
}
