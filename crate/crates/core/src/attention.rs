//! Template/search feature matching.
//!
//! The attention block projects query, key and value, L2-normalizes the
//! projected query and key rows so the attention logits are cosine
//! similarities, applies row softmax, and subtracts the attention product
//! from the raw query before a linear+ReLU output projection. The
//! transformer runs one weight-shared self-attention pass over each cloud
//! and then cross-attends search against template.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::RandomState;
use crate::tensor::{Parameter, Real, Tensor};

const NORM_EPS: f64 = 1e-12;

/// Ablation switches for the attention block. Both on by default; with
/// normalization off the logits fall back to scaled dot products, with the
/// offset off the output projection sees the attention product directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RamOptions {
    pub normalize: bool,
    pub offset: bool,
}

impl Default for RamOptions {
    fn default() -> Self {
        RamOptions {
            normalize: true,
            offset: true,
        }
    }
}

/// Square projections plus the output linear+ReLU.
pub struct RamWeights<T: Real = f32> {
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
    pub out: Linear<T>,
    pub width: usize,
    pub options: RamOptions,
}

impl<T: Real> RamWeights<T> {
    pub fn new(name: &str, width: usize, rng: &mut RandomState) -> Result<Self> {
        Self::with_options(name, width, RamOptions::default(), rng)
    }

    pub fn with_options(
        name: &str,
        width: usize,
        options: RamOptions,
        rng: &mut RandomState,
    ) -> Result<Self> {
        let proj = |n: String, rng: &mut RandomState| -> Result<Parameter<T>> {
            let limit = (3.0 / width as f64).sqrt();
            let data = (0..width * width)
                .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                .collect();
            Parameter::new(n, &[width, width], data)
        };
        Ok(RamWeights {
            wq: proj(format!("{name}.wq"), rng)?,
            wk: proj(format!("{name}.wk"), rng)?,
            wv: proj(format!("{name}.wv"), rng)?,
            out: Linear::new(&format!("{name}.out"), width, width, true, rng)?,
            width,
            options,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = vec![&self.wq, &self.wk, &self.wv];
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = vec![&mut self.wq, &mut self.wk, &mut self.wv];
        p.extend(self.out.params_mut());
        p
    }
}

/// Cosine-logit offset attention:
/// `φ(q − softmax(Q̄·K̄ᵀ)·(v·Wv))` with unit-norm projected rows.
pub fn ram_attend<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: &RamWeights<T>,
) -> Result<Tensor<T>> {
    let check = |t: &Tensor<T>| -> Result<()> {
        match t.shape() {
            [_, c] if *c == w.width => Ok(()),
            other => Err(Error::ShapeMismatch {
                op: "ram_attend",
                lhs: other.to_vec(),
                rhs: vec![0, w.width],
            }),
        }
    };
    check(q)?;
    check(k)?;
    check(v)?;
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "ram_attend",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let attn = attention_weights(q, k, w)?;
    let product = attn.matmul(&v.matmul(&w.wv.tensor)?)?;
    let pre_out = if w.options.offset {
        q.sub(&product)?
    } else {
        product
    };
    w.out.forward(&pre_out).map(|t| t.relu())
}

fn attention_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    w: &RamWeights<T>,
) -> Result<Tensor<T>> {
    if w.options.normalize {
        // Unit rows keep every logit in [-1, 1]; the clamp only trims
        // floating-point overshoot.
        ram_logits(q, k, w)?.clamp(-T::one(), T::one()).softmax_rows()
    } else {
        // Plain dot-product attention needs the usual 1/sqrt(C) temper.
        let scale = T::from_f64(1.0 / (w.width as f64).sqrt());
        let logits = q.matmul(&w.wq.tensor)?.matmul_nt(&k.matmul(&w.wk.tensor)?)?;
        logits.scale(scale).softmax_rows()
    }
}

/// Raw cosine logits (pre-softmax) for diagnostics and invariants.
pub fn ram_logits<T: Real>(q: &Tensor<T>, k: &Tensor<T>, w: &RamWeights<T>) -> Result<Tensor<T>> {
    let eps = T::from_f64(NORM_EPS);
    let qn = q.matmul(&w.wq.tensor)?.l2_normalize_rows(eps)?;
    let kn = k.matmul(&w.wk.tensor)?.l2_normalize_rows(eps)?;
    qn.matmul_nt(&kn)
}

/// One self-attention block shared by both clouds, one cross block.
pub struct PrtWeights<T: Real = f32> {
    pub self_ram: RamWeights<T>,
    pub cross_ram: RamWeights<T>,
}

impl<T: Real> PrtWeights<T> {
    pub fn new(name: &str, width: usize, rng: &mut RandomState) -> Result<Self> {
        Self::with_options(name, width, RamOptions::default(), rng)
    }

    pub fn with_options(
        name: &str,
        width: usize,
        options: RamOptions,
        rng: &mut RandomState,
    ) -> Result<Self> {
        Ok(PrtWeights {
            self_ram: RamWeights::with_options(&format!("{name}.self"), width, options, rng)?,
            cross_ram: RamWeights::with_options(&format!("{name}.cross"), width, options, rng)?,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut p = self.self_ram.params();
        p.extend(self.cross_ram.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut p = self.self_ram.params_mut();
        p.extend(self.cross_ram.params_mut());
        p
    }
}

pub struct PrtOutput<T: Real = f32> {
    pub matched: Tensor<T>,
    pub enhanced_search: Tensor<T>,
    pub enhanced_template: Tensor<T>,
}

/// Self-attention over each cloud with the shared weights, then
/// cross-attention from the enhanced search to the enhanced template.
pub fn prt_forward<T: Real>(
    search: &Tensor<T>,
    template: &Tensor<T>,
    w: &PrtWeights<T>,
) -> Result<PrtOutput<T>> {
    let enhanced_search = ram_attend(search, search, search, &w.self_ram)?;
    let enhanced_template = ram_attend(template, template, template, &w.self_ram)?;
    let matched = ram_attend(&enhanced_search, &enhanced_template, &enhanced_template, &w.cross_ram)?;
    Ok(PrtOutput {
        matched,
        enhanced_search,
        enhanced_template,
    })
}

/// Deterministic sine/cosine embedding for a 2-d grid: the first `c/2`
/// channels encode the row coordinate, the rest the column coordinate.
pub fn sinusoidal_pe_2d<T: Real>(h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    if c % 4 != 0 {
        return Err(Error::Validation(format!(
            "sinusoidal_pe_2d: channel count {c} not divisible by 4"
        )));
    }
    let half = c / 2;
    let pe_1d = |pos: usize, out: &mut Vec<T>| {
        for t in 0..half / 2 {
            let freq = 10_000f64.powf(-2.0 * t as f64 / half as f64);
            let angle = pos as f64 * freq;
            out.push(T::from_f64(angle.sin()));
            out.push(T::from_f64(angle.cos()));
        }
    };
    let mut data = Vec::with_capacity(h * w * c);
    for row in 0..h {
        for col in 0..w {
            pe_1d(row, &mut data);
            pe_1d(col, &mut data);
        }
    }
    Tensor::from_vec(&[h * w, c], data)
}
