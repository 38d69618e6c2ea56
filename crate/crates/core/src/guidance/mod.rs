//! The denoiser behind score distillation: a cosine noise schedule and an
//! analytic exemplar-attention denoiser. Layer one is self-attention over
//! the noisy image's patches; layer two is cross-attention from those
//! patches to the exemplar patches of the conditioning token, whose softmax
//! is the patchwise posterior over exemplars. Hooks capture, replace or mask
//! the attention activations of either layer.

mod adapter;
mod bank;
mod denoise;
mod invert;
mod schedule;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use adapter::{finetune_adapter, AdapterReport, FinetuneConfig};
pub use bank::{build_exemplar_bank, seeded_orthogonal, Adapter, BankConfig, ExemplarBank, ExemplarClass, CHECKPOINT_VERSION};
pub use denoise::{
    blend_activations, denoise, denoise_with_alpha, ActivationSet, AttentionLayer, DenoiseOutput, Hooks, CROSS_ATTENTION, SELF_ATTENTION,
};
pub use invert::{invert_image, InversionConfig, InversionReport};
pub use schedule::{add_noise, NoiseSchedule, NoisedSample};

/// Dense row-major matrix for the small projections and activations used
/// by the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols);
        Mat::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        )
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Rows of `x` (`n × dim`, flat) times `w` (`dim × w.cols`), flat.
    pub fn project_rows(x: &[f64], dim: usize, w: &Mat) -> Vec<f64> {
        assert_eq!(w.rows, dim);
        let n = x.len() / dim;
        let mut out = vec![0.0; n * w.cols];
        for r in 0..n {
            let xr = &x[r * dim..(r + 1) * dim];
            let o = &mut out[r * w.cols..(r + 1) * w.cols];
            for (a, &xa) in xr.iter().enumerate() {
                if xa == 0.0 {
                    continue;
                }
                for (oj, wj) in o.iter_mut().zip(w.row(a)) {
                    *oj += xa * wj;
                }
            }
        }
        out
    }

    /// Rows of `x` times `wᵀ`.
    pub fn project_rows_t(x: &[f64], w: &Mat) -> Vec<f64> {
        let n = x.len() / w.cols;
        let mut out = vec![0.0; n * w.rows];
        for r in 0..n {
            let xr = &x[r * w.cols..(r + 1) * w.cols];
            for a in 0..w.rows {
                out[r * w.rows + a] = dot(xr, w.row(a));
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conditioning for one denoiser branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PromptToken {
    /// Exemplars of one base class.
    Class { name: String },
    /// Unconditional: every exemplar the bank knows, base classes and
    /// adapter renders alike.
    Null,
    /// Mixture over base classes; keys of class `c` get bias `log weights[c]`.
    Inverted { classes: Vec<String>, weights: Vec<f64> },
    /// Renders registered by adapter fine-tuning, seen through the adapter's
    /// corrected projections.
    Adapter { id: String },
}

impl PromptToken {
    pub fn class(name: impl Into<String>) -> Self {
        PromptToken::Class { name: name.into() }
    }

    pub fn adapter(id: impl Into<String>) -> Self {
        PromptToken::Adapter { id: id.into() }
    }

    pub fn inverted(classes: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        let token = PromptToken::Inverted { classes, weights };
        token.validate()?;
        Ok(token)
    }

    pub fn validate(&self) -> Result<()> {
        if let PromptToken::Inverted { classes, weights } = self {
            crate::error::check_len("inverted token weights", classes.len(), weights.len())?;
            if weights.iter().any(|w| !(*w >= 0.0)) {
                return Err(Error::InvalidArgument("inverted token weights must be nonnegative".into()));
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("inverted token weights sum to {sum}, not 1")));
            }
        }
        Ok(())
    }

    /// Short label used in logs and manifests.
    pub fn label(&self) -> String {
        match self {
            PromptToken::Class { name } => name.clone(),
            PromptToken::Null => "null".into(),
            PromptToken::Inverted { .. } => "inverted".into(),
            PromptToken::Adapter { id } => format!("adapter:{id}"),
        }
    }
}

/// Draws a timestep uniformly from `[lo, hi]`.
pub fn sample_timestep(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    rng.random_range(range[0]..=range[1])
}

pub fn sample_noise(rng: &mut impl Rng, width: usize, height: usize) -> Image {
    let data = (0..width * height).map(|_| StandardNormal.sample(rng)).collect();
    Image::from_vec(width, height, data).expect("sized noise")
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let n = xs.len() as f64;
        xs.iter_mut().for_each(|x| *x = 1.0 / n);
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}
