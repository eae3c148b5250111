//! Forward model: a view along unit direction `v` sees `vᵀ Q v` at a voxel
//! whose tensor is `Q = exp(unvec(D · X))`.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symcalc::{self, EigenDecomp3, Sym3, SymParam};
use crate::volume::{ScalarVolume, TensorVolume};

/// Floor applied to normalised intensities before fitting.
pub const INTENSITY_FLOOR: f64 = 1e-3;

/// One voxel intensity seen by one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub voxel: usize,
    pub view: usize,
    pub direction: Vector3<f64>,
    pub intensity: f64,
}

/// Quadratic form `vᵀ Q v`.
#[inline]
pub fn project(q: &Sym3, v: &Vector3<f64>) -> f64 {
    let [a11, a21, a31, a22, a32, a33] = q.0;
    let (x, y, z) = (v[0], v[1], v[2]);
    a11 * x * x + a22 * y * y + a33 * z * z + 2.0 * (a21 * x * y + a31 * x * z + a32 * y * z)
}

/// `vᵀ exp(unvec(D · X)) v - I`.
pub fn residual(x: &SymParam, obs: &Observation) -> f64 {
    project(&symcalc::exp_sym3(x), &obs.direction) - obs.intensity
}

/// Row Jacobian of [`residual`] with respect to `X`, assembled literally as
/// `(v ⊗ v)ᵀ · dexp(S) · D`.
pub fn residual_jacobian(x: &SymParam, obs: &Observation) -> [f64; 6] {
    let v = obs.direction;
    let vv = symcalc::vec(&(v * v.transpose()));
    let row = vv.transpose() * symcalc::dexp_sym3(x) * symcalc::duplication();
    let mut out = [0.0; 6];
    out.copy_from_slice(row.as_slice());
    out
}

/// Value and `X`-gradient of `vᵀ exp(S) v` from a precomputed
/// eigendecomposition of `S`.
///
/// With `w = Vᵀ v` the gradient with respect to the full matrix is
/// `V (L ∘ w wᵀ) Vᵀ`; folding through `D` doubles the off-diagonal entries.
#[inline]
pub fn projection_with_gradient(eig: &EigenDecomp3, v: &Vector3<f64>) -> (f64, [f64; 6]) {
    let w = eig.vectors.transpose() * v;
    let l = symcalc::loewner_exp(&eig.values);
    let value = (0..3).map(|k| l[(k, k)] * w[k] * w[k]).sum();
    let inner = Matrix3::from_fn(|a, b| l[(a, b)] * w[a] * w[b]);
    let g = eig.vectors * inner * eig.vectors.transpose();
    let grad = [
        g[(0, 0)],
        g[(1, 0)] + g[(0, 1)],
        g[(2, 0)] + g[(0, 2)],
        g[(1, 1)],
        g[(2, 1)] + g[(1, 2)],
        g[(2, 2)],
    ];
    (value, grad)
}

/// Loss applied to squared residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RobustLoss {
    /// `ρ(s) = s`.
    #[default]
    Identity,
    /// Quadratic up to `|r| = c`, linear in `|r|` beyond.
    Huber { c: f64 },
}

impl RobustLoss {
    pub fn huber(c: f64) -> Result<Self> {
        let loss = RobustLoss::Huber { c };
        loss.validate()?;
        Ok(loss)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RobustLoss::Huber { c } if !(c.is_finite() && c > 0.0) => {
                Err(Error::InvalidConfig(format!("huber scale must be positive, got {c}")))
            }
            _ => Ok(()),
        }
    }

    /// `(ρ(r2), ρ'(r2))` for a squared residual `r2 >= 0`.
    #[inline]
    pub fn evaluate(&self, r2: f64) -> (f64, f64) {
        match *self {
            RobustLoss::Identity => (r2, 1.0),
            RobustLoss::Huber { c } => {
                if r2 <= c * c {
                    (r2, 1.0)
                } else {
                    let r = r2.sqrt();
                    (2.0 * c * r - c * c, c / r)
                }
            }
        }
    }
}

/// Renders the tensor field as seen along `direction`. Masked voxels are
/// zero and stay masked; every valid voxel is strictly positive.
pub fn project_volume(tensors: &TensorVolume, direction: &Vector3<f64>) -> Result<ScalarVolume> {
    let v = crate::volume::unit_direction(*direction)?;
    let data: Vec<f32> = tensors
        .params()
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            if tensors.is_valid(j) {
                project(&symcalc::exp_sym3(x), &v) as f32
            } else {
                0.0
            }
        })
        .collect();
    ScalarVolume::new(*tensors.grid(), data, tensors.mask().map(<[bool]>::to_vec))
}

/// Global intensity scaling used to bring inputs into `[floor, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityScale {
    pub scale: f64,
    pub floor: f64,
}

impl IntensityScale {
    /// Scale from the largest valid intensity over all volumes; an all-zero
    /// input gets scale 1.
    pub fn from_volumes<'a>(volumes: impl IntoIterator<Item = &'a ScalarVolume>) -> Self {
        let max = volumes
            .into_iter()
            .filter_map(|v| v.valid_range())
            .fold(0.0f64, |acc, (_, hi)| acc.max(hi as f64));
        IntensityScale {
            scale: if max > 0.0 { max } else { 1.0 },
            floor: INTENSITY_FLOOR,
        }
    }

    #[inline]
    pub fn normalize(&self, intensity: f64) -> f64 {
        (intensity / self.scale).max(self.floor)
    }

    #[inline]
    pub fn denormalize(&self, value: f64) -> f64 {
        value * self.scale
    }

    /// Shift that turns normalised log-parameters into original units:
    /// `exp(S + ln(scale)·I) = scale · exp(S)`.
    pub fn log_shift(&self) -> f64 {
        self.scale.ln()
    }
}
