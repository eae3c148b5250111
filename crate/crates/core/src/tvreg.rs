//! Huber-smoothed, channelwise total variation of the log-parameter field.
//!
//! Forward differences along +x, +y and +z are taken between pairs of valid
//! voxels only (zero flux across the grid boundary and the mask edge), in
//! voxel units, independently for each of the six channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symcalc::Sym3;
use crate::volume::{Grid, TensorVolume};

/// Huber knee used in the published experiments.
pub const DEFAULT_DELTA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvConfig {
    pub lambda: f64,
    pub delta: f64,
}

impl TvConfig {
    pub fn new(lambda: f64, delta: f64) -> Result<Self> {
        let cfg = TvConfig { lambda, delta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Huber penalty of one difference and its derivative.
#[inline]
pub fn huber_tv_1d(g: f64, delta: f64) -> (f64, f64) {
    if g.abs() <= delta {
        (0.5 * g * g, g)
    } else {
        (delta * (g.abs() - 0.5 * delta), delta * g.signum())
    }
}

/// Signed square root of the Huber penalty, `h(g)² = huber(g)`, and `h'(g)`.
///
/// `g/√2` inside the knee, `sign(g)·√(δ(|g| - δ/2))` outside; the two
/// pieces agree in value and slope at `|g| = δ`.
#[inline]
pub fn huber_sqrt(g: f64, delta: f64) -> (f64, f64) {
    if g.abs() <= delta {
        (g * std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2)
    } else {
        let h = (delta * (g.abs() - 0.5 * delta)).sqrt();
        (g.signum() * h, delta / (2.0 * h))
    }
}

/// A pair of neighbouring valid voxels, `to = from + stride(axis)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub axis: u8,
}

/// All forward-difference pairs between valid voxels, ordered by voxel then
/// axis.
pub fn tv_edges(grid: &Grid, mask: Option<&[bool]>) -> Vec<Edge> {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let mut edges = Vec::with_capacity(3 * grid.len());
    for j in 0..grid.len() {
        if !valid(j) {
            continue;
        }
        let c = grid.coords(j);
        for axis in 0..3 {
            if c[axis] + 1 < grid.dims[axis] {
                let to = j + grid.stride(axis);
                if valid(to) {
                    edges.push(Edge {
                        from: j,
                        to,
                        axis: axis as u8,
                    });
                }
            }
        }
    }
    edges
}

/// `λ · Σ_edges Σ_channels huber(X_to - X_from)`.
pub fn tv_energy(field: &TensorVolume, cfg: &TvConfig) -> f64 {
    let edges = tv_edges(field.grid(), field.mask());
    cfg.lambda * raw_energy(field.params(), &edges, cfg.delta)
}

pub(crate) fn raw_energy(params: &[Sym3], edges: &[Edge], delta: f64) -> f64 {
    let mut sum = 0.0;
    for e in edges {
        let (a, b) = (&params[e.from].0, &params[e.to].0);
        for c in 0..6 {
            sum += huber_tv_1d(b[c] - a[c], delta).0;
        }
    }
    sum
}

/// One least-squares residual of the TV term, coupling channel `channel` of
/// voxels `from` and `to`. Its derivative with respect to `X_to[channel]`
/// is `slope` and with respect to `X_from[channel]` is `-slope`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvResidual {
    pub edge: Edge,
    pub channel: u8,
    pub value: f64,
    pub slope: f64,
}

/// Residuals `√λ · h(ΔX)` whose squares sum to [`tv_energy`]. Empty when
/// `λ = 0`.
pub fn tv_residuals(field: &TensorVolume, cfg: &TvConfig) -> Vec<TvResidual> {
    if cfg.lambda == 0.0 {
        return Vec::new();
    }
    let edges = tv_edges(field.grid(), field.mask());
    let mut out = Vec::with_capacity(6 * edges.len());
    residuals_into(field.params(), &edges, cfg, &mut out);
    out
}

pub(crate) fn residuals_into(params: &[Sym3], edges: &[Edge], cfg: &TvConfig, out: &mut Vec<TvResidual>) {
    let w = cfg.lambda.sqrt();
    for &edge in edges {
        let (a, b) = (&params[edge.from].0, &params[edge.to].0);
        for c in 0..6 {
            let (h, dh) = huber_sqrt(b[c] - a[c], cfg.delta);
            out.push(TvResidual {
                edge,
                channel: c as u8,
                value: w * h,
                slope: w * dh,
            });
        }
    }
}
