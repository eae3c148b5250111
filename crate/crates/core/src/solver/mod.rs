//! Fitting tensor fields to aligned views.
//!
//! [`compound_logeuclidean`] minimises
//! `Σ_i Σ_j ρ((v_iᵀ exp(unvec(D·X_j)) v_i - I_ij)²) + λ·TV(X)` over the
//! log-parameter field with the in-house sparse Levenberg-Marquardt engine;
//! [`compound_baseline`] fits unconstrained tensor entries voxel by voxel.

mod baseline;
pub mod lm;

pub use baseline::{compound_baseline, BaselineResult, Definiteness, DefinitenessReport};
pub use lm::{lm_minimize, LmConfig, ResidualSystem, SolveReport, Termination};

use nalgebra::{Matrix6, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{projection_with_gradient, IntensityScale, RobustLoss, INTENSITY_FLOOR};
use crate::symcalc::{eig_sym3, Sym3, VECH_DIAGONAL};
use crate::tvreg::{self, huber_sqrt, huber_tv_1d, TvConfig};
use crate::volume::{Grid, TensorVolume, View};
use lm::{Linearization, SparseJacobian};

/// Everything that controls a fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub lambda: f64,
    pub delta: f64,
    pub loss: RobustLoss,
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_rejections: usize,
    pub gradient_tolerance: f64,
    pub relative_decrease_tolerance: f64,
    /// Box bound on every normalised log-parameter.
    pub param_bound: f64,
    pub intensity_floor: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        let lm = LmConfig::default();
        SolveConfig {
            lambda: 10.0,
            delta: tvreg::DEFAULT_DELTA,
            loss: RobustLoss::Identity,
            max_iterations: lm.max_iterations,
            initial_damping: lm.initial_damping,
            damping_increase: lm.damping_increase,
            damping_decrease: lm.damping_decrease,
            max_rejections: lm.max_rejections,
            gradient_tolerance: lm.gradient_tolerance,
            relative_decrease_tolerance: lm.relative_decrease_tolerance,
            param_bound: 20.0,
            intensity_floor: INTENSITY_FLOOR,
            cg_tolerance: lm.cg_tolerance,
            cg_max_iterations: lm.cg_max_iterations,
        }
    }
}

impl SolveConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        SolveConfig {
            lambda,
            ..SolveConfig::default()
        }
    }

    pub fn tv(&self) -> TvConfig {
        TvConfig {
            lambda: self.lambda,
            delta: self.delta,
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            max_iterations: self.max_iterations,
            initial_damping: self.initial_damping,
            damping_increase: self.damping_increase,
            damping_decrease: self.damping_decrease,
            max_rejections: self.max_rejections,
            gradient_tolerance: self.gradient_tolerance,
            relative_decrease_tolerance: self.relative_decrease_tolerance,
            cg_tolerance: self.cg_tolerance,
            cg_max_iterations: self.cg_max_iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tv().validate()?;
        self.loss.validate()?;
        self.lm().validate()?;
        if !(self.param_bound.is_finite() && self.param_bound > 0.0) {
            return Err(Error::InvalidConfig(format!("param_bound must be positive, got {}", self.param_bound)));
        }
        if !(self.intensity_floor.is_finite() && self.intensity_floor > 0.0 && self.intensity_floor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "intensity_floor must lie in (0, 1), got {}",
                self.intensity_floor
            )));
        }
        Ok(())
    }
}

/// Outcome of [`compound_logeuclidean`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompoundReport {
    #[serde(flatten)]
    pub solve: SolveReport,
    pub lambda: f64,
    pub delta: f64,
    pub loss: RobustLoss,
    pub intensity_scale: f64,
    pub views: usize,
    pub observations: usize,
    pub active_voxels: usize,
    /// Voxels whose observed directions leave `vᵀQv` underdetermined.
    pub underdetermined_voxels: usize,
}

/// Checks that every view sits on one grid with an identity transform and
/// returns that grid.
pub fn common_grid(views: &[View]) -> Result<Grid> {
    let first = views.first().ok_or_else(|| Error::EmptyInput("no views supplied".into()))?;
    let grid = *first.volume.grid();
    for (i, v) in views.iter().enumerate() {
        if !v.volume.grid().matches(&grid) {
            return Err(Error::GridMismatch(format!(
                "view {i} ({}) has grid {:?}, view 0 has {:?}",
                v.geometry.source_id,
                v.volume.grid(),
                grid
            )));
        }
        if !v.geometry.transform.is_identity(1e-12) {
            return Err(Error::GridMismatch(format!(
                "view {i} ({}) still carries a non-identity transform; resample it first",
                v.geometry.source_id
            )));
        }
    }
    Ok(grid)
}

/// Row `(v ⊗ v)ᵀ · D` of the linear map `vech(Q) ↦ vᵀQv`.
pub(crate) fn design_row(v: &Vector3<f64>) -> [f64; 6] {
    let (x, y, z) = (v[0], v[1], v[2]);
    [x * x, 2.0 * x * y, 2.0 * x * z, y * y, 2.0 * y * z, z * z]
}

pub(crate) fn is_underdetermined(rows: impl Iterator<Item = [f64; 6]>) -> bool {
    let mut gram = Matrix6::<f64>::zeros();
    for r in rows {
        for a in 0..6 {
            for b in 0..6 {
                gram[(a, b)] += r[a] * r[b];
            }
        }
    }
    let eig = gram.symmetric_eigenvalues();
    let max = eig.amax();
    !(max > 0.0) || eig.min() <= 1e-10 * max
}

/// The stacked data and TV residuals over all active voxels, in normalised
/// intensity units. Parameter block `b` holds the six log-parameters of the
/// `b`-th active voxel.
pub struct CompoundSystem {
    directions: Vec<Vector3<f64>>,
    /// `obs[offsets[b]..offsets[b+1]]` belong to block `b`.
    offsets: Vec<usize>,
    obs: Vec<(usize, f64)>,
    /// Block pairs coupled by a TV difference.
    edges: Vec<tvreg::Edge>,
    tv: TvConfig,
    loss: RobustLoss,
    bound: f64,
    grid: Grid,
    voxel_of_block: Vec<usize>,
}

struct Prepared {
    problem: CompoundSystem,
    scale: IntensityScale,
    start: Vec<f64>,
    active: Vec<bool>,
}

fn prepare(views: &[View], cfg: &SolveConfig) -> Result<Prepared> {
    cfg.validate()?;
    let grid = common_grid(views)?;
    let mut scale = IntensityScale::from_volumes(views.iter().map(|v| &v.volume));
    scale.floor = cfg.intensity_floor;

    let observed: Vec<bool> = (0..grid.len())
        .map(|j| views.iter().any(|v| v.volume.is_valid(j)))
        .collect();
    let active: Vec<bool> = if cfg.lambda > 0.0 {
        vec![true; grid.len()]
    } else {
        observed.clone()
    };

    let mut voxel_of_block = Vec::new();
    let mut block_of_voxel = vec![usize::MAX; grid.len()];
    for j in 0..grid.len() {
        if active[j] {
            block_of_voxel[j] = voxel_of_block.len();
            voxel_of_block.push(j);
        }
    }

    let mut offsets = Vec::with_capacity(voxel_of_block.len() + 1);
    let mut obs = Vec::new();
    let mut start = Vec::with_capacity(6 * voxel_of_block.len());
    offsets.push(0);
    for &j in &voxel_of_block {
        let before = obs.len();
        for (i, v) in views.iter().enumerate() {
            if v.volume.is_valid(j) {
                obs.push((i, scale.normalize(v.volume.data()[j] as f64)));
            }
        }
        offsets.push(obs.len());
        let seen = &obs[before..];
        let level = if seen.is_empty() {
            0.0
        } else {
            (seen.iter().map(|o| o.1).sum::<f64>() / seen.len() as f64).ln()
        };
        start.extend_from_slice(&Sym3::scaled_identity(level).0);
    }

    let edges = tvreg::tv_edges(&grid, Some(&active))
        .into_iter()
        .map(|e| tvreg::Edge {
            from: block_of_voxel[e.from],
            to: block_of_voxel[e.to],
            axis: e.axis,
        })
        .collect();

    let problem = CompoundSystem {
        directions: views.iter().map(|v| *v.geometry.direction()).collect(),
        offsets,
        obs,
        edges: if cfg.lambda > 0.0 { edges } else { Vec::new() },
        tv: cfg.tv(),
        loss: cfg.loss,
        bound: cfg.param_bound,
        grid,
        voxel_of_block,
    };
    let mut prepared = Prepared {
        problem,
        scale,
        start,
        active,
    };
    prepared.problem.project(&mut prepared.start);
    Ok(prepared)
}

#[inline]
fn block(x: &[f64], b: usize) -> Sym3 {
    let mut p = [0.0; 6];
    p.copy_from_slice(&x[6 * b..6 * b + 6]);
    Sym3(p)
}

impl CompoundSystem {
    /// Number of active voxels.
    pub fn blocks(&self) -> usize {
        self.voxel_of_block.len()
    }

    fn block_obs(&self, b: usize) -> &[(usize, f64)] {
        &self.obs[self.offsets[b]..self.offsets[b + 1]]
    }

    fn non_finite(&self, b: usize) -> Error {
        Error::NonFinite {
            context: format!("data term at voxel {:?}", self.grid.coords(self.voxel_of_block[b])),
        }
    }

    fn data_cost(&self, x: &[f64], b: usize) -> f64 {
        let obs = self.block_obs(b);
        if obs.is_empty() {
            return 0.0;
        }
        let eig = eig_sym3(&block(x, b));
        obs.iter()
            .map(|&(view, intensity)| {
                let w = eig.vectors.transpose() * self.directions[view];
                let value: f64 = (0..3).map(|k| eig.values[k].exp() * w[k] * w[k]).sum();
                let r = value - intensity;
                self.loss.evaluate(r * r).0
            })
            .sum()
    }

    fn tv_cost(&self, x: &[f64]) -> f64 {
        let mut sum = 0.0;
        for e in &self.edges {
            for c in 0..6 {
                sum += huber_tv_1d(x[6 * e.to + c] - x[6 * e.from + c], self.tv.delta).0;
            }
        }
        sum
    }

    /// Grid index of each parameter block.
    pub fn voxels(&self) -> &[usize] {
        &self.voxel_of_block
    }

    pub fn observations(&self) -> usize {
        self.obs.len()
    }

    fn underdetermined(&self) -> usize {
        (0..self.blocks())
            .filter(|&b| is_underdetermined(self.block_obs(b).iter().map(|&(v, _)| design_row(&self.directions[v]))))
            .count()
    }

    /// Restriction to one block, without TV.
    fn single(&self, b: usize) -> CompoundSystem {
        CompoundSystem {
            directions: self.directions.clone(),
            offsets: vec![0, self.offsets[b + 1] - self.offsets[b]],
            obs: self.block_obs(b).to_vec(),
            edges: Vec::new(),
            tv: self.tv,
            loss: self.loss,
            bound: self.bound,
            grid: self.grid,
            voxel_of_block: vec![self.voxel_of_block[b]],
        }
    }
}

impl ResidualSystem for CompoundSystem {
    fn num_params(&self) -> usize {
        6 * self.blocks()
    }

    fn block_size(&self) -> usize {
        6
    }

    fn cost(&self, x: &[f64]) -> Result<f64> {
        let per_block: Vec<f64> = (0..self.blocks()).into_par_iter().map(|b| self.data_cost(x, b)).collect();
        let mut data = 0.0;
        for (b, c) in per_block.iter().enumerate() {
            if !c.is_finite() {
                return Err(self.non_finite(b));
            }
            data += c;
        }
        let tv = if self.edges.is_empty() {
            0.0
        } else {
            self.tv.lambda * self.tv_cost(x)
        };
        Ok(0.5 * (data + tv))
    }

    fn linearize(&self, x: &[f64]) -> Result<Linearization> {
        type Row = (f64, f64, [f64; 6]);
        let per_block: Vec<Vec<Row>> = (0..self.blocks())
            .into_par_iter()
            .map(|b| {
                let obs = self.block_obs(b);
                if obs.is_empty() {
                    return Vec::new();
                }
                let eig = eig_sym3(&block(x, b));
                obs.iter()
                    .map(|&(view, intensity)| {
                        let (value, grad) = projection_with_gradient(&eig, &self.directions[view]);
                        let r = value - intensity;
                        let (rho, drho) = self.loss.evaluate(r * r);
                        let w = drho.sqrt();
                        (rho, w * r, grad.map(|g| w * g))
                    })
                    .collect()
            })
            .collect();

        let n_data: usize = per_block.iter().map(Vec::len).sum();
        let mut residuals = Vec::with_capacity(n_data + 6 * self.edges.len());
        let mut jacobian = SparseJacobian::new();
        let mut data = 0.0;
        for (b, rows) in per_block.iter().enumerate() {
            for &(rho, r, grad) in rows {
                if !(rho.is_finite() && r.is_finite() && grad.iter().all(|g| g.is_finite())) {
                    return Err(self.non_finite(b));
                }
                data += rho;
                residuals.push(r);
                jacobian.push_row((0..6).map(|k| (6 * b + k, grad[k])));
            }
        }

        let mut tv = 0.0;
        if !self.edges.is_empty() {
            let w = self.tv.lambda.sqrt();
            for e in &self.edges {
                for c in 0..6 {
                    let g = x[6 * e.to + c] - x[6 * e.from + c];
                    let (h, dh) = huber_sqrt(g, self.tv.delta);
                    tv += huber_tv_1d(g, self.tv.delta).0;
                    residuals.push(w * h);
                    jacobian.push_row([(6 * e.from + c, -w * dh), (6 * e.to + c, w * dh)]);
                }
            }
        }
        Ok(Linearization {
            cost: 0.5 * (data + self.tv.lambda * tv),
            residuals,
            jacobian,
        })
    }

    fn project(&self, x: &mut [f64]) {
        for v in x {
            *v = v.clamp(-self.bound, self.bound);
        }
    }
}

/// Builds the residual system minimised by [`compound_logeuclidean`] and its
/// starting point.
pub fn compound_system(views: &[View], cfg: &SolveConfig) -> Result<(CompoundSystem, Vec<f64>)> {
    let p = prepare(views, cfg)?;
    Ok((p.problem, p.start))
}

/// Unpacks normalised block parameters into a volume in original intensity
/// units.
fn to_volume(prepared: &Prepared, x: &[f64]) -> Result<TensorVolume> {
    let grid = prepared.problem.grid;
    let shift = prepared.scale.log_shift();
    let mut params = vec![Sym3::zero(); grid.len()];
    for (b, &j) in prepared.problem.voxel_of_block.iter().enumerate() {
        let mut p = block(x, b);
        for k in VECH_DIAGONAL {
            p.0[k] += shift;
        }
        params[j] = p;
    }
    let mask = prepared.active.iter().any(|a| !a).then(|| prepared.active.clone());
    TensorVolume::new(grid, params, mask)
}

/// Log-isotropic starting field: `X_j = ln(Ī_j)·(1,0,0,1,0,1)` with `Ī_j`
/// the mean floored intensity at voxel `j`, in original units. Voxels without
/// observations start at zero.
pub fn initialize_field(views: &[View]) -> Result<TensorVolume> {
    let cfg = SolveConfig {
        lambda: 0.0,
        ..SolveConfig::default()
    };
    let prepared = prepare(views, &cfg)?;
    let mut vol = to_volume(&prepared, &prepared.start)?;
    // unobserved voxels carry the shift too; reset them
    let (grid, mut params, mask) = vol.clone().into_parts();
    if let Some(m) = &mask {
        for (p, &valid) in params.iter_mut().zip(m) {
            if !valid {
                *p = Sym3::zero();
            }
        }
        vol = TensorVolume::new(grid, params, mask)?;
    }
    Ok(vol)
}

/// Fits the log-Euclidean model with Huber-TV regularisation to aligned
/// views. The result is positive definite at every voxel by construction.
///
/// With `λ = 0`, voxels without a single valid observation are masked out of
/// the result; with `λ > 0` they are filled in by the TV coupling.
pub fn compound_logeuclidean(views: &[View], cfg: &SolveConfig) -> Result<(TensorVolume, CompoundReport)> {
    let prepared = prepare(views, cfg)?;
    let (x, solve) = lm_minimize(&prepared.problem, &prepared.start, &cfg.lm())?;
    let report = CompoundReport {
        solve,
        lambda: cfg.lambda,
        delta: cfg.delta,
        loss: cfg.loss,
        intensity_scale: prepared.scale.scale,
        views: views.len(),
        observations: prepared.problem.obs.len(),
        active_voxels: prepared.problem.blocks(),
        underdetermined_voxels: prepared.problem.underdetermined(),
    };
    Ok((to_volume(&prepared, &x)?, report))
}

/// Solves every voxel as its own problem. Only defined for `λ = 0`, where
/// the joint problem separates.
pub fn compound_decoupled(views: &[View], cfg: &SolveConfig) -> Result<(TensorVolume, Vec<SolveReport>)> {
    if cfg.lambda != 0.0 {
        return Err(Error::InvalidConfig("per-voxel solves require lambda = 0".into()));
    }
    let prepared = prepare(views, cfg)?;
    let lm_cfg = cfg.lm();
    let results: Vec<Result<(Vec<f64>, SolveReport)>> = (0..prepared.problem.blocks())
        .into_par_iter()
        .map(|b| {
            let sub = prepared.problem.single(b);
            lm_minimize(&sub, &prepared.start[6 * b..6 * b + 6], &lm_cfg)
        })
        .collect();
    let mut x = Vec::with_capacity(prepared.start.len());
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        let (xb, rep) = r?;
        x.extend(xb);
        reports.push(rep);
    }
    Ok((to_volume(&prepared, &x)?, reports))
}
