//! Levenberg-Marquardt over a sparse, block-structured residual system.
//!
//! Each iteration solves `(JᵀJ + μ·diag(JᵀJ)) h = -Jᵀr` by preconditioned
//! conjugate gradients on a block-sparse normal matrix (block-Jacobi
//! preconditioner). Accepted steps divide `μ` by the decrease factor,
//! rejected ones multiply it by the increase factor.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-compressed sparse Jacobian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseJacobian {
    pub row_offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseJacobian {
    pub fn new() -> Self {
        SparseJacobian {
            row_offsets: vec![0],
            cols: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (c, v) in entries {
            self.cols.push(c);
            self.values.push(v);
        }
        self.row_offsets.push(self.cols.len());
    }

    pub fn rows(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// `Jᵀ r`.
    pub fn transpose_mul(&self, r: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (i, &ri) in r.iter().enumerate() {
            for (c, v) in self.row(i) {
                out[c] += v * ri;
            }
        }
        out
    }
}

/// Residuals, Jacobian and objective at one point.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// Objective value; `½‖r‖²` for plain least squares.
    pub cost: f64,
    pub residuals: Vec<f64>,
    pub jacobian: SparseJacobian,
}

/// A nonlinear least-squares problem over `num_params` unknowns grouped in
/// blocks of `block_size`.
pub trait ResidualSystem {
    fn num_params(&self) -> usize;

    fn block_size(&self) -> usize {
        1
    }

    fn cost(&self, x: &[f64]) -> Result<f64>;

    fn linearize(&self, x: &[f64]) -> Result<Linearization>;

    /// Maps a trial point back into the feasible set.
    fn project(&self, _x: &mut [f64]) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_rejections: usize,
    pub gradient_tolerance: f64,
    pub relative_decrease_tolerance: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 50,
            initial_damping: 1e-4,
            damping_increase: 2.0,
            damping_decrease: 3.0,
            max_rejections: 20,
            gradient_tolerance: 1e-8,
            relative_decrease_tolerance: 1e-10,
            cg_tolerance: 1e-6,
            cg_max_iterations: 2000,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_damping", self.initial_damping),
            ("gradient_tolerance", self.gradient_tolerance),
            ("relative_decrease_tolerance", self.relative_decrease_tolerance),
            ("cg_tolerance", self.cg_tolerance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.damping_increase > 1.0 && self.damping_decrease > 1.0) {
            return Err(Error::InvalidConfig("damping factors must exceed 1".into()));
        }
        if self.max_iterations == 0 || self.max_rejections == 0 || self.cg_max_iterations == 0 {
            return Err(Error::InvalidConfig("iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientNorm,
    RelativeDecrease,
    MaxIterations,
    DampingExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub termination: Termination,
    pub rejected_steps: usize,
    pub cg_iterations: usize,
    /// Wall-clock seconds; left out of serialised reports so they stay
    /// reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Minimises the system from `x0`.
pub fn lm_minimize<S: ResidualSystem + ?Sized>(
    system: &S,
    x0: &[f64],
    cfg: &LmConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let n = system.num_params();
    if x0.len() != n {
        return Err(Error::InvalidConfig(format!("start has {} entries, system has {n}", x0.len())));
    }
    let b = system.block_size();
    if b == 0 || n % b != 0 {
        return Err(Error::InvalidConfig(format!("{n} parameters do not split into blocks of {b}")));
    }

    let mut x = x0.to_vec();
    system.project(&mut x);
    let mut lin = system.linearize(&x)?;
    check_finite(&lin)?;
    let mut gradient = lin.jacobian.transpose_mul(&lin.residuals, n);

    let mut report = SolveReport {
        iterations: 0,
        initial_cost: lin.cost,
        final_cost: lin.cost,
        cost_trace: vec![lin.cost],
        termination: Termination::MaxIterations,
        rejected_steps: 0,
        cg_iterations: 0,
        wall_time_s: 0.0,
    };

    if inf_norm(&gradient) <= cfg.gradient_tolerance {
        report.termination = Termination::GradientNorm;
        report.wall_time_s = started.elapsed().as_secs_f64();
        return Ok((x, report));
    }

    let mut mu = cfg.initial_damping;
    let mut trial = vec![0.0; n];
    'outer: for iteration in 1..=cfg.max_iterations {
        report.iterations = iteration;
        let normal = BlockSparse::normal_matrix(&lin.jacobian, n, b);
        let scaling: Vec<f64> = normal.diagonal().into_iter().map(|d| d.clamp(1e-6, 1e32)).collect();
        let rhs: Vec<f64> = gradient.iter().map(|g| -g).collect();

        let mut rejections = 0;
        let cost_new = loop {
            let (step, cg_iters) = normal.solve_damped(&rhs, &scaling, mu, cfg.cg_tolerance, cfg.cg_max_iterations)?;
            report.cg_iterations += cg_iters;
            for ((t, xi), hi) in trial.iter_mut().zip(&x).zip(&step) {
                *t = xi + hi;
            }
            system.project(&mut trial);
            let c = system.cost(&trial)?;
            if c.is_finite() && c < lin.cost {
                mu /= cfg.damping_decrease;
                break c;
            }
            mu *= cfg.damping_increase;
            rejections += 1;
            report.rejected_steps += 1;
            if rejections >= cfg.max_rejections || !mu.is_finite() {
                report.termination = Termination::DampingExhausted;
                break 'outer;
            }
        };

        let relative = (lin.cost - cost_new) / lin.cost;
        std::mem::swap(&mut x, &mut trial);
        report.cost_trace.push(cost_new);
        lin = system.linearize(&x)?;
        check_finite(&lin)?;
        gradient = lin.jacobian.transpose_mul(&lin.residuals, n);

        if inf_norm(&gradient) <= cfg.gradient_tolerance {
            report.termination = Termination::GradientNorm;
            break;
        }
        if relative < cfg.relative_decrease_tolerance {
            report.termination = Termination::RelativeDecrease;
            break;
        }
    }

    report.final_cost = lin.cost;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((x, report))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn check_finite(lin: &Linearization) -> Result<()> {
    if !lin.cost.is_finite() {
        return Err(Error::NonFinite {
            context: "objective".into(),
        });
    }
    if let Some(i) = lin.residuals.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("residual {i}"),
        });
    }
    if let Some(k) = lin.jacobian.values.iter().position(|v| !v.is_finite()) {
        let row = lin.jacobian.row_offsets.partition_point(|&o| o <= k) - 1;
        return Err(Error::NonFinite {
            context: format!("jacobian row {row}, parameter {}", lin.jacobian.cols[k]),
        });
    }
    Ok(())
}

/// Symmetric block-sparse matrix stored as block rows of dense `b×b`
/// blocks, row-major inside each block.
#[derive(Clone, Debug)]
pub struct BlockSparse {
    block: usize,
    row_offsets: Vec<usize>,
    col_blocks: Vec<usize>,
    values: Vec<f64>,
}

impl BlockSparse {
    /// `JᵀJ` with the block pattern induced by the Jacobian.
    pub fn normal_matrix(jac: &SparseJacobian, n: usize, b: usize) -> Self {
        let nb = n / b;
        let mut neighbours: Vec<Vec<usize>> = (0..nb).map(|i| vec![i]).collect();
        let mut touched: Vec<usize> = Vec::new();
        for r in 0..jac.rows() {
            touched.clear();
            for (c, _) in jac.row(r) {
                let blk = c / b;
                if !touched.contains(&blk) {
                    touched.push(blk);
                }
            }
            for &p in &touched {
                for &q in &touched {
                    if !neighbours[p].contains(&q) {
                        neighbours[p].push(q);
                    }
                }
            }
        }
        let mut row_offsets = Vec::with_capacity(nb + 1);
        let mut col_blocks = Vec::new();
        row_offsets.push(0);
        for mut list in neighbours {
            list.sort_unstable();
            col_blocks.extend(list);
            row_offsets.push(col_blocks.len());
        }
        let mut m = BlockSparse {
            block: b,
            values: vec![0.0; col_blocks.len() * b * b],
            row_offsets,
            col_blocks,
        };

        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        let mut slots: Vec<usize> = Vec::new();
        for r in 0..jac.rows() {
            touched.clear();
            entries.clear();
            for (c, v) in jac.row(r) {
                let blk = c / b;
                let t = match touched.iter().position(|&x| x == blk) {
                    Some(t) => t,
                    None => {
                        touched.push(blk);
                        touched.len() - 1
                    }
                };
                entries.push((t, c % b, v));
            }
            let nt = touched.len();
            slots.clear();
            for &p in &touched {
                for &q in &touched {
                    slots.push(m.slot(p, q));
                }
            }
            for &(tp, ip, vp) in &entries {
                for &(tq, iq, vq) in &entries {
                    m.values[slots[tp * nt + tq] + ip * b + iq] += vp * vq;
                }
            }
        }
        m
    }

    fn slot(&self, row: usize, col: usize) -> usize {
        let span = self.row_offsets[row]..self.row_offsets[row + 1];
        let k = self.col_blocks[span.clone()]
            .binary_search(&col)
            .expect("block outside sparsity pattern");
        (span.start + k) * self.block * self.block
    }

    pub fn dim(&self) -> usize {
        (self.row_offsets.len() - 1) * self.block
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let b = self.block;
        let mut d = Vec::with_capacity(self.dim());
        for r in 0..self.row_offsets.len() - 1 {
            let s = self.slot(r, r);
            d.extend((0..b).map(|i| self.values[s + i * b + i]));
        }
        d
    }

    /// `y = (A + μ·diag(scaling)) x`.
    fn mul_damped(&self, x: &[f64], scaling: &[f64], mu: f64, y: &mut [f64]) {
        let b = self.block;
        for r in 0..self.row_offsets.len() - 1 {
            let yr = &mut y[r * b..(r + 1) * b];
            for i in 0..b {
                yr[i] = mu * scaling[r * b + i] * x[r * b + i];
            }
            for k in self.row_offsets[r]..self.row_offsets[r + 1] {
                let c = self.col_blocks[k];
                let blk = &self.values[k * b * b..(k + 1) * b * b];
                let xc = &x[c * b..(c + 1) * b];
                for i in 0..b {
                    let row = &blk[i * b..(i + 1) * b];
                    yr[i] += row.iter().zip(xc).map(|(a, v)| a * v).sum::<f64>();
                }
            }
        }
    }

    /// Solves `(A + μ·diag(scaling)) x = rhs` by block-Jacobi preconditioned
    /// conjugate gradients; returns the solution and the iteration count.
    pub fn solve_damped(
        &self,
        rhs: &[f64],
        scaling: &[f64],
        mu: f64,
        tolerance: f64,
        max_iterations: usize,
    ) -> Result<(Vec<f64>, usize)> {
        let b = self.block;
        let n = self.dim();
        let nb = n / b;

        // inverted damped diagonal blocks, row-major
        let mut precond = vec![0.0; nb * b * b];
        for r in 0..nb {
            let s = self.slot(r, r);
            let mut blk = DMatrix::from_row_slice(b, b, &self.values[s..s + b * b]);
            for i in 0..b {
                blk[(i, i)] += mu * scaling[r * b + i];
            }
            let inv = blk
                .cholesky()
                .ok_or_else(|| Error::NonFinite {
                    context: format!("damped normal block {r} is not positive definite"),
                })?
                .inverse();
            let dst = &mut precond[r * b * b..(r + 1) * b * b];
            for i in 0..b {
                for j in 0..b {
                    dst[i * b + j] = inv[(i, j)];
                }
            }
        }
        let apply_precond = |r: &[f64], z: &mut [f64]| {
            for blk in 0..nb {
                let inv = &precond[blk * b * b..(blk + 1) * b * b];
                let rb = &r[blk * b..(blk + 1) * b];
                for i in 0..b {
                    z[blk * b + i] = inv[i * b..(i + 1) * b].iter().zip(rb).map(|(a, v)| a * v).sum();
                }
            }
        };

        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        let rhs_norm = dot(rhs, rhs).sqrt();
        let mut x = vec![0.0; n];
        if rhs_norm == 0.0 {
            return Ok((x, 0));
        }
        let mut r = rhs.to_vec();
        let mut z = vec![0.0; n];
        apply_precond(&r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        let mut iterations = 0;
        while iterations < max_iterations {
            iterations += 1;
            self.mul_damped(&p, scaling, mu, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if dot(&r, &r).sqrt() <= tolerance * rhs_norm {
                break;
            }
            apply_precond(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Ok((x, iterations))
    }
}
