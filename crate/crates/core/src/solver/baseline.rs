//! Unconstrained per-voxel linear fit of the tensor entries.

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{common_grid, design_row};
use crate::error::{Error, Result};
use crate::symcalc::{eig_sym3, Sym3};
use crate::volume::{Grid, ScalarVolume, TensorVolume, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Definiteness {
    PositiveDefinite,
    Indefinite,
    Unobserved,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DefinitenessReport {
    pub positive_definite: usize,
    /// Voxels with smallest eigenvalue `<= 0`.
    pub not_positive_definite: usize,
    pub unobserved: usize,
    /// Voxels solved in the minimum-norm sense.
    pub rank_deficient: usize,
    pub min_eigenvalue: f64,
}

/// Tensor entries fitted directly, possibly indefinite.
#[derive(Clone, Debug)]
pub struct BaselineResult {
    grid: Grid,
    entries: Vec<Sym3>,
    definiteness: Vec<Definiteness>,
    rank_deficient: usize,
}

impl BaselineResult {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn entries(&self) -> &[Sym3] {
        &self.entries
    }

    pub fn definiteness(&self) -> &[Definiteness] {
        &self.definiteness
    }

    pub fn mask(&self) -> Option<Vec<bool>> {
        let m: Vec<bool> = self.definiteness.iter().map(|d| *d != Definiteness::Unobserved).collect();
        m.iter().any(|v| !v).then_some(m)
    }

    pub fn report(&self) -> DefinitenessReport {
        let mut rep = DefinitenessReport {
            rank_deficient: self.rank_deficient,
            min_eigenvalue: f64::INFINITY,
            ..DefinitenessReport::default()
        };
        for (d, q) in self.definiteness.iter().zip(&self.entries) {
            match d {
                Definiteness::PositiveDefinite => rep.positive_definite += 1,
                Definiteness::Indefinite => rep.not_positive_definite += 1,
                Definiteness::Unobserved => {
                    rep.unobserved += 1;
                    continue;
                }
            }
            rep.min_eigenvalue = rep.min_eigenvalue.min(eig_sym3(q).min_value());
        }
        rep
    }

    /// Fitted entries as a tensor volume. These are tensor entries, not
    /// log-parameters.
    pub fn to_entry_volume(&self) -> Result<TensorVolume> {
        TensorVolume::new(self.grid, self.entries.clone(), self.mask())
    }

    /// `vᵀQv` at every observed voxel, with negative predictions clamped to
    /// zero. Returns the projection and the number of clamped voxels.
    pub fn project(&self, direction: &Vector3<f64>) -> Result<(ScalarVolume, usize)> {
        let row = design_row(&crate::volume::unit_direction(*direction)?);
        let mut clamped = 0;
        let data = self
            .entries
            .iter()
            .zip(&self.definiteness)
            .map(|(q, d)| {
                if *d == Definiteness::Unobserved {
                    return 0.0;
                }
                let value: f64 = row.iter().zip(&q.0).map(|(a, b)| a * b).sum();
                if value < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    value as f32
                }
            })
            .collect();
        Ok((ScalarVolume::new(self.grid, data, self.mask())?, clamped))
    }
}

/// Least-squares `vech(Q)` for one voxel and whether the design was rank
/// deficient.
fn fit_voxel(rows: &[[f64; 6]], values: &[f64]) -> (Sym3, bool) {
    let mut normal = Matrix6::<f64>::zeros();
    let mut rhs = Vector6::<f64>::zeros();
    for (r, &y) in rows.iter().zip(values) {
        for a in 0..6 {
            rhs[a] += r[a] * y;
            for b in 0..6 {
                normal[(a, b)] += r[a] * r[b];
            }
        }
    }
    let eig = normal.symmetric_eigenvalues();
    let full_rank = eig.min() > 1e-10 * eig.amax();
    if full_rank {
        if let Some(chol) = normal.cholesky() {
            let q = chol.solve(&rhs);
            return (Sym3::from_vech(&q), false);
        }
    }
    let a = DMatrix::from_fn(rows.len(), 6, |i, k| rows[i][k]);
    let y = DVector::from_column_slice(values);
    let svd = a.svd(true, true);
    let q = svd
        .solve(&y, 1e-10 * svd.singular_values.max())
        .unwrap_or_else(|_| DVector::zeros(6));
    (Sym3::from_vech(&Vector6::from_iterator(q.iter().copied())), true)
}

/// Fits `vᵀQv = I` voxel by voxel in raw intensity units without any
/// positivity constraint.
pub fn compound_baseline(views: &[View]) -> Result<BaselineResult> {
    let grid = common_grid(views)?;
    let rows: Vec<[f64; 6]> = views.iter().map(|v| design_row(v.geometry.direction())).collect();
    let fits: Vec<Option<(Sym3, bool)>> = (0..grid.len())
        .into_par_iter()
        .map(|j| {
            let mut r = Vec::with_capacity(views.len());
            let mut y = Vec::with_capacity(views.len());
            for (i, v) in views.iter().enumerate() {
                if v.volume.is_valid(j) {
                    r.push(rows[i]);
                    y.push(v.volume.data()[j] as f64);
                }
            }
            (!r.is_empty()).then(|| fit_voxel(&r, &y))
        })
        .collect();

    let mut entries = Vec::with_capacity(grid.len());
    let mut definiteness = Vec::with_capacity(grid.len());
    let mut rank_deficient = 0;
    for (j, fit) in fits.into_iter().enumerate() {
        match fit {
            Some((q, deficient)) => {
                if !q.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("baseline fit at voxel {:?}", grid.coords(j)),
                    });
                }
                rank_deficient += deficient as usize;
                definiteness.push(if eig_sym3(&q).min_value() > 0.0 {
                    Definiteness::PositiveDefinite
                } else {
                    Definiteness::Indefinite
                });
                entries.push(q);
            }
            None => {
                entries.push(Sym3::zero());
                definiteness.push(Definiteness::Unobserved);
            }
        }
    }
    Ok(BaselineResult {
        grid,
        entries,
        definiteness,
        rank_deficient,
    })
}
