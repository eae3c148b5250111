//! Volume containers, rigid transforms and the reference-frame plumbing.

mod io;
mod resample;
mod transform;

pub use io::{
    read_manifest, read_tensor, read_volume, write_manifest, write_tensor, write_volume,
    AcquisitionEntry, TransformRecord, CVOL_MAGIC,
};
pub use resample::resample;
pub use transform::{chain_to_reference, compose_chain, select_reference, RigidTransform};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symcalc::Sym3;

/// Regular voxel lattice. Voxel `(i, j, k)` sits at
/// `origin + (i·sx, j·sy, k·sz)` in millimetres; storage is x-fastest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Grid {
            dims,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Grid::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGrid(format!("dims {:?} must be positive", self.dims)));
        }
        if self.dims.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n)).is_none() {
            return Err(Error::InvalidGrid(format!("dims {:?} overflow", self.dims)));
        }
        if !self.spacing.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "spacing {:?} must be finite and positive",
                self.spacing
            )));
        }
        if !self.origin.iter().all(|o| o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin {:?} must be finite", self.origin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let rest = index / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Index distance to the `+axis` neighbour.
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    pub fn world(&self, index: usize) -> Vector3<f64> {
        let c = self.coords(index);
        Vector3::from_fn(|a, _| self.origin[a] + c[a] as f64 * self.spacing[a])
    }

    /// Same lattice up to a relative tolerance on spacing and origin.
    pub fn matches(&self, other: &Grid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        self.dims == other.dims
            && (0..3).all(|a| close(self.spacing[a], other.spacing[a]))
            && (0..3).all(|a| close(self.origin[a], other.origin[a]))
    }
}

fn check_mask(grid: &Grid, mask: &Option<Vec<bool>>) -> Result<()> {
    match mask {
        Some(m) if m.len() != grid.len() => Err(Error::InvalidGrid(format!(
            "mask has {} entries, grid has {} voxels",
            m.len(),
            grid.len()
        ))),
        _ => Ok(()),
    }
}

/// Scalar intensities on a grid with an optional validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    grid: Grid,
    data: Vec<f32>,
    mask: Option<Vec<bool>>,
}

impl ScalarVolume {
    /// Negative intensities are clamped to zero; non-finite ones are rejected.
    pub fn new(grid: Grid, mut data: Vec<f32>, mask: Option<Vec<bool>>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "buffer has {} values, grid has {} voxels",
                data.len(),
                grid.len()
            )));
        }
        check_mask(&grid, &mask)?;
        for (idx, v) in data.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("scalar volume at voxel {:?}", grid.coords(idx)),
                });
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(ScalarVolume { grid, data, mask })
    }

    pub fn constant(grid: Grid, value: f32) -> Result<Self> {
        ScalarVolume::new(grid, vec![value; grid.len()], None)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn is_valid(&self, index: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[index])
    }

    pub fn valid_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => self.data.len(),
        }
    }

    /// Min and max over valid voxels, `None` if nothing is valid.
    pub fn valid_range(&self) -> Option<(f32, f32)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_valid(*i))
            .fold(None, |acc, (_, &v)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    pub fn into_parts(self) -> (Grid, Vec<f32>, Option<Vec<bool>>) {
        (self.grid, self.data, self.mask)
    }
}

/// Per-voxel log-domain tensor parameters `X_j`; the tensor itself is
/// `exp(unvec(D · X_j))` and is positive definite for any finite `X_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorVolume {
    grid: Grid,
    params: Vec<Sym3>,
    mask: Option<Vec<bool>>,
}

impl TensorVolume {
    pub fn new(grid: Grid, params: Vec<Sym3>, mask: Option<Vec<bool>>) -> Result<Self> {
        grid.validate()?;
        if params.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "tensor buffer has {} voxels, grid has {}",
                params.len(),
                grid.len()
            )));
        }
        check_mask(&grid, &mask)?;
        if let Some(idx) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor volume at voxel {:?}", grid.coords(idx)),
            });
        }
        Ok(TensorVolume { grid, params, mask })
    }

    pub fn uniform(grid: Grid, value: Sym3) -> Result<Self> {
        TensorVolume::new(grid, vec![value; grid.len()], None)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &[Sym3] {
        &self.params
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn is_valid(&self, index: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[index])
    }

    pub fn valid_count(&self) -> usize {
        match &self.mask {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => self.params.len(),
        }
    }

    pub fn into_parts(self) -> (Grid, Vec<Sym3>, Option<Vec<bool>>) {
        (self.grid, self.params, self.mask)
    }
}

/// Acquisition direction and pose of one input volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGeometry {
    direction: Vector3<f64>,
    pub transform: RigidTransform,
    pub source_id: String,
}

impl ViewGeometry {
    /// `direction` is normalised; a zero or non-finite direction is rejected.
    pub fn new(direction: Vector3<f64>, transform: RigidTransform, source_id: impl Into<String>) -> Result<Self> {
        Ok(ViewGeometry {
            direction: unit_direction(direction)?,
            transform,
            source_id: source_id.into(),
        })
    }

    pub fn aligned(direction: Vector3<f64>, source_id: impl Into<String>) -> Result<Self> {
        ViewGeometry::new(direction, RigidTransform::identity(), source_id)
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }
}

pub fn unit_direction(direction: Vector3<f64>) -> Result<Vector3<f64>> {
    let norm = direction.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "direction {:?} cannot be normalised",
            direction.as_slice()
        )));
    }
    Ok(direction / norm)
}

/// A scalar volume together with its acquisition geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub volume: ScalarVolume,
    pub geometry: ViewGeometry,
}

/// Resamples every view onto the grid of `reference` using each view's
/// transform; the returned views carry identity transforms.
pub fn align_views(views: &[View], reference: usize) -> Result<Vec<View>> {
    let target = views
        .get(reference)
        .ok_or(Error::IndexOutOfRange {
            what: "views",
            index: reference,
            len: views.len(),
        })?
        .volume
        .grid;
    views
        .iter()
        .map(|v| {
            Ok(View {
                volume: resample(&v.volume, &v.geometry.transform, &target)?,
                geometry: ViewGeometry::new(
                    v.geometry.direction,
                    RigidTransform::identity(),
                    v.geometry.source_id.clone(),
                )?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_indexing_round_trip() {
        let g = Grid::with_dims([3, 4, 5]).unwrap();
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
        assert_eq!(g.stride(2), 12);
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(Grid::with_dims([0, 2, 2]).is_err());
        assert!(Grid::new([2, 2, 2], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Grid::new([2, 2, 2], [1.0; 3], [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn scalar_volume_clamps_and_rejects() {
        let g = Grid::with_dims([2, 1, 1]).unwrap();
        let v = ScalarVolume::new(g, vec![-1.0, 2.0], None).unwrap();
        assert_eq!(v.data(), &[0.0, 2.0]);
        assert!(ScalarVolume::new(g, vec![f32::NAN, 2.0], None).is_err());
        assert!(ScalarVolume::new(g, vec![1.0], None).is_err());
        assert!(ScalarVolume::new(g, vec![1.0, 1.0], Some(vec![true])).is_err());
    }

    #[test]
    fn view_direction_is_normalised() {
        let v = ViewGeometry::aligned(Vector3::new(0.0, 0.0, 2.0), "a").unwrap();
        assert_eq!(*v.direction(), Vector3::new(0.0, 0.0, 1.0));
        assert!(ViewGeometry::aligned(Vector3::zeros(), "b").is_err());
    }
}
