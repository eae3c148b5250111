//! Synthetic phantoms and rendered views with known ground truth.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::project_volume;
use crate::symcalc::{vech, Sym3};
use crate::volume::{resample, Grid, RigidTransform, ScalarVolume, TensorVolume, View, ViewGeometry};

/// An SPD tensor given by its eigenvalues and an axis-angle rotation (radians)
/// of the coordinate frame that carries them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionTensor {
    pub eigenvalues: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
}

impl RegionTensor {
    pub fn isotropic(value: f64) -> Self {
        RegionTensor {
            eigenvalues: [value; 3],
            rotation: [0.0; 3],
        }
    }

    /// `vech(log Q)`.
    pub fn log_param(&self) -> Result<Sym3> {
        if let Some(&bad) = self.eigenvalues.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: bad });
        }
        let r = Rotation3::new(Vector3::from(self.rotation)).into_inner();
        let logs = Matrix3::from_diagonal(&Vector3::from(self.eigenvalues.map(f64::ln)));
        let m = r * logs * r.transpose();
        vech(&(0.5 * (m + m.transpose())))
    }
}

/// Region shapes in continuous voxel-index coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Ellipsoid { center, radii } => {
                (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
            }
        }
    }
}

// flattening rules out deny_unknown_fields here
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(flatten)]
    pub shape: Shape,
    pub tensor: RegionTensor,
}

/// Random rigid misalignment applied to each rendered view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub max_angle_deg: f64,
    pub max_translation: f64,
}

fn default_views() -> usize {
    7
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

/// Phantom layout, acquisition set and noise model. Later regions override
/// earlier ones where they overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    pub background: RegionTensor,
    #[serde(default)]
    pub regions: Vec<Region>,
    /// Number of spanning directions, used when `directions` is absent.
    #[serde(default = "default_views")]
    pub views: usize,
    #[serde(default)]
    pub directions: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
}

impl Default for PhantomSpec {
    /// 24³ grid, an oblique ellipsoid and an overlapping box in an isotropic
    /// background, seven views, σ = 0.05.
    fn default() -> Self {
        PhantomSpec {
            dims: [24; 3],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            background: RegionTensor::isotropic(0.4),
            regions: vec![
                Region {
                    shape: Shape::Ellipsoid {
                        center: [11.5, 11.5, 11.5],
                        radii: [8.5, 6.0, 7.0],
                    },
                    tensor: RegionTensor {
                        eigenvalues: [1.0, 0.35, 0.15],
                        rotation: [0.3, 0.5, 0.2],
                    },
                },
                Region {
                    shape: Shape::Box {
                        min: [3.0, 13.0, 4.0],
                        max: [10.0, 20.0, 12.0],
                    },
                    tensor: RegionTensor {
                        eigenvalues: [0.8, 0.6, 0.2],
                        rotation: [0.0, 0.0, 0.7],
                    },
                },
            ],
            views: 7,
            directions: None,
            sigma: 0.05,
            seed: Some(20),
            perturbation: None,
        }
    }
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, self.origin)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.background.log_param()?;
        for r in &self.regions {
            r.tensor.log_param()?;
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.sigma > 0.0 && self.seed.is_none() {
            return Err(Error::InvalidConfig("a seed is required when sigma > 0".into()));
        }
        if let Some(p) = &self.perturbation {
            if self.seed.is_none() {
                return Err(Error::InvalidConfig("a seed is required for rigid perturbations".into()));
            }
            if !(p.max_angle_deg >= 0.0 && p.max_translation >= 0.0) {
                return Err(Error::InvalidConfig("perturbation bounds must be >= 0".into()));
            }
        }
        self.view_directions()?;
        Ok(())
    }

    pub fn view_directions(&self) -> Result<Vec<Vector3<f64>>> {
        match &self.directions {
            Some(d) if d.is_empty() => Err(Error::EmptyInput("no view directions".into())),
            Some(d) => d
                .iter()
                .map(|v| crate::volume::unit_direction(Vector3::from(*v)))
                .collect(),
            None => spanning_directions(self.views),
        }
    }
}

/// Ground-truth log-parameter field `X = vech(log Q)` of a phantom.
pub fn make_phantom(spec: &PhantomSpec) -> Result<TensorVolume> {
    let grid = spec.grid()?;
    let background = spec.background.log_param()?;
    let regions: Vec<(Shape, Sym3)> = spec
        .regions
        .iter()
        .map(|r| Ok((r.shape, r.tensor.log_param()?)))
        .collect::<Result<_>>()?;
    let params = (0..grid.len())
        .map(|j| {
            let c = grid.coords(j).map(|v| v as f64);
            regions
                .iter()
                .rev()
                .find(|(s, _)| s.contains(c))
                .map_or(background, |(_, x)| *x)
        })
        .collect();
    TensorVolume::new(grid, params, None)
}

/// One standard-normal draw per `(seed, view, voxel)`, independent of the
/// order in which voxels are visited.
fn noise_sample(seed: u64, view: u64, voxel: u64, normal: &Normal<f64>) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&view.to_le_bytes());
    key[16..24].copy_from_slice(&voxel.to_le_bytes());
    normal.sample(&mut ChaCha8Rng::from_seed(key))
}

/// Renders `vᵀ exp(S_j) v` plus Gaussian noise of standard deviation `sigma`,
/// clamped at zero. Views come back aligned (identity transforms).
pub fn render_views(truth: &TensorVolume, directions: &[Vector3<f64>], sigma: f64, seed: Option<u64>) -> Result<Vec<View>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {sigma}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let seed = match (sigma > 0.0, seed) {
        (true, None) => return Err(Error::InvalidConfig("a seed is required when sigma > 0".into())),
        (_, s) => s.unwrap_or(0),
    };
    directions
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let clean = project_volume(truth, d)?;
            let geometry = ViewGeometry::aligned(*d, format!("view{i}"))?;
            if sigma == 0.0 {
                return Ok(View { volume: clean, geometry });
            }
            let (grid, data, mask) = clean.into_parts();
            let noisy: Vec<f32> = data
                .par_iter()
                .enumerate()
                .map(|(j, &v)| {
                    let valid = mask.as_ref().is_none_or(|m| m[j]);
                    if !valid {
                        return 0.0;
                    }
                    (v as f64 + sigma * noise_sample(seed, i as u64, j as u64, &normal)).max(0.0) as f32
                })
                .collect();
            Ok(View {
                volume: ScalarVolume::new(grid, noisy, mask)?,
                geometry,
            })
        })
        .collect()
}

/// Known rigid misalignment of view `i`, mapping the view frame onto the
/// reference frame.
pub fn perturbation_transform(p: &Perturbation, seed: u64, view: usize) -> Result<RigidTransform> {
    let uniform = rand_distr::Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(view as u64).to_le_bytes());
    key[24] = 1;
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut draw = || Vector3::from_fn(|_, _| uniform.sample(&mut rng));
    let axis = draw();
    let translation = draw() * p.max_translation;
    let angle = p.max_angle_deg.to_radians() * uniform.sample(&mut rng);
    let axis_angle = if axis.norm() > 0.0 {
        axis.normalize() * angle
    } else {
        Vector3::zeros()
    };
    RigidTransform::from_axis_angle(axis_angle, translation)
}

/// Phantom plus rendered views.
#[derive(Clone, Debug)]
pub struct Synthesized {
    pub truth: TensorVolume,
    pub views: Vec<View>,
}

/// Builds the phantom, renders its views and, if requested, moves each view
/// into its own misaligned frame with the true transform recorded.
pub fn synthesize(spec: &PhantomSpec) -> Result<Synthesized> {
    spec.validate()?;
    let truth = make_phantom(spec)?;
    let directions = spec.view_directions()?;
    let mut views = render_views(&truth, &directions, spec.sigma, spec.seed)?;
    if let (Some(p), Some(seed)) = (&spec.perturbation, spec.seed) {
        for (i, v) in views.iter_mut().enumerate() {
            let t = perturbation_transform(p, seed, i)?;
            v.volume = resample(&v.volume, &t.inverse(), truth.grid())?;
            v.geometry.transform = t;
        }
    }
    Ok(Synthesized { truth, views })
}

fn from_angles(tilt_deg: f64, azimuth_deg: f64) -> Vector3<f64> {
    let (t, p) = (tilt_deg.to_radians(), azimuth_deg.to_radians());
    Vector3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos())
}

/// `n ≥ 6` probe directions whose outer products span the symmetric
/// matrices: the beam axis, four 50° tilts about x and y, one diagonal tilt,
/// then a golden-angle fan of shallower tilts.
pub fn spanning_directions(n: usize) -> Result<Vec<Vector3<f64>>> {
    if n < 6 {
        return Err(Error::InvalidConfig(format!("at least 6 directions are needed, got {n}")));
    }
    let mut dirs = vec![
        Vector3::z(),
        from_angles(50.0, 0.0),
        from_angles(50.0, 180.0),
        from_angles(50.0, 90.0),
        from_angles(50.0, 270.0),
        from_angles(50.0, 45.0),
    ];
    for k in 0..n - 6 {
        let azimuth = (135.0 + k as f64 * 137.507_764_05) % 360.0;
        let tilt = if k % 2 == 0 { 25.0 } else { 40.0 };
        dirs.push(from_angles(tilt, azimuth));
    }
    Ok(dirs)
}

/// Gram matrix of the rows `(v ⊗ v)ᵀ · D`.
pub fn direction_gram(directions: &[Vector3<f64>]) -> Matrix6<f64> {
    let mut g = Matrix6::zeros();
    for d in directions {
        let r = crate::solver::design_row(d);
        for a in 0..6 {
            for b in 0..6 {
                g[(a, b)] += r[a] * r[b];
            }
        }
    }
    g
}

/// Views on which the unconstrained per-voxel fit turns indefinite: six
/// consistent spanning views of the identity, plus a bright view along the
/// beam axis and a dark one tilted a few degrees away from it.
pub fn adversarial_views(grid: Grid) -> Result<Vec<View>> {
    let mut views: Vec<View> = spanning_directions(6)?
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(View {
                volume: ScalarVolume::constant(grid, 1.0)?,
                geometry: ViewGeometry::aligned(d, format!("span{i}"))?,
            })
        })
        .collect::<Result<_>>()?;
    for (name, dir, value) in [("bright", Vector3::z(), 50.0), ("dark", from_angles(3.0, 0.0), 1e-3)] {
        views.push(View {
            volume: ScalarVolume::constant(grid, value)?,
            geometry: ViewGeometry::aligned(dir, name)?,
        });
    }
    Ok(views)
}
