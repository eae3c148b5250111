use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::{Grid, RigidTransform, ScalarVolume};
use crate::error::Result;

const EDGE_TOLERANCE: f64 = 1e-9;

/// Trilinear resampling of `src` onto `target`, where `transform` maps the
/// source frame into the target frame. Target voxels whose preimage falls
/// outside the source lattice, or that would blend invalid source voxels,
/// come back masked.
pub fn resample(src: &ScalarVolume, transform: &RigidTransform, target: &Grid) -> Result<ScalarVolume> {
    target.validate()?;
    let sg = src.grid();

    // target index -> source index as one affine map, so that identity
    // transforms on identical grids land exactly on source voxels
    let rt = transform.rotation().transpose();
    let linear = Matrix3::from_fn(|a, b| rt[(a, b)] * target.spacing[b] / sg.spacing[a]);
    let shifted = rt * (Vector3::from(target.origin) - transform.translation());
    let offset = Vector3::from_fn(|a, _| (shifted[a] - sg.origin[a]) / sg.spacing[a]);

    let samples: Vec<Option<f32>> = (0..target.len())
        .into_par_iter()
        .map(|idx| {
            let c = target.coords(idx);
            let r = Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64);
            let p = linear * r + offset;
            sample(src, [p[0], p[1], p[2]])
        })
        .collect();

    let mut any_invalid = false;
    let mut data = Vec::with_capacity(samples.len());
    let mut mask = Vec::with_capacity(samples.len());
    for s in samples {
        any_invalid |= s.is_none();
        mask.push(s.is_some());
        data.push(s.unwrap_or(0.0));
    }
    ScalarVolume::new(*target, data, any_invalid.then_some(mask))
}

/// Lower corner index and fraction along one axis, `None` outside.
fn axis_cell(x: f64, n: usize) -> Option<(usize, f64)> {
    let hi = (n - 1) as f64;
    if !(x >= -EDGE_TOLERANCE && x <= hi + EDGE_TOLERANCE) {
        return None;
    }
    let x = x.clamp(0.0, hi);
    if n == 1 {
        return Some((0, 0.0));
    }
    let i0 = (x.floor() as usize).min(n - 2);
    Some((i0, x - i0 as f64))
}

fn sample(src: &ScalarVolume, p: [f64; 3]) -> Option<f32> {
    let g = src.grid();
    let mut cells = [(0usize, 0.0f64); 3];
    for a in 0..3 {
        cells[a] = axis_cell(p[a], g.dims[a])?;
    }
    let data = src.data();
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let (i0, f) = cells[a];
            if corner >> a & 1 == 1 {
                w *= f;
                ijk[a] = (i0 + 1).min(g.dims[a] - 1);
            } else {
                w *= 1.0 - f;
                ijk[a] = i0;
            }
        }
        if w == 0.0 {
            continue;
        }
        let idx = g.index(ijk[0], ijk[1], ijk[2]);
        if !src.is_valid(idx) {
            return None;
        }
        acc += w * data[idx] as f64;
    }
    Some(acc as f32)
}
