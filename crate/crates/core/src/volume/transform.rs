use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const ORTHONORMAL_TOLERANCE: f64 = 1e-10;

/// `x ↦ R·x + t`, millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entries".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho > ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidTransform(format!("rotation determinant {det} is not +1")));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation_only(t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation by `|axis_angle|` radians about `axis_angle`, then translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let rotation = nalgebra::Rotation3::new(axis_angle).into_inner();
        RigidTransform::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest absolute entry difference in rotation and translation.
    pub fn distance(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }

    pub fn is_identity(&self, tolerance: f64) -> bool {
        self.distance(&RigidTransform::identity()) <= tolerance
    }
}

/// Zero-based index of the middle image, `floor((n - 1) / 2)`.
pub fn select_reference(n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::EmptyInput("cannot pick a reference from zero volumes".into()));
    }
    Ok((n - 1) / 2)
}

/// Transform from frame `from` to frame `to`, given `pairwise[k]` mapping
/// frame `k` to frame `k + 1`. Frames run `0..=pairwise.len()`.
pub fn compose_chain(pairwise: &[RigidTransform], from: usize, to: usize) -> Result<RigidTransform> {
    let frames = pairwise.len() + 1;
    for index in [from, to] {
        if index >= frames {
            return Err(Error::IndexOutOfRange {
                what: "frames",
                index,
                len: frames,
            });
        }
    }
    let (lo, hi) = (from.min(to), from.max(to));
    let forward = pairwise[lo..hi]
        .iter()
        .fold(RigidTransform::identity(), |acc, t| t.compose(&acc));
    Ok(if from <= to { forward } else { forward.inverse() })
}

/// Chains every frame to `reference`. `refined[i]`, when present, replaces
/// the chained initial estimate for frame `i` after validation; this is where
/// an externally refined registration plugs in.
pub fn chain_to_reference(
    pairwise: &[RigidTransform],
    reference: usize,
    refined: Option<&[Option<RigidTransform>]>,
) -> Result<Vec<RigidTransform>> {
    let frames = pairwise.len() + 1;
    if let Some(r) = refined {
        if r.len() != frames {
            return Err(Error::InvalidConfig(format!(
                "{} refined transforms supplied for {frames} frames",
                r.len()
            )));
        }
    }
    (0..frames)
        .map(|i| {
            match refined.and_then(|r| r[i]) {
                Some(t) => {
                    // re-validate: caller-built transforms bypass `new`
                    RigidTransform::new(t.rotation, t.translation)
                }
                None => compose_chain(pairwise, i, reference),
            }
        })
        .collect()
}
