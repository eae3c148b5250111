use nalgebra::{Matrix6, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tensorcomp::eval::*;
use tensorcomp::model::project_volume;
use tensorcomp::solver::SolveConfig;
use tensorcomp::synth::*;
use tensorcomp::volume::{Grid, ScalarVolume, View};

/// Gram matrix of `(x², 2xy, 2xz, y², 2yz, z²)` rows, built independently.
fn gram(dirs: &[Vector3<f64>]) -> Matrix6<f64> {
    let mut g = Matrix6::zeros();
    for v in dirs {
        let (x, y, z) = (v[0], v[1], v[2]);
        let r = nalgebra::Vector6::new(x * x, 2.0 * x * y, 2.0 * x * z, y * y, 2.0 * y * z, z * z);
        g += r * r.transpose();
    }
    g
}

fn condition(g: &Matrix6<f64>) -> f64 {
    let e = g.symmetric_eigenvalues();
    e.max() / e.min()
}

fn tiny_spec(views: usize, sigma: f64) -> PhantomSpec {
    PhantomSpec {
        dims: [8, 8, 8],
        views,
        sigma,
        seed: Some(9),
        regions: vec![Region {
            shape: Shape::Box {
                min: [2.0, 2.0, 2.0],
                max: [5.0, 6.0, 4.0],
            },
            tensor: RegionTensor {
                eigenvalues: [1.0, 0.4, 0.2],
                rotation: [0.3, 0.2, 0.1],
            },
        }],
        ..PhantomSpec::default()
    }
}

#[test]
fn default_six_directions_have_full_rank() {
    let dirs = spanning_directions(6).unwrap();
    assert!(dirs.iter().all(|d| (d.norm() - 1.0).abs() < 1e-15));
    let g = gram(&dirs);
    assert!(g.determinant() > 1e-3, "{}", g.determinant());
    assert!((direction_gram(&dirs) - g).abs().max() < 1e-14);
}

#[test]
fn coordinate_axes_alone_are_insufficient() {
    let g = gram(&[Vector3::x(), Vector3::y(), Vector3::z()]);
    let e = g.symmetric_eigenvalues();
    assert_eq!(e.iter().filter(|v| v.abs() > 1e-12).count(), 3);
}

#[test]
fn fan_directions_stay_well_conditioned() {
    assert!(condition(&gram(&spanning_directions(9).unwrap())) < 100.0);
    for n in 6..=40 {
        let c = condition(&gram(&spanning_directions(n).unwrap()));
        assert!(c < 100.0, "n = {n}: {c}");
    }
}

#[test]
fn noise_has_requested_spread() {
    let spec = PhantomSpec {
        dims: [50, 50, 40],
        regions: vec![],
        views: 6,
        directions: Some(vec![[0.0, 0.0, 1.0]]),
        sigma: 0.05,
        seed: Some(123),
        ..PhantomSpec::default()
    };
    let noisy = synthesize(&spec).unwrap();
    let clean = project_volume(&noisy.truth, &Vector3::z()).unwrap();
    let diffs: Vec<f64> = noisy.views[0]
        .volume
        .data()
        .iter()
        .zip(clean.data())
        .map(|(a, b)| (*a as f64) - (*b as f64))
        .collect();
    assert!(diffs.len() >= 100_000);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    assert!((std - 0.05).abs() <= 0.05 * 0.05, "{std}");
}

#[test]
fn noiseless_views_equal_projections() {
    let s = synthesize(&tiny_spec(7, 0.0)).unwrap();
    for v in &s.views {
        let p = project_volume(&s.truth, v.geometry.direction()).unwrap();
        assert_eq!(p.data(), v.volume.data());
        assert!(v.geometry.transform.is_identity(0.0));
    }
}

#[test]
fn noiseless_leave_one_out_is_exact() {
    let s = synthesize(&tiny_spec(7, 0.0)).unwrap();
    let res = leave_one_out(&s.views, &SolveConfig::with_lambda(0.0)).unwrap();
    assert_eq!(res.rounds.len(), 7);
    assert!(res.mean_psnr_db >= 80.0, "{:?}", res.rounds);
    let mean = res.rounds.iter().map(|r| r.psnr.db).sum::<f64>() / 7.0;
    assert_eq!(mean, res.mean_psnr_db);
}

#[test]
fn rounds_do_not_depend_on_order() {
    let s = synthesize(&tiny_spec(7, 0.05)).unwrap();
    let cfg = SolveConfig::with_lambda(1.0);
    let forward = leave_one_out(&s.views, &cfg).unwrap();
    let reversed: Vec<View> = s.views.iter().rev().cloned().collect();
    let backward = leave_one_out(&reversed, &cfg).unwrap();
    for r in &forward.rounds {
        let twin = backward.rounds.iter().find(|b| b.source_id == r.source_id).unwrap();
        assert!((twin.psnr.db - r.psnr.db).abs() < 1e-6, "{} vs {}", twin.psnr.db, r.psnr.db);
    }
}

#[test]
fn sweep_table_shape() {
    let s = synthesize(&tiny_spec(6, 0.05)).unwrap();
    let cfg = SolveConfig::default();
    let table = lambda_sweep("synthetic", &s.views, &[0.0, 1.0, 10.0, 100.0], &cfg, true).unwrap();
    assert_eq!(table.results.len(), 4);
    assert_eq!(table.means().len(), 4);
    let csv = table.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "dataset,method,lambda,round,psnr_db,valid_voxels,clamped_voxels");
    assert_eq!(lines.len() - 1, (4 + 1) * 6);
    assert!(lines.iter().any(|l| l.starts_with("synthetic,baseline,,")));
    let single = lambda_sweep("one", &s.views, &[10.0], &cfg, false).unwrap();
    assert_eq!(single.results.len(), 1);
    assert_eq!(single.to_csv().unwrap().lines().count(), 1 + 6);
}

fn noisy_copy(v: &ScalarVolume, sigma: f64, seed: u64) -> ScalarVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
    let data = v.data().iter().map(|x| x + rng.sample(normal) as f32).collect();
    ScalarVolume::new(*v.grid(), data, v.mask().map(<[bool]>::to_vec)).unwrap()
}

#[test]
fn psnr_falls_as_noise_grows() {
    let s = synthesize(&tiny_spec(6, 0.0)).unwrap();
    let reference = &s.views[0].volume;
    let mut last = f64::INFINITY;
    for sigma in [0.01, 0.05, 0.1] {
        // the same underlying draws, scaled
        let p = psnr(&noisy_copy(reference, sigma, 5), reference, None).unwrap().db;
        assert!(p < last, "{p} !< {last}");
        last = p;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_symmetric_with_fixed_peak(a in prop::collection::vec(0.0f32..2.0, 12), b in prop::collection::vec(0.0f32..2.0, 12), peak in 0.5f64..4.0) {
        prop_assume!(a != b);
        let g = Grid::with_dims([3, 2, 2]).unwrap();
        let va = ScalarVolume::new(g, a, None).unwrap();
        let vb = ScalarVolume::new(g, b, None).unwrap();
        let ab = psnr(&va, &vb, Some(peak)).unwrap().db;
        let ba = psnr(&vb, &va, Some(peak)).unwrap().db;
        prop_assert_eq!(ab, ba);
    }
}
