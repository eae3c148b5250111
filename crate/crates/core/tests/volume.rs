use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tensorcomp::symcalc::Sym3;
use tensorcomp::volume::*;

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let aa = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let t = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
    RigidTransform::from_axis_angle(aa, t).unwrap()
}

/// Chain by explicit matrix products, independent of `compose_chain`.
fn chain_matrices(pairwise: &[RigidTransform], from: usize, to: usize) -> (Matrix3<f64>, Vector3<f64>) {
    let (mut r, mut t) = (Matrix3::identity(), Vector3::zeros());
    let (lo, hi) = (from.min(to), from.max(to));
    for p in &pairwise[lo..hi] {
        // x ↦ R_p (R x + t) + t_p
        t = p.rotation() * t + p.translation();
        r = p.rotation() * r;
    }
    if from > to {
        let rt = r.transpose();
        (rt, -(rt * t))
    } else {
        (r, t)
    }
}

#[test]
fn chain_and_inverse_chain_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let pairwise: Vec<RigidTransform> = (0..4).map(|_| random_transform(&mut rng)).collect();
        let reference = select_reference(5).unwrap();
        for i in 0..5 {
            let fwd = compose_chain(&pairwise, i, reference).unwrap();
            let back = compose_chain(&pairwise, reference, i).unwrap();
            assert!(fwd.compose(&back).distance(&RigidTransform::identity()) < 1e-12);
            let (r, t) = chain_matrices(&pairwise, i, reference);
            assert!((fwd.rotation() - r).abs().max() < 1e-12);
            assert!((fwd.translation() - t).abs().max() < 1e-12);
        }
    }
}

#[test]
fn middle_reference() {
    assert_eq!(select_reference(9).unwrap(), 4);
    assert_eq!(select_reference(1).unwrap(), 0);
    assert!(select_reference(0).is_err());
}

#[test]
fn identity_chain_stays_identity() {
    let pairwise = vec![RigidTransform::identity(); 8];
    for t in chain_to_reference(&pairwise, 4, None).unwrap() {
        assert!(t.is_identity(0.0));
    }
}

#[test]
fn half_voxel_shift_of_ramp() {
    let g = Grid::new([8, 3, 3], [1.0; 3], [0.0; 3]).unwrap();
    let data = (0..g.len()).map(|j| 0.25 * g.coords(j)[0] as f32).collect();
    let src = ScalarVolume::new(g, data, None).unwrap();
    let out = resample(&src, &RigidTransform::translation_only(Vector3::new(0.5, 0.0, 0.0)), &g).unwrap();
    for j in 0..g.len() {
        let x = g.coords(j)[0] as f64;
        if out.is_valid(j) {
            assert!((out.data()[j] as f64 - 0.25 * (x - 0.5)).abs() < 1e-12);
        } else {
            assert_eq!(x, 0.0);
        }
    }
}

fn small_volume() -> impl Strategy<Value = ScalarVolume> {
    (1usize..5, 1usize..5, 1usize..4, any::<bool>(), any::<u64>()).prop_map(|(nx, ny, nz, masked, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new([nx, ny, nz], [0.5, 1.0, 1.5], [-1.0, 0.0, 2.0]).unwrap();
        let data = (0..g.len()).map(|_| rng.random_range(0.0f32..100.0)).collect();
        let mask = masked.then(|| (0..g.len()).map(|_| rng.random_bool(0.7)).collect());
        ScalarVolume::new(g, data, mask).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chain_through_any_intermediate(seed in any::<u64>(), i in 0usize..6, k in 0usize..6, j in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairwise: Vec<RigidTransform> = (0..5).map(|_| random_transform(&mut rng)).collect();
        let direct = compose_chain(&pairwise, i, j).unwrap();
        let via = compose_chain(&pairwise, k, j).unwrap().compose(&compose_chain(&pairwise, i, k).unwrap());
        prop_assert!(direct.distance(&via) < 1e-12);
    }

    #[test]
    fn resample_stays_within_source_range(vol in small_volume(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aa = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let t = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let tr = RigidTransform::from_axis_angle(aa, t).unwrap();
        let out = resample(&vol, &tr, vol.grid()).unwrap();
        if let Some((lo, hi)) = vol.valid_range() {
            for j in 0..out.grid().len() {
                if out.is_valid(j) {
                    let v = out.data()[j];
                    prop_assert!(v >= lo - 1e-4 * hi.abs() && v <= hi + 1e-4 * hi.abs());
                }
            }
        } else {
            prop_assert_eq!(out.valid_count(), 0);
        }
    }

    #[test]
    fn scalar_files_round_trip(vol in small_volume()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.cvol");
        write_volume(&vol, &p).unwrap();
        let back = read_volume(&p).unwrap();
        prop_assert_eq!(back.grid(), vol.grid());
        prop_assert_eq!(back.data(), vol.data());
        prop_assert_eq!(back.mask(), vol.mask());
    }

    #[test]
    fn tensor_files_round_trip(values in prop::collection::vec(-50.0f32..50.0, 6 * 12), masked in any::<bool>()) {
        let g = Grid::new([3, 2, 2], [1.0, 2.0, 0.5], [0.0, 1.0, -3.0]).unwrap();
        let params: Vec<Sym3> = values.chunks(6).map(|c| Sym3(std::array::from_fn(|k| c[k] as f64))).collect();
        let mask = masked.then(|| (0..g.len()).map(|j| j % 4 != 1).collect());
        let t = TensorVolume::new(g, params, mask).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.cvol");
        write_tensor(&t, &p).unwrap();
        let back = read_tensor(&p).unwrap();
        prop_assert_eq!(back.params(), t.params());
        prop_assert_eq!(back.mask(), t.mask());
    }
}

#[test]
fn manifest_round_trip_and_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::with_dims([4, 4, 4]).unwrap();
    let vol = ScalarVolume::constant(g, 2.0).unwrap();
    write_volume(&vol, dir.path().join("a.cvol")).unwrap();
    let shift = RigidTransform::translation_only(Vector3::new(1.0, 0.0, 0.0));
    let entries = vec![
        AcquisitionEntry {
            volume: "a.cvol".into(),
            direction: [0.0, 0.0, 2.0],
            transform: TransformRecord::identity(),
        },
        AcquisitionEntry {
            volume: "a.cvol".into(),
            direction: [1.0, 0.0, 0.0],
            transform: TransformRecord::from(&shift),
        },
    ];
    write_manifest(&entries, dir.path().join("views.json")).unwrap();
    let views = read_manifest(dir.path().join("views.json")).unwrap();
    assert_eq!(*views[0].geometry.direction(), Vector3::z());
    let aligned = align_views(&views, 0).unwrap();
    assert!(aligned.iter().all(|v| v.geometry.transform.is_identity(0.0)));
    // the shifted view loses its first slab
    assert_eq!(aligned[1].volume.valid_count(), 48);
    assert!(read_manifest(dir.path().join("missing.json")).is_err());
}
