mod oracle;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tensorcomp::symcalc::Sym3;
use tensorcomp::tvreg::*;
use tensorcomp::volume::{Grid, TensorVolume};

fn random_field(rng: &mut ChaCha8Rng, dims: [usize; 3], spread: f64, masked: bool) -> TensorVolume {
    let g = Grid::with_dims(dims).unwrap();
    let params = (0..g.len())
        .map(|_| Sym3(std::array::from_fn(|_| rng.random_range(-spread..spread))))
        .collect();
    let mask = masked.then(|| (0..g.len()).map(|_| rng.random_bool(0.8)).collect());
    TensorVolume::new(g, params, mask).unwrap()
}

fn nested(field: &TensorVolume) -> Vec<Vec<Vec<Option<[f64; 6]>>>> {
    let g = field.grid();
    let [nx, ny, nz] = g.dims;
    (0..nx)
        .map(|x| {
            (0..ny)
                .map(|y| {
                    (0..nz)
                        .map(|z| {
                            let j = g.index(x, y, z);
                            field.is_valid(j).then(|| field.params()[j].0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[test]
fn energy_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..30 {
        let f = random_field(&mut rng, [4, 3, 5], 0.05, i % 2 == 1);
        let cfg = TvConfig::new(rng.random_range(0.1..20.0), 0.01).unwrap();
        let expected = cfg.lambda * oracle::brute_force_tv(&nested(&f), cfg.delta);
        let got = tv_energy(&f, &cfg);
        assert!((got - expected).abs() <= 1e-12 * expected.abs(), "{got} vs {expected}");
    }
}

#[test]
fn squared_residuals_reproduce_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for i in 0..50 {
        let f = random_field(&mut rng, [5, 4, 3], 0.1, i % 3 == 0);
        let cfg = TvConfig::new(rng.random_range(0.01..100.0), rng.random_range(0.001..0.2)).unwrap();
        let energy = tv_energy(&f, &cfg);
        let sq: f64 = tv_residuals(&f, &cfg).iter().map(|r| r.value * r.value).sum();
        assert!((sq - energy).abs() <= 1e-12 * energy, "{sq} vs {energy}");
    }
}

#[test]
fn residual_slopes_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = TvConfig::new(10.0, 0.01).unwrap();
    let f = random_field(&mut rng, [3, 3, 2], 0.2, false);
    let residuals = tv_residuals(&f, &cfg);
    let h = 1e-7;
    for r in &residuals {
        let g = f.params()[r.edge.to].0[r.channel as usize] - f.params()[r.edge.from].0[r.channel as usize];
        if (g.abs() - cfg.delta).abs() < 1e-4 {
            continue;
        }
        let value = |g: f64| {
            let hv = if g.abs() <= cfg.delta {
                0.5 * g * g
            } else {
                cfg.delta * (g.abs() - 0.5 * cfg.delta)
            };
            cfg.lambda.sqrt() * g.signum() * hv.sqrt()
        };
        assert!((value(g) - r.value).abs() < 1e-14);
        let fd = (value(g + h) - value(g - h)) / (2.0 * h);
        assert!((fd - r.slope).abs() <= 1e-6 * r.slope.abs(), "{fd} vs {}", r.slope);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_is_nonnegative_and_shift_invariant(seed in any::<u64>(), channel in 0usize..6, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_field(&mut rng, [3, 4, 2], 0.3, seed % 2 == 0);
        let cfg = TvConfig::new(3.0, 0.01).unwrap();
        let e = tv_energy(&f, &cfg);
        prop_assert!(e >= 0.0);
        let shifted: Vec<Sym3> = f.params().iter().map(|p| {
            let mut q = *p;
            q.0[channel] += shift;
            q
        }).collect();
        let g = TensorVolume::new(*f.grid(), shifted, f.mask().map(<[bool]>::to_vec)).unwrap();
        prop_assert!((tv_energy(&g, &cfg) - e).abs() <= 1e-9 * e.max(1.0));
    }

    #[test]
    fn energy_zero_iff_constant(value in prop::array::uniform6(-3.0f64..3.0), bump in 1e-6f64..1.0, at in 0usize..24) {
        let g = Grid::with_dims([4, 3, 2]).unwrap();
        let cfg = TvConfig::new(1.0, 0.01).unwrap();
        let constant = TensorVolume::uniform(g, Sym3(value)).unwrap();
        prop_assert_eq!(tv_energy(&constant, &cfg), 0.0);
        let mut params = constant.params().to_vec();
        params[at].0[0] += bump;
        let bumped = TensorVolume::new(g, params, None).unwrap();
        prop_assert!(tv_energy(&bumped, &cfg) > 0.0);
    }

    #[test]
    fn huber_is_c1_at_knee(delta in 1e-4f64..10.0) {
        for s in [-1.0, 1.0] {
            let a = huber_tv_1d(s * delta, delta);
            let b = huber_tv_1d(s * delta * (1.0 + 1e-15), delta);
            prop_assert!((a.0 - b.0).abs() <= 1e-12);
            prop_assert!((a.1 - b.1).abs() <= 1e-12);
        }
    }
}
