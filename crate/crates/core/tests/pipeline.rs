use neurogeom::completion::{closure_score, complete, CompletionConfig};
use neurogeom::filtering::{lift_image, GaborBank};
use neurogeom::kernels::{v1_kernel, FokkerPlanckSpec, Kernel3D};
use neurogeom::ScalarField2D;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_kernel() -> Kernel3D {
    Kernel3D::GroupStationary(v1_kernel(&FokkerPlanckSpec::with_default_kappa(8, 8, 8.0)).unwrap())
}

fn noise(n: usize, seed: u64) -> ScalarField2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScalarField2D::from_fn(n, n, |_, _| rng.gen_range(0.0..1.0))
}

#[test]
fn quarter_turn_of_the_image_shifts_the_lift_by_half_the_bins() {
    let n = 24;
    let img = noise(n, 3);
    // (x, y) -> (n-1-y, x)
    let rot = ScalarField2D::from_fn(n, n, |x, y| img.get(y, n - 1 - x));
    let bank = GaborBank::new(8, 1.5, 4).unwrap();
    let a = lift_image(&img, &bank).unwrap();
    let b = lift_image(&rot, &bank).unwrap();
    let scale = a.max_modulus();
    for y in 0..n {
        for x in 0..n {
            for k in 0..8 {
                let want = a.get(x, y, k).norm();
                let got = b.get(n - 1 - y, x, (k + 4) % 8).norm();
                assert!((want - got).abs() < 1e-9 * scale, "({x},{y},{k}) {want} vs {got}");
            }
        }
    }
}

#[test]
fn constant_image_is_its_own_brightness() {
    let img = ScalarField2D::filled(32, 32, 0.7);
    let bank = GaborBank::new(8, 1.5, 4).unwrap();
    let r = complete(&img, &CompletionConfig::default(), &small_kernel(), &bank, 1).unwrap();
    assert!(r.diagnostics.degenerate.is_some());
    assert_eq!(r.a.norm(), 0.0);
    for (b, i) in r.b.data().iter().zip(img.data()) {
        assert!((b - i).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn brightness_is_the_mean_of_image_and_activity(seed in 0u64..1000) {
        let img = noise(24, seed);
        let bank = GaborBank::new(8, 1.5, 4).unwrap();
        let r = complete(&img, &CompletionConfig::default(), &small_kernel(), &bank, seed).unwrap();
        for ((b, i), u) in r.b.data().iter().zip(img.data()).zip(r.u.data()) {
            prop_assert_eq!(*b, (i + u) / 2.0);
        }
        let contour: Vec<(f64, f64)> = (0..24).map(|x| (x as f64, 12.0)).collect();
        let s = closure_score(&r, &contour, 0.25).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
