use proptest::prelude::*;
use shapeseq::metrics::{cov, mmd, one_nna, Distance};
use shapeseq::pcio::{synth_dataset, PointCloud, ShapeFamily};

fn clouds(count: usize, seed: u64) -> Vec<PointCloud> {
    synth_dataset(ShapeFamily::Box, count, 16, seed).unwrap().samples
}

fn rotate(pc: &PointCloud, angle: f64) -> PointCloud {
    let (s, c) = angle.sin_cos();
    let pts: Vec<[f64; 3]> = pc.to_f64().iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]).collect();
    PointCloud::from_f64(&pts).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coverage_never_drops_when_samples_are_added(seed in 0u64..1000, extra in 1usize..4) {
        let reference = clouds(5, seed);
        let gen = clouds(3 + extra, seed + 7);
        let before = cov(&gen[..3], &reference, Distance::Cd).unwrap();
        let after = cov(&gen, &reference, Distance::Cd).unwrap();
        prop_assert!(after >= before);
        prop_assert!((0.0..=1.0).contains(&after));
    }

    #[test]
    fn metrics_ignore_a_common_rotation(seed in 0u64..1000, angle in 0.0..std::f64::consts::TAU) {
        let gen = clouds(3, seed);
        let reference = clouds(3, seed + 1);
        let (rg, rr): (Vec<_>, Vec<_>) = (
            gen.iter().map(|c| rotate(c, angle)).collect(),
            reference.iter().map(|c| rotate(c, angle)).collect(),
        );
        for dist in [Distance::Cd, Distance::Emd] {
            let (a, b) = (mmd(&gen, &reference, dist).unwrap(), mmd(&rg, &rr, dist).unwrap());
            // clouds are stored as f32, so rotation perturbs distances slightly
            prop_assert!((a - b).abs() <= 1e-5 * a.max(1e-3));
            let (x, y) = (one_nna(&gen, &reference, dist).unwrap(), one_nna(&rg, &rr, dist).unwrap());
            prop_assert!((0.0..=1.0).contains(&y));
            prop_assert_eq!(x, y);
        }
    }
}

#[test]
fn mmd_zero_iff_every_reference_has_a_twin() {
    let reference = clouds(3, 1);
    let mut gen = clouds(2, 2);
    gen.extend(reference.iter().cloned());
    assert!(mmd(&gen, &reference, Distance::Cd).unwrap().abs() < 1e-12);
    gen.truncate(3);
    assert!(mmd(&gen, &reference, Distance::Cd).unwrap() > 0.0);
}
