use proptest::collection::vec;
use proptest::prelude::*;
use shapeseq::geometry::{chamfer_points, emd_points, fibonacci_sphere, spiral_rank, EmdMode};
use shapeseq::pcio::{decode_pcsq, encode_pcsq, load_pointcloud, normalize_unit_sphere, save_pointcloud, subsample, Format, PointCloud};

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64]
}

fn cloud(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<[f64; 3]>> {
    vec(point(), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric(x in cloud(1..30), y in cloud(1..30)) {
        let (a, b) = (chamfer_points(&x, &y).unwrap(), chamfer_points(&y, &x).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn emd_is_a_metric_on_small_sets(n in 1usize..7, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect::<Vec<_>>();
        let (x, y, z) = (draw(), draw(), draw());
        let d = |a: &[[f64; 3]], b: &[[f64; 3]]| emd_points(a, b, EmdMode::Exact).unwrap().value;
        prop_assert!(d(&x, &y) >= 0.0);
        prop_assert!(d(&x, &x).abs() < 1e-15);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-9);
        let mut perm = x.clone();
        perm.rotate_left(n / 2);
        prop_assert!(d(&x, &perm).abs() < 1e-15);
    }

    #[test]
    fn normalization_is_idempotent(x in cloud(2..40)) {
        prop_assume!(x.iter().any(|p| p != &x[0]));
        let pc = PointCloud::from_f64(&x).unwrap();
        let once = normalize_unit_sphere(&pc).unwrap();
        let twice = normalize_unit_sphere(&once).unwrap();
        for (a, b) in once.to_f64().iter().zip(twice.to_f64()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn subsample_without_replacement_has_no_repeats(n_points in 1usize..80, frac in 0.0..1.0f64, seed in any::<u64>()) {
        // distinct points, so repeated points mean repeated indices
        let pts: Vec<[f64; 3]> = (0..n_points).map(|i| [i as f64, 0.0, 0.0]).collect();
        let pc = PointCloud::from_f64(&pts).unwrap();
        let n = ((n_points as f64 * frac) as usize).max(1);
        let s = subsample(&pc, n, seed).unwrap();
        let mut xs: Vec<i64> = s.to_f64().iter().map(|p| p[0] as i64).collect();
        xs.sort();
        xs.dedup();
        prop_assert_eq!(xs.len(), n);
    }

    #[test]
    fn binary_round_trip_is_exact(x in cloud(1..50)) {
        let pc = PointCloud::from_f64(&x).unwrap();
        prop_assert_eq!(decode_pcsq(&encode_pcsq(&pc), "mem").unwrap(), pc);
    }
}

#[test]
fn text_round_trip_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let sphere = fibonacci_sphere(300).unwrap();
    let pc = PointCloud::from_f64(sphere.points()).unwrap();
    let path = dir.path().join("s.xyz");
    save_pointcloud(&pc, &path, Format::XyzText).unwrap();
    let back = load_pointcloud(&path, Format::XyzText).unwrap();
    for (a, b) in pc.to_f64().iter().zip(back.to_f64()) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-5);
        }
    }
}

#[test]
fn spiral_rank_inverts_the_lattice() {
    for m in [1, 2, 17, 500] {
        let s = fibonacci_sphere(m).unwrap();
        for (i, &p) in s.points().iter().enumerate() {
            assert_eq!(spiral_rank(&s, p).unwrap(), i);
        }
        assert!(s.points().windows(2).all(|w| w[1][2] < w[0][2]));
    }
}
