use eskin::dataset::{enumerate_patterns, sample_seed, PatternKind, UNIT_COUNT};
use eskin::forward::{normalized_difference, FrameKind, MeasurementFrame};
use eskin::geometry::{deform_point, make_recon_grid, DeformationState, SensorGeometry};
use eskin::io::{read_map_csv, write_map_csv};
use eskin::metrics::{cc, psnr, rie};
use eskin::recon::{l1, tikhonov, TactileMap};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn vec_of(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

/// Surface distance between two wrapped points, measured from the images
/// alone: the chord in the bend plane becomes an arc of the cylinder.
fn surface_distance(a: [f64; 3], b: [f64; 3], r: f64) -> f64 {
    let chord = ((a[0] - b[0]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let arc = 2.0 * r * (chord / (2.0 * r)).min(1.0).asin();
    (arc * arc + (a[1] - b[1]).powi(2)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn wrap_is_an_isometry(
        theta in 1e-3f64..std::f64::consts::PI,
        u in 1.0f64..149.0,
        v in 1.0f64..99.0,
        du in -0.5f64..0.5,
        dv in -0.5f64..0.5,
    ) {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(theta);
        let a = deform_point(&g, [u, v], &d).unwrap();
        let b = deform_point(&g, [u + du, v + dv], &d).unwrap();
        let flat = (du * du + dv * dv).sqrt();
        let surf = surface_distance(a, b, d.radius(&g));
        prop_assert!((surf - flat).abs() <= 1e-9 * flat.max(1e-3), "{surf} vs {flat}");
    }

    #[test]
    fn bent_grid_is_reproducible(theta in 0.0f64..std::f64::consts::PI) {
        let g = SensorGeometry::default();
        let d = DeformationState::bent(theta);
        let a = make_recon_grid(&g, &d).unwrap();
        let b = make_recon_grid(&g, &d).unwrap();
        prop_assert_eq!(a.id(), b.id());
        prop_assert_eq!(a.points, b.points);
    }

    #[test]
    fn tikhonov_is_linear(
        j in vec_of(8 * 12),
        b1 in vec_of(8),
        b2 in vec_of(8),
        tau in 1e-3f64..1.0,
    ) {
        let j = DMatrix::from_vec(8, 12, j);
        let x1 = tikhonov::solve(&j, &b1, tau).unwrap();
        let x2 = tikhonov::solve(&j, &b2, tau).unwrap();
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let x = tikhonov::solve(&j, &sum, tau).unwrap();
        let scale = x1.iter().chain(&x2).fold(1e-12f64, |m, v| m.max(v.abs()));
        for i in 0..12 {
            prop_assert!((x[i] - x1[i] - x2[i]).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn soft_threshold_minimizes_the_scalar_problem(v in -5.0f64..5.0, t in 0.0f64..3.0) {
        let x = l1::soft_threshold(v, t);
        let f = |x: f64| 0.5 * (x - v) * (x - v) + t * x.abs();
        for k in -50..=50 {
            prop_assert!(f(x) <= f(x + 0.01 * k as f64) + 1e-12);
        }
    }

    #[test]
    fn metric_ranges(x in vec_of(40), y in vec_of(40)) {
        let c = cc(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!(rie(&x, &y).unwrap() >= 0.0);
    }

    #[test]
    fn metrics_ignore_a_shared_permutation(
        x in vec_of(30),
        y in vec_of(30),
        perm in Just((0..30).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let px: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * a.abs().max(1.0);
        prop_assert!(close(cc(&x, &y).unwrap(), cc(&px, &py).unwrap()));
        prop_assert!(close(rie(&x, &y).unwrap(), rie(&px, &py).unwrap()));
        prop_assert!(close(psnr(&x, &y).unwrap().db().unwrap(), psnr(&px, &py).unwrap().db().unwrap()));
    }

    #[test]
    fn doubling_the_error(truth in vec_of(25), err in vec_of(25)) {
        prop_assume!(err.iter().any(|e| e.abs() > 1e-3));
        let x1: Vec<f64> = truth.iter().zip(&err).map(|(t, e)| t + e).collect();
        let x2: Vec<f64> = truth.iter().zip(&err).map(|(t, e)| t + 2.0 * e).collect();
        let (r1, r2) = (rie(&x1, &truth).unwrap(), rie(&x2, &truth).unwrap());
        prop_assert!((r2 - 2.0 * r1).abs() <= 1e-12 * r2);
        let (p1, p2) = (psnr(&x1, &truth).unwrap().db().unwrap(), psnr(&x2, &truth).unwrap().db().unwrap());
        prop_assert!((p2 - (p1 - 20.0 * 2f64.log10())).abs() < 1e-9);
    }

    #[test]
    fn difference_against_itself_is_zero(v in prop::collection::vec(0.01f64..5.0, 104)) {
        let f = MeasurementFrame { voltages: v, n_electrodes: 16, kind: FrameKind::Touched };
        let r = f.clone().with_kind(FrameKind::ReferenceFlat);
        prop_assert!(normalized_difference(&f, &r).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn random_patterns_are_valid(seed in any::<u64>()) {
        for p in enumerate_patterns(PatternKind::RandomUnits, 20, seed) {
            prop_assert!((2..=4).contains(&p.units.len()));
            prop_assert!(p.units.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.units.iter().all(|&u| u < UNIT_COUNT));
        }
        prop_assert_eq!(
            enumerate_patterns(PatternKind::RandomUnits, 20, seed),
            enumerate_patterns(PatternKind::RandomUnits, 20, seed)
        );
    }

    #[test]
    fn sample_seeds_depend_on_every_coordinate(master in any::<u64>(), shard in 0usize..8, index in 0usize..1000) {
        let s = sample_seed(master, shard, index);
        prop_assert_eq!(s, sample_seed(master, shard, index));
        prop_assert_ne!(s, sample_seed(master, shard + 1, index));
        prop_assert_ne!(s, sample_seed(master, shard, index + 1));
    }

    #[test]
    fn map_csv_round_trip(values in prop::collection::vec(-1e3f64..1e3, 1350)) {
        let map = TactileMap { delta_sigma: values, grid_id: "abc123".into() };
        let mut buf = Vec::new();
        write_map_csv(&map, &mut buf).unwrap();
        let back = read_map_csv(buf.as_slice(), std::path::Path::new("map.csv")).unwrap();
        prop_assert_eq!(back, map);
    }
}
