use std::f64::consts::PI;

use proptest::prelude::*;
use sketchnet::sphere::{
    cap_area, cap_colatitude, eq_points, random_points, riesz_energy, sphere_area, EnergyConfig, EqPartition,
};
use sketchnet::Error;

#[test]
fn two_sphere_regions_have_equal_area() {
    for n in [1, 2, 3, 5, 7, 33, 100, 257] {
        let part = EqPartition::new(2, n).unwrap();
        let areas = part.region_areas();
        assert_eq!(areas.len(), n);
        for a in areas {
            assert!((a - 4.0 * PI / n as f64).abs() <= 1e-9, "N = {n}: {a}");
        }
    }
}

#[test]
fn three_sphere_regions_have_equal_area() {
    // the unit sphere in R^4 has area 2 pi^2
    assert!((sphere_area(3) - 2.0 * PI * PI).abs() < 1e-12);
    for n in [2, 9, 50, 200] {
        let areas = EqPartition::new(3, n).unwrap().region_areas();
        assert_eq!(areas.len(), n);
        for a in areas {
            assert!((a - 2.0 * PI * PI / n as f64).abs() <= 1e-9);
        }
    }
}

#[test]
fn caps_match_closed_forms() {
    // S^2: 2 pi (1 - cos theta)
    for theta in [0.1, 1.0, 2.5, PI] {
        assert!((cap_area(2, theta) - 2.0 * PI * (1.0 - f64::cos(theta))).abs() < 1e-12);
    }
    for area in [0.01, 1.0, 4.0, 12.0] {
        let theta = cap_colatitude(2, area);
        assert!((cap_area(2, theta) - area).abs() < 1e-9);
    }
}

#[test]
fn separation_scales_like_n_to_the_minus_one_over_d_minus_one() {
    for d in [3usize, 4] {
        for n in 2..=300 {
            let set = eq_points(d, n).unwrap();
            let bound = 1.5 * (n as f64).powf(-1.0 / (d as f64 - 1.0));
            assert!(set.min_separation() >= bound, "d = {d}, N = {n}");
        }
    }
}

#[test]
fn equal_area_energy_beats_random() {
    for n in [5, 33, 100] {
        let eq = riesz_energy(&eq_points(3, n).unwrap(), EnergyConfig::new(3.0).unwrap()).unwrap();
        let wins = (0..20)
            .filter(|&s| {
                let r = random_points(3, n, 1000 + s).unwrap();
                eq < riesz_energy(&r, EnergyConfig::new(3.0).unwrap()).unwrap()
            })
            .count();
        assert!(wins >= 19, "N = {n}: {wins} of 20");
    }
}

#[test]
fn log_energy_of_the_square_on_a_circle() {
    // four points at right angles: 8 pairs at sqrt(2), 4 at distance 2
    let set = eq_points(2, 4).unwrap();
    let e = riesz_energy(&set, EnergyConfig::new(0.0).unwrap()).unwrap();
    let expected = -(8.0 * 2f64.sqrt().ln() + 4.0 * 2f64.ln());
    assert!((e - expected).abs() < 1e-12, "{e}");
}

#[test]
fn coincident_points_are_rejected() {
    let mut set = eq_points(3, 4).unwrap();
    set.points[2] = set.points[0].clone();
    assert!(matches!(
        riesz_energy(&set, EnergyConfig::new(1.0).unwrap()),
        Err(Error::CoincidentPoints(0, 2))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn points_are_unit_vectors(d in 2usize..=5, n in 1usize..=120) {
        let set = eq_points(d, n).unwrap();
        prop_assert_eq!(set.len(), n);
        for p in set.iter() {
            prop_assert_eq!(p.len(), d);
            let norm: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(set, eq_points(d, n).unwrap());
    }

    #[test]
    fn region_counts_add_up(d in 2usize..=5, n in 1usize..=500) {
        let part = EqPartition::new(d, n).unwrap();
        prop_assert_eq!(part.regions.iter().sum::<usize>(), n);
        let total: f64 = part.region_areas().iter().sum();
        prop_assert!((total - sphere_area(d)).abs() <= 1e-9 * sphere_area(d));
    }
}
