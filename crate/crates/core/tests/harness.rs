use hdnn::harness::data::{class_means, generate_synthetic, DatasetSpec};
use hdnn::harness::recipes::{convergence_comparison, ConvergenceSettings};

/// At 6σ separation the Bayes error between two neighbouring means is
/// Φ(-3) ≈ 0.00135, so a nearest-mean rule should almost never miss.
#[test]
fn well_separated_task_is_nearly_bayes_separable() {
    let spec = DatasetSpec {
        separation: 6.0,
        frames_per_class: 200,
        seed: 11,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let means = class_means(&spec).unwrap();
    let errors = data
        .features
        .row_iter()
        .zip(&data.labels)
        .filter(|(x, &label)| {
            let dist = |m: &[f64]| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..spec.num_classes).min_by(|&a, &b| dist(means.row(a)).total_cmp(&dist(means.row(b)))) != Some(label)
        })
        .count();
    assert!((errors as f64 / data.len() as f64) < 0.05, "{errors} errors");
}

#[test]
fn means_are_separated_as_requested() {
    let spec = DatasetSpec {
        separation: 4.0,
        noise_std: 0.5,
        ..Default::default()
    };
    let means = class_means(&spec).unwrap();
    for a in 0..spec.num_classes {
        for b in a + 1..spec.num_classes {
            let d: f64 = means
                .row(a)
                .iter()
                .zip(means.row(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!((d - 2.0).abs() < 1e-12, "distance {d}");
        }
    }
}

/// At moderate depth the gated net leaves the constant-prediction plateau
/// while the plain net of the same shape and init does not.
#[test]
fn highway_trains_where_plain_stalls_at_depth_six() {
    let s = ConvergenceSettings {
        layers: 6,
        ..Default::default()
    };
    let plateau = 4f64.ln();
    let mut wins = 0;
    for seed in 0..3 {
        let r = convergence_comparison(seed, &s).unwrap();
        if r.highway_final() < 0.5 * plateau && r.plain_final() > 0.9 * plateau {
            wins += 1;
        }
    }
    assert!(wins >= 2, "highway escaped the plateau in {wins}/3 seeds");
}
