use semcom::synthgen::{gen_scene_logged, SceneSpec};

const SCENES: u64 = 500;

/// Object counts are uniform on the configured range and each object's class is
/// uniform over the classes in use, independently. Both histograms must sit
/// within 3 sigma of those distributions.
#[test]
fn class_and_count_histograms_match_placement_distribution() {
    let template = SceneSpec::new(32, 32, 0);
    let (lo, hi) = template.object_count_range;
    let classes = template.classes_in_use.clone();
    let k = classes.len() as f64;

    let mut per_count = vec![0usize; hi + 1];
    let mut per_class = vec![0usize; 256];
    for i in 0..SCENES {
        let spec = SceneSpec {
            seed: 5000 + i,
            ..template.clone()
        };
        let (_, placements) = gen_scene_logged(&spec).unwrap();
        per_count[placements.len()] += 1;
        for p in &placements {
            per_class[p.class as usize] += 1;
        }
    }

    let n = SCENES as f64;
    let span = (hi - lo + 1) as f64;
    let q = 1.0 / span;
    for (count, &seen) in per_count.iter().enumerate().skip(lo) {
        let mean = n * q;
        let sigma = (n * q * (1.0 - q)).sqrt();
        assert!(
            (seen as f64 - mean).abs() <= 3.0 * sigma,
            "{seen} scenes with {count} objects, expected {mean:.1} +- {:.1}",
            3.0 * sigma
        );
    }

    // Per scene the class tally is Binomial(N, 1/k) with N uniform, so
    // mean E[N]/k and variance E[N] p (1 - p) + Var[N] p^2.
    let counts: Vec<f64> = (lo..=hi).map(|c| c as f64).collect();
    let e_n = counts.iter().sum::<f64>() / span;
    let var_n = counts.iter().map(|c| (c - e_n).powi(2)).sum::<f64>() / span;
    let p = 1.0 / k;
    let mean = n * e_n * p;
    let sigma = (n * (e_n * p * (1.0 - p) + var_n * p * p)).sqrt();
    for &c in &classes {
        let seen = per_class[c as usize] as f64;
        assert!(
            (seen - mean).abs() <= 3.0 * sigma,
            "class {c}: {seen} objects, expected {mean:.1} +- {:.1}",
            3.0 * sigma
        );
    }
    let outside: usize = (0..256)
        .filter(|c| !classes.contains(&(*c as u8)))
        .map(|c| per_class[c])
        .sum();
    assert_eq!(outside, 0);
}
