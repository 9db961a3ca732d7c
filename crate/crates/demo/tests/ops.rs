use evuas_demo::ops::{example1, placement, profile, PROFILE_SIGNALS};

#[test]
fn profile_stays_under_its_bound() {
    let p = profile("cos_exp", 0, 6).unwrap();
    assert_eq!(p.series.len(), 2);
    for (v, b) in p.series[0].ys.iter().zip(&p.series[1].ys) {
        assert!(v <= b);
    }
    for s in PROFILE_SIGNALS {
        assert!(profile(s, 1, 3).is_ok(), "{s}");
    }
    assert!(profile("nope", 0, 3).is_err());
    assert!(profile("cos_exp", 0, 40).is_err());
}

#[test]
fn example_one_decays() {
    let p = example1("example1_bounded", -1.0, 1.5, 10.0).unwrap();
    let norm = p.series.iter().find(|s| s.name == "norm").unwrap();
    assert_eq!(norm.xs.len(), 1001);
    assert!((norm.ys[0] - 13f64.sqrt() / 2.0).abs() < 1e-15);
    assert!(*norm.ys.last().unwrap() < 5e-3);
    assert!(example1("constant_1_0", 0.0, 0.0, 20.0).unwrap().series[2].ys.last().unwrap() > &0.99);
    assert!(example1("example1_bounded", -1.0, 1.5, 100.0).is_err());
}

#[test]
fn placement_reports_gain_and_converges() {
    let p = placement(-1.0, 0.0, -1.0, 0.3, 15.0).unwrap();
    // Linearisation A = [[0, 1], [1, 0]]: the gain is (-2, -2) for a double pole at -1.
    assert!(p.notes[0].contains("-2.0000, -2.0000"), "{:?}", p.notes);
    let norm = p.series.iter().find(|s| s.name == "norm").unwrap();
    assert!(*norm.ys.last().unwrap() < 1e-4);
    assert!(placement(-1.0, 2.0, 0.0, 0.3, 10.0).is_ok());
    assert!(placement(0.5, 0.0, -1.0, 0.3, 10.0).is_err());
}
