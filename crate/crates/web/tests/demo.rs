use iffnet_web::{simulate_panels, tone_fbank_panels, train_and_fuse_panels};

#[test]
fn simulate_returns_three_panels() {
    let p = simulate_panels(3, 5.0, 0.3).unwrap();
    assert_eq!(p.count(), 3);
    assert_eq!(p.panel(0).len(), p.frames() * p.bins());
    assert_eq!(p.name(2), "enhanced");
    assert!(p.panel(7).is_empty());
}

#[test]
fn train_and_fuse_returns_six_panels() {
    let p = train_and_fuse_panels(1, 5.0, 0.3, 20).unwrap();
    assert_eq!(p.count(), 6);
    assert!(p.panel(3).iter().all(|&m| (0.0..=1.0).contains(&m)));
    assert!(p.summary().starts_with("20 steps"));
}

#[test]
fn tone_fbank_peaks_near_the_tone() {
    let p = tone_fbank_panels(1000.0, 0.0).unwrap();
    assert_eq!(p.bins(), 80);
    let row = &p.panel(0)[10 * 80..11 * 80];
    let peak = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    let centers = iffnet::fbank::FbankConfig::default().mel_centers_hz();
    assert!(
        (centers[peak] - 1000.0).abs() < 150.0,
        "peak bin {peak} at {} Hz",
        centers[peak]
    );
}

#[test]
fn invalid_settings_are_errors() {
    assert!(simulate_panels(0, 5.0, 1.5).is_err());
}
