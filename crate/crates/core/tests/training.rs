use fibershape::constellation::Constellation4D;
use fibershape::harness::cmd_train;
use fibershape::trainer::TrainConfig;

fn read_losses(path: &std::path::Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().clone();
    let col = h.iter().position(|c| c == "loss").unwrap();
    r.records().map(|rec| rec.unwrap()[col].parse().unwrap()).collect()
}

#[test]
fn toy_profile_trains_and_loss_decreases_on_average() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::toy_awgn();
    let learned = cmd_train(&cfg, dir.path(), false).unwrap();
    let loaded = Constellation4D::load(dir.path().join("format_ch0.txt")).unwrap();
    assert_eq!(loaded, learned.formats[0]);
    assert_eq!(loaded.m(), 4);

    let loss = read_losses(&dir.path().join("loss.csv"));
    assert_eq!(loss.len() as u64, cfg.max_iters);
    let w = 500;
    let blocks: Vec<(f64, f64)> = loss
        .chunks_exact(w)
        .map(|c| {
            let m = c.iter().sum::<f64>() / w as f64;
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (w - 1) as f64;
            (m, (var / w as f64).sqrt())
        })
        .collect();
    // successive 500-iteration averages never rise beyond their sampling noise
    for p in blocks.windows(2) {
        let ((m0, s0), (m1, s1)) = (p[0], p[1]);
        let tol = 3.0 * (s0 * s0 + s1 * s1).sqrt();
        assert!(m1 <= m0 + tol, "moving average rose from {m0} to {m1} (tolerance {tol})");
    }
    assert!(blocks.last().unwrap().0 < blocks[0].0 - 0.1);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = TrainConfig { max_iters: 40, checkpoint_every: 10, symbols_per_channel: 256, hidden_width: 16, ..TrainConfig::toy_awgn() };
    let a = tempfile::tempdir().unwrap();
    let full = cmd_train(&cfg, a.path(), false).unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_train(&TrainConfig { max_iters: 25, ..cfg.clone() }, b.path(), false).unwrap();
    let resumed = cmd_train(&cfg, b.path(), true).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(std::fs::read(a.path().join("loss.csv")).unwrap(), std::fs::read(b.path().join("loss.csv")).unwrap());
}

#[test]
fn desk_fiber_profile_takes_steps() {
    let cfg = TrainConfig { max_iters: 3, symbols_per_channel: 256, ..TrainConfig::desk() };
    let dir = tempfile::tempdir().unwrap();
    let learned = cmd_train(&cfg, dir.path(), false).unwrap();
    assert_eq!(learned.curve.len(), 3);
    assert!(learned.curve.iter().all(|(_, l)| l.is_finite()));
}
