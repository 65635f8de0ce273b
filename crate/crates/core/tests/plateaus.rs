use dpsgd_adapt::cli::config::parse_override;
use dpsgd_adapt::cli::ExperimentConfig;
use dpsgd_adapt::trainer::train;

#[test]
fn v2_step_gradient_norm_plateaus() {
    let sets = [
        "dataset.synthetic.counts=[1494,70]",
        "privacy.epsilon=1",
        "privacy.delta=1e-3",
        "train.epochs=30",
        "train.batch_size=64",
        "train.lr=1.0",
        "train.weight_decay=0.01",
        "clip.c0=0.1",
        "algorithm=\"v2_step\"",
        "clip.z0=0.15",
        "noise.rate=0.5",
        "noise.every=10",
        "clip.rate=1",
    ];
    let overrides: Vec<_> = sets.iter().map(|s| parse_override(s).unwrap()).collect();
    let config = ExperimentConfig::load(None, &overrides).unwrap();
    let (train_set, _) = config.load_data().unwrap();
    let s0 = config.resolve_privacy(train_set.len()).unwrap().unwrap().sigma0_squared;
    let mut plateaus = vec![0.0; 3];
    let mut counts = vec![0usize; 3];
    for seed in 1..=5u64 {
        let tc = config.trainer_config(Some(s0), seed).unwrap();
        let run = train(&tc, &train_set, None).unwrap();
        for r in &run.iterations {
            plateaus[r.epoch / 10] += r.avg_grad_norm;
            counts[r.epoch / 10] += 1;
        }
    }
    let means: Vec<f64> = plateaus.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}
