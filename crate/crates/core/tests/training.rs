use stdiffusion::config::RunConfig;
use stdiffusion::denoiser::{train, Denoiser};
use stdiffusion::synthetic::synthetic_windows;
use stdiffusion::Tensor;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.width = 16;
    cfg.diffusion.steps = 50;
    cfg.train.batch_size = 32;
    cfg.train.lr = 2e-3;
    cfg
}

#[test]
fn loss_drops_on_sine_corpus() {
    let data = Tensor::from_array3(&synthetic_windows(256, 24, 3, 11).unwrap().windows);
    let cfg = small_config();
    let mut model = Denoiser::new(&cfg, 3).unwrap();
    let before = model.evaluation_loss(&data, 5).unwrap();
    let state = train(&mut model, &data, 20, 1).unwrap();
    let after = model.evaluation_loss(&data, 5).unwrap();
    let epochs = state.epoch_means();
    assert_eq!(epochs.len(), 20);
    assert!(after < 0.8 * before, "held-out noise loss {before} -> {after}");
    assert!(epochs[19] < epochs[0], "{epochs:?}");
}

#[test]
fn samples_stay_in_data_range() {
    let data = Tensor::from_array3(&synthetic_windows(64, 24, 2, 12).unwrap().windows);
    let mut model = Denoiser::new(&small_config(), 2).unwrap();
    train(&mut model, &data, 1, 2).unwrap();
    let s = model.sample(16, 3).unwrap();
    assert_eq!(s.shape(), &[16, 24, 2]);
    assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
