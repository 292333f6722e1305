use omniair::app::{
    evaluate, predict_base, predict_unseen, train, validation_mae, Deployment, RunConfig, StopReason,
};
use omniair::data::NUM_CHANNELS;
use omniair::oracle::{simulate_rd, RdScenario};

fn small_config() -> RunConfig {
    RunConfig {
        fourier_dim: 16,
        id_hidden: 16,
        id_dim: 16,
        grade_embed: 4,
        d_model: 16,
        heads: 2,
        edge_hidden: 8,
        head_hidden: 32,
        k_geo: 5,
        k_sem: 2,
        k_max: 7.0,
        window: 14,
        horizon: 3,
        batch_size: 16,
        lr: 3e-3,
        max_epochs: 6,
        ..RunConfig::default()
    }
}

fn scenario(n: usize, seed: u64) -> RdScenario {
    RdScenario { n, steps: 400, seed, ..RdScenario::default() }
}

#[test]
fn smoke_training_reduces_loss_and_restores_best() {
    let sim = simulate_rd(&scenario(20, 7)).unwrap();
    let cfg = small_config();
    let out = train(&cfg, &sim.stations, &sim.frame).unwrap();
    let log = &out.log;
    assert_eq!(log.epochs.len(), 6);
    assert_eq!(log.stop_reason, StopReason::MaxEpochs);
    assert!(log.epochs[5].train_loss < log.epochs[0].train_loss, "{log:?}");
    let restored = validation_mae(&out.checkpoint, &sim.frame).unwrap();
    assert!((restored - log.best_val_mae.unwrap()).abs() < 1e-12);

    let f = predict_base(&out.checkpoint, &sim.frame, None).unwrap();
    assert_eq!(f.values.shape(), &[3, 20, NUM_CHANNELS]);
    assert!(f.values.all_finite());
    assert_eq!(f.to_csv().lines().count(), 1 + 3 * 20 * NUM_CHANNELS);

    let (model, lv) = evaluate(&out.checkpoint, &sim.frame).unwrap();
    assert!(model.overall.count > 0 && model.overall.count == lv.overall.count);
}

#[test]
fn unseen_stations_leave_base_forecasts_untouched() {
    let sim = simulate_rd(&scenario(24, 3)).unwrap();
    let cfg = RunConfig { max_epochs: 2, ..small_config() };
    let base: Vec<_> = sim.stations[..20].to_vec();
    let frame = sim.frame.select_stations(&(0..20).collect::<Vec<_>>());
    let ckpt = train(&cfg, &base, &frame).unwrap().checkpoint;

    let plain = predict_base(&ckpt, &sim.frame, None).unwrap();
    let digest = ckpt.params.digest();
    let out = predict_unseen(&ckpt, &sim.frame, &sim.stations[20..], None).unwrap();
    assert_eq!(out.base.values.data(), plain.values.data());
    assert_eq!(out.digest_before, out.digest_after);
    assert_eq!(ckpt.params.digest(), digest);
    assert_eq!(out.new.values.shape(), &[3, 4, NUM_CHANNELS]);
    assert!(out.new.values.all_finite());

    // A copy of an existing station under a new id.
    let mut twin = sim.stations[0].clone();
    twin.id = "twin".into();
    let dep = Deployment::with_new_stations(&ckpt, &[twin]).unwrap();
    let f = dep.rows.shape()[1];
    let self_dev = cfg.fourier_dim + 3;
    let (orig, copy) = (&dep.rows.data()[..f], &dep.rows.data()[20 * f..21 * f]);
    for k in 0..f {
        if k != self_dev {
            assert_eq!(orig[k], copy[k], "column {k}");
        }
    }
    // With the self deviation aligned the inputs are identical, and so are the embeddings.
    let mut rows = dep.rows.clone();
    rows.data_mut()[20 * f + self_dev] = orig[self_dev];
    let e = omniair::model::identity_embeddings(&ckpt.params, &rows, &dep.grades).unwrap();
    let d = e.shape()[1];
    assert_eq!(&e.data()[..d], &e.data()[20 * d..21 * d]);

    let clash = predict_unseen(&ckpt, &sim.frame, &sim.stations[..1], None).unwrap_err();
    assert!(clash.is_validation());
}

#[test]
fn fully_missing_station_still_forecasts() {
    let mut sim = simulate_rd(&scenario(20, 11)).unwrap();
    let cfg = RunConfig { max_epochs: 1, ..small_config() };
    let ckpt = train(&cfg, &sim.stations, &sim.frame).unwrap().checkpoint;
    let t = sim.frame.len();
    for step in t - cfg.window..t {
        for c in 0..NUM_CHANNELS {
            sim.frame.set(step, 4, c, None);
        }
    }
    let f = predict_base(&ckpt, &sim.frame, None).unwrap();
    assert!(f.values.all_finite());
    let short = sim.frame.slice_time(0, cfg.window - 1);
    assert!(predict_base(&ckpt, &short, None).unwrap_err().is_validation());
}
