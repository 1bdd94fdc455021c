use advecta_core::config::SimulatorConfig;
use advecta_core::pipeline::{dataset_for_checkpoint, forecast_rows, train_run, write_forecast, Dataset};
use advecta_core::{Checkpoint, RunConfig};

fn config() -> RunConfig {
    let mut cfg = RunConfig {
        simulator: Some(SimulatorConfig {
            preset: "grid9".into(),
            seed: 5,
            hours: 900,
            ..Default::default()
        }),
        ..Default::default()
    };
    cfg.model.d_model = 8;
    cfg.data.stride = 6;
    cfg.train.max_epochs = 3;
    cfg.train.parallel = false;
    cfg
}

#[test]
fn checkpoint_reproduces_forecasts() {
    let cfg = config();
    let data = Dataset::from_config(&cfg, None).unwrap();
    let (outcome, ck) = train_run(&cfg, &data).unwrap();
    assert!(outcome.history.len() <= 3 && outcome.best_val.is_finite());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    ck.write(&path).unwrap();
    let restored = Checkpoint::read(&path).unwrap();
    let again = dataset_for_checkpoint(&cfg, &restored).unwrap();
    let model = restored.model().unwrap();

    let a = forecast_rows(&outcome.best, &data.test, &data).unwrap();
    let b = forecast_rows(&model, &again.test, &again).unwrap();
    assert_eq!(a, b);

    let out = dir.path().join("forecast.csv");
    write_forecast(&out, &b).unwrap();
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 1 + data.test.len() * 9 * 24);
}

#[test]
fn training_is_deterministic() {
    let cfg = config();
    let data = Dataset::from_config(&cfg, None).unwrap();
    let (a, _) = train_run(&cfg, &data).unwrap();
    let (b, _) = train_run(&cfg, &data).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.params, b.best.params);
}
