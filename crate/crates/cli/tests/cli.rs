use std::path::Path;
use std::process::{Command, Output};

fn advecta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advecta")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: serde_json::Value) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn file_config(dir: &Path) -> String {
    write_config(
        dir,
        serde_json::json!({
            "paths": {
                "stations": dir.join("stations.csv"),
                "series": dir.join("series.csv"),
                "out_dir": dir,
            },
            "model": {"d_model": 8},
            "train": {"max_epochs": 2, "batch_size": 64, "lr": 3e-3},
            "data": {"stride": 6},
        }),
    )
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = advecta(&["forecast-everything"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_documents_config_keys() {
    let out = advecta(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["paths.series", "model.per_channel_gate", "train.lambda_eps", "data.per_station_wind", "simulator.preset"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn malformed_config_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({"model": {"d_modle": 8}}));
    let out = advecta(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d_modle") && err.contains("line"), "{err}");
}

#[test]
fn missing_series_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = file_config(dir.path());
    let out = advecta(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out_dir = d.to_str().unwrap();
    let sim = advecta(&["simulate", "--preset", "grid9", "--seed", "7", "--hours", "4000", "--out", out_dir]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    for f in ["stations.csv", "series.csv", "truth.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let cfg = file_config(d);

    // Untrained checkpoint: finite, nonzero error.
    let init = advecta(&["--threads", "1", "train", "--config", &cfg, "--seed", "3"]);
    assert!(init.status.success(), "{}", String::from_utf8_lossy(&init.stderr));
    let eval = advecta(&["eval", "--config", &cfg]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    let rows = metrics["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["horizon"], "AVG");
    let mae = rows[0]["mae"].as_f64().unwrap();
    assert!(mae.is_finite() && mae > 0.0);

    let history = std::fs::read_to_string(d.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,steps,train_loss,val_mse"));
    assert_eq!(history.lines().count(), 3);

    let predict = advecta(&["predict", "--config", &cfg]);
    assert!(predict.status.success(), "{}", String::from_utf8_lossy(&predict.stderr));
    let forecast = std::fs::read_to_string(d.join("forecast.csv")).unwrap();
    assert!(forecast.starts_with("timestamp,station_id,horizon_hour,yhat,y_if_known"));

    let attribute = advecta(&["attribute", "--config", &cfg]);
    assert!(attribute.status.success(), "{}", String::from_utf8_lossy(&attribute.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("attribution.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 9);
    assert!(d.join("G4_spatial.svg").exists() && d.join("G4_temporal.svg").exists() && d.join("G4_wind.svg").exists());

    let grad = advecta(&["gradcheck", "--config", &cfg]);
    assert!(grad.status.success(), "{}", String::from_utf8_lossy(&grad.stdout));
    assert!(String::from_utf8_lossy(&grad.stdout).trim_end().ends_with("PASS"));
}

#[test]
fn single_thread_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = advecta(&["simulate", "--preset", "line3", "--seed", "2", "--hours", "600", "--out", d.to_str().unwrap()]);
    assert!(sim.status.success());
    let series_before = std::fs::read(d.join("series.csv")).unwrap();
    let cfg = write_config(
        d,
        serde_json::json!({
            "paths": {"stations": d.join("stations.csv"), "series": d.join("series.csv"), "out_dir": d},
            "features": [
                {"name": "pm10", "availability": 0, "is_target": true, "role": "pollutant"},
                {"name": "wind_speed", "availability": 24, "role": "meteorology_forecast", "wind_component": "speed", "input": false},
                {"name": "wind_dir", "availability": 24, "role": "meteorology_forecast", "wind_component": "direction", "input": false}
            ],
            "model": {"d_model": 4},
            "train": {"max_epochs": 2, "batch_size": 16},
            "data": {"stride": 4},
        }),
    );
    let run = || {
        let out = advecta(&["--threads", "1", "train", "--config", &cfg]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(d.join("checkpoint.json")).unwrap(), std::fs::read(d.join("history.csv")).unwrap())
    };
    assert_eq!(run(), run());
    assert_eq!(std::fs::read(d.join("series.csv")).unwrap(), series_before);
}
