use std::path::{Path, PathBuf};

use vstyle::checkpoint;
use vstyle::commands::{cmd_eval, cmd_gen_data, EVAL_COLUMNS, EVAL_MODES};
use vstyle::config::RunConfig;
use vstyle::metrics::MetricRow;
use vstyle::net::Model;

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("eval_report").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn setup(root: &Path) -> (RunConfig, PathBuf, PathBuf) {
    let mut cfg = RunConfig::default();
    cfg.metrics.eval_samples = 3;
    cfg.flow.sampler_steps = 2;
    let test = root.join("test");
    cmd_gen_data(&cfg, "SFT", 3, &test, 31).unwrap();
    let model = Model::init(cfg.model.clone(), 5).unwrap();
    let ckpt = checkpoint::save(&root.join("ckpt"), "SFT", &model, None).unwrap();
    (cfg, ckpt, test)
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn eval_writes_wide_and_long_reports() {
    let root = scratch("reports");
    let (cfg, ckpt, test) = setup(&root);
    let out = root.join("eval");
    let r = cmd_eval(&cfg, &ckpt, &test, &out).unwrap();
    assert_eq!(r.rows.len(), 3 * EVAL_MODES.len());
    assert_eq!(r.baseline.len(), 3);

    let header = csv::Reader::from_path(out.join("eval.csv")).unwrap().headers().unwrap().clone();
    let cols: Vec<&str> = header.iter().collect();
    assert_eq!(&cols[..2], &["sample", "mode"]);
    assert_eq!(&cols[2..], &EVAL_COLUMNS[..]);

    let long: Vec<MetricRow> = read_csv(&out.join("metrics.csv"));
    assert_eq!(long.len(), (r.rows.len() + r.baseline.len()) * EVAL_COLUMNS.len());
    assert!(long.iter().all(|m| m.value.is_finite() && EVAL_COLUMNS.contains(&m.metric.as_str())));
    for (k, mean) in r.metric_report().summary() {
        assert!((r.summary[&k.0][&k.1] - mean).abs() < 1e-12, "{k:?}");
    }
    let raw = r.summary.get("raw_input").unwrap();
    assert!((raw["DINO Score"] - 1.0).abs() < 1e-9);
}

#[test]
fn eval_is_deterministic() {
    let root = scratch("determinism");
    let (cfg, ckpt, test) = setup(&root);
    let a = cmd_eval(&cfg, &ckpt, &test, &root.join("a")).unwrap();
    let b = cmd_eval(&cfg, &ckpt, &test, &root.join("b")).unwrap();
    assert_eq!(a, b);
    let read = |d: &str| std::fs::read(root.join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}
