use std::fs;
use std::path::{Path, PathBuf};

use simdis_core::config::{Scheme, SchemeConfig, ViewTarget, ViewTargetSet};
use simdis_lab::cli::run_command;
use simdis_lab::config_file::{config_to_toml, parse_config, write_config};
use simdis_lab::dataset_io::{fetch_shapes, load_split, read_manifest, ShapesRequest};
use simdis_lab::report::{emit_report, summary_csv, SUMMARY_CSV};
use simdis_lab::rundir::RunDir;
use simdis_lab::LabError;

fn tiny_config(dataset: &Path) -> SchemeConfig {
    let mut c = SchemeConfig {
        epochs: 2,
        batch_size: 8,
        ..SchemeConfig::default()
    };
    c.data.dataset = dataset.display().to_string();
    c.data.image_size = 8;
    c.model.teacher_encoder = "mini-resnet-4".into();
    c.model.student_encoder = "mini-resnet-2".into();
    c.model.proj_hidden = 16;
    c.model.proj_dim = 8;
    c.model.pred_hidden = 16;
    c.probe.epochs = 3;
    c
}

struct Sandbox {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn sandbox() -> Sandbox {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    fetch_shapes(&data, ShapesRequest { train: 32, eval: 24, size: 8, channels: 3, classes: 10, seed: 4 }).unwrap();
    let config = root.join("cfg.toml");
    write_config(&tiny_config(&data), &config).unwrap();
    Sandbox { _tmp: tmp, root, config }
}

fn sim(args: &[&str]) -> i32 {
    run_command(std::iter::once("simdis").chain(args.iter().copied()))
}

impl Sandbox {
    fn train(&self, cmd: &str, name: &str, extra: &[&str]) -> i32 {
        let cfg = self.config.display().to_string();
        let runs = self.runs().display().to_string();
        let mut a = vec![cmd, "--config", &cfg, "--out", &runs, "--name", name, "--quiet"];
        a.extend_from_slice(extra);
        sim(&a)
    }

    fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(sim(&[]), 2);
    assert_eq!(sim(&["no-such-command"]), 2);
    assert_eq!(sim(&["evaluate", "--bogus-flag"]), 2);
    assert_eq!(sim(&["--help"]), 0);
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(sim(&["evaluate", "--run", missing.to_str().unwrap()]), 1);
    assert_eq!(sim(&["resume", "--run", missing.to_str().unwrap()]), 1);
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = tiny_config(Path::new("d"));
    cfg.scheme = Scheme::Custom;
    cfg.view_targets = Some(ViewTargetSet::from_targets(&[ViewTarget::ShatVp, ViewTarget::TV]).unwrap());
    let cfg = cfg.validated().unwrap();
    let text = config_to_toml(&cfg).unwrap();
    assert_eq!(parse_config(&text, Path::new("x.toml")).unwrap(), cfg);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(matches!(parse_config("epoch = 3", Path::new("a")), Err(LabError::Parse { .. })));
    assert!(matches!(parse_config("epochs = 0", Path::new("a")), Err(LabError::Core(_))));
    assert!(parse_config("scheme = \"simdis_on_7v\"\nview_targets = [\"That_vp\"]", Path::new("a")).is_err());
    assert!(parse_config("scheme = \"simdis_off\"", Path::new("a")).is_err());
}

#[test]
fn dataset_round_trip_and_missing_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("shapes");
    let m = fetch_shapes(&dir, ShapesRequest { train: 20, eval: 10, size: 8, channels: 1, classes: 4, seed: 1 }).unwrap();
    assert_eq!(read_manifest(&dir).unwrap(), m);
    let train = load_split(&dir, simdis_core::data::Split::Train).unwrap();
    assert_eq!(train.len(), 20);
    assert_eq!(train.spec.num_classes, 4);
    assert!(train.labels.iter().all(|&l| l < 4));
    let err = load_split(&tmp.path().join("nope"), simdis_core::data::Split::Eval).unwrap_err();
    assert!(matches!(err, LabError::MissingData { .. }));
    assert!(err.to_string().contains("fetch-data"));
}

#[test]
fn run_directory_is_self_describing() {
    let sb = sandbox();
    assert_eq!(sb.train("train-online", "on", &[]), 0);
    let dir = RunDir::open(&sb.runs().join("on")).unwrap();
    for f in ["config.toml", "run.json", "metrics.jsonl", "checkpoints/last.json", "checkpoints/online-e0001.json", "checkpoints/online-e0002.json"] {
        assert!(dir.path.join(f).exists(), "{f}");
    }
    assert_eq!(dir.config().unwrap().scheme, Scheme::SimdisOn);
    let metrics = dir.read_metrics().unwrap();
    assert!(metrics.iter().any(|l| l.record.role == simdis_core::trainer::Role::Student));
    // A second train into the same directory is refused.
    assert_eq!(sb.train("train-online", "on", &[]), 1);
}

#[test]
fn command_scheme_mismatch_is_an_error() {
    let sb = sandbox();
    assert_eq!(sb.train("train-online", "x", &["--scheme", "simdis_off"]), 1);
    assert_eq!(sb.train("distill-offline", "y", &["--scheme", "simdis_on"]), 1);
    assert_eq!(sb.train("train-online", "z", &["--scheme", "nonsense"]), 1);
}

#[test]
fn offline_pipeline_and_report() {
    let sb = sandbox();
    assert_eq!(sb.train("train-teacher", "teacher", &[]), 0);
    let teacher = sb.runs().join("teacher/checkpoints/last.json");
    assert_eq!(sb.train("distill-offline", "off", &["--scheme", "simdis_off", "--teacher", teacher.to_str().unwrap()]), 0);
    assert_eq!(sb.train("train-online", "on7", &["--scheme", "simdis_on_7v"]), 0);

    let runs: Vec<PathBuf> = ["teacher", "off", "on7"].iter().map(|n| sb.runs().join(n)).collect();
    let out = sb.root.join("report");
    // Not evaluated yet: the error names every absent run.
    let err = emit_report(&runs, &out).unwrap_err().to_string();
    assert!(err.contains("teacher") && err.contains("off") && err.contains("on7"), "{err}");

    for r in &runs {
        assert_eq!(sim(&["evaluate", "--run", r.to_str().unwrap()]), 0);
    }
    let summaries: Vec<_> = runs.iter().map(|r| RunDir::open(r).unwrap().read_summary().unwrap()).collect();
    assert_eq!(summaries[1].flops_formula, "(2c_T + c_S) M N");
    assert_eq!(summaries[2].flops_formula, "(c_T + c_S + c_heads) M N");
    assert_eq!(summaries[2].num_views, 7);
    assert_eq!(summaries[1].curve.len(), 2);
    assert!(summaries[1].teacher_top1.is_some());

    let files = emit_report(&runs, &out).unwrap();
    let csv = fs::read_to_string(out.join(SUMMARY_CSV)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "scheme,views,flops_formula,top1,top5");
    assert_eq!(csv, summary_csv(&summaries).unwrap());
    assert_eq!(csv.lines().count(), 4);
    let svg = fs::read_to_string(&files.plots[0]).unwrap();
    for scheme in ["teacher_only", "simdis_off", "simdis_on_7v"] {
        assert!(svg.contains(scheme), "legend lacks {scheme}");
    }
    let views = fs::read_to_string(files.views_table.unwrap()).unwrap();
    assert!(views.contains("Shat_vp+That_vp"));

    // Report is a pure read: running it again gives identical files.
    let before = fs::read_to_string(&files.budget_table).unwrap();
    emit_report(&runs, &out).unwrap();
    assert_eq!(fs::read_to_string(&files.budget_table).unwrap(), before);

    assert_eq!(sim(&["report", "--out", out.to_str().unwrap(), runs[0].to_str().unwrap()]), 0);
    let single = fs::read_to_string(out.join("accuracy_top1.svg")).unwrap();
    assert_eq!(single.matches("<polyline").count() + single.matches("<circle").count() > 0, true);
}

#[test]
fn flops_command_prints_table() {
    let sb = sandbox();
    let cfg = sb.config.display().to_string();
    let out = sb.root.join("flops.txt");
    assert_eq!(sim(&["flops", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let text = fs::read_to_string(out).unwrap();
    assert!(text.contains("(2c_T + c_S) M N"));
    assert!(text.contains("M = 32"));
}
