use std::path::Path;
use std::process::Command;

use eanet::commands::{
    cmd_eval, cmd_export_attn, cmd_finetune, cmd_metrics, cmd_pretrain, MetricOp, CHECKPOINT_FILE, CONFIG_FILE,
    HISTORY_FILE,
};
use eanet::config::RunConfig;
use eanet::csv_long::save_csv_long;
use eanet::eanet_core::data::{synth_dataset, SynthKind, SynthSpec};
use eanet::tables::load_attention;
use eanet::Error;

const SMALL: &str = "\
model.d = 16
model.heads = 2
model.n_blocks = 2
data.synth.t = 12
data.synth.n_train = 48
data.synth.n_test = 16
train.batch_size = 16
";

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("{SMALL}{extra}out = out\n")).unwrap();
    path
}

#[test]
fn pretrain_writes_one_history_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&write_config(dir.path(), "train.epochs = 5\n")).unwrap();
    assert_eq!(cfg.train.mask_rate, 0.15);
    let report = cmd_pretrain(&cfg).unwrap();
    assert_eq!(report.history.records.len(), 5);
    let out = dir.path().join("out");
    let history = std::fs::read_to_string(out.join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 6);
    assert!(history.starts_with("epoch,train_loss,valid_masked_mse\n"));
    assert!(out.join(CHECKPOINT_FILE).is_file());
    let effective = RunConfig::load(&out.join(CONFIG_FILE)).unwrap();
    assert_eq!(effective.input_channels, Some(2));
    assert_eq!(effective.max_len, Some(12));
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&write_config(dir.path(), "task = classification\ntrain.epochs = 2\n")).unwrap();
    cmd_finetune(&cfg, None).unwrap();
    let out = dir.path().join("out");
    let mut again = RunConfig::load(&out.join(CONFIG_FILE)).unwrap();
    again.out = dir.path().join("again");
    cmd_finetune(&again, None).unwrap();
    for file in [CHECKPOINT_FILE, HISTORY_FILE] {
        assert_eq!(
            std::fs::read(out.join(file)).unwrap(),
            std::fs::read(again.out.join(file)).unwrap()
        );
    }
}

#[test]
fn finetune_from_a_pretrained_checkpoint_reports_test_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let regress = "data.synth.kind = noisy-sine-regress\ntrain.epochs = 2\n";
    let mut pre = RunConfig::load(&write_config(dir.path(), regress)).unwrap();
    pre.out = dir.path().join("pre");
    cmd_pretrain(&pre).unwrap();
    let ckpt = pre.out.join(CHECKPOINT_FILE);

    let mut fine = pre.clone();
    fine.task = eanet::config::TaskKind::Regression;
    fine.out = dir.path().join("fine");
    let report = cmd_finetune(&fine, Some(&ckpt)).unwrap();
    assert_eq!(report.metric, "rmse");
    let test = report.test.unwrap();
    assert!(test.is_finite() && test >= 0.0);
    assert!(report.copied.unwrap() > 0);
    assert!(report.to_string().contains("test rmse"));

    let eval = cmd_eval(&fine, &fine.out.join(CHECKPOINT_FILE)).unwrap();
    let scored = eval.scores.iter().find(|(s, _)| *s == "test").unwrap().1;
    assert_eq!(scored, test);
}

#[test]
fn classification_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&write_config(
        dir.path(),
        "task = classification\ntrain.epochs = 1\ndata.valid_fraction = 0.25\n",
    ))
    .unwrap();
    let report = cmd_finetune(&cfg, None).unwrap();
    assert_eq!(report.metric, "accuracy");
    let acc = report.test.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(report.valid.is_some());
    assert!(report.history.records[0].valid_metric.is_some());
}

#[test]
fn incompatible_width_is_rejected_with_the_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut pre = RunConfig::load(&write_config(dir.path(), "train.epochs = 1\n")).unwrap();
    pre.out = dir.path().join("pre");
    cmd_pretrain(&pre).unwrap();

    let mut fine = pre.clone();
    fine.task = eanet::config::TaskKind::Classification;
    fine.model.d = 32;
    fine.out = dir.path().join("fine");
    let err = cmd_finetune(&fine, Some(&pre.out.join(CHECKPOINT_FILE))).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("architecture mismatch") && msg.contains("embed.weight"),
        "{msg}"
    );
}

#[test]
fn missing_data_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&write_config(
        dir.path(),
        "data.source = csv\ndata.train = nowhere.csv\n",
    ))
    .unwrap();
    let err = cmd_pretrain(&cfg).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(err.to_string().contains("nowhere.csv"));

    let cfg = RunConfig::load(&write_config(dir.path(), "data.source = csv\n")).unwrap();
    assert!(matches!(cmd_pretrain(&cfg).unwrap_err(), Error::Usage(_)));
}

#[test]
fn csv_data_trains_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        kind: SynthKind::FreqClass,
        t: 10,
        n_train: 24,
        n_test: 8,
        ..Default::default()
    };
    let (train, test) = synth_dataset(&spec).unwrap();
    save_csv_long(&dir.path().join("train.csv"), &train).unwrap();
    save_csv_long(&dir.path().join("test.csv"), &test).unwrap();
    let extra =
        "task = classification\ndata.source = csv\ndata.train = train.csv\ndata.test = test.csv\ntrain.epochs = 1\n";
    let cfg = RunConfig::load(&write_config(dir.path(), extra)).unwrap();
    let report = cmd_finetune(&cfg, None).unwrap();
    assert!(report.test.is_some());
    let effective = std::fs::read_to_string(dir.path().join("out").join(CONFIG_FILE)).unwrap();
    assert!(effective.contains("model.n_classes = 4"));
    assert!(effective.contains("model.max_len = 10"));
}

#[test]
fn exported_attention_reimports_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(&write_config(dir.path(), "task = classification\ntrain.epochs = 1\n")).unwrap();
    cmd_finetune(&cfg, None).unwrap();
    let path = dir.path().join("attn.csv");
    let rows = cmd_export_attn(&cfg, &dir.path().join("out").join(CHECKPOINT_FILE), 3, &path).unwrap();
    assert_eq!(rows, 2 * 2 * 12 * 12);

    let records = load_attention(&path).unwrap();
    assert_eq!(records.len(), rows);
    let mut buf = Vec::new();
    eanet::tables::write_attention(&mut buf, &records).unwrap();
    let again = eanet::tables::read_attention(buf.as_slice(), "mem").unwrap();
    for (a, b) in records.iter().zip(&again) {
        assert!((a.logit - b.logit).abs() <= 1e-12 && (a.probability - b.probability).abs() <= 1e-12);
    }
    for row in records.chunks(12) {
        let sum: f64 = row.iter().map(|r| r.probability).sum();
        assert!((sum - 1.0).abs() <= 1e-6, "{sum}");
        assert!(row
            .iter()
            .all(|r| r.row == row[0].row && r.head == row[0].head && r.layer == row[0].layer));
    }
}

#[test]
fn metrics_command_aggregates_tables() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    std::fs::write(&path, "dataset,A,B\nd1,2,4\n").unwrap();
    let rel = cmd_metrics(&path, MetricOp::RelDiff, true).unwrap();
    assert!((rel[0].1 + 1.0 / 3.0).abs() < 1e-12 && (rel[1].1 - 1.0 / 3.0).abs() < 1e-12);
    let rank = cmd_metrics(&path, MetricOp::Rank, true).unwrap();
    assert_eq!(rank, [("A".to_string(), 1.0), ("B".to_string(), 2.0)]);

    std::fs::write(&path, "").unwrap();
    assert!(cmd_metrics(&path, MetricOp::Rank, true).is_err());
    std::fs::write(&path, "dataset,A,B\nd1,2\n").unwrap();
    assert!(cmd_metrics(&path, MetricOp::RelDiff, true).is_err());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_eanet");
    let table = dir.path().join("t.csv");
    std::fs::write(&table, "dataset,A,B\nd1,1,3\nd2,2,1\n").unwrap();
    let out = Command::new(exe)
        .args(["metrics", "--op", "rank"])
        .arg(&table)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        format!("A,{}\nB,{}\n", eanet::fmt_f64(1.5), eanet::fmt_f64(1.5))
    );

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "model.d = 16\nmodel.heads = many\n").unwrap();
    let out = Command::new(exe)
        .args(["pretrain", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 2"));

    let cfg = write_config(dir.path(), "train.epochs = 1\n");
    let run_dir = dir.path().join("cli-run");
    let out = Command::new(exe)
        .args(["pretrain", "--seed", "4", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join(CHECKPOINT_FILE).is_file());
    let effective = std::fs::read_to_string(run_dir.join(CONFIG_FILE)).unwrap();
    assert!(effective.contains("train.seed = 4"));
}
