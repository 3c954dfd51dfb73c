//! One line per acceptance criterion; exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use eanet::commands::{
    cmd_finetune, cmd_gradcheck, cmd_metrics, cmd_pretrain, MetricOp, CHECKPOINT_FILE, HISTORY_FILE,
};
use eanet::config::RunConfig;
use eanet::eanet_core::metrics::avg_wcd;
use eanet::eanet_core::nn::ConvMaskKind;
use eanet::eanet_core::selftest::{conv_leak_count, decoder_future_mass, ea_vanilla_gap, p_one_gap, p_zero_gap};

const PRINTED_TABLE: &str = "\
dataset,LSTM,GRU,ResNet,Dilated Conv,Transformer,DC-T,EA-DC-T
AppliancesEnergy,3.844,4.151,3.369,3.711,3.663,3.035,2.957
BenzeneConcentr,7.936,6.919,2.889,2.758,1.576,1.127,0.758
BeijingPM10,101.863,101.452,95.22,96.927,98.035,91.993,91.774
BeijingPM25,64.715,65.667,64.54,64.813,64.874,59.425,59.118
LiveFuelMoisture,43.316,44.19,44.723,43.457,44.874,43.326,43.261
IEEEPPG,34.814,26.961,46.593,39.633,33.848,30.075,23.14
";
const PRINTED_REL_DIFF: [f64; 7] = [0.251, 0.182, 0.035, 0.009, -0.072, -0.173, -0.231];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn config(text: &str, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(text, "acceptance", Path::new(".")).expect("config");
    cfg.out = out.to_path_buf();
    cfg
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = cmd_gradcheck(20);
    let secs = start.elapsed().as_secs_f64();
    let worst = report.checks.iter().map(|c| c.measured).fold(0.0, f64::max);
    outcome(
        report.passed() && secs < 60.0,
        format!(
            "{} checks, max relative error {worst:.2e}, {secs:.1} s",
            report.checks.len()
        ),
    )
}

fn degenerate_equivalences() -> Outcome {
    let seed = 11;
    let a = ea_vanilla_gap(seed).unwrap_or(f64::INFINITY);
    let b = p_one_gap(seed).unwrap_or(f64::INFINITY);
    let (count, c) = p_zero_gap(seed).unwrap_or((usize::MAX, f64::INFINITY));
    outcome(
        a <= 1e-12 && b <= 1e-12 && count == 0 && c <= 1e-12,
        format!("alpha=beta=0 gap {a:.1e}, p=1 gap {b:.1e}, p=0 gap {c:.1e} with {count} attention parameters"),
    )
}

fn causality() -> Outcome {
    let seed = 12;
    let dec = conv_leak_count(&ConvMaskKind::DecoderSelf.taps(), 9, 200, seed, |r, c, i, j| {
        r > i || c > j
    });
    let encdec = conv_leak_count(&ConvMaskKind::EncoderDecoder.taps(), 9, 200, seed, |_, c, _, j| c > j);
    let mass = decoder_future_mass(seed).unwrap_or(f64::INFINITY);
    outcome(
        dec == 0 && encdec == 0 && mass == 0.0,
        format!("decoder leaks {dec}/200, encoder-decoder leaks {encdec}/200, future attention mass {mass}"),
    )
}

fn tap_count() -> Outcome {
    let n = ConvMaskKind::DecoderSelf.taps().len();
    outcome(n == 6, format!("decoder-self kernel has {n} active taps"))
}

fn metric_reproduction(dir: &Path) -> Outcome {
    let path = dir.join("table.csv");
    std::fs::write(&path, PRINTED_TABLE).expect("write table");
    let rel = cmd_metrics(&path, MetricOp::RelDiff, true).expect("reldiff");
    let rank = cmd_metrics(&path, MetricOp::Rank, true).expect("rank");
    let worst = rel
        .iter()
        .zip(PRINTED_REL_DIFF)
        .map(|((_, v), p)| (v - p).abs())
        .fold(0.0, f64::max);
    let (lstm, ea_dc) = (rank[0].1, rank[6].1);
    outcome(
        worst <= 0.002 && ea_dc == 1.0 && (lstm - 5.2).abs() <= 0.05,
        format!("max rel. diff. deviation {worst:.4}, EA-DC-T rank {ea_dc}, LSTM rank {lstm:.3}"),
    )
}

fn pretrain_smoke(dir: &Path) -> (Outcome, Option<PathBuf>) {
    let out = dir.join("pretrain");
    let cfg = config(
        "model.d = 64\nmodel.n_blocks = 2\nmodel.p = 0.25\ntrain.epochs = 20\n",
        &out,
    );
    let start = Instant::now();
    let report = match cmd_pretrain(&cfg) {
        Ok(r) => r,
        Err(e) => return (outcome(false, format!("error: {e}")), None),
    };
    let secs = start.elapsed().as_secs_f64();
    let losses = report.history.losses();
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    let passed = losses.len() == 20 && last < 0.5 * first && secs < 300.0;
    let detail = format!(
        "loss {first:.4} -> {last:.4} (ratio {:.3}) over {} epochs, {secs:.0} s",
        last / first,
        losses.len()
    );
    (outcome(passed, detail), Some(out.join(CHECKPOINT_FILE)))
}

fn finetune_capability(dir: &Path, init: Option<&Path>) -> Outcome {
    let text = "task = classification\nmodel.n_blocks = 2\ndata.valid_fraction = 0.2\ntrain.epochs = 50\ntrain.stop_at = 0.99\n";
    let report = match cmd_finetune(&config(text, &dir.join("finetune")), init) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let test = report.test.unwrap_or(0.0);
    let epochs = report.history.records.len();

    let budget = 3;
    let mut means = [0.0; 2];
    for seed in 0..5u64 {
        for (slot, arch) in ["", "model.evolve = false\nmodel.p = 1\n"].into_iter().enumerate() {
            let text = format!(
                "task = classification\nmodel.n_blocks = 2\n{arch}train.epochs = {budget}\ntrain.seed = {seed}\n"
            );
            match cmd_finetune(&config(&text, &dir.join(format!("seed{seed}-{slot}"))), None) {
                Ok(r) => means[slot] += r.test.unwrap_or(0.0) / 5.0,
                Err(e) => return outcome(false, format!("error: {e}")),
            }
        }
    }
    outcome(
        test >= 0.95 && epochs <= 50 && means[0] >= means[1],
        format!(
            "test accuracy {test:.3} after {epochs} epochs; 5-seed mean over {budget} epochs: EA-DC {:.3}, vanilla {:.3}",
            means[0], means[1]
        ),
    )
}

fn avg_wcd_cases() -> Outcome {
    let collapsed = avg_wcd(&[1.0, 2.0, 1.0, 2.0, -3.0, 0.5], 2, &[0, 0, 1], 2).unwrap();
    let two_class = avg_wcd(&[0.0, 0.0, 2.0, 0.0, 0.0, 3.0], 2, &[0, 0, 1], 2).unwrap();
    let dim = 3;
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let z: Vec<f64> = (0..labels.len() * dim).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
    let shifted: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, v)| v + [5.0, -2.5, 100.0][i % dim])
        .collect();
    let base = avg_wcd(&z, dim, &labels, 3).unwrap();
    let moved = avg_wcd(&shifted, dim, &labels, 3).unwrap();
    let two_class_err = (two_class - 2.0 / 3.0).abs();
    let shift_err = (base - moved).abs();
    outcome(
        collapsed.abs() <= 1e-9 && two_class_err <= 1e-9 && shift_err <= 1e-9,
        format!("collapsed {collapsed:.1e}, two-class error {two_class_err:.1e}, translation change {shift_err:.1e}"),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let text = "task = classification\nmodel.d = 16\nmodel.heads = 2\nmodel.n_blocks = 2\n\
                data.synth.t = 16\ndata.synth.n_train = 64\ndata.synth.n_test = 32\n\
                data.valid_fraction = 0.25\ntrain.epochs = 2\ntrain.batch_size = 16\ntrain.seed = 3\n";
    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("determinism-{run}"));
        if let Err(e) = cmd_finetune(&config(text, &out), None) {
            return outcome(false, format!("error: {e}"));
        }
        let read = |f: &str| std::fs::read(out.join(f)).expect("artifact");
        artifacts.push((read(CHECKPOINT_FILE), read(HISTORY_FILE)));
    }
    let same_ckpt = artifacts[0].0 == artifacts[1].0;
    let same_hist = artifacts[0].1 == artifacts[1].1;
    outcome(
        same_ckpt && same_hist,
        format!("checkpoints identical: {same_ckpt}, histories identical: {same_hist}"),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        println!(
            "criterion {id} [{}] {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };
    record(1, "gradient fidelity", gradient_fidelity());
    record(2, "degenerate equivalences", degenerate_equivalences());
    record(3, "causality", causality());
    record(4, "decoder-self tap count", tap_count());
    record(5, "metric reproduction", metric_reproduction(dir.path()));
    let (smoke, ckpt) = pretrain_smoke(dir.path());
    record(6, "pre-training smoke run", smoke);
    record(
        7,
        "fine-tuning capability",
        finetune_capability(dir.path(), ckpt.as_deref()),
    );
    record(8, "AvgWCD", avg_wcd_cases());
    record(9, "determinism", determinism(dir.path()));
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("{} criteria, {failed} failed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
