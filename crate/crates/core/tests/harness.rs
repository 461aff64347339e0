use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semlink::harness::output::aggregate;
use semlink::harness::{read_csv, ExperimentConfig};

const SMALL: &str = r#"
[dataset]
num_identities = 8
num_colors = 2
num_types = 2
views_per_identity = 16
width = 6
height = 6
calibration_size = 32

[model]
semantic_dim = 8
channel_len = 6
encoder_hidden = 12
codec_hidden = 10
head_hidden = 6

[channel]
bandwidth = 384000.0

[train]
batch_size = 8
views_per_batch = 2
epochs_stage1 = 3
epochs_stage2 = 2
learning_rate = 3e-3

[experiment]
snr_grid_db = [-6.0, 0.0, 8.0]
num_seeds = 2
eval_passes = 2
workers = 1
"#;

fn semlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semlink"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_dir(out: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let o = semlink(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--config", "--seed", "--snr", "--method", "--mode", "--out"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    for cmd in ["train", "rank", "retrain", "sweep", "eval"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&semlink(&[])), 1);
    assert_eq!(code(&semlink(&["bogus"])), 1);
    assert_eq!(code(&semlink(&["sweep", "--frobnicate"])), 1);
    assert_eq!(code(&semlink(&["sweep", "--method", "best"])), 1);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let cfg = write_config(dir.path(), "[train]\nlearnin_rate = 0.1\n");
    let o = semlink(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let cfg = write_config(dir.path(), "[experiment]\nnum_seeds = 0\n");
    let o = semlink(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_seeds"));

    let o = semlink(&[
        "sweep",
        "--config",
        dir.path().join("missing.toml").to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_without_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = semlink(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn staged_commands_reproduce_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("num_seeds = 2", "num_seeds = 1"));
    let cfg = cfg.to_str().unwrap();
    let staged = dir.path().join("staged");
    let swept = dir.path().join("swept");
    for cmd in ["train", "rank", "retrain", "eval"] {
        let o = semlink(&[
            cmd,
            "--config",
            cfg,
            "--seed",
            "3",
            "--mode",
            "mtc",
            "--out",
            staged.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = semlink(&[
        "sweep",
        "--config",
        cfg,
        "--seed",
        "3",
        "--mode",
        "mtc",
        "--out",
        swept.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let run = run_dir(&staged);
    assert!(run.file_name().unwrap().to_str().unwrap().ends_with("-s3"));
    for file in [
        "config.toml",
        "mtc/stage1.json",
        "mtc/stage2.json",
        "mtc/importance-0.txt",
        "mtc/stage1_log.csv",
    ] {
        assert!(run.join(file).exists(), "{file}");
    }
    let eval = std::fs::read(run.join("mtc/eval.csv")).unwrap();
    let sweep = std::fs::read(run_dir(&swept).join("results.csv")).unwrap();
    assert_eq!(eval, sweep);
}

#[test]
fn sweep_writes_every_row_and_consistent_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = semlink(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = run_dir(&out);
    let rows = read_csv(&run.join("results.csv")).unwrap();
    // seeds x modes x snr x methods
    assert_eq!(rows.len(), 2 * 2 * 3 * 4);
    assert!(!run.join("failures.txt").exists());
    for name in ["s0-mtc.csv", "s1-stc.csv", "s0-stc-importance-2.txt"] {
        assert!(run.join("logs").join(name).exists(), "{name}");
    }

    let cfg = ExperimentConfig::load(&cfg).unwrap();
    for row in &rows {
        let channel = cfg.channel.with_snr(row.snr_db);
        assert_eq!(
            row.budget,
            semlink::channel::feature_budget(&channel, cfg.model.channel_len)
        );
        for v in [row.rank1, row.color_acc, row.type_acc] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    for metric in ["rank1", "color_acc", "type_acc"] {
        let series =
            std::fs::read_to_string(run.join("series").join(format!("{metric}.csv"))).unwrap();
        let agg = aggregate(&rows, metric).unwrap();
        assert_eq!(series.lines().count(), agg.len() + 1);
        for line in series.lines().skip(1) {
            // results.csv keeps 4 decimals
            let cols: Vec<&str> = line.split(',').collect();
            let snr: f64 = cols[0].parse().unwrap();
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.snr_db == snr && r.method.name() == cols[1] && r.mode.name() == cols[2]
                })
                .map(|r| r.metric(metric).unwrap())
                .collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(
                (cols[3].parse::<f64>().unwrap() - mean).abs() < 1e-4,
                "{line}"
            );
            assert!(
                (cols[4].parse::<f64>().unwrap() - sd / n.sqrt()).abs() < 1e-4,
                "{line}"
            );
            assert_eq!(cols[5].parse::<f64>().unwrap(), n);
        }
    }
}

#[test]
fn full_transmission_at_high_snr_matches_the_noiseless_link() {
    use semlink::data::generate_dataset;
    use semlink::evaluate::{evaluate, EvalSettings};
    use semlink::fir::Policy;
    use semlink::harness::sweep::train_run;
    use semlink::model::Mode;

    let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
    let trained = train_run(&cfg, 0, Mode::Mtc).unwrap();
    let data = generate_dataset(&cfg.dataset_for(0)).unwrap();
    let settings = EvalSettings { passes: 2, seed: 0 };
    let run = |snr: f64| {
        evaluate(
            &trained.system,
            &data,
            &cfg.channel.with_snr(snr),
            Policy::Full,
            &trained.importance,
            &settings,
        )
        .unwrap()
    };
    let (loud, clean) = (run(60.0), run(300.0));
    for (a, b) in [
        (loud.rank1, clean.rank1),
        (loud.color_acc, clean.color_acc),
        (loud.type_acc, clean.type_acc),
    ] {
        assert!((a - b).abs() <= 0.005, "{a} vs {b}");
    }
}
