use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
image_size = 8
synth_n_per_class = 12
epochs = 2
batch_size = 8
k1 = 2
k2 = 2
budget = 2
ablation_folds = 2
repetitions = 2
explain_count = 2
grid = 6, 8
threads = 1
";

fn retformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retformer")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn run_in(dir: &Path, command: &str, config: &Path) -> Output {
    let out = retformer(&[command, "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", "5"]);
    assert!(out.status.success(), "{command}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir).into_iter().filter(|p| p.ends_with(".csv")).collect();
    files.sort();
    files.into_iter().map(|p| (p.clone(), std::fs::read(dir.join(&p)).unwrap())).collect()
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if e.path().is_dir() {
            out.extend(walk(&e.path()).into_iter().map(|n| format!("{name}/{n}")));
        } else {
            out.push(name);
        }
    }
    out
}

#[test]
fn every_command_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.cfg");
    std::fs::write(&config, TINY).unwrap();
    let commands = ["synth", "train", "evaluate", "tune", "ablate", "explain", "mask-study", "sweep"];
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|r| {
            let dir = tmp.path().join(r);
            for c in commands {
                run_in(&dir.join(c), c, &config);
            }
            for c in ["train", "evaluate", "tune", "explain"] {
                run_in(&dir.join(c), "report", &config);
            }
            dir
        })
        .collect();
    for c in commands {
        let (a, b) = (csv_files(&runs[0].join(c)), csv_files(&runs[1].join(c)));
        assert!(!a.is_empty(), "{c} wrote no CSV");
        assert_eq!(a, b, "{c}");
    }
    assert_eq!(
        std::fs::read(runs[0].join("evaluate/report.txt")).unwrap(),
        std::fs::read(runs[1].join("evaluate/report.txt")).unwrap()
    );
    let metrics = std::fs::read_to_string(runs[0].join("evaluate/metrics.csv")).unwrap();
    assert!(metrics.starts_with("fold,accuracy,precision,sensitivity,specificity,f1,auc\n"));
    assert_eq!(metrics.lines().count(), 3);
    let ablation = std::fs::read_to_string(runs[0].join("ablate/ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 12);
    assert!(walk(&runs[0].join("explain/heatmaps")).iter().any(|f| f.ends_with("_gradcam.png")));
}

#[test]
fn different_seeds_change_the_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.cfg");
    std::fs::write(&config, TINY).unwrap();
    let scores = |seed: &str| {
        let dir = tmp.path().join(seed);
        let out = retformer(&["train", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", seed]);
        assert!(out.status.success());
        std::fs::read(dir.join("scores.csv")).unwrap()
    };
    assert_ne!(scores("1"), scores("2"));
}

#[test]
fn config_errors_exit_with_code_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.cfg");
    std::fs::write(&config, "epochs = 3\nn_heads = 12\nn_groups = 5\n").unwrap();
    let out = retformer(&["train", "--config", config.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_groups") && err.contains("line 3"), "{err}");

    std::fs::write(&config, "epocs = 3\n").unwrap();
    let out = retformer(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epocs"));

    let out = retformer(&["train", "--k1", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k1"));
}

#[test]
fn report_on_an_empty_directory_lists_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = retformer(&["report", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("metrics.csv") && err.contains("scores.csv"), "{err}");
}

#[test]
fn missing_data_root_is_an_io_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("nowhere");
    let out = retformer(&[
        "evaluate",
        "--set",
        "dataset=image_folders",
        "--data-root",
        root.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synthesized_folders_load_back_as_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.cfg");
    std::fs::write(&config, TINY).unwrap();
    run_in(&tmp.path().join("s"), "synth", &config);
    let root = tmp.path().join("s/data");
    let out = retformer(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--set",
        "dataset=image_folders",
        "--set",
        "channels=1",
        "--data-root",
        root.to_str().unwrap(),
        "--out",
        tmp.path().join("t").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scores = std::fs::read_to_string(tmp.path().join("t/scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 12);
}
