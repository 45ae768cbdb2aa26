use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dapa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapa"))
        .current_dir(dir)
        .env("DAPA_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SPEC: &str = "num_domains = 2\nsessions_per_domain = 3\nframes_per_session = 100\nfeature_dim = 5\n\
                    test_sessions_per_domain = 1\n";

const RUN: &str = "[model]\nd_prompt = 3\nd_model = 6\nlstm_layers = 1\nhead_hidden = [6]\n\
                   [train]\nepochs = 1\nlr_peak = 1e-3\nwarmup_steps = 2\nbatch_train = 4\n";

/// Writes a spec and a corpus under `dir`, returning the manifest path.
fn corpus(dir: &Path, spec: &str) -> PathBuf {
    fs::write(dir.join("spec.toml"), spec).unwrap();
    let o = dapa(dir, &["synth", "--spec", "spec.toml", "--out", "corpus"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("corpus/manifest.toml")
}

fn trained(dir: &Path) -> PathBuf {
    corpus(dir, SPEC);
    fs::write(dir.join("run.toml"), RUN).unwrap();
    let o = dapa(dir, &["train", "--config", "run.toml", "--data", "corpus/manifest.toml", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("run")
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_and_lists_domains() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), SPEC).unwrap();
    let a = dapa(d, &["synth", "--spec", "spec.toml", "--out", "a"]);
    let b = dapa(d, &["synth", "--spec", "spec.toml", "--out", "b"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(files_under(&d.join("a")), files_under(&d.join("b")));
    assert!(stdout(&a).contains("domains: 2"));
    assert!(stdout(&a).contains("seed: 40"));
    let manifest = fs::read_to_string(d.join("a/manifest.toml")).unwrap();
    assert!(manifest.contains("domain00") && manifest.contains("domain01"));
}

#[test]
fn synth_reports_coupled_latents_and_rejects_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), "coupling = 0.9\nframes_per_session = 400\n").unwrap();
    let o = dapa(d, &["synth", "--spec", "spec.toml", "--out", "c"]);
    let line = stdout(&o).lines().find(|l| l.starts_with("latent correlation")).unwrap().to_string();
    let r: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(r > 0.8, "{line}");

    fs::write(d.join("bad.toml"), "coupling = 2.0\n").unwrap();
    let o = dapa(d, &["synth", "--spec", "bad.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    fs::write(d.join("typo.toml"), "couplin = 0.5\n").unwrap();
    assert_eq!(dapa(d, &["synth", "--spec", "typo.toml", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn one_epoch_training_writes_history_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines.len(), 2, "{history}");
    assert!(lines[0].starts_with("epoch,step,lr,train_loss"));
    assert!(run.join("best/checkpoint.toml").exists());
    assert!(run.join("last/checkpoint.toml").exists());
    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.contains("d_in = 5"), "corpus width is used when the file omits it");
}

#[test]
fn default_configuration_echo_carries_the_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, SPEC);
    fs::write(d.join("run.toml"), "[model]\nd_prompt = 2\nd_model = 4\nlstm_layers = 1\nhead_hidden = [4]\n").unwrap();
    let o = dapa(
        d,
        &["train", "--config", "run.toml", "--data", "corpus/manifest.toml", "--out", "run", "--epochs", "1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("seed: 40"));
    assert!(out.contains("seed = 40"));
    assert!(out.contains("warmup_steps = 400"));
    let echo: toml::Table = toml::from_str(&fs::read_to_string(d.join("run/config.toml")).unwrap()).unwrap();
    assert_eq!(echo["train"]["lr_peak"].as_float(), Some(5e-5));
    assert_eq!(echo["train"]["warmup_steps"].as_integer(), Some(400));
    assert_eq!(echo["train"]["seed"].as_integer(), Some(40));
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, SPEC);
    fs::write(d.join("run.toml"), format!("{RUN}[data]\nmanifest = 'corpus/manifest.toml'\nout = 'from_file'\n")).unwrap();
    let o = dapa(d, &["train", "--config", "run.toml", "--seed", "7", "--lr", "0.002", "--out", "from_flag"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed: 7"));
    assert!(d.join("from_flag/history.csv").exists());
    assert!(!d.join("from_file").exists());
    let echo: toml::Table = toml::from_str(&fs::read_to_string(d.join("from_flag/config.toml")).unwrap()).unwrap();
    assert_eq!(echo["train"]["lr_peak"].as_float(), Some(0.002));
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dapa(d, &["train", "--data", "missing/manifest.toml", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing/manifest.toml"), "{}", stderr(&o));

    fs::write(d.join("bad.toml"), "[train]\nsed = 3\n").unwrap();
    let o = dapa(d, &["train", "--config", "bad.toml", "--data", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("sed") && stderr(&o).contains("bad.toml"));

    let o = dapa(d, &["train", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dapa(d, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_hyperparameters_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, SPEC);
    fs::write(d.join("run.toml"), RUN).unwrap();
    let o = dapa(d, &["train", "--config", "run.toml", "--data", "corpus/manifest.toml", "--out", "r", "--lr", "-1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn labels_as_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, SPEC);
    let o = dapa(d, &["eval", "--labels-as-predictions", "--data", "corpus/manifest.toml", "--out", "rep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("rep/report.csv")).unwrap();
    let values: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 3);
    assert!(values.iter().all(|&v| (v - 1.0).abs() < 1e-12), "{csv}");
}

#[test]
fn dataset_map_groups_domains() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = SPEC.replace("num_domains = 2", "num_domains = 3");
    corpus(d, &spec);
    fs::write(d.join("map.csv"), "domain,dataset\ndomain00,alpha\ndomain01,alpha\ndomain02,beta\n").unwrap();
    let o = dapa(
        d,
        &["eval", "--labels-as-predictions", "--data", "corpus/manifest.toml", "--dataset-map", "map.csv", "--out", "rep"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "model,alpha,beta,global");
    assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 4);

    fs::write(d.join("short.csv"), "domain00,alpha\n").unwrap();
    let o = dapa(
        d,
        &["eval", "--labels-as-predictions", "--data", "corpus/manifest.toml", "--dataset-map", "short.csv"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("domain01"));
}

#[test]
fn eval_and_predict_use_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = trained(d);
    let o = dapa(d, &["eval", "--checkpoint", "run/best", "--data", "corpus/manifest.toml", "--split", "test"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("global"));
    assert!(stdout(&o).contains("seed: 40"));
    assert!(run.join("best/eval/report.csv").exists());

    let o = dapa(d, &["predict", "--checkpoint", "run/best", "--data", "corpus/manifest.toml", "--out", "p/all.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("p/all.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 100);
    for line in csv.lines().skip(1) {
        let p: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn unknown_domain_names_the_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let other = d.join("other");
    fs::create_dir(&other).unwrap();
    corpus(&other, &SPEC.replace("num_domains = 2", "num_domains = 3"));
    let args = ["eval", "--checkpoint", "run/best", "--data", "other/corpus/manifest.toml", "--out", "rep"];
    let o = dapa(d, &args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("domain02") && stderr(&o).contains("mean-prompt"), "{}", stderr(&o));
    let mut with_policy = args.to_vec();
    with_policy.extend(["--unknown-domain", "mean-prompt"]);
    assert!(dapa(d, &with_policy).status.success());
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, SPEC);
    fs::write(d.join("run.toml"), RUN.replace("epochs = 1", "epochs = 2")).unwrap();
    for (w, out) in [("1", "w1"), ("3", "w3")] {
        let o = dapa(
            d,
            &["--workers", w, "train", "--config", "run.toml", "--data", "corpus/manifest.toml", "--out", out],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        fs::read(d.join("w1/history.csv")).unwrap(),
        fs::read(d.join("w3/history.csv")).unwrap()
    );
    assert_eq!(files_under(&d.join("w1/last")), files_under(&d.join("w3/last")));
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d, SPEC);
    fs::write(d.join("run.toml"), RUN.replace("epochs = 1", "epochs = 3")).unwrap();
    let base = ["train", "--config", "run.toml", "--data", "corpus/manifest.toml"];
    let full = dapa(d, &[&base[..], &["--out", "full"]].concat());
    assert!(full.status.success());
    let part = dapa(d, &[&base[..], &["--out", "part", "--epochs", "2"]].concat());
    assert!(part.status.success());
    let resumed = dapa(d, &[&base[..], &["--out", "part", "--resume", "part/last", "--epochs", "3"]].concat());
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert_eq!(
        fs::read_to_string(d.join("full/history.csv")).unwrap(),
        fs::read_to_string(d.join("part/history.csv")).unwrap()
    );
}

#[test]
fn gradcheck_default_run_passes_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let a = dapa(dir.path(), &["gradcheck"]);
    let b = dapa(dir.path(), &["gradcheck"]);
    assert!(a.status.success(), "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    assert!(out.contains("seed:"));
    for block in ["matmul", "softmax_rows", "lstm_forward_direction", "bilstm_stack", "cross_attention", "mlp_head"] {
        assert!(out.lines().any(|l| l.starts_with(block) && l.ends_with("pass")), "{block}\n{out}");
    }
    assert!(!out.contains("dapa_end_to_end"));
}
