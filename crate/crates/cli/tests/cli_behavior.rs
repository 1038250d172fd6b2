//! Behavioral tests of the command-line surface: configuration
//! precedence, dry runs, exit codes, and end-to-end determinism of the
//! pipeline on a deliberately tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mmrg"));
    c.args(args).env_remove("MMRG_WORKDIR");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("mmrg binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// A config small enough that the whole pipeline runs in about a second.
fn tiny_config(dir: &Path, workdir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    let text = format!(
        "# tiny end-to-end test setup\n\
         workdir={}\n\
         frames=4\ndim=8\nhidden=8\nt_max=10\nsteps=10\n\
         pretrain_clips=48\nfinetune_clips=32\n\
         pretrain_steps=400\nfinetune_steps=300\n\
         pretrain_lr=0.1\nfinetune_lr=0.1\nbatch=8\n\
         eval_n=3\ncfg_scale=2.0\n",
        workdir.display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![rdr
        .headers()
        .unwrap()
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>()];
    for rec in rdr.records() {
        rows.push(rec.unwrap().iter().map(str::to_string).collect());
    }
    rows
}

/// Value of a (metric) row in an eval CSV.
fn metric(rows: &[Vec<String>], name: &str) -> String {
    rows.iter()
        .skip(1)
        .find(|r| r[1] == name)
        .unwrap_or_else(|| panic!("no {name} row"))[2]
        .clone()
}

#[test]
fn dry_run_touches_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("w");
    let o = run(
        &["--workdir", wd.to_str().unwrap(), "--dry-run", "pipeline"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("plan:"), "{}", stdout(&o));
    assert!(!wd.exists(), "dry run must not create the workdir");
}

#[test]
fn workdir_precedence_follows_the_documented_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "workdir=from_file\n").unwrap();
    let cfg = cfg.to_str().unwrap();

    // Config file alone.
    let o = run(&["--config", cfg, "--dry-run", "gen-data"], &[]);
    assert!(stdout(&o).contains("from_file"), "{}", stdout(&o));
    // Environment beats the file.
    let env = [("MMRG_WORKDIR", "from_env")];
    let o = run(&["--config", cfg, "--dry-run", "gen-data"], &env);
    assert!(stdout(&o).contains("from_env"), "{}", stdout(&o));
    // --set beats the environment.
    let o = run(
        &["--config", cfg, "--set", "workdir=from_set", "--dry-run", "gen-data"],
        &env,
    );
    assert!(stdout(&o).contains("from_set"), "{}", stdout(&o));
    // The dedicated flag beats everything.
    let o = run(
        &[
            "--config", cfg, "--set", "workdir=from_set", "--workdir", "from_flag",
            "--dry-run", "gen-data",
        ],
        &env,
    );
    assert!(stdout(&o).contains("from_flag"), "{}", stdout(&o));
}

#[test]
fn set_overrides_config_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "alpha=0.9\n").unwrap();
    let o = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "alpha=1.5",
            "--dry-run",
            "extrapolate",
        ],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("alpha 1.5"), "{}", stdout(&o));
}

#[test]
fn config_errors_exit_two() {
    let o = run(&["--set", "bogus=1", "--dry-run", "gen-data"], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("config error"), "{}", stderr(&o));

    let o = run(&["--set", "steps=0", "--dry-run", "gen-data"], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = run(&["--set", "prune_rate=1.5", "--dry-run", "gen-data"], &[]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_four() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("w");
    // Training before gen-data: the corpus artifact is missing.
    let o = run(&["--workdir", wd.to_str().unwrap(), "pretrain"], &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("missing artifact"), "{}", stderr(&o));
    assert!(stderr(&o).contains("corpus_pretrain.mmrg"), "{}", stderr(&o));

    // Nonexistent config file.
    let o = run(&["--config", "/definitely/not/here.cfg", "gen-data"], &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn tiny_pipeline_is_deterministic_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let wd1 = tmp.path().join("w1");
    let cfg = tiny_config(tmp.path(), &wd1);
    let cfg = cfg.to_str().unwrap();

    let o = run(&["--config", cfg, "pipeline"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let artifacts = [
        "corpus_pretrain.mmrg",
        "corpus_finetune.mmrg",
        "theta_pre.mmrg",
        "theta_sft.mmrg",
        "theta_dyn.mmrg",
        "theta_adt.mmrg",
        "theta_deg.mmrg",
        "theta_con.mmrg",
        "theta_dyn_star.mmrg",
        "theta_con_star.mmrg",
        "sample_decoupled.mmrg",
        "eval_pre.csv",
        "eval_sft.csv",
        "eval_dyn.csv",
        "eval_pipeline.csv",
    ];
    let first: Vec<Vec<u8>> = artifacts
        .iter()
        .map(|a| fs::read(wd1.join(a)).unwrap_or_else(|e| panic!("{a}: {e}")))
        .collect();

    // Re-running in place rewrites every artifact bit-identically.
    let o = run(&["--config", cfg, "pipeline"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (a, bytes) in artifacts.iter().zip(&first) {
        assert_eq!(&fs::read(wd1.join(a)).unwrap(), bytes, "{a} changed on rerun");
    }

    // A fresh workdir reproduces the same bytes.
    let wd2 = tmp.path().join("w2");
    let o = run(
        &["--config", cfg, "--workdir", wd2.to_str().unwrap(), "pipeline"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for (a, bytes) in artifacts.iter().zip(&first) {
        assert_eq!(
            &fs::read(wd2.join(a)).unwrap(),
            bytes,
            "{a} differs across workdirs"
        );
    }

    // Unconditioned models report two metrics, conditioned ones three.
    let pre = read_csv(&wd1.join("eval_pre.csv"));
    assert_eq!(pre[0], ["model_stage", "metric", "value", "n", "seed_hash"]);
    assert_eq!(pre.len(), 3);
    let sft = read_csv(&wd1.join("eval_sft.csv"));
    assert_eq!(sft.len(), 4);
    let pipe = read_csv(&wd1.join("eval_pipeline.csv"));
    assert_eq!(pipe.len(), 4);
    assert!(pipe.iter().skip(1).all(|r| r[0] == "pipeline" && r[3] == "3"));
}

#[test]
fn sweeps_agree_with_single_evaluations_at_their_endpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("w");
    let cfg = tiny_config(tmp.path(), &wd);
    let cfg = cfg.to_str().unwrap();

    let o = run(&["--config", cfg, "pipeline"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    // alpha = 0 reproduces the base model's evaluation.
    let o = run(&["--config", cfg, "sweep-alpha", "--alphas", "0,0.5"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = read_csv(&wd.join("sweep_alpha.csv"));
    assert_eq!(sweep[0], ["alpha", "motion_degree", "consistency"]);
    assert_eq!(sweep.len(), 3);
    let pre = read_csv(&wd.join("eval_pre.csv"));
    assert_eq!(sweep[1][0], "0");
    assert_eq!(sweep[1][1], metric(&pre, "motion_degree"));
    assert_eq!(sweep[1][2], metric(&pre, "consistency"));

    // K = 0 is the consistency model, K = steps the motion model.
    let o = run(&["--config", cfg, "sweep-k", "--ks", "0,10"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = read_csv(&wd.join("sweep_k.csv"));
    assert_eq!(
        sweep[0],
        ["k", "strategy", "motion_degree", "consistency", "control_adherence"]
    );
    let o = run(
        &["--config", cfg, "eval", "--model", "theta_con_star.mmrg", "--out", "eval_con.csv"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let con = read_csv(&wd.join("eval_con.csv"));
    assert_eq!(sweep[1][2], metric(&con, "motion_degree"));
    assert_eq!(sweep[1][3], metric(&con, "consistency"));
    assert_eq!(sweep[1][4], metric(&con, "control_adherence"));
    let o = run(
        &["--config", cfg, "eval", "--model", "theta_dyn_star.mmrg", "--out", "eval_dynstar.csv"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dynstar = read_csv(&wd.join("eval_dynstar.csv"));
    assert_eq!(sweep[2][2], metric(&dynstar, "motion_degree"));
}

#[test]
fn conditioning_flags_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let wd = tmp.path().join("w");
    let cfg = tiny_config(tmp.path(), &wd);
    let cfg = cfg.to_str().unwrap();

    let o = run(&["--config", cfg, "gen-data"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["--config", cfg, "pretrain"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    // The base model has no adapter: conditioning it is a config error.
    let o = run(
        &["--config", cfg, "sample", "--model", "theta_pre.mmrg", "--cond", "right"],
        &[],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("adapter"), "{}", stderr(&o));

    // Unconditioned sampling of the same checkpoint works.
    let o = run(
        &["--config", cfg, "sample", "--model", "theta_pre.mmrg", "--out", "s.mmrg"],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(wd.join("s.mmrg").exists());

    // Malformed condition strings are config errors.
    let o = run(&["--config", cfg, "finetune"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        &["--config", cfg, "sample", "--model", "theta_sft.mmrg", "--cond", "sideways"],
        &[],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
