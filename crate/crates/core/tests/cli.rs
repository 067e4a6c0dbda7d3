use std::path::{Path, PathBuf};
use std::process::Command;

use zoft::harness::RUN_HEADER;
use zoft::testbeds::Objective;
use zoft::testbeds::QuadraticFamily;
use zoft::PertNNParams;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn zoft(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_zoft")).args(args).env_remove("ZOFT_THREADS").output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_cfg(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Run {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    zoft(&args)
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn data_rows(csv: &str) -> usize {
    csv.lines().count() - 1
}

const TRAIN_MINIMAL: &str = "\
[experiment]
id = t

[task]
kind = quadratic
train_tasks = 1

[meta]
steps = 10
";

#[test]
fn train_finetuner_writes_checkpoint_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.ini", TRAIN_MINIMAL);
    let r = run_cfg("train-finetuner", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(dir.path().join("out/t.pertnn").exists());
    PertNNParams::load(dir.path().join("out/t.pertnn")).unwrap();
    let csv = read(dir.path().join("out/t_meta.csv"));
    assert_eq!(csv.lines().next().unwrap(), RUN_HEADER);
    assert_eq!(data_rows(&csv), 10);
}

#[test]
fn train_finetuner_rows_scale_with_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.ini", &TRAIN_MINIMAL.replace("train_tasks = 1", "train_tasks = 3"));
    let r = run_cfg("train-finetuner", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = read(dir.path().join("t_meta.csv"));
    for task in ["quad-1000", "quad-1001", "quad-1002"] {
        assert_eq!(csv.lines().filter(|l| l.split(',').nth(2) == Some(task)).count(), 10);
    }
}

#[test]
fn missing_task_section_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", "[experiment]\nid = x\n\n[meta]\nsteps = 5\n");
    let r = run_cfg("train-finetuner", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("[task]"), "{}", r.stderr);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.ini", "[experiment]\nid = x\nthis line is wrong\n");
    let r = run_cfg("compare", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 3"), "{}", r.stderr);

    let cfg = write(dir.path(), "d.ini", "[experiment]\nsteps = 4\nbogus = 1\n[task]\nkind = quadratic\n");
    let r = run_cfg("compare", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 3") && r.stderr.contains("bogus"), "{}", r.stderr);
}

#[test]
fn missing_config_file_is_a_config_error() {
    let r = zoft(&["compare", "--config", "/nonexistent/zoft.ini"]);
    assert_eq!(r.code, 2);
}

fn finetune_cfg(mode: &str, checkpoint: Option<&str>) -> String {
    let mut s = format!(
        "[experiment]\nid = f\nmode = {mode}\nseeds = 0, 1, 2\nsteps = 12\nlr = 0.01\n\n[task]\nkind = quadratic\neval_tasks = 2\n"
    );
    if let Some(c) = checkpoint {
        s.push_str(&format!("\n[finetuner]\ncheckpoint = {c}\n"));
    }
    s
}

#[test]
fn finetune_mezo_needs_no_checkpoint_and_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.ini", &finetune_cfg("mezo", None));
    let r = run_cfg("finetune", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = read(dir.path().join("f_trajectory.csv"));
    assert_eq!(data_rows(&csv), 12 * 3 * 2);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("mezo")));
}

#[test]
fn finetune_with_checkpoint_relative_to_config() {
    let dir = tempfile::tempdir().unwrap();
    let task = QuadraticFamily::two_rank().sample(0).unwrap();
    PertNNParams::unit(task.partition(), 8).unwrap().save(dir.path().join("net.pertnn")).unwrap();
    let cfg = write(dir.path(), "f.ini", &finetune_cfg("finetuner", Some("net.pertnn")));
    let r = run_cfg("finetune", &cfg, &dir.path().join("o"), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(data_rows(&read(dir.path().join("o/f_trajectory.csv"))), 72);
}

#[test]
fn finetune_missing_or_corrupt_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.ini", &finetune_cfg("finetuner", Some("absent.pertnn")));
    assert_eq!(run_cfg("finetune", &cfg, dir.path(), &[]).code, 2);
    write(dir.path(), "bad.pertnn", "ZOFT-PERTNN v1\ngarbage\n");
    let cfg = write(dir.path(), "g.ini", &finetune_cfg("finetuner", Some("bad.pertnn")));
    let r = run_cfg("finetune", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("checkpoint"), "{}", r.stderr);
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.ini", &finetune_cfg("mezo", None).replace("lr = 0.01", "lr = 100"));
    let r = run_cfg("finetune", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(dir.path().join("f_trajectory.csv").exists());
}

#[test]
fn compare_self_tie_with_unit_finetuner() {
    let dir = tempfile::tempdir().unwrap();
    let task = QuadraticFamily::two_rank().sample(0).unwrap();
    PertNNParams::unit(task.partition(), 4).unwrap().save(dir.path().join("unit.pertnn")).unwrap();
    let cfg = write(
        dir.path(),
        "c.ini",
        "[experiment]\nid = c\nseeds = 0, 1\nsteps = 60\nlr = 0.01, 0.02\n\n[task]\nkind = quadratic\neval_tasks = 3\n\n[finetuner]\ncheckpoint = unit.pertnn\n",
    );
    let r = run_cfg("compare", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let summary = read(dir.path().join("c_summary.csv"));
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1..5], rows[1][1..5]);
    assert_eq!(rows[0][5..], ["0", "0", "6"]);
    assert!(read(dir.path().join("c_summary.txt")).contains("6 task-seed pairs"));
    assert_eq!(data_rows(&read(dir.path().join("c_runs.csv"))), 2 * 2 * 3 * 2 * 60);
}

#[test]
fn compare_rejects_empty_seeds_and_mismatched_grids() {
    let dir = tempfile::tempdir().unwrap();
    let base = "[experiment]\nseeds = \nmethods = mezo\n\n[task]\nkind = quadratic\n";
    let cfg = write(dir.path(), "a.ini", base);
    let r = run_cfg("compare", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("seed"), "{}", r.stderr);

    let cfg = write(
        dir.path(),
        "b.ini",
        "[experiment]\nlr_mezo = 0.01\nlr_finetuner = 0.02\n\n[task]\nkind = quadratic\n\n[meta]\nsteps = 2\n",
    );
    let r = run_cfg("compare", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("grid"), "{}", r.stderr);
}

#[test]
fn finetuner_without_source_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.ini", "[experiment]\nsteps = 5\n\n[task]\nkind = quadratic\n");
    assert_eq!(run_cfg("compare", &cfg, dir.path(), &[]).code, 2);
}

const SWEEP: &str = "\
[experiment]
id = s
seeds = 0, 1
steps = 40
methods = mezo
lr = 0.001, 0.01, 0.1

[task]
kind = quadratic
eval_tasks = 2
";

#[test]
fn sweep_counts_trajectories_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.ini", SWEEP);
    let r = run_cfg("sweep-lr", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let curves = read(dir.path().join("s_curves.csv"));
    let mut trajectories = std::collections::BTreeMap::new();
    for l in curves.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        *trajectories.entry((f[2].to_string(), f[3].to_string(), f[4].to_string())).or_insert(0) += 1;
    }
    // diverged runs stop early
    assert_eq!(trajectories.len(), 3 * 2 * 2);
    assert!(trajectories.values().all(|&n| (1..=40).contains(&n)));
    let stab = read(dir.path().join("s_stability.csv"));
    assert_eq!(data_rows(&stab), 3 * 2 * 2);
    assert!(stab.lines().skip(1).all(|l| ["diverged", "plateaued", "converged"].contains(&l.rsplit(',').next().unwrap())));
}

#[test]
fn sweep_tiny_rates_all_plateau() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.ini", &SWEEP.replace("lr = 0.001, 0.01, 0.1", "lr = 1e-9, 1e-8, 1e-7"));
    let r = run_cfg("sweep-lr", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let stab = read(dir.path().join("s_stability.csv"));
    assert!(stab.lines().skip(1).all(|l| l.ends_with(",plateaued")), "{stab}");
}

#[test]
fn sweep_grid_must_span_two_decades() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.ini", &SWEEP.replace("lr = 0.001, 0.01, 0.1", "lr = 0.01, 0.02, 0.05"));
    assert_eq!(run_cfg("sweep-lr", &cfg, dir.path(), &[]).code, 2);
    let cfg = write(dir.path(), "t.ini", &SWEEP.replace("lr = 0.001, 0.01, 0.1", "lr = 0.001, 0.1"));
    assert_eq!(run_cfg("sweep-lr", &cfg, dir.path(), &[]).code, 2);
}

const ABLATE: &str = "\
[experiment]
id = a
seeds = 0, 1
steps = 20
methods = finetuner
lr = 0.005

[task]
kind = quadratic
family = stiff
train_tasks = 2
eval_tasks = 2

[meta]
steps = 20
reset_period = 5

[ablation]
axes = reset, normalization
";

#[test]
fn ablate_full_grid_has_four_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.ini", ABLATE);
    let r = run_cfg("ablate", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = read(dir.path().join("a_ablation.csv"));
    assert_eq!(data_rows(&csv), 4);
    assert_eq!(data_rows(&read(dir.path().join("a_ablation_seeds.csv"))), 8);
}

#[test]
fn ablate_rejects_unknown_axis_and_partition_on_quadratic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "a.ini", &ABLATE.replace("axes = reset, normalization", "axes = reset, momentum"));
    let r = run_cfg("ablate", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("momentum"), "{}", r.stderr);
    let cfg = write(dir.path(), "b.ini", &ABLATE.replace("axes = reset, normalization", "axes = partition"));
    assert_eq!(run_cfg("ablate", &cfg, dir.path(), &[]).code, 2);
}

#[test]
fn ablate_partition_axis_on_mlp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "p.ini",
        "[experiment]\nid = p\nseeds = 3\nsteps = 10\nmethods = finetuner\nlr = 0.01\n\n[task]\nkind = mlp\nsamples = 32\ntrain_tasks = 1\neval_tasks = 1\n\n[meta]\nsteps = 10\n\n[ablation]\naxes = partition\n",
    );
    let r = run_cfg("ablate", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = read(dir.path().join("p_ablation.csv"));
    assert!(csv.contains("partition=block") && csv.contains("partition=layer"));
}

fn bounds_cfg(extra: &str) -> String {
    format!("[experiment]\nid = b\n\n[bounds]\nsamples = 4000\n{extra}")
}

#[test]
fn verify_bounds_default_campaign_has_fifteen_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.ini", &bounds_cfg(""));
    let r = run_cfg("verify-bounds", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    let csv = read(dir.path().join("b_bounds.csv"));
    assert_eq!(data_rows(&csv), 15);
    assert!(csv.lines().skip(1).all(|l| l.contains(",true,0")));
}

#[test]
fn verify_bounds_zero_step_reports_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.ini", &bounds_cfg("profiles = 1:48\netas = 0\n"));
    let r = run_cfg("verify-bounds", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    let csv = read(dir.path().join("b_bounds.csv"));
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    for col in ["mezo_bound", "blockwise_unit", "blockwise_optimal", "measured_unit", "closed_unit"] {
        let i = header.iter().position(|h| *h == col).unwrap();
        assert_eq!(row[i].parse::<f64>().unwrap(), 0.0, "{col}");
    }
}

#[test]
fn verify_bounds_malformed_profile_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["profiles = 1:x\n", "profiles = 1:2:3\n", "profiles = 0:4\n", "profiles = 1:49\n"] {
        let cfg = write(dir.path(), "b.ini", &bounds_cfg(bad));
        let r = run_cfg("verify-bounds", &cfg, dir.path(), &[]);
        assert_eq!(r.code, 2, "{bad}: {}", r.stderr);
    }
}

#[test]
fn bound_violation_exits_with_four() {
    // the single-coefficient Gaussian estimator overshoots the blockwise bound
    // when the stiffest block is full rank
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.ini",
        "[experiment]\nid = v\n\n[bounds]\nprofiles = 16:2\netas = 0.01\nsamples = 100000\nscheme = joint-gaussian\n",
    );
    let r = run_cfg("verify-bounds", &cfg, dir.path(), &[]);
    assert_eq!(r.code, 4, "{}{}", r.stdout, r.stderr);
    assert!(r.stdout.contains("Soundness"));
}

#[test]
fn seed_flag_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.ini", &finetune_cfg("mezo", None));
    let r = run_cfg("finetune", &cfg, dir.path(), &["--seed", "42"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = read(dir.path().join("f_trajectory.csv"));
    assert_eq!(data_rows(&csv), 12 * 2);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(3) == Some("42")));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.ini", SWEEP);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run_cfg("sweep-lr", &cfg, &a, &["--threads", "1"]).code, 0);
    let out = Command::new(env!("CARGO_BIN_EXE_zoft"))
        .args(["sweep-lr", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()])
        .env("ZOFT_THREADS", "4")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["s_curves.csv", "s_stability.csv", "s_summary.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
}

#[test]
fn zero_threads_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.ini", SWEEP);
    assert_eq!(run_cfg("sweep-lr", &cfg, dir.path(), &["--threads", "0"]).code, 2);
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "ini") {
            let cfg = zoft::harness::ExperimentConfig::load(&path).unwrap();
            cfg.experiment("x").unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 7);
}

#[test]
fn train_finetuner_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.ini", TRAIN_MINIMAL);
    for sub in ["a", "b"] {
        assert_eq!(run_cfg("train-finetuner", &cfg, &dir.path().join(sub), &[]).code, 0);
    }
    for f in ["t.pertnn", "t_meta.csv", "t_meta_summary.txt"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn unnormalized_runs_accept_off_budget_scales() {
    use zoft::harness::{run_one, Method, RunSettings, RunSpec, Task};
    let task = Task::Quadratic(QuadraticFamily::two_rank().sample(3).unwrap());
    let nn = PertNNParams::init(task.partition(), 8, zoft::NoiseSeed::new(5, 0)).unwrap();
    let settings =
        RunSettings { steps: 20, epsilon: 1e-3, batch_size: 4, normalize: false, record_wall_time: false, pertnn: Some(&nn) };
    let run = run_one(RunSpec { method: Method::FineTuner, task: &task, seed: 0, lr: 1e-3 }, settings).unwrap();
    let d = task.partition().total() as f64;
    let off = run.trajectory.records.iter().any(|r| {
        let budget: f64 = r.scales.iter().zip(task.partition().sizes()).map(|(s, &n)| n as f64 * s * s).sum();
        (budget - d).abs() > 1e-6 * d
    });
    assert!(off);
}
