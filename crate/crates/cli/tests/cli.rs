use std::fs;
use std::path::Path;
use std::process::Command;

use spinn::config::{preset, RunConfig};
use spinn::diagnostics::{modal_tangent, ModalVariant, ProbeKind};
use spinn::field::{Inner, ProfileAnsatz};
use spinn::training::WindowedModel;
use spinn::{Checkpoint, ReferenceSolution, SavedModel};
use spinn_cli::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spinn"));
    c.env_remove("SPINN_THREADS");
    c
}

fn smoke_config(dir: &Path, reference: Option<&str>) -> std::path::PathBuf {
    let mut c = preset("smoke").unwrap();
    c.reference = reference.map(String::from);
    c.out_dir = None;
    let p = dir.join("smoke.json");
    fs::write(&p, c.to_json()).unwrap();
    p
}

fn make_ac_reference(path: &Path) {
    let st = bin()
        .args(["make-reference", "--problem", "allen_cahn", "--modes", "64", "--samples", "11", "--out"])
        .arg(path)
        .status()
        .unwrap();
    assert!(st.success());
}

/// Reference sampled from the model itself on a `n`-point periodic grid.
fn self_reference(model: &WindowedModel, n: usize, times: usize) -> ReferenceSolution {
    let m = &model.models[0];
    let x: Vec<f64> = (0..n).map(|j| -1.0 + 2.0 * j as f64 / n as f64).collect();
    let t: Vec<f64> = (0..times).map(|i| i as f64 / (times - 1) as f64).collect();
    let pts: Vec<(Vec<f64>, f64)> = t.iter().flat_map(|&t| x.iter().map(move |&x| (vec![x], t))).collect();
    let v = m.values_at(&pts).unwrap();
    ReferenceSolution::new("allen_cahn", t, vec![x], vec![2.0], vec![v.data]).unwrap()
}

fn trained_smoke(dir: &Path) -> Checkpoint {
    let cfg = smoke_config(dir, None);
    let out = dir.join("run");
    let st = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(st.success());
    Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap()
}

#[test]
fn missing_reference_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), Some("nowhere/ac.ref"));
    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere/ac.ref"), "{err}");
}

#[test]
fn smoke_run_emits_artifacts_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    make_ac_reference(&dir.path().join("ac.ref"));
    let cfg = smoke_config(dir.path(), Some("ac.ref"));
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let st = bin().args(["train", "--seed", "3", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert!(st.success());
        for f in [CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE, SIDECAR_FILE] {
            assert!(out.join(f).exists(), "{f}");
        }
        let rep: MetricReport = serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(rep.seed, 3);
        assert!(rep.rel_l2.unwrap()[0].is_finite());
        reports.push((fs::read(out.join(REPORT_FILE)).unwrap(), fs::read(out.join(METRICS_FILE)).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn eval_of_exact_fit_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_smoke(dir.path());
    let SavedModel::Field(model) = &ckpt.model else { panic!() };
    let r = self_reference(model, 32, 5);
    let rp = dir.path().join("self.ref");
    r.save(&rp).unwrap();
    let args = EvalArgs { checkpoint: dir.path().join("run").join(CHECKPOINT_FILE), reference: rp, out: None };
    let a = cmd_eval(&args).unwrap();
    assert!(a.rel_l2.as_ref().unwrap()[0] < 1e-8);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&cmd_eval(&args).unwrap()).unwrap());

    let gs = ReferenceSolution::new("gray_scott", vec![0.0], vec![vec![0.0, 0.5], vec![0.0, 0.5]], vec![1.0, 1.0], vec![vec![0.0; 4], vec![0.0; 4]]).unwrap();
    let gp = dir.path().join("gs.ref");
    gs.save(&gp).unwrap();
    let out = bin().args(["eval", "--checkpoint"]).arg(&args.checkpoint).arg("--reference").arg(&gp).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reference_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.ref");
    let r = cmd_make_reference(&MakeReferenceArgs { problem: "kdv".into(), modes: Some(64), dt: Some(1e-3), samples: Some(6), out: p.clone() }).unwrap();
    assert_eq!(ReferenceSolution::load(&p).unwrap(), r);
    assert_eq!(r.shape(), vec![6, 64]);
    let big = MakeReferenceArgs { problem: "gray_scott".into(), modes: Some(256), dt: None, samples: None, out: dir.path().join("x.ref") };
    assert_eq!(exit_code(&cmd_make_reference(&big).unwrap_err()), 2);
}

#[test]
fn sweep_rows_and_equivalence() {
    let empty = SweepSpec { preset: None, base: None, target_params: None, runs: vec![] };
    assert!(run_sweep(&empty, None, None).unwrap().is_empty());
    let dir = tempfile::tempdir().unwrap();
    let sp = dir.path().join("empty.json");
    fs::write(&sp, serde_json::to_string(&empty).unwrap()).unwrap();
    let st = bin().args(["sweep", "--config"]).arg(&sp).arg("--out").arg(dir.path().join("e")).status().unwrap();
    assert!(st.success());
    assert_eq!(fs::read_to_string(dir.path().join("e/sweep.csv")).unwrap().trim(), SWEEP_HEADER.join(","));

    let mut base = preset("smoke").unwrap();
    base.optim.max_steps = 5;
    let target = base.model_config().unwrap().param_count();
    let two = SweepSpec {
        preset: None,
        base: Some(base.clone()),
        target_params: Some(target),
        runs: vec![spinn_cli::SweepEntry { num_scales: 3, num_features: None }, spinn_cli::SweepEntry { num_scales: 2, num_features: Some(3) }],
    };
    let reference = self_reference(&WindowedModel { models: vec![base.init_model().unwrap()] }, 32, 5);
    let rows = run_sweep(&two, None, Some(&reference)).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "2");
    assert_eq!(rows[0][2], target.to_string());

    let single = run_training(&base, None, None).unwrap();
    let direct = spinn_cli::evaluate(&single.checkpoint, &reference).unwrap();
    assert_eq!(rows[0][3], format!("{:e}", direct.rel_l2.unwrap()[0]));

    let infeasible = SweepSpec { target_params: Some(10), runs: vec![spinn_cli::SweepEntry { num_scales: 3, num_features: None }], ..two };
    let rows = run_sweep(&infeasible, None, None).unwrap();
    assert!(rows[0][5].starts_with("skipped"));
}

fn exact_profile() -> ProfileAnsatz {
    let run: RunConfig = preset("burgers_mlp").unwrap();
    let mut a = run.profile_ansatz().unwrap();
    if let Inner::Mlp(d) = &mut a.inner {
        for t in d.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    a.c = 1.0;
    a.tail = false;
    a.exact_linear = true;
    a
}

#[test]
fn diagnose_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cp = dir.path().join("exact.spnckpt");
    Checkpoint { model: SavedModel::Profile(exact_profile()), adam: None, rng: None, step: 0, weights: vec![], run: None }.save(&cp).unwrap();
    let args = DiagnoseArgs { checkpoint: cp, mode: DiagnoseMode::Burgers, reference: None, out: dir.path().join("b"), grid: None };
    let v = cmd_diagnose(&args, 1).unwrap();
    assert!(v["pde_mse"].as_f64().unwrap() < 1e-28, "{v}");

    let ckpt = trained_smoke(dir.path());
    let SavedModel::Field(model) = &ckpt.model else { panic!() };
    let rp = dir.path().join("self.ref");
    self_reference(model, 32, 4).save(&rp).unwrap();
    let cpath = dir.path().join("run").join(CHECKPOINT_FILE);
    let args = DiagnoseArgs { checkpoint: cpath.clone(), mode: DiagnoseMode::Spectrum, reference: Some(rp), out: dir.path().join("s"), grid: None };
    cmd_diagnose(&args, 1).unwrap();
    let text = fs::read_to_string(dir.path().join("s/spectrum.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 17);
    for l in &lines[1..] {
        let m: f64 = l.split(',').nth(2).unwrap().parse().unwrap();
        assert!(m < 1e-12, "{l}");
    }

    let args = DiagnoseArgs { checkpoint: cpath, mode: DiagnoseMode::Modal, reference: None, out: dir.path().join("m"), grid: Some(16) };
    cmd_diagnose(&args, 1).unwrap();
    let text = fs::read_to_string(dir.path().join("m/modal.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 8);
    let ks: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    assert!(ks.windows(2).all(|w| w[1] > w[0]));
    for r in &rows {
        let k = r[0] as usize;
        let o = modal_tangent(&model.models[0], k, ProbeKind::Cos, ModalVariant::Output, 16, 0.0).unwrap();
        let p = modal_tangent(&model.models[0], k, ProbeKind::Cos, ModalVariant::Operator, 16, 0.0).unwrap();
        assert!((r[1] - o).abs() <= 1e-12 * o.abs() && (r[2] - p).abs() <= 1e-12 * p.abs());
    }
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&preset("smoke").unwrap().to_json()).unwrap();
    v["training"]["Mxx"] = 3.into();
    fs::write(&p, v.to_string()).unwrap();
    let out = bin().args(["train", "--config"]).arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("training"));
    let out = bin().env("SPINN_THREADS", "0").args(["preset", "smoke"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().env("SPINN_THREADS", "4").args(["preset", "smoke"]).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn numerical_failure_exits_three_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = preset("smoke").unwrap();
    c.optim.lr = 1e300;
    c.reference = None;
    let p = dir.path().join("hot.json");
    fs::write(&p, c.to_json()).unwrap();
    let out_dir = dir.path().join("o");
    let out = bin().args(["train", "--config"]).arg(&p).arg("--out").arg(&out_dir).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("poisoned.json").exists());
    assert!(Checkpoint::load(&out_dir.join("poisoned.spnckpt")).is_ok());
}

#[test]
fn image_fit_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.ppm");
    spinn::ImageTarget::test_pattern(16).save(&img).unwrap();
    let st = bin().args(["image-fit", "--model", "beignet", "--steps", "3", "--image"]).arg(&img).arg("--out").arg(dir.path().join("o")).status().unwrap();
    assert!(st.success());
    for f in ["psnr.csv", "fit.ppm", REPORT_FILE, CHECKPOINT_FILE] {
        assert!(dir.path().join("o").join(f).exists(), "{f}");
    }
    let ck = Checkpoint::load(&dir.path().join("o").join(CHECKPOINT_FILE)).unwrap();
    assert!(matches!(ck.model, SavedModel::Image(_)));
}
