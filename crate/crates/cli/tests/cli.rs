mod common;

use common::*;

#[test]
fn ttt_is_deterministic_and_rejects_zero_iterations() {
    let ws = Workspace::new();
    let (a, _, _) = ws.images();
    let bundle = ws.path("bundle");
    run_ok(&["make-bundle", "--outdir", s(&bundle), "--target-class", "2"]);
    let args = |out: &str| {
        vec!["ttt".to_string(), "--image".into(), s(&a).into(), "--bundle".into(), s(&bundle).into(), "--iters".into(), "3".into(), "--out".into(), s(&ws.path(out)).into()]
    };
    let run_summary = |out: &str| {
        let a = args(out);
        let v = run_ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(v["losses"].as_array().unwrap().len(), 3);
        std::fs::read(ws.path(out).join("summary.json")).unwrap()
    };
    let first = run_summary("r1");
    assert_eq!(first, run_summary("r1"));
    assert_eq!(
        std::fs::read(ws.path("r1/losses.csv")).unwrap().split(|&b| b == b'\n').count(),
        3 + 2
    );

    let out = run(&["ttt", "--image", s(&a), "--bundle", s(&bundle), "--out", s(&ws.path("r2")), "--iters", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--iters"));
}

#[test]
fn seed_comes_from_the_environment_unless_given() {
    let ws = Workspace::new();
    let dir = ws.path("b");
    let v = run_ok(&["make-bundle", "--outdir", s(&dir)]);
    assert_eq!(v["config"]["seed"], 42);
    let out = apm().env("APM_SEED", "7").args(["make-bundle", "--outdir", s(&dir)]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["seed"], 7);
    let out = apm().env("APM_SEED", "7").args(["make-bundle", "--outdir", s(&dir), "--seed", "9"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["seed"], 9);
}

#[test]
fn make_bundle_is_reproducible() {
    let ws = Workspace::new();
    for d in ["x", "y"] {
        run_ok(&["make-bundle", "--outdir", s(&ws.path(d)), "--classes", "4", "--dc", "8", "--noise", "0.01"]);
    }
    for f in ["cls.apmt", "classes.apmt", "classes.json", "meta.json"] {
        assert_eq!(std::fs::read(ws.path("x").join(f)).unwrap(), std::fs::read(ws.path("y").join(f)).unwrap());
    }
    let out = run(&["make-bundle", "--outdir", s(&ws.path("z")), "--classes", "3", "--target-class", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--target-class"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ws = Workspace::new();
    let (_, _, manifest) = ws.images();
    let train = |epochs: &str, ckpt: &str, resume: Option<&str>| {
        let ckpt = ws.path(ckpt);
        let mut args = vec!["train", "--manifest", s(&manifest), "--epochs", epochs, "--lr", "1e-3", "--ckpt-every", "3", "--ckpt-out", s(&ckpt)];
        let from;
        if let Some(r) = resume {
            from = ws.path(r);
            args.extend(["--resume", s(&from)]);
        }
        run_ok(&args);
        std::fs::read(ckpt).unwrap()
    };
    let straight = train("6", "full.apmc", None);
    train("3", "half.apmc", None);
    let resumed = train("6", "resumed.apmc", Some("half.apmc"));
    assert_eq!(straight, resumed);
}

#[test]
fn empty_manifest_and_missing_files_name_the_culprit() {
    let ws = Workspace::new();
    let m = ws.path("empty.tsv");
    std::fs::write(&m, "# nothing\n\n").unwrap();
    let out = run(&["train", "--manifest", s(&m), "--ckpt-out", s(&ws.path("c.apmc"))]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("empty.tsv"), "{msg}");
    assert_eq!(msg.trim_end().lines().count(), 1, "{msg}");

    let out = run(&["reconstruct", "--ckpt", s(&ws.path("none.apmc")), "--image", "x.ppm", "--out", "y.ppm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("none.apmc"));
}

#[test]
fn reconstruct_and_interpolate_write_ppm() {
    let ws = Workspace::new();
    let (a, b, manifest) = ws.images();
    let ckpt = ws.path("c.apmc");
    run_ok(&["train", "--manifest", s(&manifest), "--epochs", "2", "--ckpt-out", s(&ckpt)]);
    let out = ws.path("r.ppm");
    let v = run_ok(&["reconstruct", "--ckpt", s(&ckpt), "--image", s(&a), "--out", s(&out)]);
    assert!(v["result"]["mse_per_pixel"].as_f64().unwrap() >= 0.0);
    let first = std::fs::read(&out).unwrap();
    assert!(first.starts_with(b"P6\n32 32\n255\n"));
    run_ok(&["reconstruct", "--ckpt", s(&ckpt), "--image", s(&a), "--out", s(&out)]);
    assert_eq!(first, std::fs::read(&out).unwrap());

    let frames = ws.path("frames");
    let v = run_ok(&["interpolate", "--ckpt", s(&ckpt), "--image-a", s(&a), "--image-b", s(&b), "--steps", "1", "--outdir", s(&frames)]);
    assert_eq!(v["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 2);
    let out = run(&["interpolate", "--ckpt", s(&ckpt), "--image-a", s(&a), "--image-b", s(&b), "--steps", "0", "--outdir", s(&frames)]);
    assert!(stderr(&out).contains("--steps"));
}

#[test]
fn profile_sweep_rows() {
    let ws = Workspace::new();
    let csv = ws.path("sweep.csv");
    let v = run_ok(&["profile", "--grid", "4x5", "--sweep-max", "12", "--out", s(&csv)]);
    assert_eq!(v["result"]["cost"]["n_columns"], 20);
    let text = std::fs::read_to_string(&csv).unwrap();
    let flops: Vec<u64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(flops.len(), 12);
    assert!(flops.windows(2).all(|w| w[1] > w[0]));
    let out = run(&["profile", "--grid", "4by5", "--out", s(&csv)]);
    assert!(stderr(&out).contains("--grid"));
}

#[test]
fn gradcheck_exit_codes() {
    let v = run_ok(&["gradcheck"]);
    assert_eq!(v["result"]["passed"], true);
    let out = run(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["gradcheck", "--eps", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--eps"));
}

#[test]
fn unknown_flags_and_architectures_fail_on_one_line() {
    let out = run(&["profile", "--arch", "huge"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--arch"));
    let out = run(&["ttt", "--nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr(&out).trim_end().lines().count(), 1);
}
