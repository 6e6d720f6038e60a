use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn auxtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxtune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = auxtune(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = [
    "--hidden-dim",
    "16",
    "--num-layers",
    "1",
    "--heads",
    "2",
    "--batch-size",
    "4",
    "--warmup-steps",
    "0",
];

fn grammar_data(root: &Path) -> PathBuf {
    let dir = root.join("data");
    ok(&[
        "datagen",
        "--task",
        "grammar",
        "--count",
        "300",
        "--scorer-count",
        "100",
        "--conditional-count",
        "200",
        "--dev-count",
        "6",
        "--seed",
        "3",
        "--out-dir",
        s(&dir),
    ]);
    dir
}

fn exact_data(root: &Path) -> PathBuf {
    let dir = root.join("exact");
    ok(&[
        "datagen",
        "--task",
        "exact",
        "--count",
        "300",
        "--seed",
        "7",
        "--out-dir",
        s(&dir),
    ]);
    dir
}

fn pretrain(data: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    pretrain_steps(data, out, "6", extra)
}

fn pretrain_steps(data: &Path, out: &Path, steps: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "pretrain",
        "--data-dir",
        s(data),
        "--out-dir",
        s(out),
        "--steps",
        steps,
        "--eval-every",
        "2",
    ];
    args.extend(TINY);
    args.extend(extra);
    ok(&args);
    out.join("checkpoint.bin")
}

fn train_aux(data: &Path, base: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train-aux",
        "--data-dir",
        s(data),
        "--base-checkpoint",
        s(base),
        "--out-dir",
        s(out),
        "--steps",
        "4",
        "--eval-every",
        "2",
    ];
    args.extend(TINY);
    args.extend(extra);
    auxtune(&args)
}

#[test]
fn datagen_is_deterministic_per_seed() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for dir in [&a, &b] {
        ok(&[
            "datagen",
            "--task",
            "exact",
            "--seed",
            "7",
            "--count",
            "500",
            "--out-dir",
            s(dir),
        ]);
    }
    for name in ["task.txt", "pretrain.txt", "conditional.tsv", "vocab.txt"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("run.command=datagen\n"));
    assert!(manifest.contains("seed=7\n") && manifest.contains("output.task.txt.sha256="));
}

#[test]
fn datagen_usage_and_validation_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let missing = auxtune(&["datagen", "--task", "exact", "--seed", "7"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--out-dir"));
    let zero = auxtune(&[
        "datagen",
        "--task",
        "grammar",
        "--count",
        "0",
        "--out-dir",
        s(root.path()),
    ]);
    assert_eq!(code(&zero), 2);
    assert_eq!(
        code(&auxtune(&[
            "datagen",
            "--task",
            "poetry",
            "--out-dir",
            s(root.path())
        ])),
        2
    );
    assert_eq!(code(&auxtune(&["datagen", "--bogus-flag"])), 2);
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("c.txt");
    let out = root.path().join("d");
    fs::write(
        &cfg,
        format!("task=exact\ncount=50\nseed=1\nout-dir={}\n", out.display()),
    )
    .unwrap();
    ok(&["datagen", "--config", s(&cfg), "--seed", "2"]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=2\n") && manifest.contains("count=50\n"));
    assert_eq!(
        fs::read_to_string(out.join("pretrain.txt"))
            .unwrap()
            .lines()
            .count(),
        50
    );
    fs::write(&cfg, "task=exact\ncolour=blue\n").unwrap();
    assert_eq!(
        code(&auxtune(&[
            "datagen",
            "--config",
            s(&cfg),
            "--out-dir",
            s(&out)
        ])),
        2
    );
}

#[test]
fn rerunning_a_manifest_reproduces_outputs() {
    let root = tempfile::tempdir().unwrap();
    let data = exact_data(root.path());
    let first = root.path().join("one");
    pretrain(&data, &first, &[]);
    let second = root.path().join("two");
    ok(&[
        "pretrain",
        "--config",
        s(&first.join("manifest.txt")),
        "--out-dir",
        s(&second),
    ]);
    for name in ["checkpoint.bin", "metrics.csv"] {
        assert_eq!(
            fs::read(first.join(name)).unwrap(),
            fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn pretrain_prints_metrics_and_resume_continues_the_curve() {
    let root = tempfile::tempdir().unwrap();
    let data = exact_data(root.path());
    let full = root.path().join("full");
    let stdout = {
        let mut args = vec![
            "pretrain",
            "--data-dir",
            s(&data),
            "--out-dir",
            s(&full),
            "--steps",
            "8",
            "--eval-every",
            "2",
        ];
        args.extend(TINY);
        ok(&args)
    };
    assert!(stdout.contains("step 8 loss"), "{stdout}");
    let half = root.path().join("half");
    pretrain_steps(&data, &half, "4", &[]);
    let rest = root.path().join("rest");
    let resume = half.join("checkpoint.bin");
    pretrain_steps(&data, &rest, "8", &["--resume", s(&resume)]);

    let rows = |p: &Path| -> Vec<(usize, f64)> {
        fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].parse().unwrap(), f[1].parse().unwrap())
            })
            .collect()
    };
    let uninterrupted = rows(&full);
    let continued: Vec<(usize, f64)> = rows(&half).into_iter().chain(rows(&rest)).collect();
    assert_eq!(uninterrupted.len(), continued.len());
    for ((s1, l1), (s2, l2)) in uninterrupted.iter().zip(&continued) {
        assert_eq!(s1, s2);
        assert!((l1 - l2).abs() < 1e-6, "step {s1}: {l1} vs {l2}");
    }
    assert_eq!(
        fs::read(full.join("checkpoint.bin")).unwrap(),
        fs::read(rest.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn train_aux_validates_variant_and_vocabulary() {
    let root = tempfile::tempdir().unwrap();
    let data = exact_data(root.path());
    let base = pretrain(&data, &root.path().join("base"), &[]);
    let bad = train_aux(
        &data,
        &base,
        &root.path().join("f0"),
        &["--variant", "feature", "--layers", "0"],
    );
    assert_eq!(code(&bad), 2, "{}", String::from_utf8_lossy(&bad.stderr));
    let deep = train_aux(
        &data,
        &base,
        &root.path().join("f9"),
        &["--variant", "feature", "--layers", "9"],
    );
    assert_eq!(code(&deep), 2);
    let missing = train_aux(
        &data,
        &base,
        &root.path().join("fm"),
        &["--variant", "feature"],
    );
    assert_eq!(code(&missing), 2);

    let grammar = grammar_data(root.path());
    let mismatch = train_aux(&grammar, &base, &root.path().join("mm"), &[]);
    assert_eq!(code(&mismatch), 2);
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("vocabulary"));
}

#[test]
fn train_aux_keeps_the_base_and_reports_oracle_kl() {
    let root = tempfile::tempdir().unwrap();
    let data = exact_data(root.path());
    let base = pretrain(&data, &root.path().join("base"), &[]);
    let before = fs::read(&base).unwrap();
    for (name, extra) in [
        ("direct", vec![]),
        ("feature", vec!["--variant", "feature", "--layers", "1"]),
    ] {
        let out_dir = root.path().join(name);
        let out = train_aux(&data, &base, &out_dir, &extra);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("base_hash"), "{stdout}");
        let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        let last = csv.lines().last().unwrap();
        assert!(last.starts_with("4,"));
        let kl: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
        assert!(kl >= 0.0);
    }
    assert_eq!(
        fs::read(&base).unwrap(),
        before,
        "input checkpoint untouched"
    );
}

#[test]
fn generate_is_reproducible_and_validates_inputs() {
    let root = tempfile::tempdir().unwrap();
    let data = grammar_data(root.path());
    let base = pretrain(&data, &root.path().join("base"), &[]);
    let aux_dir = root.path().join("aux");
    let out = train_aux(&data, &base, &aux_dir, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let aux = aux_dir.join("checkpoint.bin");
    let vocab = fs::read_to_string(data.join("vocab.txt")).unwrap();
    let keyword = vocab
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("keywords "))
        .and_then(|l| l.split_whitespace().next())
        .expect("vocab lists keywords")
        .to_string();

    let gen_with = |kw: &str, extra: &[&str]| {
        let mut args = vec![
            "generate",
            "--checkpoint",
            s(&aux),
            "--data-dir",
            s(&data),
            "--keyword",
            kw,
        ];
        args.extend(extra);
        auxtune(&args)
    };
    let gen = |extra: &[&str]| gen_with(&keyword, extra);
    let a = gen(&["--n", "3", "--seed", "1", "--max-new-tokens", "8"]);
    let b = gen(&["--n", "3", "--seed", "1", "--max-new-tokens", "8"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 3);

    let g1 = gen(&["--greedy", "--seed", "1", "--max-new-tokens", "8"]);
    let g2 = gen(&["--greedy", "--seed", "99", "--max-new-tokens", "8"]);
    assert_eq!(g1.stdout, g2.stdout);

    let unknown = gen_with("zzyzx", &[]);
    assert_eq!(code(&unknown), 2);
    let msg = String::from_utf8_lossy(&unknown.stderr);
    assert!(msg.contains("zzyzx") && msg.contains(&keyword), "{msg}");

    let bad_prefix = gen(&["--prefix", "the flibbertigibbet"]);
    assert_eq!(code(&bad_prefix), 2);
    assert!(String::from_utf8_lossy(&bad_prefix.stderr).contains("flibbertigibbet"));

    let plain = auxtune(&[
        "generate",
        "--checkpoint",
        s(&base),
        "--data-dir",
        s(&data),
        "--n",
        "2",
    ]);
    assert_eq!(code(&plain), 0);
}

#[test]
fn eval_requires_a_scorer_and_writes_rows() {
    let root = tempfile::tempdir().unwrap();
    let data = grammar_data(root.path());
    let base = pretrain(&data, &root.path().join("base"), &[]);
    let out_dir = root.path().join("eval");
    let missing = auxtune(&[
        "eval",
        "--checkpoint",
        s(&base),
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--scorer"));

    let scorer = pretrain(&data, &root.path().join("scorer"), &["--shard", "scorer"]);
    let baseline_dir = root.path().join("baseline");
    let mut args = vec![
        "train-baseline",
        "--data-dir",
        s(&data),
        "--out-dir",
        s(&baseline_dir),
        "--scorer",
        s(&scorer),
        "--steps",
        "4",
        "--eval-every",
        "2",
        "--max-new-tokens",
        "6",
    ];
    args.extend(TINY);
    ok(&args);
    let csv = fs::read_to_string(baseline_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(2)
        .is_some_and(|v| !v.is_empty()));

    let baseline = baseline_dir.join("checkpoint.bin");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&base),
        "--checkpoint",
        s(&baseline),
        "--data-dir",
        s(&data),
        "--scorer",
        s(&scorer),
        "--out-dir",
        s(&out_dir),
        "--max-new-tokens",
        "6",
    ]);
    assert!(
        stdout.contains("base: step 6") && stdout.contains("baseline: step 4"),
        "{stdout}"
    );
    assert!(out_dir.join("base.csv").exists() && out_dir.join("baseline.csv").exists());
}

#[test]
fn plot_draws_one_series_per_csv_and_rejects_bad_csvs() {
    let root = tempfile::tempdir().unwrap();
    let header = "step,loss,slor,keyword_accuracy,kl_to_oracle\n";
    let a = root.path().join("aux.csv");
    let b = root.path().join("baseline.csv");
    fs::write(&a, format!("{header}0,3.0,0.5,0.1,\n100,2.0,1.2,0.9,\n")).unwrap();
    fs::write(&b, format!("{header}0,3.2,0.1,0.0,\n100,2.5,0.6,0.7,\n")).unwrap();
    let out = root.path().join("plots");
    ok(&["plot", "--csv", s(&a), "--csv", s(&b), "--out-dir", s(&out)]);
    let svg = fs::read_to_string(out.join("slor.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches("class=\"legend\"").count(), 2);
    assert!(svg.contains(">aux<") && svg.contains(">baseline<"));
    assert!(!out.join("kl_to_oracle.svg").exists());

    let bad = root.path().join("bad.csv");
    fs::write(&bad, format!("{header}0,1,,,\n50,1,,,\n50,1,,,\n")).unwrap();
    let res = auxtune(&["plot", "--csv", s(&bad), "--out-dir", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 4"));
    assert_eq!(code(&auxtune(&["plot", "--out-dir", s(&out)])), 2);
}
