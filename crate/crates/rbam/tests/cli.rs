//! End-to-end checks of the command-line surface: exit codes, file
//! outputs, determinism and resume continuity.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbam::image::{read_pgm, write_pgm, GrayImage};
use tempfile::tempdir;

fn rbam() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rbam"))
}

fn run(args: &[&str]) -> Output {
    rbam().args(args).output().expect("spawn rbam")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_texture(path: &Path, seed: u64, extent: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Band-limited texture: sum of a few random sinusoids, so there is
    // structure for training but no aliasing at x2.
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.05..0.45),
                rng.gen_range(0.05..0.45),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let img = GrayImage::<f64>::from_fn(extent, extent, |y, x| {
        let mut v = 0.5;
        for (fy, fx, ph) in &waves {
            v += 0.12 * (fy * y as f64 + fx * x as f64 + ph).sin();
        }
        v.clamp(0.0, 1.0)
    })
    .unwrap();
    write_pgm(path, &img).unwrap();
}

fn make_corpus(dir: &Path, n: usize, extent: usize) -> PathBuf {
    let mut manifest = String::new();
    for i in 0..n {
        let p = dir.join(format!("img{i:02}.pgm"));
        write_texture(&p, 40 + i as u64, extent);
        manifest.push_str(&format!("img{i:02}\t{}\ttrain\n", p.display()));
    }
    let mpath = dir.join("manifest.tsv");
    std::fs::write(&mpath, manifest).unwrap();
    mpath
}

#[test]
fn degrade_halves_extents_and_rejects_bad_scale() {
    let dir = tempdir().unwrap();
    let input = dir.path().join("in.pgm");
    write_texture(&input, 1, 16);
    let output = dir.path().join("out.pgm");
    let out = run(&[
        "degrade",
        "--in",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
        "--scale",
        "2",
    ]);
    assert_exit(&out, 0);
    let down = read_pgm::<f64>(&output).unwrap();
    assert_eq!((down.height(), down.width()), (8, 8));

    let bad = run(&[
        "degrade",
        "--in",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
        "--scale",
        "3",
    ]);
    assert_exit(&bad, 2);

    // Constant image stays constant through degradation.
    let cpath = dir.path().join("const.pgm");
    write_pgm(&cpath, &GrayImage::<f64>::constant(8, 8, 0.5).unwrap()).unwrap();
    let cout = dir.path().join("const_out.pgm");
    assert_exit(
        &run(&["degrade", "--in", cpath.to_str().unwrap(), "--out", cout.to_str().unwrap(), "--scale", "2"]),
        0,
    );
    let c = read_pgm::<f64>(&cout).unwrap();
    assert!(c.data().iter().all(|v| *v == c.data()[0]));
}

#[test]
fn config_parse_failure_exits_2_with_line_number() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "blocks = 1\nbogus_key = 3\n").unwrap();
    let m = make_corpus(dir.path(), 1, 24);
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn split_assigns_80_20() {
    let dir = tempdir().unwrap();
    let m = make_corpus(dir.path(), 10, 8);
    let out_path = dir.path().join("split.tsv");
    assert_exit(
        &run(&[
            "split",
            "--manifest",
            m.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
            "--fraction",
            "0.8",
            "--seed",
            "3",
        ]),
        0,
    );
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.matches("\ttrain\t").count(), 8);
    assert_eq!(text.matches("\ttest\t").count(), 2);
    // Deterministic per seed.
    let out2 = dir.path().join("split2.tsv");
    run(&[
        "split",
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--fraction",
        "0.8",
        "--seed",
        "3",
    ]);
    assert_eq!(text, std::fs::read_to_string(&out2).unwrap());
}

#[test]
fn partition_then_eval_rich_flow() {
    let dir = tempdir().unwrap();
    // Mixed corpus: checkerboards (hard for bicubic) + smooth gradients.
    let mut manifest = String::new();
    for i in 0..3 {
        let p = dir.path().join(format!("check{i}.pgm"));
        let img = GrayImage::<f64>::from_fn(16, 16, |y, x| ((x + y) % 2) as f64).unwrap();
        write_pgm(&p, &img).unwrap();
        manifest.push_str(&format!("check{i}\t{}\ttest\n", p.display()));
        let q = dir.path().join(format!("smooth{i}.pgm"));
        let img = GrayImage::<f64>::from_fn(16, 16, |_, x| x as f64 / 15.0).unwrap();
        write_pgm(&q, &img).unwrap();
        manifest.push_str(&format!("smooth{i}\t{}\ttest\n", q.display()));
    }
    let mpath = dir.path().join("m.tsv");
    std::fs::write(&mpath, manifest).unwrap();

    // Eval --partition rich before partitioning: instructive config error.
    let early = run(&[
        "eval",
        "--baseline",
        "bicubic",
        "--manifest",
        mpath.to_str().unwrap(),
        "--scale",
        "2",
        "--partition",
        "rich",
    ]);
    assert_exit(&early, 2);
    assert!(String::from_utf8_lossy(&early.stderr).contains("partition"));

    let labeled = dir.path().join("labeled.tsv");
    let report = dir.path().join("partition.tsv");
    let out = run(&[
        "partition",
        "--manifest",
        mpath.to_str().unwrap(),
        "--out",
        labeled.to_str().unwrap(),
        "--scale",
        "2",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let labeled_text = std::fs::read_to_string(&labeled).unwrap();
    for i in 0..3 {
        assert!(labeled_text.contains(&format!("check{i}")));
    }
    assert_eq!(labeled_text.matches("\trich").count(), 3);
    assert_eq!(labeled_text.matches("\tpoor").count(), 3);

    let eval = run(&[
        "eval",
        "--baseline",
        "bicubic",
        "--manifest",
        labeled.to_str().unwrap(),
        "--scale",
        "2",
        "--partition",
        "rich",
    ]);
    assert_exit(&eval, 0);
    let table = String::from_utf8_lossy(&eval.stdout);
    // Only the 3 rich images are scored (+ header + mean footer).
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(table.contains("check0"));
    assert!(!table.contains("smooth0"));
}

fn tiny_train_args<'a>(cfg: &'a str, m: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--config", cfg, "--manifest", m, "--out", out,
    ]
}

#[test]
fn train_infer_resume_round_trip() {
    let dir = tempdir().unwrap();
    let m = make_corpus(dir.path(), 2, 32);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "blocks = 1\nchannels = 4\npatch_size = 8\nbatch_size = 2\nepochs = 2\ncheckpoint_every = 1\nseed = 11\n",
    )
    .unwrap();

    let out_a = dir.path().join("a");
    let res = run(&tiny_train_args(cfg.to_str().unwrap(), m.to_str().unwrap(), out_a.to_str().unwrap()));
    assert_exit(&res, 0);
    assert!(out_a.join("resolved.cfg").exists());
    assert!(out_a.join("epoch1.ckpt").exists());
    assert!(out_a.join("epoch2.ckpt").exists());
    assert!(out_a.join("final.ckpt").exists());
    let log_a = std::fs::read_to_string(out_a.join("train.log")).unwrap();
    assert_eq!(log_a.lines().count(), 2);

    // Identically seeded second run: identical checkpoints and log fields
    // (wallclock excluded).
    let out_b = dir.path().join("b");
    assert_exit(
        &run(&tiny_train_args(cfg.to_str().unwrap(), m.to_str().unwrap(), out_b.to_str().unwrap())),
        0,
    );
    assert_eq!(
        std::fs::read(out_a.join("final.ckpt")).unwrap(),
        std::fs::read(out_b.join("final.ckpt")).unwrap()
    );
    let log_b = std::fs::read_to_string(out_b.join("train.log")).unwrap();
    let strip = |log: &str| -> Vec<String> {
        log.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(&log_a), strip(&log_b));

    // Interrupt/resume: 1 epoch, then resume to 2; matches the 2-epoch run.
    let cfg1 = dir.path().join("run1.cfg");
    std::fs::write(
        &cfg1,
        "blocks = 1\nchannels = 4\npatch_size = 8\nbatch_size = 2\nepochs = 1\ncheckpoint_every = 1\nseed = 11\n",
    )
    .unwrap();
    let out_c = dir.path().join("c");
    assert_exit(
        &run(&tiny_train_args(cfg1.to_str().unwrap(), m.to_str().unwrap(), out_c.to_str().unwrap())),
        0,
    );
    let out_d = dir.path().join("d");
    let mut args = tiny_train_args(cfg.to_str().unwrap(), m.to_str().unwrap(), out_d.to_str().unwrap());
    let resume_path = out_c.join("final.ckpt");
    args.push("--resume");
    let rp = resume_path.to_str().unwrap().to_string();
    args.push(&rp);
    assert_exit(&run(&args), 0);
    assert_eq!(
        std::fs::read(out_a.join("final.ckpt")).unwrap(),
        std::fs::read(out_d.join("final.ckpt")).unwrap()
    );
    // The resumed log continues the curve: its single line equals run A's
    // second line (minus wallclock).
    let log_d = std::fs::read_to_string(out_d.join("train.log")).unwrap();
    assert_eq!(strip(&log_a)[1], strip(&log_d)[0]);

    // Inference doubles extents and is byte-deterministic.
    let input = dir.path().join("infer_in.pgm");
    write_texture(&input, 99, 16);
    let sr1 = dir.path().join("sr1.pgm");
    let sr2 = dir.path().join("sr2.pgm");
    for srp in [&sr1, &sr2] {
        let out = run(&[
            "infer",
            "--checkpoint",
            out_a.join("final.ckpt").to_str().unwrap(),
            "--in",
            input.to_str().unwrap(),
            "--out",
            srp.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
        assert!(String::from_utf8_lossy(&out.stdout).contains("forward_seconds"));
    }
    let img = read_pgm::<f64>(&sr1).unwrap();
    assert_eq!((img.height(), img.width()), (32, 32));
    assert_eq!(std::fs::read(&sr1).unwrap(), std::fs::read(&sr2).unwrap());

    // Evaluating the checkpoint with a mismatched scale is a config error.
    let wrong = run(&[
        "eval",
        "--checkpoint",
        out_a.join("final.ckpt").to_str().unwrap(),
        "--manifest",
        m.to_str().unwrap(),
        "--scale",
        "4",
    ]);
    assert_exit(&wrong, 2);
}

#[test]
fn gradcheck_command_passes_at_toy_scale() {
    let out = run(&["gradcheck", "--seed", "4"]);
    assert_exit(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 6); // six ablation corners
    assert!(text.lines().all(|l| l.contains("[ok]")), "{text}");
}

#[test]
fn ablate_emits_six_variant_table() {
    let dir = tempdir().unwrap();
    let m = make_corpus(dir.path(), 1, 32);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "blocks = 1\nchannels = 4\npatch_size = 8\nbatch_size = 1\nepochs = 1\nseed = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("ablate");
    let out = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let table = std::fs::read_to_string(out_dir.join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    // Param counts differ across variants with different switch sets.
    let counts: std::collections::HashSet<&str> =
        rows.iter().map(|r| r.split('\t').nth(1).unwrap()).collect();
    assert!(counts.len() >= 4, "{table}");
}
