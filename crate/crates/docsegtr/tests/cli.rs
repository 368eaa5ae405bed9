use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use docsegtr::checkpoint::Checkpoint;
use docsegtr::config::RunConfig;
use docsegtr::dataset::{read_dataset, write_dataset};
use docsegtr::ppm::{read_ppm, RgbImage};
use docsegtr::records::{encode_records, read_records, ImageRecord};
use docsegtr::trainer::parse_log;
use docsegtr_core::evalkit::{BinaryMask, GtInstance, PredInstance};
use docsegtr_core::model::init_params;
use docsegtr_core::synthdoc::{generate_sample, GenConfig};
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_docsegtr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// SHA-256 over every file name and content in `dir`, in name order.
fn dir_hash(dir: &Path) -> String {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&p).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn gen(dir: &Path, seed: &str) {
    ok(&[
        "gen-data",
        "--out",
        s(dir),
        "--num",
        "8",
        "--size",
        "128x128",
        "--seed",
        seed,
    ]);
}

#[test]
fn gen_data_layout_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "7");
    gen(&b, "7");
    assert_eq!(dir_hash(&a), dir_hash(&b));
    let files: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(files.iter().filter(|f| f.ends_with(".ppm")).count(), 8);
    assert_eq!(files.len(), 10);
    let ann = std::fs::read_to_string(a.join("annotations.txt")).unwrap();
    assert_eq!(ann.lines().count(), 9);

    // matches the in-memory generator
    let cfg = GenConfig {
        seed: 7,
        ..GenConfig::default()
    };
    let samples = read_dataset(&a).unwrap();
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(*s, generate_sample(&cfg, i as u64).unwrap());
    }
}

#[test]
fn gen_data_usage_errors() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    let out = run(&["gen-data", "--out", s(&d), "--size", "100x128"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiple of 64"));
    gen(&d, "1");
    let out = run(&["gen-data", "--out", s(&d), "--num", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    ok(&[
        "gen-data",
        "--out",
        s(&d),
        "--num",
        "2",
        "--force",
        "--seed",
        "3",
    ]);
    assert_eq!(read_dataset(&d).unwrap().len(), 2);
    assert_eq!(
        run(&["gen-data", "--size", "128x128"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["gen-data", "--out", s(&d), "--size", "128"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn dataset_roundtrip_and_corruption() {
    let t = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        height: 64,
        width: 128,
        seed: 4,
        ..GenConfig::default()
    };
    write_dataset(&cfg, 3, t.path(), false).unwrap();
    let back = read_dataset(t.path()).unwrap();
    for (i, s) in back.iter().enumerate() {
        let orig = generate_sample(&cfg, i as u64).unwrap();
        assert_eq!(s.instances, orig.instances);
        assert_eq!(s.image, orig.image);
    }
    std::fs::write(
        t.path().join("annotations.txt"),
        "docsegtr-eval v1\n{broken\n",
    )
    .unwrap();
    let err = read_dataset(t.path()).unwrap_err().to_string();
    assert!(err.contains("annotations.txt"), "{err}");
    std::fs::write(t.path().join("meta.txt"), "height=64\n").unwrap();
    let err = read_dataset(t.path()).unwrap_err().to_string();
    assert!(err.contains("meta.txt"), "{err}");
}

fn log_rows(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn train_two_hundred_steps_halves_the_loss() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "7");
    let (ck, log) = (t.path().join("c.ckpt"), t.path().join("log.csv"));
    ok(&[
        "train",
        "--data",
        s(&d),
        "--iters",
        "200",
        "--out",
        s(&ck),
        "--log",
        s(&log),
    ]);
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("iter,total_loss,focal,dice,lr\n"));
    let rows = parse_log(&text).unwrap();
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().enumerate().all(|(i, r)| r.iter == i as u64));
    // last pass over the 8 images against the first step
    let last: f64 = rows[192..].iter().map(|r| r.total).sum::<f64>() / 8.0;
    assert!(last < 0.5 * rows[0].total, "{} -> {last}", rows[0].total);
    let stored = Checkpoint::load(&ck).unwrap();
    assert_eq!(stored.encode(), std::fs::read(&ck).unwrap());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "2");
    let p = |n: &str| t.path().join(n);
    ok(&[
        "train",
        "--data",
        s(&d),
        "--iters",
        "24",
        "--out",
        s(&p("full.ckpt")),
        "--log",
        s(&p("full.csv")),
    ]);
    ok(&[
        "train",
        "--data",
        s(&d),
        "--iters",
        "11",
        "--out",
        s(&p("half.ckpt")),
    ]);
    ok(&[
        "train",
        "--data",
        s(&d),
        "--iters",
        "24",
        "--out",
        s(&p("resumed.ckpt")),
        "--log",
        s(&p("resumed.csv")),
        "--resume",
        s(&p("half.ckpt")),
    ]);
    let full = log_rows(&p("full.csv"));
    let resumed = log_rows(&p("resumed.csv"));
    assert_eq!(resumed.len(), 13);
    assert_eq!(&full[11..], &resumed[..]);
    assert_eq!(
        std::fs::read(p("full.ckpt")).unwrap(),
        std::fs::read(p("resumed.ckpt")).unwrap()
    );
}

#[test]
fn ablation_config_trains_without_encoder() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "3");
    let cfg = t.path().join("run.cfg");
    std::fs::write(&cfg, "# no transformer\nuse_transformer=false\n").unwrap();
    let ck = t.path().join("c.ckpt");
    ok(&[
        "train",
        "--data",
        s(&d),
        "--config",
        s(&cfg),
        "--iters",
        "5",
        "--out",
        s(&ck),
    ]);
    let stored = Checkpoint::load(&ck).unwrap();
    assert!(stored
        .entries
        .keys()
        .all(|k| !k.starts_with("encoder") && !k.starts_with("pos")));
    assert!(stored.entries.keys().any(|k| k.starts_with("backbone")));
}

#[test]
fn train_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "3");
    let ck = t.path().join("c.ckpt");
    let cfg = t.path().join("bad.cfg");
    std::fs::write(&cfg, "num_heads=5\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        s(&d),
        "--config",
        s(&cfg),
        "--iters",
        "5",
        "--out",
        s(&ck),
    ]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, "lr=1e300\nwarmup_iters=0\n").unwrap();
    let out = run(&[
        "train",
        "--data",
        s(&d),
        "--config",
        s(&cfg),
        "--iters",
        "20",
        "--out",
        s(&ck),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite loss at iteration"), "{err}");
    assert!(!ck.exists());
}

#[test]
fn infer_zero_confidence_model_leaves_image_untouched() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "5");
    let mut store = init_params(&RunConfig::default().model, 0).unwrap();
    store
        .get_mut("cate.fc2.b")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = -100.0);
    let ck = t.path().join("zero.ckpt");
    Checkpoint::from_state(&store, None).save(&ck).unwrap();
    let img = d.join("000000.ppm");
    let (ov, pred) = (t.path().join("ov.ppm"), t.path().join("pred.txt"));
    ok(&[
        "infer",
        "--ckpt",
        s(&ck),
        "--image",
        s(&img),
        "--out-overlay",
        s(&ov),
        "--out-pred",
        s(&pred),
    ]);
    assert_eq!(std::fs::read(&ov).unwrap(), std::fs::read(&img).unwrap());
    let recs = read_records(&pred).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].image_id, "000000");
    assert!(recs[0].instances.is_empty());
}

#[test]
fn infer_errors() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "5");
    let ablated = RunConfig {
        model: docsegtr_core::model::ModelConfig {
            use_transformer: false,
            ..Default::default()
        },
        ..Default::default()
    };
    let ck = t.path().join("small.ckpt");
    Checkpoint::from_state(&init_params(&ablated.model, 0).unwrap(), None)
        .save(&ck)
        .unwrap();
    let pred = t.path().join("pred.txt");
    let out = run(&[
        "infer",
        "--ckpt",
        s(&ck),
        "--image",
        s(&d.join("000000.ppm")),
        "--out-pred",
        s(&pred),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("missing") && err.contains("encoder.0."),
        "{err}"
    );

    let bad = t.path().join("bad.ppm");
    std::fs::write(&bad, b"P6\n128 128\n255\nshort").unwrap();
    let good_ck = t.path().join("good.ckpt");
    Checkpoint::from_state(&init_params(&RunConfig::default().model, 0).unwrap(), None)
        .save(&good_ck)
        .unwrap();
    let out = run(&[
        "infer",
        "--ckpt",
        s(&good_ck),
        "--image",
        s(&bad),
        "--out-pred",
        s(&pred),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.ppm"));
    let out = run(&["infer", "--ckpt", s(&good_ck), "--out-pred", s(&pred)]);
    assert_eq!(out.status.code(), Some(2));
}

fn gt_as_predictions(gt: &[ImageRecord]) -> Vec<ImageRecord> {
    gt.iter()
        .map(|r| {
            let preds: Vec<PredInstance> = r
                .gts()
                .unwrap()
                .into_iter()
                .map(|g| PredInstance {
                    class_id: g.class_id,
                    score: 1.0,
                    mask: g.mask,
                })
                .collect();
            ImageRecord::from_preds(r.image_id.clone(), r.height, r.width, &preds)
        })
        .collect()
}

#[test]
fn eval_fixtures() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, "6");
    let gt = read_records(&d.join("annotations.txt")).unwrap();
    let pred = t.path().join("pred.txt");
    std::fs::write(&pred, encode_records(&gt_as_predictions(&gt))).unwrap();
    let table = ok(&["eval", "--pred", s(&pred), "--gt", s(&d)]);
    assert!(
        table
            .lines()
            .last()
            .unwrap()
            .ends_with("1.000  1.000  1.000"),
        "{table}"
    );
    assert!(
        table
            .lines()
            .skip(1)
            .all(|l| l.ends_with("1.000  1.000  1.000")),
        "{table}"
    );

    std::fs::write(&pred, "docsegtr-eval v1\n").unwrap();
    let table = ok(&["eval", "--pred", s(&pred), "--gt", s(&d)]);
    assert!(
        table
            .lines()
            .last()
            .unwrap()
            .ends_with("0.000  0.000  0.000"),
        "{table}"
    );

    let gt06 = vec![ImageRecord::from_gt(
        "x".into(),
        10,
        10,
        &[GtInstance {
            class_id: 3,
            mask: BinaryMask::rect(10, 10, 0, 0, 10, 6),
        }],
    )];
    let pred06 = vec![ImageRecord::from_preds(
        "x".into(),
        10,
        10,
        &[PredInstance {
            class_id: 3,
            score: 0.7,
            mask: BinaryMask::rect(10, 10, 0, 0, 10, 10),
        }],
    )];
    let gt_file = t.path().join("gt06.txt");
    std::fs::write(&gt_file, encode_records(&gt06)).unwrap();
    std::fs::write(&pred, encode_records(&pred06)).unwrap();
    let table = ok(&["eval", "--pred", s(&pred), "--gt", s(&gt_file)]);
    assert_eq!(
        table.lines().last().unwrap(),
        "all       0.300  1.000  0.000",
        "{table}"
    );
    assert!(table.contains("table     0.300"), "{table}");

    std::fs::write(&pred, "docsegtr-eval v2\n").unwrap();
    assert_eq!(
        run(&["eval", "--pred", s(&pred), "--gt", s(&d)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bench_attn_prints_counts_and_ratio() {
    let out = ok(&[
        "bench-attn",
        "--height",
        "32",
        "--width",
        "32",
        "--channels",
        "8",
        "--heads",
        "2",
    ]);
    assert!(
        out.contains("full attention score entries: 1048576 (formula (h*w)^2 = 1048576)"),
        "{out}"
    );
    assert!(
        out.contains("twin attention score entries: 65536 (formula h*w^2 + w*h^2 = 65536)"),
        "{out}"
    );
    assert!(out.contains("ratio full/twin: 16.00"), "{out}");
    let out = ok(&["bench-attn", "--height", "2", "--width", "8"]);
    assert!(
        out.contains("entries: 256 ") && out.contains("entries: 160 "),
        "{out}"
    );
    assert_eq!(
        run(&[
            "bench-attn",
            "--height",
            "4",
            "--width",
            "4",
            "--channels",
            "6",
            "--heads",
            "4"
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn ppm_reader_accepts_comments_and_rejects_garbage() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path().join("x.ppm");
    std::fs::write(&p, b"P6 # c\n1 1 255\n\x01\x02\x03").unwrap();
    assert_eq!(
        read_ppm(&p).unwrap(),
        RgbImage {
            width: 1,
            height: 1,
            pixels: vec![1, 2, 3]
        }
    );
    std::fs::write(&p, b"P3\n1 1\n255\n1 2 3").unwrap();
    assert!(read_ppm(&p).is_err());
}
