//! End-to-end runs of the `warpbench` binary on a small synthetic IDX dataset.

use std::path::Path;
use std::process::{Command, Output};

use warpbench::harness::report::CSV_HEADER;
use warpbench::harness::sweep::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use warpbench::harness::{read_results_csv, Recipe};

const SIDE: usize = 20;

/// Ten classes, each a bright 6x6 block at its own position plus a
/// deterministic speckle.
fn write_dataset(dir: &Path, per_class: usize, salt: usize, images: &str, labels: &str) {
    let count = per_class * 10;
    let mut img = Vec::new();
    img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for d in [count, SIDE, SIDE] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(count as u32).to_be_bytes());
    for i in 0..count {
        let class = i % 10;
        let (y0, x0) = (2 + (class / 5) * 8, 1 + (class % 5) * 3);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let block = (y0..y0 + 6).contains(&y) && (x0..x0 + 6).contains(&x);
                let speckle = ((i + salt) * 31 + y * 17 + x * 7).is_multiple_of(23);
                img.push(if block { 230 } else if speckle { 120 } else { 0 });
            }
        }
        lab.push(class as u8);
    }
    std::fs::write(dir.join(images), img).unwrap();
    std::fs::write(dir.join(labels), lab).unwrap();
}

fn dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 40, 0, TRAIN_IMAGES, TRAIN_LABELS);
    write_dataset(dir.path(), 10, 5, TEST_IMAGES, TEST_LABELS);
    dir
}

fn warpbench(args: &[&str], data: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpbench"))
        .args(args)
        .arg("--data")
        .arg(data)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--set", "elm.hidden_units=40", "--set", "features.filters=8", "--set", "mlp.hidden_units=8"];

#[test]
fn baseline_csv_is_identical_across_thread_counts() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let run = |threads: &str, sub: &str| {
        let dir = out.path().join(sub);
        let mut args = vec!["baseline", "--classifier", "elm,svm", "--points", "10,20", "--repeats", "2", "--no-cache"];
        args.extend(SMALL);
        args.extend(["--threads", threads, "--out", s(&dir)]);
        ok(&warpbench(&args, data.path()));
        dir
    };
    let a = run("1", "a");
    let b = run("3", "b");
    let csv_a = std::fs::read(a.join("baseline.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("baseline.csv")).unwrap());
    assert!(a.join("baseline.svg").is_file());

    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let rows = read_results_csv(a.join("baseline.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r.recipe == Recipe::Baseline && r.wall_time_s == 0.0));
    assert!(rows
        .iter()
        .all(|r| (0.0..=100.0).contains(&r.train_error_pct) && (0.0..=100.0).contains(&r.test_error_pct)));
}

#[test]
fn augment_with_cache_matches_uncached_run() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let cache = out.path().join("cache");
    let run = |extra: &[&str], sub: &str| {
        let dir = out.path().join(sub);
        let mut args = vec!["augment", "--classifier", "elm", "--points", "10,30", "--repeats", "2"];
        args.extend(SMALL);
        args.extend(["--set", "data.pool_per_class=10", "--out", s(&dir)]);
        args.extend(extra);
        ok(&warpbench(&args, data.path()));
        std::fs::read(dir.join("augment.csv")).unwrap()
    };
    let cold = run(&["--cache", s(&cache)], "cold");
    let cached_files = std::fs::read_dir(&cache).unwrap().count();
    assert!(cached_files > 0);
    let warm = run(&["--cache", s(&cache)], "warm");
    let none = run(&["--no-cache"], "none");
    assert_eq!(cold, warm);
    assert_eq!(cold, none);
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), cached_files);

    let rows = read_results_csv(out.path().join("cold/augment.csv")).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 2);
    for recipe in [Recipe::Elastic, Recipe::Smote, Recipe::Dbsmote] {
        assert_eq!(rows.iter().filter(|r| r.recipe == recipe).count(), 4);
    }
}

#[test]
fn features_command_fills_the_cache() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let cache = out.path().join("cache");
    let mut args = vec!["features", "--points", "10", "--repeats", "1", "--cache", s(&cache)];
    args.extend(SMALL);
    ok(&warpbench(&args, data.path()));
    let names: Vec<String> = std::fs::read_dir(&cache)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.ends_with(".wbf")), "{names:?}");

    let no_cache = warpbench(&["features", "--no-cache"], data.path());
    assert_eq!(no_cache.status.code(), Some(1));
}

#[test]
fn report_redraws_the_plot() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let mut args = vec!["baseline", "--classifier", "elm", "--points", "10,20", "--repeats", "1", "--no-cache"];
    args.extend(SMALL);
    args.extend(["--out", s(out.path())]);
    ok(&warpbench(&args, data.path()));

    let svg = out.path().join("again.svg");
    let report = Command::new(env!("CARGO_BIN_EXE_warpbench"))
        .args(["report", s(&out.path().join("baseline.csv")), "--out", s(&svg)])
        .output()
        .unwrap();
    ok(&report);
    let stdout = String::from_utf8(report.stdout).unwrap();
    assert!(stdout.contains("elm"), "{stdout}");
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") || text.starts_with("<?xml"));
    assert!(text.contains("class=\"train\""));
}

#[test]
fn warp_preview_writes_a_pgm() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let pgm = out.path().join("sheet.pgm");
    ok(&warpbench(
        &["warp-preview", "--count", "3", "--variants", "2", "--alpha", "2", "--sigma", "4", "--out", s(&pgm)],
        data.path(),
    ));
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n"));
    let header = String::from_utf8_lossy(&bytes[..20]).into_owned();
    let dims: Vec<usize> = header.lines().nth(1).unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    let header_len = format!("P5\n{} {}\n255\n", dims[0], dims[1]).len();
    assert_eq!(bytes.len(), header_len + dims[0] * dims[1]);
    // Tiles of SIDE pixels with a 2-pixel border: original plus 2 variants
    // per row, one row per digit.
    assert_eq!(dims, vec![3 * (SIDE + 2) + 2, 3 * (SIDE + 2) + 2]);
}

#[test]
fn bad_configuration_is_reported() {
    let data = dataset();
    let out = tempfile::tempdir().unwrap();
    let unknown = warpbench(&["baseline", "--set", "svm.gamma=2", "--no-cache", "--out", s(out.path())], data.path());
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("svm.gamma"));

    let too_many = warpbench(
        &["baseline", "--classifier", "elm", "--points", "41", "--repeats", "1", "--no-cache", "--out", s(out.path())],
        data.path(),
    );
    assert_eq!(too_many.status.code(), Some(1));
    assert!(!out.path().join("baseline.csv").exists());

    for bad in [["--points", "ten"], ["--classifier", "knn"], ["--recipe", "mixup"]] {
        let usage = warpbench(&["baseline", bad[0], bad[1]], data.path());
        assert_eq!(usage.status.code(), Some(2), "{bad:?}");
    }
}
