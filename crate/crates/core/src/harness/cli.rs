//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::{parse_list, ExperimentConfig, Recipe};
use super::report::{emit_learning_curve_plot, read_results_csv, summary_table, write_results_csv};
use super::sweep::{baseline_trend, load_mnist, output_paths, run_sweep_with, ExperimentResult, SweepData};
use crate::classifiers::ClassifierKind;
use crate::error::{Error, Result};
use crate::rng;
use crate::warp::{elastic_warp, generate_displacement_field};

#[derive(Debug, Parser)]
#[command(name = "warpbench", version, about = "Learning-curve benchmarks for data-space and feature-space augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Real-data learning curves.
    Baseline(RunArgs),
    /// Learning curves for the augmented recipes (elastic, smote, dbsmote).
    Augment(RunArgs),
    /// Contact sheet of original and elastically warped digits (PGM).
    WarpPreview(PreviewArgs),
    /// Precompute the feature cache for a sweep configuration.
    Features(RunArgs),
    /// Summarize a results CSV and redraw its plot.
    Report(ReportArgs),
}

/// Rejects malformed lists at parse time so they count as usage errors.
fn checked_list<T: std::str::FromStr>(value: &str) -> std::result::Result<String, String> {
    parse_list::<T>(value).map(|_| value.to_string()).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Classifiers, comma separated: mlp, svm, elm.
    #[arg(long, value_name = "LIST", value_parser = checked_list::<ClassifierKind>)]
    classifier: Option<String>,
    /// Recipes, comma separated: baseline, elastic, smote, dbsmote.
    #[arg(long, value_name = "LIST", value_parser = checked_list::<Recipe>)]
    recipe: Option<String>,
    /// Samples per class at each sweep point, comma separated.
    #[arg(long, value_name = "LIST", value_parser = checked_list::<usize>)]
    points: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Worker threads. Results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Train the MLP for 2000 full-batch epochs instead of the desk default.
    #[arg(long)]
    fidelity: bool,
    /// Directory with the IDX files (default: $WARPBENCH_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cache directory for features and warped images.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, conflicts_with = "cache")]
    no_cache: bool,
    /// Write measured wall times into the CSV.
    #[arg(long)]
    wall_time: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Warp strength (RMS displacement in pixels).
    #[arg(long)]
    alpha: Option<f64>,
    /// Smoothing width in pixels.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Digits to show, one per row.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Warped copies per digit.
    #[arg(long, default_value_t = 6)]
    variants: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file (binary PGM).
    #[arg(long, default_value = "warp_preview.pgm")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Results CSV written by `baseline` or `augment`.
    input: PathBuf,
    /// Plot output (SVG); defaults to the input path with an .svg extension.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

/// Runs the tool; returns the process exit code (0 ok, 1 runtime error,
/// 2 usage error).
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match &cli.command {
        Command::Baseline(a) | Command::Augment(a) | Command::Features(a) => a.threads,
        Command::WarpPreview(a) => a.threads,
        Command::Report(a) => a.threads,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Parameter("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Parameter(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Baseline(a) => sweep_command(&a, Recipe::Baseline),
        Command::Augment(a) => sweep_command(&a, Recipe::Elastic),
        Command::Features(a) => features_command(&a),
        Command::WarpPreview(a) => preview_command(&a),
        Command::Report(a) => report_command(&a),
    })
}

/// Defaults, then the config file, then `--set`, then the dedicated flags.
fn build_config(a: &RunArgs, augmented: bool) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    if augmented {
        c.recipes = vec![Recipe::Elastic, Recipe::Smote, Recipe::Dbsmote];
    }
    if let Some(path) = &a.config {
        c.apply_file(path)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        c.master_seed = s;
    }
    if let Some(o) = &a.out {
        c.out_dir = o.clone();
    }
    if let Some(list) = &a.classifier {
        c.classifiers = parse_list::<ClassifierKind>(list)?;
    }
    if let Some(list) = &a.recipe {
        c.recipes = parse_list::<Recipe>(list)?;
    }
    if let Some(list) = &a.points {
        c.sweep_points = parse_list(list)?;
    }
    if let Some(r) = a.repeats {
        c.repeats = r;
    }
    if a.threads.is_some() {
        c.threads = a.threads;
    }
    if a.fidelity {
        c.set("run.fidelity", "true")?;
    }
    if let Some(d) = &a.data {
        c.data_dir = d.clone();
    }
    if let Some(d) = &a.cache {
        c.cache_dir = Some(d.clone());
    }
    if a.no_cache {
        c.cache_dir = None;
    }
    if a.wall_time {
        c.record_wall_time = true;
    }
    c.validate()?;
    Ok(c)
}

fn sweep_command(a: &RunArgs, default_recipe: Recipe) -> Result<()> {
    let c = build_config(a, default_recipe.is_augmented())?;
    if default_recipe == Recipe::Baseline && c.recipes != [Recipe::Baseline] {
        return Err(Error::Parameter("`baseline` runs only the baseline recipe; use `augment` for the others".into()));
    }
    if default_recipe.is_augmented() && c.recipes.contains(&Recipe::Baseline) && c.recipes.len() == 1 {
        return Err(Error::Parameter("`augment` needs at least one augmented recipe".into()));
    }
    let data = SweepData::prepare(&c)?;
    let results = run_sweep_with(&c, &data)?;
    let stem = if default_recipe.is_augmented() { "augment" } else { "baseline" };
    let (csv, svg) = output_paths(&c.out_dir, stem);
    write_results_csv(&results, &csv, c.record_wall_time)?;
    emit_learning_curve_plot(&results, &svg)?;
    print_summary(&results)?;
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}

fn print_summary(results: &[ExperimentResult]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let mut text = summary_table(results);
    for t in baseline_trend(results) {
        if t.smallest.n_per_class == t.largest.n_per_class {
            continue;
        }
        text.push_str(&format!(
            "{} baseline: test {:.3}% at {}/class -> {:.3}% at {}/class; gap {:.3} -> {:.3}\n",
            t.classifier,
            t.smallest.mean_test,
            t.smallest.n_per_class,
            t.largest.mean_test,
            t.largest.n_per_class,
            t.smallest.mean_gap,
            t.largest.mean_gap
        ));
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn features_command(a: &RunArgs) -> Result<()> {
    let c = build_config(a, false)?;
    let Some(cache) = &c.cache_dir else {
        return Err(Error::Parameter("`features` needs a cache directory (--cache)".into()));
    };
    let data = SweepData::prepare(&c)?;
    println!(
        "cached features for {} test images (dim {}) and the training rows of the configured sweep in {}",
        data.test_features.len(),
        data.test_features.dim(),
        cache.display()
    );
    Ok(())
}

fn preview_command(a: &PreviewArgs) -> Result<()> {
    let mut c = ExperimentConfig::default();
    if let Some(path) = &a.config {
        c.apply_file(path)?;
    }
    if let Some(d) = &a.data {
        c.data_dir = d.clone();
    }
    let alpha = a.alpha.unwrap_or(c.elastic.alpha);
    let sigma = a.sigma.unwrap_or(c.elastic.sigma);
    let seed = a.seed.unwrap_or(c.master_seed);
    if a.count == 0 {
        return Err(Error::Parameter("--count must be >= 1".into()));
    }
    let (_, test) = load_mnist(&c.data_dir)?;
    let (h, w) = (test.height(), test.width());
    let cols = 1 + a.variants;
    let pad = 2;
    let (sheet_w, sheet_h) = (cols * (w + pad) + pad, a.count.min(test.len()) * (h + pad) + pad);
    let mut pixels = vec![128u8; sheet_w * sheet_h];
    for row in 0..a.count.min(test.len()) {
        let original = test.image(row);
        for col in 0..cols {
            let img = if col == 0 {
                original.to_owned()
            } else {
                let field_seed = rng::derive_seed(seed, &[rng::tag("preview"), row as u64, col as u64]);
                let field = generate_displacement_field(h, w, sigma, field_seed)?;
                elastic_warp(original, &field, alpha)?
            };
            let (oy, ox) = (pad + row * (h + pad), pad + col * (w + pad));
            for y in 0..h {
                for x in 0..w {
                    pixels[(oy + y) * sheet_w + ox + x] = 255 - (img[[y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    write_pgm(&a.out, sheet_w, sheet_h, &pixels)?;
    println!(
        "wrote {} ({} digits, original then {} warps at alpha={alpha}, sigma={sigma})",
        a.out.display(),
        a.count.min(test.len()),
        a.variants
    );
    Ok(())
}

fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn report_command(a: &ReportArgs) -> Result<()> {
    let results = read_results_csv(&a.input)?;
    let out = a.out.clone().unwrap_or_else(|| a.input.with_extension("svg"));
    emit_learning_curve_plot(&results, &out)?;
    print_summary(&results)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(cli_main(["warpbench", "baseline", "--bogus"]), 2);
        assert_eq!(cli_main(["warpbench", "frobnicate"]), 2);
        assert_eq!(cli_main(["warpbench"]), 2);
        assert_eq!(cli_main(["warpbench", "--help"]), 0);
    }

    #[test]
    fn missing_dataset_exits_1() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nowhere");
        let code = cli_main([
            "warpbench",
            "baseline",
            "--data",
            missing.to_str().unwrap(),
            "--no-cache",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "run.points = 500, 1000\nrun.repeats = 5\nelastic.alpha = 3\nrun.seed = 9\n").unwrap();
        let cli = Cli::try_parse_from([
            "warpbench",
            "augment",
            "--config",
            file.to_str().unwrap(),
            "--repeats",
            "2",
            "--set",
            "elm.lambda=0.5",
        ])
        .unwrap();
        let Command::Augment(args) = cli.command else { unreachable!() };
        let c = build_config(&args, true).unwrap();
        assert_eq!((c.sweep_points.clone(), c.repeats, c.master_seed), (vec![500, 1000], 2, 9));
        assert_eq!((c.elastic.alpha, c.elm.lambda), (3.0, 0.5));
        assert_eq!(c.recipes, vec![Recipe::Elastic, Recipe::Smote, Recipe::Dbsmote]);
    }
}
