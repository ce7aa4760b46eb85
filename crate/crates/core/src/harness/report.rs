//! Result tables and learning-curve plots.

use std::fmt::Write as _;
use std::path::Path;

use super::config::Recipe;
use super::sweep::{summarize, ExperimentResult, PointSummary};
use crate::classifiers::ClassifierKind;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "classifier,recipe,n_per_class,repeat,seed,train_error_pct,test_error_pct,wall_time_s";

/// CSV text for `results`. Wall times are written as zero unless
/// `include_wall_time` is set, so that repeated runs produce identical bytes.
pub fn results_csv(results: &[ExperimentResult], include_wall_time: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let wall = if include_wall_time { r.wall_time_s } else { 0.0 };
        writeln!(
            out,
            "{},{},{},{},{},{:.4},{:.4},{:.4}",
            r.classifier, r.recipe, r.n_per_class, r.repeat, r.seed, r.train_error_pct, r.test_error_pct, wall
        )
        .unwrap();
    }
    out
}

pub fn write_results_csv(results: &[ExperimentResult], path: impl AsRef<Path>, include_wall_time: bool) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Parameter("no results to write".into()));
    }
    write_text(path.as_ref(), &results_csv(results, include_wall_time))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ExperimentResult>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Format(format!("results CSV must start with `{CSV_HEADER}`"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::Format(format!("results CSV line {}: bad {what} in {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 8 {
                return Err(bad("field count"));
            }
            Ok(ExperimentResult {
                classifier: f[0].parse().map_err(|_| bad("classifier"))?,
                recipe: f[1].parse().map_err(|_| bad("recipe"))?,
                n_per_class: f[2].parse().map_err(|_| bad("n_per_class"))?,
                repeat: f[3].parse().map_err(|_| bad("repeat"))?,
                seed: f[4].parse().map_err(|_| bad("seed"))?,
                train_error_pct: f[5].parse().map_err(|_| bad("train_error_pct"))?,
                test_error_pct: f[6].parse().map_err(|_| bad("test_error_pct"))?,
                wall_time_s: f[7].parse().map_err(|_| bad("wall_time_s"))?,
            })
        })
        .collect()
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ExperimentResult>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results_csv(&text)
}

/// Plain-text table of means and standard deviations over repeats.
pub fn summary_table(results: &[ExperimentResult]) -> String {
    let mut out = String::from("classifier recipe    n/class repeats  train%   (sd)    test%   (sd)     gap%\n");
    for s in summarize(results) {
        writeln!(
            out,
            "{:<10} {:<9} {:>7} {:>7} {:>7.3} {:>6.3} {:>8.3} {:>6.3} {:>8.3}",
            s.classifier.name(),
            s.recipe.name(),
            s.n_per_class,
            s.repeats,
            s.mean_train,
            s.std_train,
            s.mean_test,
            s.std_test,
            s.mean_gap
        )
        .unwrap();
    }
    out
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;

/// Smallest 1-2-5 step multiple at or above `v`.
fn nice_ceiling(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if m * mag >= v {
            return m * mag;
        }
    }
    10.0 * mag
}

struct Panel<'a> {
    classifier: ClassifierKind,
    recipe: Recipe,
    points: Vec<&'a PointSummary>,
}

/// One panel per classifier/recipe pair: mean error over repeats against
/// samples per class (log axis), training error dashed, test error solid.
pub fn learning_curve_svg(results: &[ExperimentResult]) -> Result<String> {
    if results.is_empty() {
        return Err(Error::Parameter("no results to plot".into()));
    }
    let summaries = summarize(results);
    let mut panels: Vec<Panel<'_>> = Vec::new();
    for s in &summaries {
        match panels.iter_mut().find(|p| p.classifier == s.classifier && p.recipe == s.recipe) {
            Some(p) => p.points.push(s),
            None => panels.push(Panel {
                classifier: s.classifier,
                recipe: s.recipe,
                points: vec![s],
            }),
        }
    }
    let mut recipes: Vec<Recipe> = Vec::new();
    for p in &panels {
        if !recipes.contains(&p.recipe) {
            recipes.push(p.recipe);
        }
    }
    let cols = recipes.len();
    let mut classifiers: Vec<ClassifierKind> = Vec::new();
    for p in &panels {
        if !classifiers.contains(&p.classifier) {
            classifiers.push(p.classifier);
        }
    }
    let rows = classifiers.len();
    let (width, height) = (PANEL_W * cols as f64, PANEL_H * rows as f64 + 24.0);

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">"
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for p in &panels {
        let col = recipes.iter().position(|&r| r == p.recipe).unwrap();
        let row = classifiers.iter().position(|&c| c == p.classifier).unwrap();
        draw_panel(&mut svg, p, col as f64 * PANEL_W, row as f64 * PANEL_H);
    }
    let ly = height - 10.0;
    writeln!(
        svg,
        "<line x1=\"12\" y1=\"{y:.1}\" x2=\"40\" y2=\"{y:.1}\" stroke=\"black\" stroke-dasharray=\"6 4\"/><text x=\"46\" y=\"{t:.1}\">training error</text>\
         <line x1=\"150\" y1=\"{y:.1}\" x2=\"178\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"184\" y=\"{t:.1}\">test error</text>",
        y = ly - 4.0,
        t = ly
    )
    .unwrap();
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn draw_panel(svg: &mut String, panel: &Panel<'_>, x0: f64, y0: f64) {
    let (left, right) = (x0 + MARGIN_L, x0 + PANEL_W - MARGIN_R);
    let (top, bottom) = (y0 + MARGIN_T, y0 + PANEL_H - MARGIN_B);
    let xs: Vec<f64> = panel.points.iter().map(|s| (s.n_per_class as f64).log10()).collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let ymax = nice_ceiling(
        panel
            .points
            .iter()
            .map(|s| s.mean_test.max(s.mean_train))
            .fold(0.0, f64::max),
    );
    let px = |x: f64| {
        if xmax > xmin {
            left + (x - xmin) / (xmax - xmin) * (right - left)
        } else {
            (left + right) / 2.0
        }
    };
    let py = |y: f64| bottom - y / ymax * (bottom - top);

    writeln!(
        svg,
        "<g class=\"panel\"><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-weight=\"bold\">{} / {}</text>",
        (left + right) / 2.0,
        y0 + 18.0,
        panel.classifier.name(),
        panel.recipe.name()
    )
    .unwrap();
    writeln!(
        svg,
        "<rect x=\"{left:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#888\"/>",
        right - left,
        bottom - top
    )
    .unwrap();
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v}</text>",
            left - 4.0,
            py(v) + 4.0
        )
        .unwrap();
    }
    for (s, &x) in panel.points.iter().zip(&xs) {
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            px(x),
            bottom + 14.0,
            s.n_per_class
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">samples per class</text>",
        (left + right) / 2.0,
        bottom + 30.0
    )
    .unwrap();
    writeln!(
        svg,
        "<text transform=\"translate({:.1} {:.1}) rotate(-90)\" text-anchor=\"middle\">error %</text>",
        x0 + 14.0,
        (top + bottom) / 2.0
    )
    .unwrap();
    for (class, dash, value) in [
        ("train", " stroke-dasharray=\"6 4\"", (|s: &PointSummary| s.mean_train) as fn(&PointSummary) -> f64),
        ("test", "", |s: &PointSummary| s.mean_test),
    ] {
        let pts: Vec<String> = panel
            .points
            .iter()
            .zip(&xs)
            .map(|(s, &x)| format!("{:.2},{:.2}", px(x), py(value(s))))
            .collect();
        writeln!(
            svg,
            "<polyline class=\"{class}\" points=\"{}\" fill=\"none\" stroke=\"#1f4e99\" stroke-width=\"1.5\"{dash}/>",
            pts.join(" ")
        )
        .unwrap();
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap();
            writeln!(svg, "<circle class=\"{class}\" cx=\"{cx}\" cy=\"{cy}\" r=\"2.5\" fill=\"#1f4e99\"/>").unwrap();
        }
    }
    svg.push_str("</g>\n");
}

pub fn emit_learning_curve_plot(results: &[ExperimentResult], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &learning_curve_svg(results)?)
}
