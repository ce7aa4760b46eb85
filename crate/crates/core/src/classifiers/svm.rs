//! One-vs-all linear SVM with the squared hinge loss.
//!
//! Each class `c` minimizes
//!
//! ```text
//! f(w, b) = ½‖w‖² + C Σᵢ max(0, 1 − yᵢ(w·xᵢ + b))²
//! ```
//!
//! with `yᵢ = +1` for members of `c` and `−1` otherwise. The bias is not
//! regularized. All classes are solved together by a truncated Newton
//! method: conjugate gradients on the generalized Hessian, then Armijo
//! backtracking, starting from zero. Nothing is random, and the matrix
//! products run in a fixed order, so repeated runs give identical weights.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use super::{check_training_set, ModelWeights, TrainedModel, TrainingMetadata};
use crate::error::{Error, Result};
use crate::features::FeatureSet;

/// Relative residual at which the inner CG solve stops.
const CG_TOLERANCE: f64 = 0.1;
const CG_MAX_STEPS: usize = 100;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;
/// Curvature added to the bias direction so the Newton system stays
/// positive definite when no sample is active.
const BIAS_DAMPING: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Newton iterations.
    pub max_iterations: usize,
    /// Stop once `‖∇f‖ ≤ tolerance · ‖∇f at zero‖` for every class.
    pub tolerance: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iterations: 100,
            tolerance: 1e-3,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Parameter(format!("SVM C must be > 0, got {}", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Parameter(format!("SVM tolerance must be > 0, got {}", self.tolerance)));
        }
        Ok(())
    }

    fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("svm.c".into(), self.c.to_string()),
            ("svm.max_iterations".into(), self.max_iterations.to_string()),
            ("svm.tolerance".into(), self.tolerance.to_string()),
        ]
    }
}

/// Rows per work block. Fixed, so the summation order and therefore the
/// result never depend on the thread count.
const ROW_BLOCK: usize = 256;

/// `½‖w‖² + C Σ max(0, 1 − y s)²` for one class, scores given.
fn class_objective(w_sq: f64, c: f64, y: impl Iterator<Item = f64>, s: impl Iterator<Item = f64>) -> f64 {
    let loss: f64 = y
        .zip(s)
        .map(|(y, s)| (1.0 - y * s).max(0.0).powi(2))
        .sum();
    0.5 * w_sq + c * loss
}

/// Value of the objective for a single binary problem, as used by the
/// solver. `labels` are ±1.
pub fn binary_objective(x: ArrayView2<'_, f64>, labels: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let w_sq = w.iter().map(|v| v * v).sum();
    let scores = x.rows().into_iter().map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b);
    class_objective(w_sq, c, labels.iter().copied(), scores)
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..16 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += alpha * x);
}

/// A class-major `K × D` matrix of f64 stored alongside its f32 copy for
/// the row kernels.
fn to_f32_rows(m: &Array2<f64>) -> Array2<f32> {
    m.mapv(|v| v as f32)
}

struct Problem<'a> {
    /// Row-major samples.
    x: &'a [f32],
    n: usize,
    d: usize,
    /// ±1 per (sample, class).
    y: Array2<f64>,
    c: f64,
}

impl Problem<'_> {
    fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    fn blocks(&self) -> impl IndexedParallelIterator<Item = std::ops::Range<usize>> + '_ {
        let n = self.n;
        (0..n.div_ceil(ROW_BLOCK)).into_par_iter().map(move |b| b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n))
    }

    /// `X·Vᵀ + 1·bᵀ` for class-major `v`, as an `N × K` matrix.
    fn scores(&self, v: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        let k = v.nrows();
        let vf = to_f32_rows(v);
        let parts: Vec<Vec<f64>> = self
            .blocks()
            .map(|range| {
                let mut out = Vec::with_capacity(range.len() * k);
                for i in range {
                    let xi = self.row(i);
                    for j in 0..k {
                        out.push(f64::from(dot(xi, vf.row(j).as_slice().unwrap())) + b[j]);
                    }
                }
                out
            })
            .collect();
        Array2::from_shape_vec((self.n, k), parts.concat()).expect("block sizes add up")
    }

    /// `Σᵢ zᵢⱼ xᵢ` for every class `j`, class-major, skipping zero weights.
    fn weighted_sum(&self, z: &Array2<f64>) -> Array2<f64> {
        self.reduce_blocks(z.ncols(), |range, acc| {
            for i in range {
                let xi = self.row(i);
                for (j, &zij) in z.row(i).iter().enumerate() {
                    if zij != 0.0 {
                        axpy(zij as f32, xi, &mut acc[j * self.d..(j + 1) * self.d]);
                    }
                }
            }
            Vec::new()
        })
        .0
    }

    /// Runs `body` over fixed row blocks, each writing a `K × D` f32 partial
    /// and returning `K` f64 side sums, and adds the partials in block order.
    fn reduce_blocks(&self, k: usize, body: impl Fn(std::ops::Range<usize>, &mut [f32]) -> Vec<f64> + Sync) -> (Array2<f64>, Array1<f64>) {
        let partials: Vec<(Vec<f32>, Vec<f64>)> = self
            .blocks()
            .map(|range| {
                let mut acc = vec![0.0f32; k * self.d];
                let side = body(range, &mut acc);
                (acc, side)
            })
            .collect();
        let mut total = Array2::<f64>::zeros((k, self.d));
        let mut side_total = Array1::<f64>::zeros(k);
        for (p, side) in partials {
            total.iter_mut().zip(p).for_each(|(t, v)| *t += f64::from(v));
            side_total.iter_mut().zip(side).for_each(|(t, v)| *t += v);
        }
        (total, side_total)
    }

    fn objectives(&self, w: &Array2<f64>, s: &Array2<f64>) -> Vec<f64> {
        (0..w.nrows())
            .map(|k| {
                let w_sq = w.row(k).iter().map(|v| v * v).sum();
                class_objective(w_sq, self.c, self.y.column(k).iter().copied(), s.column(k).iter().copied())
            })
            .collect()
    }

    /// Gradient `(∂w, ∂b)` and the active-set mask.
    fn gradient(&self, w: &Array2<f64>, s: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
        let mut z = Array2::zeros(s.raw_dim());
        let mut mask = Array2::zeros(s.raw_dim());
        Zip::from(&mut z)
            .and(&mut mask)
            .and(&self.y)
            .and(s)
            .for_each(|z, m, &y, &s| {
                let margin = 1.0 - y * s;
                if margin > 0.0 {
                    *z = -2.0 * self.c * y * margin;
                    *m = 1.0;
                }
            });
        let gw = w + &self.weighted_sum(&z);
        let gb = z.sum_axis(Axis(0));
        (gw, gb, mask)
    }

    /// Diagonal of the generalized Hessian.
    fn hessian_diagonal(&self, mask: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let k = mask.ncols();
        let two_c = (2.0 * self.c) as f32;
        let (mut hw, _) = self.reduce_blocks(k, |range, acc| {
            for i in range {
                let xi = self.row(i);
                for j in 0..k {
                    if mask[[i, j]] != 0.0 {
                        let a = &mut acc[j * self.d..(j + 1) * self.d];
                        a.iter_mut().zip(xi).for_each(|(a, &x)| *a += two_c * x * x);
                    }
                }
            }
            Vec::new()
        });
        hw += 1.0;
        let hb = mask.sum_axis(Axis(0)) * (2.0 * self.c) + BIAS_DAMPING;
        (hw, hb)
    }

    /// Generalized Hessian times `(pw, pb)`, in one pass over the samples.
    fn hessian_times(&self, mask: &Array2<f64>, pw: &Array2<f64>, pb: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
        let k = pw.nrows();
        let pf = to_f32_rows(pw);
        let two_c = 2.0 * self.c;
        let (mut hw, mut hb) = self.reduce_blocks(k, |range, acc| {
            let mut sums = vec![0.0f64; k];
            for i in range {
                let xi = self.row(i);
                for j in 0..k {
                    if mask[[i, j]] != 0.0 {
                        let u = two_c * (f64::from(dot(xi, pf.row(j).as_slice().unwrap())) + pb[j]);
                        sums[j] += u;
                        axpy(u as f32, xi, &mut acc[j * self.d..(j + 1) * self.d]);
                    }
                }
            }
            sums
        });
        hw += pw;
        hb.scaled_add(BIAS_DAMPING, pb);
        (hw, hb)
    }
}

fn row_dot(aw: &Array2<f64>, ab: &Array1<f64>, bw: &Array2<f64>, bb: &Array1<f64>) -> Array1<f64> {
    let mut out = (aw * bw).sum_axis(Axis(1));
    out += &(ab * bb);
    out
}

/// Diagonally preconditioned truncated CG for `H d = −g`, class by class.
/// Classes not in `active` get a zero direction.
fn newton_direction(p: &Problem<'_>, mask: &Array2<f64>, gw: &Array2<f64>, gb: &Array1<f64>, active: &[bool]) -> (Array2<f64>, Array1<f64>) {
    let k = active.len();
    let (mw, mb) = p.hessian_diagonal(mask);
    let mut dw = Array2::zeros(gw.raw_dim());
    let mut db = Array1::zeros(k);
    let mut rw = -gw;
    let mut rb = -gb;
    for (j, &a) in active.iter().enumerate() {
        if !a {
            rw.row_mut(j).fill(0.0);
            rb[j] = 0.0;
        }
    }
    let stop: Vec<f64> = row_dot(&rw, &rb, &rw, &rb).iter().map(|v| CG_TOLERANCE * v.sqrt()).collect();
    let mut zw = &rw / &mw;
    let mut zb = &rb / &mb;
    let mut pw = zw.clone();
    let mut pb = zb.clone();
    let mut rz = row_dot(&rw, &rb, &zw, &zb);
    let mut running: Vec<bool> = active.to_vec();
    for _ in 0..CG_MAX_STEPS {
        if !running.iter().any(|&r| r) {
            break;
        }
        let (hw, hb) = p.hessian_times(mask, &pw, &pb);
        let php = row_dot(&pw, &pb, &hw, &hb);
        for j in 0..k {
            if !running[j] {
                continue;
            }
            let alpha = rz[j] / php[j];
            if !(alpha.is_finite() && php[j] > 0.0) {
                running[j] = false;
                continue;
            }
            dw.row_mut(j).scaled_add(alpha, &pw.row(j));
            db[j] += alpha * pb[j];
            rw.row_mut(j).scaled_add(-alpha, &hw.row(j));
            rb[j] -= alpha * hb[j];
            if (rw.row(j).dot(&rw.row(j)) + rb[j] * rb[j]).sqrt() <= stop[j] {
                running[j] = false;
                continue;
            }
            let mut z_row = zw.row_mut(j);
            Zip::from(&mut z_row).and(rw.row(j)).and(mw.row(j)).for_each(|z, &r, &m| *z = r / m);
            zb[j] = rb[j] / mb[j];
            let new_rz = rw.row(j).dot(&zw.row(j)) + rb[j] * zb[j];
            let beta = new_rz / rz[j];
            rz[j] = new_rz;
            Zip::from(pw.row_mut(j)).and(zw.row(j)).for_each(|p, &z| *p = z + beta * *p);
            pb[j] = zb[j] + beta * pb[j];
        }
        for j in 0..k {
            if !running[j] {
                pw.row_mut(j).fill(0.0);
                pb[j] = 0.0;
            }
        }
    }
    (dw, db)
}

pub fn train_svm(features: &FeatureSet, config: &SvmConfig) -> Result<TrainedModel> {
    config.validate()?;
    check_training_set(features)?;
    let start = Instant::now();
    let (n, d, k) = (features.len(), features.dim(), features.class_count);
    let mut y = Array2::from_elem((n, k), -1.0);
    for (i, &label) in features.labels.iter().enumerate() {
        y[[i, label as usize]] = 1.0;
    }
    let owned;
    let x = match features.vectors.as_slice() {
        Some(x) => x,
        None => {
            owned = features.vectors.as_standard_layout().into_owned();
            owned.as_slice().unwrap()
        }
    };
    let problem = Problem { x, n, d, y, c: config.c };
    // Class-major while solving: row `j` holds class `j`'s weights.
    let mut w = Array2::<f64>::zeros((k, d));
    let mut b = Array1::<f64>::zeros(k);
    let mut s = Array2::<f64>::zeros((n, k));
    let mut f = problem.objectives(&w, &s);
    let mut history = vec![f.iter().sum::<f64>()];
    let mut converged = vec![false; k];
    let mut stalled = vec![false; k];
    let mut initial_norm: Option<Vec<f64>> = None;

    for iteration in 0..=config.max_iterations {
        let (gw, gb, mask) = problem.gradient(&w, &s);
        let norms: Vec<f64> = row_dot(&gw, &gb, &gw, &gb).iter().map(|v| v.sqrt()).collect();
        let g0 = initial_norm.get_or_insert_with(|| norms.clone());
        for j in 0..k {
            converged[j] = norms[j] <= config.tolerance * g0[j];
        }
        let active: Vec<bool> = (0..k).map(|j| !converged[j] && !stalled[j]).collect();
        if iteration == config.max_iterations || !active.iter().any(|&a| a) {
            break;
        }
        let (dw, db) = newton_direction(&problem, &mask, &gw, &gb, &active);
        let slope = row_dot(&gw, &gb, &dw, &db);
        let xd = problem.scores(&dw, &db);
        for j in 0..k {
            if !active[j] {
                continue;
            }
            if !(slope[j] < 0.0) {
                stalled[j] = true;
                continue;
            }
            let (wc, dc) = (w.row(j), dw.row(j));
            let (ww, wd, dd) = (wc.dot(&wc), wc.dot(&dc), dc.dot(&dc));
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let w_sq = ww + 2.0 * t * wd + t * t * dd;
                let trial = class_objective(
                    w_sq,
                    config.c,
                    problem.y.column(j).iter().copied(),
                    s.column(j).iter().zip(xd.column(j)).map(|(s, v)| s + t * v),
                );
                if trial <= f[j] + ARMIJO * t * slope[j] {
                    accepted = Some((t, trial));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some((t, trial)) if trial <= f[j] => {
                    w.row_mut(j).scaled_add(t, &dw.row(j));
                    b[j] += t * db[j];
                    s.column_mut(j).scaled_add(t, &xd.column(j));
                    f[j] = trial;
                }
                _ => stalled[j] = true,
            }
        }
        history.push(f.iter().sum());
        log::debug!("svm iteration {}: objective {:.6}", iteration + 1, history.last().unwrap());
    }

    let metadata = TrainingMetadata {
        config: config.echo(),
        seed: None,
        wall_time_s: start.elapsed().as_secs_f64(),
        history,
        converged: Some(converged.iter().all(|&c| c)),
    };
    let weights = ModelWeights::Svm {
        w: w.t().mapv(|v| v as f32),
        b: b.mapv(|v| v as f32),
    };
    TrainedModel::new(weights, d, k, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::error_percent;
    use ndarray::array;

    fn svm_parts(m: &TrainedModel) -> (Array2<f32>, Array1<f32>) {
        match &m.weights {
            ModelWeights::Svm { w, b } => (w.clone(), b.clone()),
            _ => unreachable!(),
        }
    }

    fn one_d_toy() -> FeatureSet {
        FeatureSet::new(array![[-1.0f32], [1.0]], vec![0, 1], 2).unwrap()
    }

    #[test]
    fn one_d_toy_matches_grid_search() {
        let fs = one_d_toy();
        let config = SvmConfig { tolerance: 1e-9, ..Default::default() };
        let model = train_svm(&fs, &config).unwrap();
        let (w, b) = svm_parts(&model);
        let x = fs.vectors.mapv(f64::from);
        let y = [-1.0, 1.0];
        let got = binary_objective(x.view(), &y, &[w[[0, 1]] as f64], b[1] as f64, 1.0);

        let mut best = f64::INFINITY;
        let steps = 2000;
        for i in 0..=steps {
            for j in 0..=steps {
                let wv = -2.0 + 4.0 * i as f64 / steps as f64;
                let bv = -2.0 + 4.0 * j as f64 / steps as f64;
                best = best.min(binary_objective(x.view(), &y, &[wv], bv, 1.0));
            }
        }
        assert!((got - best).abs() < 1e-4, "solver {got}, grid {best}");
        assert!(got <= best + 1e-9);
    }

    #[test]
    fn zero_iterations_gives_zero_model() {
        let fs = crate::classifiers::tests::blobs(5, 3, 1);
        let model = train_svm(&fs, &SvmConfig { max_iterations: 0, ..Default::default() }).unwrap();
        let (w, b) = svm_parts(&model);
        assert!(w.iter().chain(b.iter()).all(|&v| v == 0.0));
        assert!(model.scores(fs.vectors.view()).unwrap().iter().all(|&s| s == 0.0));
        assert!(model.predict(&fs).unwrap().iter().all(|&p| p == 0));
    }

    #[test]
    fn objective_is_monotone_and_converges() {
        let fs = crate::classifiers::tests::blobs(30, 8, 2);
        let config = SvmConfig { tolerance: 1e-6, ..Default::default() };
        let model = train_svm(&fs, &config).unwrap();
        let h = &model.metadata.history;
        assert!(h.len() > 2);
        assert!(h.windows(2).all(|w| w[1] <= w[0]), "{h:?}");
        assert_eq!(model.metadata.converged, Some(true));
        assert_eq!(error_percent(&model.predict(&fs).unwrap(), &fs.labels).unwrap(), 0.0);
    }

    #[test]
    fn converged_gradient_is_within_tolerance() {
        let fs = crate::classifiers::tests::blobs(30, 8, 5);
        let config = SvmConfig { tolerance: 1e-4, ..Default::default() };
        let model = train_svm(&fs, &config).unwrap();
        assert_eq!(model.metadata.converged, Some(true));
        let (w, b) = svm_parts(&model);
        let x = fs.vectors.mapv(f64::from);
        for c in 0..3 {
            let y: Vec<f64> = fs.labels.iter().map(|&l| if l as usize == c { 1.0 } else { -1.0 }).collect();
            let grad_at = |wc: &[f64], bc: f64| {
                let mut gw = wc.to_vec();
                let mut gb = 0.0;
                for (row, &yi) in x.rows().into_iter().zip(&y) {
                    let s: f64 = row.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>() + bc;
                    let m = 1.0 - yi * s;
                    if m > 0.0 {
                        gw.iter_mut().zip(row).for_each(|(g, &xv)| *g -= 2.0 * yi * m * xv);
                        gb -= 2.0 * yi * m;
                    }
                }
                (gw.iter().map(|v| v * v).sum::<f64>() + gb * gb).sqrt()
            };
            let wc: Vec<f64> = w.column(c).iter().map(|&v| v as f64).collect();
            let g = grad_at(&wc, b[c] as f64);
            let g0 = grad_at(&vec![0.0; wc.len()], 0.0);
            // Weights are rounded to f32 after the solve, hence the slack.
            assert!(g <= 1e-3 * g0, "class {c}: {g} vs {g0}");
        }
    }

    #[test]
    fn duplicated_data_with_half_c_has_same_optimum() {
        let fs = crate::classifiers::tests::blobs(15, 5, 7);
        let twice = fs.concat(&fs).unwrap();
        let config = SvmConfig { tolerance: 1e-7, ..Default::default() };
        let (w1, b1) = svm_parts(&train_svm(&fs, &config).unwrap());
        let (w2, b2) = svm_parts(&train_svm(&twice, &SvmConfig { c: 0.5, ..config }).unwrap());
        let diff = (&w1 - &w2).iter().chain((&b1 - &b2).iter()).fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(diff < 1e-4, "max weight difference {diff}");
    }

    #[test]
    fn bit_identical_reruns() {
        let fs = crate::classifiers::tests::blobs(20, 6, 3);
        let a = train_svm(&fs, &SvmConfig::default()).unwrap();
        let b = train_svm(&fs, &SvmConfig::default()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.metadata.history, b.metadata.history);
    }

    #[test]
    fn rejects_bad_input() {
        let mut fs = one_d_toy();
        assert!(matches!(train_svm(&fs, &SvmConfig { c: 0.0, ..Default::default() }), Err(Error::Parameter(_))));
        fs.vectors[[0, 0]] = f32::NAN;
        assert!(matches!(train_svm(&fs, &SvmConfig::default()), Err(Error::Parameter(_))));
    }
}
