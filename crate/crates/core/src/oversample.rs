//! Feature-space augmentation: SMOTE and a simplified DBSMOTE.
//!
//! Both generators work on the rows of one class at a time and draw each
//! synthetic sample from its own seeded stream, so output does not depend
//! on how the work is scheduled.
//!
//! "Simplified DBSMOTE" here means: pick a class member `x`, then place the
//! sample on the segment from the class centroid `c` towards `x`, at most
//! `eps` away from `c`. The DBSCAN clustering and shortest-path machinery of
//! the original algorithm is not implemented.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use num_traits::Float;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoteParams {
    /// Parents per synthetic sample.
    pub k: usize,
    pub seed: u64,
}

impl Default for SmoteParams {
    fn default() -> Self {
        Self { k: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbsmoteParams {
    /// Recorded for parity with SMOTE; the simplified generator draws a
    /// single member per sample.
    pub k: usize,
    /// Maximum distance from the class centroid, in feature units.
    pub eps: f64,
    pub seed: u64,
}

impl Default for DbsmoteParams {
    fn default() -> Self {
        Self {
            k: 2,
            eps: 4.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OversampleMethod {
    Smote(SmoteParams),
    Dbsmote(DbsmoteParams),
}

impl OversampleMethod {
    pub fn name(&self) -> &'static str {
        match self {
            OversampleMethod::Smote(_) => "smote",
            OversampleMethod::Dbsmote(_) => "dbsmote",
        }
    }

    fn with_seed(self, seed: u64) -> Self {
        match self {
            OversampleMethod::Smote(p) => OversampleMethod::Smote(SmoteParams { seed, ..p }),
            OversampleMethod::Dbsmote(p) => OversampleMethod::Dbsmote(DbsmoteParams { seed, ..p }),
        }
    }

    fn seed(&self) -> u64 {
        match self {
            OversampleMethod::Smote(p) => p.seed,
            OversampleMethod::Dbsmote(p) => p.seed,
        }
    }
}

fn empty_class() -> Error {
    Error::InsufficientData {
        class: 0,
        needed: 1,
        available: 0,
    }
}

fn to_f64<T: Float>(v: T) -> f64 {
    v.to_f64().expect("float converts to f64")
}

fn from_f64<T: Float>(v: f64) -> T {
    T::from(v).expect("f64 converts to float")
}

/// `k` parent rows out of `n`: distinct when `n >= k`, otherwise every row
/// once plus uniform repeats.
fn pick_parents(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n >= k {
        index::sample(rng, n, k).into_vec()
    } else {
        let mut p: Vec<usize> = (0..n).collect();
        p.extend((n..k).map(|_| rng.random_range(0..n)));
        p
    }
}

/// Symmetric Dirichlet(1) weights: uniform on the probability simplex.
fn simplex_weights(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Fills `out` (row-major, `dim` columns) in parallel, one seeded row at a
/// time. `make` writes the f64 sample into its scratch row.
fn fill_rows<T, A, F>(out: &mut [T], dim: usize, make: F) -> Vec<A>
where
    T: Float + Send + Sync,
    A: Send,
    F: Fn(usize, &mut [f64]) -> A + Sync,
{
    if dim == 0 {
        return Vec::new();
    }
    out.par_chunks_mut(dim)
        .enumerate()
        .map(|(j, row)| {
            let mut scratch = vec![0.0; dim];
            let extra = make(j, &mut scratch);
            row.iter_mut().zip(&scratch).for_each(|(d, &v)| *d = from_f64(v));
            extra
        })
        .collect()
}

fn smote_into<T>(class_vectors: ArrayView2<'_, T>, out: &mut [T], params: &SmoteParams) -> Result<Vec<Vec<usize>>>
where
    T: Float + Send + Sync,
{
    if params.k == 0 {
        return Err(Error::Parameter("SMOTE needs k >= 1".into()));
    }
    let n = class_vectors.nrows();
    if n == 0 {
        return Err(empty_class());
    }
    Ok(fill_rows(out, class_vectors.ncols(), |j, sample| {
        let mut rng = rng::stream(params.seed, &[rng::tag("smote"), j as u64]);
        let parents = pick_parents(&mut rng, n, params.k);
        let weights = simplex_weights(&mut rng, params.k);
        for (&p, &w) in parents.iter().zip(&weights) {
            for (o, &v) in sample.iter_mut().zip(class_vectors.row(p)) {
                *o += w * to_f64(v);
            }
        }
        parents
    }))
}

fn dbsmote_into<T>(class_vectors: ArrayView2<'_, T>, out: &mut [T], params: &DbsmoteParams) -> Result<()>
where
    T: Float + Send + Sync,
{
    if !(params.eps > 0.0 && params.eps.is_finite()) {
        return Err(Error::Parameter(format!("DBSMOTE eps must be > 0, got {}", params.eps)));
    }
    let n = class_vectors.nrows();
    if n == 0 {
        return Err(empty_class());
    }
    let c = centroid(class_vectors);
    fill_rows(out, class_vectors.ncols(), |j, sample| {
        let mut rng = rng::stream(params.seed, &[rng::tag("dbsmote"), j as u64]);
        let x = class_vectors.row(rng.random_range(0..n));
        let t: f64 = rng.random();
        let dist = x
            .iter()
            .zip(&c)
            .map(|(&v, m)| (to_f64(v) - m).powi(2))
            .sum::<f64>()
            .sqrt();
        let step = if dist == 0.0 { 0.0 } else { t * dist.min(params.eps) / dist };
        for ((o, &v), m) in sample.iter_mut().zip(x).zip(&c) {
            *o = m + step * (to_f64(v) - m);
        }
    });
    Ok(())
}

fn output<T: Float>(count: usize, dim: usize) -> Array2<T> {
    Array2::from_elem((count, dim), T::zero())
}

/// SMOTE samples together with the row indices of each sample's parents.
pub fn smote_generate_with_parents<T>(
    class_vectors: ArrayView2<'_, T>,
    count: usize,
    params: &SmoteParams,
) -> Result<(Array2<T>, Vec<Vec<usize>>)>
where
    T: Float + Send + Sync,
{
    let mut samples = output(count, class_vectors.ncols());
    let parents = smote_into(class_vectors, samples.as_slice_mut().expect("fresh array"), params)?;
    Ok((samples, parents))
}

/// `count` random convex combinations of `k` same-class parents.
pub fn smote_generate<T>(class_vectors: ArrayView2<'_, T>, count: usize, params: &SmoteParams) -> Result<Array2<T>>
where
    T: Float + Send + Sync,
{
    smote_generate_with_parents(class_vectors, count, params).map(|(s, _)| s)
}

/// Mean row, in f64.
pub fn centroid<T: Float>(class_vectors: ArrayView2<'_, T>) -> Array1<f64> {
    let mut c = Array1::zeros(class_vectors.ncols());
    for row in class_vectors.outer_iter() {
        c.iter_mut().zip(row).for_each(|(a, &v)| *a += to_f64(v));
    }
    c / class_vectors.nrows() as f64
}

/// `count` samples within `eps` of the class centroid.
pub fn dbsmote_generate<T>(class_vectors: ArrayView2<'_, T>, count: usize, params: &DbsmoteParams) -> Result<Array2<T>>
where
    T: Float + Send + Sync,
{
    let mut out = output(count, class_vectors.ncols());
    dbsmote_into(class_vectors, out.as_slice_mut().expect("fresh array"), params)?;
    Ok(out)
}

/// Tops every class up to `per_class_target` rows with synthetic samples.
///
/// Real rows come first in their original order, followed by each class's
/// synthetic rows in class order. Class `c` draws from a stream derived from
/// `(seed, c)`.
pub fn oversample_to_count(features: &FeatureSet, per_class_target: usize, method: &OversampleMethod) -> Result<FeatureSet> {
    let members = features.class_members();
    if let Some((class, m)) = members.iter().enumerate().find(|(_, m)| m.len() > per_class_target) {
        return Err(Error::Parameter(format!(
            "class {class} already has {} samples, above the target {per_class_target}",
            m.len()
        )));
    }
    if let Some(class) = members.iter().position(|m| m.is_empty()) {
        if per_class_target > 0 {
            return Err(Error::InsufficientData {
                class,
                needed: 1,
                available: 0,
            });
        }
    }
    let real = features.len();
    let total = per_class_target * members.len();
    if total == real {
        return Ok(features.clone());
    }
    let dim = features.dim();
    let mut vectors = Array2::<f32>::zeros((total, dim));
    vectors.slice_mut(s![..real, ..]).assign(&features.vectors);
    let mut labels = features.labels.clone();
    let mut offset = real;
    for (class, m) in members.iter().enumerate() {
        let need = per_class_target - m.len();
        if need == 0 {
            continue;
        }
        let rows = features.vectors.select(Axis(0), m);
        let seed = rng::derive_seed(method.seed(), &[rng::tag("oversample"), class as u64]);
        let mut block = vectors.slice_mut(s![offset..offset + need, ..]);
        let out = block.as_slice_mut().expect("row block of a standard-layout array");
        match method.with_seed(seed) {
            OversampleMethod::Smote(p) => {
                smote_into(rows.view(), out, &p)?;
            }
            OversampleMethod::Dbsmote(p) => dbsmote_into(rows.view(), out, &p)?,
        }
        labels.extend(std::iter::repeat_n(class as u8, need));
        offset += need;
    }
    let mut set = FeatureSet::new(vectors, labels, features.class_count)?;
    set.standardized = features.standardized;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng::stream(seed, &[]);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-5.0..5.0))
    }

    /// Solves `s = sum_i w_i p_i` with `sum_i w_i = 1` by Gaussian elimination
    /// on the (d + 1) x k system, using the first k independent equations.
    fn barycentric(parents: &[Vec<f64>], s: &[f64]) -> Vec<f64> {
        let k = parents.len();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        rows.push(std::iter::repeat_n(1.0, k).chain([1.0]).collect());
        for (d, &sd) in s.iter().enumerate() {
            rows.push(parents.iter().map(|p| p[d]).chain([sd]).collect());
        }
        // Least squares via normal equations on the augmented system.
        let mut a = vec![vec![0.0; k + 1]; k];
        for r in &rows {
            for i in 0..k {
                for j in 0..=k {
                    a[i][j] += r[i] * r[j];
                }
            }
        }
        for col in 0..k {
            let piv = (col..k).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..k {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=k {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..k).map(|i| a[i][k] / a[i][i]).collect()
    }

    #[test]
    fn midpoint_example() {
        let parents = array![[0.0, 0.0], [2.0, 2.0]];
        let w = barycentric(&[parents.row(0).to_vec(), parents.row(1).to_vec()], &[1.0, 1.0]);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        // Every generated point lies on the diagonal segment.
        let out = smote_generate(parents.view(), 50, &SmoteParams { k: 2, seed: 1 }).unwrap();
        for r in out.outer_iter() {
            assert!((r[0] - r[1]).abs() < 1e-12 && (0.0..=2.0).contains(&r[0]));
        }
    }

    #[test]
    fn k1_duplicates_parents() {
        let m = random_matrix(6, 4, 3);
        let out = smote_generate(m.view(), 30, &SmoteParams { k: 1, seed: 9 }).unwrap();
        for r in out.outer_iter() {
            assert!(m.outer_iter().any(|p| p == r));
        }
    }

    #[test]
    fn smote_outputs_reconstruct_to_simplex_weights() {
        for (k, d, seed) in [(2, 2, 1), (2, 5, 2), (3, 4, 3), (4, 6, 4)] {
            let m = random_matrix(10, d, seed);
            let (out, parents) = smote_generate_with_parents(m.view(), 200, &SmoteParams { k, seed }).unwrap();
            for (s, p) in out.outer_iter().zip(&parents) {
                let pv: Vec<Vec<f64>> = p.iter().map(|&i| m.row(i).to_vec()).collect();
                let w = barycentric(&pv, &s.to_vec());
                assert!(w.iter().all(|&x| x >= -1e-9), "{w:?}");
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_class_is_insufficient() {
        let m = Array2::<f64>::zeros((0, 3));
        assert!(matches!(smote_generate(m.view(), 1, &SmoteParams::default()), Err(Error::InsufficientData { .. })));
        assert!(matches!(dbsmote_generate(m.view(), 1, &DbsmoteParams::default()), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn dbsmote_clips_to_eps() {
        let m = array![[10.0, 0.0], [-10.0, 0.0]];
        let out = dbsmote_generate(m.view(), 500, &DbsmoteParams { eps: 4.0, ..Default::default() }).unwrap();
        assert!(out.outer_iter().all(|r| r[0].hypot(r[1]) <= 4.0 + 1e-12 && r[1] == 0.0));
        assert!(out.column(0).iter().any(|&v| v > 2.0) && out.column(0).iter().any(|&v| v < -2.0));

        let p = array![[1.5, -2.0, 3.0], [1.5, -2.0, 3.0], [1.5, -2.0, 3.0]];
        let out = dbsmote_generate(p.view(), 20, &DbsmoteParams::default()).unwrap();
        assert!(out.outer_iter().all(|r| r == p.row(0)));
    }

    #[test]
    fn oversample_tops_up_each_class() {
        let v = random_matrix(12, 3, 5).mapv(|x| x as f32);
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2];
        let fs = FeatureSet::new(v, labels, 3).unwrap();
        for method in [OversampleMethod::Smote(SmoteParams::default()), OversampleMethod::Dbsmote(DbsmoteParams::default())] {
            let out = oversample_to_count(&fs, 10, &method).unwrap();
            assert_eq!(out.class_histogram(), vec![10, 10, 10]);
            assert_eq!(out.vectors.slice(ndarray::s![..12, ..]), fs.vectors);
            assert_eq!(out, oversample_to_count(&fs, 10, &method).unwrap());
            assert_eq!(oversample_to_count(&fs, 4, &method).unwrap(), fs);
            assert!(matches!(oversample_to_count(&fs, 3, &method), Err(Error::Parameter(_))));
        }
    }

    proptest! {
        #[test]
        fn smote_stays_within_parent_bounds(seed in any::<u64>(), k in 1usize..5) {
            let m = random_matrix(7, 5, seed);
            let (out, parents) = smote_generate_with_parents(m.view(), 40, &SmoteParams { k, seed }).unwrap();
            for (s, p) in out.outer_iter().zip(&parents) {
                prop_assert_eq!(p.len(), k);
                for d in 0..5 {
                    let lo = p.iter().map(|&i| m[[i, d]]).fold(f64::INFINITY, f64::min);
                    let hi = p.iter().map(|&i| m[[i, d]]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(s[d] >= lo - 1e-12 && s[d] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn dbsmote_stays_within_eps(seed in any::<u64>(), eps in 0.01f64..20.0) {
            let m = random_matrix(9, 6, seed);
            let c = centroid(m.view());
            let out = dbsmote_generate(m.view(), 60, &DbsmoteParams { eps, seed, k: 2 }).unwrap();
            for r in out.outer_iter() {
                let d = r.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(d <= eps + 1e-9);
            }
        }
    }
}
