//! Data-space augmentation: elastic deformation by a smoothed random
//! displacement field, plus optional affine jitter.
//!
//! All warps are backward warps. The output pixel at `R` is read from the
//! input at `R + d(R)` with bilinear interpolation, where `d` is the
//! displacement. Reads outside the image return the background value 0.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::dataset::LabeledImageSet;
use crate::error::{Error, Result};
use crate::rng;

/// Value returned for samples that fall outside the source image.
pub const BACKGROUND: f64 = 0.0;

/// A per-pixel displacement field, normalized so that its RMS magnitude
/// `sqrt(mean(ux^2 + uy^2))` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub ux: Array2<f64>,
    pub uy: Array2<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl DisplacementField {
    pub fn dim(&self) -> (usize, usize) {
        self.ux.dim()
    }

    /// A field with the same displacement at every pixel. Not normalized.
    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self {
            ux: Array2::from_elem((height, width), dx),
            uy: Array2::from_elem((height, width), dy),
            sigma: f64::INFINITY,
            seed: 0,
        }
    }

    pub fn rms_magnitude(&self) -> f64 {
        let sum: f64 = self
            .ux
            .iter()
            .zip(self.uy.iter())
            .map(|(x, y)| x * x + y * y)
            .sum();
        (sum / self.ux.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticParams {
    /// RMS displacement in pixels.
    pub alpha: f64,
    /// Standard deviation of the smoothing Gaussian, in pixels.
    pub sigma: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self {
            alpha: 1.2,
            sigma: 20.0,
        }
    }
}

impl ElasticParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        check_sigma(self.sigma)
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")))
    }
}

/// Affine map about the image center: scale, then shear, then rotate, then
/// translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    /// Radians.
    pub rotation: f64,
    pub shear_x: f64,
    pub shear_y: f64,
    /// Pixels.
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            shear_x: 0.0,
            shear_y: 0.0,
            translate_x: 0.0,
            translate_y: 0.0,
            scale: 1.0,
        }
    }
}

impl AffineParams {
    /// The forward 2x2 linear part, acting on `(x, y)` column vectors.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let sh = [[1.0, self.shear_x], [self.shear_y, 1.0]];
        let rot = [[c, -s], [s, c]];
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = self.scale * (rot[i][0] * sh[0][j] + rot[i][1] * sh[1][j]);
            }
        }
        m
    }

    fn inverse_linear(&self) -> Result<[[f64; 2]; 2]> {
        if !(self.scale > 0.0) {
            return Err(Error::Parameter(format!("scale must be > 0, got {}", self.scale)));
        }
        let [[a, b], [c, d]] = self.linear();
        let det = a * d - b * c;
        if !det.is_normal() {
            return Err(Error::Parameter(format!(
                "affine map is singular (shear_x * shear_y = {})",
                self.shear_x * self.shear_y
            )));
        }
        Ok([[d / det, -b / det], [-c / det, a / det]])
    }
}

/// Closed interval to draw one affine parameter from.
pub type Interval = (f64, f64);

/// Uniform sampling ranges for affine jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    pub rotation: Interval,
    pub shear_x: Interval,
    pub shear_y: Interval,
    pub translate_x: Interval,
    pub translate_y: Interval,
    pub scale: Interval,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            rotation: (-0.26, 0.26),
            shear_x: (-0.15, 0.15),
            shear_y: (-0.15, 0.15),
            translate_x: (-2.0, 2.0),
            translate_y: (-2.0, 2.0),
            scale: (0.9, 1.1),
        }
    }
}

impl AffineRanges {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("rotation", self.rotation),
            ("shear_x", self.shear_x),
            ("shear_y", self.shear_y),
            ("translate_x", self.translate_x),
            ("translate_y", self.translate_y),
            ("scale", self.scale),
        ];
        for (name, (lo, hi)) in all {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::Parameter(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::Parameter("scale range must be positive".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> AffineParams {
        let mut draw = |(lo, hi): Interval| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        AffineParams {
            rotation: draw(self.rotation),
            shear_x: draw(self.shear_x),
            shear_y: draw(self.shear_y),
            translate_x: draw(self.translate_x),
            translate_y: draw(self.translate_y),
            scale: draw(self.scale),
        }
    }
}

/// The raw i.i.d. uniform `[-1, 1]` components a field is built from.
pub fn displacement_noise(height: usize, width: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut rng = rng::stream(seed, &[rng::tag("displacement")]);
    let mut grid = || Array2::from_shape_simple_fn((height, width), || rng.random_range(-1.0..=1.0));
    let ux = grid();
    let uy = grid();
    (ux, uy)
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn convolve_axis(grid: &Array2<f64>, taps: &[f64], axis: Axis) -> Array2<f64> {
    let radius = (taps.len() / 2) as i64;
    let len = grid.len_of(axis) as i64;
    let mut out = Array2::zeros(grid.raw_dim());
    for (src, mut dst) in grid.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        for i in 0..len {
            let lo = (i - radius).max(0);
            let hi = (i + radius).min(len - 1);
            dst[i as usize] = (lo..=hi)
                .map(|j| taps[(j - i + radius) as usize] * src[j as usize])
                .sum();
        }
    }
    out
}

/// Separable Gaussian blur, kernel truncated at `ceil(3 sigma)`, zero padding.
pub fn smooth_gaussian(grid: &Array2<f64>, sigma: f64) -> Result<Array2<f64>> {
    check_sigma(sigma)?;
    let taps = gaussian_taps(sigma);
    Ok(convolve_axis(&convolve_axis(grid, &taps, Axis(1)), &taps, Axis(0)))
}

/// Rescales both components jointly so the RMS magnitude is exactly 1.
pub fn normalize_rms(ux: &mut Array2<f64>, uy: &mut Array2<f64>) -> Result<()> {
    let sum: f64 = ux.iter().chain(uy.iter()).map(|v| v * v).sum();
    let rms = (sum / ux.len() as f64).sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return Err(Error::Parameter(format!("cannot normalize a field with RMS {rms}")));
    }
    ux.mapv_inplace(|v| v / rms);
    uy.mapv_inplace(|v| v / rms);
    Ok(())
}

/// Uniform noise, Gaussian-smoothed with std-dev `sigma`, then normalized to
/// unit RMS magnitude. Deterministic in `(height, width, sigma, seed)`.
pub fn generate_displacement_field(
    height: usize,
    width: usize,
    sigma: f64,
    seed: u64,
) -> Result<DisplacementField> {
    check_sigma(sigma)?;
    if height == 0 || width == 0 {
        return Err(Error::Parameter(format!("field must be at least 1x1, got {height}x{width}")));
    }
    let (ux, uy) = displacement_noise(height, width, seed);
    let mut ux = smooth_gaussian(&ux, sigma)?;
    let mut uy = smooth_gaussian(&uy, sigma)?;
    normalize_rms(&mut ux, &mut uy)?;
    Ok(DisplacementField { ux, uy, sigma, seed })
}

/// Bilinear read at real coordinates `(x, y)` with zero background.
pub fn sample_bilinear(image: ArrayView2<'_, f64>, x: f64, y: f64) -> f64 {
    let (h, w) = image.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            BACKGROUND
        } else {
            image[[yy as usize, xx as usize]]
        }
    };
    let top = if fx == 0.0 {
        at(y0, x0)
    } else {
        at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx
    };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        at(y0 + 1.0, x0)
    } else {
        at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx
    };
    top * (1.0 - fy) + bottom * fy
}

/// Output pixel `R` takes the input value at `R + alpha * u(R)`.
pub fn elastic_warp(image: ArrayView2<'_, f64>, field: &DisplacementField, alpha: f64) -> Result<Array2<f64>> {
    if image.dim() != field.dim() {
        return Err(Error::Dimension(format!(
            "image is {:?} but displacement field is {:?}",
            image.dim(),
            field.dim()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(Array2::from_shape_fn(image.dim(), |(y, x)| {
        let sx = x as f64 + alpha * field.ux[[y, x]];
        let sy = y as f64 + alpha * field.uy[[y, x]];
        sample_bilinear(image, sx, sy).clamp(0.0, 1.0)
    }))
}

/// Backward warp through the inverse of the affine map described by `params`.
pub fn affine_warp(image: ArrayView2<'_, f64>, params: &AffineParams) -> Result<Array2<f64>> {
    let inv = params.inverse_linear()?;
    let (h, w) = image.dim();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = x as f64 - cx - params.translate_x;
        let dy = y as f64 - cy - params.translate_y;
        let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
        let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
        sample_bilinear(image, sx, sy).clamp(0.0, 1.0)
    }))
}

/// Generates `per_class_synthetic` warped images for every class.
///
/// Class `c`'s j-th synthetic sample warps the class's real sample number
/// `j mod n_c` (in source order) with a fresh field seeded from
/// `(seed, c, j)`. Affine jitter, when `affine` is given, is applied after the
/// elastic warp. Only the synthetic samples are returned, grouped by class.
pub fn warp_augment_dataset(
    set: &LabeledImageSet,
    per_class_synthetic: usize,
    elastic: &ElasticParams,
    affine: Option<&AffineRanges>,
    seed: u64,
) -> Result<LabeledImageSet> {
    elastic.validate()?;
    if let Some(r) = affine {
        r.validate()?;
    }
    let (h, w) = (set.height(), set.width());
    if per_class_synthetic == 0 {
        return Ok(LabeledImageSet::empty(h, w, set.class_count()));
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); set.class_count()];
    for (i, &l) in set.labels().iter().enumerate() {
        members[usize::from(l)].push(i);
    }
    if let Some(class) = members.iter().position(Vec::is_empty) {
        return Err(Error::InsufficientData {
            class,
            needed: 1,
            available: 0,
        });
    }

    let jobs: Vec<(usize, usize)> = (0..set.class_count())
        .flat_map(|c| (0..per_class_synthetic).map(move |j| (c, j)))
        .collect();
    let warped: Vec<Array2<f64>> = jobs
        .par_iter()
        .map(|&(c, j)| {
            let source = set.image(members[c][j % members[c].len()]);
            let mut rng = rng::stream(seed, &[rng::tag("warp_augment"), c as u64, j as u64]);
            let field = generate_displacement_field(h, w, elastic.sigma, rng.next_u64())?;
            let out = elastic_warp(source, &field, elastic.alpha)?;
            match affine {
                Some(ranges) => affine_warp(out.view(), &ranges.sample(&mut rng)),
                None => Ok(out),
            }
        })
        .collect::<Result<_>>()?;

    let mut images = Array3::zeros((jobs.len(), h, w));
    for (mut slot, img) in images.outer_iter_mut().zip(&warped) {
        slot.assign(img);
    }
    let labels = jobs.iter().map(|&(c, _)| c as u8).collect();
    Ok(LabeledImageSet::from_parts_unchecked(images, labels, set.class_count()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::dataset::tests::toy_set;
    use ndarray::array;
    use proptest::prelude::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng::stream(seed, &[]);
        Array2::from_shape_simple_fn((h, w), || rng.random::<f64>())
    }

    /// Direct 2-D convolution with the full (non-separable) truncated kernel.
    fn dense_gaussian(grid: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let r = (3.0 * sigma).ceil() as i64;
        let g = |k: i64| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-r..=r).map(g).sum::<f64>().powi(2);
        let (h, w) = grid.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y as i64 + dy, x as i64 + dx);
                    if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                        acc += g(dy) * g(dx) * grid[[sy as usize, sx as usize]];
                    }
                }
            }
            acc / norm
        })
    }

    #[test]
    fn field_matches_dense_convolution_oracle() {
        let (nx, ny) = displacement_noise(28, 28, 5);
        let mut ox = dense_gaussian(&nx, 20.0);
        let mut oy = dense_gaussian(&ny, 20.0);
        normalize_rms(&mut ox, &mut oy).unwrap();

        let field = generate_displacement_field(28, 28, 20.0, 5).unwrap();
        for (a, b) in field.ux.iter().zip(&ox).chain(field.uy.iter().zip(&oy)) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let oracle_dev = max_deviation(&ox).max(max_deviation(&oy));
        assert!((max_deviation(&field.ux).max(max_deviation(&field.uy)) - oracle_dev).abs() < 1e-9);
    }

    fn max_deviation(g: &Array2<f64>) -> f64 {
        let m = g.mean().unwrap();
        g.iter().map(|v| (v - m).abs()).fold(0.0, f64::max)
    }

    fn max_step(g: &Array2<f64>) -> f64 {
        let dy = g.windows((2, 1)).into_iter().map(|w| (w[[1, 0]] - w[[0, 0]]).abs());
        let dx = g.windows((1, 2)).into_iter().map(|w| (w[[0, 1]] - w[[0, 0]]).abs());
        dy.chain(dx).fold(0.0, f64::max)
    }

    #[test]
    fn sigma_20_fields_vary_slowly() {
        // Unit-RMS fields on 28x28 still swing by O(1) across the image
        // (the zero-padded blur is close to quadratic), but neighbouring
        // pixels differ by little.
        for seed in 0..50 {
            let f = generate_displacement_field(28, 28, 20.0, seed).unwrap();
            assert!(max_step(&f.ux).max(max_step(&f.uy)) < 0.2);
        }
        let rough = generate_displacement_field(28, 28, 0.5, 0).unwrap();
        assert!(max_step(&rough.ux) > 0.5);
    }

    #[test]
    fn field_is_normalized_and_deterministic() {
        for (h, w, sigma, seed) in [(28, 28, 20.0, 1), (5, 9, 0.5, 2), (1, 1, 3.0, 3), (28, 28, 4.0, 4)] {
            let f = generate_displacement_field(h, w, sigma, seed).unwrap();
            assert!((f.rms_magnitude() - 1.0).abs() < 1e-6);
            assert_eq!(f, generate_displacement_field(h, w, sigma, seed).unwrap());
        }
        assert_ne!(
            generate_displacement_field(8, 8, 2.0, 1).unwrap().ux,
            generate_displacement_field(8, 8, 2.0, 2).unwrap().ux
        );
    }

    #[test]
    fn bad_sigma_is_rejected() {
        assert!(matches!(generate_displacement_field(4, 4, 0.0, 1), Err(Error::Parameter(_))));
        assert!(matches!(generate_displacement_field(4, 4, -2.0, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn unit_shift_moves_content_left() {
        let img = random_image(4, 5, 9);
        let out = elastic_warp(img.view(), &DisplacementField::constant(4, 5, 1.0, 0.0), 1.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out[[y, x]], img[[y, x + 1]]);
            }
            assert_eq!(out[[y, 4]], 0.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let img = random_image(4, 5, 1);
        let field = DisplacementField::constant(5, 4, 0.0, 0.0);
        assert!(matches!(elastic_warp(img.view(), &field, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn affine_identity_translation_and_rotation() {
        let img = random_image(6, 7, 3);
        assert_eq!(affine_warp(img.view(), &AffineParams::default()).unwrap(), img);

        let shifted = affine_warp(
            img.view(),
            &AffineParams { translate_x: 1.0, ..Default::default() },
        )
        .unwrap();
        for y in 0..6 {
            assert_eq!(shifted[[y, 0]], 0.0);
            for x in 1..7 {
                assert!((shifted[[y, x]] - img[[y, x - 1]]).abs() < 1e-12);
            }
        }

        let grid = array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]];
        let rotated = affine_warp(
            grid.view(),
            &AffineParams { rotation: std::f64::consts::FRAC_PI_2, ..Default::default() },
        )
        .unwrap();
        let expected = array![[0.7, 0.4, 0.1], [0.8, 0.5, 0.2], [0.9, 0.6, 0.3]];
        for (a, b) in rotated.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{rotated:?}");
        }
    }

    #[test]
    fn nonpositive_scale_is_rejected() {
        let img = random_image(3, 3, 1);
        for scale in [0.0, -1.0] {
            let p = AffineParams { scale, ..Default::default() };
            assert!(matches!(affine_warp(img.view(), &p), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn augment_cycles_sources_with_distinct_fields() {
        let set = toy_set(2, 3);
        let params = ElasticParams { alpha: 1.0, sigma: 1.0 };
        let out = warp_augment_dataset(&set, 7, &params, None, 42).unwrap();
        assert_eq!(out.len(), 14);
        assert_eq!(out.class_histogram(), vec![7, 7]);
        assert_eq!(out, warp_augment_dataset(&set, 7, &params, None, 42).unwrap());
        // samples 0 and 3 of class 0 warp the same source with different fields
        assert_ne!(out.image(0), out.image(3));

        let zero = warp_augment_dataset(&set, 0, &params, None, 42).unwrap();
        assert!(zero.is_empty());

        let jittered = warp_augment_dataset(&set, 2, &params, Some(&AffineRanges::default()), 42).unwrap();
        assert_eq!(jittered.len(), 4);
    }

    #[test]
    fn augment_needs_every_class() {
        let set = toy_set(3, 2).select(&[0, 1, 3, 4]);
        assert_eq!(set.class_histogram(), vec![2, 2, 0]);
        let err = warp_augment_dataset(&set, 1, &ElasticParams::default(), None, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { class: 2, .. }));
    }

    proptest! {
        #[test]
        fn zero_alpha_is_identity(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, sigma in 0.3f64..25.0) {
            let img = random_image(h, w, seed);
            let field = generate_displacement_field(h, w, sigma, seed ^ 1).unwrap();
            prop_assert_eq!(elastic_warp(img.view(), &field, 0.0).unwrap(), img);
        }

        #[test]
        fn warp_output_stays_in_unit_range(seed in any::<u64>(), alpha in 0.0f64..10.0, sigma in 0.5f64..25.0) {
            let img = random_image(9, 9, seed);
            let field = generate_displacement_field(9, 9, sigma, seed).unwrap();
            let out = elastic_warp(img.view(), &field, alpha).unwrap();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn translation_round_trip_on_interior(seed in any::<u64>(), tx in -3i32..=3, ty in -3i32..=3) {
            // Exact recovery needs integer shifts; fractional ones are blurred
            // by the two bilinear resamplings.
            let (h, w) = (14, 12);
            let img = random_image(h, w, seed);
            let shift = |x: f64, y: f64| AffineParams { translate_x: x, translate_y: y, ..Default::default() };
            let there = affine_warp(img.view(), &shift(tx.into(), ty.into())).unwrap();
            let back = affine_warp(there.view(), &shift((-tx).into(), (-ty).into())).unwrap();
            let (mx, my) = (tx.unsigned_abs() as usize, ty.unsigned_abs() as usize);
            for y in my..h - my {
                for x in mx..w - mx {
                    prop_assert!((back[[y, x]] - img[[y, x]]).abs() < 1e-12);
                }
            }
        }
    }
}
