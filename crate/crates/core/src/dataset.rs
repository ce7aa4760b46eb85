//! Labeled grayscale image sets: IDX ingestion, balanced subsets and the
//! on-disk cache used for off-line synthetic data.

use std::path::Path;

use ndarray::{Array3, ArrayView2, Axis};
use rand::seq::index;

use crate::envelope::{read_file, EnvelopeReader, EnvelopeWriter, Magic};
use crate::error::{Error, Result};
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const CACHE_MAGIC: &Magic = b"WBIMGSET";
const CACHE_VERSION: u32 = 1;

/// Grayscale images with pixel values in `[0, 1]` and one class label each.
///
/// Labels are stored as bytes, so at most 256 classes are supported.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Array3<f64>,
    labels: Vec<u8>,
    class_count: usize,
}

impl LabeledImageSet {
    pub fn new(images: Array3<f64>, labels: Vec<u8>, class_count: usize) -> Result<Self> {
        if images.len_of(Axis(0)) != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.len_of(Axis(0)),
                labels.len()
            )));
        }
        if class_count == 0 || class_count > 256 {
            return Err(Error::Parameter(format!(
                "class_count must be in 1..=256, got {class_count}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= class_count) {
            return Err(Error::Consistency(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    /// An empty set with the given geometry.
    pub fn empty(height: usize, width: usize, class_count: usize) -> Self {
        Self {
            images: Array3::zeros((0, height, width)),
            labels: Vec::new(),
            class_count,
        }
    }

    pub(crate) fn from_parts_unchecked(images: Array3<f64>, labels: Vec<u8>, class_count: usize) -> Self {
        debug_assert_eq!(images.len_of(Axis(0)), labels.len());
        Self {
            images,
            labels,
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.images.len_of(Axis(2))
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &Array3<f64> {
        &self.images
    }

    pub fn image(&self, i: usize) -> ArrayView2<'_, f64> {
        self.images.index_axis(Axis(0), i)
    }

    /// Number of samples per class, indexed by class id.
    pub fn class_histogram(&self) -> Vec<usize> {
        class_histogram(&self.labels, self.class_count)
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.height(), self.width()) != (other.height(), other.width()) {
            return Err(Error::Dimension(format!(
                "cannot concatenate {}x{} with {}x{} images",
                self.height(),
                self.width(),
                other.height(),
                other.width()
            )));
        }
        let images = ndarray::concatenate(Axis(0), &[self.images.view(), other.images.view()])
            .expect("shapes checked");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            images,
            labels,
            class_count: self.class_count.max(other.class_count),
        })
    }

    /// Rounds every pixel to the nearest multiple of 1/255, the precision the
    /// cache stores.
    pub fn quantized(&self) -> Self {
        Self {
            images: self.images.mapv(|v| f64::from(quantize(v)) / 255.0),
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub(crate) fn class_histogram(labels: &[u8], class_count: usize) -> Vec<usize> {
    let mut hist = vec![0; class_count];
    for &l in labels {
        hist[usize::from(l)] += 1;
    }
    hist
}

fn idx_header(bytes: &[u8], magic: u32, dims: usize, what: &str) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::Truncation(format!("{what}: missing IDX magic")));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: IDX magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    if bytes.len() < header_len {
        return Err(Error::Truncation(format!("{what}: IDX header cut short")));
    }
    Ok(bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

/// Parses an IDX image file and its IDX label file from memory.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledImageSet> {
    let dims = idx_header(image_bytes, IDX_IMAGES_MAGIC, 3, "image file")?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let label_count = idx_header(label_bytes, IDX_LABELS_MAGIC, 1, "label file")?[0];
    if count != label_count {
        return Err(Error::Consistency(format!(
            "image file holds {count} images but label file holds {label_count} labels"
        )));
    }

    let pixels = count * rows * cols;
    let body = &image_bytes[16..];
    if body.len() < pixels {
        return Err(Error::Truncation(format!(
            "image file: expected {pixels} pixel bytes, found {}",
            body.len()
        )));
    }
    let labels = &label_bytes[8..];
    if labels.len() < count {
        return Err(Error::Truncation(format!(
            "label file: expected {count} labels, found {}",
            labels.len()
        )));
    }
    let labels = labels[..count].to_vec();
    let class_count = labels.iter().map(|&l| usize::from(l) + 1).max().unwrap_or(1);

    let images = Array3::from_shape_vec(
        (count, rows, cols),
        body[..pixels].iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
    .expect("length matches header");
    Ok(LabeledImageSet::from_parts_unchecked(images, labels, class_count))
}

/// Loads an IDX image file (magic `0x00000803`) and label file (`0x00000801`).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// How many samples per class to draw, and the seed to draw them with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassBalanceSpec {
    pub per_class_count: usize,
    pub seed: u64,
}

/// Indices of a class-balanced sample of `labels`, sorted by class then by
/// source index.
///
/// Each class draws uniformly without replacement from its own ChaCha8 stream
/// keyed by `(seed, class)`.
pub fn balanced_subset_indices(
    labels: &[u8],
    class_count: usize,
    spec: ClassBalanceSpec,
) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[usize::from(l)].push(i);
    }
    let mut out = Vec::with_capacity(spec.per_class_count * class_count);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < spec.per_class_count {
            return Err(Error::InsufficientData {
                class,
                needed: spec.per_class_count,
                available: members.len(),
            });
        }
        let mut rng = rng::stream(spec.seed, &[rng::tag("balanced_subset"), class as u64]);
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), spec.per_class_count)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

/// Exactly `spec.per_class_count` samples of every class.
pub fn balanced_subset(set: &LabeledImageSet, spec: ClassBalanceSpec) -> Result<LabeledImageSet> {
    let indices = balanced_subset_indices(set.labels(), set.class_count(), spec)?;
    Ok(set.select(&indices))
}

/// Serializes `set` into the cache format. Pixels are stored as bytes
/// (`round(255 v)`), so only quantized sets roundtrip bit-exactly.
pub fn encode_cache(set: &LabeledImageSet) -> Result<Vec<u8>> {
    Ok(cache_writer(set)?.finish())
}

fn cache_writer(set: &LabeledImageSet) -> Result<EnvelopeWriter> {
    let mut w = EnvelopeWriter::new(CACHE_MAGIC, CACHE_VERSION);
    w.reserve(set.labels.len() + set.images.len() + 4);
    w.dim(set.len(), "count")?
        .dim(set.height(), "height")?
        .dim(set.width(), "width")?
        .dim(set.class_count(), "class_count")?;
    w.bytes(&set.labels);
    let pixels: Vec<u8> = set.images.iter().map(|&v| quantize(v)).collect();
    w.bytes(&pixels);
    Ok(w)
}

pub fn decode_cache(bytes: &[u8]) -> Result<LabeledImageSet> {
    let mut r = EnvelopeReader::open(bytes, CACHE_MAGIC, CACHE_VERSION, "image cache")?;
    let count = r.dim()?;
    let height = r.dim()?;
    let width = r.dim()?;
    let class_count = r.dim()?;
    let labels = r.take(count)?.to_vec();
    let pixels = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Error::Format("image cache: declared size overflows".into()))?;
    let data = r.take(pixels)?.iter().map(|&b| f64::from(b) / 255.0).collect();
    r.finish()?;
    let images = Array3::from_shape_vec((count, height, width), data).expect("length checked");
    LabeledImageSet::new(images, labels, class_count)
        .map_err(|e| Error::Format(format!("image cache: {e}")))
}

pub fn write_cache(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<()> {
    cache_writer(set)?.write_to(path.as_ref())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    decode_cache(&read_file(path.as_ref())?)
}

/// Writes `set` to `path` and reads it back.
pub fn cache_roundtrip(set: &LabeledImageSet, path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    write_cache(set, path.as_ref())?;
    read_cache(path)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    pub(crate) fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    /// `per_class` samples of each of `classes` classes, 3x2 images whose
    /// pixel bytes encode the sample index.
    pub(crate) fn toy_set(classes: usize, per_class: usize) -> LabeledImageSet {
        let n = classes * per_class;
        let labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
        let pixels: Vec<u8> = (0..n * 6).map(|i| (i * 7 % 256) as u8).collect();
        parse_idx(&idx_images(n as u32, 3, 2, &pixels), &idx_labels(&labels)).unwrap()
    }

    #[test]
    fn parses_minimal_idx_pair() {
        let set = parse_idx(&idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]), &idx_labels(&[3, 1])).unwrap();
        assert_eq!((set.len(), set.height(), set.width(), set.class_count()), (2, 2, 2, 4));
        assert_eq!(set.image(0)[[0, 1]], 1.0);
        assert_eq!(set.image(0)[[1, 0]], 0.2);
        assert_eq!(set.labels(), &[3, 1]);
    }

    #[test]
    fn labels_in_image_position_is_format_error() {
        let labels = idx_labels(&[1, 2]);
        assert!(matches!(parse_idx(&labels, &labels), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let err = parse_idx(&idx_images(2, 1, 1, &[0, 0]), &idx_labels(&[1, 2, 3])).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn truncated_pixels_are_reported() {
        let err = parse_idx(&idx_images(2, 2, 2, &[0; 7]), &idx_labels(&[0, 1])).unwrap_err();
        assert!(matches!(err, Error::Truncation(_)));
        let err = parse_idx(&idx_images(2, 2, 2, &[0; 8]), &idx_labels(&[0, 1])[..9]).unwrap_err();
        assert!(matches!(err, Error::Truncation(_)));
        let err = parse_idx(&idx_images(2, 2, 2, &[0; 8])[..10], &idx_labels(&[0, 1])).unwrap_err();
        assert!(matches!(err, Error::Truncation(_)));
    }

    #[test]
    fn balanced_subset_is_uniform_sorted_and_seeded() {
        let set = toy_set(3, 20);
        let spec = ClassBalanceSpec { per_class_count: 7, seed: 11 };
        let idx = balanced_subset_indices(set.labels(), 3, spec).unwrap();
        assert_eq!(idx.len(), 21);
        assert_eq!(set.select(&idx).class_histogram(), vec![7, 7, 7]);
        for w in idx.windows(2) {
            let (a, b) = (set.labels()[w[0]], set.labels()[w[1]]);
            assert!(a < b || (a == b && w[0] < w[1]));
        }
        assert_eq!(idx, balanced_subset_indices(set.labels(), 3, spec).unwrap());
        let other = balanced_subset_indices(set.labels(), 3, ClassBalanceSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(idx, other);
    }

    #[test]
    fn balanced_subset_names_short_class() {
        let mut labels = vec![0u8; 10];
        labels.extend([1u8; 3]);
        let err = balanced_subset_indices(&labels, 2, ClassBalanceSpec { per_class_count: 5, seed: 0 }).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { class: 1, needed: 5, available: 3 }));
    }

    #[test]
    fn empty_set_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let set = LabeledImageSet::empty(28, 28, 10);
        let back = cache_roundtrip(&set, dir.path().join("empty.wbc")).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back, set);
    }

    #[test]
    fn corrupted_cache_header_is_format_error() {
        let mut bytes = encode_cache(&toy_set(2, 3)).unwrap();
        // class_count field
        bytes[12 + 12 + 3] ^= 0x01;
        assert!(matches!(decode_cache(&bytes), Err(Error::Format(_))));

        let mut bytes = encode_cache(&toy_set(2, 3)).unwrap();
        bytes[11] = 2;
        assert!(matches!(decode_cache(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn cache_is_identity_on_quantized_sets(
            n in 0usize..6, h in 1usize..5, w in 1usize..5,
            raw in proptest::collection::vec(0.0f64..=1.0, 100),
            labels in proptest::collection::vec(0u8..4, 6),
        ) {
            let data: Vec<f64> = raw.iter().cycle().take(n * h * w).copied().collect();
            let set = LabeledImageSet::new(
                Array3::from_shape_vec((n, h, w), data).unwrap(),
                labels[..n].to_vec(),
                4,
            ).unwrap().quantized();
            let back = decode_cache(&encode_cache(&set).unwrap()).unwrap();
            prop_assert_eq!(back, set);
        }

        #[test]
        fn idx_pixels_stay_in_unit_range(pixels in proptest::collection::vec(any::<u8>(), 12)) {
            let set = parse_idx(&idx_images(3, 2, 2, &pixels), &idx_labels(&[0, 1, 2])).unwrap();
            prop_assert!(set.images().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
