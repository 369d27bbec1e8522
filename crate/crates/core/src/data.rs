//! Dataset ingestion (IDX), category selection, synthetic shape families
//! and the per-epoch triple batcher used by training.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Fashion-MNIST label indices used for the X/Y/Z domains.
pub const FASHION_TSHIRT: u8 = 0;
pub const FASHION_SNEAKER: u8 = 7;
pub const FASHION_BAG: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Grayscale images with one label each; pixels lie in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl LabeledImages {
    pub fn empty(split: Split) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(|t| {
            let s = t.shape();
            [s[0], s[1], s[2]]
        })
    }

    /// Stacks the images at `indices` into one `[B, H, W, C]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let picked: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Tensor::stack(&picked)
    }

    pub fn all(&self) -> Result<Tensor> {
        Tensor::stack(&self.images)
    }

    /// Appends another set with the same split.
    pub fn extend(&mut self, other: LabeledImages) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
    }
}

/// Three single-category image sets forming the cycle `X -> Y -> Z -> X`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriDomain {
    pub x: LabeledImages,
    pub y: LabeledImages,
    pub z: LabeledImages,
}

impl TriDomain {
    pub fn domains(&self) -> [&LabeledImages; 3] {
        [&self.x, &self.y, &self.z]
    }

    pub fn min_len(&self) -> usize {
        self.x.len().min(self.y.len()).min(self.z.len())
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.x.image_shape()
    }

    /// All three domains concatenated in X, Y, Z order.
    pub fn union(&self) -> LabeledImages {
        let mut out = self.x.clone();
        out.extend(self.y.clone());
        out.extend(self.z.clone());
        out
    }
}

pub fn byte_to_pixel(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn pixel_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated")))
}

/// Parses an IDX image file body.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images file has magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let px = rows * cols;
    let need = 16 + n * px;
    if bytes.len() < need {
        return Err(Error::Length(format!(
            "images file declares {n} images of {rows}x{cols} ({need} bytes) but has {}",
            bytes.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Format("images file declares zero extent".into()));
    }
    Ok(bytes[16..need]
        .chunks_exact(px)
        .map(|chunk| Tensor::from_raw(vec![rows, cols, 1], chunk.iter().map(|&b| byte_to_pixel(b)).collect()))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels file has magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Length(format!(
            "labels file declares {n} labels but has {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes[8..8 + n].to_vec())
}

pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>, split: Split) -> Result<LabeledImages> {
    let (ip, lp) = (image_path.as_ref(), label_path.as_ref());
    let images = parse_idx_images(&fs::read(ip).map_err(|e| Error::io(ip, e))?)?;
    let labels = parse_idx_labels(&fs::read(lp).map_err(|e| Error::io(lp, e))?)?;
    if images.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(LabeledImages { images, labels, split })
}

pub fn encode_idx_images(images: &[Tensor]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first().map(|t| t.shape()) {
        Some([r, c, 1]) => (*r, *c),
        Some(s) => return Err(Error::shape(format!("IDX export needs [H,W,1] images, got {s:?}"))),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if img.shape() != [rows, cols, 1] {
            return Err(Error::shape("IDX export needs images of one shape"));
        }
        out.extend(img.data().iter().map(|&v| pixel_to_byte(v)));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx(set: &LabeledImages, image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<()> {
    let (ip, lp) = (image_path.as_ref(), label_path.as_ref());
    fs::write(ip, encode_idx_images(&set.images)?).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, encode_idx_labels(&set.labels)).map_err(|e| Error::io(lp, e))
}

/// Splits `data` into the three categories `labels = (x, y, z)`, preserving order.
pub fn select_tridomain(data: &LabeledImages, labels: (u8, u8, u8)) -> Result<TriDomain> {
    let (a, b, c) = labels;
    if a == b || b == c || a == c {
        return Err(Error::invalid(format!("domain labels ({a}, {b}, {c}) must be distinct")));
    }
    let available: BTreeSet<u8> = data.labels.iter().copied().collect();
    for l in [a, b, c] {
        if !available.contains(&l) {
            return Err(Error::invalid(format!(
                "label {l} not present; available labels: {available:?}"
            )));
        }
    }
    let pick = |want: u8| {
        let mut set = LabeledImages::empty(data.split);
        for (img, &l) in data.images.iter().zip(&data.labels) {
            if l == want {
                set.images.push(img.clone());
                set.labels.push(l);
            }
        }
        set
    };
    Ok(TriDomain {
        x: pick(a),
        y: pick(b),
        z: pick(c),
    })
}

/// Synthetic shape families standing in for three image categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Cross,
    Stripes,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Cross, ShapeKind::Stripes];

    pub fn label(self) -> u8 {
        match self {
            ShapeKind::Disk => 0,
            ShapeKind::Cross => 1,
            ShapeKind::Stripes => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Cross => "cross",
            ShapeKind::Stripes => "stripes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Pixel value from a signed distance (negative inside), with a one-pixel soft edge.
fn shade(signed_distance: f32) -> f32 {
    2.0 * (0.5 - signed_distance).clamp(0.0, 1.0) - 1.0
}

fn render<R: Rng + ?Sized>(kind: ShapeKind, size: usize, rng: &mut R) -> Tensor {
    let s = size as f32;
    let c = s / 2.0;
    match kind {
        ShapeKind::Disk => {
            let r = rng.gen_range(0.25..0.4) * s;
            let cx = c + rng.gen_range(-0.12..0.12) * s;
            let cy = c + rng.gen_range(-0.12..0.12) * s;
            Tensor::from_fn(&[size, size, 1], |i| {
                let (y, x) = ((i / size) as f32 + 0.5, (i % size) as f32 + 0.5);
                shade(((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r)
            })
        }
        ShapeKind::Cross => {
            let half_t = rng.gen_range(0.06..0.13) * s;
            let arm = rng.gen_range(0.3..0.45) * s;
            let cx = c + rng.gen_range(-0.1..0.1) * s;
            let cy = c + rng.gen_range(-0.1..0.1) * s;
            Tensor::from_fn(&[size, size, 1], |i| {
                let (y, x) = ((i / size) as f32 + 0.5, (i % size) as f32 + 0.5);
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                // box signed distance, approximated by the max of the axis excesses
                let bar_h = (dx - arm).max(dy - half_t);
                let bar_v = (dx - half_t).max(dy - arm);
                shade(bar_h.min(bar_v))
            })
        }
        ShapeKind::Stripes => {
            let period = rng.gen_range(4.0..6.0) * s / 16.0;
            let duty = rng.gen_range(0.35..0.55);
            let phase = rng.gen_range(0.0..period);
            let margin = rng.gen_range(0.05..0.15) * s;
            Tensor::from_fn(&[size, size, 1], |i| {
                let (y, x) = ((i / size) as f32 + 0.5, (i % size) as f32 + 0.5);
                let u = (y + phase).rem_euclid(period);
                let half = duty * period / 2.0;
                let stripe = (u - period / 2.0).abs() - half;
                let frame = (margin - x).max(x - (s - margin));
                shade(stripe.max(frame))
            })
        }
    }
}

/// `n` jittered images of one shape family, labelled with [`ShapeKind::label`].
pub fn synth_shapes<R: Rng + ?Sized>(kind: ShapeKind, n: usize, size: usize, rng: &mut R, split: Split) -> Result<LabeledImages> {
    if size < 8 {
        return Err(Error::invalid(format!("synthetic image size {size} below minimum 8")));
    }
    let images = (0..n).map(|_| render(kind, size, rng)).collect();
    Ok(LabeledImages {
        images,
        labels: vec![kind.label(); n],
        split,
    })
}

/// Synthetic tri-domain (disk, cross, stripes) with independent train and test draws.
pub fn synth_tridomain(n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<(TriDomain, TriDomain)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |split, n| -> Result<TriDomain> {
        Ok(TriDomain {
            x: synth_shapes(ShapeKind::Disk, n, size, &mut rng, split)?,
            y: synth_shapes(ShapeKind::Cross, n, size, &mut rng, split)?,
            z: synth_shapes(ShapeKind::Stripes, n, size, &mut rng, split)?,
        })
    };
    let train = make(Split::Train, n_train)?;
    let test = make(Split::Test, n_test)?;
    Ok((train, test))
}

/// One aligned step of training data.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub z: Tensor,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.x.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-epoch shuffler: each domain is permuted independently and the
/// permutations are zipped into batches; the shortest domain bounds the epoch.
#[derive(Debug, Clone)]
pub struct TripleBatcher<'a> {
    tri: &'a TriDomain,
    batch: usize,
    rng: ChaCha8Rng,
}

impl<'a> TripleBatcher<'a> {
    pub fn new(tri: &'a TriDomain, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if batch > tri.min_len() {
            return Err(Error::invalid(format!(
                "batch size {batch} exceeds smallest domain ({})",
                tri.min_len()
            )));
        }
        Ok(Self {
            tri,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.tri.min_len() / self.batch
    }

    pub fn next_epoch(&mut self) -> Result<Vec<TripleBatch>> {
        let mut perms: Vec<Vec<usize>> = self
            .tri
            .domains()
            .iter()
            .map(|d| (0..d.len()).collect())
            .collect();
        for p in &mut perms {
            p.shuffle(&mut self.rng);
        }
        let b = self.batch;
        (0..self.batches_per_epoch())
            .map(|i| {
                let r = i * b..(i + 1) * b;
                Ok(TripleBatch {
                    x: self.tri.x.batch(&perms[0][r.clone()])?,
                    y: self.tri.y.batch(&perms[1][r.clone()])?,
                    z: self.tri.z.batch(&perms[2][r])?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_bytes() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 255, 10, 20, 30, 40, 50, 127]);
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, 2] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(&[3, 8]);
        (img, lab)
    }

    #[test]
    fn parses_hand_built_idx_pair() {
        let (img, lab) = fixture_bytes();
        let images = parse_idx_images(&img).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].shape(), &[2, 2, 1]);
        assert_eq!(images[0].data()[0], -1.0);
        assert_eq!(images[0].data()[1], 1.0);
        assert_eq!(images[1].data()[3], byte_to_pixel(127));
        assert_eq!(images[0].data()[2], byte_to_pixel(10));
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![3, 8]);
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let (img, lab) = fixture_bytes();
        assert!(matches!(parse_idx_images(&lab), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&img), Err(Error::Format(_))));
        assert!(matches!(parse_idx_images(&img[..img.len() - 1]), Err(Error::Length(_))));
        assert!(matches!(parse_idx_images(&img[..6]), Err(Error::Length(_))));
        assert!(matches!(parse_idx_labels(&lab[..9]), Err(Error::Length(_))));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mut lab) = fixture_bytes();
        lab[7] = 1;
        lab.pop();
        std::fs::write(dir.path().join("i"), img).unwrap();
        std::fs::write(dir.path().join("l"), lab).unwrap();
        let err = load_idx(dir.path().join("i"), dir.path().join("l"), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn select_rejects_duplicates_and_missing() {
        let set = LabeledImages {
            images: vec![Tensor::zeros(&[2, 2, 1]); 4],
            labels: vec![0, 1, 2, 1],
            split: Split::Train,
        };
        assert!(select_tridomain(&set, (0, 0, 1)).is_err());
        let err = select_tridomain(&set, (0, 1, 5)).unwrap_err().to_string();
        assert!(err.contains("available"), "{err}");
        let tri = select_tridomain(&set, (0, 1, 2)).unwrap();
        assert_eq!((tri.x.len(), tri.y.len(), tri.z.len()), (1, 2, 1));
    }

    #[test]
    fn synth_is_seeded_and_bounded() {
        let a = synth_shapes(ShapeKind::Disk, 1, 16, &mut ChaCha8Rng::seed_from_u64(7), Split::Train).unwrap();
        let b = synth_shapes(ShapeKind::Disk, 1, 16, &mut ChaCha8Rng::seed_from_u64(7), Split::Train).unwrap();
        assert_eq!(a, b);
        let none = synth_shapes(ShapeKind::Cross, 0, 16, &mut ChaCha8Rng::seed_from_u64(7), Split::Train).unwrap();
        assert!(none.is_empty());
        assert!(synth_shapes(ShapeKind::Stripes, 3, 7, &mut ChaCha8Rng::seed_from_u64(7), Split::Train).is_err());
    }

    #[test]
    fn disk_centre_is_lit() {
        let set = synth_shapes(ShapeKind::Disk, 1000, 16, &mut ChaCha8Rng::seed_from_u64(2024), Split::Train).unwrap();
        let lit = set.images.iter().filter(|t| t.data()[8 * 16 + 8] > 0.0).count();
        assert!(lit >= 950, "{lit} of 1000");
    }

    #[test]
    fn batcher_counts_and_truncation() {
        let mk = |n: usize| LabeledImages {
            images: vec![Tensor::zeros(&[8, 8, 1]); n],
            labels: vec![0; n],
            split: Split::Train,
        };
        let tri = TriDomain { x: mk(10), y: mk(10), z: mk(10) };
        assert_eq!(TripleBatcher::new(&tri, 5, 0).unwrap().next_epoch().unwrap().len(), 2);
        let tri = TriDomain { x: mk(10), y: mk(7), z: mk(10) };
        assert_eq!(TripleBatcher::new(&tri, 5, 0).unwrap().next_epoch().unwrap().len(), 1);
        assert!(TripleBatcher::new(&tri, 0, 0).is_err());
        assert!(TripleBatcher::new(&tri, 8, 0).is_err());
    }

    #[test]
    fn batcher_is_deterministic() {
        let (train, _) = synth_tridomain(12, 0, 8, 3).unwrap();
        let run = || {
            let mut b = TripleBatcher::new(&train, 4, 99).unwrap();
            (b.next_epoch().unwrap(), b.next_epoch().unwrap())
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn pixels_stay_in_range_and_bytes_roundtrip(bytes in proptest::collection::vec(proptest::num::u8::ANY, 1..200)) {
            for &b in &bytes {
                let v = byte_to_pixel(b);
                proptest::prop_assert!((-1.0..=1.0).contains(&v));
                proptest::prop_assert_eq!(pixel_to_byte(v), b);
            }
        }

        #[test]
        fn idx_encoding_is_the_identity(
            n in 1usize..6,
            (rows, cols) in (1usize..6, 1usize..6),
            seed in proptest::num::u64::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut img = Vec::new();
            for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
                img.extend_from_slice(&v.to_be_bytes());
            }
            img.extend((0..n * rows * cols).map(|_| rng.gen::<u8>()));
            let images = parse_idx_images(&img).unwrap();
            proptest::prop_assert_eq!(encode_idx_images(&images).unwrap(), img);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
            let back = parse_idx_labels(&encode_idx_labels(&labels)).unwrap();
            proptest::prop_assert_eq!(back, labels);
        }
    }
}
