//! Patch-level segmentation: non-overlapping tiles are labeled by how much
//! object they contain, classified, and painted back as a coarse mask.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::netbuilder::{build_patch_classifier, Network};
use crate::raster::{dihedral, BinaryMask, GrayImage};
use crate::scalar::Real;
use crate::tensor::{Adam, AdamConfig, LossKind, Tensor};
use crate::train::{fit, predict_batched, EpochStats, Samples, TrainConfig};

pub const DEFAULT_PATCH_SIZE: usize = 8;
pub const DEFAULT_CRITERION: f64 = 0.5;
pub const PATCH_EPOCHS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchLabel {
    WithoutObject,
    WithObject,
}

impl PatchLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_object(self) -> bool {
        self == PatchLabel::WithObject
    }
}

impl fmt::Display for PatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchLabel::WithoutObject => "without",
            PatchLabel::WithObject => "with",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    /// `size x size`, row-major.
    pub pixels: Vec<T>,
    pub grid_row: usize,
    pub grid_col: usize,
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    pub size: usize,
    pub patches: Vec<Patch<T>>,
    /// Parallel to `patches` when present.
    pub labels: Option<Vec<PatchLabel>>,
    pub criterion: Option<f64>,
}

impl<T: Real> PatchSet<T> {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            patches: Vec::new(),
            labels: None,
            criterion: None,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// `(with object, without object)`; `None` when unlabeled.
    pub fn class_counts(&self) -> Option<(usize, usize)> {
        let labels = self.labels.as_ref()?;
        let with = labels.iter().filter(|l| l.is_object()).count();
        Some((with, labels.len() - with))
    }

    /// Appends `other`, which must have the same patch size and labeling state.
    pub fn extend(&mut self, other: PatchSet<T>) -> Result<()> {
        if other.size != self.size {
            return Err(shape_err("patch set", "patch sizes differ"));
        }
        match (&mut self.labels, other.labels) {
            (Some(a), Some(b)) => a.extend(b),
            (None, None) => {}
            (None, Some(b)) if self.patches.is_empty() => self.labels = Some(b),
            _ => return Err(invalid("cannot mix labeled and unlabeled patches")),
        }
        if self.criterion.is_none() {
            self.criterion = other.criterion;
        }
        self.patches.extend(other.patches);
        Ok(())
    }

    /// Subset by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            size: self.size,
            patches: idx.iter().map(|&i| self.patches[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            criterion: self.criterion,
        }
    }

    /// Keeps the patches with label `label`.
    pub fn with_label(&self, label: PatchLabel) -> Self {
        let idx: Vec<usize> = match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] == label).collect(),
            None => Vec::new(),
        };
        self.select(&idx)
    }

    /// `(N, 1, size, size)` input tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        let data = self.patches.iter().flat_map(|p| p.pixels.iter().copied()).collect();
        Tensor::new([self.len(), 1, self.size, self.size], data).expect("patch pixels match size")
    }

    /// Inputs plus one-hot `[without, with]` targets.
    pub fn to_samples(&self) -> Result<Samples<T>> {
        let labels = self.labels.as_ref().ok_or_else(|| invalid("patch set is unlabeled"))?;
        let targets = Tensor::from_fn([labels.len(), 2], |i| {
            if labels[i / 2].index() == i % 2 {
                T::one()
            } else {
                T::zero()
            }
        });
        Samples::new(self.to_tensor(), targets)
    }
}

/// `(rows, cols)` of the patch grid; the offending dimension is named when
/// it is not a multiple of `size`.
pub fn grid_dims(width: usize, height: usize, size: usize) -> Result<(usize, usize)> {
    if size == 0 {
        return Err(invalid("patch size must be positive"));
    }
    for (dim, v) in [("height", height), ("width", width)] {
        if v % size != 0 {
            return Err(shape_err("mesh", format!("image {dim} {v} is not a multiple of patch size {size}")));
        }
    }
    Ok((height / size, width / size))
}

fn tile<V: Copy>(data: &[V], width: usize, size: usize, row: usize, col: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(size * size);
    for y in row * size..(row + 1) * size {
        out.extend_from_slice(&data[y * width + col * size..y * width + (col + 1) * size]);
    }
    out
}

/// Object fraction of a ground-truth patch; values must be exactly 0 or 1.
pub fn object_fraction<T: Real>(gt_patch: &[T]) -> Result<f64> {
    if gt_patch.is_empty() {
        return Err(invalid("empty patch"));
    }
    let mut on = 0usize;
    for &v in gt_patch {
        if v == T::one() {
            on += 1;
        } else if v != T::zero() {
            return Err(invalid(format!("ground-truth value {v} is not binary")));
        }
    }
    Ok(on as f64 / gt_patch.len() as f64)
}

/// `WithObject` iff the object fraction is strictly greater than `criterion`.
pub fn assign_label<T: Real>(gt_patch: &[T], criterion: f64) -> Result<PatchLabel> {
    if !(0.0..1.0).contains(&criterion) {
        return Err(invalid(format!("criterion {criterion} must lie in [0, 1)")));
    }
    Ok(if object_fraction(gt_patch)? > criterion {
        PatchLabel::WithObject
    } else {
        PatchLabel::WithoutObject
    })
}

/// Row-major tiling into `size x size` patches, labeled when `gt` is given.
pub fn mesh_patches<T: Real>(
    image: &GrayImage<T>,
    gt: Option<&BinaryMask>,
    size: usize,
    criterion: f64,
    image_id: &str,
) -> Result<PatchSet<T>> {
    let (w, h) = image.dims();
    let (rows, cols) = grid_dims(w, h, size)?;
    if let Some(g) = gt {
        if g.dims() != (w, h) {
            return Err(shape_err("mesh", "ground truth does not match the image"));
        }
    }
    let gt_values: Option<Vec<T>> = gt.map(|g| g.to_values());
    let mut patches = Vec::with_capacity(rows * cols);
    let mut labels = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            patches.push(Patch {
                pixels: tile(image.data(), w, size, r, c),
                grid_row: r,
                grid_col: c,
                image_id: image_id.to_string(),
            });
            if let Some(g) = &gt_values {
                labels.push(assign_label(&tile(g, w, size, r, c), criterion)?);
            }
        }
    }
    Ok(PatchSet {
        size,
        patches,
        labels: gt.map(|_| labels),
        criterion: gt.map(|_| criterion),
    })
}

/// Eight dihedral variants per patch, emitted consecutively; labels copied.
pub fn augment_patches<T: Real>(set: &PatchSet<T>) -> PatchSet<T> {
    let mut patches = Vec::with_capacity(set.len() * 8);
    for p in &set.patches {
        for k in 0..8 {
            patches.push(Patch {
                pixels: dihedral(&p.pixels, set.size, k),
                ..p.clone()
            });
        }
    }
    PatchSet {
        size: set.size,
        patches,
        labels: set
            .labels
            .as_ref()
            .map(|l| l.iter().flat_map(|&x| std::iter::repeat_n(x, 8)).collect()),
        criterion: set.criterion,
    }
}

/// Seeded uniform sample of exactly `count` patches without replacement,
/// kept in pool order.
pub fn balance<T: Real>(pool: &PatchSet<T>, count: usize, seed: u64) -> Result<PatchSet<T>> {
    if count > pool.len() {
        return Err(invalid(format!("cannot draw {count} patches from a pool of {}", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), count).into_vec();
    idx.sort_unstable();
    Ok(pool.select(&idx))
}

/// Training set with equal class counts: the minority class is augmented
/// eight-fold and then down-sampled to the majority count (or the majority is
/// down-sampled when augmentation overshoots the other way).
pub fn balanced_training_set<T: Real>(labeled: &PatchSet<T>, seed: u64) -> Result<PatchSet<T>> {
    let (with, without) = labeled
        .class_counts()
        .ok_or_else(|| invalid("patch set is unlabeled"))?;
    if with == 0 || without == 0 {
        return Err(invalid("both patch classes must be present"));
    }
    let (minority, majority) = if with <= without {
        (PatchLabel::WithObject, PatchLabel::WithoutObject)
    } else {
        (PatchLabel::WithoutObject, PatchLabel::WithObject)
    };
    let small = augment_patches(&labeled.with_label(minority));
    let large = labeled.with_label(majority);
    let (small, large) = if small.len() >= large.len() {
        (balance(&small, large.len(), seed)?, large)
    } else {
        let n = small.len();
        (small, balance(&large, n, seed)?)
    };
    let mut out = PatchSet::empty(labeled.size);
    out.extend(large)?;
    out.extend(small)?;
    Ok(out)
}

/// Anything that can label patches; the compact network is one choice.
pub trait PatchClassifier<T: Real> {
    fn classify(&self, patches: &PatchSet<T>) -> Result<Vec<PatchLabel>>;
}

impl<T: Real> PatchClassifier<T> for Network<T> {
    /// `WithObject` when its probability is strictly larger.
    fn classify(&self, patches: &PatchSet<T>) -> Result<Vec<PatchLabel>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let probs = predict_batched(self, &patches.to_tensor(), 256)?;
        if probs.shape() != [patches.len(), 2] {
            return Err(shape_err("classify", format!("classifier produced {:?}", probs.shape())));
        }
        Ok(probs
            .data()
            .chunks(2)
            .map(|p| {
                if p[1] > p[0] {
                    PatchLabel::WithObject
                } else {
                    PatchLabel::WithoutObject
                }
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PatchTrainConfig {
    fn default() -> Self {
        Self {
            epochs: PATCH_EPOCHS,
            lr: AdamConfig::PATCH_LR,
            batch_size: 32,
            seed: 0,
        }
    }
}

pub struct TrainedPatchClassifier<T> {
    pub network: Network<T>,
    pub optimizer: Adam<T>,
    pub history: Vec<EpochStats>,
}

/// Trains the compact classifier with categorical cross-entropy and Adam.
pub fn train_patch_classifier<T: Real>(
    set: &PatchSet<T>,
    cfg: PatchTrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedPatchClassifier<T>> {
    match set.class_counts() {
        None => return Err(invalid("patch set is unlabeled")),
        Some((0, _)) | Some((_, 0)) => return Err(invalid("training needs patches of both classes")),
        Some(_) => {}
    }
    let mut network = Network::new(build_patch_classifier(set.size)?, cfg.seed)?;
    let mut optimizer = Adam::new(AdamConfig::with_lr(cfg.lr));
    let samples = set.to_samples()?;
    let history = fit(
        &mut network,
        &mut optimizer,
        &samples,
        None,
        LossKind::CategoricalCrossEntropy,
        TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        },
        on_epoch,
    )?;
    Ok(TrainedPatchClassifier {
        network,
        optimizer,
        history,
    })
}

/// Paints every `WithObject` cell of a row-major label grid.
pub fn reconstruct_mask(labels: &[PatchLabel], width: usize, height: usize, size: usize) -> Result<BinaryMask> {
    let (rows, cols) = grid_dims(width, height, size)?;
    if labels.len() != rows * cols {
        return Err(shape_err(
            "reconstruct",
            format!("{} labels for a {rows}x{cols} grid", labels.len()),
        ));
    }
    Ok(BinaryMask::from_fn(width, height, |x, y| {
        labels[(y / size) * cols + x / size].is_object()
    }))
}

/// Meshes, classifies and reconstructs one image.
pub fn segment_patches<T: Real>(
    classifier: &impl PatchClassifier<T>,
    image: &GrayImage<T>,
    size: usize,
) -> Result<BinaryMask> {
    let set = mesh_patches(image, None, size, DEFAULT_CRITERION, "")?;
    let labels = classifier.classify(&set)?;
    reconstruct_mask(&labels, image.width(), image.height(), size)
}

const CACHE_MAGIC: &str = "MSCC-PATCHES 1";

impl<T: Real> PatchSet<T> {
    /// Cache layout: text header, one `image_id,row,col,label` record per
    /// patch (`label` is 1, 0 or `-` when unlabeled), a `---` line, then all
    /// pixels as little-endian f64 in record order.
    pub fn write_cache(&self, mut w: impl Write) -> Result<()> {
        let mut head = format!("{CACHE_MAGIC}\nsize {}\ncount {}\n", self.size, self.len());
        if let Some(c) = self.criterion {
            head.push_str(&format!("criterion {c}\n"));
        }
        head.push_str("image_id,row,col,label\n");
        for (i, p) in self.patches.iter().enumerate() {
            if p.image_id.contains([',', '\n']) {
                return Err(invalid(format!("image id `{}` cannot be stored in a cache", p.image_id)));
            }
            let label = match &self.labels {
                Some(l) => (l[i].index()).to_string(),
                None => "-".into(),
            };
            head.push_str(&format!("{},{},{},{label}\n", p.image_id, p.grid_row, p.grid_col));
        }
        head.push_str("---\n");
        w.write_all(head.as_bytes())?;
        let mut blob = Vec::with_capacity(self.len() * self.size * self.size * 8);
        for p in &self.patches {
            for v in &p.pixels {
                blob.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn read_cache(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let bad = |m: String| invalid(format!("patch cache: {m}"));
        let mut line = String::new();
        let mut next = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next(&mut r)? != CACHE_MAGIC {
            return Err(bad("missing header".into()));
        }
        let mut size = None;
        let mut count = None;
        let mut criterion = None;
        loop {
            let l = next(&mut r)?;
            if l == "image_id,row,col,label" {
                break;
            }
            let (key, value) = l.split_once(' ').ok_or_else(|| bad(format!("bad header line `{l}`")))?;
            match key {
                "size" => size = value.parse::<usize>().ok(),
                "count" => count = value.parse::<usize>().ok(),
                "criterion" => criterion = value.parse::<f64>().ok(),
                _ => return Err(bad(format!("unknown header key `{key}`"))),
            }
        }
        let size = size.filter(|&s| s > 0).ok_or_else(|| bad("missing size".into()))?;
        let count = count.ok_or_else(|| bad("missing count".into()))?;
        let mut records = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut labeled = None;
        for _ in 0..count {
            let l = next(&mut r)?;
            let f: Vec<&str> = l.split(',').collect();
            let [id, row, col, label] = f[..] else {
                return Err(bad(format!("bad record `{l}`")));
            };
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad record `{l}`")));
            let lab = match label {
                "1" => Some(PatchLabel::WithObject),
                "0" => Some(PatchLabel::WithoutObject),
                "-" => None,
                _ => return Err(bad(format!("bad label in `{l}`"))),
            };
            if *labeled.get_or_insert(lab.is_some()) != lab.is_some() {
                return Err(bad("mixed labeled and unlabeled records".into()));
            }
            labels.extend(lab);
            records.push((id.to_string(), parse(row)?, parse(col)?));
        }
        if next(&mut r)? != "---" {
            return Err(bad("missing blob separator".into()));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let per = size * size;
        if blob.len() != count * per * 8 {
            return Err(bad(format!("blob has {} bytes, expected {}", blob.len(), count * per * 8)));
        }
        let values: Vec<T> = blob
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let patches = records
            .into_iter()
            .zip(values.chunks(per.max(1)))
            .map(|((image_id, grid_row, grid_col), px)| Patch {
                pixels: px.to_vec(),
                grid_row,
                grid_col,
                image_id,
            })
            .collect();
        Ok(Self {
            size,
            patches,
            labels: labeled.unwrap_or(false).then_some(labels),
            criterion,
        })
    }

    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_cache(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::read_cache(bytes.as_slice()).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize) -> GrayImage<f64> {
        GrayImage::from_fn(w, h, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0).unwrap()
    }

    fn gt_patch(on: usize) -> Vec<f64> {
        (0..64).map(|i| if i < on { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn mesh_counts() {
        assert_eq!(mesh_patches(&gray(256, 256), None, 8, 0.5, "a").unwrap().len(), 1024);
        let one = mesh_patches(&gray(8, 8), None, 8, 0.5, "a").unwrap();
        assert_eq!(one.patches[0].pixels, gray(8, 8).data());
        let err = mesh_patches(&gray(250, 256), None, 8, 0.5, "a").unwrap_err();
        assert!(err.to_string().contains("width 250"));
    }

    #[test]
    fn mesh_order_is_row_major() {
        let set = mesh_patches(&gray(24, 16), None, 8, 0.5, "a").unwrap();
        let coords: Vec<_> = set.patches.iter().map(|p| (p.grid_row, p.grid_col)).collect();
        assert_eq!(coords, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn half_area_rule() {
        assert_eq!(assign_label(&gt_patch(64), 0.5).unwrap(), PatchLabel::WithObject);
        assert_eq!(assign_label(&gt_patch(32), 0.5).unwrap(), PatchLabel::WithoutObject);
        assert_eq!(assign_label(&gt_patch(33), 0.5).unwrap(), PatchLabel::WithObject);
        let mut bad = gt_patch(3);
        bad[10] = 0.5;
        assert!(assign_label(&bad, 0.5).is_err());
    }

    #[test]
    fn augment_multiplies_by_eight() {
        let gt = BinaryMask::from_fn(16, 16, |x, _| x < 5);
        let set = mesh_patches(&gray(16, 16), Some(&gt), 8, 0.5, "a").unwrap();
        let aug = augment_patches(&set);
        assert_eq!(aug.len(), 32);
        assert_eq!(aug.labels.as_ref().unwrap().len(), 32);
        assert_eq!(aug.class_counts(), Some((16, 16)));
        let flat = PatchSet {
            size: 2,
            patches: vec![Patch {
                pixels: vec![1.0; 4],
                grid_row: 0,
                grid_col: 0,
                image_id: "x".into(),
            }],
            labels: None,
            criterion: None,
        };
        assert_eq!(augment_patches(&flat).len(), 8);
    }

    #[test]
    fn balance_is_seeded_and_exact() {
        let set = mesh_patches(&gray(64, 64), None, 8, 0.5, "a").unwrap();
        let a = balance(&set, 40, 3).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a, balance(&set, 40, 3).unwrap());
        assert_eq!(balance(&set, 64, 9).unwrap(), set);
        assert!(balance(&set, 65, 3).is_err());
    }

    #[test]
    fn balanced_training_set_has_equal_classes() {
        let gt = BinaryMask::from_fn(32, 32, |x, y| x < 8 && y < 16);
        let set = mesh_patches(&gray(32, 32), Some(&gt), 8, 0.5, "a").unwrap();
        assert_eq!(set.class_counts(), Some((2, 14)));
        let bal = balanced_training_set(&set, 1).unwrap();
        assert_eq!(bal.class_counts(), Some((14, 14)));
    }

    #[test]
    fn reconstruct_round_trip_on_aligned_gt() {
        let gt = BinaryMask::from_fn(32, 16, |x, y| (8..24).contains(&x) && y < 8);
        let set = mesh_patches(&gray(32, 16), Some(&gt), 8, 0.5, "a").unwrap();
        let back = reconstruct_mask(set.labels.as_ref().unwrap(), 32, 16, 8).unwrap();
        assert_eq!(back, gt);
        assert!(reconstruct_mask(&[PatchLabel::WithObject], 32, 16, 8).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let gt = BinaryMask::from_fn(16, 16, |x, _| x < 5);
        let set = mesh_patches(&gray(16, 16), Some(&gt), 8, 0.5, "cls/img_01").unwrap();
        let mut buf = Vec::new();
        set.write_cache(&mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.contains("image_id,row,col,label\ncls/img_01,0,0,1\n"));
        assert_eq!(PatchSet::<f64>::read_cache(buf.as_slice()).unwrap(), set);
        let unlabeled = mesh_patches(&gray(16, 16), None, 8, 0.5, "u").unwrap();
        let mut buf = Vec::new();
        unlabeled.write_cache(&mut buf).unwrap();
        assert_eq!(PatchSet::<f64>::read_cache(buf.as_slice()).unwrap(), unlabeled);
        assert!(PatchSet::<f64>::read_cache(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn toy_classifier_learns_half_patches() {
        let mut set = PatchSet::<f64>::empty(8);
        let mut labels = Vec::new();
        for i in 0..64 {
            let bright_left = i % 2 == 0;
            set.patches.push(Patch {
                pixels: (0..64).map(|k| if (k % 8 < 4) == bright_left { 1.0 } else { 0.0 }).collect(),
                grid_row: 0,
                grid_col: i,
                image_id: "toy".into(),
            });
            labels.push(if bright_left { PatchLabel::WithObject } else { PatchLabel::WithoutObject });
        }
        set.labels = Some(labels.clone());
        let cfg = PatchTrainConfig {
            epochs: 2,
            lr: 1e-2,
            batch_size: 8,
            seed: 4,
        };
        let trained = train_patch_classifier(&set, cfg, |_| {}).unwrap();
        assert!(trained.history[1].train_acc > 0.95);
        assert!(trained.history[1].train_loss <= trained.history[0].train_loss);
        assert_eq!(trained.network.classify(&set).unwrap(), labels);
        let again = train_patch_classifier(&set, cfg, |_| {}).unwrap();
        assert_eq!(again.network, trained.network);

        let mut single = set.clone();
        single.labels = Some(vec![PatchLabel::WithObject; 64]);
        assert!(train_patch_classifier(&single, cfg, |_| {}).is_err());
    }
}
