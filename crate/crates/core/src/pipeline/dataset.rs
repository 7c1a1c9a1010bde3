//! Dataset manifests, ingestion, the 1:1:2 split and image augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::imageio::{read_gray, read_mask, read_mask_lenient, resize_bilinear, resize_nearest, write_mask, write_plane16};
use crate::error::{invalid, Error, Result};
use crate::raster::{BinaryMask, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub class: String,
    pub stem: String,
    /// Relative to the manifest's directory unless absolute.
    pub image: PathBuf,
    pub gt: PathBuf,
    pub split: Option<Split>,
}

impl ManifestEntry {
    /// `class/stem`
    pub fn image_id(&self) -> String {
        format!("{}/{}", self.class, self.stem)
    }
}

/// Image/GT pairs grouped by class, with an optional split assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Seed of the split, once assigned.
    pub seed: Option<u64>,
}

const MANIFEST_HEADER: &str = "class,stem,image,gt,split";

/// A loaded pair at working resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub class: String,
    pub image: GrayImage<f64>,
    pub gt: BinaryMask,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries per class, classes sorted by name, entries in manifest order.
    pub fn classes(&self) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut map: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(&e.class).or_default().push(e);
        }
        map
    }

    pub fn in_split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn class_of(&self, image_id: &str) -> Option<String> {
        self.entries
            .iter()
            .find(|e| e.image_id() == image_id)
            .map(|e| e.class.clone())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Sample> {
        let image = read_gray(self.resolve(&entry.image))?;
        let gt = read_mask(self.resolve(&entry.gt))?;
        if gt.dims() != image.dims() {
            return Err(invalid(format!("{}: image and ground truth sizes differ", entry.image_id())));
        }
        Ok(Sample {
            image_id: entry.image_id(),
            class: entry.class.clone(),
            image,
            gt,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.in_split(split).into_iter().map(|e| self.load(e)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.class,
                e.stem,
                e.image.display(),
                e.gt.display(),
                e.split.map(|s| s.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seed = None;
        let mut entries = Vec::new();
        let mut header = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("seed=") {
                    seed = Some(v.parse().map_err(|_| invalid(format!("manifest line {}: bad seed", n + 1)))?);
                }
                continue;
            }
            if !header {
                if line != MANIFEST_HEADER {
                    return Err(invalid(format!("manifest header must be `{MANIFEST_HEADER}`")));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(invalid(format!("manifest line {}: expected 5 fields", n + 1)));
            }
            entries.push(ManifestEntry {
                class: f[0].into(),
                stem: f[1].into(),
                image: f[2].into(),
                gt: f[3].into(),
                split: if f[4].is_empty() { None } else { Some(f[4].parse()?) },
            });
        }
        if !header {
            return Err(invalid("manifest has no header"));
        }
        let m = Self {
            root: root.into(),
            entries,
            seed,
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id()) {
                return Err(invalid(format!("duplicate image `{}` in manifest", e.image_id())));
            }
        }
        Ok(())
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

const IMAGE_EXTS: [&str; 2] = ["png", "pgm"];

/// Stem to path for every supported file in `dir`.
fn list_stems(dir: &Path, problems: &mut Vec<String>) -> BTreeMap<String, PathBuf> {
    let mut out = BTreeMap::new();
    let read = match fs::read_dir(dir) {
        Ok(r) => r,
        Err(e) => {
            problems.push(format!("{}: {e}", dir.display()));
            return out;
        }
    };
    for entry in read.flatten() {
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = p.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.clone(), p.clone()) {
            problems.push(format!("{}: stem `{stem}` also used by {}", p.display(), prev.display()));
        }
    }
    out
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.contains([',', '/', '\\']) && !s.starts_with('#')
}

/// Reads `<root>/<class>/{images,gt}/<stem>.{png,pgm}`, converts to
/// grayscale, resizes to `size x size` (bilinear for images, nearest-neighbor
/// and re-binarized for ground truth) and writes normalized copies under
/// `<out>/data/<class>/`. Every problem found is reported at once.
pub fn ingest(root: impl AsRef<Path>, out: impl AsRef<Path>, size: usize) -> Result<DatasetManifest> {
    let (root, out) = (root.as_ref(), out.as_ref());
    if size == 0 {
        return Err(invalid("image size must be positive"));
    }
    let mut problems = Vec::new();
    let mut classes: Vec<(String, PathBuf)> = match fs::read_dir(root) {
        Ok(r) => r
            .flatten()
            .filter(|e| e.path().is_dir())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .collect(),
        Err(e) => return Err(Error::Dataset(vec![format!("{}: {e}", root.display())])),
    };
    classes.sort();
    if classes.is_empty() {
        problems.push(format!("{}: no class directories", root.display()));
    }
    let mut pairs = Vec::new();
    for (class, dir) in &classes {
        if !valid_name(class) {
            problems.push(format!("class name `{class}` contains a reserved character"));
            continue;
        }
        let images = list_stems(&dir.join("images"), &mut problems);
        let gts = list_stems(&dir.join("gt"), &mut problems);
        for (stem, img) in &images {
            if !valid_name(stem) {
                problems.push(format!("{}: stem contains a reserved character", img.display()));
            }
            match gts.get(stem) {
                Some(gt) => pairs.push((class.clone(), stem.clone(), img.clone(), gt.clone())),
                None => problems.push(format!("{class}/{stem}: missing ground truth")),
            }
        }
        for (stem, gt) in &gts {
            if !images.contains_key(stem) {
                problems.push(format!("{}: ground truth has no matching image", gt.display()));
            }
        }
    }
    let mut entries = Vec::new();
    for (class, stem, img, gt) in pairs {
        let image = match read_gray(&img) {
            Ok(i) => i,
            Err(e) => {
                problems.push(format!("{}: unreadable ({e})", img.display()));
                continue;
            }
        };
        let mask = match read_mask_lenient(&gt) {
            Ok(m) => m,
            Err(e) => {
                problems.push(format!("{}: unreadable ({e})", gt.display()));
                continue;
            }
        };
        let rel_img = PathBuf::from("data").join(&class).join(format!("{stem}.pgm"));
        let rel_gt = PathBuf::from("data").join(&class).join(format!("{stem}_gt.pgm"));
        if problems.is_empty() {
            write_plane16(out.join(&rel_img), &resize_bilinear(&image, size, size)?)?;
            write_mask(out.join(&rel_gt), &resize_nearest(&mask, size, size))?;
        }
        entries.push(ManifestEntry {
            class,
            stem,
            image: rel_img,
            gt: rel_gt,
            split: None,
        });
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
        seed: None,
    };
    manifest.write(out.join("manifest.csv"))?;
    Ok(manifest)
}

/// `(train, val, test)` counts for a class of `n`: `ceil(n/4)` train,
/// `ceil(n/4)` validation capped by what is left, remainder test.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 4 {
        return Err(invalid(format!("a class needs at least 4 images to split, got {n}")));
    }
    let train = n.div_ceil(4);
    let val = n.div_ceil(4).min(n - train);
    Ok((train, val, n - train - val))
}

/// Per-class seeded shuffle followed by [`split_counts`]; classes are
/// processed in name order from one generator.
pub fn split_1_1_2(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    let classes = manifest.classes();
    let mut undersized = Vec::new();
    for (class, members) in &classes {
        if members.len() < 4 {
            undersized.push(format!("class `{class}` has {} images, needs at least 4", members.len()));
        }
    }
    if !undersized.is_empty() {
        return Err(Error::Dataset(undersized));
    }
    for (class, _) in classes {
        let mut idx: Vec<usize> = (0..out.entries.len()).filter(|&i| out.entries[i].class == class).collect();
        idx.shuffle(&mut rng);
        let (train, val, _) = split_counts(idx.len())?;
        for (rank, &i) in idx.iter().enumerate() {
            out.entries[i].split = Some(if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    out.seed = Some(seed);
    Ok(out)
}

/// Eight dihedral variants per pair, image and ground truth transformed
/// together, variants consecutive; ids gain a `#d<k>` suffix.
pub fn augment_images(samples: &[Sample]) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        for k in 0..8 {
            out.push(Sample {
                image_id: format!("{}#d{k}", s.image_id),
                class: s.class.clone(),
                image: s.image.dihedral(k)?,
                gt: s.gt.dihedral(k)?,
            });
        }
    }
    Ok(out)
}
