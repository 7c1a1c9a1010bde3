//! Training, inference and fusion over a split manifest, with all on-disk
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{Config, CrfInput};
use super::dataset::{augment_images, ingest, split_1_1_2, DatasetManifest, ManifestEntry, Sample, Split};
use super::imageio::{read_mask, write_mask, write_plane16, write_png_rgb};
use crate::densecrf::{map_mask, mean_field_infer, unary_from_mask, unary_from_probabilities, PixelFeatures, UNARY_EPS};
use crate::error::{invalid, Error, Result};
use crate::fusion::{binarize, buffer_filter, combine, mean_sweep, render_overlay, select_buffer, sweep_buffer, sweep_csv, OverlayPalette, SweepRow};
use crate::metrics::{aggregate, score, ImageMetrics, Metrics, MetricsReport};
use crate::netbuilder::{build_network, InputShape, Network};
use crate::patchseg::{balanced_training_set, mesh_patches, segment_patches, train_patch_classifier, PatchSet, PatchTrainConfig};
use crate::raster::{BinaryMask, GrayImage, ProbabilityMap};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Adam, AdamConfig, LossKind, Tensor};
use crate::train::{fit, patch_curves_csv, pixel_curves_csv, EpochStats, Samples, TrainConfig};

pub const PIXEL_CHECKPOINT: &str = "pixel.ckpt";
pub const PATCH_CHECKPOINT: &str = "patch.ckpt";
pub const PIXEL_CURVES: &str = "pixel_curves.csv";
pub const PATCH_CURVES: &str = "patch_curves.csv";
pub const MANIFEST: &str = "manifest.csv";

/// Pipeline stages that produce a mask per test image.
pub const STAGES: [&str; 4] = ["pixel", "crf", "patch", "fused"];

/// Patch cache file name for a split.
pub fn cache_name(split: Split) -> String {
    format!("patches_{split}.cache")
}

/// Seed of the patch classifier, kept apart from the pixel network's.
pub fn patch_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

fn check_size(samples: &[Sample], size: usize) -> Result<()> {
    match samples.iter().find(|s| s.image.dims() != (size, size)) {
        Some(s) => Err(invalid(format!(
            "{} is {}x{}, configured image_size is {size}",
            s.image_id,
            s.image.width(),
            s.image.height()
        ))),
        None => Ok(()),
    }
}

/// Inputs and targets as `[N, 1, H, W]` tensors.
pub fn to_samples(samples: &[Sample]) -> Result<Samples<f64>> {
    let first = samples.first().ok_or_else(|| invalid("no images"))?;
    let (w, h) = first.image.dims();
    let mut x = Vec::with_capacity(samples.len() * w * h);
    let mut y = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        x.extend_from_slice(s.image.data());
        y.extend(s.gt.to_values::<f64>());
    }
    let shape = [samples.len(), 1, h, w];
    Samples::new(Tensor::new(shape, x)?, Tensor::new(shape, y)?)
}

pub struct PixelTraining {
    pub network: Network<f64>,
    pub optimizer: Adam<f64>,
    pub history: Vec<EpochStats>,
}

/// Trains the configured architecture on the (augmented) training split with
/// binary cross-entropy; validation loss and accuracy are only logged.
pub fn train_pixel(
    manifest: &DatasetManifest,
    config: &Config,
    seed: u64,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<PixelTraining> {
    config.validate()?;
    let mut train = manifest.load_split(Split::Train)?;
    if train.is_empty() {
        return Err(invalid("manifest has no training images; run split first"));
    }
    check_size(&train, config.image_size)?;
    if config.augment {
        train = augment_images(&train)?;
    }
    let val = manifest.load_split(Split::Val)?;
    check_size(&val, config.image_size)?;
    let val = if val.is_empty() { None } else { Some(to_samples(&val)?) };
    let spec = build_network(
        config.arch,
        &config.widths.resolve(config.arch),
        InputShape::gray(config.image_size),
    )?;
    let mut network = Network::new(spec, seed)?;
    let mut optimizer = Adam::new(AdamConfig::with_lr(config.pixel_lr));
    let history = fit(
        &mut network,
        &mut optimizer,
        &to_samples(&train)?,
        val.as_ref(),
        LossKind::BinaryCrossEntropy,
        TrainConfig {
            epochs: config.pixel_epochs,
            batch_size: config.pixel_batch,
            seed,
        },
        on_epoch,
    )?;
    Ok(PixelTraining {
        network,
        optimizer,
        history,
    })
}

fn checkpoint_for(network: &Network<f64>, optimizer: &Adam<f64>, kind: &str, config: &Config, seed: u64) -> Checkpoint {
    let seed = seed.to_string();
    let size = config.image_size.to_string();
    let arch = config.arch.to_string();
    let mut meta = vec![("kind", kind), ("seed", seed.as_str()), ("image_size", size.as_str())];
    if kind == "pixel" {
        meta.push(("arch", arch.as_str()));
    }
    network.to_checkpoint(Some(optimizer), &meta)
}

/// Writes `pixel.ckpt` and `pixel_curves.csv` into `dir`.
pub fn save_pixel(dir: &Path, run: &PixelTraining, config: &Config, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint_for(&run.network, &run.optimizer, "pixel", config, seed).save(dir.join(PIXEL_CHECKPOINT))?;
    fs::write(dir.join(PIXEL_CURVES), pixel_curves_csv(&run.history))?;
    Ok(())
}

/// Loads a network checkpoint and checks its `kind` tag.
pub fn load_network(path: impl AsRef<Path>, kind: &str) -> Result<Network<f64>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "checkpoint not found".into(),
        });
    }
    let ckpt = Checkpoint::load(path)?;
    match ckpt.meta_value("kind") {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected a {kind} checkpoint, found {}", other.unwrap_or("an untagged one")),
            })
        }
    }
    Ok(Network::from_checkpoint(&ckpt)?.0)
}

/// Labeled patches of every image in a split, in manifest order.
pub fn split_patches(manifest: &DatasetManifest, split: Split, config: &Config) -> Result<PatchSet<f64>> {
    let mut set = PatchSet::empty(config.patch_size);
    for e in manifest.in_split(split) {
        let s = manifest.load(e)?;
        set.extend(mesh_patches(&s.image, Some(&s.gt), config.patch_size, config.criterion, &s.image_id)?)?;
    }
    set.criterion = Some(config.criterion);
    Ok(set)
}

/// Writes one cache file per split into `dir`.
pub fn write_patch_caches(manifest: &DatasetManifest, config: &Config, dir: &Path) -> Result<()> {
    for split in [Split::Train, Split::Val, Split::Test] {
        split_patches(manifest, split, config)?.save_cache(dir.join(cache_name(split)))?;
    }
    Ok(())
}

pub struct PatchTraining {
    pub network: Network<f64>,
    pub optimizer: Adam<f64>,
    pub history: Vec<EpochStats>,
    /// Class counts `(with, without)` of the balanced set.
    pub balanced_counts: (usize, usize),
}

/// Balances the labeled training patches and trains the classifier.
pub fn train_patch(
    train: &PatchSet<f64>,
    config: &Config,
    seed: u64,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<PatchTraining> {
    if train.size != config.patch_size {
        return Err(invalid(format!(
            "patch cache holds {0}x{0} patches, configured patch_size is {1}",
            train.size, config.patch_size
        )));
    }
    let balanced = balanced_training_set(train, seed)?;
    let counts = balanced.class_counts().expect("labeled");
    let trained = train_patch_classifier(
        &balanced,
        PatchTrainConfig {
            epochs: config.patch_epochs,
            lr: config.patch_lr,
            batch_size: config.patch_batch,
            seed,
        },
        on_epoch,
    )?;
    Ok(PatchTraining {
        network: trained.network,
        optimizer: trained.optimizer,
        history: trained.history,
        balanced_counts: counts,
    })
}

/// Writes `patch.ckpt` and `patch_curves.csv` into `dir`.
pub fn save_patch(dir: &Path, run: &PatchTraining, config: &Config, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let size = config.patch_size.to_string();
    let mut ckpt = checkpoint_for(&run.network, &run.optimizer, "patch", config, seed);
    ckpt.meta.push(("patch_size".into(), size));
    ckpt.save(dir.join(PATCH_CHECKPOINT))?;
    fs::write(dir.join(PATCH_CURVES), patch_curves_csv(&run.history))?;
    Ok(())
}

/// Pixel-network probability map of one image.
pub fn predict_probability(network: &Network<f64>, image: &GrayImage<f64>) -> Result<ProbabilityMap<f64>> {
    let (w, h) = image.dims();
    let y = network.predict(Tensor::new([1, 1, h, w], image.data().to_vec())?)?;
    ProbabilityMap::new(w, h, y.into_data().into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
}

/// CRF refinement of the pixel-level result.
pub fn crf_refine(image: &GrayImage<f64>, prob: &ProbabilityMap<f64>, pixel_mask: &BinaryMask, config: &Config) -> Result<BinaryMask> {
    let unary = match config.crf_input {
        CrfInput::Binary => unary_from_mask(pixel_mask, config.confidence)?,
        CrfInput::Soft => unary_from_probabilities(prob, UNARY_EPS),
    };
    let q = mean_field_infer(&unary, &PixelFeatures::from_gray(image), &config.crf)?;
    Ok(map_mask(&q))
}

/// Every mask produced for one test image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub class: String,
    pub probability: ProbabilityMap<f64>,
    pub pixel: BinaryMask,
    pub crf: BinaryMask,
    pub patch: BinaryMask,
    pub filtered_patch: BinaryMask,
    pub fused: BinaryMask,
}

impl ImageResult {
    pub fn stage(&self, name: &str) -> Option<&BinaryMask> {
        match name {
            "pixel" => Some(&self.pixel),
            "crf" => Some(&self.crf),
            "patch" => Some(&self.patch),
            "fused" => Some(&self.fused),
            _ => None,
        }
    }
}

/// prob, binarize, CRF, patch classification, buffer gating and union for one
/// image.
pub fn process_image(sample: &Sample, pixel_net: &Network<f64>, patch_net: &Network<f64>, config: &Config) -> Result<ImageResult> {
    let probability = predict_probability(pixel_net, &sample.image)?;
    let pixel = binarize(&probability, config.threshold)?;
    let crf = crf_refine(&sample.image, &probability, &pixel, config)?;
    let patch = segment_patches(patch_net, &sample.image, config.patch_size)?;
    let filtered_patch = buffer_filter(&patch, &crf, config.radius)?;
    let fused = combine(&crf, &filtered_patch)?;
    Ok(ImageResult {
        image_id: sample.image_id.clone(),
        class: sample.class.clone(),
        probability,
        pixel,
        crf,
        patch,
        filtered_patch,
        fused,
    })
}

/// Where per-image artifacts of `entry` live under an output directory.
pub fn mask_path(out: &Path, entry: &ManifestEntry, stage: &str) -> PathBuf {
    out.join("masks").join(&entry.class).join(format!("{}_{stage}.pgm", entry.stem))
}

pub fn probability_path(out: &Path, entry: &ManifestEntry) -> PathBuf {
    out.join("masks").join(&entry.class).join(format!("{}_prob.pgm", entry.stem))
}

pub fn overlay_path(out: &Path, entry: &ManifestEntry) -> PathBuf {
    out.join("overlays").join(&entry.class).join(format!("{}.png", entry.stem))
}

pub struct InferenceReport {
    pub results: Vec<ImageResult>,
    /// One report per entry of [`STAGES`].
    pub stages: Vec<(String, MetricsReport)>,
    /// Fused metrics per radius, averaged over the test images.
    pub sweep: Vec<SweepRow>,
    pub selected_radius: usize,
}

impl InferenceReport {
    pub fn overall(&self, stage: &str) -> Option<Metrics> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, r)| r.overall)
    }

    /// `stage,dice,jaccard,recall,accuracy,voe`
    pub fn summary_csv(&self) -> String {
        let mut out = format!("stage,{}\n", Metrics::HEADER);
        for (s, r) in &self.stages {
            out.push_str(&format!("{s},{}\n", r.overall.csv_fields()));
        }
        out
    }
}

fn write_stage_reports(dir: &Path, stage: &str, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stage}_per_image.csv")), report.per_image_csv())?;
    fs::write(dir.join(format!("{stage}_per_class.csv")), report.per_class_csv())?;
    fs::write(dir.join(format!("{stage}_overall.csv")), report.overall_csv())?;
    Ok(())
}

/// Runs every test image through the full chain (in parallel, results in
/// manifest order) and writes masks, overlays, metric tables and the buffer
/// sweep under `out`.
pub fn infer_and_fuse(
    manifest: &DatasetManifest,
    pixel_net: &Network<f64>,
    patch_net: &Network<f64>,
    config: &Config,
    out: &Path,
) -> Result<InferenceReport> {
    config.validate()?;
    let entries = manifest.in_split(Split::Test);
    if entries.is_empty() {
        return Err(invalid("manifest has no test images"));
    }
    let palette = OverlayPalette::default();
    let per_image: Vec<(ImageResult, Vec<SweepRow>)> = entries
        .par_iter()
        .map(|e| {
            let s = manifest.load(e)?;
            check_size(std::slice::from_ref(&s), config.image_size)?;
            let r = process_image(&s, pixel_net, patch_net, config)?;
            write_plane16(probability_path(out, e), &r.probability)?;
            for stage in STAGES {
                write_mask(mask_path(out, e, stage), r.stage(stage).expect("known stage"))?;
            }
            let overlay = render_overlay(&s.image, &r.crf, &r.filtered_patch, Some(&s.gt), &palette)?;
            write_png_rgb(overlay_path(out, e), &overlay)?;
            let sweep = sweep_buffer(&r.patch, &r.crf, &s.gt, &config.radii)?;
            Ok((r, sweep))
        })
        .collect::<Result<_>>()?;
    let gts: Vec<BinaryMask> = entries.iter().map(|e| read_mask(manifest.resolve(&e.gt))).collect::<Result<_>>()?;
    let class_of = |id: &str| manifest.class_of(id);
    let mut stages = Vec::new();
    for stage in STAGES {
        let rows = per_image
            .iter()
            .zip(&gts)
            .map(|((r, _), gt)| {
                Ok(ImageMetrics {
                    image_id: r.image_id.clone(),
                    metrics: score(r.stage(stage).expect("known stage"), gt)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = aggregate(&rows, class_of)?;
        write_stage_reports(&out.join("metrics"), stage, &report)?;
        stages.push((stage.to_string(), report));
    }
    let sweeps: Vec<Vec<SweepRow>> = per_image.iter().map(|(_, s)| s.clone()).collect();
    let sweep = mean_sweep(&sweeps)?;
    let selected_radius = select_buffer(&sweep)?;
    fs::write(out.join("sweep.csv"), sweep_csv(&sweep))?;
    fs::write(out.join("buffer.csv"), format!("selected_radius\n{selected_radius}\n"))?;
    let report = InferenceReport {
        results: per_image.into_iter().map(|(r, _)| r).collect(),
        stages,
        sweep,
        selected_radius,
    };
    fs::write(out.join("metrics").join("summary.csv"), report.summary_csv())?;
    Ok(report)
}

/// Scores the `stage` masks stored under `pred_dir` against the test split.
pub fn evaluate_dir(manifest: &DatasetManifest, pred_dir: &Path, stage: &str) -> Result<MetricsReport> {
    let entries = manifest.in_split(Split::Test);
    if entries.is_empty() {
        return Err(invalid("manifest has no test images"));
    }
    let rows = entries
        .par_iter()
        .map(|e| {
            let pred = read_mask(mask_path(pred_dir, e, stage))?;
            let gt = read_mask(manifest.resolve(&e.gt))?;
            Ok(ImageMetrics {
                image_id: e.image_id(),
                metrics: score(&pred, &gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&rows, |id| manifest.class_of(id))
}

/// Buffer sweep over stored CRF and patch masks of the test split.
pub fn sweep_dir(manifest: &DatasetManifest, pred_dir: &Path, radii: &[usize]) -> Result<(Vec<SweepRow>, usize)> {
    let entries = manifest.in_split(Split::Test);
    let sweeps = entries
        .par_iter()
        .map(|e| {
            let crf = read_mask(mask_path(pred_dir, e, "crf"))?;
            let patch = read_mask(mask_path(pred_dir, e, "patch"))?;
            let gt = read_mask(manifest.resolve(&e.gt))?;
            sweep_buffer(&patch, &crf, &gt, radii)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_sweep(&sweeps)?;
    let radius = select_buffer(&mean)?;
    Ok((mean, radius))
}

/// Writes the eight-fold augmented training pairs under `out` with their own
/// manifest (all marked as training data).
pub fn write_augmented(manifest: &DatasetManifest, out: &Path) -> Result<DatasetManifest> {
    let train = manifest.load_split(Split::Train)?;
    let mut entries = Vec::new();
    for s in augment_images(&train)? {
        let (id, k) = s.image_id.rsplit_once("#d").expect("augmented id");
        let (class, stem) = id.split_once('/').expect("class/stem id");
        let stem = format!("{stem}_d{k}");
        let image = PathBuf::from("data").join(class).join(format!("{stem}.pgm"));
        let gt = PathBuf::from("data").join(class).join(format!("{stem}_gt.pgm"));
        write_plane16(out.join(&image), &s.image)?;
        write_mask(out.join(&gt), &s.gt)?;
        entries.push(ManifestEntry {
            class: class.to_string(),
            stem,
            image,
            gt,
            split: Some(Split::Train),
        });
    }
    let m = DatasetManifest {
        root: out.to_path_buf(),
        entries,
        seed: manifest.seed,
    };
    m.write(out.join(MANIFEST))?;
    Ok(m)
}

/// Progress events of [`run_pipeline`].
#[derive(Clone, Copy, Debug)]
pub enum Progress<'a> {
    Stage(&'a str),
    PixelEpoch(&'a EpochStats),
    PatchEpoch(&'a EpochStats),
}

pub struct RunOutcome {
    pub manifest: DatasetManifest,
    pub pixel_history: Vec<EpochStats>,
    pub patch_history: Vec<EpochStats>,
    pub report: InferenceReport,
}

/// Ingest, split, train both networks, then infer and fuse; every artifact
/// lands under `work`.
pub fn run_pipeline(
    raw_root: &Path,
    work: &Path,
    config: &Config,
    seed: u64,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<RunOutcome> {
    config.validate()?;
    progress(Progress::Stage("ingest"));
    let manifest = ingest(raw_root, work, config.image_size)?;
    progress(Progress::Stage("split"));
    let manifest = split_1_1_2(&manifest, seed)?;
    manifest.write(work.join(MANIFEST))?;
    progress(Progress::Stage("train-pixel"));
    let pixel = train_pixel(&manifest, config, seed, |s| progress(Progress::PixelEpoch(s)))?;
    save_pixel(work, &pixel, config, seed)?;
    progress(Progress::Stage("train-patch"));
    write_patch_caches(&manifest, config, work)?;
    let patches = PatchSet::load_cache(work.join(cache_name(Split::Train)))?;
    let patch = train_patch(&patches, config, patch_seed(seed), |s| progress(Progress::PatchEpoch(s)))?;
    save_patch(work, &patch, config, patch_seed(seed))?;
    progress(Progress::Stage("infer"));
    let report = infer_and_fuse(&manifest, &pixel.network, &patch.network, config, work)?;
    Ok(RunOutcome {
        manifest,
        pixel_history: pixel.history,
        patch_history: patch.history,
        report,
    })
}
