use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mscc::densecrf::{energy, map_labeling, map_mask, mean_field_infer_with, unary_from_mask, unary_from_probabilities, PixelFeatures, UNARY_EPS};
use mscc::fusion::{buffer_filter, combine, render_overlay, select_buffer, sweep_buffer, sweep_csv, OverlayPalette};
use mscc::metrics::{score, Metrics};
use mscc::netbuilder::{build_network, count_parameters, Architecture, InputShape, NetworkSpec};
use mscc::patchseg::PatchSet;
use mscc::pipeline::imageio::{read_gray, read_mask, read_probability, write_mask, write_png_rgb};
use mscc::pipeline::{self as pl, Config, DatasetManifest, Progress, Split, SynthConfig, Widths};
use mscc::train::EpochStats;

#[derive(Parser)]
#[command(name = "mscc", version, about = "Multiscale CNN-CRF segmentation pipeline")]
struct Cli {
    /// `key = value` configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; falls back to the config file, then MSCC_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a `<class>/{images,gt}` dataset tree and write a manifest.
    Ingest {
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Generate a synthetic dataset tree.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Assign train/val/test per class in a 1:1:2 ratio.
    Split {
        manifest: PathBuf,
        /// Output manifest; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the eight dihedral variants of every training pair.
    Augment {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pixel-level network.
    TrainPixel {
        manifest: PathBuf,
        #[arg(long)]
        arch: Option<Architecture>,
        #[arg(long)]
        widths: Option<Widths>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the patch classifier, building per-split patch caches unless
    /// one is given.
    TrainPatch {
        manifest: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a probability map or mask with the dense CRF.
    Crf(CrfArgs),
    /// Gate a patch mask by a buffer around a pixel mask and take the union.
    Fuse {
        #[arg(long)]
        pixel: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        /// Grayscale source image, needed for --overlay.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        radius: Option<usize>,
        /// Fused mask.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "image")]
        overlay: Option<PathBuf>,
        /// Radius sweep CSV; needs --gt.
        #[arg(long, requires = "gt")]
        sweep: Option<PathBuf>,
    },
    /// Run the full chain on the test split with trained checkpoints.
    Infer {
        manifest: PathBuf,
        #[arg(long)]
        pixel_ckpt: PathBuf,
        #[arg(long)]
        patch_ckpt: PathBuf,
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score stored masks against ground truth.
    Evaluate {
        manifest: Option<PathBuf>,
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long, default_value = "fused")]
        stage: String,
        /// Single predicted mask (with --gt) instead of a manifest.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Directory for the CSV tables; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep buffer radii over stored CRF and patch masks of the test split.
    SweepBuffer {
        manifest: PathBuf,
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw the pixel/patch/ground-truth overlay.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pixel: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter counts of a network.
    Params {
        #[arg(long, conflicts_with = "spec")]
        arch: Option<Architecture>,
        #[arg(long)]
        widths: Option<Widths>,
        #[arg(long)]
        size: Option<usize>,
        /// Network spec text file.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Also write the spec text to this file.
        #[arg(long)]
        emit_spec: Option<PathBuf>,
    },
    /// ingest, split, train-pixel, train-patch and infer in one go.
    Run {
        /// Dataset tree; a synthetic one is generated when absent.
        #[arg(long)]
        raw: Option<PathBuf>,
        #[arg(long)]
        work: PathBuf,
    },
}

#[derive(Args)]
struct CrfArgs {
    /// Grayscale source image.
    #[arg(long)]
    image: PathBuf,
    /// Probability map (16-bit PGM).
    #[arg(long, conflicts_with = "mask", required_unless_present = "mask")]
    prob: Option<PathBuf>,
    /// Binary mask (8-bit PGM).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Appearance kernel weight.
    #[arg(long)]
    w1: Option<f64>,
    /// Smoothness kernel weight.
    #[arg(long)]
    w2: Option<f64>,
    /// Appearance kernel spatial scale, pixels.
    #[arg(long)]
    sa: Option<f64>,
    /// Appearance kernel intensity scale, [0, 1] units.
    #[arg(long)]
    sb: Option<f64>,
    /// Smoothness kernel spatial scale, pixels.
    #[arg(long)]
    sg: Option<f64>,
    /// Mean-field iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Label confidence for mask input.
    #[arg(long)]
    confidence: Option<f64>,
    /// Per-iteration energy of the MAP labeling.
    #[arg(long)]
    energy_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn log_epoch(label: &str, s: &EpochStats) {
    let val = match (s.val_loss, s.val_acc) {
        (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
        _ => String::new(),
    };
    eprintln!("{label} epoch {:>3}: loss {:.4} acc {:.4}{val}", s.epoch, s.train_loss, s.train_acc);
}

fn write_or_print(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = load_config(cli.config.as_deref())?;
    let seed = config.resolve_seed(cli.seed)?;
    match cli.command {
        Command::Ingest { root, out, size } => {
            if let Some(s) = size {
                config.image_size = s;
            }
            config.validate()?;
            let m = pl::ingest(&root, &out, config.image_size)?;
            eprintln!("ingested {} pairs into {}", m.len(), out.display());
        }
        Command::Synth {
            out,
            classes,
            per_class,
            size,
        } => {
            let cfg = SynthConfig {
                classes,
                per_class,
                size,
                seed,
                ..SynthConfig::default()
            };
            let pairs = pl::synth_dataset(&out, &cfg)?;
            eprintln!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::Split { manifest, out } => {
            let m = DatasetManifest::read(&manifest)?;
            let s = pl::split_1_1_2(&m, seed)?;
            let dest = out.unwrap_or(manifest);
            s.write(&dest)?;
            let n = |sp| s.in_split(sp).len();
            eprintln!(
                "train {} / val {} / test {} -> {}",
                n(Split::Train),
                n(Split::Val),
                n(Split::Test),
                dest.display()
            );
        }
        Command::Augment { manifest, out } => {
            let m = DatasetManifest::read(&manifest)?;
            let a = pl::write_augmented(&m, &out)?;
            eprintln!("wrote {} augmented training pairs to {}", a.len(), out.display());
        }
        Command::TrainPixel {
            manifest,
            arch,
            widths,
            epochs,
            out,
        } => {
            if let Some(a) = arch {
                config.arch = a;
            }
            if let Some(w) = widths {
                config.widths = w;
            }
            if let Some(e) = epochs {
                config.pixel_epochs = e;
            }
            let m = DatasetManifest::read(&manifest)?;
            let run = pl::train_pixel(&m, &config, seed, |s| log_epoch("pixel", s))?;
            pl::save_pixel(&out, &run, &config, seed)?;
        }
        Command::TrainPatch {
            manifest,
            cache,
            epochs,
            out,
        } => {
            if let Some(e) = epochs {
                config.patch_epochs = e;
            }
            let cache = match (cache, manifest) {
                (Some(c), _) => c,
                (None, Some(m)) => {
                    let m = DatasetManifest::read(&m)?;
                    pl::write_patch_caches(&m, &config, &out)?;
                    out.join(pl::cache_name(Split::Train))
                }
                (None, None) => bail!("train-patch needs a manifest or --cache"),
            };
            let set = PatchSet::<f64>::load_cache(&cache)?;
            let s = pl::patch_seed(seed);
            let run = pl::train_patch(&set, &config, s, |e| log_epoch("patch", e))?;
            eprintln!("balanced set: {} with object, {} without", run.balanced_counts.0, run.balanced_counts.1);
            pl::save_patch(&out, &run, &config, s)?;
        }
        Command::Crf(a) => crf(a, &mut config)?,
        Command::Fuse {
            pixel,
            patch,
            image,
            gt,
            radius,
            out,
            overlay,
            sweep,
        } => {
            let px = read_mask(&pixel)?;
            let pt = read_mask(&patch)?;
            let gt = gt.map(read_mask).transpose()?;
            let filtered = buffer_filter(&pt, &px, radius.unwrap_or(config.radius))?;
            write_mask(&out, &combine(&px, &filtered)?)?;
            if let (Some(path), Some(img)) = (overlay, image) {
                let o = render_overlay(&read_gray(&img)?, &px, &filtered, gt.as_ref(), &OverlayPalette::default())?;
                write_png_rgb(&path, &o)?;
            }
            if let (Some(path), Some(gt)) = (sweep, gt.as_ref()) {
                let rows = sweep_buffer(&pt, &px, gt, &config.radii)?;
                fs::write(&path, sweep_csv(&rows))?;
                eprintln!("selected radius {}", select_buffer(&rows)?);
            }
        }
        Command::Infer {
            manifest,
            pixel_ckpt,
            patch_ckpt,
            radius,
            out,
        } => {
            if let Some(r) = radius {
                config.radius = r;
            }
            let m = DatasetManifest::read(&manifest)?;
            let pixel = pl::load_network(&pixel_ckpt, "pixel")?;
            let patch = pl::load_network(&patch_ckpt, "patch")?;
            let report = pl::infer_and_fuse(&m, &pixel, &patch, &config, &out)?;
            print!("{}", report.summary_csv());
            eprintln!("selected buffer radius {}", report.selected_radius);
        }
        Command::Evaluate {
            manifest,
            pred_dir,
            stage,
            pred,
            gt,
            out,
        } => match (pred, gt, manifest, pred_dir) {
            (Some(p), Some(g), _, _) => {
                let m = score(&read_mask(&p)?, &read_mask(&g)?)?;
                let text = format!("{}\n{}\n", Metrics::HEADER, m.csv_fields());
                write_or_print(out.as_deref(), "metrics.csv", &text)?;
            }
            (None, None, Some(m), Some(d)) => {
                if !pl::STAGES.contains(&stage.as_str()) {
                    bail!("unknown stage `{stage}` (expected one of {:?})", pl::STAGES);
                }
                let m = DatasetManifest::read(&m)?;
                let r = pl::evaluate_dir(&m, &d, &stage)?;
                match out.as_deref() {
                    Some(dir) => {
                        fs::create_dir_all(dir)?;
                        fs::write(dir.join(format!("{stage}_per_image.csv")), r.per_image_csv())?;
                        fs::write(dir.join(format!("{stage}_per_class.csv")), r.per_class_csv())?;
                        fs::write(dir.join(format!("{stage}_overall.csv")), r.overall_csv())?;
                    }
                    None => print!("{}", r.overall_csv()),
                }
            }
            _ => bail!("evaluate needs either --pred and --gt, or a manifest and --pred-dir"),
        },
        Command::SweepBuffer { manifest, pred_dir, out } => {
            let m = DatasetManifest::read(&manifest)?;
            let (rows, r) = pl::sweep_dir(&m, &pred_dir, &config.radii)?;
            match out {
                Some(p) => fs::write(p, sweep_csv(&rows))?,
                None => print!("{}", sweep_csv(&rows)),
            }
            eprintln!("selected radius {r}");
        }
        Command::Render {
            image,
            pixel,
            patch,
            gt,
            out,
        } => {
            let img = read_gray(&image)?;
            let gt = gt.map(read_mask).transpose()?;
            let o = render_overlay(&img, &read_mask(&pixel)?, &read_mask(&patch)?, gt.as_ref(), &OverlayPalette::default())?;
            write_png_rgb(&out, &o)?;
        }
        Command::Params {
            arch,
            widths,
            size,
            spec,
            emit_spec,
        } => {
            let spec = match spec {
                Some(p) => NetworkSpec::from_text(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => {
                    let arch = arch.unwrap_or(config.arch);
                    let widths = widths.unwrap_or(config.widths.clone());
                    build_network(arch, &widths.resolve(arch), InputShape::gray(size.unwrap_or(config.image_size)))?
                }
            };
            if let Some(p) = emit_spec {
                fs::write(p, spec.to_text())?;
            }
            let count = count_parameters(&spec)?;
            print!("{}", count.to_csv());
            eprintln!(
                "trainable {} / non-trainable {} / total {}",
                count.trainable,
                count.non_trainable,
                count.total()
            );
        }
        Command::Run { raw, work } => {
            let raw = match raw {
                Some(r) => r,
                None => {
                    let r = work.join("raw");
                    let cfg = SynthConfig {
                        size: config.image_size,
                        seed,
                        ..SynthConfig::default()
                    };
                    pl::synth_dataset(&r, &cfg)?;
                    r
                }
            };
            fs::create_dir_all(&work)?;
            fs::write(work.join("config.txt"), config.to_text())?;
            let out = pl::run_pipeline(&raw, &work, &config, seed, |p| match p {
                Progress::Stage(s) => eprintln!("== {s}"),
                Progress::PixelEpoch(s) => log_epoch("pixel", s),
                Progress::PatchEpoch(s) => log_epoch("patch", s),
            })?;
            print!("{}", out.report.summary_csv());
            eprintln!("selected buffer radius {}", out.report.selected_radius);
        }
    }
    Ok(())
}

fn crf(a: CrfArgs, config: &mut Config) -> Result<()> {
    let p = &mut config.crf;
    let sets = [
        (a.w1, &mut p.w1),
        (a.w2, &mut p.w2),
        (a.sa, &mut p.sigma_alpha),
        (a.sb, &mut p.sigma_beta),
        (a.sg, &mut p.sigma_gamma),
    ];
    for (flag, slot) in sets {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(t) = a.iters {
        p.num_iterations = t;
    }
    if let Some(c) = a.confidence {
        config.confidence = c;
    }
    config.crf.validate()?;
    let image = read_gray(&a.image)?;
    let unary = match (&a.prob, &a.mask) {
        (Some(pr), _) => unary_from_probabilities(&read_probability(pr)?, UNARY_EPS),
        (None, Some(m)) => unary_from_mask(&read_mask(m)?, config.confidence)?,
        (None, None) => bail!("crf needs --prob or --mask"),
    };
    if unary.dims() != image.dims() {
        bail!("input map and image sizes differ");
    }
    let feats = PixelFeatures::from_gray(&image);
    let mut energies = Vec::new();
    let track = a.energy_csv.is_some();
    let q = mean_field_infer_with(&unary, &feats, &config.crf, |t, q| {
        if track {
            energies.push((t, energy(&map_labeling(q), &unary, &feats, &config.crf)));
        }
    })?;
    write_mask(&a.out, &map_mask(&q))?;
    if let Some(path) = a.energy_csv {
        let mut text = String::from("iteration,energy\n");
        for (t, e) in energies {
            text.push_str(&format!("{t},{:.6}\n", e?));
        }
        fs::write(path, text)?;
    }
    Ok(())
}
