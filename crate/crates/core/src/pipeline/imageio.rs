//! PNG/PGM reading and writing, grayscale conversion and resizing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::imageops::{self, FilterType};
use image::{DynamicImage, ExtendedColorType, ImageBuffer, ImageEncoder, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage, ProbabilityMap};

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| format_err(path, e.to_string()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Luminance `0.299 R + 0.587 G + 0.114 B` in [0, 1], row-major.
pub fn luminance(img: &DynamicImage) -> Vec<f32> {
    img.to_rgb32f()
        .pixels()
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect()
}

/// Any supported image as grayscale at its native size.
pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage<f64>> {
    let path = path.as_ref();
    let img = open(path)?;
    let lum = luminance(&img);
    GrayImage::new(
        img.width() as usize,
        img.height() as usize,
        lum.into_iter().map(f64::from).collect(),
    )
}

/// A probability map stored as 8- or 16-bit gray, scaled by the full range.
pub fn read_probability(path: impl AsRef<Path>) -> Result<ProbabilityMap<f64>> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        _ => return Err(format_err(path, "probability maps must be single-channel gray")),
    };
    ProbabilityMap::new(w, h, data)
}

/// An 8-bit mask holding only 0/255 (or 0/1).
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => {
            BinaryMask::from_levels(w, h, b.as_raw()).map_err(|e| format_err(path, e.to_string()))
        }
        _ => Err(format_err(path, "masks must be 8-bit single-channel gray")),
    }
}

/// Any image thresholded at half luminance.
pub fn read_mask_lenient(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = open(path)?;
    let lum = luminance(&img);
    BinaryMask::new(
        img.width() as usize,
        img.height() as usize,
        lum.iter().map(|&v| v >= 0.5).collect(),
    )
}

fn write_pgm(path: &Path, w: usize, h: usize, maxval: u16, samples: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut file = BufWriter::new(File::create(path)?);
    write!(file, "P5\n{w} {h}\n{maxval}\n")?;
    file.write_all(samples)?;
    file.flush()?;
    Ok(())
}

/// Binary 8-bit PGM.
pub fn write_pgm8(path: impl AsRef<Path>, w: usize, h: usize, levels: &[u8]) -> Result<()> {
    check_len(path.as_ref(), w, h, levels.len())?;
    write_pgm(path.as_ref(), w, h, 255, levels)
}

/// Binary 16-bit PGM, samples big-endian.
pub fn write_pgm16(path: impl AsRef<Path>, w: usize, h: usize, levels: &[u16]) -> Result<()> {
    check_len(path.as_ref(), w, h, levels.len())?;
    let bytes: Vec<u8> = levels.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_pgm(path.as_ref(), w, h, 65535, &bytes)
}

fn check_len(path: &Path, w: usize, h: usize, n: usize) -> Result<()> {
    if n != w * h {
        return Err(format_err(path, format!("{n} samples for {w}x{h}")));
    }
    Ok(())
}

/// Mask as 0/255 PGM.
pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    write_pgm8(path, mask.width(), mask.height(), &mask.to_levels())
}

/// Plane as 16-bit PGM, `round(65535 v)`.
pub fn write_plane16(path: impl AsRef<Path>, plane: &GrayImage<f64>) -> Result<()> {
    write_pgm16(path, plane.width(), plane.height(), &plane.to_u16())
}

fn write_png(path: &Path, w: usize, h: usize, bytes: &[u8], color: ExtendedColorType) -> Result<()> {
    ensure_parent(path)?;
    let file = BufWriter::new(File::create(path)?);
    PngEncoder::new(file)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn write_png_gray(path: impl AsRef<Path>, w: usize, h: usize, levels: &[u8]) -> Result<()> {
    write_png(path.as_ref(), w, h, levels, ExtendedColorType::L8)
}

pub fn write_png_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    write_png(
        path.as_ref(),
        img.width() as usize,
        img.height() as usize,
        img.as_raw(),
        ExtendedColorType::Rgb8,
    )
}

type LumaF32 = ImageBuffer<Luma<f32>, Vec<f32>>;

fn to_buffer(w: usize, h: usize, data: Vec<f32>) -> LumaF32 {
    ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dims")
}

/// Bilinear (triangle filter) resize of a grayscale plane.
pub fn resize_bilinear(img: &GrayImage<f64>, width: usize, height: usize) -> Result<GrayImage<f64>> {
    if img.dims() == (width, height) {
        return Ok(img.clone());
    }
    let buf = to_buffer(img.width(), img.height(), img.data().iter().map(|&v| v as f32).collect());
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    GrayImage::new(
        width,
        height,
        out.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect(),
    )
}

/// Nearest-neighbor resize; the result stays binary.
pub fn resize_nearest(mask: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    if mask.dims() == (width, height) {
        return mask.clone();
    }
    let buf = to_buffer(mask.width(), mask.height(), mask.to_values());
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Nearest);
    BinaryMask::new(width, height, out.into_raw().into_iter().map(|v| v >= 0.5).collect()).expect("resized dims")
}
