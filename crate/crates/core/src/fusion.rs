//! Binarization, dilation buffers and the union of pixel-level and
//! buffer-gated patch-level masks.

use image::{Rgb, RgbImage};

use crate::error::{invalid, shape_err, Result};
use crate::metrics::{score, Metrics};
use crate::raster::{BinaryMask, GrayImage, ProbabilityMap};
use crate::scalar::Real;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RADIUS: usize = 26;

/// Sweep grid 2, 4, ..., 40.
pub fn default_radii() -> Vec<usize> {
    (2..=40).step_by(2).collect()
}

/// Foreground iff `p >= threshold`.
pub fn binarize<T: Real>(prob: &ProbabilityMap<T>, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let t = T::lit(threshold);
    BinaryMask::new(prob.width(), prob.height(), prob.data().iter().map(|&p| p >= t).collect())
}

/// One axis of a square max filter using a running count of foreground
/// pixels in the window.
fn dilate_lines(src: &[bool], dst: &mut [bool], len: usize, lines: usize, stride: usize, step: usize, r: usize) {
    for line in 0..lines {
        let at = |k: usize| line * stride + k * step;
        let mut prefix = vec![0usize; len + 1];
        for k in 0..len {
            prefix[k + 1] = prefix[k] + src[at(k)] as usize;
        }
        for k in 0..len {
            let lo = k.saturating_sub(r);
            let hi = (k + r + 1).min(len);
            dst[at(k)] = prefix[hi] > prefix[lo];
        }
    }
}

/// Square (Chebyshev) dilation: a pixel is set iff some foreground pixel
/// lies within `radius` along both axes.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let mut rows = vec![false; w * h];
    dilate_lines(mask.data(), &mut rows, w, h, w, 1, radius);
    let mut out = vec![false; w * h];
    dilate_lines(&rows, &mut out, h, w, 1, w, radius);
    BinaryMask::new(w, h, out).expect("same dims")
}

/// Keeps the part of `patch_mask` inside the dilated pixel mask.
pub fn buffer_filter(patch_mask: &BinaryMask, pixel_mask: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    patch_mask.check_same(pixel_mask, "buffer_filter")?;
    patch_mask.zip_with(&dilate(pixel_mask, radius), "buffer_filter", |a, b| a && b)
}

/// Pixelwise OR.
pub fn combine(pixel_mask: &BinaryMask, filtered_patch_mask: &BinaryMask) -> Result<BinaryMask> {
    pixel_mask.zip_with(filtered_patch_mask, "combine", |a, b| a || b)
}

/// `combine(pixel, buffer_filter(patch, pixel, radius))`.
pub fn fuse(pixel_mask: &BinaryMask, patch_mask: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    combine(pixel_mask, &buffer_filter(patch_mask, pixel_mask, radius)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub radius: usize,
    pub metrics: Metrics,
    /// Area of the buffer-filtered patch mask.
    pub filtered_area: usize,
}

pub fn sweep_buffer(
    patch_mask: &BinaryMask,
    pixel_mask: &BinaryMask,
    gt: &BinaryMask,
    radii: &[usize],
) -> Result<Vec<SweepRow>> {
    gt.check_same(pixel_mask, "sweep_buffer")?;
    radii
        .iter()
        .map(|&radius| {
            let filtered = buffer_filter(patch_mask, pixel_mask, radius)?;
            let fused = combine(pixel_mask, &filtered)?;
            Ok(SweepRow {
                radius,
                metrics: score(&fused, gt)?,
                filtered_area: filtered.area(),
            })
        })
        .collect()
}

/// Element-wise mean of several sweeps over the same radius grid.
pub fn mean_sweep(sweeps: &[Vec<SweepRow>]) -> Result<Vec<SweepRow>> {
    let first = sweeps.first().ok_or_else(|| invalid("no sweeps to average"))?;
    let n = sweeps.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (k, row) in first.iter().enumerate() {
        let mut sum = [0.0; 5];
        let mut area = 0;
        for s in sweeps {
            let r = s
                .get(k)
                .filter(|r| r.radius == row.radius)
                .ok_or_else(|| shape_err("mean_sweep", "sweeps use different radius grids"))?;
            for (acc, v) in sum.iter_mut().zip(r.metrics.values()) {
                *acc += v;
            }
            area += r.filtered_area;
        }
        let m = sum.map(|s| s / n);
        out.push(SweepRow {
            radius: row.radius,
            metrics: Metrics {
                dice: m[0],
                jaccard: m[1],
                recall: m[2],
                accuracy: m[3],
                voe: m[4],
            },
            filtered_area: area,
        });
    }
    Ok(out)
}

/// `radius,dice,jaccard,recall,accuracy,voe`
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("radius,{}\n", Metrics::HEADER);
    for r in rows {
        out.push_str(&format!("{},{}\n", r.radius, r.metrics.csv_fields()));
    }
    out
}

/// First grid radius where `recall - accuracy` changes sign relative to the
/// previous grid point (or is exactly zero). Without a crossing, the radius
/// minimizing `|recall - accuracy|`, smallest on ties.
pub fn select_buffer(rows: &[SweepRow]) -> Result<usize> {
    if rows.is_empty() {
        return Err(invalid("empty sweep table"));
    }
    let gap = |r: &SweepRow| r.metrics.recall - r.metrics.accuracy;
    let sign = |d: f64| d.partial_cmp(&0.0);
    for (k, row) in rows.iter().enumerate() {
        let d = gap(row);
        if d == 0.0 || (k > 0 && sign(d) != sign(gap(&rows[k - 1]))) {
            return Ok(row.radius);
        }
    }
    let mut best = &rows[0];
    for row in &rows[1..] {
        if gap(row).abs() < gap(best).abs() {
            best = row;
        }
    }
    Ok(best.radius)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlayPalette {
    pub pixel_only: [u8; 3],
    pub patch_only: [u8; 3],
    pub overlap: [u8; 3],
    pub gt_outline: [u8; 3],
}

impl Default for OverlayPalette {
    fn default() -> Self {
        Self {
            pixel_only: [255, 0, 0],
            patch_only: [0, 255, 0],
            overlap: [255, 255, 0],
            gt_outline: [128, 0, 128],
        }
    }
}

/// Foreground pixels with a 4-neighbor outside the mask; pixels beyond the
/// image edge count as background.
pub fn outline(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && (x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1))
    })
}

/// Grayscale promoted to RGB, mask colors blended at 0.5, ground-truth
/// outline drawn opaque on top.
pub fn render_overlay<T: Real>(
    original: &GrayImage<T>,
    pixel_mask: &BinaryMask,
    patch_mask: &BinaryMask,
    gt: Option<&BinaryMask>,
    palette: &OverlayPalette,
) -> Result<RgbImage> {
    let (w, h) = original.dims();
    pixel_mask.check_same(patch_mask, "render_overlay")?;
    if pixel_mask.dims() != (w, h) {
        return Err(shape_err("render_overlay", "masks do not match the image"));
    }
    let edge = match gt {
        Some(g) => {
            g.check_same(pixel_mask, "render_overlay")?;
            Some(outline(g))
        }
        None => None,
    };
    let gray = original.to_u8();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = gray[y * w + x];
            let paint = match (pixel_mask.get(x, y), patch_mask.get(x, y)) {
                (true, true) => Some(palette.overlap),
                (true, false) => Some(palette.pixel_only),
                (false, true) => Some(palette.patch_only),
                (false, false) => None,
            };
            let mut px = match paint {
                Some(c) => c.map(|v| (g as u16 + v as u16).div_ceil(2) as u8),
                None => [g; 3],
            };
            if edge.as_ref().is_some_and(|e| e.get(x, y)) {
                px = palette.gt_outline;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(w: usize, h: usize, x0: usize, y0: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x, y) == (x0, y0))
    }

    #[test]
    fn binarize_boundary() {
        let p = ProbabilityMap::new(3, 1, vec![0.7, 0.5, 0.4999]).unwrap();
        let m = binarize(&p, 0.5).unwrap();
        assert_eq!(m.data(), &[true, true, false]);
        let again = binarize(&ProbabilityMap::<f64>::from_mask(&m), 0.5).unwrap();
        assert_eq!(again, m);
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn dilate_examples() {
        let m = dot(5, 5, 2, 2);
        assert_eq!(dilate(&m, 0), m);
        let d = dilate(&m, 1);
        assert_eq!(d, BinaryMask::from_fn(5, 5, |x, y| (1..=3).contains(&x) && (1..=3).contains(&y)));
        assert!(m.is_subset_of(&d));
        assert_eq!(dilate(&dot(5, 5, 0, 0), 10).area(), 25);
    }

    #[test]
    fn buffer_filter_examples() {
        let patch = BinaryMask::from_fn(50, 5, |x, _| x >= 39);
        assert_eq!(buffer_filter(&patch, &BinaryMask::empty(50, 5), 26).unwrap().area(), 0);
        let pixel = BinaryMask::from_fn(50, 5, |x, _| x < 10);
        // blob starts 30 columns past the last pixel-mask column
        assert_eq!(buffer_filter(&patch, &pixel, 26).unwrap().area(), 0);
        let inner = BinaryMask::from_fn(50, 5, |x, _| x < 4);
        assert_eq!(buffer_filter(&inner, &pixel, 0).unwrap(), inner);
        assert!(buffer_filter(&patch, &BinaryMask::empty(4, 4), 1).is_err());
    }

    #[test]
    fn combine_examples() {
        let a = BinaryMask::from_fn(6, 6, |x, _| x < 2);
        let b = BinaryMask::from_fn(6, 6, |x, _| x > 3);
        assert_eq!(combine(&a, &BinaryMask::empty(6, 6)).unwrap(), a);
        assert_eq!(combine(&a, &b).unwrap(), combine(&b, &a).unwrap());
        assert_eq!(combine(&a, &a).unwrap(), a);
        assert_eq!(combine(&a, &b).unwrap().area(), a.area() + b.area());
    }

    #[test]
    fn sweep_has_twenty_rows_and_saturates() {
        let gt = BinaryMask::from_fn(32, 32, |x, y| x < 12 && y < 12);
        let pixel = BinaryMask::from_fn(32, 32, |x, y| x < 8 && y < 8);
        let patch = BinaryMask::from_fn(32, 32, |x, y| (x < 16 && y < 16) || (x > 28 && y > 28));
        let rows = sweep_buffer(&patch, &pixel, &gt, &default_radii()).unwrap();
        assert_eq!(rows.len(), 20);
        assert!(rows.windows(2).all(|w| w[0].filtered_area <= w[1].filtered_area));
        let last = rows.last().unwrap();
        assert_eq!(last.metrics, score(&combine(&pixel, &patch).unwrap(), &gt).unwrap());
        assert_eq!(sweep_csv(&rows).lines().count(), 21);
        assert!(sweep_csv(&rows).starts_with("radius,dice,jaccard,recall,accuracy,voe\n2,"));
    }

    fn table(pairs: &[(usize, f64, f64)]) -> Vec<SweepRow> {
        pairs
            .iter()
            .map(|&(radius, recall, accuracy)| SweepRow {
                radius,
                metrics: Metrics {
                    recall,
                    accuracy,
                    ..Default::default()
                },
                filtered_area: 0,
            })
            .collect()
    }

    #[test]
    fn select_crossing_and_fallback() {
        let crossing = table(&[(22, 0.80, 0.95), (24, 0.85, 0.94), (26, 0.95, 0.93), (28, 0.97, 0.92)]);
        assert_eq!(select_buffer(&crossing).unwrap(), 26);
        let apart = table(&[(2, 0.5, 0.9), (4, 0.6, 0.9), (6, 0.7, 0.9), (8, 0.65, 0.9)]);
        assert_eq!(select_buffer(&apart).unwrap(), 6);
        assert!(select_buffer(&[]).is_err());
    }

    #[test]
    fn overlay_examples() {
        let img = GrayImage::from_fn(4, 4, |x, _| x as f64 / 4.0).unwrap();
        let empty = BinaryMask::empty(4, 4);
        let pal = OverlayPalette::default();
        let plain = render_overlay(&img, &empty, &empty, None, &pal).unwrap();
        for (x, y, p) in plain.enumerate_pixels() {
            let g = img.to_u8()[(y * 4 + x) as usize];
            assert_eq!(p.0, [g; 3]);
        }
        let m = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 3);
        let both = render_overlay(&img, &m, &m, None, &pal).unwrap();
        for (x, y, p) in both.enumerate_pixels() {
            if m.get(x as usize, y as usize) {
                assert!(p.0[0] >= 127 && p.0[1] >= 127 && p.0[2] < 128);
            }
        }
        let gt = BinaryMask::from_fn(4, 4, |x, y| (1..3).contains(&x) && (1..3).contains(&y));
        assert_eq!(outline(&gt), gt);
        let with_gt = render_overlay(&img, &empty, &empty, Some(&gt), &pal).unwrap();
        let purple = with_gt.pixels().filter(|p| p.0 == pal.gt_outline).count();
        assert_eq!(purple, 4);
    }
}
