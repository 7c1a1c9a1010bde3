//! Fully connected CRF with a two-kernel Gaussian pairwise term and Potts
//! compatibility, solved by synchronous mean-field iteration.
//!
//! Energy of a labeling `x`:
//!
//! ```text
//! E(x) = sum_i U_i(x_i) + sum_{i<j} [x_i != x_j] k(f_i, f_j)
//! k    = w1 exp(-|p_i-p_j|^2 / 2sa^2 - |I_i-I_j|^2 / 2sb^2) + w2 exp(-|p_i-p_j|^2 / 2sg^2)
//! ```
//!
//! Label 0 is background and label 1 foreground.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::raster::{BinaryMask, GrayImage, ProbabilityMap};
use crate::scalar::Real;

pub const UNARY_EPS: f64 = 1e-6;
/// Probability assigned to the marked label when the input is a binary mask.
pub const DEFAULT_CONFIDENCE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    /// Appearance kernel weight.
    pub w1: f64,
    /// Smoothness kernel weight.
    pub w2: f64,
    pub sigma_alpha: f64,
    /// In [0, 1] intensity units.
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub num_labels: usize,
    pub num_iterations: usize,
    /// Ignore pairs farther apart than [`CrfParams::truncation_radius`] along
    /// either axis.
    pub truncate: bool,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w1: 10.0,
            w2: 3.0,
            sigma_alpha: 60.0,
            sigma_beta: 20.0 / 255.0,
            sigma_gamma: 3.0,
            num_labels: 2,
            num_iterations: 10,
            truncate: false,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(invalid("kernel weights must be nonnegative"));
        }
        if [self.sigma_alpha, self.sigma_beta, self.sigma_gamma].iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("kernel scales must be positive"));
        }
        if self.num_labels < 2 {
            return Err(invalid("a CRF needs at least two labels"));
        }
        Ok(())
    }

    pub fn truncation_radius(&self) -> usize {
        (3.0 * self.sigma_alpha.max(self.sigma_gamma)).ceil() as usize
    }
}

/// Pixel positions (implicit on the grid) and intensities in [0, 1], either
/// one gray value or several channels per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures<T> {
    width: usize,
    height: usize,
    channels: usize,
    intensities: Vec<T>,
}

impl<T: Real> PixelFeatures<T> {
    pub fn new(width: usize, height: usize, channels: usize, intensities: Vec<T>) -> Result<Self> {
        if channels == 0 || intensities.len() != width * height * channels {
            return Err(shape_err(
                "pixel features",
                format!("{} intensities for {width}x{height}x{channels}", intensities.len()),
            ));
        }
        if intensities.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(invalid("intensities must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            channels,
            intensities,
        })
    }

    pub fn from_gray(image: &GrayImage<T>) -> Self {
        Self {
            width: image.width(),
            height: image.height(),
            channels: 1,
            intensities: image.data().to_vec(),
        }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[[T; 3]]) -> Result<Self> {
        Self::new(width, height, 3, rgb.iter().flatten().copied().collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }

    pub fn intensity(&self, i: usize) -> &[T] {
        &self.intensities[i * self.channels..(i + 1) * self.channels]
    }

    fn intensity_dist2(&self, i: usize, j: usize) -> T {
        self.intensity(i)
            .iter()
            .zip(self.intensity(j))
            .map(|(&a, &b)| (a - b) * (a - b))
            .fold(T::zero(), |s, d| s + d)
    }
}

/// Per-label, per-pixel costs laid out label-major (`L x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryPotentials<T> {
    labels: usize,
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> UnaryPotentials<T> {
    pub fn new(labels: usize, width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if labels == 0 || data.len() != labels * width * height {
            return Err(shape_err(
                "unary",
                format!("{} costs for {labels}x{height}x{width}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("unary costs must be finite"));
        }
        Ok(Self {
            labels,
            width,
            height,
            data,
        })
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn cost(&self, pixel: usize, label: usize) -> T {
        self.data[label * self.pixels() + pixel]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Multiplies every cost by `c`.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            data: self.data.iter().map(|&v| v * c).collect(),
            ..self.clone()
        }
    }
}

/// Per-pixel label distributions, label-major like [`UnaryPotentials`].
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalField<T> {
    labels: usize,
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> MarginalField<T> {
    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn prob(&self, pixel: usize, label: usize) -> T {
        self.data[label * self.pixels() + pixel]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Builds a field from pixel-major rows, normalizing nothing.
    fn from_rows(labels: usize, width: usize, height: usize, rows: &[Vec<T>]) -> Self {
        let n = width * height;
        let mut data = vec![T::zero(); labels * n];
        for (i, row) in rows.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                data[l * n + i] = v;
            }
        }
        Self {
            labels,
            width,
            height,
            data,
        }
    }

    /// Foreground probability map of a two-label field.
    pub fn foreground(&self) -> Result<ProbabilityMap<T>> {
        if self.labels != 2 {
            return Err(invalid("foreground map needs exactly two labels"));
        }
        let n = self.pixels();
        let fg = self.data[n..].iter().map(|&v| v.max(T::zero()).min(T::one())).collect();
        ProbabilityMap::new(self.width, self.height, fg)
    }
}

/// `U(bg) = -ln clamp(1 - p)`, `U(fg) = -ln clamp(p)`, clamped to
/// `[eps, 1 - eps]`.
pub fn unary_from_probabilities<T: Real>(prob: &ProbabilityMap<T>, eps: f64) -> UnaryPotentials<T> {
    let eps = T::lit(eps);
    let cost = |p: T| -(p.max(eps).min(T::one() - eps)).ln();
    let n = prob.data().len();
    let mut data = Vec::with_capacity(2 * n);
    data.extend(prob.data().iter().map(|&p| cost(T::one() - p)));
    data.extend(prob.data().iter().map(|&p| cost(p)));
    UnaryPotentials {
        labels: 2,
        width: prob.width(),
        height: prob.height(),
        data,
    }
}

/// Unary for a binary mask: marked pixels get probability `confidence`,
/// others `1 - confidence`.
pub fn unary_from_mask<T: Real>(mask: &BinaryMask, confidence: f64) -> Result<UnaryPotentials<T>> {
    if !(confidence > 0.5 && confidence < 1.0) {
        return Err(invalid(format!("confidence {confidence} must lie in (0.5, 1)")));
    }
    let (hi, lo) = (T::lit(confidence), T::lit(1.0 - confidence));
    let prob = ProbabilityMap::new(
        mask.width(),
        mask.height(),
        mask.data().iter().map(|&b| if b { hi } else { lo }).collect(),
    )?;
    Ok(unary_from_probabilities(&prob, UNARY_EPS))
}

/// Spatial Gaussians tabulated by `(|dx|, |dy|)`.
struct SpatialTables<T> {
    width: usize,
    appearance: Vec<T>,
    smoothness: Vec<T>,
}

impl<T: Real> SpatialTables<T> {
    fn new(width: usize, height: usize, params: &CrfParams) -> Self {
        let table = |sigma: f64| {
            (0..width * height)
                .map(|k| {
                    let (dx, dy) = ((k % width) as f64, (k / width) as f64);
                    T::lit((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp())
                })
                .collect()
        };
        Self {
            width,
            appearance: table(params.sigma_alpha),
            smoothness: table(params.sigma_gamma),
        }
    }
}

struct Kernel<'a, T> {
    feats: &'a PixelFeatures<T>,
    tables: SpatialTables<T>,
    w1: T,
    w2: T,
    inv_2sb2: T,
    radius: Option<usize>,
}

impl<'a, T: Real> Kernel<'a, T> {
    fn new(feats: &'a PixelFeatures<T>, params: &CrfParams) -> Self {
        Self {
            feats,
            tables: SpatialTables::new(feats.width, feats.height, params),
            w1: T::lit(params.w1),
            w2: T::lit(params.w2),
            inv_2sb2: T::lit(1.0 / (2.0 * params.sigma_beta * params.sigma_beta)),
            radius: params.truncate.then(|| params.truncation_radius()),
        }
    }

    #[inline]
    fn eval(&self, i: usize, j: usize) -> T {
        let (xi, yi) = self.feats.position(i);
        let (xj, yj) = self.feats.position(j);
        let k = yi.abs_diff(yj) * self.tables.width + xi.abs_diff(xj);
        let mut v = self.w2 * self.tables.smoothness[k];
        if self.w1 > T::zero() {
            let color = (-self.feats.intensity_dist2(i, j) * self.inv_2sb2).exp();
            v = v + self.w1 * self.tables.appearance[k] * color;
        }
        v
    }

    /// Pixels `j` that interact with `i`, excluding `i` itself.
    fn for_neighbors(&self, i: usize, mut f: impl FnMut(usize)) {
        let (w, h) = (self.feats.width, self.feats.height);
        let (x, y) = self.feats.position(i);
        let (x0, x1, y0, y1) = match self.radius {
            Some(r) => (x.saturating_sub(r), (x + r).min(w - 1), y.saturating_sub(r), (y + r).min(h - 1)),
            None => (0, w - 1, 0, h - 1),
        };
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                let j = yy * w + xx;
                if j != i {
                    f(j);
                }
            }
        }
    }
}

/// `k(f_i, f_j)` evaluated directly from the definition.
pub fn pairwise_kernel<T: Real>(i: usize, j: usize, feats: &PixelFeatures<T>, params: &CrfParams) -> T {
    let (xi, yi) = feats.position(i);
    let (xj, yj) = feats.position(j);
    let d2 = T::lit(((xi as f64 - xj as f64).powi(2)) + ((yi as f64 - yj as f64).powi(2)));
    let two = T::lit(2.0);
    let (sa, sb, sg) = (T::lit(params.sigma_alpha), T::lit(params.sigma_beta), T::lit(params.sigma_gamma));
    let appearance = (-d2 / (two * sa * sa) - feats.intensity_dist2(i, j) / (two * sb * sb)).exp();
    let smoothness = (-d2 / (two * sg * sg)).exp();
    T::lit(params.w1) * appearance + T::lit(params.w2) * smoothness
}

fn check_problem<T: Real>(unary: &UnaryPotentials<T>, feats: &PixelFeatures<T>, params: &CrfParams) -> Result<()> {
    params.validate()?;
    if unary.dims() != (feats.width, feats.height) {
        return Err(shape_err(
            "crf",
            format!("unary {:?} vs features {}x{}", unary.dims(), feats.width, feats.height),
        ));
    }
    if unary.labels != params.num_labels {
        return Err(shape_err(
            "crf",
            format!("unary has {} labels, params say {}", unary.labels, params.num_labels),
        ));
    }
    Ok(())
}

fn softmax_row<T: Real>(logits: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    logits.iter_mut().for_each(|v| *v = *v / sum);
}

/// Initial field: per-pixel `softmax(-U)`.
pub fn initial_field<T: Real>(unary: &UnaryPotentials<T>) -> MarginalField<T> {
    let (w, h) = unary.dims();
    let rows: Vec<Vec<T>> = (0..unary.pixels())
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<T> = (0..unary.labels).map(|l| -unary.cost(i, l)).collect();
            softmax_row(&mut row);
            row
        })
        .collect();
    MarginalField::from_rows(unary.labels, w, h, &rows)
}

fn step_with<T: Real>(q: &MarginalField<T>, unary: &UnaryPotentials<T>, kernel: &Kernel<'_, T>) -> MarginalField<T> {
    let labels = unary.labels;
    let n = unary.pixels();
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut msg = vec![T::zero(); labels];
            kernel.for_neighbors(i, |j| {
                let k = kernel.eval(i, j);
                for (l, m) in msg.iter_mut().enumerate() {
                    *m = *m + k * (T::one() - q.data[l * n + j]);
                }
            });
            let mut row: Vec<T> = (0..labels).map(|l| -unary.cost(i, l) - msg[l]).collect();
            softmax_row(&mut row);
            row
        })
        .collect();
    let (w, h) = unary.dims();
    MarginalField::from_rows(labels, w, h, &rows)
}

/// One synchronous update
/// `Q'_i(l) ∝ exp(-U_i(l) - sum_{j != i} k_ij (1 - Q_j(l)))`, reading only `q`.
pub fn mean_field_step<T: Real>(
    q: &MarginalField<T>,
    unary: &UnaryPotentials<T>,
    feats: &PixelFeatures<T>,
    params: &CrfParams,
) -> Result<MarginalField<T>> {
    check_problem(unary, feats, params)?;
    if q.labels != unary.labels || q.dims() != unary.dims() {
        return Err(shape_err("crf", "marginal field does not match the unary"));
    }
    Ok(step_with(q, unary, &Kernel::new(feats, params)))
}

/// Starts from `softmax(-U)` and applies `num_iterations` steps.
pub fn mean_field_infer<T: Real>(
    unary: &UnaryPotentials<T>,
    feats: &PixelFeatures<T>,
    params: &CrfParams,
) -> Result<MarginalField<T>> {
    mean_field_infer_with(unary, feats, params, |_, _| {})
}

/// Like [`mean_field_infer`], calling `observe(iteration, &q)` after every
/// step (iteration 0 is the initial field).
pub fn mean_field_infer_with<T: Real>(
    unary: &UnaryPotentials<T>,
    feats: &PixelFeatures<T>,
    params: &CrfParams,
    mut observe: impl FnMut(usize, &MarginalField<T>),
) -> Result<MarginalField<T>> {
    check_problem(unary, feats, params)?;
    let kernel = Kernel::new(feats, params);
    let mut q = initial_field(unary);
    observe(0, &q);
    for t in 1..=params.num_iterations {
        q = step_with(&q, unary, &kernel);
        observe(t, &q);
    }
    Ok(q)
}

/// Unary sum plus the Potts penalty over all unordered pairs (always exact).
pub fn energy<T: Real>(
    labeling: &[usize],
    unary: &UnaryPotentials<T>,
    feats: &PixelFeatures<T>,
    params: &CrfParams,
) -> Result<T> {
    check_problem(unary, feats, params)?;
    let n = unary.pixels();
    if labeling.len() != n {
        return Err(shape_err("energy", format!("{} labels for {n} pixels", labeling.len())));
    }
    if let Some(&bad) = labeling.iter().find(|&&l| l >= unary.labels) {
        return Err(invalid(format!("label {bad} out of range")));
    }
    let kernel = Kernel {
        radius: None,
        ..Kernel::new(feats, params)
    };
    let partial: Vec<T> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = unary.cost(i, labeling[i]);
            for j in i + 1..n {
                if labeling[i] != labeling[j] {
                    s = s + kernel.eval(i, j);
                }
            }
            s
        })
        .collect();
    Ok(partial.into_iter().fold(T::zero(), |a, b| a + b))
}

/// Per-pixel argmax; ties go to the lower label.
pub fn map_labeling<T: Real>(q: &MarginalField<T>) -> Vec<usize> {
    let n = q.pixels();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for l in 1..q.labels {
                if q.data[l * n + i] > q.data[best * n + i] {
                    best = l;
                }
            }
            best
        })
        .collect()
}

/// Pixels whose MAP label is not background.
pub fn map_mask<T: Real>(q: &MarginalField<T>) -> BinaryMask {
    let (w, h) = q.dims();
    let labels = map_labeling(q);
    BinaryMask::new(w, h, labels.iter().map(|&l| l != 0).collect()).expect("one label per pixel")
}
