//! Fréchet distance between feature statistics, flow warping error, temporal
//! MSE, and `.flo` optical-flow files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data_pipeline::TensorImage;
use crate::error::{Error, Result};
use crate::warping_ops::{flow_warp, FlowField, OcclusionMask};

/// Middlebury `.flo` magic number (`"PIEH"` read as a little-endian f32).
pub const FLO_MAGIC: f32 = 202021.25;
const FLO_MAX_SIDE: i32 = 1 << 15;

fn flo_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::FlowFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_flo(&bytes, path)
}

/// Parses `.flo` bytes; `origin` is only used in error messages.
pub fn parse_flo(bytes: &[u8], origin: &Path) -> Result<FlowField> {
    let mut r = bytes;
    let magic = r
        .read_f32::<LittleEndian>()
        .map_err(|_| flo_error(origin, "file shorter than header"))?;
    if magic != FLO_MAGIC {
        return Err(flo_error(origin, format!("bad magic {magic}")));
    }
    let width = r
        .read_i32::<LittleEndian>()
        .map_err(|_| flo_error(origin, "missing width"))?;
    let height = r
        .read_i32::<LittleEndian>()
        .map_err(|_| flo_error(origin, "missing height"))?;
    if !(1..=FLO_MAX_SIDE).contains(&width) || !(1..=FLO_MAX_SIDE).contains(&height) {
        return Err(flo_error(origin, format!("bad dimensions {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = h * w * 2 * 4;
    if r.len() < expected {
        return Err(flo_error(
            origin,
            format!("truncated payload: {} of {expected} bytes", r.len()),
        ));
    }
    if r.len() > expected {
        return Err(flo_error(origin, "trailing bytes after payload"));
    }
    let mut data = vec![0f32; h * w * 2];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| flo_error(origin, "truncated payload"))?;
    let arr = Array3::from_shape_vec((h, w, 2), data).expect("payload length checked");
    Ok(FlowField { data: arr })
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w, _) = flow.data.dim();
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.write_f32::<LittleEndian>(FLO_MAGIC).unwrap();
    out.write_i32::<LittleEndian>(w as i32).unwrap();
    out.write_i32::<LittleEndian>(h as i32).unwrap();
    for v in flow.data.iter() {
        out.write_f32::<LittleEndian>(*v).unwrap();
    }
    out
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_flo(flow)).map_err(|e| Error::io(path, e))
}

/// File name of the flow mapping pixels of frame `from` into frame `to`.
pub fn flow_file_name(from_stem: &str, to_stem: &str) -> String {
    format!("{from_stem}__{to_stem}.flo")
}

/// Directory of precomputed flows named by [`flow_file_name`].
#[derive(Debug, Clone)]
pub struct FlowDir {
    pub root: PathBuf,
}

impl FlowDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FlowDir { root: root.into() }
    }

    pub fn path(&self, from_stem: &str, to_stem: &str) -> PathBuf {
        self.root.join(flow_file_name(from_stem, to_stem))
    }

    pub fn load(&self, from_stem: &str, to_stem: &str) -> Result<FlowField> {
        read_flo(&self.path(from_stem, to_stem))
    }
}

/// Gaussian fit of a feature distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `D x D`.
    pub covariance: Vec<f64>,
    pub sample_count: usize,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>, sample_count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::shape(
                "FeatureStats",
                format!("covariance has {} entries for dimension {d}", covariance.len()),
            ));
        }
        if sample_count < 2 {
            return Err(Error::Data("feature statistics need at least 2 samples".into()));
        }
        Ok(FeatureStats {
            mean,
            covariance,
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }

    /// Symmetry within 1e-8 and eigenvalues >= -1e-6.
    pub fn validate(&self) -> Result<()> {
        let c = self.cov_matrix();
        let d = self.dim();
        for i in 0..d {
            for j in 0..i {
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-8 {
                    return Err(Error::Numerical(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if d > 0 {
            let min = SymmetricEigen::new(c).eigenvalues.min();
            if min < -1e-6 {
                return Err(Error::Numerical(format!(
                    "covariance not positive semi-definite (eigenvalue {min:e})"
                )));
            }
        }
        if self.mean.iter().chain(&self.covariance).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature statistics are not finite".into()));
        }
        Ok(())
    }

    pub fn from_features<'a, I>(features: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut acc: Option<StatsAccumulator> = None;
        for f in features {
            acc.get_or_insert_with(|| StatsAccumulator::new(f.len())).push(f)?;
        }
        acc.ok_or_else(|| Error::Data("no features".into()))?.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("stats serialize");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: FeatureStats = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        FeatureStats::new(s.mean, s.covariance, s.sample_count)
    }
}

/// Streaming mean / unbiased covariance (Welford co-moment updates, f64).
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    count: usize,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        StatsAccumulator {
            count: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        let d = self.mean.len();
        if x.len() != d {
            return Err(Error::shape(
                "StatsAccumulator::push",
                format!("feature of length {} for dimension {d}", x.len()),
            ));
        }
        self.count += 1;
        let x = DVector::from_column_slice(x);
        let before = &x - &self.mean;
        self.mean += &before / self.count as f64;
        let after = &x - &self.mean;
        self.comoment.ger(1.0, &before, &after, 1.0);
        Ok(())
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.count < 2 {
            return Err(Error::Data(format!(
                "feature statistics need at least 2 samples, got {}",
                self.count
            )));
        }
        let cov = &self.comoment / (self.count - 1) as f64;
        // Symmetrize away rounding from the rank-one updates.
        let cov = (&cov + cov.transpose()) * 0.5;
        let d = self.mean.len();
        let mut flat = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                flat.push(cov[(i, j)]);
            }
        }
        FeatureStats::new(self.mean.iter().copied().collect(), flat, self.count)
    }
}

/// Regularization added to both covariances when the plain square root fails.
pub const FID_EPS: f64 = 1e-6;
/// Largest tolerated negative eigenvalue of `sqrt(C_r) C_f sqrt(C_r)`,
/// relative to its spectral radius, before the result is rejected.
pub const FID_RESIDUE_TOL: f64 = 1e-3;

/// Eigenvalues below `radius * dim * EPSILON` are round-off and count as zero.
fn rank_floor(eig: &DVector<f64>) -> f64 {
    let radius = eig.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    radius * eig.len() as f64 * f64::EPSILON
}

fn clamped_sqrt(l: f64, floor: f64) -> f64 {
    if l <= floor {
        0.0
    } else {
        l.sqrt()
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let floor = rank_floor(&eig.eigenvalues);
    let roots = eig.eigenvalues.map(|l| clamped_sqrt(l, floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr((C_r C_f)^{1/2})` via the similar symmetric matrix `S C_f S`, `S = C_r^{1/2}`.
fn trace_sqrt_product(cr: &DMatrix<f64>, cf: &DMatrix<f64>) -> Result<f64> {
    let s = sym_sqrt(cr);
    let m = &s * cf * &s;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m).eigenvalues;
    let radius = eig.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let min = eig.min();
    if min < -FID_RESIDUE_TOL * radius.max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical(format!(
            "covariance product has a negative eigenvalue {min:e} (spectral radius {radius:e})"
        )));
    }
    let floor = rank_floor(&eig);
    let tr: f64 = eig.iter().map(|&l| clamped_sqrt(l, floor)).sum();
    if !tr.is_finite() {
        return Err(Error::Numerical("matrix square root did not converge".into()));
    }
    Ok(tr)
}

/// `|m_r - m_f|^2 + tr(C_r + C_f - 2 (C_r C_f)^{1/2})`.
pub fn fid(real: &FeatureStats, fake: &FeatureStats) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::shape(
            "fid",
            format!("feature dimensions {} vs {}", real.dim(), fake.dim()),
        ));
    }
    real.validate()?;
    fake.validate()?;
    let mean_term: f64 = real
        .mean
        .iter()
        .zip(&fake.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let cr = real.cov_matrix();
    let cf = fake.cov_matrix();
    let tr_sqrt = match trace_sqrt_product(&cr, &cf) {
        Ok(t) => t,
        Err(_) => {
            let eps = DMatrix::identity(real.dim(), real.dim()) * FID_EPS;
            trace_sqrt_product(&(&cr + &eps), &(&cf + &eps))?
        }
    };
    Ok(mean_term + cr.trace() + cf.trace() - 2.0 * tr_sqrt)
}

/// Maps an image to a fixed-length feature vector for Fréchet statistics.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn features(&self, image: &TensorImage) -> Result<Vec<f64>>;
}

/// Average-pooled colors on a `grid x grid` lattice (`3 * grid^2` features).
///
/// A dependency-free stand-in for a pretrained classifier; scores are only
/// comparable to other scores computed with the same extractor.
#[derive(Debug, Clone)]
pub struct PooledPixelExtractor {
    pub grid: usize,
}

impl Default for PooledPixelExtractor {
    fn default() -> Self {
        PooledPixelExtractor { grid: 8 }
    }
}

impl FeatureExtractor for PooledPixelExtractor {
    fn name(&self) -> &str {
        "pooled-pixels"
    }

    fn dim(&self) -> usize {
        3 * self.grid * self.grid
    }

    fn features(&self, image: &TensorImage) -> Result<Vec<f64>> {
        let (h, w) = (image.height(), image.width());
        if h < self.grid || w < self.grid {
            return Err(Error::shape(
                "PooledPixelExtractor",
                format!("{h}x{w} image smaller than {0}x{0} grid", self.grid),
            ));
        }
        let data = image.data();
        let mut out = Vec::with_capacity(self.dim());
        for c in 0..3 {
            for gy in 0..self.grid {
                let (y0, y1) = (gy * h / self.grid, (gy + 1) * h / self.grid);
                for gx in 0..self.grid {
                    let (x0, x1) = (gx * w / self.grid, (gx + 1) * w / self.grid);
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += data[[c, y, x]];
                        }
                    }
                    out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Ok(out)
    }
}

/// Resolves an extractor by name. Only built-in extractors can be constructed
/// here; pretrained-network features must be computed externally and supplied
/// as [`FeatureStats`].
pub fn extractor_by_name(name: &str) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "pooled-pixels" | "pixel" => Ok(Box::new(PooledPixelExtractor::default())),
        "inception" | "inception-v3" => Err(Error::MissingAsset(
            "InceptionV3 pool3 weights (pt_inception-2015-12-05) are not bundled; \
             compute 2048-d features externally and compare their statistics \
             through the Python bindings"
                .into(),
        )),
        other => Err(Error::Config(format!(
            "unknown feature extractor {other}; valid: pooled-pixels, inception"
        ))),
    }
}

pub fn extract_features<'a, I>(images: I, extractor: &dyn FeatureExtractor) -> Result<FeatureStats>
where
    I: IntoIterator<Item = &'a TensorImage>,
{
    let mut acc = StatsAccumulator::new(extractor.dim());
    for img in images {
        acc.push(&extractor.features(img)?)?;
    }
    acc.finish()
}

/// Stylized output frames with the flows and masks linking each consecutive pair.
///
/// `flows[t - 1]` maps pixels of frame `t` into frame `t - 1`; `masks[t - 1]`
/// marks its reliable pixels.
#[derive(Debug, Clone)]
pub struct StylizedSequence {
    pub frames: Vec<TensorImage>,
    pub flows: Vec<FlowField>,
    pub masks: Vec<OcclusionMask>,
}

impl StylizedSequence {
    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t < 2 {
            return Err(Error::Data("flow warping error needs at least 2 frames".into()));
        }
        if self.flows.len() != t - 1 || self.masks.len() != t - 1 {
            return Err(Error::Data(format!(
                "{t} frames need {} flows and masks, got {} and {}",
                t - 1,
                self.flows.len(),
                self.masks.len()
            )));
        }
        Ok(())
    }
}

/// Masked squared color error between `curr` and `prev` warped into `curr`'s
/// geometry, normalized by the number of unmasked values. Zero when fully masked.
pub fn fwe_pair(
    prev: &Array3<f64>,
    curr: &Array3<f64>,
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<f64> {
    let (c, h, w) = curr.dim();
    if prev.dim() != curr.dim()
        || flow.data.dim() != (h, w, 2)
        || mask.data.dim() != (h, w)
    {
        return Err(Error::shape(
            "flow_warping_error",
            format!(
                "frame {:?}, previous {:?}, flow {:?}, mask {:?}",
                curr.dim(),
                prev.dim(),
                flow.data.dim(),
                mask.data.dim()
            ),
        ));
    }
    let valid = mask.valid_count();
    if valid == 0 {
        return Ok(0.0);
    }
    let warped = flow_warp(&prev.clone().insert_axis(Axis(0)), &flow.to_batch())?;
    let mut sum = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.data[[y, x]] == 1 {
                    let d = curr[[ch, y, x]] - warped[[0, ch, y, x]];
                    sum += d * d;
                }
            }
        }
    }
    Ok(sum / (valid * c) as f64)
}

/// Mean over consecutive pairs of [`fwe_pair`], colors scaled to `[0, 1]`.
pub fn flow_warping_error(seq: &StylizedSequence) -> Result<f64> {
    seq.validate()?;
    let frames: Vec<Array3<f64>> = seq.frames.iter().map(TensorImage::to_unit_scale).collect();
    let mut total = 0.0;
    for t in 1..frames.len() {
        total += fwe_pair(&frames[t - 1], &frames[t], &seq.flows[t - 1], &seq.masks[t - 1])?;
    }
    Ok(total / (frames.len() - 1) as f64)
}

/// `1/(T-1) * sum_t sum_{i,j,c} ((x_{t+1} - x_t) - (y_{t+1} - y_t))^2` on raw values.
pub fn temporal_mse_raw(inputs: &[Array3<f64>], outputs: &[Array3<f64>]) -> Result<f64> {
    if inputs.len() != outputs.len() {
        return Err(Error::Data(format!(
            "temporal MSE needs equal lengths, got {} inputs and {} outputs",
            inputs.len(),
            outputs.len()
        )));
    }
    if inputs.len() < 2 {
        return Err(Error::Data("temporal MSE needs at least 2 frames".into()));
    }
    let dim = inputs[0].dim();
    if inputs.iter().chain(outputs).any(|a| a.dim() != dim) {
        return Err(Error::shape("temporal_mse", "frames differ in shape"));
    }
    let mut total = 0.0;
    for t in 0..inputs.len() - 1 {
        let mut s = 0.0;
        ndarray::Zip::from(&inputs[t + 1])
            .and(&inputs[t])
            .and(&outputs[t + 1])
            .and(&outputs[t])
            .for_each(|x1, x0, y1, y0| {
                let d = (x1 - x0) - (y1 - y0);
                s += d * d;
            });
        total += s;
    }
    Ok(total / (inputs.len() - 1) as f64)
}

/// [`temporal_mse_raw`] on 8-bit-scale colors (`[0, 255]`).
pub fn temporal_mse(inputs: &[TensorImage], outputs: &[TensorImage]) -> Result<f64> {
    let a: Vec<Array3<f64>> = inputs.iter().map(TensorImage::to_8bit_scale).collect();
    let b: Vec<Array3<f64>> = outputs.iter().map(TensorImage::to_8bit_scale).collect();
    temporal_mse_raw(&a, &b)
}
