//! Ordered source clips, unordered target image sets, and the frame-pair
//! sampling that drives temporal training.
//!
//! Dataset root layout:
//!
//! ```text
//! root/
//!   dataset.json          clip boundaries and frame order per split
//!   trainA/ testA/        source frames, `<clip>_<frameidx>.png`
//!   trainB/ testB/        target images, arbitrary names
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IMAGE_SIZE: usize = 256;
pub const MANIFEST_FILE: &str = "dataset.json";
pub const MANIFEST_VERSION: u32 = 1;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

/// `3 x H x W` image with values in `[-1, 1]` (channel-first storage).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorImage {
    data: Array3<f64>,
}

impl TensorImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::shape(
                "TensorImage",
                format!("expected 3 channels, got {:?}", data.dim()),
            ));
        }
        if data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Data("tensor image values must lie in [-1, 1]".into()));
        }
        Ok(TensorImage { data })
    }

    /// Maps 8-bit channels linearly onto `[-1, 1]`.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0
        });
        TensorImage { data }
    }

    pub fn constant(size: usize, value: f64) -> Result<Self> {
        TensorImage::new(Array3::from_elem((3, size, size), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    /// Denormalizes to 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> RgbImage {
        let (_, h, w) = self.data.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                ((self.data[[c, y as usize, x as usize]] + 1.0) * 127.5)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Values rescaled to `[0, 255]`.
    pub fn to_8bit_scale(&self) -> Array3<f64> {
        self.data.mapv(|v| (v + 1.0) * 127.5)
    }

    /// Values rescaled to `[0, 1]`.
    pub fn to_unit_scale(&self) -> Array3<f64> {
        self.data.mapv(|v| (v + 1.0) * 0.5)
    }
}

/// Stacks equally sized images into an `(N, 3, H, W)` batch.
pub fn stack(images: &[&TensorImage]) -> Result<Array4<f64>> {
    let views: Vec<ArrayView3<'_, f64>> = images.iter().map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::shape("stack", e.to_string()))
}

/// Splits an `(N, 3, H, W)` batch back into images, clamping into `[-1, 1]`.
pub fn unstack(batch: &Array4<f64>) -> Vec<TensorImage> {
    batch
        .axis_iter(Axis(0))
        .map(|s| TensorImage {
            data: s.mapv(|v| v.clamp(-1.0, 1.0)),
        })
        .collect()
}

/// Bilinear resize to `size x size`, then `[0, 255] -> [-1, 1]`. Grayscale
/// and alpha inputs are converted to 8-bit RGB first.
pub fn preprocess(image: &DynamicImage, size: usize) -> Result<TensorImage> {
    Ok(TensorImage::from_rgb8(&resize_rgb8(image, size)?))
}

/// The 8-bit half of [`preprocess`]: converted and resized, not yet normalized.
pub fn resize_rgb8(image: &DynamicImage, size: usize) -> Result<RgbImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Data("image has no pixels".into()));
    }
    if size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let rgb = image.to_rgb8();
    if rgb.width() as usize == size && rgb.height() as usize == size {
        return Ok(rgb);
    }
    Ok(image::imageops::resize(
        &rgb,
        size as u32,
        size as u32,
        FilterType::Triangle,
    ))
}

/// Where an image's pixels come from.
#[derive(Debug, Clone)]
pub enum ImageHandle {
    File(PathBuf),
    Memory(Arc<RgbImage>),
}

impl ImageHandle {
    pub fn decode(&self) -> Result<DynamicImage> {
        match self {
            ImageHandle::File(p) => image::open(p).map_err(|source| Error::Image {
                path: p.clone(),
                source,
            }),
            ImageHandle::Memory(img) => Ok(DynamicImage::ImageRgb8((**img).clone())),
        }
    }

    pub fn load(&self, size: usize) -> Result<TensorImage> {
        preprocess(&self.decode()?, size)
    }

    pub fn dimensions(&self) -> Result<(u32, u32)> {
        match self {
            ImageHandle::File(p) => image::image_dimensions(p).map_err(|source| Error::Image {
                path: p.clone(),
                source,
            }),
            ImageHandle::Memory(img) => Ok(img.dimensions()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ImageHandle::File(p) => p.display().to_string(),
            ImageHandle::Memory(_) => "<memory>".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub handle: ImageHandle,
    pub timestamp: u64,
}

/// Ordered frames of one clip.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub source_id: String,
    pub stride: usize,
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(source_id: impl Into<String>, stride: usize, frames: Vec<Frame>) -> Result<Self> {
        let source_id = source_id.into();
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if frames.windows(2).any(|w| w[0].timestamp >= w[1].timestamp) {
            return Err(Error::Data(format!(
                "clip {source_id}: frame timestamps must be strictly increasing"
            )));
        }
        Ok(FrameSequence {
            source_id,
            stride,
            frames,
        })
    }

    /// In-memory clip with timestamps `0, 1, 2, ...`.
    pub fn from_images(source_id: impl Into<String>, images: Vec<RgbImage>) -> Result<Self> {
        let frames = images
            .into_iter()
            .enumerate()
            .map(|(i, img)| Frame {
                handle: ImageHandle::Memory(Arc::new(img)),
                timestamp: i as u64,
            })
            .collect();
        FrameSequence::new(source_id, 1, frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> Result<&Frame> {
        self.frames.get(i).ok_or_else(|| {
            Error::Data(format!(
                "frame index {i} out of range for clip {} ({} frames)",
                self.source_id,
                self.frames.len()
            ))
        })
    }

    pub fn load(&self, i: usize, size: usize) -> Result<TensorImage> {
        self.frame(i)?.handle.load(size)
    }

    /// Name used to look up per-frame side files such as flows: the file stem
    /// for frames on disk, `<clip>_<timestamp>` otherwise.
    pub fn frame_stem(&self, i: usize) -> Result<String> {
        let f = self.frame(i)?;
        if let ImageHandle::File(p) = &f.handle {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                return Ok(stem.to_string());
            }
        }
        Ok(format!("{}_{:06}", self.source_id, f.timestamp))
    }

    /// Checks that every frame decodes to the same spatial size.
    pub fn check_uniform_size(&self) -> Result<()> {
        let mut dims = None;
        for f in &self.frames {
            let d = f.handle.dimensions()?;
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Data(format!(
                        "clip {}: {} is {}x{}, expected {}x{}",
                        self.source_id,
                        f.handle.label(),
                        d.0,
                        d.1,
                        prev.0,
                        prev.1
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Unordered target-domain images.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    pub images: Vec<ImageHandle>,
}

impl ImageSet {
    pub fn from_images(images: Vec<RgbImage>) -> Self {
        ImageSet {
            images: images
                .into_iter()
                .map(|i| ImageHandle::Memory(Arc::new(i)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Uniform draw with replacement.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.images.is_empty() {
            return Err(Error::Data("cannot sample from an empty image set".into()));
        }
        Ok(rng.random_range(0..self.images.len()))
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Trailing decimal digits of a file stem, e.g. `shot_000120` -> 120.
pub fn trailing_index(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Image files of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Decoded frames of a video, in source order, as files on disk.
///
/// A directory is read as already-decoded frames ordered by the trailing
/// frame number in each filename (falling back to name order). A media file
/// is decoded with an external `ffmpeg`, when one is on the `PATH`.
fn decoded_frames(video: &Path) -> Result<(Vec<PathBuf>, Option<tempfile::TempDir>)> {
    if video.is_dir() {
        let mut files = list_images(video)?;
        if files.iter().all(|p| trailing_index(p).is_some()) {
            files.sort_by_key(|p| trailing_index(p));
        }
        return Ok((files, None));
    }
    if !video.is_file() {
        return Err(Error::Data(format!("{} does not exist", video.display())));
    }
    let tmp = tempfile::TempDir::new().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let pattern = tmp.path().join("frame_%08d.png");
    let status = std::process::Command::new("ffmpeg")
        .args(["-loglevel", "error", "-i"])
        .arg(video)
        .args(["-vsync", "0"])
        .arg(&pattern)
        .status();
    match status {
        Ok(s) if s.success() => Ok((list_images(tmp.path())?, Some(tmp))),
        Ok(s) => Err(Error::Data(format!(
            "could not decode {} (ffmpeg exited with {s})",
            video.display()
        ))),
        Err(e) => Err(Error::Data(format!(
            "could not decode {}: ffmpeg unavailable ({e}); pass a directory of decoded frames instead",
            video.display()
        ))),
    }
}

/// Keeps source frames `0, stride, 2 * stride, ...`, preserving their source
/// index as timestamp. Frames that fail to decode are skipped with a warning.
pub fn extract_frames(video: &Path, stride: usize) -> Result<FrameSequence> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let (files, tmp) = decoded_frames(video)?;
    let id = video
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("clip")
        .to_string();
    let mut frames = Vec::new();
    for (i, path) in files.iter().enumerate().step_by(stride) {
        let img = match image::open(path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping undecodable frame {}: {e}", path.display());
                continue;
            }
        };
        // Frames decoded into a temporary directory are kept in memory.
        let handle = if tmp.is_some() {
            ImageHandle::Memory(Arc::new(img.to_rgb8()))
        } else {
            ImageHandle::File(path.clone())
        };
        frames.push(Frame {
            handle,
            timestamp: i as u64,
        });
    }
    if frames.is_empty() {
        return Err(Error::Data(format!(
            "no decodable frames in {}",
            video.display()
        )));
    }
    FrameSequence::new(id, stride, frames)
}

/// Offsets `delta` with `0 < |delta| <= gap` and `0 <= t + delta < len`.
pub fn valid_deltas(len: usize, t: usize, gap: usize) -> Vec<i64> {
    let (t, len, gap) = (t as i64, len as i64, gap as i64);
    (-gap..=gap)
        .filter(|&d| d != 0 && (0..len).contains(&(t + d)))
        .collect()
}

/// Uniform draw from [`valid_deltas`].
pub fn sample_delta<R: Rng + ?Sized>(len: usize, t: usize, gap: usize, rng: &mut R) -> Result<i64> {
    if gap == 0 {
        return Err(Error::Config("time gap must be >= 1".into()));
    }
    if t >= len {
        return Err(Error::Data(format!("frame index {t} out of range ({len} frames)")));
    }
    let choices = valid_deltas(len, t, gap);
    if choices.is_empty() {
        return Err(Error::Data(format!(
            "no auxiliary frame within gap {gap} of frame {t} in a {len}-frame clip"
        )));
    }
    Ok(choices[rng.random_range(0..choices.len())])
}

#[derive(Debug, Clone)]
pub struct FrameSample {
    pub reference: TensorImage,
    pub auxiliary: TensorImage,
    pub delta: i64,
    pub t: usize,
}

pub fn sample_frame_pair<R: Rng + ?Sized>(
    seq: &FrameSequence,
    t: usize,
    gap: usize,
    size: usize,
    rng: &mut R,
) -> Result<FrameSample> {
    let delta = sample_delta(seq.len(), t, gap, rng)?;
    let aux = (t as i64 + delta) as usize;
    Ok(FrameSample {
        reference: seq.load(t, size)?,
        auxiliary: seq.load(aux, size)?,
        delta,
        t,
    })
}

/// `(frame_t, frame_{t+1})` for `t = 0 .. len - 2`, decoded lazily.
pub struct ConsecutivePairs<'a> {
    seq: &'a FrameSequence,
    size: usize,
    next: usize,
    prev: Option<TensorImage>,
}

pub fn consecutive_pairs(seq: &FrameSequence, size: usize) -> ConsecutivePairs<'_> {
    if seq.len() < 2 {
        log::warn!(
            "clip {} has {} frame(s); no consecutive pairs",
            seq.source_id,
            seq.len()
        );
    }
    ConsecutivePairs {
        seq,
        size,
        next: 0,
        prev: None,
    }
}

impl Iterator for ConsecutivePairs<'_> {
    type Item = Result<(TensorImage, TensorImage)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next + 1 >= self.seq.len() {
            return None;
        }
        let t = self.next;
        self.next += 1;
        let first = match self.prev.take() {
            Some(p) => p,
            None => match self.seq.load(t, self.size) {
                Ok(img) => img,
                Err(e) => return Some(Err(e)),
            },
        };
        match self.seq.load(t + 1, self.size) {
            Ok(second) => {
                self.prev = Some(second.clone());
                Some(Ok((first, second)))
            }
            Err(e) => Some(Err(e)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub id: String,
    pub stride: usize,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitManifest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clips: Vec<ClipManifest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

impl SplitManifest {
    pub fn frame_count(&self) -> usize {
        self.clips.iter().map(|c| c.frames.len()).sum::<usize>() + self.images.len()
    }
}

/// Split name -> contents; written to `dataset.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub splits: BTreeMap<String, SplitManifest>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            splits: BTreeMap::new(),
        }
    }
}

/// A prepared dataset root.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                manifest.version
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn split(&self, name: &str) -> Result<&SplitManifest> {
        self.manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::Data(format!("dataset has no split {name}")))
    }

    pub fn has_split(&self, name: &str) -> bool {
        self.manifest.splits.contains_key(name)
    }

    /// Source clips of a split, in manifest order.
    pub fn clips(&self, split: &str) -> Result<Vec<FrameSequence>> {
        let dir = self.root.join(split);
        self.split(split)?
            .clips
            .iter()
            .map(|c| {
                let frames = c
                    .frames
                    .iter()
                    .map(|f| Frame {
                        handle: ImageHandle::File(dir.join(&f.file)),
                        timestamp: f.timestamp,
                    })
                    .collect();
                FrameSequence::new(c.id.clone(), c.stride, frames)
            })
            .collect()
    }

    /// Target images of a split. Images listed under clips count as well, in order.
    pub fn images(&self, split: &str) -> Result<ImageSet> {
        let dir = self.root.join(split);
        let s = self.split(split)?;
        let mut images: Vec<ImageHandle> = s
            .images
            .iter()
            .map(|f| ImageHandle::File(dir.join(f)))
            .collect();
        for c in &s.clips {
            images.extend(c.frames.iter().map(|f| ImageHandle::File(dir.join(&f.file))));
        }
        Ok(ImageSet { images })
    }
}

/// Result of writing one split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub clips: usize,
    pub frames: usize,
    pub skipped: usize,
}

/// Writes source clips as `<split>/<clip>_<frameidx>.png` and records them.
pub fn write_source_split(
    root: &Path,
    split: &str,
    clips: &[FrameSequence],
    manifest: &mut DatasetManifest,
) -> Result<SplitStats> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stats = SplitStats::default();
    let mut entry = SplitManifest::default();
    for clip in clips {
        let mut frames = Vec::new();
        for f in clip.frames() {
            let img = match f.handle.decode() {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping frame {}: {e}", f.handle.label());
                    stats.skipped += 1;
                    continue;
                }
            };
            let file = format!("{}_{:06}.png", clip.source_id, f.timestamp);
            let path = dir.join(&file);
            img.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            frames.push(FrameEntry {
                file,
                timestamp: f.timestamp,
            });
        }
        stats.frames += frames.len();
        stats.clips += 1;
        entry.clips.push(ClipManifest {
            id: clip.source_id.clone(),
            stride: clip.stride,
            frames,
        });
    }
    manifest.splits.insert(split.to_string(), entry);
    Ok(stats)
}

/// Copies decodable target images into `<split>/`, keeping their file names.
pub fn write_target_split(
    root: &Path,
    split: &str,
    sources: &[PathBuf],
    manifest: &mut DatasetManifest,
) -> Result<SplitStats> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stats = SplitStats::default();
    let mut entry = SplitManifest::default();
    for src in sources {
        if let Err(e) = image::open(src) {
            log::warn!("skipping target image {}: {e}", src.display());
            stats.skipped += 1;
            continue;
        }
        let name = src
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("bad file name {}", src.display())))?
            .to_string();
        let dst = dir.join(&name);
        fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
        entry.images.push(name);
    }
    stats.frames = entry.images.len();
    manifest.splits.insert(split.to_string(), entry);
    Ok(stats)
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
