//! Dataset ingestion, pyramid construction, patch sampling and synthetic
//! dataset generation.
//!
//! Images are 8-bit RGB PNG on disk and `[0, 1]` tensors in memory, with no
//! mean subtraction.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdcnError, Result};
use crate::pmpb::{synthesize_blur, MotionFamily, TrajectorySpec};
use crate::tensor::{resize_bilinear, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Supported on-disk layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetLayout {
    /// Sequence directories, each with `blur/` and `sharp/` subdirectories
    /// holding name-matched files.
    Gopro,
    /// `test/` (blurred) and `GT/` (sharp) directories with name-matched
    /// files.
    Hide,
    /// One directory of `<stem>_blur.png` / `<stem>_sharp.png` pairs.
    FlatPairs,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PairEntry {
    pub blurred: PathBuf,
    pub sharp: PathBuf,
    /// Ground-truth kernel field, present for synthetic datasets.
    pub field: Option<PathBuf>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub pairs: Vec<PairEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Line-delimited manifest cache: one JSON record per pair.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(p).expect("manifest entries serialize"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| CdcnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CdcnError::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: PairEntry = serde_json::from_str(line).map_err(|e| CdcnError::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            pairs.push(entry);
        }
        Ok(DatasetManifest {
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            split: Split::Train,
            pairs,
        })
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CdcnError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CdcnError::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Pair two directories by file name; every file must have a counterpart.
fn pair_dirs(blur_dir: &Path, sharp_dir: &Path, out: &mut Vec<PairEntry>) -> Result<()> {
    let blurred = sorted_files(blur_dir)?;
    let sharps = sorted_files(sharp_dir)?;
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_os_string());
    let sharp_names: std::collections::BTreeSet<_> = sharps.iter().filter_map(name).collect();
    let blur_names: std::collections::BTreeSet<_> = blurred.iter().filter_map(name).collect();
    for b in &blurred {
        let n = name(b).ok_or_else(|| CdcnError::Dataset(format!("unnamable file {}", b.display())))?;
        if !sharp_names.contains(&n) {
            return Err(CdcnError::Dataset(format!(
                "blurred file {} has no sharp counterpart in {}",
                b.display(),
                sharp_dir.display()
            )));
        }
        out.push(PairEntry {
            blurred: b.clone(),
            sharp: sharp_dir.join(&n),
            field: None,
        });
    }
    for s in &sharps {
        let n = name(s).expect("checked above");
        if !blur_names.contains(&n) {
            return Err(CdcnError::Dataset(format!(
                "sharp file {} has no blurred counterpart in {}",
                s.display(),
                blur_dir.display()
            )));
        }
    }
    Ok(())
}

/// Enumerate a paired dataset with deterministic lexicographic ordering.
/// Image decodability and extent agreement are validated on first access by
/// [`load_pair`].
pub fn load_pair_dataset(root: &Path, layout: DatasetLayout, split: Split) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(CdcnError::Dataset(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let mut pairs = Vec::new();
    match layout {
        DatasetLayout::Gopro => {
            for seq in sorted_dirs(root)? {
                let blur = seq.join("blur");
                let sharp = seq.join("sharp");
                if !blur.is_dir() || !sharp.is_dir() {
                    return Err(CdcnError::Dataset(format!(
                        "sequence {} lacks blur/ or sharp/",
                        seq.display()
                    )));
                }
                pair_dirs(&blur, &sharp, &mut pairs)?;
            }
        }
        DatasetLayout::Hide => {
            pair_dirs(&root.join("test"), &root.join("GT"), &mut pairs)?;
        }
        DatasetLayout::FlatPairs => {
            let files = sorted_files(root)?;
            for f in &files {
                let Some(stem) = f.file_name().and_then(|n| n.to_str()) else {
                    continue;
                };
                if let Some(prefix) = stem.strip_suffix("_blur.png") {
                    let sharp = root.join(format!("{prefix}_sharp.png"));
                    if !sharp.is_file() {
                        return Err(CdcnError::Dataset(format!(
                            "blurred file {} has no sharp counterpart",
                            f.display()
                        )));
                    }
                    let field = root.join(format!("{prefix}_field.pmpb"));
                    pairs.push(PairEntry {
                        blurred: f.clone(),
                        sharp,
                        field: field.is_file().then_some(field),
                    });
                } else if let Some(prefix) = stem.strip_suffix("_sharp.png") {
                    if !root.join(format!("{prefix}_blur.png")).is_file() {
                        return Err(CdcnError::Dataset(format!(
                            "sharp file {} has no blurred counterpart",
                            f.display()
                        )));
                    }
                }
            }
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        pairs,
    })
}

/// Decode an 8-bit RGB image file to a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn load_image_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| CdcnError::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (y, row) in img.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                data[c * h * w + y * w + x] = T::of(px.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, 3, h, w), data))
}

/// Quantize a `(1, 3, H, W)` tensor to 8-bit RGB and write a PNG.
pub fn save_image_rgb<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let s = t.shape();
    assert!(s.b == 1 && s.c == 3, "save_image_rgb expects (1,3,H,W), got {s}");
    let mut buf = Vec::with_capacity(3 * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                let v = (t.at(0, c, y, x).lift() * 255.0).round().clamp(0.0, 255.0);
                buf.push(v as u8);
            }
        }
    }
    let img: image::RgbImage = image::ImageBuffer::from_raw(s.w as u32, s.h as u32, buf)
        .expect("buffer sized to extents");
    img.save(path).map_err(|e| CdcnError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Load one pair, validating that the two images decode and share extents.
pub fn load_pair<T: Scalar>(entry: &PairEntry) -> Result<(Tensor<T>, Tensor<T>)> {
    let blurred = load_image_rgb(&entry.blurred)?;
    let sharp = load_image_rgb(&entry.sharp)?;
    if blurred.shape() != sharp.shape() {
        return Err(CdcnError::Dataset(format!(
            "extent mismatch: {} is {}, {} is {}",
            entry.blurred.display(),
            blurred.shape(),
            entry.sharp.display(),
            sharp.shape()
        )));
    }
    Ok((blurred, sharp))
}

/// A manifest with every pair decoded into memory (desk-scale datasets).
pub struct Dataset<T> {
    pub pairs: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(CdcnError::Dataset("empty dataset".into()));
        }
        let pairs = manifest
            .pairs
            .iter()
            .map(load_pair)
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { pairs })
    }

    /// Random crop plus paired horizontal flip with probability 0.5; the same
    /// window and flip apply to both members. Deterministic per rng state.
    pub fn sample_patch(
        &self,
        patch: usize,
        batch: usize,
        augment: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<PatchBatch<T>> {
        let shape = self.pairs[0].0.shape();
        if patch > shape.h || patch > shape.w {
            return Err(CdcnError::Dataset(format!(
                "patch {patch} larger than image {}x{}",
                shape.h, shape.w
            )));
        }
        let mut blurred = Tensor::zeros(Shape::new(batch, 3, patch, patch));
        let mut sharp = Tensor::zeros(Shape::new(batch, 3, patch, patch));
        let mut record = Vec::with_capacity(batch);
        for bi in 0..batch {
            let idx = rng.random_range(0..self.pairs.len());
            let (pb, ps) = &self.pairs[idx];
            let s = pb.shape();
            let oy = rng.random_range(0..=s.h - patch);
            let ox = rng.random_range(0..=s.w - patch);
            let flip = augment && rng.random_bool(0.5);
            record.push(SampleRecord {
                pair: idx,
                crop: (oy, ox),
                flipped: flip,
            });
            for c in 0..3 {
                for y in 0..patch {
                    for x in 0..patch {
                        let sx = if flip { ox + patch - 1 - x } else { ox + x };
                        blurred.set(bi, c, y, x, pb.at(0, c, oy + y, sx));
                        sharp.set(bi, c, y, x, ps.at(0, c, oy + y, sx));
                    }
                }
            }
        }
        Ok(PatchBatch {
            blurred,
            sharp,
            record,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub pair: usize,
    pub crop: (usize, usize),
    pub flipped: bool,
}

/// One training batch with its augmentation record.
pub struct PatchBatch<T> {
    pub blurred: Tensor<T>,
    pub sharp: Tensor<T>,
    pub record: Vec<SampleRecord>,
}

/// Per-scale image tiers `[base, base/2, base/4]` produced by direct
/// bilinear downsampling of the full-resolution image. Blurred inputs index
/// them as `B_k = tiers[i-1][k-1]`; ground-truth supervision reads them
/// reversed, `GT_k = tiers[i-1][3-k]`.
pub struct PyramidTiers<T> {
    pub tiers: Vec<[Tensor<T>; 3]>,
}

impl<T: Scalar> PyramidTiers<T> {
    pub fn b_tier(&self, scale: usize, k: usize) -> &Tensor<T> {
        &self.tiers[scale - 1][k - 1]
    }

    pub fn gt_tier(&self, scale: usize, k: usize) -> &Tensor<T> {
        &self.tiers[scale - 1][3 - k]
    }
}

/// Build the 9 tier images of the resolution map (3 scales x 3 tiers).
pub fn make_pyramids<T: Scalar>(image: &Tensor<T>, scales: usize) -> Result<PyramidTiers<T>> {
    let s = image.shape();
    let div = 1 << (scales + 1);
    if s.h % div != 0 || s.w % div != 0 {
        return Err(CdcnError::Dataset(format!(
            "extents {}x{} do not divide by {div}",
            s.h, s.w
        )));
    }
    let tiers = (1..=scales)
        .map(|i| {
            std::array::from_fn(|kk| {
                let h = (s.h >> (i - 1)) >> kk;
                let w = (s.w >> (i - 1)) >> kk;
                resize_bilinear(image, h, w)
            })
        })
        .collect();
    Ok(PyramidTiers { tiers })
}

/// Recipe for a synthetic paired dataset.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub time_samples: usize,
    pub max_displacement: f64,
    /// Families cycled per sample.
    pub families: Vec<MotionFamily>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 10,
            time_samples: 8,
            max_displacement: 5.0,
            families: vec![
                MotionFamily::GlobalLinear,
                MotionFamily::GlobalPolyline,
                MotionFamily::RotationAboutCenter,
            ],
            seed: 0,
        }
    }
}

/// Render `count` blurred/sharp pairs with ground-truth kernel fields from
/// the given sharp sources (cycled), writing PNGs, field records and a
/// manifest cache into `out_dir`. Bitwise deterministic per spec.
pub fn generate_synthetic_dataset<T: Scalar>(
    spec: &SyntheticSpec,
    sources: &[Tensor<T>],
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if sources.is_empty() {
        return Err(CdcnError::Dataset("no source sharp images".into()));
    }
    if spec.families.is_empty() {
        return Err(CdcnError::Dataset("no trajectory families".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CdcnError::io(out_dir, e))?;
    let mut pairs = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let source = &sources[i % sources.len()];
        let tspec = TrajectorySpec {
            time_samples: spec.time_samples,
            max_displacement: spec.max_displacement,
            family: spec.families[i % spec.families.len()],
            seed: spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64),
        };
        let sample = synthesize_blur(source, &tspec)?;
        let sharp_path = out_dir.join(format!("sample_{i:04}_sharp.png"));
        let blur_path = out_dir.join(format!("sample_{i:04}_blur.png"));
        let field_path = out_dir.join(format!("sample_{i:04}_field.pmpb"));
        save_image_rgb(&sample.sharp, &sharp_path)?;
        save_image_rgb(&sample.blurred, &blur_path)?;
        sample.true_field.write_to(&field_path)?;
        pairs.push(PairEntry {
            blurred: blur_path,
            sharp: sharp_path,
            field: Some(field_path),
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        split: Split::Train,
        pairs,
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Deterministic textured sharp image: smooth color gradients, a sinusoidal
/// texture layer and a scatter of hard-edged rectangles and disks, so both
/// smooth regions and strong edges are present.
pub fn procedural_sharp<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planes = vec![0.0f64; 3 * h * w];
    let base: [(f64, f64, f64); 3] = std::array::from_fn(|_| {
        (
            rng.random_range(0.2..0.8),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        )
    });
    let (fx, fy, amp) = (
        rng.random_range(2.0..6.0),
        rng.random_range(2.0..6.0),
        rng.random_range(0.05..0.15),
    );
    for c in 0..3 {
        let (lvl, gx, gy) = base[c];
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / w as f64;
                let v = y as f64 / h as f64;
                let tex = amp * (std::f64::consts::TAU * (fx * u + fy * v)).sin();
                planes[c * h * w + y * w + x] = lvl + gx * (u - 0.5) + gy * (v - 0.5) + tex;
            }
        }
    }
    // hard-edged shapes
    for _ in 0..6 {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(0.06..0.22) * h as f64;
        let rx = rng.random_range(0.06..0.22) * w as f64;
        let disk = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if disk {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        planes[c * h * w + y * w + x] = color[c];
                    }
                }
            }
        }
    }
    let data = planes.iter().map(|&v| T::of(v.clamp(0.0, 1.0))).collect();
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}
