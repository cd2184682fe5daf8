//! Dataset ingestion, synthetic corpus generation, augmentation, and
//! non-linguistic test-set construction.

mod augment;
mod nonling;
mod synth;

pub use augment::{augment, augment_with_ops, AugOp};
pub use nonling::{make_nonlinguistic, NonLinguisticMode};
pub use synth::{discover_system_fonts, render_corpus, render_sample, synth_generate, SynthSpec};

use std::io::BufRead;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use crate::charset::LabelCodec;
use crate::error::{Error, Result};

pub const IMG_H: usize = 32;
pub const IMG_W: usize = 128;

/// A 32x128 RGB image in `[0, 1]`, channel-major (CHW).
#[derive(Debug, Clone, PartialEq)]
pub struct Image32 {
    pub data: Vec<f32>,
}

impl Image32 {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; 3 * IMG_H * IMG_W],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * IMG_H * IMG_W + y * IMG_W + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[c * IMG_H * IMG_W + y * IMG_W + x] = v;
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (3, IMG_H, IMG_W),
            device,
        )?)
    }

    /// Stacks images into a `(B, 3, 32, 128)` batch tensor.
    pub fn batch(images: &[Image32], device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * 3 * IMG_H * IMG_W);
        for im in images {
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_vec(
            data,
            (images.len(), 3, IMG_H, IMG_W),
            device,
        )?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(IMG_W as u32, IMG_H as u32);
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                let px = [
                    (self.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let resized = if rgb.width() as usize != IMG_W || rgb.height() as usize != IMG_H {
            image::imageops::resize(
                &rgb,
                IMG_W as u32,
                IMG_H as u32,
                image::imageops::FilterType::Triangle,
            )
        } else {
            rgb
        };
        let mut out = Image32::zeros();
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                let px = resized.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.set(c, y, x, px[c] as f32 / 255.0);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
}

/// A manifest-backed dataset: `gt.txt` lines of `relative_path<TAB>label`.
/// Labels are normalized on load; samples whose labels normalize to empty
/// or exceed the maximum length are skipped and counted.
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    pub skipped: usize,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        Self::load_with_codec(root, &LabelCodec::default())
    }

    pub fn load_with_codec(root: &Path, codec: &LabelCodec) -> Result<Self> {
        let manifest = root.join("gt.txt");
        if !manifest.exists() {
            return Err(Error::MissingManifest(manifest));
        }
        let file = std::fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut entries = Vec::new();
        let mut skipped = 0usize;
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&manifest, e))?;
            let Some((rel, raw_label)) = line.split_once('\t') else {
                continue;
            };
            let label = codec.normalize_text(raw_label);
            if label.is_empty() || label.chars().count() > codec.max_label_len {
                skipped += 1;
                continue;
            }
            entries.push(DatasetEntry {
                id: rel.to_string(),
                path: root.join(rel),
                label,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image(&self, idx: usize) -> Result<Image32> {
        Image32::load_png(&self.entries[idx].path)
    }
}
