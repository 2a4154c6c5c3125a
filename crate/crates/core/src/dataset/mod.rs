//! Video corpora, labeled image sets, and frame decoding.
//!
//! A [`VideoCorpus`] is what pretraining consumes. Synthetic ground truth is
//! returned separately by [`generate_synthetic`] and never stored on the corpus.

mod augment;
mod manifest;
mod synthetic;

pub use augment::{augment, hflip, AugConfig, Flip};
pub use manifest::{load_corpus, write_corpus, Manifest, ManifestVideo};
pub use synthetic::{
    generate_synthetic, labeled_frames, GroundTruth, PathologyWindow, SyntheticSpec,
};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height × width × channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tuple(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Dense image, channel-major (CHW), intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: ImageShape,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Invalid(format!(
                "image data has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    /// Replicates a single channel `channels` times; other shapes must already match.
    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        if self.shape.channels == channels {
            return Ok(self.clone());
        }
        if self.shape.channels != 1 {
            return Err(Error::ShapeMismatch {
                expected: (self.shape.height, self.shape.width, channels),
                got: self.shape.tuple(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Ok(Image {
            shape: ImageShape::new(self.shape.height, self.shape.width, channels),
            data,
        })
    }

    pub(crate) fn decode(path: &Path, shape: ImageShape) -> Result<Image> {
        let img = image::open(path).map_err(|cause| Error::Image {
            path: path.to_path_buf(),
            cause,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (h, w) != (shape.height, shape.width) {
            return Err(Error::ShapeMismatch {
                expected: shape.tuple(),
                got: (h, w, shape.channels),
            });
        }
        let data = match shape.channels {
            1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            3 => {
                let raw = img.to_rgb8().into_raw();
                let mut data = vec![0.0; raw.len()];
                for (i, px) in raw.chunks(3).enumerate() {
                    for c in 0..3 {
                        data[c * h * w + i] = px[c] as f64 / 255.0;
                    }
                }
                data
            }
            c => {
                return Err(Error::Invalid(format!(
                    "unsupported channel count {c} (expected 1 or 3)"
                )))
            }
        };
        Ok(Image { shape, data })
    }

    pub(crate) fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.shape.height as u32, self.shape.width as u32);
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let res = match self.shape.channels {
            1 => image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| to_u8(v)).collect())
                .expect("buffer length matches shape")
                .save(path),
            3 => {
                let plane = (h * w) as usize;
                let raw = (0..plane)
                    .flat_map(|i| (0..3).map(move |c| (c, i)))
                    .map(|(c, i)| to_u8(self.data[c * plane + i]))
                    .collect();
                image::RgbImage::from_raw(w, h, raw)
                    .expect("buffer length matches shape")
                    .save(path)
            }
            c => {
                return Err(Error::Invalid(format!(
                    "cannot encode {c}-channel image"
                )))
            }
        };
        res.map_err(|cause| Error::Image {
            path: path.to_path_buf(),
            cause,
        })
    }
}

/// Where a frame's pixels come from.
#[derive(Debug, Clone)]
pub enum FrameRef {
    File(PathBuf),
    Memory(Arc<Image>),
}

#[derive(Debug, Clone)]
pub struct Video {
    pub id: String,
    frames: Vec<FrameRef>,
    shape: ImageShape,
}

impl Video {
    pub fn new(id: impl Into<String>, frames: Vec<FrameRef>, shape: ImageShape) -> Result<Self> {
        let id = id.into();
        if frames.is_empty() {
            return Err(Error::Video {
                video: id,
                reason: "video has no frames".into(),
            });
        }
        Ok(Self { id, frames, shape })
    }

    /// Frame count `M`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_refs(&self) -> &[FrameRef] {
        &self.frames
    }

    /// Decodes frame `j` (1-based).
    pub fn frame(&self, j: usize) -> Result<Image> {
        let r = j
            .checked_sub(1)
            .and_then(|i| self.frames.get(i))
            .ok_or_else(|| Error::Video {
                video: self.id.clone(),
                reason: format!("frame {j} out of range 1..={}", self.frames.len()),
            })?;
        match r {
            FrameRef::Memory(img) => Ok((**img).clone()),
            FrameRef::File(path) => Image::decode(path, self.shape),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct VideoCorpus {
    videos: Vec<Video>,
    pub image_shape: ImageShape,
    pub provenance: Provenance,
}

impl VideoCorpus {
    pub fn new(videos: Vec<Video>, image_shape: ImageShape, provenance: Provenance) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = std::collections::HashSet::new();
        for v in &videos {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::Video {
                    video: v.id.clone(),
                    reason: "duplicate video id".into(),
                });
            }
            if v.shape != image_shape {
                return Err(Error::Video {
                    video: v.id.clone(),
                    reason: format!("shape {:?} differs from corpus {:?}", v.shape, image_shape),
                });
            }
        }
        Ok(Self {
            videos,
            image_shape,
            provenance,
        })
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn frame_counts(&self) -> Vec<usize> {
        self.videos.iter().map(Video::len).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    pub patient_id: String,
}

/// Images with class labels (indices into `classes`) and patient groups.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub items: Vec<LabeledImage>,
    pub classes: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(items: Vec<LabeledImage>, classes: Vec<String>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|it| it.label >= classes.len()) {
            return Err(Error::UnknownLabel(bad.label.to_string()));
        }
        Ok(Self { items, classes })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Writes every image as `<dir>/<patient>/<NNNN>.png` plus `<dir>/labels.csv`
    /// in the format [`LabeledImageSet::load_csv`] reads. Returns the CSV path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut csv = String::from("path,label,patient_id\n");
        for (i, item) in self.items.iter().enumerate() {
            let sub = dir.join(&item.patient_id);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let name = format!("{i:04}.png");
            item.image.save(&sub.join(&name))?;
            csv.push_str(&format!("{}/{name},{},{}\n", item.patient_id, self.classes[item.label], item.patient_id));
        }
        let path = dir.join("labels.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a CSV of `path,label,patient_id` rows (header required). Paths are
    /// relative to the CSV's directory.
    pub fn load_csv(path: &Path, shape: ImageShape) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut classes: Vec<String> = Vec::new();
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    reason: format!("line {}: expected 3 columns", lineno + 1),
                });
            }
            if !classes.iter().any(|c| c == cols[1]) {
                classes.push(cols[1].to_string());
            }
            rows.push((base.join(cols[0]), cols[1].to_string(), cols[2].to_string()));
        }
        classes.sort();
        let items = rows
            .into_iter()
            .map(|(p, label, patient_id)| {
                Ok(LabeledImage {
                    image: Image::decode(&p, shape)?,
                    label: classes.iter().position(|c| *c == label).expect("collected above"),
                    patient_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, classes)
    }
}
