use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FrameRef, ImageShape, Provenance, Video, VideoCorpus};
use crate::error::{Error, Result};

const FRAME_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// On-disk corpus description (TOML).
///
/// ```toml
/// image_shape = { height = 16, width = 16, channels = 1 }
/// provenance = "real"
///
/// [[videos]]
/// id = "patient01"
/// dir = "patient01"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub image_shape: ImageShape,
    pub provenance: Provenance,
    #[serde(default)]
    pub videos: Vec<ManifestVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub id: String,
    pub dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Lists `dir`'s frame files ordered by frame number, checking numbering is 1..M.
fn frame_files(video: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Video {
        video: video.to_string(),
        reason: format!("cannot read directory {}: {e}", dir.display()),
    })?;
    let mut numbered = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let n: usize = stem.parse().map_err(|_| Error::Video {
            video: video.to_string(),
            reason: format!("frame file name `{stem}` is not a frame number"),
        })?;
        numbered.push((n, path));
    }
    numbered.sort();
    if numbered.is_empty() {
        return Err(Error::Video {
            video: video.to_string(),
            reason: format!("no frame images in {}", dir.display()),
        });
    }
    for (expected, (found, _)) in (1..).zip(&numbered) {
        if *found != expected {
            return Err(Error::NonContiguousFrames {
                video: video.to_string(),
                expected,
                found: *found,
            });
        }
    }
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

/// Loads a corpus of frame directories. Video directories are resolved
/// relative to `root`; frames must be numbered `1..=M` (zero padding allowed).
pub fn load_corpus(root: &Path, manifest: &Path) -> Result<VideoCorpus> {
    let m = Manifest::read(manifest)?;
    if m.videos.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let shape = m.image_shape;
    let mut videos = Vec::with_capacity(m.videos.len());
    for mv in &m.videos {
        let files = frame_files(&mv.id, &root.join(&mv.dir))?;
        for f in &files {
            let (w, h) = image::image_dimensions(f).map_err(|cause| Error::Image {
                path: f.clone(),
                cause,
            })?;
            if (h as usize, w as usize) != (shape.height, shape.width) {
                return Err(Error::Video {
                    video: mv.id.clone(),
                    reason: format!(
                        "inconsistent image shape: {} is {h}×{w}, corpus declares {}×{}",
                        f.display(),
                        shape.height,
                        shape.width
                    ),
                });
            }
        }
        let frames = files.into_iter().map(FrameRef::File).collect();
        videos.push(Video::new(mv.id.clone(), frames, shape)?);
    }
    VideoCorpus::new(videos, shape, m.provenance)
}

/// Writes every frame as `<out>/<video id>/<NNNNNN>.png` plus `<out>/manifest.toml`.
pub fn write_corpus(corpus: &VideoCorpus, out: &Path) -> Result<Manifest> {
    let mut manifest = Manifest {
        image_shape: corpus.image_shape,
        provenance: corpus.provenance,
        videos: Vec::new(),
    };
    for v in corpus.videos() {
        let dir = out.join(&v.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for j in 1..=v.len() {
            v.frame(j)?.save(&dir.join(format!("{j:06}.png")))?;
        }
        manifest.videos.push(ManifestVideo {
            id: v.id.clone(),
            dir: PathBuf::from(&v.id),
        });
    }
    let path = out.join("manifest.toml");
    std::fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
