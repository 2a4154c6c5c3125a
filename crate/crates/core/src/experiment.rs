//! End-to-end protocol: pretrain on a video corpus, then cross-validate a
//! classifier on a labeled image set.
//!
//! Without a manifest or label file in the config, both come from the
//! synthetic generator: the corpus from `dataset.synthetic`, the labeled set
//! from frames of the held-out videos `dataset.downstream_synthetic`.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{
    generate_synthetic, labeled_frames, load_corpus, ImageShape, LabeledImageSet, Manifest, VideoCorpus,
};
use crate::downstream::{cross_validate, Backbone, CvReport};
use crate::error::Result;
use crate::trainer::{pretrain, PretrainOutcome};

/// Pretraining corpus: the manifest's frame directories, or the synthetic corpus.
pub fn pretrain_corpus(cfg: &RunConfig) -> Result<VideoCorpus> {
    match &cfg.dataset.manifest {
        Some(manifest) => load_corpus(&manifest_root(cfg, manifest), manifest),
        None => Ok(generate_synthetic(&cfg.dataset.synthetic)?.0),
    }
}

fn manifest_root(cfg: &RunConfig, manifest: &Path) -> PathBuf {
    cfg.dataset
        .root
        .clone()
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

/// Shape of the input images declared by the config.
pub fn input_shape(cfg: &RunConfig) -> Result<ImageShape> {
    match &cfg.dataset.manifest {
        Some(m) => Ok(Manifest::read(m)?.image_shape),
        None => Ok(ImageShape::new(cfg.dataset.synthetic.height, cfg.dataset.synthetic.width, 1)),
    }
}

/// Labeled set: the label CSV, or frames cut from the held-out synthetic videos.
pub fn downstream_set(cfg: &RunConfig) -> Result<LabeledImageSet> {
    match &cfg.dataset.labels {
        Some(path) => LabeledImageSet::load_csv(path, input_shape(cfg)?),
        None => {
            let (corpus, truth) = generate_synthetic(&cfg.dataset.downstream_synthetic)?;
            labeled_frames(&corpus, &truth, cfg.dataset.labeled_per_class, cfg.dataset.downstream_synthetic.seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub pretrain: PretrainOutcome,
    pub cv: CvReport,
}

impl ExperimentOutcome {
    pub fn accuracy(&self) -> f64 {
        self.cv.summary.accuracy.map_or(f64::NAN, |m| m.mean)
    }
}

/// Pretrains with `cfg` and cross-validates the resulting backbone.
pub fn run_synthetic(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let corpus = pretrain_corpus(cfg)?;
    let set = downstream_set(cfg)?;
    run_on(cfg, &corpus, &set, run_dir)
}

/// Same as [`run_synthetic`] with the data supplied by the caller.
pub fn run_on(cfg: &RunConfig, corpus: &VideoCorpus, set: &LabeledImageSet, run_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let pretrain = pretrain(corpus, cfg.pretrain_setup(), run_dir)?;
    let backbone = Backbone::from_encoder(&pretrain.query);
    let cv = cross_validate(&backbone, set, &cfg.finetune_config())?;
    Ok(ExperimentOutcome { pretrain, cv })
}
