//! Fine-tuning a classifier on top of a pretrained backbone, confusion-matrix
//! metrics, and group-aware stratified cross-validation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{Image, LabeledImageSet};
use crate::encoder::{prepare_input, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{BackboneArch, BackboneTrace, Dense};
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub folds: usize,
    /// Train only the affine head on fixed backbone features (linear probe).
    pub freeze_backbone: bool,
    /// Class treated as positive for sensitivity. Defaults to `malignant` when
    /// present, else the last class.
    pub positive_class: Option<String>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            optimizer: SgdConfig {
                lr: 0.003,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            folds: 10,
            freeze_backbone: false,
            positive_class: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("downstream.epochs", "must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("downstream.batch_size", "must be ≥ 1"));
        }
        if self.folds < 2 {
            return Err(Error::config("downstream.folds", "must be ≥ 2"));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.momentum < 0.0 || self.optimizer.weight_decay < 0.0 {
            return Err(Error::config("downstream.optimizer", "lr must be > 0, momentum and weight_decay ≥ 0"));
        }
        Ok(())
    }

    fn positive_index(&self, classes: &[String]) -> Result<usize> {
        match &self.positive_class {
            Some(name) => classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::UnknownLabel(name.clone())),
            None => Ok(classes
                .iter()
                .position(|c| c == "malignant")
                .unwrap_or(classes.len().saturating_sub(1))),
        }
    }
}

/// A backbone `f` with its weights; the projection head is not part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub arch: BackboneArch,
    pub params: Vec<f64>,
}

impl Backbone {
    pub fn from_encoder(encoder: &EncoderParams) -> Self {
        Self {
            arch: encoder.arch.backbone.clone(),
            params: encoder.backbone.clone(),
        }
    }

    /// Loads `f` from a pretraining checkpoint; `g` is discarded.
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        Ok(Self::from_encoder(&crate::trainer::load_query_encoder(dir)?))
    }

    /// Randomly initialized backbone (the no-pretraining baseline).
    pub fn random(arch: BackboneArch, seed: u64) -> Self {
        let params = arch.init(&mut stream(seed, Stream::Init, 0));
        Self { arch, params }
    }

    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let input = prepare_input(&self.arch, image)?;
        Ok(self.arch.forward(&self.params, &input, None))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierMeta {
    backbone_id: String,
    arch: BackboneArch,
    classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Dense,
    pub head_params: Vec<f64>,
    pub classes: Vec<String>,
}

impl Classifier {
    pub fn new(backbone: Backbone, classes: Vec<String>, seed: u64) -> Self {
        let head = Dense {
            inputs: backbone.arch.feature_dim(),
            outputs: classes.len(),
        };
        let head_params = head.init(&mut stream(seed, Stream::Finetune, u64::MAX), 1.0);
        Self {
            backbone,
            head,
            head_params,
            classes,
        }
    }

    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.head.forward(&self.head_params, &self.backbone.features(image)?))
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }

    /// Writes the classifier as a parameter archive.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = ClassifierMeta {
            backbone_id: self.backbone.arch.id(),
            arch: self.backbone.arch.clone(),
            classes: self.classes.clone(),
        };
        checkpoint::save(
            dir,
            &meta,
            &[("backbone", &self.backbone.params), ("head", &self.head_params)],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut archive = checkpoint::load::<ClassifierMeta>(dir)?;
        let meta = archive.meta.clone();
        let backbone = Backbone {
            params: archive.take("backbone", dir)?,
            arch: meta.arch,
        };
        let head = Dense {
            inputs: backbone.arch.feature_dim(),
            outputs: meta.classes.len(),
        };
        let head_params = archive.take("head", dir)?;
        if backbone.params.len() != backbone.arch.num_params() || head_params.len() != head.num_params() {
            return Err(Error::Checkpoint {
                path: dir.to_path_buf(),
                reason: "parameter count does not match the stored architecture".into(),
            });
        }
        Ok(Self {
            backbone,
            head,
            head_params,
            classes: meta.classes,
        })
    }

    fn check_vocabulary(&self, set: &LabeledImageSet) -> Result<()> {
        if set.classes != self.classes {
            return Err(Error::VocabularyMismatch {
                expected: self.classes.clone(),
                got: set.classes.clone(),
            });
        }
        Ok(())
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Softmax cross-entropy: returns `(loss, d loss / d logits)`.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut d: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    d[label] -= 1.0;
    (loss, d)
}

/// Per-feature standardization used for frozen-backbone training.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(features: &[Vec<f64>]) -> Self {
        let d = features.first().map_or(0, Vec::len);
        let n = features.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let inv_std = (0..d)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    /// Rewrites `W((x − μ)/σ) + b` as `W'x + b'` so the head takes raw features.
    fn fold_into(&self, head: &Dense, params: &mut [f64]) {
        let (weights, bias) = params.split_at_mut(head.outputs * head.inputs);
        for (row, b) in weights.chunks_mut(head.inputs).zip(bias.iter_mut()) {
            for ((w, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *w *= s;
                *b -= *w * m;
            }
        }
    }
}

/// Trains `classifier` in place on `items` (indices into `set`). Returns the
/// mean training loss of the last epoch.
fn train(classifier: &mut Classifier, set: &LabeledImageSet, items: &[usize], config: &FinetuneConfig, stream_base: u64) -> Result<f64> {
    let frozen = config.freeze_backbone;
    let n_backbone = if frozen { 0 } else { classifier.backbone.params.len() };
    let mut opt = Sgd::new(config.optimizer.clone(), n_backbone + classifier.head_params.len());
    let mut standardizer = None;
    let cached: Option<Vec<Vec<f64>>> = if frozen {
        let raw = items
            .iter()
            .map(|&i| classifier.backbone.features(&set.items[i].image))
            .collect::<Result<Vec<_>>>()?;
        let st = Standardizer::fit(&raw);
        let scaled = raw.iter().map(|f| st.apply(f)).collect();
        standardizer = Some(st);
        Some(scaled)
    } else {
        None
    };
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut last_loss = 0.0;
    for epoch in 0..config.epochs {
        let mut rng = stream(config.seed, Stream::Finetune, stream_base + epoch as u64);
        order.shuffle(&mut rng);
        let lr = cosine_lr(config.optimizer.lr, epoch, config.epochs);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let scale = 1.0 / chunk.len() as f64;
            let mut g_backbone = vec![0.0; n_backbone];
            let mut g_head = vec![0.0; classifier.head_params.len()];
            for &o in chunk {
                let item = &set.items[items[o]];
                let (features, trace) = match &cached {
                    Some(f) => (f[o].clone(), None),
                    None => {
                        let input = prepare_input(&classifier.backbone.arch, &item.image)?;
                        let mut trace = BackboneTrace::default();
                        let f = classifier
                            .backbone
                            .arch
                            .forward(&classifier.backbone.params, &input, Some(&mut trace));
                        (f, Some(trace))
                    }
                };
                let logits = classifier.head.forward(&classifier.head_params, &features);
                let (loss, mut d_logits) = softmax_xent(&logits, item.label);
                epoch_loss += loss;
                d_logits.iter_mut().for_each(|d| *d *= scale);
                let d_features = classifier
                    .head
                    .backward(&classifier.head_params, &features, &d_logits, &mut g_head);
                if let Some(trace) = trace {
                    classifier.backbone.arch.backward(
                        &classifier.backbone.params,
                        &trace,
                        &d_features,
                        &mut g_backbone,
                        false,
                    );
                }
            }
            let params = classifier
                .backbone
                .params
                .iter_mut()
                .take(n_backbone)
                .chain(classifier.head_params.iter_mut());
            opt.step(params, g_backbone.iter().chain(&g_head), lr);
        }
        last_loss = epoch_loss / items.len().max(1) as f64;
    }
    if let Some(st) = standardizer {
        st.fold_into(&classifier.head, &mut classifier.head_params);
    }
    if !last_loss.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(last_loss)
}

/// Fine-tunes a fresh linear head (and, unless frozen, the backbone) on the
/// whole of `set`.
pub fn finetune(backbone: &Backbone, set: &LabeledImageSet, config: &FinetuneConfig) -> Result<Classifier> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let mut classifier = Classifier::new(backbone.clone(), set.classes.clone(), config.seed);
    let all: Vec<usize> = (0..set.len()).collect();
    train(&mut classifier, set, &all, config, 0)?;
    Ok(classifier)
}

/// Confusion-matrix metrics. Entries are `None` when undefined (a class with no
/// examples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub classes: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// Recall on the negative class (binary only).
    pub specificity: Option<f64>,
    /// Recall on the positive class (binary only).
    pub sensitivity: Option<f64>,
    /// Recall per class, aligned with `classes`.
    pub per_class: Vec<Option<f64>>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: &[String], positive: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("cannot evaluate an empty set".into()));
        }
        if labels.len() != predictions.len() {
            return Err(Error::Dimension {
                expected: labels.len(),
                got: predictions.len(),
            });
        }
        let c = classes.len();
        let mut confusion = vec![vec![0usize; c]; c];
        for (&t, &p) in labels.iter().zip(predictions) {
            if t >= c || p >= c {
                return Err(Error::UnknownLabel(t.max(p).to_string()));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|i| ratio(confusion[i][i], confusion[i].iter().sum()))
            .collect();
        let (specificity, sensitivity) = if c == 2 {
            (per_class[1 - positive], per_class[positive])
        } else {
            (None, None)
        };
        Ok(Self {
            classes: classes.to_vec(),
            confusion,
            accuracy: correct as f64 / labels.len() as f64,
            specificity,
            sensitivity,
            per_class,
        })
    }
}

/// Predicts every item of `set` and scores the predictions.
pub fn evaluate(classifier: &Classifier, set: &LabeledImageSet, positive_class: Option<&str>) -> Result<Metrics> {
    classifier.check_vocabulary(set)?;
    let cfg = FinetuneConfig {
        positive_class: positive_class.map(str::to_string),
        ..Default::default()
    };
    let positive = cfg.positive_index(&set.classes)?;
    let labels: Vec<usize> = set.items.iter().map(|it| it.label).collect();
    let preds = set
        .items
        .iter()
        .map(|it| classifier.predict(&it.image))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_predictions(&labels, &preds, &set.classes, positive)
}

/// Assigns every item to one of `k` folds so that a patient never spans two
/// folds and class proportions stay close to the overall ones.
///
/// Membership depends only on the set's (patient, label) content and `seed`,
/// never on item order.
pub fn group_stratified_folds(set: &LabeledImageSet, k: usize, seed: u64) -> Result<Vec<usize>> {
    let c = set.classes.len();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for it in &set.items {
        groups
            .entry(it.patient_id.as_str())
            .or_insert_with(|| vec![0; c])[it.label] += 1;
    }
    if groups.len() < k {
        return Err(Error::Invalid(format!(
            "{} patient groups cannot fill {k} folds",
            groups.len()
        )));
    }
    let mut order: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    order.shuffle(&mut stream(seed, Stream::Folds, 0));
    // Largest groups first; stable so equal sizes keep the shuffled order.
    order.sort_by_key(|(_, counts)| std::cmp::Reverse(counts.iter().sum::<usize>()));

    let totals: Vec<f64> = (0..c)
        .map(|l| set.items.iter().filter(|it| it.label == l).count().max(1) as f64)
        .collect();
    let mut fold_counts = vec![vec![0usize; c]; k];
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    for (patient, counts) in &order {
        let cost = |f: usize| -> f64 {
            (0..c)
                .map(|l| {
                    let v = (fold_counts[f][l] + counts[l]) as f64 / totals[l];
                    v * v
                })
                .sum()
        };
        let best = (0..k)
            .min_by(|&a, &b| {
                cost(a)
                    .total_cmp(&cost(b))
                    .then_with(|| fold_counts[a].iter().sum::<usize>().cmp(&fold_counts[b].iter().sum()))
            })
            .expect("k ≥ 1");
        for l in 0..c {
            fold_counts[best][l] += counts[l];
        }
        assignment.insert(patient, best);
    }
    Ok(set
        .items
        .iter()
        .map(|it| assignment[it.patient_id.as_str()])
        .collect())
}

/// Mean and sample standard deviation of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub accuracy: Option<MeanStd>,
    pub specificity: Option<MeanStd>,
    pub sensitivity: Option<MeanStd>,
    pub per_class: Vec<Option<MeanStd>>,
}

impl CvSummary {
    pub fn of(folds: &[Metrics]) -> Self {
        let c = folds.first().map_or(0, |m| m.classes.len());
        Self {
            accuracy: MeanStd::of(folds.iter().map(|m| Some(m.accuracy))),
            specificity: MeanStd::of(folds.iter().map(|m| m.specificity)),
            sensitivity: MeanStd::of(folds.iter().map(|m| m.sensitivity)),
            per_class: (0..c)
                .map(|i| MeanStd::of(folds.iter().map(|m| m.per_class[i])))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub classes: Vec<String>,
    pub folds: Vec<Metrics>,
    pub summary: CvSummary,
}

/// k-fold cross-validation: for each fold a fresh classifier starts from
/// `backbone`, is fine-tuned on the other folds and scored on this one.
pub fn cross_validate(backbone: &Backbone, set: &LabeledImageSet, config: &FinetuneConfig) -> Result<CvReport> {
    config.validate()?;
    let positive = config.positive_index(&set.classes)?;
    let assignment = group_stratified_folds(set, config.folds, config.seed)?;
    let folds = (0..config.folds)
        .into_par_iter()
        .map(|fold| -> Result<Metrics> {
            let (test, train_idx): (Vec<usize>, Vec<usize>) =
                (0..set.len()).partition(|&i| assignment[i] == fold);
            for (l, name) in set.classes.iter().enumerate() {
                if !train_idx.iter().any(|&i| set.items[i].label == l) {
                    return Err(Error::FoldMissingClass {
                        fold,
                        class: name.clone(),
                    });
                }
            }
            let fold_seed = config.seed ^ ((fold as u64 + 1) << 32);
            let mut classifier = Classifier::new(backbone.clone(), set.classes.clone(), fold_seed);
            train(&mut classifier, set, &train_idx, config, (fold as u64) << 20)?;
            let labels: Vec<usize> = test.iter().map(|&i| set.items[i].label).collect();
            let preds = test
                .iter()
                .map(|&i| classifier.predict(&set.items[i].image))
                .collect::<Result<Vec<_>>>()?;
            Metrics::from_predictions(&labels, &preds, &set.classes, positive)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport {
        classes: set.classes.clone(),
        summary: CvSummary::of(&folds),
        folds,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"))
}

impl CvReport {
    /// One CSV row per fold, then `mean` and `std` rows. Undefined values are `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,accuracy,specificity,sensitivity");
        for c in &self.classes {
            let _ = write!(out, ",recall_{c}");
        }
        out.push('\n');
        for (i, m) in self.folds.iter().enumerate() {
            let _ = write!(
                out,
                "{i},{},{},{}",
                cell(Some(m.accuracy)),
                cell(m.specificity),
                cell(m.sensitivity)
            );
            for r in &m.per_class {
                let _ = write!(out, ",{}", cell(*r));
            }
            out.push('\n');
        }
        let s = &self.summary;
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let get = |m: &Option<MeanStd>| cell(m.map(|m| if pick == 0 { m.mean } else { m.std }));
            let _ = write!(
                out,
                "{label},{},{},{}",
                get(&s.accuracy),
                get(&s.specificity),
                get(&s.sensitivity)
            );
            for r in &s.per_class {
                let _ = write!(out, ",{}", get(r));
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_cell(m: &Option<MeanStd>) -> String {
    m.map_or_else(|| "—".to_string(), |m| m.to_string())
}

/// Plain-text results table: one row per method, columns accuracy,
/// specificity and sensitivity for binary tasks, or overall accuracy plus
/// per-class accuracy otherwise.
pub fn format_table(rows: &[(&str, &CvSummary)], classes: &[String]) -> String {
    let mut header = vec!["Method".to_string(), "Acc.".to_string()];
    let binary = classes.len() == 2;
    if binary {
        header.push("Spec.".into());
        header.push("Sens.".into());
    } else {
        header.extend(classes.iter().cloned());
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, s)| {
            let mut r = vec![name.to_string(), fmt_cell(&s.accuracy)];
            if binary {
                r.push(fmt_cell(&s.specificity));
                r.push(fmt_cell(&s.sensitivity));
            } else {
                r.extend(s.per_class.iter().map(fmt_cell));
            }
            r
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            body.iter()
                .map(|r| r[i].chars().count())
                .chain([header[i].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
