//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `cargo test -p vidcl-cli --test acceptance -- 1 3 5` runs a subset.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vidcl_core::curriculum::{annealed_delta, delta_high};
use vidcl_core::dataset::FrameRef;
use vidcl_core::downstream::{cross_validate, evaluate, group_stratified_folds, Backbone, Classifier};
use vidcl_core::experiment::{downstream_set, pretrain_corpus, run_on};
use vidcl_core::loss::{loss_full, loss_gradients};
use vidcl_core::mining::{alpha_weights, hard_negative_aggregate};
use vidcl_core::nn::Dense;
use vidcl_core::oracle::{enumerate_supports, finite_diff_grad, oracle_hard_negative, oracle_loss};
use vidcl_core::rng::{stream, Stream};
use vidcl_core::sampler::{negative_candidates, negative_support, positive_support, sample_tuple};
use vidcl_core::{
    BackboneArch, CurriculumConfig, CurriculumMode, Image, ImageShape, LabeledImage, LabeledImageSet, LossInputs,
    NegativeQueue, Phase, Pool, Pretrainer, RunConfig, SamplerConfig, Video,
};

const LOSS_TOL: f64 = 1e-9;
const LOSS_BUDGET: Duration = Duration::from_secs(5);
const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
const CHI2_ALPHA: f64 = 0.01;
const DRAWS: usize = 100_000;
const MOMENTUM_TOL: f64 = 1e-7;
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const DESK_SEEDS: u64 = 5;
const EMBED_DIM: usize = 128;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn unit(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn gaussian(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn negatives_of(inputs: &LossInputs) -> Vec<&[f64]> {
    inputs
        .z_minus
        .iter()
        .map(Vec::as_slice)
        .chain(std::iter::once(inputs.z_hat_minus.as_slice()))
        .collect()
}

/// Upper-tail probability of Pearson's statistic. Bins with zero expectation
/// must stay empty.
fn chi_square_p(observed: &[u64], expected: &[f64]) -> f64 {
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&o, &e) in observed.iter().zip(expected) {
        if e == 0.0 {
            if o > 0 {
                return 0.0;
            }
            continue;
        }
        stat += (o as f64 - e).powi(2) / e;
        bins += 1;
    }
    ChiSquared::new((bins - 1) as f64).expect("df ≥ 1").sf(stat)
}

fn blank_video(frames: usize) -> Video {
    let shape = ImageShape::new(1, 1, 1);
    let frame = Arc::new(Image::zeros(shape));
    Video::new("v", vec![FrameRef::Memory(frame); frames], shape).unwrap()
}

// 1 ---------------------------------------------------------------------

fn loss_oracle() -> Verdict {
    let mut rng = StdRng::seed_from_u64(1);
    let taus = [0.07, 0.5, 1.0];
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = i % 6;
        let inputs = LossInputs {
            q: unit(&mut rng, EMBED_DIM),
            z_plus: unit(&mut rng, EMBED_DIM),
            z_minus: (0..k).map(|_| unit(&mut rng, EMBED_DIM)).collect(),
            z_hat_minus: unit(&mut rng, EMBED_DIM),
            tau: taus[(i / 6) % 3],
        };
        let got = loss_full(&inputs).unwrap();
        let want = oracle_loss(&inputs.q, &inputs.z_plus, &negatives_of(&inputs), inputs.tau);
        worst = worst.max((got - want).abs());
    }
    let elapsed = start.elapsed();
    Verdict::new(
        worst < LOSS_TOL && elapsed < LOSS_BUDGET,
        format!("100 configs, max |Δ| = {worst:.2e} (tol {LOSS_TOL:e}), {:.3} s (budget 5 s)", elapsed.as_secs_f64()),
    )
}

// 2 ---------------------------------------------------------------------

/// `max_i |a_i − f_i| / max(max_i |f_i|, 1e-8)` for one gradient block.
fn block_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()))
        / scale
}

fn gradient_check() -> Verdict {
    let mut rng = StdRng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let taus = [0.07, 0.2, 0.5, 1.0];
    for i in 0..20 {
        let k = i % 6;
        let base = LossInputs {
            q: gaussian(&mut rng, EMBED_DIM),
            z_plus: gaussian(&mut rng, EMBED_DIM),
            z_minus: (0..k).map(|_| gaussian(&mut rng, EMBED_DIM)).collect(),
            z_hat_minus: gaussian(&mut rng, EMBED_DIM),
            tau: taus[i % 4],
        };
        let g = loss_gradients(&base).unwrap();
        // Flatten every input into one vector and differentiate the oracle.
        let blocks = 3 + k;
        let flat: Vec<f64> = std::iter::once(&base.q)
            .chain(std::iter::once(&base.z_plus))
            .chain(base.z_minus.iter())
            .chain(std::iter::once(&base.z_hat_minus))
            .flatten()
            .copied()
            .collect();
        let f = |x: &[f64]| {
            let v: Vec<&[f64]> = x.chunks(EMBED_DIM).collect();
            oracle_loss(v[0], v[1], &v[2..], base.tau)
        };
        let fd = finite_diff_grad(f, &flat, FD_EPS);
        let fd: Vec<&[f64]> = fd.chunks(EMBED_DIM).collect();
        assert_eq!(fd.len(), blocks);
        let analytic: Vec<&[f64]> = std::iter::once(g.q.as_slice())
            .chain(std::iter::once(g.z_plus.as_slice()))
            .chain(g.z_minus.iter().map(Vec::as_slice))
            .chain(std::iter::once(g.z_hat_minus.as_slice()))
            .collect();
        for (a, n) in analytic.iter().zip(&fd) {
            worst = worst.max(block_error(a, n));
        }
    }
    Verdict::new(
        worst < GRAD_TOL,
        format!("20 configs of dim {EMBED_DIM}, eps {FD_EPS:e}, max rel. error {worst:.2e} (tol {GRAD_TOL:e})"),
    )
}

// 3 ---------------------------------------------------------------------

fn sampler_correctness() -> Verdict {
    let mut checked = 0usize;
    let mut mismatches = Vec::new();
    for frames in 1..=50 {
        for a in 1..=frames {
            for delta in 1..=5 {
                for exclusion in 1..=12 {
                    let (pos, neg) = enumerate_supports(frames, a, delta, exclusion);
                    let got_pos = positive_support(a, delta, frames).map(|s| s.to_vec()).unwrap_or_default();
                    let got_neg = negative_candidates(a, exclusion, frames).to_vec();
                    let checked_neg = negative_support(a, exclusion, frames).map(|s| s.to_vec()).unwrap_or_default();
                    checked += 1;
                    if got_pos != pos || got_neg != neg || checked_neg != neg {
                        mismatches.push((frames, a, delta, exclusion));
                    }
                }
            }
        }
    }

    // Uniformity on (M = 100, δ = 3, Δ = 20).
    let (frames, delta, exclusion) = (100usize, 3usize, 20usize);
    let cfg = SamplerConfig {
        delta,
        k: 3,
        ..SamplerConfig::default()
    };
    let supports: Vec<(Vec<usize>, Vec<usize>)> =
        (1..=frames).map(|a| enumerate_supports(frames, a, delta, exclusion)).collect();
    let valid: Vec<usize> = (1..=frames).filter(|&a| !supports[a - 1].1.is_empty()).collect();
    let pa = 1.0 / valid.len() as f64;
    let mut exp_anchor = vec![0.0; frames];
    let mut exp_pos = vec![0.0; frames];
    let mut exp_neg = vec![0.0; frames];
    for &a in &valid {
        let (pos, neg) = &supports[a - 1];
        exp_anchor[a - 1] += pa;
        for &p in pos {
            exp_pos[p - 1] += pa / pos.len() as f64;
        }
        for &n in neg {
            exp_neg[n - 1] += pa / neg.len() as f64;
        }
    }
    let video = blank_video(frames);
    let mut rng = stream(7, Stream::Audit, 3);
    let mut anchor = vec![0u64; frames];
    let mut pos = vec![0u64; frames];
    let mut neg = vec![vec![0u64; frames]; cfg.k];
    let mut violations = 0usize;
    for _ in 0..DRAWS {
        let t = sample_tuple(&video, exclusion, &cfg, &mut rng).unwrap();
        anchor[t.anchor - 1] += 1;
        pos[t.positive - 1] += 1;
        let (ps, ns) = &supports[t.anchor - 1];
        violations += usize::from(!ps.contains(&t.positive));
        for (j, &n) in t.negatives.iter().enumerate() {
            neg[j][n - 1] += 1;
            violations += usize::from(!ns.contains(&n) || n.abs_diff(t.anchor) <= exclusion);
        }
    }
    let scale = |e: &[f64]| e.iter().map(|x| x * DRAWS as f64).collect::<Vec<_>>();
    let mut ps = vec![("a".to_string(), chi_square_p(&anchor, &scale(&exp_anchor)))];
    ps.push(("p".into(), chi_square_p(&pos, &scale(&exp_pos))));
    for (j, h) in neg.iter().enumerate() {
        ps.push((format!("n{}", j + 1), chi_square_p(h, &scale(&exp_neg))));
    }
    let uniform = ps.iter().all(|(_, p)| *p > CHI2_ALPHA);
    let p_text: Vec<String> = ps.iter().map(|(n, p)| format!("{n} {p:.3}")).collect();
    Verdict::new(
        mismatches.is_empty() && uniform && violations == 0,
        format!(
            "{checked} support cases, {} mismatches; chi-square p [{}] (> {CHI2_ALPHA}); {violations} violations in {DRAWS} tuples",
            mismatches.len(),
            p_text.join(", ")
        ),
    )
}

// 4 ---------------------------------------------------------------------

fn curriculum() -> Verdict {
    let mut problems = Vec::new();
    let low = 7;
    for frames in [43usize, 100, 888] {
        let high = (frames + 4) / 5;
        if delta_high(frames) != high {
            problems.push(format!("M={frames}: Δ_h {} != {high}", delta_high(frames)));
        }
        if annealed_delta(0.0, low, delta_high(frames)) != high || annealed_delta(1.0, low, delta_high(frames)) != low {
            problems.push(format!("M={frames}: endpoints"));
        }
        let cur = CurriculumConfig {
            total_epochs: 60,
            delta_low: low,
            ..CurriculumConfig::default()
        };
        let mut rng = stream(0, Stream::Audit, 4);
        let deltas: Vec<usize> = (0..60)
            .filter(|&e| cur.phase(e) == Phase::Full)
            .map(|e| cur.delta_at(e, frames, &mut rng))
            .collect();
        if deltas.first() != Some(&high) || deltas.last() != Some(&low) {
            problems.push(format!("M={frames}: schedule runs {:?}..{:?}", deltas.first(), deltas.last()));
        }
        if deltas.windows(2).any(|w| w[1] > w[0]) {
            problems.push(format!("M={frames}: schedule increases"));
        }
    }

    let frames = 100;
    let high = (frames + 4) / 5;
    let control = CurriculumConfig {
        total_epochs: 60,
        delta_low: low,
        mode: CurriculumMode::Control,
        ..CurriculumConfig::default()
    };
    let mut rng = stream(0, Stream::Audit, 5);
    let mut counts = vec![0u64; high + 1];
    for i in 0..DRAWS {
        counts[control.delta_at(i % 60, frames, &mut rng)] += 1;
    }
    let expected: Vec<f64> = (0..=high)
        .map(|d| if d >= low { DRAWS as f64 / (high - low + 1) as f64 } else { 0.0 })
        .collect();
    let p = chi_square_p(&counts, &expected);
    if p <= CHI2_ALPHA {
        problems.push(format!("control not uniform on [{low}, {high}]"));
    }
    Verdict::new(
        problems.is_empty(),
        format!(
            "M ∈ {{43, 100, 888}} endpoints and monotonicity; control uniform on [{low}, {high}] p = {p:.3}{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

// 5 ---------------------------------------------------------------------

fn mining_properties() -> Verdict {
    let taus = [0.01, 0.07, 0.5, 1.0, 10.0];
    let mut rng = StdRng::seed_from_u64(5);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |what: &'static str| *failures.entry(what).or_default() += 1;
    let mut mined = 0usize;
    for _ in 0..200 {
        let capacity = rng.random_range(1..=48);
        let dim = rng.random_range(4..=32);
        let videos = rng.random_range(2..=6);
        let mut queue = NegativeQueue::new(capacity);
        let mut model: VecDeque<(Vec<f64>, String)> = VecDeque::new();
        for _ in 0..rng.random_range(1..=12) {
            let size = rng.random_range(1..=capacity + 3);
            let embs: Vec<Vec<f64>> = (0..size).map(|_| unit(&mut rng, dim)).collect();
            let ids: Vec<String> = (0..size).map(|_| format!("v{}", rng.random_range(0..videos))).collect();
            queue.enqueue(&embs, &ids).unwrap();
            for (e, id) in embs.into_iter().zip(ids) {
                model.push_back((e, id));
                if model.len() > capacity {
                    model.pop_front();
                }
            }
            if queue.len() > capacity {
                fail("capacity");
            }
            let same = queue.len() == model.len()
                && queue
                    .entries()
                    .zip(&model)
                    .all(|(e, (m, id))| &e.embedding == m && &e.video_id == id);
            if !same {
                fail("fifo");
            }
        }

        let q = gaussian(&mut rng, dim);
        let exclude = rng.random_bool(0.8).then(|| format!("v{}", rng.random_range(0..videos)));
        let kept: Vec<usize> = (0..model.len())
            .filter(|&i| exclude.as_deref() != Some(model[i].1.as_str()))
            .collect();
        let alpha = alpha_weights(&q, &queue, 0.07, exclude.as_deref());
        if kept.is_empty() {
            if alpha.is_ok() {
                fail("exclusion");
            }
            continue;
        }
        let alpha = alpha.unwrap();
        if alpha.positions != kept {
            fail("exclusion");
        }

        let argmaxes: BTreeSet<usize> = taus
            .iter()
            .map(|&tau| {
                let w = alpha_weights(&q, &queue, tau, exclude.as_deref()).unwrap();
                let best = (0..w.weights.len())
                    .fold(0, |b, i| if w.weights[i] > w.weights[b] { i } else { b });
                w.positions[best]
            })
            .collect();
        if argmaxes.len() != 1 {
            fail("argmax_tau");
        }

        let n = rng.random_range(1..=kept.len());
        let entries: Vec<&[f64]> = kept.iter().map(|&i| model[i].0.as_slice()).collect();
        for &tau in &taus {
            let hard = hard_negative_aggregate(&q, &queue, n, tau, exclude.as_deref()).unwrap();
            mined += 1;
            if hard.top.iter().any(|&p| Some(queue.get(p).unwrap().video_id.as_str()) == exclude.as_deref()) {
                fail("exclusion");
            }
            let norm = hard.z_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1.0 + 1e-12 {
                fail("z_hat_norm");
            }
            let (top, z_hat) = oracle_hard_negative(&q, &entries, n, tau);
            let top: Vec<usize> = top.into_iter().map(|i| kept[i]).collect();
            let close = z_hat.iter().zip(&hard.z_hat).all(|(a, b)| (a - b).abs() < 1e-12);
            if top != hard.top || !close {
                fail("oracle");
            }
        }
    }
    let detail = if failures.is_empty() {
        format!("200 random queues, {mined} aggregations: FIFO, capacity, exclusion, argmax(α) τ-invariance, ‖ẑ⁻‖ ≤ 1, oracle agreement")
    } else {
        format!("failures {failures:?}")
    };
    Verdict::new(failures.is_empty(), detail)
}

// 6 ---------------------------------------------------------------------

fn momentum_case(m: f64) -> Result<String, String> {
    let mut cfg = RunConfig::load(Some(&configs_dir().join("smoke.toml")), &[]).map_err(|e| e.to_string())?;
    cfg.trainer.momentum = m;
    let corpus = pretrain_corpus(&cfg).map_err(|e| e.to_string())?;
    let setup = cfg.pretrain_setup();
    let epoch = (0..setup.trainer.epochs)
        .find(|&e| setup.phase(e) == Phase::Full)
        .ok_or("no full-phase epoch")?;
    let mut trainer = Pretrainer::new(&corpus, setup).map_err(|e| e.to_string())?;
    trainer.warm_up().map_err(|e| e.to_string())?;
    let mut rng = stream(cfg.seed, Stream::Epoch, epoch as u64);
    let videos: Vec<usize> = (0..corpus.videos().len()).collect();
    let batch = trainer.sample_batch(&videos, epoch, &mut rng).map_err(|e| e.to_string())?;
    if batch.iter().all(|t| t.negatives.is_empty()) {
        return Err("batch carries no intra-video negatives".into());
    }
    let query_prev: Vec<f64> = trainer.state.query.iter().copied().collect();
    let key_prev: Vec<f64> = trainer.state.key.iter().copied().collect();
    trainer.train_step(&batch, epoch, 0.05, &mut rng).map_err(|e| e.to_string())?;
    let query: Vec<f64> = trainer.state.query.iter().copied().collect();
    let key: Vec<f64> = trainer.state.key.iter().copied().collect();

    if trainer.state.optimizer.velocity.len() != query.len() {
        return Err(format!(
            "optimizer tracks {} parameters, query has {}",
            trainer.state.optimizer.velocity.len(),
            query.len()
        ));
    }
    if query == query_prev {
        return Err("query parameters did not move".into());
    }
    let worst = key
        .iter()
        .zip(&key_prev)
        .zip(&query)
        .map(|((k, kp), qp)| (k - (m * kp + (1.0 - m) * qp)).abs())
        .fold(0.0f64, f64::max);
    if worst >= MOMENTUM_TOL {
        return Err(format!("m={m}: max deviation {worst:.2e}"));
    }
    if m == 1.0 && key != key_prev {
        return Err("m=1 changed the key encoder".into());
    }
    Ok(format!("m={m} max dev {worst:.1e}"))
}

fn momentum_contract() -> Verdict {
    let results: Vec<Result<String, String>> = [0.999, 0.9, 1.0].into_iter().map(momentum_case).collect();
    let pass = results.iter().all(Result::is_ok);
    let text: Vec<String> = results
        .into_iter()
        .map(|r| r.unwrap_or_else(|e| format!("error: {e}")))
        .collect();
    Verdict::new(
        pass,
        format!("{} (tol {MOMENTUM_TOL:e}); optimizer state covers query parameters only", text.join(", ")),
    )
}

// 7 and 8 ----------------------------------------------------------------

const CONDITIONS: [(&str, &[(&str, &str)]); 5] = [
    ("cross", &[("trainer.negatives", "cross_only")]),
    ("intra", &[("trainer.negatives", "intra_only")]),
    ("joint", &[]),
    ("anti", &[("curriculum.mode", "anti")]),
    ("control", &[("curriculum.mode", "control")]),
];

struct DeskResults {
    accuracy: BTreeMap<&'static str, Vec<f64>>,
    random: Vec<f64>,
    elapsed: Duration,
    frames: (usize, usize),
    videos: usize,
    error: Option<String>,
}

impl DeskResults {
    fn mean(&self, c: &str) -> f64 {
        let v = &self.accuracy[c];
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn describe(&self, c: &str) -> String {
        let seeds: Vec<String> = self.accuracy[c].iter().map(|a| format!("{a:.3}")).collect();
        format!("{c} {:.4} [{}]", self.mean(c), seeds.join(" "))
    }
}

fn desk_protocol() -> DeskResults {
    let start = Instant::now();
    let path = configs_dir().join("desk.toml");
    let mut out = DeskResults {
        accuracy: BTreeMap::new(),
        random: Vec::new(),
        elapsed: Duration::ZERO,
        frames: (0, 0),
        videos: 0,
        error: None,
    };
    let run = |out: &mut DeskResults| -> vidcl_core::Result<()> {
        let base = RunConfig::load(Some(&path), &[])?;
        let corpus = pretrain_corpus(&base)?;
        let set = downstream_set(&base)?;
        let counts = corpus.frame_counts();
        out.videos = counts.len();
        out.frames = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
        for seed in 0..DESK_SEEDS {
            for (name, overrides) in CONDITIONS {
                let mut pairs: Vec<(String, String)> = vec![("seed".into(), seed.to_string())];
                pairs.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
                let cfg = RunConfig::load(Some(&path), &pairs)?;
                let acc = run_on(&cfg, &corpus, &set, None)?.accuracy();
                out.accuracy.entry(name).or_default().push(acc);
            }
            let arch = base.trainer.encoder_arch(corpus.image_shape).backbone;
            let cfg = RunConfig::load(Some(&path), &[("seed".into(), seed.to_string())])?;
            let cv = cross_validate(&Backbone::random(arch, seed), &set, &cfg.finetune_config())?;
            out.random.push(cv.summary.accuracy.map_or(f64::NAN, |m| m.mean));
        }
        Ok(())
    };
    if let Err(e) = run(&mut out) {
        out.error = Some(e.to_string());
    }
    out.elapsed = start.elapsed();
    out
}

fn desk_header(r: &DeskResults) -> String {
    format!(
        "{} seeds, {} videos of {}-{} frames, {:.1} min (budget 30 min)",
        DESK_SEEDS,
        r.videos,
        r.frames.0,
        r.frames.1,
        r.elapsed.as_secs_f64() / 60.0
    )
}

fn negative_types(r: &DeskResults) -> Verdict {
    if let Some(e) = &r.error {
        return Verdict::new(false, format!("error: {e}"));
    }
    let corpus_ok = r.videos >= 8 && r.frames.0 >= 40 && r.frames.1 <= 80;
    let joint = r.mean("joint");
    let pass = corpus_ok && r.elapsed < DESK_BUDGET && joint >= r.mean("cross") && joint >= r.mean("intra");
    Verdict::new(
        pass,
        format!(
            "mean accuracy joint ≥ cross and ≥ intra: {}; {}; {}; {}",
            r.describe("joint"),
            r.describe("cross"),
            r.describe("intra"),
            desk_header(r)
        ),
    )
}

fn curriculum_modes(r: &DeskResults) -> Verdict {
    if let Some(e) = &r.error {
        return Verdict::new(false, format!("error: {e}"));
    }
    let joint = r.mean("joint");
    Verdict::new(
        joint >= r.mean("anti") && joint >= r.mean("control"),
        format!(
            "mean accuracy proposed ≥ anti and ≥ control: {}; {}; {}",
            r.describe("joint").replacen("joint", "proposed", 1),
            r.describe("anti"),
            r.describe("control")
        ),
    )
}

// 9 ---------------------------------------------------------------------

struct Case {
    name: &'static str,
    classes: &'static [&'static str],
    confusion: &'static [&'static [usize]],
    accuracy: (usize, usize),
    specificity: Option<(usize, usize)>,
    sensitivity: Option<(usize, usize)>,
}

const CASES: [Case; 10] = [
    Case {
        name: "binary",
        classes: &["benign", "malignant"],
        confusion: &[&[8, 2], &[1, 9]],
        accuracy: (17, 20),
        specificity: Some((8, 10)),
        sensitivity: Some((9, 10)),
    },
    Case {
        name: "perfect",
        classes: &["benign", "malignant"],
        confusion: &[&[5, 0], &[0, 5]],
        accuracy: (10, 10),
        specificity: Some((5, 5)),
        sensitivity: Some((5, 5)),
    },
    Case {
        name: "all wrong",
        classes: &["benign", "malignant"],
        confusion: &[&[0, 4], &[6, 0]],
        accuracy: (0, 10),
        specificity: Some((0, 4)),
        sensitivity: Some((0, 6)),
    },
    Case {
        name: "always positive",
        classes: &["benign", "malignant"],
        confusion: &[&[0, 7], &[0, 3]],
        accuracy: (3, 10),
        specificity: Some((0, 7)),
        sensitivity: Some((3, 3)),
    },
    Case {
        name: "no positives",
        classes: &["benign", "malignant"],
        confusion: &[&[4, 1], &[0, 0]],
        accuracy: (4, 5),
        specificity: Some((4, 5)),
        sensitivity: None,
    },
    Case {
        name: "imbalanced",
        classes: &["benign", "malignant"],
        confusion: &[&[90, 10], &[3, 7]],
        accuracy: (97, 110),
        specificity: Some((90, 100)),
        sensitivity: Some((7, 10)),
    },
    Case {
        name: "three classes",
        classes: &["normal", "benign", "malignant"],
        confusion: &[&[5, 1, 0], &[2, 6, 1], &[0, 0, 7]],
        accuracy: (18, 22),
        specificity: None,
        sensitivity: None,
    },
    Case {
        name: "empty row",
        classes: &["a", "b", "c"],
        confusion: &[&[3, 0, 0], &[0, 0, 0], &[1, 0, 2]],
        accuracy: (5, 6),
        specificity: None,
        sensitivity: None,
    },
    Case {
        name: "positive listed first",
        classes: &["malignant", "normal"],
        confusion: &[&[6, 4], &[2, 8]],
        accuracy: (14, 20),
        specificity: Some((8, 10)),
        sensitivity: Some((6, 10)),
    },
    Case {
        name: "four classes",
        classes: &["w", "x", "y", "z"],
        confusion: &[&[1, 0, 0, 0], &[0, 2, 0, 0], &[0, 0, 3, 0], &[1, 1, 1, 1]],
        accuracy: (7, 10),
        specificity: None,
        sensitivity: None,
    },
];

/// A classifier whose prediction is the index of the brightest channel:
/// no conv blocks, average pooling over a 1×1 image, identity head.
fn channel_classifier(classes: &[String]) -> Classifier {
    let c = classes.len();
    let arch = BackboneArch {
        in_channels: c,
        height: 1,
        width: 1,
        blocks: Vec::new(),
        pool: Pool::Avg,
    };
    let mut head_params = vec![0.0; c * c + c];
    for i in 0..c {
        head_params[i * c + i] = 1.0;
    }
    Classifier {
        backbone: Backbone { arch, params: Vec::new() },
        head: Dense { inputs: c, outputs: c },
        head_params,
        classes: classes.to_vec(),
    }
}

fn one_hot(c: usize, i: usize) -> Image {
    let mut data = vec![0.0; c];
    data[i] = 1.0;
    Image::new(ImageShape::new(1, 1, c), data).unwrap()
}

fn check_case(case: &Case) -> Result<(), String> {
    let classes: Vec<String> = case.classes.iter().map(|s| s.to_string()).collect();
    let c = classes.len();
    let mut items = Vec::new();
    for (t, row) in case.confusion.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            for j in 0..count {
                items.push(LabeledImage {
                    image: one_hot(c, p),
                    label: t,
                    patient_id: format!("{t}-{p}-{j}"),
                });
            }
        }
    }
    let set = LabeledImageSet::new(items, classes.clone()).map_err(|e| e.to_string())?;
    let m = evaluate(&channel_classifier(&classes), &set, None).map_err(|e| e.to_string())?;
    let ratio = |r: Option<(usize, usize)>| r.map(|(a, b)| a as f64 / b as f64);
    let want_confusion: Vec<Vec<usize>> = case.confusion.iter().map(|r| r.to_vec()).collect();
    let want_recall: Vec<Option<f64>> = case
        .confusion
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let total: usize = r.iter().sum();
            (total > 0).then(|| r[i] as f64 / total as f64)
        })
        .collect();
    let checks = [
        ("confusion", m.confusion == want_confusion),
        ("accuracy", m.accuracy == case.accuracy.0 as f64 / case.accuracy.1 as f64),
        ("specificity", m.specificity == ratio(case.specificity)),
        ("sensitivity", m.sensitivity == ratio(case.sensitivity)),
        ("recall", m.per_class == want_recall),
    ];
    match checks.iter().find(|(_, ok)| !ok) {
        Some((what, _)) => Err(format!("{}: {what}", case.name)),
        None => Ok(()),
    }
}

fn folds_respect_patients() -> Result<usize, String> {
    let mut rng = StdRng::seed_from_u64(9);
    let shape = ImageShape::new(1, 1, 1);
    let mut sets = 0;
    for trial in 0..50u64 {
        let classes: Vec<String> = (0..rng.random_range(2..=4)).map(|i| format!("c{i}")).collect();
        let patients = rng.random_range(10..=40);
        let mut items = Vec::new();
        for p in 0..patients {
            for _ in 0..rng.random_range(1..=8) {
                items.push(LabeledImage {
                    image: Image::zeros(shape),
                    label: rng.random_range(0..classes.len()),
                    patient_id: format!("p{p}"),
                });
            }
        }
        let set = LabeledImageSet::new(items, classes).unwrap();
        let folds = group_stratified_folds(&set, 10, trial).map_err(|e| e.to_string())?;
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (it, &f) in set.items.iter().zip(&folds) {
            if f >= 10 || *seen.entry(it.patient_id.as_str()).or_insert(f) != f {
                return Err(format!("trial {trial}: patient {} split", it.patient_id));
            }
        }
        sets += 1;
    }
    Ok(sets)
}

fn metrics_correctness() -> Verdict {
    let failed: Vec<String> = CASES.iter().filter_map(|c| check_case(c).err()).collect();
    let folds = folds_respect_patients();
    let pass = failed.is_empty() && folds.is_ok();
    let folds_text = match &folds {
        Ok(n) => format!("10-fold CV kept every patient in one fold over {n} random group sets"),
        Err(e) => e.clone(),
    };
    Verdict::new(
        pass,
        format!(
            "{}/{} hand-computed confusion cases exact{}; {folds_text}",
            CASES.len() - failed.len(),
            CASES.len(),
            if failed.is_empty() { String::new() } else { format!(" (failed: {})", failed.join(", ")) }
        ),
    )
}

// 10 --------------------------------------------------------------------

fn vidcl(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vidcl"))
        .current_dir(cwd)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    match out.status.success() {
        true => Ok(()),
        false => Err(format!("vidcl {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim())),
    }
}

fn reproducibility() -> Verdict {
    let run = || -> Result<Vec<String>, String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let p = tmp.path();
        let cfg = configs_dir().join("smoke.toml");
        let cfg = cfg.to_str().unwrap();
        for r in ["1", "2"] {
            let pre = format!("pre{r}");
            let ckpt = format!("{pre}/checkpoints/final");
            let ft = format!("ft{r}");
            let clf = format!("{ft}/classifier");
            vidcl(p, &["pretrain", "--config", cfg, "--seed", "3", "--run-dir", &pre, "--log-mining"])?;
            vidcl(p, &["finetune", "--config", cfg, "--seed", "3", "--run-dir", &ft, "--checkpoint", &ckpt])?;
            vidcl(p, &["evaluate", "--config", cfg, "--seed", "3", "--run-dir", &format!("ev{r}"), "--classifier", &clf])?;
        }
        let files = [
            "pre{}/steplog.csv",
            "pre{}/mining.csv",
            "pre{}/checkpoints/final/params.bin",
            "ft{}/metrics.csv",
            "ft{}/classifier/params.bin",
            "ev{}/metrics.csv",
            "ev{}/confusion.csv",
        ];
        let mut differing = Vec::new();
        for f in files {
            let read = |r: &str| std::fs::read(p.join(f.replace("{}", r))).map_err(|e| format!("{f}: {e}"));
            if read("1")? != read("2")? {
                differing.push(f.replace("{}", "*"));
            }
        }
        Ok(differing)
    };
    match run() {
        Ok(d) if d.is_empty() => Verdict::new(
            true,
            "pretrain, finetune and evaluate run twice: step log, mining log, checkpoints and metrics byte-identical",
        ),
        Ok(d) => Verdict::new(false, format!("files differ: {}", d.join(", "))),
        Err(e) => Verdict::new(false, e),
    }
}

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("{} {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    type Check = fn() -> Verdict;
    let simple: [(u32, &str, Check); 6] = [
        (1, "loss oracle equivalence", loss_oracle),
        (2, "gradient check", gradient_check),
        (3, "sampler correctness", sampler_correctness),
        (4, "curriculum endpoints and monotonicity", curriculum),
        (5, "mining invariants", mining_properties),
        (6, "momentum contract", momentum_contract),
    ];
    for (n, name, check) in simple {
        if want(n) {
            report(n, name, check());
        }
    }
    if want(7) || want(8) {
        let desk = desk_protocol();
        let random: Vec<String> = desk.random.iter().map(|a| format!("{a:.3}")).collect();
        println!(
            "INFO    random backbone baseline {:.4} [{}]",
            desk.random.iter().sum::<f64>() / desk.random.len().max(1) as f64,
            random.join(" ")
        );
        if want(7) {
            report(7, "negative-type ordering", negative_types(&desk));
        }
        if want(8) {
            report(8, "curriculum ordering", curriculum_modes(&desk));
        }
    }
    if want(9) {
        report(9, "metrics correctness", metrics_correctness());
    }
    if want(10) {
        report(10, "reproducibility", reproducibility());
    }
    let failed = results.iter().filter(|(_, _, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
