use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use rayon::prelude::*;
use vidcl_core::curriculum::delta_high;
use vidcl_core::dataset::{generate_synthetic, labeled_frames, write_corpus};
use vidcl_core::downstream::{cross_validate, evaluate, finetune, format_table, Backbone, Classifier};
use vidcl_core::experiment::{downstream_set, input_shape, pretrain_corpus, run_on};
use vidcl_core::rng::{stream, Stream};
use vidcl_core::sampler::{histogram, negative_candidates, positive_support};
use vidcl_core::trainer::{run_pretraining, Pretrainer};
use vidcl_core::{CurriculumMode, Phase, RunConfig};

use crate::overrides::{grid_points, Axis};
use crate::rundir;

pub fn pretrain(cfg: &RunConfig, run_dir: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let corpus = pretrain_corpus(cfg)?;
    info!("corpus: {} videos, frames {:?}", corpus.videos().len(), corpus.frame_counts());
    let mut trainer = match resume {
        Some(ckpt) => Pretrainer::resume(&corpus, cfg.pretrain_setup(), ckpt)?,
        None => Pretrainer::new(&corpus, cfg.pretrain_setup())?,
    };
    let out = run_pretraining(&mut trainer, Some(run_dir))?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!("steps {}..={} loss {:.4} -> {:.4}", first.step, last.step, first.loss, last.loss);
    }
    if let Some(ckpt) = out.final_checkpoint {
        println!("checkpoint {}", ckpt.display());
    }
    println!("run {}", run_dir.display());
    Ok(())
}

pub enum BackboneSource<'a> {
    Checkpoint(&'a Path),
    Random,
}

pub fn finetune_cmd(cfg: &RunConfig, run_dir: &Path, source: BackboneSource<'_>) -> anyhow::Result<()> {
    let set = downstream_set(cfg)?;
    let backbone = match source {
        BackboneSource::Checkpoint(dir) => Backbone::from_checkpoint(dir)?,
        BackboneSource::Random => {
            let shape = set.items.first().map(|i| i.image.shape).map_or_else(|| input_shape(cfg), Ok)?;
            Backbone::random(cfg.trainer.encoder_arch(shape).backbone, cfg.seed)
        }
    };
    let ft = cfg.finetune_config();
    info!("labeled set: {} images, classes {:?}", set.len(), set.classes);
    if ft.folds >= 2 {
        let report = cross_validate(&backbone, &set, &ft)?;
        rundir::write(run_dir, "metrics.csv", &report.to_csv())?;
        print!("{}", format_table(&[("cv", &report.summary)], &report.classes));
    }
    let clf = finetune(&backbone, &set, &ft)?;
    clf.save(&run_dir.join("classifier"))?;
    println!("classifier {}", run_dir.join("classifier").display());
    println!("run {}", run_dir.display());
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, run_dir: &Path, classifier: &Path) -> anyhow::Result<()> {
    let clf = Classifier::load(classifier)?;
    let set = downstream_set(cfg)?;
    let m = evaluate(&clf, &set, cfg.downstream.positive_class.as_deref())?;
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:?}"));
    let mut csv = String::from("accuracy,specificity,sensitivity");
    for c in &m.classes {
        write!(csv, ",recall_{c}").unwrap();
    }
    write!(csv, "\n{:?},{},{}", m.accuracy, fmt(m.specificity), fmt(m.sensitivity)).unwrap();
    for r in &m.per_class {
        write!(csv, ",{}", fmt(*r)).unwrap();
    }
    csv.push('\n');
    rundir::write(run_dir, "metrics.csv", &csv)?;

    let mut confusion = String::from("true\\pred");
    for c in &m.classes {
        write!(confusion, ",{c}").unwrap();
    }
    confusion.push('\n');
    for (c, row) in m.classes.iter().zip(&m.confusion) {
        confusion.push_str(c);
        for v in row {
            write!(confusion, ",{v}").unwrap();
        }
        confusion.push('\n');
    }
    rundir::write(run_dir, "confusion.csv", &confusion)?;
    print!("{csv}{confusion}");
    Ok(())
}

pub fn gen_synthetic(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (corpus, truth) = generate_synthetic(&cfg.dataset.synthetic)?;
    let dir = out.join("pretrain");
    write_corpus(&corpus, &dir)?;
    truth.write_tsv(&dir.join("ground_truth.tsv"))?;

    let spec = &cfg.dataset.downstream_synthetic;
    let (held_out, held_truth) = generate_synthetic(spec)?;
    let set = labeled_frames(&held_out, &held_truth, cfg.dataset.labeled_per_class, spec.seed)?;
    let labels = set.write(&out.join("downstream"))?;
    println!(
        "corpus {} ({} videos), labels {} ({} images)",
        dir.join("manifest.toml").display(),
        corpus.videos().len(),
        labels.display(),
        set.len()
    );
    Ok(())
}

fn ranges(r: &[(usize, usize)]) -> String {
    if r.is_empty() {
        return "-".into();
    }
    r.iter()
        .map(|&(a, b)| if a == b { a.to_string() } else { format!("{a}-{b}") })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn inspect_sampler(
    cfg: &RunConfig,
    run_dir: &Path,
    frames: usize,
    exclusion: usize,
    draws: usize,
) -> anyhow::Result<String> {
    let sc = &cfg.sampler;
    let mut supports = String::from("anchor,positive,negative\n");
    for a in 1..=frames {
        let pos = positive_support(a, sc.delta, frames)?;
        let neg = negative_candidates(a, exclusion, frames);
        writeln!(supports, "{a},{},{}", ranges(&pos.ranges()), ranges(&neg.ranges())).unwrap();
    }
    let mut rng = stream(cfg.seed, Stream::Audit, 0);
    let h = histogram(frames, exclusion, sc, draws, &mut rng)?;
    let mut hist = String::from("index,anchor,positive,negative\n");
    for i in 0..frames {
        writeln!(hist, "{},{},{},{}", i + 1, h.anchor[i], h.positive[i], h.negative[i]).unwrap();
    }
    rundir::write(run_dir, "supports.csv", &supports)?;
    rundir::write(run_dir, "histogram.csv", &hist)?;
    Ok(format!(
        "# M={frames} delta={} exclusion={exclusion} k={} draws={draws} violations={}\n{supports}\n{hist}",
        sc.delta, sc.k, h.violations
    ))
}

pub fn inspect_curriculum(cfg: &RunConfig, run_dir: &Path, frames: usize) -> anyhow::Result<String> {
    let setup = cfg.pretrain_setup();
    let cur = setup.effective_curriculum();
    let high = delta_high(frames).max(cur.delta_low);
    let mut table = String::from("epoch,phase,lambda,delta\n");
    let mut rng = stream(cfg.seed, Stream::Audit, 1);
    for epoch in 0..cur.total_epochs {
        let state = cur.state(epoch);
        let phase = setup.phase(epoch);
        let lambda = state.lambda.map_or("NA".into(), |l| format!("{l:.4}"));
        let delta = match (phase, cur.mode) {
            (Phase::CrossOnly, _) => "-".to_string(),
            (_, CurriculumMode::Control) => format!("U[{},{high}]", cur.delta_low),
            _ => cur.delta_at(epoch, frames, &mut rng).to_string(),
        };
        writeln!(table, "{epoch},{phase},{lambda},{delta}").unwrap();
    }
    rundir::write(run_dir, "curriculum.csv", &table)?;
    Ok(format!(
        "# M={frames} mode={} delta_high={high} delta_low={} epochs={} cross_only_epochs={}\n{table}",
        cur.mode,
        cur.delta_low,
        cur.total_epochs,
        cur.cross_only_epochs()
    ))
}

/// Row of the sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: Vec<(String, String)>,
    pub accuracy: Option<(f64, f64)>,
    pub final_loss: f64,
}

pub fn sweep(
    load: impl Fn(&[(String, String)]) -> anyhow::Result<RunConfig> + Sync,
    axes: &[Axis],
    run_dir: &Path,
    jobs: usize,
) -> anyhow::Result<String> {
    if axes.is_empty() {
        bail!("sweep needs at least one axis, e.g. `k=1,3,5`");
    }
    let points = grid_points(axes);
    // Validate every point before spending time on any of them.
    let configs = points
        .iter()
        .map(|p| load(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;
    let rows: Vec<SweepRow> = pool.install(|| {
        points
            .par_iter()
            .zip(&configs)
            .enumerate()
            .map(|(i, (point, cfg))| run_point(cfg, point, &run_dir.join(format!("point-{i:03}"))))
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    let mut csv = axes.iter().map(|a| a.key.as_str()).collect::<Vec<_>>().join(",");
    csv.push_str(",accuracy_mean,accuracy_std,final_loss\n");
    for r in &rows {
        let vals: Vec<&str> = r.point.iter().map(|(_, v)| v.as_str()).collect();
        let (m, s) = r.accuracy.map_or(("NA".into(), "NA".into()), |(m, s)| (format!("{m:.4}"), format!("{s:.4}")));
        writeln!(csv, "{},{m},{s},{:.4}", vals.join(","), r.final_loss).unwrap();
    }
    rundir::write(run_dir, "sweep.csv", &csv)?;
    Ok(csv)
}

fn run_point(cfg: &RunConfig, point: &[(String, String)], dir: &Path) -> anyhow::Result<SweepRow> {
    let dir: PathBuf = rundir::create(Some(dir), dir, "sweep", cfg)?;
    let corpus = pretrain_corpus(cfg)?;
    let set = downstream_set(cfg)?;
    let out = run_on(cfg, &corpus, &set, Some(&dir)).with_context(|| format!("grid point {point:?}"))?;
    rundir::write(&dir, "metrics.csv", &out.cv.to_csv())?;
    info!("point {point:?}: accuracy {:.4}", out.accuracy());
    Ok(SweepRow {
        point: point.to_vec(),
        accuracy: out.cv.summary.accuracy.map(|a| (a.mean, a.std)),
        final_loss: out.pretrain.log.last().map_or(f64::NAN, |r| r.loss),
    })
}
