//! Bodies of the command-line subcommands, callable in-process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{PartitionStrategy, RunConfig};
use crate::data::{
    adamw_from_checkpoint, adamw_to_checkpoint, denoiser_from_checkpoint, denoiser_to_checkpoint,
    generate_pairs, load_checkpoint, load_checkpoint_as, sample_mog, save_checkpoint, PairedDataset, Role,
};
use crate::diffusion::{dsm_loss_and_grad, Denoiser};
use crate::distill::Generator;
use crate::error::{Error, Result};
use crate::eval::{
    eval_generators, export_histogram_csv, export_series_csv, hist_l1, teacher_histograms, ClassHistograms,
    EvalConfig, EvalReport,
};
use crate::msd::{
    check_bundles, partition_consecutive, partition_kmeans, train_msd, ArchTag, MsdConfig, MsdInputs,
    Partition, Progress, Stage, StudentBundle,
};
use crate::nn::{clip_grad_norm, AdamWState};
use crate::parallel::{derive_seed, stream_rng, Execution};

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const TEACHER_OPT_FILE: &str = "teacher_opt.ckpt";
pub const TEACHER_LOSS_FILE: &str = "teacher_loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const CONFIG_COPY: &str = "config.txt";

const SALT_TEACHER_INIT: u64 = 0x7e_ac;
const SALT_TEACHER_STEP: u64 = 0x7e_ad;
const SALT_PAIRS: u64 = 0x9a_1e;
const SALT_EVAL: u64 = 0xe7_a1;
const SALT_REF: u64 = 0x5e_f0;

/// Prepares `dir` for fresh output. Refuses to touch a non-empty directory
/// unless `force` is set, in which case its contents are removed.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::InvalidArgument(format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn refuse_existing_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Freshly initialized teacher for `cfg`.
pub fn init_teacher(cfg: &RunConfig) -> Result<Denoiser> {
    let mut rng = stream_rng(derive_seed(cfg.seed, SALT_TEACHER_INIT), 0);
    Denoiser::new(
        2,
        cfg.data.num_classes,
        &cfg.teacher.hidden,
        cfg.sigma_data,
        cfg.schedule,
        &mut rng,
    )
}

/// One DSM step at iteration `it`; the batch and noise come from `(seed, it)`.
pub fn teacher_step(teacher: &mut Denoiser, opt: &mut AdamWState, cfg: &RunConfig, it: u64) -> Result<f64> {
    let t = &cfg.teacher;
    let mut rng = stream_rng(derive_seed(cfg.seed, SALT_TEACHER_STEP), it);
    let (x, labels) = sample_mog(&cfg.data, t.batch_size, &mut rng)?;
    let (loss, mut grads) = dsm_loss_and_grad(teacher, &x, &labels, &mut rng)?;
    clip_grad_norm(&mut grads, t.grad_clip)?;
    opt.step(&mut teacher.net, &grads, t.lr, t.weight_decay)?;
    Ok(loss)
}

/// Trains a teacher in memory from iteration `start` to `cfg.teacher.iterations`.
pub fn train_teacher_from(
    teacher: &mut Denoiser,
    opt: &mut AdamWState,
    cfg: &RunConfig,
    start: u64,
    mut on_step: impl FnMut(u64, f64, &Denoiser, &AdamWState) -> Result<()>,
) -> Result<()> {
    for it in start..cfg.teacher.iterations as u64 {
        let loss = teacher_step(teacher, opt, cfg, it)?;
        on_step(it + 1, loss, teacher, opt)?;
    }
    Ok(())
}

fn new_teacher_opt(teacher: &Denoiser, cfg: &RunConfig) -> AdamWState {
    AdamWState::new(&teacher.net, cfg.teacher.beta1, cfg.teacher.beta2, 1e-8)
}

fn read_series(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::InvalidArgument(format!("bad row `{l}` in {}", path.display())))?;
            let bad = || Error::InvalidArgument(format!("bad row `{l}` in {}", path.display()));
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSummary {
    pub iterations: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checksum: String,
}

/// Trains the teacher into `out/teacher.ckpt` with its loss curve.
///
/// With `resume`, continues from the checkpoint already in `out`.
pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path, force: bool, resume: bool) -> Result<TeacherSummary> {
    cfg.validate()?;
    let ckpt_path = out.join(TEACHER_FILE);
    let opt_path = out.join(TEACHER_OPT_FILE);
    let loss_path = out.join(TEACHER_LOSS_FILE);
    let (mut teacher, mut opt, mut losses) = if resume && ckpt_path.exists() {
        let ck = load_checkpoint_as(&ckpt_path, Role::Teacher)?;
        if ck.seed != cfg.seed {
            return Err(Error::InvalidArgument(format!(
                "checkpoint was trained with seed {}, config says {}",
                ck.seed, cfg.seed
            )));
        }
        let teacher = denoiser_from_checkpoint(&ck)?;
        let opt = adamw_from_checkpoint(&load_checkpoint(&opt_path)?, &teacher.net)?;
        let mut losses = read_series(&loss_path)?;
        losses.retain(|(s, _)| *s <= ck.iteration);
        if opt.step_count() != ck.iteration || losses.len() as u64 != ck.iteration {
            return Err(Error::InvalidArgument(
                "teacher checkpoint, optimizer and loss curve disagree".into(),
            ));
        }
        (teacher, opt, losses)
    } else {
        prepare_out_dir(out, force)?;
        let teacher = init_teacher(cfg)?;
        let opt = new_teacher_opt(&teacher, cfg);
        (teacher, opt, Vec::new())
    };
    write_text(&out.join(CONFIG_COPY), &cfg.render())?;
    let start = opt.step_count();
    let every = cfg.teacher.checkpoint_every.max(1) as u64;
    let total = cfg.teacher.iterations as u64;
    let save = |t: &Denoiser, o: &AdamWState, it: u64, losses: &[(u64, f64)]| -> Result<()> {
        save_checkpoint(
            &ckpt_path,
            &denoiser_to_checkpoint(Role::Teacher, t, cfg.seed, it, BTreeMap::new()),
        )?;
        save_checkpoint(&opt_path, &adamw_to_checkpoint(o, &t.net, cfg.seed))?;
        export_series_csv("loss", losses, &loss_path)
    };
    train_teacher_from(&mut teacher, &mut opt, cfg, start, |it, loss, t, o| {
        losses.push((it, loss));
        if it % every == 0 || it == total {
            log::info!("teacher iteration {it}/{total} loss {loss:.5}");
            save(t, o, it, &losses)?;
        }
        Ok(())
    })?;
    if start >= total {
        save(&teacher, &opt, start, &losses)?;
    }
    Ok(TeacherSummary {
        iterations: opt.step_count(),
        initial_loss: losses.first().map_or(f64::NAN, |l| l.1),
        final_loss: losses.last().map_or(f64::NAN, |l| l.1),
        checksum: teacher.checksum(),
    })
}

pub fn load_teacher(path: &Path) -> Result<Denoiser> {
    denoiser_from_checkpoint(&load_checkpoint_as(path, Role::Teacher)?)
}

/// Samples `n` teacher pairs into `out`.
pub fn cmd_gen_pairs(
    teacher_path: &Path,
    n: usize,
    steps: usize,
    out: &Path,
    seed: u64,
    force: bool,
    exec: Execution,
) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::config("pairs.count", "must be positive"));
    }
    if steps == 0 {
        return Err(Error::config("pairs.sampler_steps", "must be positive"));
    }
    let teacher = load_teacher(teacher_path)?;
    refuse_existing_file(out, force)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let pairs = generate_pairs(&teacher, n, steps, derive_seed(seed, SALT_PAIRS), exec)?;
    pairs.save(out, seed)?;
    Ok(pairs)
}

pub fn build_partition(cfg: &RunConfig, k: usize, strategy: PartitionStrategy) -> Result<Partition> {
    match strategy {
        PartitionStrategy::Consecutive => partition_consecutive(cfg.data.num_classes, k),
        PartitionStrategy::Kmeans => {
            partition_kmeans(&cfg.data.class_means(), k, cfg.msd.kmeans_iters, cfg.seed)
        }
    }
}

pub fn msd_config(cfg: &RunConfig, teacher: &Denoiser, exec: Execution) -> MsdConfig {
    let arch = match cfg.msd.smaller {
        Some(w) => ArchTag::Smaller {
            hidden: vec![w; teacher.hidden_widths().len()],
        },
        None => ArchTag::SameSize,
    };
    MsdConfig {
        stages: cfg.msd.stages.clone(),
        tsm: cfg.tsm.clone(),
        dm: cfg.distill.clone(),
        adm: cfg.adm.clone(),
        arch,
        paired_filter: cfg.msd.paired_filter,
        head_hidden: cfg.msd.head_hidden.clone(),
        exec,
        report_every: cfg.eval.every,
    }
}

/// Teacher reference histograms, cached in `cache` when given.
pub fn teacher_reference(
    teacher: &Denoiser,
    cfg: &RunConfig,
    hist: &EvalConfig,
    seed: u64,
    cache: Option<&Path>,
    exec: Execution,
) -> Result<ClassHistograms> {
    let key = format!(
        "{}:{}:{}:{}:{}:{}",
        teacher.checksum(),
        cfg.eval.teacher_steps,
        hist.samples,
        hist.bins,
        hist.shard,
        seed
    );
    if let Some(p) = cache.filter(|p| p.exists()) {
        let ck = load_checkpoint_as(p, Role::Histogram)?;
        if ck.meta_str("key").ok() == Some(key.as_str()) {
            let h = ClassHistograms::from_checkpoint(&ck)?;
            if h.per_class[0].range() == (hist.lo, hist.hi) {
                return Ok(h);
            }
        }
    }
    let h = teacher_histograms(teacher, cfg.eval.teacher_steps, hist, seed, exec)?;
    if let Some(p) = cache {
        let mut meta = BTreeMap::new();
        meta.insert("key".into(), key);
        save_checkpoint(p, &h.to_checkpoint(seed, meta))?;
    }
    Ok(h)
}

fn reference_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, SALT_REF)
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, SALT_EVAL)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillOptions {
    pub force: bool,
    pub parallel: bool,
    /// Overrides `msd.stages`.
    pub stages: Option<Vec<Stage>>,
    /// Overrides `msd.smaller`.
    pub smaller: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DistillSummary {
    pub bundles: Vec<StudentBundle>,
    pub metrics: Vec<(u64, f64)>,
}

/// Distills into `cfg.msd.students` students under `out/student_k/`.
pub fn cmd_distill(
    cfg: &RunConfig,
    teacher_path: &Path,
    pairs_path: Option<&Path>,
    out: &Path,
    opts: &DistillOptions,
) -> Result<DistillSummary> {
    let mut cfg = cfg.clone();
    if let Some(s) = &opts.stages {
        cfg.msd.stages = s.clone();
    }
    if opts.smaller.is_some() {
        cfg.msd.smaller = opts.smaller;
    }
    cfg.validate()?;
    let teacher = load_teacher(teacher_path)?;
    let pairs = pairs_path.map(PairedDataset::load).transpose()?;
    if let Some(p) = &pairs {
        if p.teacher_checksum != teacher.checksum() {
            return Err(Error::InvalidArgument(
                "paired dataset was generated by a different teacher".into(),
            ));
        }
    }
    prepare_out_dir(out, opts.force)?;
    write_text(&out.join(CONFIG_COPY), &cfg.render())?;
    let exec = if opts.parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    let summary = distill_in_memory(&cfg, &teacher, pairs.as_ref(), exec, Some(out))?;
    for b in &summary.bundles {
        b.save(&out.join(format!("student_{}", b.index)), cfg.seed)?;
    }
    Ok(summary)
}

/// Distillation plus periodic collective evaluation; writes `metrics.csv`
/// into `out` when given.
pub fn distill_in_memory(
    cfg: &RunConfig,
    teacher: &Denoiser,
    pairs: Option<&PairedDataset>,
    exec: Execution,
    out: Option<&Path>,
) -> Result<DistillSummary> {
    let partition = build_partition(cfg, cfg.msd.students, cfg.msd.partition)?;
    let mcfg = msd_config(cfg, teacher, exec);
    let periodic = EvalConfig {
        samples: cfg.eval.periodic_samples,
        ..cfg.eval.hist.clone()
    };
    let eval_exec = Execution::for_threads(cfg.threads);
    let mut reference: Option<ClassHistograms> = None;
    let mut metrics: Vec<(u64, f64)> = Vec::new();
    let sigma_max = teacher.schedule.sigma_max;
    let mut observer = |p: &Progress<'_>| -> Result<()> {
        if cfg.eval.every == 0 && p.stage != *mcfg.stages.iter().max().expect("validated") {
            return Ok(());
        }
        let reference = match &reference {
            Some(r) => r,
            None => {
                let cache = out.map(|o| o.join("teacher_ref_periodic.ckpt"));
                reference.insert(teacher_reference(
                    teacher,
                    cfg,
                    &periodic,
                    reference_seed(cfg),
                    cache.as_deref(),
                    eval_exec,
                )?)
            }
        };
        let gens: Vec<&Generator> = p.generators.clone();
        let r = eval_generators(
            &partition,
            &gens,
            reference,
            &periodic,
            sigma_max,
            eval_seed(cfg),
            eval_exec,
        )?;
        log::info!("{} step {} l1 {:.4}", p.stage.as_str(), p.iteration, r.l1);
        metrics.push((p.iteration, r.l1));
        if let Some(o) = out {
            export_series_csv("l1", &metrics, &o.join(METRICS_FILE))?;
        }
        Ok(())
    };
    let inputs = MsdInputs {
        teacher,
        partition: &partition,
        paired: pairs,
        spec: &cfg.data,
    };
    let bundles = train_msd(&inputs, &mcfg, cfg.seed, &mut observer)?;
    Ok(DistillSummary { bundles, metrics })
}

/// Expands run directories into their `student_k` bundles, in index order.
pub fn collect_bundle_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join("generator.ckpt").exists() {
            dirs.push(p.clone());
            continue;
        }
        let mut found: Vec<(usize, PathBuf)> = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                let k = name.strip_prefix("student_")?.parse().ok()?;
                Some((k, e.path()))
            })
            .collect();
        if found.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no student bundles under {}",
                p.display()
            )));
        }
        found.sort();
        dirs.extend(found.into_iter().map(|(_, d)| d));
    }
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalOutcome {
    Students(EvalReport),
    /// Teacher against itself under two reference seeds.
    NoiseFloor {
        l1: f64,
    },
}

impl EvalOutcome {
    pub fn summary_line(&self) -> String {
        match self {
            EvalOutcome::Students(r) => format!("students={} l1={}", r.num_students, r.l1),
            EvalOutcome::NoiseFloor { l1 } => format!("students=teacher l1={l1}"),
        }
    }
}

/// Collective evaluation of student bundles, or the teacher noise floor
/// when `bundle_paths` is empty.
pub fn cmd_eval(
    cfg: &RunConfig,
    bundle_paths: &[PathBuf],
    teacher_path: &Path,
    out: &Path,
    force: bool,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    let teacher = load_teacher(teacher_path)?;
    let bundles = collect_bundle_dirs(bundle_paths)?
        .iter()
        .map(|d| StudentBundle::load(d))
        .collect::<Result<Vec<_>>>()?;
    if !bundles.is_empty() {
        check_bundles(&bundles)?;
        if bundles[0].partition.num_classes() != teacher.num_classes {
            return Err(Error::InvalidArgument(
                "students and teacher disagree on classes".into(),
            ));
        }
    }
    prepare_out_dir(out, force)?;
    let exec = Execution::for_threads(cfg.threads);
    let hist = &cfg.eval.hist;
    let cache = teacher_path.with_file_name("teacher_ref.ckpt");
    let reference = teacher_reference(&teacher, cfg, hist, reference_seed(cfg), Some(&cache), exec)?;
    export_histogram_csv(&reference.total()?, &out.join("teacher_hist.csv"))?;
    let outcome = if bundles.is_empty() {
        let other = teacher_histograms(&teacher, cfg.eval.teacher_steps, hist, eval_seed(cfg), exec)?;
        export_histogram_csv(&other.total()?, &out.join("teacher_hist_b.csv"))?;
        EvalOutcome::NoiseFloor {
            l1: hist_l1(&reference.total()?, &other.total()?)?,
        }
    } else {
        let partition = bundles[0].partition.clone();
        let gens: Vec<&Generator> = bundles.iter().map(|b| &b.generator).collect();
        let report = eval_generators(
            &partition,
            &gens,
            &reference,
            hist,
            teacher.schedule.sigma_max,
            eval_seed(cfg),
            exec,
        )?;
        export_histogram_csv(&report.students.total()?, &out.join("student_hist.csv"))?;
        let mut s = String::from("student,classes,l1\n");
        for (k, v) in report.per_student.iter().enumerate() {
            let cls: Vec<String> = partition.classes_of(k).iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{k},{},{v:e}\n", cls.join(" ")));
        }
        s.push_str(&format!("all,all,{:e}\n", report.l1));
        write_text(&out.join("eval.csv"), &s)?;
        EvalOutcome::Students(report)
    };
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub students: usize,
    pub batch: usize,
    pub strategy: PartitionStrategy,
    pub filter: crate::msd::PairedFilter,
    pub l1: f64,
    pub seed: u64,
}

/// Runs every cell of the ablation grid against one teacher and pair set.
///
/// Missing `teacher_path`/`pairs_path` are produced under `out` first.
pub fn cmd_ablate(
    cfg: &RunConfig,
    out: &Path,
    teacher_path: Option<&Path>,
    pairs_path: Option<&Path>,
    seeds: &[u64],
    force: bool,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    prepare_out_dir(out, force)?;
    write_text(&out.join(CONFIG_COPY), &cfg.render())?;
    let teacher = match teacher_path {
        Some(p) => load_teacher(p)?,
        None => {
            let dir = out.join("teacher");
            cmd_train_teacher(cfg, &dir, false, false)?;
            load_teacher(&dir.join(TEACHER_FILE))?
        }
    };
    let pairs = match pairs_path {
        Some(p) => PairedDataset::load(p)?,
        None => {
            let exec = Execution::for_threads(cfg.threads);
            let p = generate_pairs(
                &teacher,
                cfg.pairs.count,
                cfg.pairs.sampler_steps,
                derive_seed(cfg.seed, SALT_PAIRS),
                exec,
            )?;
            p.save(&out.join("pairs.ckpt"), cfg.seed)?;
            p
        }
    };
    let exec = Execution::for_threads(cfg.threads);
    let reference = teacher_reference(
        &teacher,
        cfg,
        &cfg.eval.hist,
        reference_seed(cfg),
        Some(&out.join("teacher_ref.ckpt")),
        exec,
    )?;
    let seeds = if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    };
    let a = &cfg.ablate;
    let mut rows = Vec::new();
    let header = "K,batch,strategy,filter_mode,l1,seed\n";
    for &k in &a.students {
        for &batch in &a.batch_sizes {
            for &strategy in &a.strategies {
                for &filter in &a.filters {
                    for &seed in &seeds {
                        let mut c = cfg.clone();
                        c.seed = seed;
                        c.msd.students = k;
                        c.msd.partition = strategy;
                        c.msd.paired_filter = filter;
                        c.distill.batch_size = batch;
                        c.eval.every = 0;
                        let run = distill_in_memory(&c, &teacher, Some(&pairs), Execution::Sequential, None)?;
                        let gens: Vec<&Generator> = run.bundles.iter().map(|b| &b.generator).collect();
                        let r = eval_generators(
                            &run.bundles[0].partition,
                            &gens,
                            &reference,
                            &cfg.eval.hist,
                            teacher.schedule.sigma_max,
                            eval_seed(&c),
                            exec,
                        )?;
                        log::info!(
                            "ablation K={k} batch={batch} {strategy} {filter} seed={seed}: l1 {:.4}",
                            r.l1
                        );
                        rows.push(AblationRow {
                            students: k,
                            batch,
                            strategy,
                            filter,
                            l1: r.l1,
                            seed,
                        });
                        let mut s = String::from(header);
                        for r in &rows {
                            s.push_str(&format!(
                                "{},{},{},{},{:e},{}\n",
                                r.students, r.batch, r.strategy, r.filter, r.l1, r.seed
                            ));
                        }
                        write_text(&out.join(ABLATION_FILE), &s)?;
                    }
                }
            }
        }
    }
    Ok(rows)
}
