//! Multi-student orchestration: partitioning the condition set, per-stage
//! data filtering, the TSM → DM → ADM pipeline and routed inference.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::data::{
    denoiser_from_checkpoint, denoiser_to_checkpoint, load_checkpoint_as, mlp_from_checkpoint,
    mlp_to_checkpoint, sample_mog_classes, save_checkpoint, MogSpec, PairedDataset, Role,
};
use crate::diffusion::Denoiser;
use crate::distill::{
    run_distillation, tsm_pretrain, DiscriminatorHead, DistillConfig, DistillState, Generator, StepMetrics,
    TsmConfig,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::parallel::{derive_seed, map_mut, stream_rng, Execution};

const SALT_TSM: u64 = 0x75_6d;
const SALT_INIT: u64 = 0x1417;
const SALT_DM: u64 = 0xd0_0000;
const SALT_ADM: u64 = 0xad_0000;
const SALT_HEAD: u64 = 0x4e_0000;

/// Restarts tried by [`partition_kmeans`]; the lowest-inertia run wins.
pub const KMEANS_RESTARTS: u64 = 16;

/// Disjoint, covering assignment of classes to students.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    num_students: usize,
    assignment: Vec<usize>,
}

impl Partition {
    /// Every student must own at least one class.
    pub fn new(num_students: usize, assignment: Vec<usize>) -> Result<Self> {
        if num_students == 0 || assignment.is_empty() {
            return Err(Error::InvalidArgument(
                "partition needs classes and students".into(),
            ));
        }
        let mut seen = vec![false; num_students];
        for (c, &s) in assignment.iter().enumerate() {
            if s >= num_students {
                return Err(Error::InvalidArgument(format!(
                    "class {c} assigned to student {s} of {num_students}"
                )));
            }
            seen[s] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Degenerate(format!("student {k} owns no classes")));
        }
        Ok(Self {
            num_students,
            assignment,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_students(&self) -> usize {
        self.num_students
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn student_of(&self, label: usize) -> Result<usize> {
        self.assignment.get(label).copied().ok_or(Error::UnknownLabel {
            label,
            num_classes: self.assignment.len(),
        })
    }

    pub fn classes_of(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&c| self.assignment[c] == k)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_students];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

impl fmt::Display for Partition {
    /// Comma-separated student index per class.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.assignment.iter().map(|a| a.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let assignment: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad partition `{s}`")))?;
        let k = assignment.iter().max().map_or(0, |m| m + 1);
        Self::new(k, assignment)
    }
}

/// Contiguous blocks in class order; the first `C mod K` blocks get one extra class.
pub fn partition_consecutive(num_classes: usize, k: usize) -> Result<Partition> {
    if k == 0 || k > num_classes {
        return Err(Error::InvalidArgument(format!(
            "cannot split {num_classes} classes among {k} students"
        )));
    }
    let (base, extra) = (num_classes / k, num_classes % k);
    let mut assignment = Vec::with_capacity(num_classes);
    for s in 0..k {
        let size = base + usize::from(s < extra);
        assignment.extend(std::iter::repeat_n(s, size));
    }
    Partition::new(k, assignment)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> (Vec<usize>, f64) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // Re-seed at the point farthest from its own centroid.
                let far = (0..points.len())
                    .map(|i| (i, sq_dist(&points[i], &centroids[assign[i]])))
                    .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b })
                    .0;
                centroids[j] = points[far].clone();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    (assign, inertia)
}

/// Lloyd's algorithm over per-class embedding vectors.
///
/// Each restart seeds centroids by D²-weighted farthest-point sampling from
/// its own RNG stream; the run with the lowest inertia is kept (earliest on
/// ties). Students are numbered in order of their smallest class.
pub fn partition_kmeans(embeddings: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<Partition> {
    let n = embeddings.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {n} classes"
        )));
    }
    let dim = embeddings[0].len();
    if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::InvalidArgument(
            "embeddings must share a positive dimension".into(),
        ));
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("class embeddings".into()));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for r in 0..KMEANS_RESTARTS {
        let mut rng = stream_rng(seed, r);
        let mut centroids = vec![embeddings[rng.random_range(0..n)].clone()];
        while centroids.len() < k {
            let d: Vec<f64> = embeddings.iter().map(|p| nearest(p, &centroids).1).collect();
            let total: f64 = d.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, di) in d.iter().enumerate() {
                    if u < *di {
                        idx = i;
                        break;
                    }
                    u -= di;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            centroids.push(embeddings[pick].clone());
        }
        let (assign, inertia) = lloyd(embeddings, centroids, max_iters.max(1));
        if best
            .as_ref()
            .is_none_or(|b| inertia < b.1 - 1e-12 * b.1.abs().max(1e-300))
        {
            best = Some((assign, inertia));
        }
    }
    let (assign, _) = best.expect("at least one restart");
    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    for &a in &assign {
        if relabel[a] == usize::MAX {
            relabel[a] = next;
            next += 1;
        }
    }
    Partition::new(k, assign.iter().map(|&a| relabel[a]).collect())
}

/// Whether DM regression uses all pairs or only the student's classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairedFilter {
    #[default]
    Full,
    Strict,
}

impl FromStr for PairedFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "strict" => Ok(Self::Strict),
            _ => Err(Error::InvalidArgument(format!("unknown paired filter `{s}`"))),
        }
    }
}

impl fmt::Display for PairedFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Strict => "strict",
        })
    }
}

/// Subset of a paired dataset visible to one student.
#[derive(Debug, Clone)]
pub struct PairedView<'a> {
    data: &'a PairedDataset,
    indices: Vec<usize>,
}

impl<'a> PairedView<'a> {
    pub fn full(data: &'a PairedDataset) -> Self {
        Self {
            data,
            indices: (0..data.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dataset(&self) -> &'a PairedDataset {
        self.data
    }

    /// Uniformly chosen dataset row among the visible entries.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.indices[rng.random_range(0..self.indices.len())]
    }

    /// `(z, labels, y)` for dataset rows `idx`.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>, Matrix) {
        (
            self.data.z.select_rows(idx),
            idx.iter().map(|&i| self.data.labels[i]).collect(),
            self.data.y.select_rows(idx),
        )
    }
}

/// Real-data sampler restricted to a set of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSampler {
    pub spec: MogSpec,
    pub classes: Vec<usize>,
}

impl RealSampler {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Matrix, Vec<usize>)> {
        sample_mog_classes(&self.spec, n, &self.classes, rng)
    }
}

/// What one student sees during one stage.
#[derive(Debug, Clone)]
pub struct FilteredData<'a> {
    pub paired: Option<PairedView<'a>>,
    pub conditions: Vec<usize>,
    pub real: Option<RealSampler>,
}

impl FilteredData<'_> {
    /// Condition draws only: no pairs, no real data.
    pub fn conditions_only(partition: &Partition, k: usize) -> Result<Self> {
        check_student(partition, k)?;
        Ok(Self {
            paired: None,
            conditions: partition.classes_of(k),
            real: None,
        })
    }
}

fn check_student(partition: &Partition, k: usize) -> Result<()> {
    if k >= partition.num_students() {
        return Err(Error::InvalidArgument(format!(
            "student {k} out of range for {} students",
            partition.num_students()
        )));
    }
    Ok(())
}

/// DM-stage data: conditions restricted to the student's classes, pairs
/// untouched (`Full`) or restricted as well (`Strict`).
pub fn filter_dm<'a>(
    paired: &'a PairedDataset,
    partition: &Partition,
    k: usize,
    mode: PairedFilter,
) -> Result<FilteredData<'a>> {
    check_student(partition, k)?;
    let conditions = partition.classes_of(k);
    let view = match mode {
        PairedFilter::Full => PairedView::full(paired),
        PairedFilter::Strict => {
            let indices = paired.indices_with_labels(&conditions);
            if indices.is_empty() {
                return Err(Error::Degenerate(format!(
                    "no paired entries carry the labels of student {k}"
                )));
            }
            PairedView {
                data: paired,
                indices,
            }
        }
    };
    Ok(FilteredData {
        paired: Some(view),
        conditions,
        real: None,
    })
}

/// ADM-stage data: real samples and conditions both restricted to the
/// student's classes.
pub fn filter_adm(spec: &MogSpec, partition: &Partition, k: usize) -> Result<FilteredData<'static>> {
    check_student(partition, k)?;
    if partition.num_classes() != spec.num_classes {
        return Err(Error::dim(
            "partition classes",
            spec.num_classes,
            partition.num_classes(),
        ));
    }
    let conditions = partition.classes_of(k);
    Ok(FilteredData {
        paired: None,
        real: Some(RealSampler {
            spec: *spec,
            classes: conditions.clone(),
        }),
        conditions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Tsm,
    Dm,
    Adm,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Tsm => "tsm",
            Stage::Dm => "dm",
            Stage::Adm => "adm",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tsm" => Ok(Stage::Tsm),
            "dm" => Ok(Stage::Dm),
            "adm" => Ok(Stage::Adm),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        }
    }
}

/// Student network size relative to the teacher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchTag {
    SameSize,
    Smaller { hidden: Vec<usize> },
}

impl fmt::Display for ArchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchTag::SameSize => f.write_str("same"),
            ArchTag::Smaller { hidden } => {
                let h: Vec<String> = hidden.iter().map(|w| w.to_string()).collect();
                write!(f, "smaller:{}", h.join("-"))
            }
        }
    }
}

impl FromStr for ArchTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "same" {
            return Ok(ArchTag::SameSize);
        }
        let hidden = s
            .strip_prefix("smaller:")
            .and_then(|h| {
                h.split('-')
                    .map(|w| w.parse().ok())
                    .collect::<Option<Vec<usize>>>()
            })
            .filter(|h| !h.is_empty() && h.iter().all(|&w| w > 0))
            .ok_or_else(|| Error::InvalidArgument(format!("bad architecture tag `{s}`")))?;
        Ok(ArchTag::Smaller { hidden })
    }
}

/// Sorts and deduplicates `stages`, rejecting orders the pipeline cannot run.
pub fn validate_stages(stages: &[Stage]) -> Result<Vec<Stage>> {
    let mut s = stages.to_vec();
    s.sort();
    s.dedup();
    if s.is_empty() {
        return Err(Error::StageOrder("no stages requested".into()));
    }
    if s.contains(&Stage::Adm) && !s.contains(&Stage::Dm) {
        return Err(Error::StageOrder("adm requires a preceding dm stage".into()));
    }
    if s == [Stage::Tsm] {
        return Err(Error::StageOrder("tsm alone produces no generator".into()));
    }
    Ok(s)
}

/// One trained student with everything needed to resume or serve it.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentBundle {
    pub index: usize,
    pub partition: Partition,
    pub generator: Generator,
    pub fake: Denoiser,
    pub disc_head: Option<DiscriminatorHead>,
    pub stages: Vec<Stage>,
    pub arch: ArchTag,
    pub iteration: u64,
}

impl StudentBundle {
    /// Most recent completed stage.
    pub fn stage(&self) -> Option<Stage> {
        self.stages.last().copied()
    }

    /// Records completion of `stage`; stages only move forward.
    pub fn advance(&mut self, stage: Stage) -> Result<()> {
        if let Some(last) = self.stage() {
            if stage <= last {
                return Err(Error::StageOrder(format!(
                    "cannot enter {} after {}",
                    stage.as_str(),
                    last.as_str()
                )));
            }
        }
        if stage == Stage::Adm && !self.stages.contains(&Stage::Dm) {
            return Err(Error::StageOrder("adm requires a completed dm stage".into()));
        }
        self.stages.push(stage);
        Ok(())
    }

    pub fn classes(&self) -> Vec<usize> {
        self.partition.classes_of(self.index)
    }

    /// Writes `generator.ckpt`, `fake.ckpt` and, when present, `disc_head.ckpt`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stages: Vec<&str> = self.stages.iter().map(|s| s.as_str()).collect();
        let mut meta = BTreeMap::new();
        meta.insert("student".into(), self.index.to_string());
        meta.insert("num_students".into(), self.partition.num_students().to_string());
        meta.insert("partition".into(), self.partition.to_string());
        meta.insert("num_classes".into(), self.generator.num_classes.to_string());
        meta.insert("latent_dim".into(), self.generator.latent_dim.to_string());
        meta.insert("stages".into(), stages.join(","));
        meta.insert("arch_tag".into(), self.arch.to_string());
        save_checkpoint(
            &dir.join("generator.ckpt"),
            &mlp_to_checkpoint(Role::Generator, &self.generator.net, seed, self.iteration, meta),
        )?;
        save_checkpoint(
            &dir.join("fake.ckpt"),
            &denoiser_to_checkpoint(Role::Fake, &self.fake, seed, self.iteration, BTreeMap::new()),
        )?;
        let head = dir.join("disc_head.ckpt");
        match &self.disc_head {
            Some(h) => save_checkpoint(
                &head,
                &mlp_to_checkpoint(Role::DiscHead, &h.net, seed, self.iteration, BTreeMap::new()),
            )?,
            None if head.exists() => std::fs::remove_file(&head).map_err(|e| Error::io(&head, e))?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let g = load_checkpoint_as(&dir.join("generator.ckpt"), Role::Generator)?;
        let partition: Partition = g.meta_str("partition")?.parse()?;
        let k: usize = g.meta_parse("num_students")?;
        if k != partition.num_students() {
            return Err(Error::CorruptHeader(
                "student count disagrees with partition".into(),
            ));
        }
        let generator = Generator::from_net(
            mlp_from_checkpoint(&g)?,
            g.meta_parse("latent_dim")?,
            g.meta_parse("num_classes")?,
        )?;
        let fake = denoiser_from_checkpoint(&load_checkpoint_as(&dir.join("fake.ckpt"), Role::Fake)?)?;
        let head_path = dir.join("disc_head.ckpt");
        let disc_head = if head_path.exists() {
            let h = load_checkpoint_as(&head_path, Role::DiscHead)?;
            Some(DiscriminatorHead::from_net(mlp_from_checkpoint(&h)?)?)
        } else {
            None
        };
        let stages = g
            .meta_str("stages")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(Stage::from_str)
            .collect::<Result<Vec<_>>>()?;
        let index: usize = g.meta_parse("student")?;
        if index >= k {
            return Err(Error::CorruptHeader(format!("student index {index} >= {k}")));
        }
        Ok(Self {
            index,
            partition,
            generator,
            fake,
            disc_head,
            stages,
            arch: g.meta_str("arch_tag")?.parse()?,
            iteration: g.iteration,
        })
    }
}

/// Per-stage settings for [`train_msd`].
#[derive(Debug, Clone, PartialEq)]
pub struct MsdConfig {
    pub stages: Vec<Stage>,
    pub tsm: TsmConfig,
    pub dm: DistillConfig,
    pub adm: DistillConfig,
    pub arch: ArchTag,
    pub paired_filter: PairedFilter,
    pub head_hidden: Vec<usize>,
    pub exec: Execution,
    /// Observer cadence in generator updates; 0 reports only at stage ends.
    pub report_every: u64,
}

impl Default for MsdConfig {
    fn default() -> Self {
        let adm = DistillConfig {
            iterations: 0,
            regression_weight: 0.0,
            ..DistillConfig::default()
        };
        Self {
            stages: vec![Stage::Dm],
            tsm: TsmConfig::default(),
            dm: DistillConfig::default(),
            adm,
            arch: ArchTag::SameSize,
            paired_filter: PairedFilter::Full,
            head_hidden: vec![64],
            exec: Execution::Sequential,
            report_every: 0,
        }
    }
}

/// Snapshot handed to the [`train_msd`] observer.
pub struct Progress<'a> {
    pub stage: Stage,
    pub iteration: u64,
    pub generators: Vec<&'a Generator>,
    pub last_metrics: &'a [Option<StepMetrics>],
}

/// Shared inputs of a multi-student run.
pub struct MsdInputs<'a> {
    pub teacher: &'a Denoiser,
    pub partition: &'a Partition,
    pub paired: Option<&'a PairedDataset>,
    pub spec: &'a MogSpec,
}

/// Initial student denoiser: the teacher for same-size students, otherwise a
/// fresh narrower network, TSM-pretrained when requested. Returns the TSM
/// loss curve alongside.
pub fn initial_student(
    inputs: &MsdInputs<'_>,
    cfg: &MsdConfig,
    stages: &[Stage],
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    let t = inputs.teacher;
    let mut student = match &cfg.arch {
        ArchTag::SameSize => t.clone(),
        ArchTag::Smaller { hidden } => {
            let mut rng = stream_rng(derive_seed(seed, SALT_INIT), 0);
            Denoiser::new(
                t.data_dim(),
                t.num_classes,
                hidden,
                t.sigma_data,
                t.schedule,
                &mut rng,
            )?
        }
    };
    let mut curve = Vec::new();
    if stages.contains(&Stage::Tsm) {
        curve = tsm_pretrain(
            &mut student,
            t,
            inputs.spec,
            &cfg.tsm,
            derive_seed(seed, SALT_TSM),
        )?;
    }
    Ok((student, curve))
}

fn run_stage(
    states: &mut [DistillState],
    data: &[FilteredData<'_>],
    seeds: &[u64],
    teacher: &Denoiser,
    cfg: &DistillConfig,
    stage: Stage,
    report_every: u64,
    exec: Execution,
    observer: &mut dyn FnMut(&Progress<'_>) -> Result<()>,
) -> Result<()> {
    let start = states.first().map_or(0, |s| s.iteration);
    let end = start + cfg.iterations as u64;
    let mut done = start;
    let mut last: Vec<Option<StepMetrics>> = vec![None; states.len()];
    while done < end {
        let target = if report_every == 0 {
            end
        } else {
            (done + report_every).min(end)
        };
        let out = map_mut(states, exec, |i, st| {
            run_distillation(st, teacher, cfg, &data[i], seeds[i], target)
        })?;
        for (l, m) in last.iter_mut().zip(out) {
            if let Some(m) = m.last() {
                *l = Some(m.clone());
            }
        }
        done = target;
        log::info!("{} iteration {done}/{end}", stage.as_str());
        observer(&Progress {
            stage,
            iteration: done,
            generators: states.iter().map(|s| &s.generator).collect(),
            last_metrics: &last,
        })?;
    }
    Ok(())
}

/// Runs the requested stages for every student of `inputs.partition`.
///
/// Students share the teacher, the pairs and (for smaller students) one TSM
/// initialization; each owns its generator, fake score and optimizers.
pub fn train_msd(
    inputs: &MsdInputs<'_>,
    cfg: &MsdConfig,
    seed: u64,
    observer: &mut dyn FnMut(&Progress<'_>) -> Result<()>,
) -> Result<Vec<StudentBundle>> {
    let stages = validate_stages(&cfg.stages)?;
    let teacher = inputs.teacher;
    let partition = inputs.partition;
    if partition.num_classes() != teacher.num_classes {
        return Err(Error::dim(
            "partition classes",
            teacher.num_classes,
            partition.num_classes(),
        ));
    }
    let num_steps = teacher.schedule.num_steps;
    cfg.dm.validate(num_steps)?;
    if stages.contains(&Stage::Adm) {
        cfg.adm.validate(num_steps)?;
    }
    let needs_pairs = stages.contains(&Stage::Dm) && cfg.dm.regression_weight > 0.0;
    if needs_pairs && inputs.paired.is_none() {
        return Err(Error::config(
            "distill.regression_weight",
            "positive weight needs a paired dataset",
        ));
    }
    let (init, _) = initial_student(inputs, cfg, &stages, seed)?;
    let k = partition.num_students();
    let mut states: Vec<DistillState> = (0..k)
        .map(|_| {
            Ok(DistillState::new(
                Generator::from_denoiser(&init)?,
                init.clone(),
                &cfg.dm,
            ))
        })
        .collect::<Result<_>>()?;

    let mut bundles_stages = vec![Vec::new(); k];
    if stages.contains(&Stage::Tsm) {
        bundles_stages
            .iter_mut()
            .for_each(|s: &mut Vec<Stage>| s.push(Stage::Tsm));
    }

    if stages.contains(&Stage::Dm) {
        let data = (0..k)
            .map(|s| match inputs.paired.filter(|_| needs_pairs) {
                Some(p) => filter_dm(p, partition, s, cfg.paired_filter),
                None => FilteredData::conditions_only(partition, s),
            })
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..k).map(|s| derive_seed(seed, SALT_DM + s as u64)).collect();
        run_stage(
            &mut states,
            &data,
            &seeds,
            teacher,
            &cfg.dm,
            Stage::Dm,
            cfg.report_every,
            cfg.exec,
            observer,
        )?;
        bundles_stages.iter_mut().for_each(|s| s.push(Stage::Dm));
    }

    if stages.contains(&Stage::Adm) {
        for (s, st) in states.iter_mut().enumerate() {
            let mut rng = stream_rng(derive_seed(seed, SALT_HEAD + s as u64), 0);
            st.attach_head(&cfg.head_hidden, &cfg.adm, &mut rng)?;
        }
        let data = (0..k)
            .map(|s| filter_adm(inputs.spec, partition, s))
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..k).map(|s| derive_seed(seed, SALT_ADM + s as u64)).collect();
        run_stage(
            &mut states,
            &data,
            &seeds,
            teacher,
            &cfg.adm,
            Stage::Adm,
            cfg.report_every,
            cfg.exec,
            observer,
        )?;
        bundles_stages.iter_mut().for_each(|s| s.push(Stage::Adm));
    }

    Ok(states
        .into_iter()
        .zip(bundles_stages)
        .enumerate()
        .map(|(index, (st, stages))| StudentBundle {
            index,
            partition: partition.clone(),
            generator: st.generator,
            fake: st.fake,
            disc_head: st.adversarial.map(|a| a.head),
            stages,
            arch: cfg.arch.clone(),
            iteration: st.iteration,
        })
        .collect())
}

/// Checks that `bundles` are students `0..K` of one shared partition.
pub fn check_bundles(bundles: &[StudentBundle]) -> Result<&Partition> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::InvalidArgument("no student bundles".into()))?;
    let p = &first.partition;
    if bundles.len() != p.num_students() {
        return Err(Error::InvalidArgument(format!(
            "partition has {} students but {} bundles were given",
            p.num_students(),
            bundles.len()
        )));
    }
    for (i, b) in bundles.iter().enumerate() {
        if b.partition != *p {
            return Err(Error::InvalidArgument(format!(
                "student {i} uses a different partition"
            )));
        }
        if b.index != i {
            return Err(Error::InvalidArgument(format!(
                "bundle {i} carries student index {}",
                b.index
            )));
        }
    }
    Ok(p)
}

/// Routes each row to the generator owning its label; one network
/// evaluation per row.
pub fn route_generators(
    partition: &Partition,
    generators: &[&Generator],
    z: &Matrix,
    labels: &[usize],
) -> Result<Matrix> {
    if generators.len() != partition.num_students() {
        return Err(Error::dim(
            "routed generators",
            partition.num_students(),
            generators.len(),
        ));
    }
    if labels.len() != z.rows() {
        return Err(Error::dim("routed labels", z.rows(), labels.len()));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); generators.len()];
    for (i, &y) in labels.iter().enumerate() {
        groups[partition.student_of(y)?].push(i);
    }
    let dim = generators[0].data_dim();
    let mut out = Matrix::zeros(z.rows(), dim);
    for (s, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let sub_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let x = generators[s].generate(&z.select_rows(rows), &sub_labels)?;
        for (j, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(j));
        }
    }
    Ok(out)
}

pub fn route_batch(bundles: &[StudentBundle], z: &Matrix, labels: &[usize]) -> Result<Matrix> {
    let p = check_bundles(bundles)?;
    let gens: Vec<&Generator> = bundles.iter().map(|b| &b.generator).collect();
    route_generators(p, &gens, z, labels)
}

/// Single-sample routed generation.
pub fn route_and_generate(bundles: &[StudentBundle], z: &[f64], label: usize) -> Result<Vec<f64>> {
    let zm = Matrix::from_vec(1, z.len(), z.to_vec())?;
    Ok(route_batch(bundles, &zm, &[label])?.into_vec())
}
