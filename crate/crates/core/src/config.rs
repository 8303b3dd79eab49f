//! Run configuration: line-oriented `key = value` text with dotted sections.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! teacher.iterations = 10000
//! distill.lr = 1e-7
//! msd.stages = dm,adm
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::MogSpec;
use crate::diffusion::NoiseSchedule;
use crate::distill::{DistillConfig, TsmConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::msd::{PairedFilter, Stage};

/// Environment variable overriding `seed`.
pub const SEED_ENV: &str = "MSD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionStrategy {
    #[default]
    Consecutive,
    Kmeans,
}

impl FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consecutive" => Ok(Self::Consecutive),
            "kmeans" => Ok(Self::Kmeans),
            _ => Err(Error::InvalidArgument(format!(
                "unknown partition strategy `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for PartitionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Consecutive => "consecutive",
            Self::Kmeans => "kmeans",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128; 4],
            iterations: 10_000,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 256,
            grad_clip: 10.0,
            checkpoint_every: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairsConfig {
    pub count: usize,
    pub sampler_steps: usize,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            sampler_steps: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentsConfig {
    pub students: usize,
    pub partition: PartitionStrategy,
    pub kmeans_iters: usize,
    pub stages: Vec<Stage>,
    pub paired_filter: PairedFilter,
    pub head_hidden: Vec<usize>,
    /// Hidden width of narrower students; `None` copies the teacher.
    pub smaller: Option<usize>,
}

impl Default for StudentsConfig {
    fn default() -> Self {
        Self {
            students: 1,
            partition: PartitionStrategy::Consecutive,
            kmeans_iters: 100,
            stages: vec![Stage::Dm],
            paired_filter: PairedFilter::Full,
            head_hidden: vec![64],
            smaller: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub hist: EvalConfig,
    /// Heun grid used for teacher reference samples.
    pub teacher_steps: usize,
    /// Distillation iterations between metric evaluations; 0 evaluates at the end only.
    pub every: u64,
    /// Samples for intermediate evaluations (the final one uses `hist.samples`).
    pub periodic_samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            hist: EvalConfig::default(),
            teacher_steps: 64,
            every: 0,
            periodic_samples: 10_000,
        }
    }
}

/// Ablation sweep axes; every combination is one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub students: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub strategies: Vec<PartitionStrategy>,
    pub filters: Vec<PairedFilter>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            students: vec![1, 8],
            batch_sizes: vec![256],
            strategies: vec![PartitionStrategy::Consecutive],
            filters: vec![PairedFilter::Full],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: MogSpec,
    pub schedule: NoiseSchedule,
    pub sigma_data: f64,
    pub teacher: TeacherConfig,
    pub pairs: PairsConfig,
    pub distill: DistillConfig,
    pub adm: DistillConfig,
    pub tsm: TsmConfig,
    pub msd: StudentsConfig,
    pub eval: EvalSettings,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Iteration counts scaled down 10× from the reference recipe.
    pub fn desk() -> Self {
        let adm = DistillConfig {
            iterations: 2_000,
            generator_lr: 1e-6,
            fake_lr: 1e-6,
            regression_weight: 0.0,
            ..DistillConfig::default()
        };
        // A tenth of the iterations at ten times the step size keeps the
        // total step budget of the full recipe.
        let distill = DistillConfig {
            generator_lr: 1e-6,
            fake_lr: 1e-6,
            ..DistillConfig::default()
        };
        Self {
            seed: 0,
            threads: 1,
            data: MogSpec::default(),
            schedule: NoiseSchedule::default(),
            sigma_data: 0.5,
            // At 1e-4 the MLP stalls on an identity map at small σ and never
            // resolves the inner components; 1e-3 gets past it within 10k steps.
            teacher: TeacherConfig {
                lr: 1e-3,
                ..TeacherConfig::default()
            },
            pairs: PairsConfig::default(),
            distill,
            adm,
            // Same plateau as the teacher, which this stage imitates.
            tsm: TsmConfig {
                lr: 1e-3,
                ..TsmConfig::default()
            },
            msd: StudentsConfig::default(),
            eval: EvalSettings::default(),
            ablate: AblateConfig::default(),
        }
    }

    /// Full iteration counts: teacher 100k, distillation 200k.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.teacher = TeacherConfig {
            iterations: 100_000,
            ..TeacherConfig::default()
        };
        c.distill = DistillConfig {
            iterations: 200_000,
            ..DistillConfig::default()
        };
        c.adm.iterations = 20_000;
        c.tsm = TsmConfig {
            iterations: 100_000,
            ..TsmConfig::default()
        };
        c
    }

    pub fn parse_str(text: &str, base: Self) -> Result<Self> {
        let mut cfg = base;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", n + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Reads `path` on top of `base`, applies [`SEED_ENV`], then validates.
    pub fn load(path: &Path, base: Self) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse_str(&text, base)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_field(SEED_ENV, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let f = key;
        match key {
            "seed" => self.seed = parse_field(f, v)?,
            "threads" => self.threads = parse_field(f, v)?,
            "data.num_classes" => self.data.num_classes = parse_field(f, v)?,
            "data.components_per_class" => self.data.components_per_class = parse_field(f, v)?,
            "data.outer_radius" => self.data.outer_radius = parse_field(f, v)?,
            "data.inner_radius" => self.data.inner_radius = parse_field(f, v)?,
            "data.component_std" => self.data.component_std = parse_field(f, v)?,
            "schedule.sigma_min" => self.schedule.sigma_min = parse_field(f, v)?,
            "schedule.sigma_max" => self.schedule.sigma_max = parse_field(f, v)?,
            "schedule.num_steps" => self.schedule.num_steps = parse_field(f, v)?,
            "schedule.rho" => self.schedule.rho = parse_field(f, v)?,
            "schedule.sigma_data" => self.sigma_data = parse_field(f, v)?,
            "teacher.hidden" => self.teacher.hidden = parse_list(f, v)?,
            "teacher.iterations" => self.teacher.iterations = parse_field(f, v)?,
            "teacher.lr" => self.teacher.lr = parse_field(f, v)?,
            "teacher.weight_decay" => self.teacher.weight_decay = parse_field(f, v)?,
            "teacher.beta1" => self.teacher.beta1 = parse_field(f, v)?,
            "teacher.beta2" => self.teacher.beta2 = parse_field(f, v)?,
            "teacher.batch_size" => self.teacher.batch_size = parse_field(f, v)?,
            "teacher.grad_clip" => self.teacher.grad_clip = parse_field(f, v)?,
            "teacher.checkpoint_every" => self.teacher.checkpoint_every = parse_field(f, v)?,
            "pairs.count" => self.pairs.count = parse_field(f, v)?,
            "pairs.sampler_steps" => self.pairs.sampler_steps = parse_field(f, v)?,
            "tsm.iterations" => self.tsm.iterations = parse_field(f, v)?,
            "tsm.lr" => self.tsm.lr = parse_field(f, v)?,
            "tsm.weight_decay" => self.tsm.weight_decay = parse_field(f, v)?,
            "tsm.batch_size" => self.tsm.batch_size = parse_field(f, v)?,
            "tsm.grad_clip" => self.tsm.grad_clip = parse_field(f, v)?,
            "msd.students" => self.msd.students = parse_field(f, v)?,
            "msd.partition" => self.msd.partition = parse_field(f, v)?,
            "msd.kmeans_iters" => self.msd.kmeans_iters = parse_field(f, v)?,
            "msd.stages" => self.msd.stages = parse_list(f, v)?,
            "msd.paired_filter" => self.msd.paired_filter = parse_field(f, v)?,
            "msd.head_hidden" => self.msd.head_hidden = parse_list(f, v)?,
            "msd.smaller" => {
                self.msd.smaller = match v {
                    "" | "none" => None,
                    w => Some(parse_field(f, w)?),
                }
            }
            "eval.bins" => self.eval.hist.bins = parse_field(f, v)?,
            "eval.lo" => self.eval.hist.lo = parse_field(f, v)?,
            "eval.hi" => self.eval.hist.hi = parse_field(f, v)?,
            "eval.samples" => self.eval.hist.samples = parse_field(f, v)?,
            "eval.shard" => self.eval.hist.shard = parse_field(f, v)?,
            "eval.teacher_steps" => self.eval.teacher_steps = parse_field(f, v)?,
            "eval.every" => self.eval.every = parse_field(f, v)?,
            "eval.periodic_samples" => self.eval.periodic_samples = parse_field(f, v)?,
            "ablate.students" => self.ablate.students = parse_list(f, v)?,
            "ablate.batch_sizes" => self.ablate.batch_sizes = parse_list(f, v)?,
            "ablate.strategies" => self.ablate.strategies = parse_list(f, v)?,
            "ablate.filters" => self.ablate.filters = parse_list(f, v)?,
            _ => {
                if let Some(rest) = key.strip_prefix("distill.") {
                    set_distill(&mut self.distill, key, rest, v)?;
                } else if let Some(rest) = key.strip_prefix("adm.") {
                    set_distill(&mut self.adm, key, rest, v)?;
                } else {
                    return Err(Error::config(key, "unknown key"));
                }
            }
        }
        Ok(())
    }

    /// Checks every field; nothing trains before this passes.
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(Error::config(f, m));
        self.data
            .validate()
            .map_err(|e| Error::config("data", e.to_string()))?;
        self.schedule
            .validate()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        if !(self.sigma_data > 0.0) {
            return err("schedule.sigma_data", "must be positive");
        }
        let t = &self.teacher;
        if t.hidden.is_empty() || t.hidden.contains(&0) {
            return err("teacher.hidden", "need at least one positive width");
        }
        if t.iterations == 0 {
            return err("teacher.iterations", "must be positive");
        }
        if !(t.lr > 0.0) {
            return err("teacher.lr", "must be positive");
        }
        if !(t.weight_decay >= 0.0) {
            return err("teacher.weight_decay", "must be non-negative");
        }
        if !(t.beta1 > 0.0 && t.beta1 < 1.0) {
            return err("teacher.beta1", "must lie in (0, 1)");
        }
        if !(t.beta2 > 0.0 && t.beta2 < 1.0) {
            return err("teacher.beta2", "must lie in (0, 1)");
        }
        if t.batch_size == 0 {
            return err("teacher.batch_size", "must be positive");
        }
        if !(t.grad_clip > 0.0) {
            return err("teacher.grad_clip", "must be positive");
        }
        if self.pairs.count == 0 {
            return err("pairs.count", "must be positive");
        }
        if self.pairs.sampler_steps == 0 {
            return err("pairs.sampler_steps", "must be positive");
        }
        let n = self.schedule.num_steps;
        self.distill.validate(n)?;
        if self.msd.stages.contains(&Stage::Adm) {
            self.adm.validate(n).map_err(|e| match e {
                Error::Config { field, message } => {
                    Error::config(field.replacen("distill.", "adm.", 1), message)
                }
                other => other,
            })?;
        }
        if self.msd.stages.contains(&Stage::Tsm) {
            if self.tsm.iterations == 0 {
                return err("tsm.iterations", "must be positive");
            }
            if !(self.tsm.lr > 0.0) {
                return err("tsm.lr", "must be positive");
            }
            if self.tsm.batch_size == 0 {
                return err("tsm.batch_size", "must be positive");
            }
        }
        let s = &self.msd;
        if s.students == 0 || s.students > self.data.num_classes {
            return err("msd.students", "must lie in 1..=data.num_classes");
        }
        if s.kmeans_iters == 0 {
            return err("msd.kmeans_iters", "must be positive");
        }
        crate::msd::validate_stages(&s.stages).map_err(|e| Error::config("msd.stages", e.to_string()))?;
        if s.head_hidden.contains(&0) {
            return err("msd.head_hidden", "widths must be positive");
        }
        if s.smaller == Some(0) {
            return err("msd.smaller", "width must be positive");
        }
        if s.smaller.is_some() && !s.stages.contains(&Stage::Tsm) {
            return err("msd.smaller", "smaller students need the tsm stage");
        }
        self.eval.hist.validate()?;
        if self.eval.teacher_steps == 0 {
            return err("eval.teacher_steps", "must be positive");
        }
        if self.eval.periodic_samples == 0 {
            return err("eval.periodic_samples", "must be positive");
        }
        let a = &self.ablate;
        if a.students.is_empty() || a.students.iter().any(|&k| k == 0 || k > self.data.num_classes) {
            return err("ablate.students", "each K must lie in 1..=data.num_classes");
        }
        if a.batch_sizes.is_empty() || a.batch_sizes.contains(&0) {
            return err("ablate.batch_sizes", "need positive batch sizes");
        }
        if a.strategies.is_empty() {
            return err("ablate.strategies", "need at least one strategy");
        }
        if a.filters.is_empty() {
            return err("ablate.filters", "need at least one filter mode");
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        kv("data.num_classes", self.data.num_classes.to_string());
        kv(
            "data.components_per_class",
            self.data.components_per_class.to_string(),
        );
        kv("data.outer_radius", fmt_f(self.data.outer_radius));
        kv("data.inner_radius", fmt_f(self.data.inner_radius));
        kv("data.component_std", fmt_f(self.data.component_std));
        kv("schedule.sigma_min", fmt_f(self.schedule.sigma_min));
        kv("schedule.sigma_max", fmt_f(self.schedule.sigma_max));
        kv("schedule.num_steps", self.schedule.num_steps.to_string());
        kv("schedule.rho", fmt_f(self.schedule.rho));
        kv("schedule.sigma_data", fmt_f(self.sigma_data));
        let t = &self.teacher;
        kv("teacher.hidden", join(&t.hidden));
        kv("teacher.iterations", t.iterations.to_string());
        kv("teacher.lr", fmt_f(t.lr));
        kv("teacher.weight_decay", fmt_f(t.weight_decay));
        kv("teacher.beta1", fmt_f(t.beta1));
        kv("teacher.beta2", fmt_f(t.beta2));
        kv("teacher.batch_size", t.batch_size.to_string());
        kv("teacher.grad_clip", fmt_f(t.grad_clip));
        kv("teacher.checkpoint_every", t.checkpoint_every.to_string());
        kv("pairs.count", self.pairs.count.to_string());
        kv("pairs.sampler_steps", self.pairs.sampler_steps.to_string());
        for (p, d) in [("distill", &self.distill), ("adm", &self.adm)] {
            kv(&format!("{p}.lr"), fmt_f(d.generator_lr));
            kv(&format!("{p}.fake_lr"), fmt_f(d.fake_lr));
            kv(&format!("{p}.weight_decay"), fmt_f(d.weight_decay));
            kv(&format!("{p}.beta1"), fmt_f(d.beta1));
            kv(&format!("{p}.beta2"), fmt_f(d.beta2));
            kv(&format!("{p}.regression_weight"), fmt_f(d.regression_weight));
            kv(&format!("{p}.ttur_n"), d.ttur_n.to_string());
            kv(&format!("{p}.gan_gen_weight"), fmt_f(d.gan_gen_weight));
            kv(&format!("{p}.gan_disc_weight"), fmt_f(d.gan_disc_weight));
            kv(&format!("{p}.t_min"), d.t_min_index.to_string());
            kv(&format!("{p}.t_max"), d.t_max_index.to_string());
            kv(&format!("{p}.iterations"), d.iterations.to_string());
            kv(&format!("{p}.batch_size"), d.batch_size.to_string());
            kv(&format!("{p}.grad_clip"), fmt_f(d.grad_clip));
        }
        kv("tsm.iterations", self.tsm.iterations.to_string());
        kv("tsm.lr", fmt_f(self.tsm.lr));
        kv("tsm.weight_decay", fmt_f(self.tsm.weight_decay));
        kv("tsm.batch_size", self.tsm.batch_size.to_string());
        kv("tsm.grad_clip", fmt_f(self.tsm.grad_clip));
        let m = &self.msd;
        kv("msd.students", m.students.to_string());
        kv("msd.partition", m.partition.to_string());
        kv("msd.kmeans_iters", m.kmeans_iters.to_string());
        kv(
            "msd.stages",
            m.stages.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
        );
        kv("msd.paired_filter", m.paired_filter.to_string());
        kv("msd.head_hidden", join(&m.head_hidden));
        kv("msd.smaller", m.smaller.map_or("none".into(), |w| w.to_string()));
        let e = &self.eval;
        kv("eval.bins", e.hist.bins.to_string());
        kv("eval.lo", fmt_f(e.hist.lo));
        kv("eval.hi", fmt_f(e.hist.hi));
        kv("eval.samples", e.hist.samples.to_string());
        kv("eval.shard", e.hist.shard.to_string());
        kv("eval.teacher_steps", e.teacher_steps.to_string());
        kv("eval.every", e.every.to_string());
        kv("eval.periodic_samples", e.periodic_samples.to_string());
        let a = &self.ablate;
        kv("ablate.students", join(&a.students));
        kv("ablate.batch_sizes", join(&a.batch_sizes));
        kv("ablate.strategies", join(&a.strategies));
        kv("ablate.filters", join(&a.filters));
        s
    }
}

fn set_distill(d: &mut DistillConfig, key: &str, field: &str, v: &str) -> Result<()> {
    match field {
        "lr" => d.generator_lr = parse_field(key, v)?,
        "fake_lr" => d.fake_lr = parse_field(key, v)?,
        "weight_decay" => d.weight_decay = parse_field(key, v)?,
        "beta1" => d.beta1 = parse_field(key, v)?,
        "beta2" => d.beta2 = parse_field(key, v)?,
        "regression_weight" => d.regression_weight = parse_field(key, v)?,
        "ttur_n" => d.ttur_n = parse_field(key, v)?,
        "gan_gen_weight" => d.gan_gen_weight = parse_field(key, v)?,
        "gan_disc_weight" => d.gan_disc_weight = parse_field(key, v)?,
        "t_min" => d.t_min_index = parse_field(key, v)?,
        "t_max" => d.t_max_index = parse_field(key, v)?,
        "iterations" => d.iterations = parse_field(key, v)?,
        "batch_size" => d.batch_size = parse_field(key, v)?,
        "grad_clip" => d.grad_clip = parse_field(key, v)?,
        _ => return Err(Error::config(key, "unknown key")),
    }
    Ok(())
}

fn parse_field<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_field(key, s))
        .collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_f(v: f64) -> String {
    format!("{v:e}")
}
