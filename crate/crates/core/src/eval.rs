//! Histogram-based distribution distance and CSV export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::data::{sample_teacher, Checkpoint, Role};
use crate::diffusion::Denoiser;
use crate::distill::{draw_latents, Generator};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::msd::{route_generators, Partition};
use crate::parallel::{map_indexed, stream_rng, Execution};

/// Square 2D histogram over `[lo, hi]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    bins: usize,
    lo: f64,
    hi: f64,
    /// Row-major by x index: `counts[ix * bins + iy]`.
    counts: Vec<f64>,
    total_samples: u64,
    out_of_range: u64,
}

impl Histogram2D {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "invalid histogram range [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            bins,
            lo,
            hi,
            counts: vec![0.0; bins * bins],
            total_samples: 0,
            out_of_range: 0,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn total_samples(&self) -> u64 {
        self.total_samples
    }

    pub fn out_of_range(&self) -> u64 {
        self.out_of_range
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn count(&self, ix: usize, iy: usize) -> f64 {
        self.counts[ix * self.bins + iy]
    }

    fn index(&self, v: f64) -> Option<usize> {
        if !(v >= self.lo && v <= self.hi) {
            return None;
        }
        let w = (self.hi - self.lo) / self.bins as f64;
        Some((((v - self.lo) / w).floor() as usize).min(self.bins - 1))
    }

    pub fn add(&mut self, x: f64, y: f64) {
        self.total_samples += 1;
        match (self.index(x), self.index(y)) {
            (Some(ix), Some(iy)) => self.counts[ix * self.bins + iy] += 1.0,
            _ => self.out_of_range += 1,
        }
    }

    pub fn add_rows(&mut self, samples: &Matrix) -> Result<()> {
        if samples.cols() != 2 {
            return Err(Error::dim("histogram samples", 2, samples.cols()));
        }
        for i in 0..samples.rows() {
            let r = samples.row(i);
            self.add(r[0], r[1]);
        }
        Ok(())
    }

    pub fn from_samples(samples: &Matrix, bins: usize, lo: f64, hi: f64) -> Result<Self> {
        let mut h = Self::new(bins, lo, hi)?;
        h.add_rows(samples)?;
        Ok(h)
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.bins != other.bins || self.lo != other.lo || self.hi != other.hi {
            return Err(Error::InvalidArgument(format!(
                "histogram shapes differ: {} bins on [{}, {}] vs {} bins on [{}, {}]",
                self.bins, self.lo, self.hi, other.bins, other.lo, other.hi
            )));
        }
        Ok(())
    }

    /// Adds another histogram's counts in place.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total_samples += other.total_samples;
        self.out_of_range += other.out_of_range;
        Ok(())
    }
}

/// Mean absolute bin difference. Raw counts when both histograms saw the
/// same number of samples, normalized counts otherwise.
pub fn hist_l1(a: &Histogram2D, b: &Histogram2D) -> Result<f64> {
    a.check_shape(b)?;
    let nb = a.counts.len() as f64;
    if a.total_samples == b.total_samples {
        let s: f64 = a.counts.iter().zip(&b.counts).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / nb);
    }
    log::debug!(
        "comparing histograms with {} and {} samples as densities",
        a.total_samples,
        b.total_samples
    );
    if a.total_samples == 0 || b.total_samples == 0 {
        return Err(Error::Degenerate(
            "density comparison with an empty histogram".into(),
        ));
    }
    let (na, nb_) = (a.total_samples as f64, b.total_samples as f64);
    let s: f64 = a
        .counts
        .iter()
        .zip(&b.counts)
        .map(|(x, y)| (x / na - y / nb_).abs())
        .sum();
    Ok(s / nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    /// Rows per independently seeded shard.
    pub shard: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 200,
            lo: -0.75,
            hi: 0.75,
            samples: 100_000,
            shard: 5_000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        Histogram2D::new(self.bins, self.lo, self.hi)
            .map_err(|e| Error::config("eval.bins", e.to_string()))?;
        if self.samples == 0 {
            return Err(Error::config("eval.samples", "must be positive"));
        }
        if self.shard == 0 {
            return Err(Error::config("eval.shard", "must be positive"));
        }
        Ok(())
    }

    pub fn empty(&self) -> Result<Histogram2D> {
        Histogram2D::new(self.bins, self.lo, self.hi)
    }
}

/// One histogram per class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHistograms {
    pub per_class: Vec<Histogram2D>,
}

impl ClassHistograms {
    pub fn new(num_classes: usize, cfg: &EvalConfig) -> Result<Self> {
        Ok(Self {
            per_class: (0..num_classes).map(|_| cfg.empty()).collect::<Result<_>>()?,
        })
    }

    pub fn add(&mut self, x: &Matrix, labels: &[usize]) -> Result<()> {
        if x.rows() != labels.len() || x.cols() != 2 {
            return Err(Error::dim("class histogram rows", labels.len(), x.rows()));
        }
        let nc = self.per_class.len();
        for (i, &y) in labels.iter().enumerate() {
            let h = self.per_class.get_mut(y).ok_or(Error::UnknownLabel {
                label: y,
                num_classes: nc,
            })?;
            let r = x.row(i);
            h.add(r[0], r[1]);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.merge(b)?;
        }
        Ok(())
    }

    /// Sum over `classes`.
    pub fn subset(&self, classes: &[usize]) -> Result<Histogram2D> {
        let mut out = self.per_class[0].clone();
        out.counts.fill(0.0);
        out.total_samples = 0;
        out.out_of_range = 0;
        for &c in classes {
            out.merge(&self.per_class[c])?;
        }
        Ok(out)
    }

    pub fn total(&self) -> Result<Histogram2D> {
        let all: Vec<usize> = (0..self.per_class.len()).collect();
        self.subset(&all)
    }

    /// Payload per class: `[total, out_of_range, counts..]`.
    pub fn to_checkpoint(&self, seed: u64, meta: BTreeMap<String, String>) -> Checkpoint {
        let h0 = &self.per_class[0];
        let mut meta = meta;
        meta.insert("classes".into(), self.per_class.len().to_string());
        meta.insert("bins".into(), h0.bins.to_string());
        meta.insert("lo".into(), format!("{:e}", h0.lo));
        meta.insert("hi".into(), format!("{:e}", h0.hi));
        let mut payload = Vec::new();
        for h in &self.per_class {
            payload.push(h.total_samples as f64);
            payload.push(h.out_of_range as f64);
            payload.extend_from_slice(&h.counts);
        }
        Checkpoint {
            role: Role::Histogram,
            arch: format!("hist:{}x{}", h0.bins, h0.bins),
            seed,
            iteration: 0,
            meta,
            payload,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_role(Role::Histogram)?;
        let classes: usize = ckpt.meta_parse("classes")?;
        let bins: usize = ckpt.meta_parse("bins")?;
        let width = 2 + bins * bins;
        if classes == 0 || ckpt.payload.len() != classes * width {
            return Err(Error::CorruptHeader("histogram payload size mismatch".into()));
        }
        let per_class = ckpt
            .payload
            .chunks_exact(width)
            .map(|c| {
                let mut h = Histogram2D::new(bins, ckpt.meta_parse("lo")?, ckpt.meta_parse("hi")?)?;
                h.total_samples = c[0] as u64;
                h.out_of_range = c[1] as u64;
                h.counts.copy_from_slice(&c[2..]);
                Ok(h)
            })
            .collect::<Result<_>>()?;
        Ok(Self { per_class })
    }
}

/// Draws `cfg.samples` uniform-label latents `z ~ N(0, σ_max²)` in shards,
/// maps them through `f`, and accumulates per-class histograms. Shard `s`
/// uses RNG stream `s`, so the result is independent of execution mode.
#[allow(clippy::too_many_arguments)]
pub fn sample_histograms<F>(
    cfg: &EvalConfig,
    num_classes: usize,
    latent_dim: usize,
    sigma_max: f64,
    seed: u64,
    exec: Execution,
    f: F,
) -> Result<ClassHistograms>
where
    F: Fn(&Matrix, &[usize]) -> Result<Matrix> + Sync + Send,
{
    cfg.validate()?;
    let shards = cfg.samples.div_ceil(cfg.shard);
    let parts = map_indexed(shards, exec, |s| {
        let n = cfg.shard.min(cfg.samples - s * cfg.shard);
        let mut rng = stream_rng(seed, s as u64);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
        let z = draw_latents(n, latent_dim, sigma_max, &mut rng);
        let x = f(&z, &labels)?;
        let mut h = ClassHistograms::new(num_classes, cfg)?;
        h.add(&x, &labels)?;
        Ok(h)
    })?;
    let mut out = ClassHistograms::new(num_classes, cfg)?;
    for p in &parts {
        out.merge(p)?;
    }
    Ok(out)
}

/// Teacher reference histograms from the Heun sampler.
pub fn teacher_histograms(
    teacher: &Denoiser,
    sampler_steps: usize,
    cfg: &EvalConfig,
    seed: u64,
    exec: Execution,
) -> Result<ClassHistograms> {
    sample_histograms(
        cfg,
        teacher.num_classes,
        teacher.data_dim(),
        teacher.schedule.sigma_max,
        seed,
        exec,
        |z, labels| sample_teacher(teacher, z, labels, sampler_steps, Execution::Sequential),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub num_students: usize,
    /// Collective distance over all classes.
    pub l1: f64,
    /// Each student's classes against the teacher's same classes.
    pub per_student: Vec<f64>,
    pub students: ClassHistograms,
}

/// Routed evaluation of a set of students against teacher histograms.
pub fn eval_generators(
    partition: &Partition,
    generators: &[&Generator],
    teacher_hist: &ClassHistograms,
    cfg: &EvalConfig,
    sigma_max: f64,
    seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    let nc = partition.num_classes();
    if teacher_hist.per_class.len() != nc {
        return Err(Error::dim(
            "teacher histogram classes",
            nc,
            teacher_hist.per_class.len(),
        ));
    }
    let latent = generators
        .first()
        .ok_or_else(|| Error::InvalidArgument("no generators".into()))?
        .latent_dim;
    let students = sample_histograms(cfg, nc, latent, sigma_max, seed, exec, |z, labels| {
        route_generators(partition, generators, z, labels)
    })?;
    let l1 = hist_l1(&students.total()?, &teacher_hist.total()?)?;
    let per_student = (0..partition.num_students())
        .map(|k| {
            let cls = partition.classes_of(k);
            hist_l1(&students.subset(&cls)?, &teacher_hist.subset(&cls)?)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        num_students: partition.num_students(),
        l1,
        per_student,
        students,
    })
}

fn write_atomic(path: &Path, body: &str) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    let run = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(body.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    run().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// `x_index,y_index,count`, one row per bin.
pub fn export_histogram_csv(h: &Histogram2D, path: &Path) -> Result<()> {
    let mut s = String::from("x_index,y_index,count\n");
    for ix in 0..h.bins {
        for iy in 0..h.bins {
            s.push_str(&format!("{ix},{iy},{}\n", h.count(ix, iy)));
        }
    }
    write_atomic(path, &s)
}

/// Parses a file written by [`export_histogram_csv`] back into counts.
pub fn read_histogram_csv(path: &Path, lo: f64, hi: f64) -> Result<Histogram2D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{}:{}: bad field `{s}`", path.display(), n + 1)))
        };
        if f.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "{}:{}: expected 3 fields",
                path.display(),
                n + 1
            )));
        }
        rows.push((parse(f[0])? as usize, parse(f[1])? as usize, parse(f[2])?));
    }
    let bins = (rows.len() as f64).sqrt().round() as usize;
    if bins * bins != rows.len() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a square histogram",
            path.display()
        )));
    }
    let mut h = Histogram2D::new(bins, lo, hi)?;
    for (ix, iy, c) in rows {
        if ix >= bins || iy >= bins {
            return Err(Error::InvalidArgument(format!("bin ({ix},{iy}) out of range")));
        }
        h.counts[ix * bins + iy] = c;
        h.total_samples += c as u64;
    }
    Ok(h)
}

/// `step,<column>` rows, sorted by step.
pub fn export_series_csv(column: &str, series: &[(u64, f64)], path: &Path) -> Result<()> {
    let mut rows = series.to_vec();
    rows.sort_by_key(|r| r.0);
    let mut s = format!("step,{column}\n");
    for (step, v) in rows {
        s.push_str(&format!("{step},{v:e}\n"));
    }
    write_atomic(path, &s)
}
