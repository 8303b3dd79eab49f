//! Toy mixture-of-Gaussians data, teacher-generated paired datasets, and the
//! checkpoint container used for every persisted artifact.

mod checkpoint;
mod models;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint,
    Role, CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use models::{
    adamw_from_checkpoint, adamw_to_checkpoint, denoiser_from_checkpoint, denoiser_to_checkpoint,
    mlp_from_checkpoint, mlp_to_checkpoint,
};

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{heun_sample, standard_normal, Denoiser};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::parallel::{map_indexed, stream_rng, Execution};

/// Rows per sampler call when generating pairs. Fixed so that replays and
/// parallel runs see identical batch compositions.
pub const PAIR_CHUNK: usize = 250;

/// Two-level ring of Gaussians: `num_classes` class centres on the outer
/// circle, each surrounded by `components_per_class` components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MogSpec {
    pub num_classes: usize,
    pub components_per_class: usize,
    pub outer_radius: f64,
    pub inner_radius: f64,
    pub component_std: f64,
}

impl Default for MogSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            components_per_class: 8,
            outer_radius: 0.5,
            inner_radius: 0.1,
            component_std: 0.005,
        }
    }
}

impl MogSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.components_per_class == 0 {
            return Err(Error::InvalidArgument(
                "class and component counts must be positive".into(),
            ));
        }
        if !(self.component_std > 0.0 && self.inner_radius > 0.0 && self.outer_radius > 0.0) {
            return Err(Error::InvalidArgument("radii and std must be positive".into()));
        }
        if !(self.component_std < self.inner_radius && self.inner_radius < self.outer_radius) {
            return Err(Error::InvalidArgument(
                "need component_std < inner_radius < outer_radius".into(),
            ));
        }
        Ok(())
    }

    pub fn class_center(&self, c: usize) -> [f64; 2] {
        let a = TAU * c as f64 / self.num_classes as f64;
        [self.outer_radius * a.cos(), self.outer_radius * a.sin()]
    }

    pub fn component_center(&self, c: usize, j: usize) -> [f64; 2] {
        let [cx, cy] = self.class_center(c);
        let a = TAU * j as f64 / self.components_per_class as f64;
        [cx + self.inner_radius * a.cos(), cy + self.inner_radius * a.sin()]
    }

    /// Mean position of each class, used as the toy label embedding.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let mut m = [0.0; 2];
                for j in 0..self.components_per_class {
                    let p = self.component_center(c, j);
                    m[0] += p[0];
                    m[1] += p[1];
                }
                let k = self.components_per_class as f64;
                vec![m[0] / k, m[1] / k]
            })
            .collect()
    }

    fn draw<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> [f64; 2] {
        let j = rng.random_range(0..self.components_per_class);
        let [mx, my] = self.component_center(c, j);
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        [mx + self.component_std * ex, my + self.component_std * ey]
    }
}

/// `n` labelled points with classes drawn uniformly.
pub fn sample_mog<R: Rng + ?Sized>(spec: &MogSpec, n: usize, rng: &mut R) -> Result<(Matrix, Vec<usize>)> {
    let classes: Vec<usize> = (0..spec.num_classes).collect();
    sample_mog_classes(spec, n, &classes, rng)
}

/// `n` labelled points with classes drawn uniformly from `classes`.
pub fn sample_mog_classes<R: Rng + ?Sized>(
    spec: &MogSpec,
    n: usize,
    classes: &[usize],
    rng: &mut R,
) -> Result<(Matrix, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes to sample from".into()));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= spec.num_classes) {
        return Err(Error::UnknownLabel {
            label: bad,
            num_classes: spec.num_classes,
        });
    }
    let mut x = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = classes[rng.random_range(0..classes.len())];
        let p = spec.draw(c, rng);
        x.row_mut(i).copy_from_slice(&p);
        labels.push(c);
    }
    Ok((x, labels))
}

/// Offline `(z, label, y)` triples produced by sampling the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub z: Matrix,
    pub labels: Vec<usize>,
    pub y: Matrix,
    pub teacher_checksum: String,
    pub sampler_steps: usize,
}

impl PairedDataset {
    pub fn new(
        z: Matrix,
        labels: Vec<usize>,
        y: Matrix,
        teacher_checksum: String,
        sampler_steps: usize,
    ) -> Result<Self> {
        if z.rows() == 0 {
            return Err(Error::InvalidArgument("paired dataset must be non-empty".into()));
        }
        if labels.len() != z.rows() || y.rows() != z.rows() {
            return Err(Error::dim(
                "paired dataset rows",
                z.rows(),
                labels.len().min(y.rows()),
            ));
        }
        if !y.is_finite() {
            return Err(Error::NonFinite("paired dataset targets".into()));
        }
        Ok(Self {
            z,
            labels,
            y,
            teacher_checksum,
            sampler_steps,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of entries whose label is in `classes`.
    pub fn indices_with_labels(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let (zd, yd) = (self.z.cols(), self.y.cols());
        let mut payload = Vec::with_capacity(self.len() * (zd + 1 + yd));
        for i in 0..self.len() {
            payload.extend_from_slice(self.z.row(i));
            payload.push(self.labels[i] as f64);
            payload.extend_from_slice(self.y.row(i));
        }
        let mut meta = BTreeMap::new();
        meta.insert("entries".into(), self.len().to_string());
        meta.insert("latent_dim".into(), zd.to_string());
        meta.insert("data_dim".into(), yd.to_string());
        meta.insert("teacher_checksum".into(), self.teacher_checksum.clone());
        meta.insert("sampler_steps".into(), self.sampler_steps.to_string());
        Checkpoint {
            role: Role::Paired,
            arch: format!("pairs:{zd}+1+{yd}"),
            seed,
            iteration: 0,
            meta,
            payload,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_role(Role::Paired)?;
        let n: usize = ckpt.meta_parse("entries")?;
        let zd: usize = ckpt.meta_parse("latent_dim")?;
        let yd: usize = ckpt.meta_parse("data_dim")?;
        let width = zd + 1 + yd;
        if ckpt.payload.len() != n * width {
            return Err(Error::CorruptHeader(format!(
                "paired payload has {} values, expected {}",
                ckpt.payload.len(),
                n * width
            )));
        }
        let mut z = Matrix::zeros(n, zd);
        let mut y = Matrix::zeros(n, yd);
        let mut labels = Vec::with_capacity(n);
        for (i, row) in ckpt.payload.chunks_exact(width).enumerate() {
            z.row_mut(i).copy_from_slice(&row[..zd]);
            let l = row[zd];
            if !(l >= 0.0 && l.fract() == 0.0) {
                return Err(Error::CorruptHeader(format!(
                    "invalid label value {l} in row {i}"
                )));
            }
            labels.push(l as usize);
            y.row_mut(i).copy_from_slice(&row[zd + 1..]);
        }
        Self::new(
            z,
            labels,
            y,
            ckpt.meta_str("teacher_checksum")?.to_string(),
            ckpt.meta_parse("sampler_steps")?,
        )
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint_as(path, Role::Paired)?)
    }
}

/// Samples `n` latents `z ~ N(0, σ_max²·I)` with uniform labels and maps each
/// through the teacher's Heun sampler with `sampler_steps` grid points.
pub fn generate_pairs(
    teacher: &Denoiser,
    n: usize,
    sampler_steps: usize,
    seed: u64,
    exec: Execution,
) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("pair count must be positive".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let mut z = standard_normal(n, teacher.data_dim(), &mut rng);
    for v in z.as_mut_slice() {
        *v *= teacher.schedule.sigma_max;
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..teacher.num_classes)).collect();
    let y = sample_teacher(teacher, &z, &labels, sampler_steps, exec)?;
    PairedDataset::new(z, labels, y, teacher.checksum(), sampler_steps)
}

/// Runs the teacher sampler over `z` in fixed-size chunks.
pub fn sample_teacher(
    teacher: &Denoiser,
    z: &Matrix,
    labels: &[usize],
    sampler_steps: usize,
    exec: Execution,
) -> Result<Matrix> {
    let grid = teacher.schedule.with_steps(sampler_steps)?;
    let n = z.rows();
    let chunks = n.div_ceil(PAIR_CHUNK);
    let parts = map_indexed(chunks, exec, |c| {
        let lo = c * PAIR_CHUNK;
        let hi = (lo + PAIR_CHUNK).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        heun_sample(teacher, &z.select_rows(&idx), &labels[lo..hi], &grid)
    })?;
    Matrix::vcat(&parts)
}

/// Re-runs the teacher on stored latents; bitwise equal to the stored targets
/// when the teacher is unchanged.
pub fn replay_pairs(teacher: &Denoiser, pairs: &PairedDataset, exec: Execution) -> Result<Matrix> {
    sample_teacher(teacher, &pairs.z, &pairs.labels, pairs.sampler_steps, exec)
}
