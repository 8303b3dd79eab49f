//! Distillation objectives and update rules.
//!
//! * distribution matching: the reverse-KL generator gradient
//!   `w·α·(s_fake − s_real)` backpropagated through a one-step generator,
//!   with the fake score trained online by denoising the generator's output;
//! * the paired regression loss (squared distance to teacher ODE outputs);
//! * the two-timescale loop (`ttur_n` fake updates per generator update);
//! * an adversarial stage with a logistic head on the fake score's
//!   bottleneck features;
//! * teacher score matching, which regresses a student denoiser onto the
//!   frozen teacher's denoised outputs on real data.
//!
//! Teacher parameters are never written by anything in this module.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::data::{sample_mog, MogSpec};
use crate::diffusion::{
    corrupt_batch, denoising_regression, loss_weight, noise_embedding, preconditioning, sample_sigmas,
    score_batch, standard_normal, DenoiseModel, Denoiser,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::msd::FilteredData;
use crate::nn::{clip_grad_norm, AdamWState, ForwardCache, Gradients, Layer, Mlp};
use crate::parallel::stream_rng;

/// Single-step generator `G(z, y)` with input `[z, onehot(y)]`.
#[derive(Debug)]
pub struct Generator {
    pub net: Mlp,
    pub num_classes: usize,
    pub latent_dim: usize,
    evals: AtomicU64,
}

impl Clone for Generator {
    fn clone(&self) -> Self {
        Self {
            net: self.net.clone(),
            num_classes: self.num_classes,
            latent_dim: self.latent_dim,
            evals: AtomicU64::new(0),
        }
    }
}

impl PartialEq for Generator {
    fn eq(&self, other: &Self) -> bool {
        self.net == other.net && self.num_classes == other.num_classes && self.latent_dim == other.latent_dim
    }
}

impl Generator {
    pub fn from_net(net: Mlp, latent_dim: usize, num_classes: usize) -> Result<Self> {
        if net.input_dim() != latent_dim + num_classes {
            return Err(Error::dim(
                "generator input",
                latent_dim + num_classes,
                net.input_dim(),
            ));
        }
        Ok(Self {
            net,
            num_classes,
            latent_dim,
            evals: AtomicU64::new(0),
        })
    }

    /// Generator evaluating `denoiser` at σ_max on `x_t = z`.
    ///
    /// The input scaling `c_in(σ_max)` is folded into the latent columns of the
    /// first layer, the fixed noise embedding into its bias, and `c_out(σ_max)`
    /// into the output layer. The skip term `c_skip(σ_max)·z` is dropped.
    pub fn from_denoiser(d: &Denoiser) -> Result<Self> {
        let sigma = d.schedule.sigma_max;
        let (_, c_out, c_in) = preconditioning(sigma, d.sigma_data);
        let emb = noise_embedding(sigma);
        let (dd, nc) = (d.data_dim(), d.num_classes);
        let mut layers: Vec<Layer> = d.net.layers().to_vec();
        let first = &layers[0];
        let in_old = first.in_dim();
        let in_new = dd + nc;
        let out = first.out_dim();
        let mut w = vec![0.0; out * in_new];
        let mut b = first.bias().to_vec();
        for o in 0..out {
            for j in 0..dd {
                w[o * in_new + j] = c_in * first.weight(o, j);
            }
            for c in 0..nc {
                w[o * in_new + dd + c] = first.weight(o, dd + c);
            }
            for (e, ev) in emb.iter().enumerate() {
                b[o] += first.weight(o, dd + nc + e) * ev;
            }
        }
        debug_assert_eq!(in_old, in_new + emb.len());
        layers[0] = Layer::from_parts(in_new, out, first.activation(), w, b)?;
        let last = layers.last_mut().expect("non-empty");
        for v in last.weights_mut() {
            *v *= c_out;
        }
        for v in last.bias_mut() {
            *v *= c_out;
        }
        Self::from_net(Mlp::from_layers(layers)?, dd, nc)
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Rows evaluated since construction (or the last clone).
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn input(&self, z: &Matrix, labels: &[usize]) -> Result<Matrix> {
        if z.cols() != self.latent_dim {
            return Err(Error::dim("generator latent", self.latent_dim, z.cols()));
        }
        if labels.len() != z.rows() {
            return Err(Error::dim("generator labels", z.rows(), labels.len()));
        }
        let w = self.latent_dim + self.num_classes;
        let mut input = Matrix::zeros(z.rows(), w);
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.num_classes {
                return Err(Error::UnknownLabel {
                    label: y,
                    num_classes: self.num_classes,
                });
            }
            let row = input.row_mut(i);
            row[..self.latent_dim].copy_from_slice(z.row(i));
            row[self.latent_dim + y] = 1.0;
        }
        Ok(input)
    }

    /// One network evaluation per row.
    pub fn generate(&self, z: &Matrix, labels: &[usize]) -> Result<Matrix> {
        let input = self.input(z, labels)?;
        self.evals.fetch_add(z.rows() as u64, Ordering::Relaxed);
        self.net.predict(&input)
    }

    pub fn forward(&self, z: &Matrix, labels: &[usize]) -> Result<(Matrix, ForwardCache)> {
        let input = self.input(z, labels)?;
        self.evals.fetch_add(z.rows() as u64, Ordering::Relaxed);
        self.net.forward(&input)
    }

    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> Result<Gradients> {
        self.net.backward(cache, d_out)
    }
}

/// Scalar logit head on fake-score bottleneck features.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorHead {
    pub net: Mlp,
}

impl DiscriminatorHead {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![feature_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::from_net(Mlp::new(&sizes, rng)?)
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::dim("discriminator head output", 1, net.output_dim()));
        }
        Ok(Self { net })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub generator_lr: f64,
    pub fake_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub regression_weight: f64,
    pub ttur_n: usize,
    pub gan_gen_weight: f64,
    pub gan_disc_weight: f64,
    pub t_min_index: usize,
    pub t_max_index: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub alpha: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            generator_lr: 1e-7,
            fake_lr: 1e-7,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            regression_weight: 0.25,
            ttur_n: 1,
            gan_gen_weight: 3e-3,
            gan_disc_weight: 1e-2,
            t_min_index: 0,
            t_max_index: 750,
            iterations: 20_000,
            batch_size: 256,
            grad_clip: 10.0,
            alpha: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("distill.{f}"), m));
        if !(self.generator_lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.fake_lr > 0.0) {
            return bad("fake_lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.regression_weight >= 0.0) {
            return bad("regression_weight", "must be non-negative");
        }
        if self.ttur_n == 0 {
            return bad("ttur_n", "must be at least 1");
        }
        if !(self.gan_gen_weight >= 0.0 && self.gan_disc_weight >= 0.0) {
            return bad("gan_gen_weight", "GAN weights must be non-negative");
        }
        if self.t_min_index >= self.t_max_index || self.t_max_index > num_steps {
            return bad("t_max", "need 0 <= t_min < t_max <= schedule steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1", "betas must lie in (0, 1)");
        }
        Ok(())
    }
}

/// `w = (σ²/α)·C / mean_i ‖μ_teacher,i − x_i‖₁`, with `C` the data dimension.
pub fn dmd_weight(sigma: f64, alpha: f64, teacher_out: &Matrix, x: &Matrix) -> Result<f64> {
    if teacher_out.rows() != x.rows() || teacher_out.cols() != x.cols() {
        return Err(Error::dim(
            "dmd_weight",
            x.rows() * x.cols(),
            teacher_out.rows() * teacher_out.cols(),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let l1: f64 = teacher_out
        .as_slice()
        .iter()
        .zip(x.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / x.rows() as f64;
    if !(l1 > 0.0) {
        return Err(Error::Degenerate(
            "teacher prediction equals the generated batch; DMD weight undefined".into(),
        ));
    }
    Ok(sigma * sigma / alpha * x.cols() as f64 / l1)
}

/// Result of [`dmd_generator_grad`].
#[derive(Debug, Clone)]
pub struct DmdGradient {
    pub grads: Gradients,
    /// Per-row `w·α·(s_fake − s_real)`, before the 1/B batch mean.
    pub cotangent: Matrix,
    pub weight: f64,
    pub x: Matrix,
    pub x_t: Matrix,
    pub(crate) cache: ForwardCache,
}

/// Distribution-matching gradient for one batch at noise level `sigma`.
///
/// Scores are computed from frozen `teacher` and `fake` outputs; only the
/// generator receives a gradient.
#[allow(clippy::too_many_arguments)]
pub fn dmd_generator_grad(
    teacher: &dyn DenoiseModel,
    fake: &dyn DenoiseModel,
    g: &Generator,
    z: &Matrix,
    labels: &[usize],
    sigma: f64,
    noise: &Matrix,
    alpha: f64,
) -> Result<DmdGradient> {
    let (x, cache) = g.forward(z, labels)?;
    let b = x.rows();
    let sig = vec![sigma; b];
    let mut x_t = x.clone();
    for (v, n) in x_t.as_mut_slice().iter_mut().zip(noise.as_slice()) {
        *v *= alpha;
        *v += sigma * n;
    }
    if noise.rows() != b || noise.cols() != x.cols() {
        return Err(Error::dim("dmd noise", b * x.cols(), noise.rows() * noise.cols()));
    }
    let mu_real = teacher.denoise_batch(&x_t, &sig, labels)?;
    let mu_fake = fake.denoise_batch(&x_t, &sig, labels)?;
    let s_real = score_batch(&x_t, &mu_real, sigma, alpha)?;
    let s_fake = score_batch(&x_t, &mu_fake, sigma, alpha)?;
    if !s_real.is_finite() || !s_fake.is_finite() {
        return Err(Error::NonFinite("DMD scores".into()));
    }
    let weight = dmd_weight(sigma, alpha, &mu_real, &x)?;
    let mut cot = Matrix::zeros(b, x.cols());
    for ((c, f), r) in cot
        .as_mut_slice()
        .iter_mut()
        .zip(s_fake.as_slice())
        .zip(s_real.as_slice())
    {
        *c = weight * alpha * (f - r);
    }
    let mut d_out = cot.clone();
    for v in d_out.as_mut_slice() {
        *v /= b as f64;
    }
    let grads = g.backward(&cache, &d_out)?;
    Ok(DmdGradient {
        grads,
        cotangent: cot,
        weight,
        x,
        x_t,
        cache,
    })
}

/// `mean_i ‖G(z_i) − y_i‖²` and its exact gradient.
pub fn regression_loss_and_grad(
    g: &Generator,
    z: &Matrix,
    labels: &[usize],
    y: &Matrix,
) -> Result<(f64, Gradients)> {
    let b = z.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty regression batch".into()));
    }
    let (out, cache) = g.forward(z, labels)?;
    if y.rows() != b || y.cols() != out.cols() {
        return Err(Error::dim(
            "regression targets",
            b * out.cols(),
            y.rows() * y.cols(),
        ));
    }
    let mut loss = 0.0;
    let mut d_out = Matrix::zeros(b, out.cols());
    for ((d, o), t) in d_out
        .as_mut_slice()
        .iter_mut()
        .zip(out.as_slice())
        .zip(y.as_slice())
    {
        let r = o - t;
        loss += r * r;
        *d = 2.0 * r / b as f64;
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("regression loss".into()));
    }
    Ok((loss, g.backward(&cache, &d_out)?))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Non-saturating logistic GAN losses and their gradients.
#[derive(Debug, Clone)]
pub struct GanLosses {
    /// `mean softplus(−logit_fake)`.
    pub gen_loss: f64,
    /// `mean softplus(−logit_real) + mean softplus(logit_fake)`.
    pub disc_loss: f64,
    /// Head parameter gradient of `disc_loss`.
    pub head_disc_grads: Gradients,
    /// Head parameter gradient of `gen_loss`.
    pub head_gen_grads: Gradients,
    pub d_gen_d_fake_features: Matrix,
    pub d_disc_d_fake_features: Matrix,
    pub d_disc_d_real_features: Matrix,
}

pub fn gan_losses(
    head: &DiscriminatorHead,
    fake_features: &Matrix,
    real_features: &Matrix,
) -> Result<GanLosses> {
    let (bf, br) = (fake_features.rows(), real_features.rows());
    if bf == 0 || br == 0 {
        return Err(Error::InvalidArgument("empty feature batch".into()));
    }
    let (lf, cache_f) = head.net.forward(fake_features)?;
    let (lr, cache_r) = head.net.forward(real_features)?;
    if !lf.is_finite() || !lr.is_finite() {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    let lf = lf.as_slice();
    let lr = lr.as_slice();
    let gen_loss = lf.iter().map(|&l| softplus(-l)).sum::<f64>() / bf as f64;
    let disc_loss = lr.iter().map(|&l| softplus(-l)).sum::<f64>() / br as f64
        + lf.iter().map(|&l| softplus(l)).sum::<f64>() / bf as f64;

    let d_real = Matrix::from_vec(br, 1, lr.iter().map(|&l| -sigmoid(-l) / br as f64).collect())?;
    let d_fake = Matrix::from_vec(bf, 1, lf.iter().map(|&l| sigmoid(l) / bf as f64).collect())?;
    let d_gen = Matrix::from_vec(bf, 1, lf.iter().map(|&l| -sigmoid(-l) / bf as f64).collect())?;

    let g_real = head.net.backward(&cache_r, &d_real)?;
    let g_fake = head.net.backward(&cache_f, &d_fake)?;
    let g_gen = head.net.backward(&cache_f, &d_gen)?;
    let mut head_disc_grads = g_real.clone();
    head_disc_grads.add_scaled(&g_fake, 1.0)?;
    head_disc_grads.input = None;
    Ok(GanLosses {
        gen_loss,
        disc_loss,
        d_gen_d_fake_features: g_gen.input.clone().expect("input grad"),
        d_disc_d_fake_features: g_fake.input.expect("input grad"),
        d_disc_d_real_features: g_real.input.expect("input grad"),
        head_gen_grads: Gradients { input: None, ..g_gen },
        head_disc_grads,
    })
}

/// Teacher score matching at explicit noise levels and draws:
/// `mean_i λ_i ‖μ_student(x_t,i) − μ_teacher(x_t,i)‖²` with `x_t = x + σ·ε`.
pub fn tsm_loss_and_grad_at(
    student: &Denoiser,
    teacher: &dyn DenoiseModel,
    x: &Matrix,
    labels: &[usize],
    sigma: &[f64],
    noise: &Matrix,
) -> Result<(f64, Gradients)> {
    let x_t = corrupt_batch(x, sigma, noise)?;
    let target = teacher.denoise_batch(&x_t, sigma, labels)?;
    denoising_regression(student, &x_t, sigma, labels, &target)
}

/// [`tsm_loss_and_grad_at`] with σ drawn uniformly over the schedule's steps.
pub fn tsm_loss_and_grad<R: Rng + ?Sized>(
    student: &Denoiser,
    teacher: &dyn DenoiseModel,
    x: &Matrix,
    labels: &[usize],
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sigma = sample_sigmas(&student.schedule, 0, student.schedule.num_steps, x.rows(), rng)?;
    let noise = standard_normal(x.rows(), x.cols(), rng);
    tsm_loss_and_grad_at(student, teacher, x, labels, &sigma, &noise)
}

/// Latents `z ~ N(0, σ_max²·I)`.
pub fn draw_latents<R: Rng + ?Sized>(n: usize, dim: usize, sigma_max: f64, rng: &mut R) -> Matrix {
    let mut z = standard_normal(n, dim, rng);
    for v in z.as_mut_slice() {
        *v *= sigma_max;
    }
    z
}

fn draw_labels<R: Rng + ?Sized>(conditions: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    (0..n)
        .map(|_| conditions[rng.random_range(0..conditions.len())])
        .collect()
}

/// One AdamW step on the fake score, denoising frozen generator output.
#[allow(clippy::too_many_arguments)]
pub fn fake_score_update<R: Rng + ?Sized>(
    fake: &mut Denoiser,
    opt: &mut AdamWState,
    g: &Generator,
    z: &Matrix,
    labels: &[usize],
    rng: &mut R,
    cfg: &DistillConfig,
) -> Result<f64> {
    let x = g.generate(z, labels)?;
    let sigma = sample_sigmas(&fake.schedule, cfg.t_min_index, cfg.t_max_index, x.rows(), rng)?;
    let noise = standard_normal(x.rows(), x.cols(), rng);
    let x_t = corrupt_batch(&x, &sigma, &noise)?;
    let (loss, mut grads) = denoising_regression(fake, &x_t, &sigma, labels, &x)?;
    clip_grad_norm(&mut grads, cfg.grad_clip)?;
    opt.step(&mut fake.net, &grads, cfg.fake_lr, cfg.weight_decay)?;
    Ok(loss)
}

/// Per-step losses reported by [`ttur_distill_step`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepMetrics {
    pub fake_loss: f64,
    pub dmd_weight: f64,
    pub regression_loss: f64,
    pub gen_gan_loss: f64,
    pub disc_loss: f64,
    pub grad_scale: f64,
    pub step_index: usize,
}

/// Adversarial head plus its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialState {
    pub head: DiscriminatorHead,
    pub opt: AdamWState,
}

/// Everything a single student's distillation mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub generator: Generator,
    pub fake: Denoiser,
    pub gen_opt: AdamWState,
    pub fake_opt: AdamWState,
    pub adversarial: Option<AdversarialState>,
    pub fake_updates: u64,
    pub generator_updates: u64,
    pub condition_draws: u64,
    pub iteration: u64,
    pub max_step_index: usize,
}

impl DistillState {
    pub fn new(generator: Generator, fake: Denoiser, cfg: &DistillConfig) -> Self {
        let gen_opt = AdamWState::new(&generator.net, cfg.beta1, cfg.beta2, 1e-8);
        let fake_opt = AdamWState::new(&fake.net, cfg.beta1, cfg.beta2, 1e-8);
        Self {
            generator,
            fake,
            gen_opt,
            fake_opt,
            adversarial: None,
            fake_updates: 0,
            generator_updates: 0,
            condition_draws: 0,
            iteration: 0,
            max_step_index: 0,
        }
    }

    /// Attaches a freshly initialized head for the adversarial stage.
    pub fn attach_head<R: Rng + ?Sized>(
        &mut self,
        hidden: &[usize],
        cfg: &DistillConfig,
        rng: &mut R,
    ) -> Result<()> {
        let hw = self.fake.hidden_widths();
        let feat = *hw
            .last()
            .ok_or_else(|| Error::InvalidArgument("fake score needs a hidden layer for the head".into()))?;
        let head = DiscriminatorHead::new(feat, hidden, rng)?;
        let opt = AdamWState::new(&head.net, cfg.beta1, cfg.beta2, 1e-8);
        self.adversarial = Some(AdversarialState { head, opt });
        Ok(())
    }
}

/// Fake-score step that also trains the discriminator head (and the fake
/// trunk beneath it) when the adversarial stage is active.
fn fake_step<R: Rng + ?Sized>(
    state: &mut DistillState,
    data: &FilteredData<'_>,
    cfg: &DistillConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let b = cfg.batch_size;
    let sigma_max = state.fake.schedule.sigma_max;
    let labels = draw_labels(&data.conditions, b, rng);
    let z = draw_latents(b, state.generator.latent_dim, sigma_max, rng);
    let adversarial = state.adversarial.is_some() && data.real.is_some() && cfg.gan_disc_weight > 0.0;
    if !adversarial {
        let loss = fake_score_update(
            &mut state.fake,
            &mut state.fake_opt,
            &state.generator,
            &z,
            &labels,
            rng,
            cfg,
        )?;
        return Ok((loss, 0.0));
    }
    let fake = &mut state.fake;
    let x = state.generator.generate(&z, &labels)?;
    let sigma = sample_sigmas(&fake.schedule, cfg.t_min_index, cfg.t_max_index, b, rng)?;
    let noise = standard_normal(b, x.cols(), rng);
    let x_t = corrupt_batch(&x, &sigma, &noise)?;
    let (out, cache_f) = fake.forward(&x_t, &sigma, &labels)?;
    let mut loss = 0.0;
    let mut d_out = Matrix::zeros(b, x.cols());
    for i in 0..b {
        let lam = loss_weight(sigma[i], fake.sigma_data);
        for ((g, o), t) in d_out.row_mut(i).iter_mut().zip(out.row(i)).zip(x.row(i)) {
            let r = o - t;
            loss += lam * r * r;
            *g = 2.0 * lam * r / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("fake denoising loss".into()));
    }
    let mut grads = fake.backward(&cache_f, &d_out)?;

    let real = data.real.as_ref().expect("checked above");
    let (x_real, real_labels) = real.sample(b, rng)?;
    let sigma_r = sample_sigmas(&fake.schedule, cfg.t_min_index, cfg.t_max_index, b, rng)?;
    let noise_r = standard_normal(b, x_real.cols(), rng);
    let x_real_t = corrupt_batch(&x_real, &sigma_r, &noise_r)?;
    let (_, cache_r) = fake.forward(&x_real_t, &sigma_r, &real_labels)?;

    let adv = state.adversarial.as_mut().expect("checked above");
    let gan = gan_losses(&adv.head, cache_f.features(), cache_r.features())?;
    let (trunk_f, _) = fake.backward_features(&cache_f, &gan.d_disc_d_fake_features)?;
    let (trunk_r, _) = fake.backward_features(&cache_r, &gan.d_disc_d_real_features)?;
    grads.add_scaled(&trunk_f, cfg.gan_disc_weight)?;
    grads.add_scaled(&trunk_r, cfg.gan_disc_weight)?;
    clip_grad_norm(&mut grads, cfg.grad_clip)?;
    let mut head_grads = gan.head_disc_grads.clone();
    head_grads.scale(cfg.gan_disc_weight);
    clip_grad_norm(&mut head_grads, cfg.grad_clip)?;
    state
        .fake_opt
        .step(&mut fake.net, &grads, cfg.fake_lr, cfg.weight_decay)?;
    adv.opt
        .step(&mut adv.head.net, &head_grads, cfg.fake_lr, cfg.weight_decay)?;
    Ok((loss, gan.disc_loss))
}

/// `ttur_n` fake-score updates followed by one generator update.
pub fn ttur_distill_step<R: Rng + ?Sized>(
    state: &mut DistillState,
    teacher: &dyn DenoiseModel,
    cfg: &DistillConfig,
    data: &FilteredData<'_>,
    rng: &mut R,
) -> Result<StepMetrics> {
    if cfg.ttur_n == 0 {
        return Err(Error::InvalidArgument("ttur_n must be at least 1".into()));
    }
    if data.conditions.is_empty() {
        return Err(Error::InvalidArgument("no conditions to distill".into()));
    }
    let mut metrics = StepMetrics::default();
    for _ in 0..cfg.ttur_n {
        let (fl, dl) = fake_step(state, data, cfg, rng)?;
        metrics.fake_loss += fl / cfg.ttur_n as f64;
        metrics.disc_loss += dl / cfg.ttur_n as f64;
        state.fake_updates += 1;
    }

    let b = cfg.batch_size;
    let labels = draw_labels(&data.conditions, b, rng);
    state.condition_draws += b as u64;
    let z = draw_latents(b, state.generator.latent_dim, state.fake.schedule.sigma_max, rng);
    let step = rng.random_range(cfg.t_min_index..cfg.t_max_index);
    let sigma = state.fake.schedule.sigma_at(step)?;
    let noise = standard_normal(b, state.generator.data_dim(), rng);
    let dmd = dmd_generator_grad(
        teacher,
        &state.fake,
        &state.generator,
        &z,
        &labels,
        sigma,
        &noise,
        cfg.alpha,
    )?;
    metrics.step_index = step;
    state.max_step_index = state.max_step_index.max(step);
    metrics.dmd_weight = dmd.weight;
    let mut grads = dmd.grads;

    if let Some(adv) = state.adversarial.as_ref().filter(|_| cfg.gan_gen_weight > 0.0) {
        let sig = vec![sigma; b];
        let (_, cache) = state.fake.forward(&dmd.x_t, &sig, &labels)?;
        let gan = gan_losses(&adv.head, cache.features(), cache.features())?;
        let (_, dx_t) = state.fake.backward_features(&cache, &gan.d_gen_d_fake_features)?;
        // x_t = α·x + σ·ε
        let mut d_out = dx_t;
        for v in d_out.as_mut_slice() {
            *v *= cfg.gan_gen_weight * cfg.alpha;
        }
        let g_gan = state.generator.backward(&dmd.cache, &d_out)?;
        grads.add_scaled(&g_gan, 1.0)?;
        metrics.gen_gan_loss = gan.gen_loss;
    }

    if cfg.regression_weight > 0.0 {
        if let Some(view) = &data.paired {
            let idx: Vec<usize> = (0..b).map(|_| view.pick(rng)).collect();
            let (zr, lr, yr) = view.gather(&idx);
            let (loss, g_reg) = regression_loss_and_grad(&state.generator, &zr, &lr, &yr)?;
            grads.add_scaled(&g_reg, cfg.regression_weight)?;
            metrics.regression_loss = loss;
        }
    }

    grads.input = None;
    metrics.grad_scale = clip_grad_norm(&mut grads, cfg.grad_clip)?;
    state.gen_opt.step(
        &mut state.generator.net,
        &grads,
        cfg.generator_lr,
        cfg.weight_decay,
    )?;
    state.generator_updates += 1;
    state.iteration += 1;
    Ok(metrics)
}

/// Runs distillation iterations `state.iteration..until`, deriving each
/// iteration's RNG from `(seed, iteration)`.
pub fn run_distillation(
    state: &mut DistillState,
    teacher: &dyn DenoiseModel,
    cfg: &DistillConfig,
    data: &FilteredData<'_>,
    seed: u64,
    until: u64,
) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    while state.iteration < until {
        let mut rng = stream_rng(seed, state.iteration);
        out.push(ttur_distill_step(state, teacher, cfg, data, &mut rng)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsmConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
}

impl Default for TsmConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 256,
            grad_clip: 10.0,
        }
    }
}

/// Teacher score matching on unfiltered real data; returns the loss curve.
pub fn tsm_pretrain(
    student: &mut Denoiser,
    teacher: &dyn DenoiseModel,
    spec: &MogSpec,
    cfg: &TsmConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut opt = AdamWState::with_defaults(&student.net);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = stream_rng(seed, it as u64);
        let (x, labels) = sample_mog(spec, cfg.batch_size, &mut rng)?;
        let (loss, mut grads) = tsm_loss_and_grad(student, teacher, &x, &labels, &mut rng)?;
        clip_grad_norm(&mut grads, cfg.grad_clip)?;
        opt.step(&mut student.net, &grads, cfg.lr, cfg.weight_decay)?;
        losses.push(loss);
    }
    Ok(losses)
}
