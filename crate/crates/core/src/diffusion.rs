//! EDM-style noise schedule, preconditioned class-conditional denoiser,
//! denoising score matching, the deterministic Heun sampler, and a closed-form
//! Gaussian denoiser used as an oracle.
//!
//! The forward process is `x_t = x + σ·ε` (α ≡ 1). A denoiser predicts the
//! clean sample; the implied score is `-(x_t - α·μ) / σ²`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{ForwardCache, Gradients, Mlp};

/// Width of the sinusoidal noise-level embedding.
pub const NOISE_EMBED_DIM: usize = 16;

/// σ-discretization `σ_i = (σ_max^{1/ρ} + i/(N-1)·(σ_min^{1/ρ} - σ_max^{1/ρ}))^ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub num_steps: usize,
    pub rho: f64,
}

impl Default for NoiseSchedule {
    /// (σ_min, σ_max) = (0.002, 80), 1000 steps, ρ = 7.
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            num_steps: 1000,
            rho: 7.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, num_steps: usize, rho: f64) -> Result<Self> {
        let s = Self {
            sigma_min,
            sigma_max,
            num_steps,
            rho,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) || !self.sigma_max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sigma range ({}, {}) must be positive and finite",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be positive".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument("rho must be positive".into()));
        }
        if self.num_steps == 1 {
            if self.sigma_max != self.sigma_min {
                return Err(Error::InvalidArgument(
                    "a single-step schedule needs sigma_max == sigma_min".into(),
                ));
            }
        } else if !(self.sigma_max > self.sigma_min) {
            return Err(Error::InvalidArgument("sigma_max must exceed sigma_min".into()));
        }
        Ok(())
    }

    /// Same endpoints and curvature with a different number of steps.
    pub fn with_steps(&self, num_steps: usize) -> Result<Self> {
        Self::new(self.sigma_min, self.sigma_max, num_steps, self.rho)
    }

    pub fn sigma_at(&self, i: usize) -> Result<f64> {
        if i >= self.num_steps {
            return Err(Error::StepOutOfRange {
                index: i,
                num_steps: self.num_steps,
            });
        }
        if i == 0 {
            return Ok(self.sigma_max);
        }
        if i == self.num_steps - 1 {
            return Ok(self.sigma_min);
        }
        let inv = 1.0 / self.rho;
        let a = self.sigma_max.powf(inv);
        let b = self.sigma_min.powf(inv);
        let frac = i as f64 / (self.num_steps - 1) as f64;
        Ok((a + frac * (b - a)).powf(self.rho))
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.num_steps)
            .map(|i| self.sigma_at(i).expect("index in range"))
            .collect()
    }

    fn contains(&self, sigma: f64) -> bool {
        let tol = 1e-9;
        sigma >= self.sigma_min * (1.0 - tol) && sigma <= self.sigma_max * (1.0 + tol)
    }
}

/// `x + σ·noise`.
pub fn corrupt(x: &[f64], sigma: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if x.len() != noise.len() {
        return Err(Error::dim("corrupt noise", x.len(), noise.len()));
    }
    Ok(x.iter().zip(noise).map(|(a, n)| a + sigma * n).collect())
}

/// Row-wise `x_i + σ_i·noise_i`.
pub fn corrupt_batch(x: &Matrix, sigma: &[f64], noise: &Matrix) -> Result<Matrix> {
    if noise.rows() != x.rows() || noise.cols() != x.cols() {
        return Err(Error::dim(
            "corrupt_batch noise",
            x.rows() * x.cols(),
            noise.rows() * noise.cols(),
        ));
    }
    if sigma.len() != x.rows() {
        return Err(Error::dim("corrupt_batch sigma", x.rows(), sigma.len()));
    }
    let mut out = x.clone();
    for (i, &s) in sigma.iter().enumerate() {
        for (o, n) in out.row_mut(i).iter_mut().zip(noise.row(i)) {
            *o += s * n;
        }
    }
    Ok(out)
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// EDM preconditioning coefficients `(c_skip, c_out, c_in)`.
pub fn preconditioning(sigma: f64, sigma_data: f64) -> (f64, f64, f64) {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let c_skip = d2 / (s2 + d2);
    let c_out = sigma * sigma_data / (s2 + d2).sqrt();
    let c_in = 1.0 / (s2 + d2).sqrt();
    (c_skip, c_out, c_in)
}

/// Loss weight `λ_σ = (σ² + σ_d²) / (σ·σ_d)²`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Sinusoidal features of `ln σ / 4`.
pub fn noise_embedding(sigma: f64) -> [f64; NOISE_EMBED_DIM] {
    let u = sigma.ln() / 4.0;
    let mut out = [0.0; NOISE_EMBED_DIM];
    for j in 0..NOISE_EMBED_DIM / 2 {
        let f = std::f64::consts::PI * 2f64.powi(j as i32 - 3);
        out[2 * j] = (f * u).sin();
        out[2 * j + 1] = (f * u).cos();
    }
    out
}

/// Anything that maps noisy points to denoised estimates.
pub trait DenoiseModel: Send + Sync {
    fn data_dim(&self) -> usize;

    /// Denoises each row of `x_t` at its own noise level and label.
    fn denoise_batch(&self, x_t: &Matrix, sigma: &[f64], labels: &[usize]) -> Result<Matrix>;
}

/// Preconditioned conditional denoiser `c_skip·x_t + c_out·F(c_in·x_t, embed(σ), onehot(y))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub net: Mlp,
    pub num_classes: usize,
    pub sigma_data: f64,
    pub schedule: NoiseSchedule,
    data_dim: usize,
}

/// Forward state kept for backpropagating through [`Denoiser::forward`].
#[derive(Debug, Clone)]
pub struct DenoiserCache {
    pub net_cache: ForwardCache,
    c_out: Vec<f64>,
    c_in: Vec<f64>,
}

impl DenoiserCache {
    /// Penultimate hidden activations (the bottleneck features).
    pub fn features(&self) -> &Matrix {
        let depth = self.net_cache.depth();
        self.net_cache.post_activation(depth.saturating_sub(2))
    }
}

impl Denoiser {
    pub fn input_dim_for(data_dim: usize, num_classes: usize) -> usize {
        data_dim + num_classes + NOISE_EMBED_DIM
    }

    /// He-initialized denoiser with the given hidden widths.
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        num_classes: usize,
        hidden: &[usize],
        sigma_data: f64,
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![Self::input_dim_for(data_dim, num_classes)];
        sizes.extend_from_slice(hidden);
        sizes.push(data_dim);
        let net = Mlp::new(&sizes, rng)?;
        Self::from_net(net, data_dim, num_classes, sigma_data, schedule)
    }

    pub fn from_net(
        net: Mlp,
        data_dim: usize,
        num_classes: usize,
        sigma_data: f64,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        schedule.validate()?;
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if !(sigma_data > 0.0) {
            return Err(Error::InvalidArgument("sigma_data must be positive".into()));
        }
        let expected = Self::input_dim_for(data_dim, num_classes);
        if net.input_dim() != expected {
            return Err(Error::dim("denoiser network input", expected, net.input_dim()));
        }
        if net.output_dim() != data_dim {
            return Err(Error::dim("denoiser network output", data_dim, net.output_dim()));
        }
        Ok(Self {
            net,
            num_classes,
            sigma_data,
            schedule,
            data_dim,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        let s = self.net.layer_sizes();
        s[1..s.len() - 1].to_vec()
    }

    pub fn checksum(&self) -> String {
        self.net.checksum()
    }

    /// Assembles `[c_in·x_t, onehot(y), embed(σ)]` and the per-row coefficients.
    fn prepare(
        &self,
        x_t: &Matrix,
        sigma: &[f64],
        labels: &[usize],
    ) -> Result<(Matrix, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let b = x_t.rows();
        if x_t.cols() != self.data_dim {
            return Err(Error::dim("denoiser x_t", self.data_dim, x_t.cols()));
        }
        if sigma.len() != b {
            return Err(Error::dim("denoiser sigma", b, sigma.len()));
        }
        if labels.len() != b {
            return Err(Error::dim("denoiser labels", b, labels.len()));
        }
        let width = Self::input_dim_for(self.data_dim, self.num_classes);
        let mut input = Matrix::zeros(b, width);
        let mut c_skip = Vec::with_capacity(b);
        let mut c_out = Vec::with_capacity(b);
        let mut c_in = Vec::with_capacity(b);
        for i in 0..b {
            let (s, y) = (sigma[i], labels[i]);
            if y >= self.num_classes {
                return Err(Error::UnknownLabel {
                    label: y,
                    num_classes: self.num_classes,
                });
            }
            if !self.schedule.contains(s) {
                return Err(Error::InvalidArgument(format!(
                    "sigma {s} outside [{}, {}]",
                    self.schedule.sigma_min, self.schedule.sigma_max
                )));
            }
            let (cs, co, ci) = preconditioning(s, self.sigma_data);
            let row = input.row_mut(i);
            for (dst, v) in row[..self.data_dim].iter_mut().zip(x_t.row(i)) {
                *dst = ci * v;
            }
            row[self.data_dim + y] = 1.0;
            row[self.data_dim + self.num_classes..].copy_from_slice(&noise_embedding(s));
            c_skip.push(cs);
            c_out.push(co);
            c_in.push(ci);
        }
        Ok((input, c_skip, c_out, c_in))
    }

    pub fn denoise(&self, x_t: &Matrix, sigma: &[f64], labels: &[usize]) -> Result<Matrix> {
        let (input, c_skip, c_out, _) = self.prepare(x_t, sigma, labels)?;
        let f = self.net.predict(&input)?;
        Ok(combine(x_t, &f, &c_skip, &c_out))
    }

    /// Denoised output plus the cache needed by [`Denoiser::backward`].
    pub fn forward(&self, x_t: &Matrix, sigma: &[f64], labels: &[usize]) -> Result<(Matrix, DenoiserCache)> {
        let (input, c_skip, c_out, c_in) = self.prepare(x_t, sigma, labels)?;
        let (f, net_cache) = self.net.forward(&input)?;
        let out = combine(x_t, &f, &c_skip, &c_out);
        Ok((
            out,
            DenoiserCache {
                net_cache,
                c_out,
                c_in,
            },
        ))
    }

    /// Parameter gradients for the cotangent `d_out` on the denoised output.
    ///
    /// The returned input gradient is w.r.t. the network input, not `x_t`.
    pub fn backward(&self, cache: &DenoiserCache, d_out: &Matrix) -> Result<Gradients> {
        let mut g = d_out.clone();
        for (i, &co) in cache.c_out.iter().enumerate() {
            for v in g.row_mut(i) {
                *v *= co;
            }
        }
        self.net.backward(&cache.net_cache, &g)
    }

    /// Parameter gradients for a cotangent on the bottleneck features, plus
    /// the gradient with respect to `x_t` through the network path.
    pub fn backward_features(
        &self,
        cache: &DenoiserCache,
        d_features: &Matrix,
    ) -> Result<(Gradients, Matrix)> {
        let depth = self.net.depth();
        if depth < 2 {
            return Err(Error::InvalidArgument(
                "bottleneck features need at least one hidden layer".into(),
            ));
        }
        let g = self.net.backward_from(&cache.net_cache, depth - 2, d_features)?;
        let dx = self.x_t_grad_from_input(cache, g.input.as_ref().expect("input grad"));
        Ok((g, dx))
    }

    fn x_t_grad_from_input(&self, cache: &DenoiserCache, d_input: &Matrix) -> Matrix {
        let mut dx = Matrix::zeros(d_input.rows(), self.data_dim);
        for i in 0..d_input.rows() {
            let ci = cache.c_in[i];
            for (d, v) in dx.row_mut(i).iter_mut().zip(&d_input.row(i)[..self.data_dim]) {
                *d = ci * v;
            }
        }
        dx
    }

    /// Parameter-free bottleneck features for `x_t`.
    pub fn features(&self, x_t: &Matrix, sigma: &[f64], labels: &[usize]) -> Result<(Matrix, DenoiserCache)> {
        let (_, cache) = self.forward(x_t, sigma, labels)?;
        Ok((cache.features().clone(), cache))
    }
}

fn combine(x_t: &Matrix, f: &Matrix, c_skip: &[f64], c_out: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x_t.rows(), x_t.cols());
    for i in 0..x_t.rows() {
        let (cs, co) = (c_skip[i], c_out[i]);
        for ((o, x), fv) in out.row_mut(i).iter_mut().zip(x_t.row(i)).zip(f.row(i)) {
            *o = cs * x + co * fv;
        }
    }
    out
}

impl DenoiseModel for Denoiser {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn denoise_batch(&self, x_t: &Matrix, sigma: &[f64], labels: &[usize]) -> Result<Matrix> {
        self.denoise(x_t, sigma, labels)
    }
}

/// Weighted denoising regression `mean_i λ_i ‖D(x_t,i) − target_i‖²` and its
/// exact parameter gradient. Shared by DSM, fake-score and TSM objectives.
pub fn denoising_regression(
    d: &Denoiser,
    x_t: &Matrix,
    sigma: &[f64],
    labels: &[usize],
    target: &Matrix,
) -> Result<(f64, Gradients)> {
    let b = x_t.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if target.rows() != b || target.cols() != d.data_dim {
        return Err(Error::dim(
            "regression target",
            b * d.data_dim,
            target.rows() * target.cols(),
        ));
    }
    let (out, cache) = d.forward(x_t, sigma, labels)?;
    let mut loss = 0.0;
    let mut d_out = Matrix::zeros(b, d.data_dim);
    for i in 0..b {
        let lam = loss_weight(sigma[i], d.sigma_data);
        for ((g, o), t) in d_out.row_mut(i).iter_mut().zip(out.row(i)).zip(target.row(i)) {
            let r = o - t;
            loss += lam * r * r;
            *g = 2.0 * lam * r / b as f64;
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    let grads = d.backward(&cache, &d_out)?;
    Ok((loss, grads))
}

/// Denoising score matching at explicitly supplied noise levels and draws.
pub fn dsm_loss_and_grad_at(
    d: &Denoiser,
    x: &Matrix,
    labels: &[usize],
    sigma: &[f64],
    noise: &Matrix,
) -> Result<(f64, Gradients)> {
    let x_t = corrupt_batch(x, sigma, noise)?;
    denoising_regression(d, &x_t, sigma, labels, x)
}

/// Denoising score matching with σ drawn uniformly over the schedule's steps.
pub fn dsm_loss_and_grad<R: Rng + ?Sized>(
    d: &Denoiser,
    x: &Matrix,
    labels: &[usize],
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let sigma = sample_sigmas(&d.schedule, 0, d.schedule.num_steps, x.rows(), rng)?;
    let noise = standard_normal(x.rows(), x.cols(), rng);
    dsm_loss_and_grad_at(d, x, labels, &sigma, &noise)
}

/// `n` noise levels at step indices drawn uniformly from `[lo, hi)`.
pub fn sample_sigmas<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    lo: usize,
    hi: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if lo >= hi || hi > schedule.num_steps {
        return Err(Error::InvalidArgument(format!(
            "step window [{lo}, {hi}) invalid for {} steps",
            schedule.num_steps
        )));
    }
    (0..n)
        .map(|_| schedule.sigma_at(rng.random_range(lo..hi)))
        .collect()
}

/// Deterministic Heun sampler (no churn) over `grid`, finishing with an
/// Euler step from `σ_min` into σ = 0. Integrates `dx/dσ = (x − D(x, σ))/σ`.
pub fn heun_sample(
    model: &dyn DenoiseModel,
    z: &Matrix,
    labels: &[usize],
    grid: &NoiseSchedule,
) -> Result<Matrix> {
    grid.validate()?;
    if z.cols() != model.data_dim() {
        return Err(Error::dim("heun_sample latent", model.data_dim(), z.cols()));
    }
    if labels.len() != z.rows() {
        return Err(Error::dim("heun_sample labels", z.rows(), labels.len()));
    }
    let b = z.rows();
    let mut sigmas = grid.sigmas();
    sigmas.push(0.0);
    let mut x = z.clone();
    for (i, w) in sigmas.windows(2).enumerate() {
        let (s, s_next) = (w[0], w[1]);
        let den = model.denoise_batch(&x, &vec![s; b], labels)?;
        let mut slope = x.clone();
        for (d, m) in slope.as_mut_slice().iter_mut().zip(den.as_slice()) {
            *d = (*d - m) / s;
        }
        let h = s_next - s;
        let mut x_next = x.clone();
        for (xn, d) in x_next.as_mut_slice().iter_mut().zip(slope.as_slice()) {
            *xn += h * d;
        }
        if s_next > 0.0 {
            let den2 = model.denoise_batch(&x_next, &vec![s_next; b], labels)?;
            for ((xn, (xo, d1)), m2) in x_next
                .as_mut_slice()
                .iter_mut()
                .zip(x.as_slice().iter().zip(slope.as_slice()))
                .zip(den2.as_slice())
            {
                let d2 = (*xn - m2) / s_next;
                *xn = xo + h * 0.5 * (d1 + d2);
            }
        }
        if !x_next.is_finite() {
            return Err(Error::NonFinite(format!("heun_sample state after step {i}")));
        }
        x = x_next;
    }
    Ok(x)
}

/// Isotropic Gaussian data `N(mean, variance·I)` with its exact posterior-mean denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussian {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl AnalyticGaussian {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::InvalidArgument("variance must be positive".into()));
        }
        Ok(Self { mean, variance })
    }

    /// Exact score of the noised density, `−(x_t − m)/(v + σ²)`.
    pub fn score(&self, x_t: &[f64], sigma: f64) -> Vec<f64> {
        let denom = self.variance + sigma * sigma;
        x_t.iter()
            .zip(&self.mean)
            .map(|(x, m)| -(x - m) / denom)
            .collect()
    }
}

/// Posterior mean `(v·x_t + σ²·m)/(v + σ²)`.
pub fn analytic_gaussian_denoiser(g: &AnalyticGaussian, x_t: &[f64], sigma: f64) -> Vec<f64> {
    let s2 = sigma * sigma;
    let v = g.variance;
    if s2.is_infinite() {
        return g.mean.clone();
    }
    x_t.iter()
        .zip(&g.mean)
        .map(|(x, m)| (v * x + s2 * m) / (v + s2))
        .collect()
}

impl DenoiseModel for AnalyticGaussian {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn denoise_batch(&self, x_t: &Matrix, sigma: &[f64], _labels: &[usize]) -> Result<Matrix> {
        if x_t.cols() != self.mean.len() {
            return Err(Error::dim("analytic denoiser x_t", self.mean.len(), x_t.cols()));
        }
        let mut out = Matrix::zeros(x_t.rows(), x_t.cols());
        for i in 0..x_t.rows() {
            out.row_mut(i)
                .copy_from_slice(&analytic_gaussian_denoiser(self, x_t.row(i), sigma[i]));
        }
        Ok(out)
    }
}

/// `s = −(x_t − α·μ)/σ²`.
pub fn score_from_denoiser(x_t: &[f64], mu: &[f64], sigma: f64, alpha: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if x_t.len() != mu.len() {
        return Err(Error::dim("score_from_denoiser", x_t.len(), mu.len()));
    }
    let s2 = sigma * sigma;
    Ok(x_t.iter().zip(mu).map(|(x, m)| -(x - alpha * m) / s2).collect())
}

/// Row-wise [`score_from_denoiser`] at a shared σ.
pub fn score_batch(x_t: &Matrix, mu: &Matrix, sigma: f64, alpha: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(x_t.rows(), x_t.cols());
    for i in 0..x_t.rows() {
        out.row_mut(i)
            .copy_from_slice(&score_from_denoiser(x_t.row(i), mu.row(i), sigma, alpha)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_denoiser(hidden: &[usize]) -> Denoiser {
        let mut sizes = vec![Denoiser::input_dim_for(2, 3)];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        Denoiser::from_net(Mlp::zeros(&sizes).unwrap(), 2, 3, 0.5, NoiseSchedule::default()).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::default();
        assert_eq!(s.sigma_at(0).unwrap(), 80.0);
        assert_eq!(s.sigma_at(999).unwrap(), 0.002);
        let v = s.sigmas();
        assert!(v.windows(2).all(|w| w[0] > w[1]));
        assert!(matches!(s.sigma_at(1000), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn schedule_three_step_midpoint() {
        let s = NoiseSchedule::new(0.002, 80.0, 3, 7.0).unwrap();
        // ((80^{1/7} + 0.002^{1/7}) / 2)^7, evaluated offline:
        // 80^{1/7} = 1.870122253..., 0.002^{1/7} = 0.411559713..., result 2.515218976147159
        let mid = s.sigma_at(1).unwrap();
        assert!((mid - 2.515_218_976_147_159).abs() < 1e-12, "{mid}");
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::new(1.0, 1.0, 2, 7.0).is_err());
        assert!(NoiseSchedule::new(1.0, 2.0, 1, 7.0).is_err());
        assert!(NoiseSchedule::new(1.0, 1.0, 1, 7.0).is_ok());
        assert!(NoiseSchedule::new(0.0, 1.0, 5, 7.0).is_err());
    }

    #[test]
    fn corrupt_examples() {
        assert_eq!(corrupt(&[1.0, 2.0], 3.0, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(corrupt(&[1.0, 1.0], 2.0, &[0.5, -0.5]).unwrap(), vec![2.0, 0.0]);
        let tiny = corrupt(&[1.0, -1.0], 1e-300, &[3.0, 3.0]).unwrap();
        assert_eq!(tiny, vec![1.0, -1.0]);
        assert!(corrupt(&[1.0], 1.0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_network_is_pure_skip() {
        let d = zero_denoiser(&[4]);
        let x = Matrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 2.0]]).unwrap();
        let out = d.denoise(&x, &[1.0, 0.5], &[0, 2]).unwrap();
        let (cs, _, _) = preconditioning(1.0, 0.5);
        assert_eq!(out.row(0), &[cs * 0.3, cs * -0.2]);
        // σ = σ_data → c_skip = 1/2
        assert_eq!(out.row(1), &[0.5, 1.0]);
        let near = d.denoise(&x, &[0.002, 0.002], &[1, 1]).unwrap();
        for (a, b) in near.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn denoise_rejects_unknown_label_and_bad_sigma() {
        let d = zero_denoiser(&[4]);
        let x = Matrix::zeros(1, 2);
        assert!(matches!(
            d.denoise(&x, &[1.0], &[3]),
            Err(Error::UnknownLabel {
                label: 3,
                num_classes: 3
            })
        ));
        assert!(d.denoise(&x, &[100.0], &[0]).is_err());
    }

    #[test]
    fn dsm_loss_with_zero_net_matches_hand_evaluation() {
        let d = zero_denoiser(&[4]);
        let x = Matrix::from_rows(&[vec![0.4, -0.1]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = standard_normal(1, 2, &mut rng);
        let sigma = 0.7;
        let (loss, _) = dsm_loss_and_grad_at(&d, &x, &[1], &[sigma], &eps).unwrap();
        let (cs, _, _) = preconditioning(sigma, 0.5);
        let lam = (sigma * sigma + 0.25) / (sigma * 0.5f64).powi(2);
        let mut expected = 0.0;
        for j in 0..2 {
            let r = cs * (x.get(0, j) + sigma * eps.get(0, j)) - x.get(0, j);
            expected += r * r;
        }
        expected *= lam;
        assert!((loss - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Denoiser::new(2, 3, &[4], 0.5, NoiseSchedule::default(), &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.4, -0.1], vec![-0.3, 0.2]]).unwrap();
        let labels = [0, 2];
        let sigma = [0.3, 5.0];
        let noise = standard_normal(2, 2, &mut rng);
        let (_, g) = dsm_loss_and_grad_at(&d, &x, &labels, &sigma, &noise).unwrap();
        let fd = finite_diff_grad(
            |net| {
                let mut dd = d.clone();
                dd.net = net.clone();
                dsm_loss_and_grad_at(&dd, &x, &labels, &sigma, &noise).unwrap().0
            },
            &d.net,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.params().zip(fd.params()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn dsm_perfect_denoiser_on_point_mass_has_zero_loss() {
        // Point mass at the origin, zero network: D(x_t) = c_skip·x_t, which is
        // exact whenever the corrupted point stays at the origin.
        let d = zero_denoiser(&[4]);
        let x = Matrix::zeros(3, 2);
        let noise = Matrix::zeros(3, 2);
        let (loss, g) = dsm_loss_and_grad_at(&d, &x, &[0, 1, 2], &[0.1, 1.0, 10.0], &noise).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.params().all(|v| *v == 0.0));
    }

    #[test]
    fn analytic_denoiser_examples() {
        let g = AnalyticGaussian::new(vec![0.0], 1.0).unwrap();
        assert_eq!(analytic_gaussian_denoiser(&g, &[2.0], 1.0), vec![1.0]);
        let g2 = AnalyticGaussian::new(vec![3.0, -1.0], 0.5).unwrap();
        let near = analytic_gaussian_denoiser(&g2, &[0.2, 0.4], 1e-9);
        assert!((near[0] - 0.2).abs() < 1e-12 && (near[1] - 0.4).abs() < 1e-12);
        let far = analytic_gaussian_denoiser(&g2, &[0.2, 0.4], 1e9);
        assert!((far[0] - 3.0).abs() < 1e-12 && (far[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_from_denoiser(&[0.7], &[0.7], 2.0, 1.0).unwrap(), vec![0.0]);
        assert_eq!(score_from_denoiser(&[1.0], &[0.0], 1.0, 1.0).unwrap(), vec![-1.0]);
        assert!(score_from_denoiser(&[1.0], &[0.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn analytic_score_identity() {
        let g = AnalyticGaussian::new(vec![0.25, -0.5], 0.01).unwrap();
        let x = [0.3, 0.9];
        for &sigma in &[0.01, 0.1, 1.0, 80.0] {
            let mu = analytic_gaussian_denoiser(&g, &x, sigma);
            let s = score_from_denoiser(&x, &mu, sigma, 1.0).unwrap();
            let exact = g.score(&x, sigma);
            for (a, b) in s.iter().zip(&exact) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
        // At σ_min the subtraction x_t − μ cancels; the error is bounded by a
        // few ulps of x_t divided by σ².
        let sigma = 0.002;
        let mu = analytic_gaussian_denoiser(&g, &x, sigma);
        let s = score_from_denoiser(&x, &mu, sigma, 1.0).unwrap();
        for ((a, b), xv) in s.iter().zip(g.score(&x, sigma)).zip(x) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * xv.abs() / (sigma * sigma));
        }
    }

    struct Constant(Vec<f64>);

    impl DenoiseModel for Constant {
        fn data_dim(&self) -> usize {
            self.0.len()
        }
        fn denoise_batch(&self, x_t: &Matrix, _s: &[f64], _l: &[usize]) -> Result<Matrix> {
            let mut out = Matrix::zeros(x_t.rows(), x_t.cols());
            for i in 0..x_t.rows() {
                out.row_mut(i).copy_from_slice(&self.0);
            }
            Ok(out)
        }
    }

    #[test]
    fn heun_with_constant_denoiser_follows_closed_form() {
        let m = vec![1.0, 1.0];
        let grid = NoiseSchedule::default().with_steps(256).unwrap();
        let z = Matrix::from_rows(&[vec![3.0, -2.0]]).unwrap();
        let out = heun_sample(&Constant(m.clone()), &z, &[0], &grid).unwrap();
        let r = grid.sigma_min / grid.sigma_max;
        for j in 0..2 {
            let closed = m[j] + (z.get(0, j) - m[j]) * r;
            assert!((out.get(0, j) - closed).abs() < 1e-3);
        }
    }

    #[test]
    fn heun_degenerate_grid_is_single_euler_step() {
        let grid = NoiseSchedule::new(0.5, 0.5, 1, 7.0).unwrap();
        let g = AnalyticGaussian::new(vec![0.0, 0.0], 1.0).unwrap();
        let z = Matrix::from_rows(&[vec![2.0, -4.0]]).unwrap();
        let out = heun_sample(&g, &z, &[0], &grid).unwrap();
        let expect = analytic_gaussian_denoiser(&g, z.row(0), 0.5);
        assert_eq!(out.row(0), expect.as_slice());
    }

    #[test]
    fn heun_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Denoiser::new(2, 3, &[8, 8], 0.5, NoiseSchedule::default(), &mut rng).unwrap();
        let grid = d.schedule.with_steps(16).unwrap();
        let z = standard_normal(5, 2, &mut rng);
        let labels = [0, 1, 2, 0, 1];
        let a = heun_sample(&d, &z, &labels, &grid).unwrap();
        let b = heun_sample(&d, &z, &labels, &grid).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn heun_reports_divergence() {
        struct Explode;
        impl DenoiseModel for Explode {
            fn data_dim(&self) -> usize {
                1
            }
            fn denoise_batch(&self, x: &Matrix, _s: &[f64], _l: &[usize]) -> Result<Matrix> {
                Ok(Matrix::from_vec(x.rows(), 1, vec![f64::NAN; x.rows()]).unwrap())
            }
        }
        let grid = NoiseSchedule::default().with_steps(4).unwrap();
        let err = heun_sample(&Explode, &Matrix::zeros(1, 1), &[0], &grid).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref s) if s.contains("step 0")));
    }

    #[test]
    fn denoise_output_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = Denoiser::new(2, 3, &[16, 16], 0.5, NoiseSchedule::default(), &mut rng).unwrap();
        let z = standard_normal(64, 2, &mut rng);
        for &s in &d.schedule.sigmas()[..] {
            if !((s * 1000.0) as usize).is_multiple_of(97) {
                continue;
            }
            let out = d.denoise(&z, &vec![s; 64], &vec![1; 64]).unwrap();
            assert!(out.is_finite());
        }
    }
}
