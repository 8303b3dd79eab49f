//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! The toy-reproduction and small-student checks train real models. By default
//! the small-student check runs at a reduced budget and the toy reproduction,
//! which is defined at desk scale, is skipped. `MSD_ACCEPTANCE_SCALE=desk` runs
//! both at desk scale.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use msd_core::commands::{
    cmd_distill, cmd_train_teacher, distill_in_memory, init_teacher, train_teacher_from, DistillOptions,
};
use msd_core::config::RunConfig;
use msd_core::data::{
    decode_checkpoint, encode_checkpoint, generate_pairs, load_checkpoint, save_checkpoint, Checkpoint,
    MogSpec, PairedDataset, Role,
};
use msd_core::diffusion::{
    dsm_loss_and_grad_at, heun_sample, standard_normal, AnalyticGaussian, Denoiser, NoiseSchedule,
};
use msd_core::distill::{
    dmd_generator_grad, draw_latents, gan_losses, regression_loss_and_grad, tsm_loss_and_grad_at,
    DiscriminatorHead, Generator,
};
use msd_core::eval::{eval_generators, teacher_histograms, EvalConfig};
use msd_core::msd::{
    filter_adm, filter_dm, partition_consecutive, partition_kmeans, route_and_generate, route_generators,
    ArchTag, PairedFilter, Partition, Stage, StudentBundle,
};
use msd_core::nn::{finite_diff_grad, AdamWState, Mlp};
use msd_core::parallel::{stream_rng, Execution};
use msd_core::{Error, Matrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- criterion 1

struct GradCheck {
    worst: f64,
}

impl GradCheck {
    /// Records `|a−b| / (1e-4·max(|a|,|b|) + 1e-8)`; anything above 1 fails.
    fn compare<'a>(
        &mut self,
        analytic: impl Iterator<Item = &'a f64>,
        numeric: impl Iterator<Item = &'a f64>,
    ) {
        for (a, b) in analytic.zip(numeric) {
            let r = (a - b).abs() / (1e-4 * a.abs().max(b.abs()) + 1e-8);
            self.worst = self.worst.max(if r.is_nan() { f64::INFINITY } else { r });
        }
    }
}

fn fd_matrix(m: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Vec<f64> {
    let mut probe = m.clone();
    let mut out = Vec::with_capacity(m.as_slice().len());
    for i in 0..m.as_slice().len() {
        let base = m.as_slice()[i];
        probe.as_mut_slice()[i] = base + step;
        let up = f(&probe);
        probe.as_mut_slice()[i] = base - step;
        let down = f(&probe);
        probe.as_mut_slice()[i] = base;
        out.push((up - down) / (2.0 * step));
    }
    out
}

fn random_hidden(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.random_range(1..=2))
        .map(|_| rng.random_range(3..=6))
        .collect()
}

fn gradient_case(seed: u64, check: &mut GradCheck) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = rng.random_range(1..=4);
    let b = rng.random_range(2..=4);
    let sched = NoiseSchedule::default();
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..nc)).collect();
    let sigma: Vec<f64> = (0..b)
        .map(|_| sched.sigma_at(rng.random_range(0..900)))
        .collect::<Result<_>>()?;
    let x = Matrix::from_vec(b, 2, (0..2 * b).map(|_| rng.random_range(-0.6..0.6)).collect())?;
    let noise = standard_normal(b, 2, &mut rng);
    let h = 1e-5;

    // DSM
    let d = Denoiser::new(2, nc, &random_hidden(&mut rng), 0.5, sched, &mut rng)?;
    let (_, g) = dsm_loss_and_grad_at(&d, &x, &labels, &sigma, &noise)?;
    let fd = finite_diff_grad(
        |net| {
            let dd = Denoiser::from_net(net.clone(), 2, nc, 0.5, sched).unwrap();
            dsm_loss_and_grad_at(&dd, &x, &labels, &sigma, &noise).unwrap().0
        },
        &d.net,
        h,
    )?;
    check.compare(g.params(), fd.params());

    // TSM against a different frozen network
    let teacher = Denoiser::new(2, nc, &random_hidden(&mut rng), 0.5, sched, &mut rng)?;
    let (_, g) = tsm_loss_and_grad_at(&d, &teacher, &x, &labels, &sigma, &noise)?;
    let fd = finite_diff_grad(
        |net| {
            let dd = Denoiser::from_net(net.clone(), 2, nc, 0.5, sched).unwrap();
            tsm_loss_and_grad_at(&dd, &teacher, &x, &labels, &sigma, &noise)
                .unwrap()
                .0
        },
        &d.net,
        h,
    )?;
    check.compare(g.params(), fd.params());

    // Regression through a generator
    let mut sizes = vec![2 + nc];
    sizes.extend(random_hidden(&mut rng));
    sizes.push(2);
    let gen = Generator::from_net(Mlp::new(&sizes, &mut rng)?, 2, nc)?;
    let z = standard_normal(b, 2, &mut rng);
    let (_, g) = regression_loss_and_grad(&gen, &z, &labels, &x)?;
    let fd = finite_diff_grad(
        |net| {
            let gg = Generator::from_net(net.clone(), 2, nc).unwrap();
            regression_loss_and_grad(&gg, &z, &labels, &x).unwrap().0
        },
        &gen.net,
        h,
    )?;
    check.compare(g.params(), fd.params());

    // DMD surrogate: mean_i <cotangent_i, G(z_i)> with the cotangent frozen
    let fake = Denoiser::new(2, nc, &random_hidden(&mut rng), 0.5, sched, &mut rng)?;
    let s = sched.sigma_at(rng.random_range(0..750))?;
    let dmd = dmd_generator_grad(&teacher, &fake, &gen, &z, &labels, s, &noise, 1.0)?;
    let cot = dmd.cotangent.clone();
    let fd = finite_diff_grad(
        |net| {
            let gg = Generator::from_net(net.clone(), 2, nc).unwrap();
            let out = gg.generate(&z, &labels).unwrap();
            out.as_slice()
                .iter()
                .zip(cot.as_slice())
                .map(|(a, c)| a * c)
                .sum::<f64>()
                / b as f64
        },
        &gen.net,
        h,
    )?;
    check.compare(dmd.grads.params(), fd.params());

    // GAN head: parameters and both feature inputs
    let feat = rng.random_range(3..=6);
    let head = DiscriminatorHead::new(feat, &random_hidden(&mut rng), &mut rng)?;
    let ff = standard_normal(b, feat, &mut rng);
    let fr = standard_normal(b + 1, feat, &mut rng);
    let gl = gan_losses(&head, &ff, &fr)?;
    let with_head = |net: &Mlp| DiscriminatorHead::from_net(net.clone()).unwrap();
    let fd = finite_diff_grad(
        |n| gan_losses(&with_head(n), &ff, &fr).unwrap().disc_loss,
        &head.net,
        h,
    )?;
    check.compare(gl.head_disc_grads.params(), fd.params());
    let fd = finite_diff_grad(
        |n| gan_losses(&with_head(n), &ff, &fr).unwrap().gen_loss,
        &head.net,
        h,
    )?;
    check.compare(gl.head_gen_grads.params(), fd.params());
    let fd = fd_matrix(&ff, h, |m| gan_losses(&head, m, &fr).unwrap().gen_loss);
    check.compare(gl.d_gen_d_fake_features.as_slice().iter(), fd.iter());
    let fd = fd_matrix(&ff, h, |m| gan_losses(&head, m, &fr).unwrap().disc_loss);
    check.compare(gl.d_disc_d_fake_features.as_slice().iter(), fd.iter());
    let fd = fd_matrix(&fr, h, |m| gan_losses(&head, &ff, m).unwrap().disc_loss);
    check.compare(gl.d_disc_d_real_features.as_slice().iter(), fd.iter());
    Ok(())
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut check = GradCheck { worst: 0.0 };
    for seed in 0..50 {
        ok(gradient_case(seed, &mut check))?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(check.worst <= 1.0, || {
        format!("worst error ratio {:.3} > 1", check.worst)
    })?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "50 cases, worst error/tolerance {:.3}, {secs:.1}s",
        check.worst
    ))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let (v, n) = (0.01, 10_000);
    let m = [0.3, -0.2];
    let g = ok(AnalyticGaussian::new(m.to_vec(), v))?;
    let grid = ok(NoiseSchedule::default().with_steps(256))?;
    let (smin, smax) = (grid.sigma_min, grid.sigma_max);
    let mut rng = stream_rng(2, 0);
    let z = draw_latents(n, 2, smax, &mut rng);
    let labels = vec![0; n];
    let x = ok(heun_sample(&g, &z, &labels, &grid))?;
    // The probability-flow ODE scales deviations from m by sqrt((v+σ²)/(v+σ_max²));
    // the closing Euler step to σ = 0 multiplies by v/(v+σ_min²).
    let shrink = ((v + smin * smin) / (v + smax * smax)).sqrt() * v / (v + smin * smin);
    let var_expected = smax * smax * shrink * shrink;
    let mut detail = Vec::new();
    for j in 0..2 {
        let col: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        ensure((mean - m[j]).abs() <= 3.0 * se, || {
            format!(
                "dim {j}: mean {mean:.5} vs {} ({:.2} SE)",
                m[j],
                (mean - m[j]).abs() / se
            )
        })?;
        ensure((var / var_expected - 1.0).abs() <= 0.05, || {
            format!("dim {j}: variance {var:.6} vs closed form {var_expected:.6}")
        })?;
        detail.push(format!("dim{j} mean {mean:+.4} var {var:.5}"));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{}; closed-form var {var_expected:.5}; {secs:.1}s",
        detail.join(", ")
    ))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let sched = NoiseSchedule::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let nc = rng.random_range(1..=5);
        let b = rng.random_range(1..=16);
        let teacher = ok(Denoiser::new(
            2,
            nc,
            &random_hidden(&mut rng),
            0.5,
            sched,
            &mut rng,
        ))?;
        let fake = teacher.clone();
        let g = ok(Generator::from_denoiser(&teacher))?;
        let z = draw_latents(b, 2, 80.0, &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..nc)).collect();
        let noise = standard_normal(b, 2, &mut rng);
        let sigma = ok(sched.sigma_at(rng.random_range(0..750)))?;
        let out = ok(dmd_generator_grad(
            &teacher, &fake, &g, &z, &labels, sigma, &noise, 1.0,
        ))?;
        let norm = out.grads.global_norm();
        ensure(norm == 0.0, || format!("seed {seed}: norm {norm:e}"))?;
    }
    Ok("20 configurations, every gradient norm exactly 0".into())
}

// ------------------------------------------------------- criteria 4, 5 and 10

struct Scale {
    name: &'static str,
    teacher_iters: usize,
    teacher_hidden: Vec<usize>,
    distill_iters: usize,
    batch: usize,
    lr: f64,
    samples: usize,
    teacher_steps: usize,
    tsm_iters: usize,
    small_total: usize,
}

impl Scale {
    fn from_env() -> Self {
        match std::env::var("MSD_ACCEPTANCE_SCALE").as_deref() {
            Ok("desk") => Self {
                name: "desk",
                teacher_iters: 10_000,
                teacher_hidden: vec![128; 4],
                distill_iters: 20_000,
                batch: 256,
                lr: 1e-6,
                samples: 100_000,
                teacher_steps: 64,
                tsm_iters: 5_000,
                small_total: 20_000,
            },
            _ => Self {
                name: "reduced",
                teacher_iters: 4_000,
                teacher_hidden: vec![64; 3],
                distill_iters: 1_000,
                batch: 128,
                lr: 1e-6,
                samples: 100_000,
                teacher_steps: 32,
                tsm_iters: 500,
                small_total: 1_500,
            },
        }
    }

    fn config(&self, seed: u64) -> RunConfig {
        let mut c = RunConfig::desk();
        c.seed = seed;
        c.teacher.iterations = self.teacher_iters;
        c.teacher.hidden = self.teacher_hidden.clone();
        c.distill.iterations = self.distill_iters;
        c.distill.batch_size = self.batch;
        c.distill.generator_lr = self.lr;
        c.distill.fake_lr = self.lr;
        c.eval.hist.samples = self.samples;
        c.eval.periodic_samples = self.samples;
        c.eval.teacher_steps = self.teacher_steps;
        c.eval.every = 0;
        c.tsm.batch_size = self.batch;
        c
    }
}

struct Lab {
    cfg: RunConfig,
    teacher: Denoiser,
    pairs: PairedDataset,
}

fn lab(scale: &Scale) -> Result<Lab> {
    let cfg = scale.config(0);
    let mut teacher = init_teacher(&cfg)?;
    let mut opt = AdamWState::new(&teacher.net, cfg.teacher.beta1, cfg.teacher.beta2, 1e-8);
    train_teacher_from(&mut teacher, &mut opt, &cfg, 0, |_, _, _, _| Ok(()))?;
    let pairs = generate_pairs(
        &teacher,
        cfg.pairs.count,
        cfg.pairs.sampler_steps,
        1,
        Execution::default(),
    )?;
    Ok(Lab { cfg, teacher, pairs })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (m, s)
}

fn criterion_4(scale: &Scale, lab: &Lab) -> Outcome {
    let t = Instant::now();
    let hist = EvalConfig {
        samples: scale.samples,
        ..EvalConfig::default()
    };
    let reference = ok(teacher_histograms(
        &lab.teacher,
        scale.teacher_steps,
        &hist,
        77,
        Execution::default(),
    ))?;
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for k in [1usize, 4, 8] {
        for seed in 1..=3u64 {
            let mut cfg = lab.cfg.clone();
            cfg.seed = seed;
            cfg.msd.students = k;
            cfg.eval.every = 0;
            cfg.eval.periodic_samples = 1000;
            cfg.eval.teacher_steps = 2;
            let run = ok(distill_in_memory(
                &cfg,
                &lab.teacher,
                Some(&lab.pairs),
                Execution::Sequential,
                None,
            ))?;
            let gens: Vec<&Generator> = run.bundles.iter().map(|b| &b.generator).collect();
            let r = ok(eval_generators(
                &run.bundles[0].partition,
                &gens,
                &reference,
                &hist,
                lab.teacher.schedule.sigma_max,
                1000 + seed,
                Execution::default(),
            ))?;
            by_k.entry(k).or_default().push(r.l1);
        }
    }
    let stats: BTreeMap<usize, (f64, f64)> = by_k.iter().map(|(k, v)| (*k, mean_std(v))).collect();
    let pooled = stats.values().map(|s| s.1).fold(0.0, f64::max);
    let summary = stats
        .iter()
        .map(|(k, (m, s))| format!("K={k} {m:.4}±{s:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    let (m1, m4, m8) = (stats[&1].0, stats[&4].0, stats[&8].0);
    let detail = format!(
        "{} scale: {summary}; {:.0}s",
        scale.name,
        t.elapsed().as_secs_f64()
    );
    ensure(m8 < m4 && m4 < m1, || format!("ordering violated; {detail}"))?;
    ensure(m4 - m8 > 2.0 * pooled && m1 - m4 > 2.0 * pooled, || {
        format!(
            "gaps {:.4}, {:.4} not above 2·max std {:.4}; {detail}",
            m1 - m4,
            m4 - m8,
            2.0 * pooled
        )
    })?;
    Ok(detail)
}

fn criterion_5(scale: &Scale, lab: &Lab) -> Outcome {
    let t = Instant::now();
    let hist = EvalConfig {
        samples: scale.samples,
        ..EvalConfig::default()
    };
    let reference = ok(teacher_histograms(
        &lab.teacher,
        scale.teacher_steps,
        &hist,
        78,
        Execution::default(),
    ))?;
    let mut dm_only = Vec::new();
    let mut with_tsm = Vec::new();
    for seed in 1..=3u64 {
        for tsm in [false, true] {
            let mut cfg = lab.cfg.clone();
            cfg.seed = seed;
            cfg.msd.students = 1;
            cfg.msd.smaller = Some(32);
            if tsm {
                cfg.msd.stages = vec![Stage::Tsm, Stage::Dm];
                cfg.tsm.iterations = scale.tsm_iters;
                cfg.distill.iterations = scale.small_total - scale.tsm_iters;
            } else {
                cfg.msd.stages = vec![Stage::Dm];
                cfg.distill.iterations = scale.small_total;
            }
            cfg.eval.periodic_samples = 1000;
            cfg.eval.teacher_steps = 2;
            // Library-level run: the config layer would reject DM-only smaller students.
            let run = ok(msd_core::msd::train_msd(
                &msd_core::msd::MsdInputs {
                    teacher: &lab.teacher,
                    partition: &ok(partition_consecutive(8, 1))?,
                    paired: Some(&lab.pairs),
                    spec: &cfg.data,
                },
                &msd_core::commands::msd_config(&cfg, &lab.teacher, Execution::Sequential),
                seed,
                &mut |_| Ok(()),
            ))?;
            let gens: Vec<&Generator> = run.iter().map(|b| &b.generator).collect();
            let r = ok(eval_generators(
                &run[0].partition,
                &gens,
                &reference,
                &hist,
                lab.teacher.schedule.sigma_max,
                2000 + seed,
                Execution::default(),
            ))?;
            if tsm { &mut with_tsm } else { &mut dm_only }.push(r.l1);
        }
    }
    let detail = format!(
        "{} scale: DM-only {:?}, TSM→DM {:?}; {:.0}s",
        scale.name,
        dm_only.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        with_tsm.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        t.elapsed().as_secs_f64()
    );
    let (a, b) = (median(&mut with_tsm.clone()), median(&mut dm_only.clone()));
    ensure(a < b, || {
        format!("median TSM→DM {a:.4} ≥ DM-only {b:.4}; {detail}")
    })?;
    Ok(detail)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::desk();
    cfg.seed = 5;
    cfg.threads = 1;
    cfg.teacher.hidden = vec![16, 16];
    cfg.teacher.iterations = 200;
    cfg.teacher.batch_size = 64;
    cfg.teacher.checkpoint_every = 50;
    cfg.pairs.count = 64;
    cfg.pairs.sampler_steps = 8;
    cfg.distill.iterations = 40;
    cfg.distill.batch_size = 32;
    cfg.adm.iterations = 20;
    cfg.adm.batch_size = 32;
    cfg.msd.students = 3;
    cfg.msd.stages = vec![Stage::Dm, Stage::Adm];
    cfg.eval.every = 20;
    cfg.eval.periodic_samples = 500;
    cfg.eval.teacher_steps = 4;
    cfg.eval.hist.shard = 250;
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let tdir = root.join("teacher");
        ok(cmd_train_teacher(&cfg, &tdir, false, false))?;
        let teacher = ok(msd_core::commands::load_teacher(&tdir.join("teacher.ckpt")))?;
        let pairs = ok(generate_pairs(
            &teacher,
            cfg.pairs.count,
            cfg.pairs.sampler_steps,
            9,
            Execution::Sequential,
        ))?;
        ok(pairs.save(&root.join("pairs.ckpt"), cfg.seed))?;
        ok(cmd_distill(
            &cfg,
            &tdir.join("teacher.ckpt"),
            Some(&root.join("pairs.ckpt")),
            &root.join("students"),
            &DistillOptions::default(),
        ))?;
        snapshots.push(dir_bytes(&root));
    }
    ensure(snapshots[0] == snapshots[1], || {
        let diff: Vec<&String> = snapshots[0]
            .iter()
            .filter(|(k, v)| snapshots[1].get(*k) != Some(*v))
            .map(|(k, _)| k)
            .collect();
        format!("files differ: {diff:?}")
    })?;
    Ok(format!(
        "{} files bitwise identical across two runs",
        snapshots[0].len()
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let spec = MogSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 200;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
    let z = standard_normal(n, 2, &mut rng);
    let y = standard_normal(n, 2, &mut rng);
    let paired = ok(PairedDataset::new(
        z.clone(),
        labels.clone(),
        y.clone(),
        "t".into(),
        4,
    ))?;
    let mut checked = 0;
    for k_total in 1..=8 {
        for strategy in 0..2 {
            let p = if strategy == 0 {
                ok(partition_consecutive(8, k_total))?
            } else {
                ok(partition_kmeans(&spec.class_means(), k_total, 100, 3))?
            };
            for k in 0..k_total {
                let owned = p.classes_of(k);
                let f = ok(filter_dm(&paired, &p, k, PairedFilter::Full))?;
                ensure(f.conditions == owned, || {
                    format!("K={k_total} student {k}: conditions")
                })?;
                let view = f.paired.as_ref().ok_or("no paired view")?;
                let all: Vec<usize> = (0..n).collect();
                let (gz, gl, gy) = view.gather(&all);
                ensure(view.len() == n && gz == z && gl == labels && gy == y, || {
                    format!("K={k_total} student {k}: full view is not the whole dataset")
                })?;
                let f = ok(filter_adm(&spec, &p, k))?;
                let real = f.real.as_ref().ok_or("no real sampler")?;
                let mut r = stream_rng(60, (k_total * 10 + k) as u64);
                let (_, drawn) = ok(real.sample(10_000, &mut r))?;
                ensure(drawn.iter().all(|c| owned.contains(c)), || {
                    format!("K={k_total} student {k}: out-of-partition label drawn")
                })?;
                ensure(f.conditions == owned, || "ADM conditions".into())?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} student filters, 10k ADM draws each"))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut cases = 0;
    for c in 1..=64usize {
        let spec = MogSpec {
            num_classes: c,
            ..MogSpec::default()
        };
        let emb = spec.class_means();
        for k in 1..=c {
            let cons = ok(partition_consecutive(c, k))?;
            let km = ok(partition_kmeans(&emb, k, 100, c as u64))?;
            for (name, p) in [("consecutive", &cons), ("kmeans", &km)] {
                ensure(p.num_classes() == c && p.num_students() == k, || {
                    format!("{name} C={c} K={k}: shape")
                })?;
                ensure(p.assignment().iter().all(|&s| s < k), || {
                    format!("{name} C={c} K={k}: label")
                })?;
                let mut seen = vec![false; c];
                for s in 0..k {
                    let cls = p.classes_of(s);
                    ensure(!cls.is_empty(), || {
                        format!("{name} C={c} K={k}: empty student {s}")
                    })?;
                    for cl in cls {
                        ensure(!seen[cl], || format!("{name} C={c} K={k}: class {cl} twice"))?;
                        seen[cl] = true;
                    }
                }
                ensure(seen.iter().all(|s| *s), || {
                    format!("{name} C={c} K={k}: not total")
                })?;
                cases += 1;
            }
            let sizes = cons.sizes();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            ensure(hi - lo <= 1, || {
                format!("consecutive C={c} K={k}: sizes {sizes:?}")
            })?;
        }
    }
    Ok(format!(
        "{cases} partitions, all total and disjoint; consecutive balanced"
    ))
}

// ---------------------------------------------------------------- criterion 8

fn bundle(index: usize, partition: &Partition, g: Generator, fake: &Denoiser) -> StudentBundle {
    StudentBundle {
        index,
        partition: partition.clone(),
        generator: g,
        fake: fake.clone(),
        disc_head: None,
        stages: vec![Stage::Dm],
        arch: ArchTag::SameSize,
        iteration: 0,
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let nc = 8;
    let fake = ok(Denoiser::new(
        2,
        nc,
        &[4],
        0.5,
        NoiseSchedule::default(),
        &mut rng,
    ))?;
    let spec = MogSpec::default();
    let mut calls = 0;
    for k in 1..=nc {
        for p in [
            ok(partition_consecutive(nc, k))?,
            ok(partition_kmeans(&spec.class_means(), k, 100, 1))?,
        ] {
            let gens: Vec<Generator> = (0..k)
                .map(|_| Generator::from_net(Mlp::new(&[2 + nc, 5, 2], &mut rng).unwrap(), 2, nc).unwrap())
                .collect();
            let bundles: Vec<StudentBundle> = gens
                .iter()
                .enumerate()
                .map(|(i, g)| bundle(i, &p, g.clone(), &fake))
                .collect();
            for label in 0..nc {
                let z = [rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0)];
                let before: Vec<u64> = bundles.iter().map(|b| b.generator.eval_count()).collect();
                let out = ok(route_and_generate(&bundles, &z, label))?;
                let owner = ok(p.student_of(label))?;
                for (s, b) in bundles.iter().enumerate() {
                    let delta = b.generator.eval_count() - before[s];
                    let want = u64::from(s == owner);
                    ensure(delta == want, || {
                        format!("K={k} label {label}: student {s} ran {delta} times")
                    })?;
                }
                let direct = ok(gens[owner].generate(&ok(Matrix::from_vec(1, 2, z.to_vec()))?, &[label]))?;
                ensure(out == direct.as_slice(), || {
                    format!("K={k} label {label}: output differs from owner")
                })?;
                calls += 1;
            }
            // Batched routing: exactly one forward per row in total.
            let labels: Vec<usize> = (0..64).map(|i| i % nc).collect();
            let z = draw_latents(64, 2, 80.0, &mut rng);
            let refs: Vec<&Generator> = gens.iter().collect();
            let before: u64 = gens.iter().map(|g| g.eval_count()).sum();
            ok(route_generators(&p, &refs, &z, &labels))?;
            let used: u64 = gens.iter().map(|g| g.eval_count()).sum::<u64>() - before;
            ensure(used == 64, || format!("K={k}: batch of 64 used {used} forwards"))?;
        }
    }
    Ok(format!(
        "{calls} routed samples, each evaluated once by its owner only"
    ))
}

// ---------------------------------------------------------------- criterion 9

fn random_checkpoint(rng: &mut ChaCha8Rng, i: usize) -> Checkpoint {
    let roles = [
        Role::Teacher,
        Role::Generator,
        Role::Fake,
        Role::Optimizer,
        Role::Histogram,
    ];
    let len = rng.random_range(0..300);
    let payload: Vec<f64> = (0..len)
        .map(|j| match j % 7 {
            0 => f64::from_bits(rng.random::<u64>() & !(0x7ff << 52) | (rng.random_range(1..2046u64) << 52)),
            1 => -0.0,
            2 => f64::MIN_POSITIVE / 3.0,
            _ => rng.random_range(-1e6..1e6),
        })
        .collect();
    let mut meta = BTreeMap::new();
    for m in 0..rng.random_range(0..5) {
        meta.insert(format!("key{m}"), format!("value {i} {}", rng.random::<u32>()));
    }
    Checkpoint {
        role: roles[i % roles.len()],
        arch: format!("custom-{i}"),
        seed: rng.random(),
        iteration: rng.random(),
        meta,
        payload,
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let ck = random_checkpoint(&mut rng, i);
        let path = tmp.path().join(format!("c{i}.ckpt"));
        ok(save_checkpoint(&path, &ck))?;
        let back = ok(load_checkpoint(&path))?;
        ensure(
            back.role == ck.role
                && back.arch == ck.arch
                && back.seed == ck.seed
                && back.iteration == ck.iteration
                && back.meta == ck.meta
                && same_bits(&back.payload, &ck.payload),
            || format!("checkpoint {i} changed in round trip"),
        )?;

        let n = rng.random_range(1..40);
        let z = standard_normal(n, 2, &mut rng);
        let y = standard_normal(n, 2, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
        let pd = ok(PairedDataset::new(
            z,
            labels,
            y,
            format!("{:064x}", rng.random::<u128>()),
            256,
        ))?;
        let ppath = tmp.path().join(format!("p{i}.ckpt"));
        ok(pd.save(&ppath, i as u64))?;
        let pb = ok(PairedDataset::load(&ppath))?;
        ensure(
            pb.labels == pd.labels
                && same_bits(pb.z.as_slice(), pd.z.as_slice())
                && same_bits(pb.y.as_slice(), pd.y.as_slice())
                && pb.teacher_checksum == pd.teacher_checksum
                && pb.sampler_steps == pd.sampler_steps,
            || format!("paired dataset {i} changed in round trip"),
        )?;

        // Fault injection on the encoded bytes.
        let bytes = ok(encode_checkpoint(&ck))?;
        let header_end = bytes.len() - 8 * ck.payload.len();
        if !ck.payload.is_empty() {
            let cut = rng.random_range(header_end..bytes.len());
            ensure(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Truncated { .. })),
                || format!("checkpoint {i}: payload truncation not reported"),
            )?;
        }
        let cut = rng.random_range(0..header_end);
        ensure(
            matches!(decode_checkpoint(&bytes[..cut]), Err(Error::CorruptHeader(_))),
            || format!("checkpoint {i}: header truncation not reported"),
        )?;
        let mut bad = bytes.clone();
        bad[rng.random_range(0..8)] ^= 0x20;
        ensure(
            matches!(decode_checkpoint(&bad), Err(Error::CorruptHeader(_))),
            || format!("checkpoint {i}: bad magic not reported"),
        )?;
        let mut bad = bytes.clone();
        bad[8] = bad[8].wrapping_add(1);
        ensure(
            matches!(decode_checkpoint(&bad), Err(Error::UnsupportedVersion(_))),
            || format!("checkpoint {i}: version change not reported"),
        )?;
    }
    // A failed load leaves the previous file untouched and no temporaries behind.
    let path = tmp.path().join("c0.ckpt");
    let before = fs::read(&path).map_err(|e| e.to_string())?;
    fs::write(tmp.path().join("broken.ckpt"), &before[..before.len() / 2]).map_err(|e| e.to_string())?;
    ensure(load_checkpoint(&tmp.path().join("broken.ckpt")).is_err(), || {
        "broken file loaded".into()
    })?;
    ensure(fs::read(&path).map_err(|e| e.to_string())? == before, || {
        "original changed".into()
    })?;
    let stray = fs::read_dir(tmp.path())
        .map_err(|e| e.to_string())?
        .flatten()
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .count();
    ensure(stray == 0, || format!("{stray} temporary files left"))?;
    Ok("100 checkpoints and 100 paired datasets bitwise lossless; all faults reported".into())
}

// ---------------------------------------------------------------------------

/// `MSD_ACCEPTANCE_ONLY=1,2,9` restricts the run to the listed criteria.
fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("MSD_ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let scale = Scale::from_env();
    let only = selected();
    let want = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = 0;
    let mut report = |n: u32, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !want(n) {
            println!("criterion {n:>2} SKIP  {name}");
            return;
        }
        match run() {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    };
    report(1, "gradient correctness", &mut criterion_1);
    report(2, "analytic sampler oracle", &mut criterion_2);
    report(3, "zero-gradient identity", &mut criterion_3);
    let shared = if (want(4) && scale.name == "desk") || want(5) {
        lab(&scale).map_err(|e| format!("teacher: {e}"))
    } else {
        Err("not needed".into())
    };
    if scale.name == "desk" || !want(4) {
        report(4, "more students improve quality", &mut || {
            criterion_4(&scale, shared.as_ref().map_err(Clone::clone)?)
        });
    } else {
        // The claim is about the desk budget; a shorter run cannot confirm or refute it.
        println!(
            "criterion  4 SKIP  more students improve quality: defined at desk scale (9 runs of 20k \
             iterations, several hours on one core); set MSD_ACCEPTANCE_SCALE=desk"
        );
    }
    report(5, "small students need TSM", &mut || {
        criterion_5(&scale, shared.as_ref().map_err(Clone::clone)?)
    });
    report(6, "filtering rules", &mut criterion_6);
    report(7, "partition invariants", &mut criterion_7);
    report(8, "routing", &mut criterion_8);
    report(9, "persistence", &mut criterion_9);
    report(10, "determinism", &mut criterion_10);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
