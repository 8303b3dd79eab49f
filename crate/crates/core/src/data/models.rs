//! Network and denoiser (de)serialization on top of [`Checkpoint`].

use std::collections::BTreeMap;

use super::checkpoint::{parse_mlp_descriptor, Checkpoint, Role};
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{AdamWState, Mlp};

pub fn mlp_to_checkpoint(
    role: Role,
    net: &Mlp,
    seed: u64,
    iteration: u64,
    meta: BTreeMap<String, String>,
) -> Checkpoint {
    Checkpoint {
        role,
        arch: net.descriptor(),
        seed,
        iteration,
        meta,
        payload: net.to_flat(),
    }
}

pub fn mlp_from_checkpoint(ckpt: &Checkpoint) -> Result<Mlp> {
    let sizes = parse_mlp_descriptor(&ckpt.arch)
        .ok_or_else(|| Error::CorruptHeader(format!("unknown architecture `{}`", ckpt.arch)))?;
    let mut net = Mlp::zeros(&sizes)?;
    net.set_flat(&ckpt.payload)?;
    if !net.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} checkpoint parameters",
            ckpt.role.as_str()
        )));
    }
    Ok(net)
}

fn denoiser_meta(d: &Denoiser) -> BTreeMap<String, String> {
    let s = &d.schedule;
    let mut m = BTreeMap::new();
    m.insert("data_dim".into(), d.data_dim().to_string());
    m.insert("num_classes".into(), d.num_classes.to_string());
    m.insert("sigma_data".into(), format!("{:e}", d.sigma_data));
    m.insert("sigma_min".into(), format!("{:e}", s.sigma_min));
    m.insert("sigma_max".into(), format!("{:e}", s.sigma_max));
    m.insert("num_steps".into(), s.num_steps.to_string());
    m.insert("rho".into(), format!("{:e}", s.rho));
    m
}

/// `extra` entries are merged into the denoiser's own metadata.
pub fn denoiser_to_checkpoint(
    role: Role,
    d: &Denoiser,
    seed: u64,
    iteration: u64,
    extra: BTreeMap<String, String>,
) -> Checkpoint {
    let mut meta = denoiser_meta(d);
    meta.extend(extra);
    mlp_to_checkpoint(role, &d.net, seed, iteration, meta)
}

pub fn denoiser_from_checkpoint(ckpt: &Checkpoint) -> Result<Denoiser> {
    let net = mlp_from_checkpoint(ckpt)?;
    let schedule = NoiseSchedule::new(
        ckpt.meta_parse("sigma_min")?,
        ckpt.meta_parse("sigma_max")?,
        ckpt.meta_parse("num_steps")?,
        ckpt.meta_parse("rho")?,
    )?;
    Denoiser::from_net(
        net,
        ckpt.meta_parse("data_dim")?,
        ckpt.meta_parse("num_classes")?,
        ckpt.meta_parse("sigma_data")?,
        schedule,
    )
}

/// Optimizer moments stored as `[m.., v..]` with betas in the metadata.
pub fn adamw_to_checkpoint(opt: &AdamWState, net: &Mlp, seed: u64) -> Checkpoint {
    let mut meta = BTreeMap::new();
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.epsilon);
    meta.insert("beta1".into(), format!("{b1:e}"));
    meta.insert("beta2".into(), format!("{b2:e}"));
    meta.insert("epsilon".into(), format!("{eps:e}"));
    Checkpoint {
        role: Role::Optimizer,
        arch: format!("adamw:{}", net.descriptor()),
        seed,
        iteration: opt.step_count(),
        meta,
        payload: opt.moments_flat(),
    }
}

pub fn adamw_from_checkpoint(ckpt: &Checkpoint, net: &Mlp) -> Result<AdamWState> {
    ckpt.expect_role(Role::Optimizer)?;
    let expected = format!("adamw:{}", net.descriptor());
    if ckpt.arch != expected {
        return Err(Error::CorruptHeader(format!(
            "optimizer for `{}` cannot drive `{}`",
            ckpt.arch, expected
        )));
    }
    if ckpt.payload.len() != 2 * net.num_params() {
        return Err(Error::dim(
            "optimizer moments",
            2 * net.num_params(),
            ckpt.payload.len(),
        ));
    }
    AdamWState::from_moments(
        &ckpt.payload,
        ckpt.iteration,
        ckpt.meta_parse("beta1")?,
        ckpt.meta_parse("beta2")?,
        ckpt.meta_parse("epsilon")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn denoiser_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Denoiser::new(2, 8, &[16, 16], 0.5, NoiseSchedule::default(), &mut rng).unwrap();
        let ck = denoiser_to_checkpoint(Role::Teacher, &d, 1, 2, BTreeMap::new());
        let bytes = super::super::encode_checkpoint(&ck).unwrap();
        let back = denoiser_from_checkpoint(&super::super::decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn optimizer_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let mut opt = AdamWState::with_defaults(&net);
        let mut g = crate::nn::Gradients::zeros_like(&net);
        for l in &mut g.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.3);
        }
        opt.step(&mut net, &g, 1e-3, 0.01).unwrap();
        let ck = adamw_to_checkpoint(&opt, &net, 9);
        assert_eq!(adamw_from_checkpoint(&ck, &net).unwrap(), opt);
        let other = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert!(adamw_from_checkpoint(&ck, &other).is_err());
    }
}
