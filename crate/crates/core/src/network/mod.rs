//! The conditional denoiser: DiT backbone, decoupled head, and folding of
//! timestep modulation for one-step use.

mod block;
mod denoiser;
mod embed;
mod fold;
mod head;

pub use block::DitBlock;
pub use denoiser::{token_grid, Denoiser, DenoiserOutput};
pub use embed::{patch_coordinates, sincos_2d, timestep_features, TimestepEmbedder};
pub use fold::{fold_adaln, FoldedDenoiser};
pub use head::{Head, LatentHead, PixelFieldHead};

pub use crate::patch::{patchify, unpatchify};

use candle_core::Tensor;

use crate::error::Result;

/// `uncond + scale * (cond - uncond)`.
pub fn guide(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(uncond.add(&(cond.sub(uncond)? * scale)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ConditionInjection, ModelConfig, Space};
    use crate::error::Error;
    use crate::flow::VelocityField;
    use crate::nn::{gaussian, scalar, seeded_rng, ParamStore};
    use candle_core::{DType, Device};

    fn cfg(space: Space, width: usize, zero_init: bool) -> ModelConfig {
        let mut c = ModelConfig::desk(32, 16, width);
        c.codec.space = space;
        c.denoiser.zero_init = zero_init;
        c
    }

    fn inputs(c: &ModelConfig, batch: usize, dtype: DType, seed: u64) -> (Tensor, Tensor) {
        let dev = Device::Cpu;
        let mut rng = seeded_rng(seed);
        let (ch, h, w) = c.codec.sample_dims(c.denoiser.latent_channels);
        let x = gaussian(&mut rng, &[batch, ch, h, w], dtype, &dev).unwrap();
        let (r, k) = token_grid(c);
        let cond = gaussian(
            &mut rng,
            &[batch, c.conditioner.cond_dim, r, k],
            dtype,
            &dev,
        )
        .unwrap();
        (x, cond)
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&a.sub(b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    fn model(c: &ModelConfig, dtype: DType, seed: u64) -> (ParamStore, Denoiser) {
        let store = ParamStore::new(seed, dtype, &Device::Cpu);
        let m = Denoiser::new(&store.root().pp("den"), c).unwrap();
        (store, m)
    }

    #[test]
    fn output_shapes_and_zero_init() {
        for space in [Space::Pixel, Space::Latent] {
            let c = cfg(space, 32, true);
            let (_, m) = model(&c, DType::F32, 0);
            let (x, cond) = inputs(&c, 2, DType::F32, 1);
            let t = Tensor::new(&[0.3f32, 0.7], &Device::Cpu).unwrap();
            let out = m.forward(&x, &t, Some(&cond)).unwrap();
            assert_eq!(out.prediction.dims(), x.dims());
            assert_eq!(out.features.dims(), &[2, c.feature_dim, 2, 2]);
            assert_eq!(max_diff(&out.prediction, &x.zeros_like().unwrap()), 0.0);
        }
    }

    #[test]
    fn deterministic_prediction() {
        let c = cfg(Space::Pixel, 32, false);
        let (_, m) = model(&c, DType::F32, 0);
        let (x, cond) = inputs(&c, 1, DType::F32, 1);
        let t = Tensor::new(&[0.4f32], &Device::Cpu).unwrap();
        let a = m.predict(&x, &t, Some(&cond)).unwrap();
        let b = m.predict(&x, &t, Some(&cond)).unwrap();
        assert_eq!(max_diff(&a, &b), 0.0);
    }

    #[test]
    fn condition_shape_mismatch() {
        let c = cfg(Space::Pixel, 32, false);
        let (_, m) = model(&c, DType::F32, 0);
        let (x, _) = inputs(&c, 1, DType::F32, 1);
        let bad =
            Tensor::zeros((1, c.conditioner.cond_dim, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.4f32], &Device::Cpu).unwrap();
        assert!(matches!(
            m.predict(&x, &t, Some(&bad)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn guidance_arithmetic() {
        let dev = Device::Cpu;
        let cond = Tensor::new(&[2f32, 2.0], &dev).unwrap();
        let uncond = Tensor::new(&[1f32, 1.0], &dev).unwrap();
        let g: Vec<f32> = guide(&cond, &uncond, 3.0).unwrap().to_vec1().unwrap();
        assert_eq!(g, vec![4.0, 4.0]);
    }

    #[test]
    fn cfg_is_affine_in_scale() {
        let c = cfg(Space::Pixel, 32, false);
        let (_, m) = model(&c, DType::F64, 2);
        let (x, cond) = inputs(&c, 1, DType::F64, 3);
        let t = Tensor::new(&[0.5f64], &Device::Cpu).unwrap();
        let cp = m.predict(&x, &t, Some(&cond)).unwrap();
        let up = m.predict(&x, &t, None).unwrap();
        assert_eq!(
            max_diff(&m.cfg_predict(&x, &t, &cond, 1.0).unwrap(), &cp),
            0.0
        );
        assert!(max_diff(&m.cfg_predict(&x, &t, &cond, 0.0).unwrap(), &up) < 1e-12);
        let delta = cp.sub(&up).unwrap();
        for s in [0.0, 1.0, 3.0] {
            let expect = up.add(&(&delta * s).unwrap()).unwrap();
            assert!(max_diff(&m.cfg_predict(&x, &t, &cond, s).unwrap(), &expect) < 1e-12);
        }
        assert!(m.cfg_predict(&x, &t, &cond, -1.0).is_err());
    }

    #[test]
    fn fold_matches_at_t0_for_every_width() {
        for space in [Space::Pixel, Space::Latent] {
            for width in [16, 32, 64] {
                let c = cfg(space, width, false);
                let (_, m) = model(&c, DType::F32, width as u64);
                let folded = fold_adaln(&m).unwrap();
                let (x, cond) = inputs(&c, 2, DType::F32, 5);
                let t = Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap();
                let a = m.predict(&x, &t, Some(&cond)).unwrap();
                let b = folded.predict(&x, &t, Some(&cond)).unwrap();
                let d = max_diff(&a, &b);
                assert!(d <= 1e-5, "width {width}: {d}");
                assert!(folded.num_params() < m.num_params());
            }
        }
    }

    #[test]
    fn fold_merges_adapters() {
        let c = cfg(Space::Pixel, 32, false);
        let store = ParamStore::new(7, DType::F32, &Device::Cpu);
        let mut m = Denoiser::new(&store.root().pp("den"), &c).unwrap();
        m.attach_adapters(&store, 4).unwrap();
        for (name, v) in store.vars_where(|n| n.ends_with("lora_up")) {
            let mut rng = seeded_rng(name.len() as u64);
            v.set(&gaussian(&mut rng, v.dims(), DType::F32, &Device::Cpu).unwrap())
                .unwrap();
        }
        let folded = fold_adaln(&m).unwrap();
        let (x, cond) = inputs(&c, 1, DType::F32, 5);
        let t = Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap();
        let d = max_diff(
            &m.predict(&x, &t, Some(&cond)).unwrap(),
            &folded.predict(&x, &t, Some(&cond)).unwrap(),
        );
        assert!(d <= 1e-4, "{d}");
    }

    #[test]
    fn folded_refuses_nonzero_time() {
        let c = cfg(Space::Pixel, 32, false);
        let (_, m) = model(&c, DType::F32, 0);
        let folded = fold_adaln(&m).unwrap();
        let (x, cond) = inputs(&c, 1, DType::F32, 5);
        let t = Tensor::new(&[0.5f32], &Device::Cpu).unwrap();
        assert!(matches!(
            folded.predict(&x, &t, Some(&cond)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fold_refuses_condition_dependent_modulation() {
        let mut c = cfg(Space::Pixel, 32, false);
        c.denoiser.injection = ConditionInjection::ConcatAndAdaLn;
        let (_, m) = model(&c, DType::F32, 0);
        assert!(matches!(fold_adaln(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn equivariant_under_joint_token_permutation() {
        let mut c = ModelConfig::desk(48, 16, 32);
        c.denoiser.pos_embed = false;
        c.denoiser.zero_init = false;
        let (_, m) = model(&c, DType::F64, 9);
        let (x, cond) = inputs(&c, 1, DType::F64, 10);
        let t = Tensor::new(&[0.6f64], &Device::Cpu).unwrap();
        let perm: Vec<u32> = vec![4, 0, 7, 2, 8, 1, 3, 6, 5];
        let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
        let permute_tokens = |img: &Tensor, ch: usize, p: usize| {
            let tok = patchify(img, p).unwrap().index_select(&idx, 1).unwrap();
            unpatchify(&tok, p, ch, 3, 3).unwrap()
        };
        let xp = permute_tokens(&x, 3, 16);
        let cp = permute_tokens(&cond, c.conditioner.cond_dim, 1);
        let y = m.predict(&x, &t, Some(&cond)).unwrap();
        let yp = m.predict(&xp, &t, Some(&cp)).unwrap();
        assert!(max_diff(&permute_tokens(&y, 3, 16), &yp) < 1e-10);
    }
}
