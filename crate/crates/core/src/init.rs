//! Deterministic pseudorandom weights, so the engine can run without a
//! trained checkpoint.
//!
//! Conv and linear weights are uniform on `+-sqrt(3 / fan_in)` (unit
//! output variance for unit-variance input). Quantized layers store `n`-bit
//! codes with `s_w` equal to that bound and a canonical midpoint activation
//! LUT with `s_a = 1`. Batch norms are folded from statistics near
//! identity, LayerNorm affine terms sit near `(1, 0)`, and the relative
//! position tables are uniform on `+-1/sqrt(D_h)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::batchnorm_fold;
use crate::llt::{quantize_weights, LutQuantizer, QuantKind};
use crate::model::{architecture, LayerKind, ModelConfig};
use crate::tensor::Tensor;
use crate::weights::{Entry, Metadata, WeightContainer};

/// Per-channel input statistics of STL-10 (RGB).
pub const STL10_MEAN: [f32; 3] = [0.4467, 0.4398, 0.4066];
pub const STL10_STD: [f32; 3] = [0.2603, 0.2566, 0.2713];

const BN_EPS: f32 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn near(rng: &mut ChaCha8Rng, n: usize, center: f32, spread: f32) -> Vec<f32> {
    (0..n)
        .map(|_| center + rng.random_range(-spread..=spread))
        .collect()
}

/// A full model's worth of weights for `config`, identical for equal seeds.
pub fn gen_random_weights(seed: u64, config: &ModelConfig) -> Result<WeightContainer> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = WeightContainer::new(Metadata {
        config: config.clone(),
        input_mean: STL10_MEAN,
        input_std: STL10_STD,
    });
    for def in architecture(config) {
        match &def.kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                let shape = def.weight_shape().expect("weighted layer");
                let bound = (3.0 / def.fan_in() as f32).sqrt();
                let w = uniform(&mut rng, def.weight_elements(), bound);
                let name = format!("{}.weight", def.name);
                match config.quant.bits().filter(|_| def.is_quantized(config)) {
                    Some(bits) => {
                        let wq = LutQuantizer::canonical(
                            bits,
                            config.granularity,
                            QuantKind::Weight,
                            bound,
                        )?;
                        let (codes, s_w) = quantize_weights(&Tensor::from_f32(&shape, w)?, &wq)?;
                        c.push(Entry::codes(name, bits, &shape, codes.raw_data()?, s_w));
                        let aq = LutQuantizer::canonical(
                            bits,
                            config.granularity,
                            QuantKind::Activation,
                            1.0,
                        )?;
                        let table = aq.ilut();
                        let mut lut =
                            Entry::f32(format!("{}.act_lut", def.name), &[table.len()], &table);
                        lut.scale = Some(aq.scale());
                        c.push(lut);
                    }
                    None => c.push(Entry::f32(name, &shape, &w)),
                }
                if let LayerKind::Dense {
                    bias: true,
                    out_features,
                    ..
                } = def.kind
                {
                    let b = uniform(&mut rng, out_features, bound);
                    c.push(Entry::f32(
                        format!("{}.bias", def.name),
                        &[out_features],
                        &b,
                    ));
                }
            }
            LayerKind::Norm { shape } => {
                let n = shape.iter().product();
                let (scale, shift) = if def.name.ends_with(".ln") {
                    (near(&mut rng, n, 1.0, 0.1), near(&mut rng, n, 0.0, 0.1))
                } else {
                    let gamma = near(&mut rng, n, 1.0, 0.1);
                    let beta = near(&mut rng, n, 0.0, 0.1);
                    let mean = near(&mut rng, n, 0.0, 0.1);
                    let var = near(&mut rng, n, 1.0, 0.1);
                    let p = batchnorm_fold(&gamma, &beta, &mean, &var, BN_EPS)?;
                    (p.scale.f32_data()?.to_vec(), p.shift.f32_data()?.to_vec())
                };
                c.push(Entry::f32(format!("{}.scale", def.name), shape, &scale));
                c.push(Entry::f32(format!("{}.shift", def.name), shape, &shift));
            }
            &LayerKind::RelPos {
                heads,
                h,
                w,
                head_dim,
            } => {
                let bound = 1.0 / (head_dim as f32).sqrt();
                for i in 0..heads {
                    let rh = uniform(&mut rng, h * head_dim, bound);
                    let rw = uniform(&mut rng, w * head_dim, bound);
                    c.push(Entry::f32(
                        format!("{}{i}.r_h", def.name),
                        &[h, head_dim],
                        &rh,
                    ));
                    c.push(Entry::f32(
                        format!("{}{i}.r_w", def.name),
                        &[w, head_dim],
                        &rw,
                    ));
                }
            }
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuantMode;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = ModelConfig::default();
        let a = gen_random_weights(7, &cfg).unwrap().save().unwrap();
        let b = gen_random_weights(7, &cfg).unwrap().save().unwrap();
        assert_eq!(a, b);
        let c = gen_random_weights(8, &cfg).unwrap();
        let a = gen_random_weights(7, &cfg).unwrap();
        assert_ne!(
            a.get("ds1.conv1.weight").unwrap().checksum(),
            c.get("ds1.conv1.weight").unwrap().checksum()
        );
    }

    #[test]
    fn dtypes_follow_quant_mode() {
        use crate::weights::Dtype;
        for (mode, dtype) in [
            (QuantMode::Llt4, Dtype::I4Packed),
            (QuantMode::Llt8, Dtype::I8),
        ] {
            let cfg = ModelConfig {
                quant: mode,
                ..ModelConfig::default()
            };
            let c = gen_random_weights(1, &cfg).unwrap();
            assert_eq!(c.get("mhsa.attn.wq.weight").unwrap().dtype, dtype);
            assert_eq!(c.get("ode1.dsc1.pw.weight").unwrap().dtype, Dtype::F32);
            assert_eq!(c.get("ds2.conv2.act_lut").unwrap().scale, Some(1.0));
        }
        let cfg = ModelConfig {
            quant: QuantMode::None,
            ..ModelConfig::default()
        };
        let c = gen_random_weights(1, &cfg).unwrap();
        assert!(c.get("ds2.conv2.act_lut").is_none());
    }
}
