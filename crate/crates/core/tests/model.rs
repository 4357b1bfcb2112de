use odeformer::attention::{mhsa, AttentionActivation, AttentionSpec, Projection, RelPosEncoding};
use odeformer::fixed::FixedFormat;
use odeformer::layers::{
    add, add_time, avgpool_global, batchnorm, conv2d, dsc, linear, maxpool3x3s2,
    quantize_activations, relu, scale_by, ConvSpec, DscSpec, NormParams,
};
use odeformer::llt::{LutQuantizer, QuantKind};
use odeformer::model::{argmax, BlockRole, InferencePath, ModelConfig, QuantMode};
use odeformer::ode::ode_solve_traced;
use odeformer::weights::{Decoded, Entry};
use odeformer::{
    build_model, gen_random_weights, par, Error, NumericPath, Tensor, WeightContainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_f32(
        &[3, 96, 96],
        (0..3 * 96 * 96).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap()
}

fn cfg(quant: QuantMode) -> ModelConfig {
    ModelConfig {
        quant,
        ..ModelConfig::default()
    }
}

/// Float-path forward pass assembled directly from layer primitives and
/// container entries.
struct Oracle<'a> {
    c: &'a WeightContainer,
    bits: Option<u32>,
}

impl Oracle<'_> {
    fn t(&self, name: &str) -> Tensor {
        self.c
            .get(name)
            .unwrap_or_else(|| panic!("{name}"))
            .to_tensor()
            .unwrap()
    }

    fn bn(&self, name: &str) -> NormParams {
        NormParams::new(
            self.t(&format!("{name}.scale")),
            self.t(&format!("{name}.shift")),
        )
        .unwrap()
    }

    fn lut(&self, layer: &str) -> Option<LutQuantizer> {
        let bits = self.bits?;
        let e = self.c.get(&format!("{layer}.act_lut")).unwrap();
        let Decoded::F32(v) = e.decode() else {
            panic!()
        };
        Some(
            LutQuantizer::from_table(layer, &v, bits, 9, QuantKind::Activation, e.scale.unwrap())
                .unwrap(),
        )
    }

    fn conv(&self, layer: &str, x: &Tensor, stride: usize, pad: usize) -> Tensor {
        let spec = ConvSpec::new(self.t(&format!("{layer}.weight")), stride, pad).unwrap();
        let x = match self.lut(layer) {
            Some(q) => quantize_activations(x, &q).unwrap(),
            None => x.clone(),
        };
        conv2d(&x, &spec).unwrap()
    }

    fn ode(&self, p: &str, x: &Tensor, c: usize) -> Tensor {
        let s = |i| {
            DscSpec::new(
                self.t(&format!("{p}.dsc{i}.dw.weight")),
                self.t(&format!("{p}.dsc{i}.pw.weight")),
            )
            .unwrap()
        };
        let (s1, s2) = (s(1), s(2));
        let (b1, b2) = (self.bn(&format!("{p}.bn1")), self.bn(&format!("{p}.bn2")));
        let mut z = x.clone();
        for j in 0..c {
            let t = j as f64 / c as f64;
            let y = relu(&batchnorm(&dsc(&add_time(&z, t).unwrap(), &s1).unwrap(), &b1).unwrap())
                .unwrap();
            let y = batchnorm(&dsc(&add_time(&y, t).unwrap(), &s2).unwrap(), &b2).unwrap();
            z = add(
                &z,
                &scale_by(&y, 1.0 / c as f64, FixedFormat::STEP).unwrap(),
            )
            .unwrap();
        }
        z
    }

    fn ds(&self, p: &str, x: &Tensor) -> Tensor {
        let y = relu(
            &batchnorm(
                &self.conv(&format!("{p}.conv1"), x, 2, 1),
                &self.bn(&format!("{p}.bn1")),
            )
            .unwrap(),
        )
        .unwrap();
        let y = batchnorm(
            &self.conv(&format!("{p}.conv2"), &y, 1, 1),
            &self.bn(&format!("{p}.bn2")),
        )
        .unwrap();
        let s = batchnorm(
            &self.conv(&format!("{p}.shortcut"), x, 2, 0),
            &self.bn(&format!("{p}.bn_sc")),
        )
        .unwrap();
        relu(&add(&y, &s).unwrap()).unwrap()
    }

    fn mhsa(&self, x: &Tensor, heads: usize) -> Tensor {
        let y = self.conv("mhsa.conv_in", &add_time(x, 0.0).unwrap(), 1, 0);
        let y = batchnorm(&y, &self.bn("mhsa.bn")).unwrap();
        let proj = |w: &str| {
            let name = format!("mhsa.attn.{w}");
            Projection {
                weight: self.t(&format!("{name}.weight")),
                input_quant: self.lut(&name),
            }
        };
        let spec = AttentionSpec::new(
            heads,
            proj("wq"),
            proj("wk"),
            proj("wv"),
            AttentionActivation::Relu,
        )
        .unwrap();
        let rel: Vec<_> = (0..heads)
            .map(|h| {
                RelPosEncoding::new(
                    self.t(&format!("mhsa.attn.rel{h}.r_h")),
                    self.t(&format!("mhsa.attn.rel{h}.r_w")),
                )
                .unwrap()
            })
            .collect();
        let y = mhsa(&y.to_tokens().unwrap(), &spec, &rel, &self.bn("mhsa.ln")).unwrap();
        let y = y.from_tokens(6, 6).unwrap();
        relu(&self.conv("mhsa.conv_out", &add_time(&y, 0.0).unwrap(), 1, 0)).unwrap()
    }

    fn run(&self, img: &Tensor, c: usize, heads: usize) -> Tensor {
        let m = &self.c.metadata;
        let x: Vec<f32> = img
            .f32_data()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - m.input_mean[i / 9216]) / m.input_std[i / 9216])
            .collect();
        let x = Tensor::from_f32(&[3, 96, 96], x).unwrap();
        let pre = ConvSpec::new(self.t("pre.conv.weight"), 2, 3).unwrap();
        let x = maxpool3x3s2(
            &relu(&batchnorm(&conv2d(&x, &pre).unwrap(), &self.bn("pre.bn")).unwrap()).unwrap(),
        )
        .unwrap();
        let x = self.ode("ode1", &x, c);
        let x = self.ds("ds1", &x);
        let x = self.ode("ode2", &x, c);
        let x = self.ds("ds2", &x);
        let x = self.mhsa(&x, heads);
        linear(
            &avgpool_global(&x).unwrap(),
            &self.t("post.linear.weight"),
            Some(&self.t("post.linear.bias")),
        )
        .unwrap()
    }
}

#[test]
fn float_path_equals_composition_oracle() {
    for (mode, c) in [
        (QuantMode::Llt8, 3),
        (QuantMode::None, 2),
        (QuantMode::Llt4, 1),
    ] {
        let config = ModelConfig {
            ode_iterations: c,
            ..cfg(mode)
        };
        let w = gen_random_weights(21, &config).unwrap();
        let model = build_model(&config, &w).unwrap();
        let img = image(5);
        let oracle = Oracle {
            c: &w,
            bits: mode.bits(),
        }
        .run(&img, c, config.heads);
        let got = model.infer(&img, InferencePath::Float).unwrap();
        assert!(got.bit_eq(&oracle), "{mode}: {:?} vs {:?}", got, oracle);
    }
}

#[test]
fn ode_blocks_reuse_one_parameter_set() {
    let config = cfg(QuantMode::Llt8);
    let model = build_model(&config, &gen_random_weights(2, &config).unwrap()).unwrap();
    let x = model
        .run_block(BlockRole::Pre, &image(1), InferencePath::Float)
        .unwrap();
    for c in [1, 4, 10] {
        let m = model.with_iterations(c).unwrap();
        for path in [InferencePath::Float, InferencePath::Fixed] {
            let spec = m.ode_block(BlockRole::Ode1, path).unwrap();
            let input = match path {
                InferencePath::Float => x.clone(),
                InferencePath::Fixed => x.to_fixed(FixedFormat::ACTIVATION).unwrap(),
            };
            let (_, trace) = ode_solve_traced(&input, spec).unwrap();
            assert_eq!(trace.evaluations, c);
            assert_eq!(trace.parameter_buffers.len(), 8, "C={c}");
            assert_eq!(trace.final_time, 1.0);
        }
    }
    let a = odeformer::account(&model);
    let b = odeformer::account(&model.with_iterations(40).unwrap());
    assert_eq!(
        a.block(BlockRole::Ode1).computed_elements,
        b.block(BlockRole::Ode1).computed_elements
    );
}

#[test]
fn zero_image_gives_ten_logits_on_both_paths() {
    let config = ModelConfig::default();
    let model = build_model(&config, &gen_random_weights(0, &config).unwrap()).unwrap();
    let zero = Tensor::zeros(&[3, 96, 96], NumericPath::Float32);
    let f = model.infer(&zero, InferencePath::Float).unwrap();
    assert_eq!(f.shape(), [10]);
    let class = argmax(&f);
    for threads in [1, 3] {
        let again = par::with_threads(threads, || model.infer(&zero, InferencePath::Float))
            .unwrap()
            .unwrap();
        assert!(again.bit_eq(&f));
        assert_eq!(argmax(&again), class);
    }
    assert_eq!(
        model.infer(&zero, InferencePath::Fixed).unwrap().shape(),
        [10]
    );
}

#[test]
fn fixed_logits_track_float_logits() {
    for mode in [QuantMode::Llt8, QuantMode::Llt4, QuantMode::None] {
        let config = cfg(mode);
        let model = build_model(&config, &gen_random_weights(11, &config).unwrap()).unwrap();
        let img = image(12);
        let f = model.infer(&img, InferencePath::Float).unwrap();
        let x = model.infer(&img, InferencePath::Fixed).unwrap();
        let d = f.max_abs_diff(&x).unwrap();
        assert!(d <= 0.1, "{mode}: {d}");
    }
}

#[test]
fn fixed_path_block_outputs_are_q10_10() {
    let config = ModelConfig::default();
    let model = build_model(&config, &gen_random_weights(4, &config).unwrap()).unwrap();
    let trace = model.infer_trace(&image(4), InferencePath::Fixed).unwrap();
    for b in &trace {
        let want = match b.role {
            BlockRole::Pre | BlockRole::Post => NumericPath::Float32,
            _ => NumericPath::Fixed(FixedFormat::ACTIVATION),
        };
        assert_eq!(b.output.path(), want, "{}", b.role);
    }
}

#[test]
fn saved_container_gives_identical_logits() {
    let config = cfg(QuantMode::Llt4);
    let w = gen_random_weights(9, &config).unwrap();
    let back = WeightContainer::load(&w.save().unwrap()).unwrap();
    let a = build_model(&config, &w).unwrap();
    let b = build_model(&config, &back).unwrap();
    let img = image(2);
    for path in [InferencePath::Float, InferencePath::Fixed] {
        assert!(a
            .infer(&img, path)
            .unwrap()
            .bit_eq(&b.infer(&img, path).unwrap()));
    }
}

#[test]
fn load_errors() {
    let config = ModelConfig::default();
    let w = gen_random_weights(1, &config).unwrap();

    let mut missing = WeightContainer::new(w.metadata.clone());
    for e in w.entries.iter().filter(|e| e.name != "ds2.bn_sc.shift") {
        missing.push(e.clone());
    }
    assert!(
        matches!(build_model(&config, &missing), Err(Error::MissingWeight(n)) if n == "ds2.bn_sc.shift")
    );

    let mut wrong = w.clone();
    let e = wrong.get_mut("ds1.conv2.weight").unwrap();
    *e = Entry::f32("ds1.conv2.weight", &e.shape.clone(), &vec![0.0; e.elems()]);
    assert!(matches!(
        build_model(&config, &wrong),
        Err(Error::WeightDtype { .. })
    ));

    let mut shape = w.clone();
    let e = shape.get_mut("pre.bn.scale").unwrap();
    *e = Entry::f32("pre.bn.scale", &[63], &[1.0; 63]);
    assert!(matches!(
        build_model(&config, &shape),
        Err(Error::ShapeMismatch { .. })
    ));

    let four = cfg(QuantMode::Llt4);
    assert!(matches!(
        build_model(&four, &w),
        Err(Error::InvalidConfig(_))
    ));

    let bad = ModelConfig {
        ode_iterations: 0,
        ..config
    };
    assert!(build_model(&bad, &w).is_err());
}

#[test]
fn iteration_count_is_a_runtime_setting() {
    let config = ModelConfig::default();
    let w = gen_random_weights(6, &config).unwrap();
    let five = ModelConfig {
        ode_iterations: 5,
        ..config.clone()
    };
    let a = build_model(&five, &w).unwrap();
    let b = build_model(&config, &w)
        .unwrap()
        .with_iterations(5)
        .unwrap();
    let img = image(3);
    assert!(a
        .infer(&img, InferencePath::Fixed)
        .unwrap()
        .bit_eq(&b.infer(&img, InferencePath::Fixed).unwrap()));
    assert!(b.with_iterations(0).is_err());
}
