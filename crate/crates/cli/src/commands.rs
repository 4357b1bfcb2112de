use std::path::Path;

use odeformer::llt::{LutQuantizer, QuantKind};
use odeformer::model::{argmax, BlockRole, InferencePath, ModelConfig};
use odeformer::weights::Decoded;
use odeformer::{build_model, gen_random_weights, ModelGraph, Tensor, WeightContainer};
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::CliError;
use crate::image::load_image;
use crate::Format;

pub const CLASS_NAMES: [&str; 10] = [
    "airplane", "bird", "car", "cat", "deer", "dog", "horse", "monkey", "ship", "truck",
];

fn read_container(path: &Path) -> Result<WeightContainer, CliError> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    WeightContainer::load(&bytes).map_err(|source| CliError::Container {
        path: path.to_path_buf(),
        source,
    })
}

fn load_model(
    weights: &WeightContainer,
    iterations: Option<usize>,
) -> Result<ModelGraph, CliError> {
    let mut config = weights.metadata.config.clone();
    if let Some(c) = iterations {
        config.ode_iterations = c;
    }
    Ok(build_model(&config, weights)?)
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable report")
    );
}

#[derive(Debug, Serialize)]
struct InferOutput {
    class: usize,
    label: &'static str,
    path: InferencePath,
    ode_iterations: usize,
    logits: Vec<f64>,
}

pub fn infer(
    weights: &Path,
    image: &Path,
    path: InferencePath,
    iterations: Option<usize>,
    format: Format,
) -> Result<(), CliError> {
    let container = read_container(weights)?;
    let model = load_model(&container, iterations)?;
    let img = load_image(image)?;
    let logits = model.infer(&img, path)?;
    let class = argmax(&logits);
    let out = InferOutput {
        class,
        label: CLASS_NAMES[class],
        path,
        ode_iterations: model.config().ode_iterations,
        logits: logits.to_f64_vec(),
    };
    match format {
        Format::Json => print_json(&out),
        Format::Text => {
            println!("class {} ({})", out.class, out.label);
            let l: Vec<String> = out.logits.iter().map(|v| format!("{v:.6}")).collect();
            println!("logits [{}]", l.join(", "));
        }
    }
    Ok(())
}

pub struct VerifyOptions {
    pub against: InferencePath,
    pub images: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub iterations: Option<usize>,
}

#[derive(Debug, Serialize)]
struct LutCheck {
    layer: String,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Default, Serialize)]
struct BlockDeviation {
    block: String,
    /// Whole-model run of the compared path.
    max_abs: f64,
    /// `max_abs` over the largest reference magnitude.
    relative: f64,
    /// Block alone, fed the reference input.
    isolated_max_abs: f64,
}

#[derive(Debug, Serialize)]
struct VerifyOutput {
    against: InferencePath,
    images: usize,
    seed: u64,
    tolerance: f64,
    luts: Vec<LutCheck>,
    blocks: Vec<BlockDeviation>,
    logits_max_abs: f64,
    argmax_agreement: usize,
    pass: bool,
}

/// Validate every stored activation LUT against the container's bit width
/// and granularity.
fn check_luts(c: &WeightContainer) -> Vec<LutCheck> {
    let config: &ModelConfig = &c.metadata.config;
    c.entries
        .iter()
        .filter(|e| e.name.ends_with(".act_lut"))
        .map(|e| {
            let layer = e.name.trim_end_matches(".act_lut").to_string();
            let result = match (config.quant.bits(), e.decode(), e.scale) {
                (None, ..) => Err("LUT stored in an unquantized model".to_string()),
                (_, Decoded::Int(_), _) => Err("LUT must be stored as f32".to_string()),
                (_, _, None) => Err("LUT without a scale".to_string()),
                (Some(bits), Decoded::F32(v), Some(s)) => LutQuantizer::from_table(
                    &layer,
                    &v,
                    bits,
                    config.granularity,
                    QuantKind::Activation,
                    s,
                )
                .map(|_| ())
                .map_err(|e| e.to_string()),
            };
            LutCheck {
                layer,
                ok: result.is_ok(),
                error: result.err(),
            }
        })
        .collect()
}

fn seeded_image(seed: u64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_f32(
        &[3, 96, 96],
        (0..3 * 96 * 96).map(|_| rng.random::<f32>()).collect(),
    )
    .expect("shape matches data")
}

fn max_abs(t: &Tensor) -> f64 {
    t.to_f64_vec().iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn verify(weights: &Path, opts: &VerifyOptions, format: Format) -> Result<(), CliError> {
    let container = read_container(weights)?;
    let luts = check_luts(&container);
    let luts_ok = luts.iter().all(|l| l.ok);
    let mut blocks: Vec<BlockDeviation> = BlockRole::ALL
        .iter()
        .map(|r| BlockDeviation {
            block: r.name().into(),
            ..Default::default()
        })
        .collect();
    let (mut logits_max_abs, mut agreement) = (0f64, 0);
    if luts_ok {
        let model = load_model(&container, opts.iterations)?;
        let mut ref_peak = vec![0f64; blocks.len()];
        for i in 0..opts.images {
            let img = seeded_image(opts.seed.wrapping_add(i as u64));
            let reference = model.infer_trace(&img, InferencePath::Float)?;
            let other = model.infer_trace(&img, opts.against)?;
            for (k, (r, o)) in reference.iter().zip(&other).enumerate() {
                let d = r.output.to_float().max_abs_diff(&o.output.to_float())?;
                let input = if k == 0 {
                    &img
                } else {
                    &reference[k - 1].output
                };
                let alone = model.run_block(r.role, input, opts.against)?;
                let b = &mut blocks[k];
                b.max_abs = b.max_abs.max(d);
                b.isolated_max_abs = b
                    .isolated_max_abs
                    .max(r.output.to_float().max_abs_diff(&alone.to_float())?);
                ref_peak[k] = ref_peak[k].max(max_abs(&r.output));
            }
            let (lr, lo) = (
                &reference.last().unwrap().output,
                &other.last().unwrap().output,
            );
            logits_max_abs = logits_max_abs.max(lr.max_abs_diff(lo)?);
            agreement += (argmax(lr) == argmax(lo)) as usize;
        }
        for (b, peak) in blocks.iter_mut().zip(ref_peak) {
            b.relative = if peak > 0.0 { b.max_abs / peak } else { 0.0 };
        }
    }
    let out = VerifyOutput {
        against: opts.against,
        images: opts.images,
        seed: opts.seed,
        tolerance: opts.tolerance,
        pass: luts_ok && logits_max_abs <= opts.tolerance,
        luts,
        blocks,
        logits_max_abs,
        argmax_agreement: agreement,
    };
    match format {
        Format::Json => print_json(&out),
        Format::Text => print_verify(&out),
    }
    if !luts_ok {
        let bad: Vec<&str> = out
            .luts
            .iter()
            .filter(|l| !l.ok)
            .map(|l| l.layer.as_str())
            .collect();
        return Err(CliError::Check(format!(
            "invalid activation LUT in {}",
            bad.join(", ")
        )));
    }
    if !out.pass {
        return Err(CliError::Check(format!(
            "logit deviation {:.6} exceeds tolerance {}",
            out.logits_max_abs, out.tolerance
        )));
    }
    Ok(())
}

fn print_verify(out: &VerifyOutput) {
    println!(
        "float vs {} on {} seeded images (seed {})",
        out.against, out.images, out.seed
    );
    let bad = out.luts.iter().filter(|l| !l.ok).count();
    println!(
        "activation LUTs: {} checked, {} invalid",
        out.luts.len(),
        bad
    );
    for l in out.luts.iter().filter(|l| !l.ok) {
        println!("  {}: {}", l.layer, l.error.as_deref().unwrap_or(""));
    }
    if bad > 0 {
        return;
    }
    println!(
        "{:<6} {:>12} {:>10} {:>12}",
        "block", "max_abs", "relative", "isolated"
    );
    for b in &out.blocks {
        println!(
            "{:<6} {:>12.6} {:>10.2e} {:>12.6}",
            b.block, b.max_abs, b.relative, b.isolated_max_abs
        );
    }
    println!(
        "logits max_abs {:.6} (tolerance {}), argmax agreement {}/{}: {}",
        out.logits_max_abs,
        out.tolerance,
        out.argmax_agreement,
        out.images,
        if out.pass { "PASS" } else { "FAIL" }
    );
}

pub fn report(config: &ModelConfig, format: Format) -> Result<(), CliError> {
    config.validate()?;
    let r = odeformer::accounting::account_config(config);
    match format {
        Format::Json => print_json(&r),
        Format::Text => print!("{r}"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GenOutput<'a> {
    path: &'a Path,
    seed: u64,
    entries: usize,
    bytes: usize,
}

pub fn gen_weights(
    out: &Path,
    seed: u64,
    config: &ModelConfig,
    format: Format,
) -> Result<(), CliError> {
    let c = gen_random_weights(seed, config)?;
    let bytes = c.save().map_err(|source| CliError::Container {
        path: out.to_path_buf(),
        source,
    })?;
    std::fs::write(out, &bytes).map_err(|source| CliError::Output {
        path: out.to_path_buf(),
        source,
    })?;
    let g = GenOutput {
        path: out,
        seed,
        entries: c.entries.len(),
        bytes: bytes.len(),
    };
    match format {
        Format::Json => print_json(&g),
        Format::Text => println!(
            "wrote {} ({} entries, {} bytes, seed {})",
            out.display(),
            g.entries,
            g.bytes,
            seed
        ),
    }
    Ok(())
}
