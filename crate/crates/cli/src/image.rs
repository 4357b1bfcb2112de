use std::io::BufReader;
use std::path::Path;

use image::{ImageFormat, ImageReader};
use odeformer::model::{INPUT_CHANNELS, INPUT_SIZE};
use odeformer::Tensor;

use crate::error::CliError;

/// Decode a 96x96 PNG or PPM into a `[3, 96, 96]` tensor with values in
/// `[0, 1]`. Images are never resized.
pub fn load_image(path: &Path) -> Result<Tensor, CliError> {
    let bad = |reason: String| CliError::Image {
        path: path.to_path_buf(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = ImageReader::new(BufReader::new(file))
        .with_guessed_format()
        .map_err(|e| bad(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        other => {
            return Err(bad(format!(
                "unsupported format {other:?}, expected PNG or PPM"
            )))
        }
    }
    let rgb = reader.decode().map_err(|e| bad(e.to_string()))?.to_rgb8();
    if rgb.dimensions() != (INPUT_SIZE as u32, INPUT_SIZE as u32) {
        let (w, h) = rgb.dimensions();
        return Err(bad(format!(
            "{w}x{h} pixels, the model takes {INPUT_SIZE}x{INPUT_SIZE}"
        )));
    }
    let plane = INPUT_SIZE * INPUT_SIZE;
    let mut data = vec![0f32; INPUT_CHANNELS * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..INPUT_CHANNELS {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_f32(
        &[INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE],
        data,
    )?)
}
