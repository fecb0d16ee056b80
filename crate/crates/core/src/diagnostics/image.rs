//! Binary portable graymap (P5) and pixmap (P6) output.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps `[-1, 1]` to `0..=255`, clamping outside values.
pub fn to_byte<T: Scalar>(x: T) -> u8 {
    let v = ((x.to_f64_lossy() + 1.0) * 127.5).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(0.0, 255.0) as u8
    }
}

/// Encodes raw 8-bit samples; `channels` is 1 (P5) or 3 (P6, interleaved).
pub fn encode_pnm(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return dim_err(format!("portable maps hold 1 or 3 channels, not {c}")),
    };
    if pixels.len() != width * height * channels {
        return dim_err(format!(
            "{} bytes for a {width}x{height}x{channels} image",
            pixels.len()
        ));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Tiles a batch into a grid with `cols` columns and one-pixel black
/// gutters.
pub fn image_grid<T: Scalar>(images: &Tensor<T>, cols: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.n == 0 || cols == 0 {
        return dim_err("image grid needs at least one image and one column");
    }
    let cols = cols.min(s.n);
    let rows = s.n.div_ceil(cols);
    let (gw, gh) = (cols * (s.w + 1) - 1, rows * (s.h + 1) - 1);
    let mut px = vec![0u8; gw * gh * s.c];
    for n in 0..s.n {
        let (oy, ox) = ((n / cols) * (s.h + 1), (n % cols) * (s.w + 1));
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    px[((oy + y) * gw + ox + x) * s.c + c] = to_byte(images.at(n, c, y, x));
                }
            }
        }
    }
    encode_pnm(gw, gh, s.c, &px)
}
