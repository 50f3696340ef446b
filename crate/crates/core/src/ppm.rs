//! Binary PPM (P6) images with 8-bit channels.
//!
//! Writing maps `[0, 1]` to `0..=255` by `round(v * 255)` with halves rounded
//! away from zero; values outside `[0, 1]` are clamped first.

use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageDecoder, ImageEncoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `[H, W, 3]` tensor.
pub fn encode(img: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, 3] = img.shape() else {
        return Err(Error::invalid(
            "ppm",
            format!("expected [H, W, 3], got {:?}", img.shape()),
        ));
    };
    let samples: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let mut out = Vec::with_capacity(samples.len() + 32);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&samples, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

/// Decodes a P6 file into `[H, W, 3]` with values in `[0, 1]`. Files with a
/// maxval below 255 are rescaled to the full 8-bit range first.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let bad = |e: image::ImageError| Error::Image(e.to_string());
    let dec = PnmDecoder::new(bytes).map_err(bad)?;
    if dec.subtype() != PnmSubtype::Pixmap(SampleEncoding::Binary) {
        return Err(Error::Image(format!(
            "expected a binary PPM (P6), got {:?}",
            dec.subtype()
        )));
    }
    if dec.color_type() != ColorType::Rgb8 {
        return Err(Error::Image(format!(
            "unsupported sample type {:?}",
            dec.color_type()
        )));
    }
    let (w, h) = dec.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("empty image {w}x{h}")));
    }
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(bad)?;
    Tensor::new(
        &[h as usize, w as usize, 3],
        buf.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

pub fn write(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode(img)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}
