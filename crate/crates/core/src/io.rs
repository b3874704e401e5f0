//! File formats: raw `BGT1` tensors, 8-bit PNG, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::scalar::{lit, to_f64, Real};

const MAGIC: &[u8; 4] = b"BGT1";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn encode_tensor<S: Real>(img: &ImageBuf<S>) -> Vec<u8> {
    let (h, w, c) = img.shape();
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in img.as_slice() {
        out.extend_from_slice(&(to_f64(v) as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor<S: Real>(bytes: &[u8], path: &Path) -> Result<ImageBuf<S>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing BGT1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format(path, "tensor extent overflows"))?;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(
            path,
            format!("{h}x{w}x{c} tensor needs {} payload bytes, found {}", 4 * n, bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| lit::<S>(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    ImageBuf::new(h, w, c, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_tensor<S: Real>(path: &Path, img: &ImageBuf<S>) -> Result<()> {
    write_atomic(path, &encode_tensor(img))
}

pub fn read_tensor<S: Real>(path: &Path) -> Result<ImageBuf<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Loads an 8-bit PNG as a unit-range image (grayscale stays 1 channel, color becomes RGB).
pub fn read_png<S: Real>(path: &Path) -> Result<ImageBuf<S>> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let color = dynimg.color();
    let gray = color.channel_count() <= 2;
    if gray {
        let g = dynimg.to_luma8();
        let (w, h) = g.dimensions();
        let data = g.as_raw().iter().map(|&v| lit::<S>(v as f64 / 255.0)).collect();
        ImageBuf::new(h as usize, w as usize, 1, data)
    } else {
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| lit::<S>(v as f64 / 255.0)).collect();
        ImageBuf::new(h as usize, w as usize, 3, data)
    }
}

/// Quantizes a unit-range image (clamped) to 8 bits and writes it as PNG.
pub fn write_png<S: Real>(path: &Path, img: &ImageBuf<S>) -> Result<()> {
    let (h, w, c) = img.shape();
    let bytes: Vec<u8> = img
        .clamp_unit()
        .as_slice()
        .iter()
        .map(|&v| (to_f64(v) * 255.0).round() as u8)
        .collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::param("channels", format!("PNG export needs 1 or 3 channels, got {c}"))),
    };
    let mut buf = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut buf),
        &bytes,
        w as u32,
        h as u32,
        color,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_is_bit_exact() {
        let img = ImageBuf::<f64>::new(1, 2, 1, vec![1.0, -0.5]).unwrap();
        let bytes = encode_tensor(&img);
        let mut expected = b"BGT1".to_vec();
        for d in [1u32, 2, 1] {
            expected.extend_from_slice(&d.to_le_bytes());
        }
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
        let back: ImageBuf<f64> = decode_tensor(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn truncated_tensor_rejected() {
        let img = ImageBuf::<f32>::zeros(2, 2, 1);
        let bytes = encode_tensor(&img);
        assert!(matches!(decode_tensor::<f32>(&bytes[..bytes.len() - 1], Path::new("x")), Err(Error::Format { .. })));
        assert!(decode_tensor::<f32>(b"XXXX", Path::new("x")).is_err());
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageBuf::<f64>::from_fn(3, 4, 1, |y, x, _| (y * 4 + x) as f64 / 11.0);
        write_png(&path, &img).unwrap();
        let back: ImageBuf<f64> = read_png(&path).unwrap();
        assert_eq!(back.shape(), (3, 4, 1));
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let rgb = ImageBuf::<f64>::filled(2, 2, 3, 0.5);
        write_png(&path, &rgb).unwrap();
        assert_eq!(read_png::<f64>(&path).unwrap().channels(), 3);
    }
}
