//! Image file IO. PPM (P6, 8-bit) is the bit-exact canonical format; PNG is a
//! convenience encoding of the same quantized bytes (stored deflate blocks,
//! no compression).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canonical pixel mapping: `round((v+1)/2*255)` with round-half-away-from-zero,
/// clamped to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    let scaled = ((v + 1.0) / 2.0 * 255.0).round();
    scaled.clamp(0.0, 255.0) as u8
}

/// Inverse of [`quantize`] up to quantization: maps a byte to `[-1, 1]`.
pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// Quantized interleaved RGB bytes of a `[3, H, W]` tensor.
pub fn to_rgb8(img: &Tensor) -> Result<Vec<u8>> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(Error::Contract(format!(
            "image tensor must be [3,H,W], got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let data = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        out.push(quantize(data[i]));
        out.push(quantize(data[plane + i]));
        out.push(quantize(data[2 * plane + i]));
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let bytes = to_rgb8(img)?;
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend_from_slice(&bytes);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |msg: &str| Error::Contract(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(fail("not a P6 ppm"));
    }
    // Header: three whitespace-separated tokens after the magic, with
    // '#' comments allowed.
    let mut pos = 2usize;
    let mut tokens: Vec<usize> = Vec::new();
    while tokens.len() < 3 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| fail("bad header token"))?;
        tokens.push(tok.parse::<usize>().map_err(|_| fail("bad header number"))?);
    }
    // Single whitespace byte after maxval.
    pos += 1;
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(fail("only maxval 255 supported"));
    }
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(fail("truncated pixel data"));
    }
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        data[i] = dequantize(bytes[pos + 3 * i]);
        data[plane + i] = dequantize(bytes[pos + 3 * i + 1]);
        data[2 * plane + i] = dequantize(bytes[pos + 3 * i + 2]);
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (n, entry) in table.iter_mut().enumerate() {
        let mut c = n as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for b in data {
        crc = table[((crc ^ *b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFFFFFF
}

fn adler32(data: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for chunk in data.chunks(5552) {
        for v in chunk {
            a += *v as u32;
            b += a;
        }
        a %= 65521;
        b %= 65521;
    }
    (b << 16) | a
}

fn png_chunk(out: &mut Vec<u8>, kind: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    let mut body = Vec::with_capacity(4 + payload.len());
    body.extend_from_slice(kind);
    body.extend_from_slice(payload);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32(&body).to_be_bytes());
}

/// 8-bit RGB PNG with filter 0 rows and stored (uncompressed) deflate blocks;
/// pixel bytes are identical to the PPM encoding.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let rgb = to_rgb8(img)?;
    let mut raw = Vec::with_capacity(h * (1 + 3 * w));
    for y in 0..h {
        raw.push(0u8); // filter: none
        raw.extend_from_slice(&rgb[y * 3 * w..(y + 1) * 3 * w]);
    }
    // zlib stream with stored blocks.
    let mut z = vec![0x78u8, 0x01];
    let mut off = 0usize;
    while off < raw.len() {
        let len = (raw.len() - off).min(65535);
        let last = if off + len == raw.len() { 1u8 } else { 0u8 };
        z.push(last);
        z.extend_from_slice(&(len as u16).to_le_bytes());
        z.extend_from_slice(&(!(len as u16)).to_le_bytes());
        z.extend_from_slice(&raw[off..off + len]);
        off += len;
    }
    z.extend_from_slice(&adler32(&raw).to_be_bytes());

    let mut out = Vec::new();
    out.extend_from_slice(&[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(w as u32).to_be_bytes());
    ihdr.extend_from_slice(&(h as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]); // bit depth 8, color type RGB
    png_chunk(&mut out, b"IHDR", &ihdr);
    png_chunk(&mut out, b"IDAT", &z);
    png_chunk(&mut out, b"IEND", &[]);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Peak signal-to-noise ratio in dB for tensors in `[-1, 1]` (peak = 2).
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr shape mismatch");
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (4.0 / mse).log10()
}
