//! Flow and image files, and flow visualisation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensors::Tensor;

const FLO_MAGIC: f32 = 202021.25;

/// Encodes a `2×H×W` flow in Middlebury `.flo` layout.
pub fn encode_flo(flow: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = flow.dims3()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow needs 2 channels, got {c}")));
    }
    let to_i32 = |d: usize| i32::try_from(d).map_err(|_| Error::Param(format!("dimension {d} too large for .flo")));
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&to_i32(w)?.to_le_bytes());
    out.extend_from_slice(&to_i32(h)?.to_le_bytes());
    let (u, v) = (flow.plane(0), flow.plane(1));
    for i in 0..h * w {
        out.extend_from_slice(&u[i].to_le_bytes());
        out.extend_from_slice(&v[i].to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<Tensor> {
    let word = |i: usize| -> Option<[u8; 4]> { bytes.get(4 * i..4 * i + 4).map(|b| b.try_into().expect("4 bytes")) };
    let magic = word(0).ok_or_else(|| Error::Length("missing .flo header".into()))?;
    if f32::from_le_bytes(magic) != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {}", f32::from_le_bytes(magic))));
    }
    let (w, h) = match (word(1), word(2)) {
        (Some(w), Some(h)) => (i32::from_le_bytes(w), i32::from_le_bytes(h)),
        _ => return Err(Error::Length("truncated .flo header".into())),
    };
    if w < 0 || h < 0 {
        return Err(Error::Format(format!("negative .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Format(format!(".flo dimensions {w}x{h} overflow")))?;
    if bytes.len() < need {
        return Err(Error::Length(format!(".flo payload has {} bytes, {w}x{h} needs {need}", bytes.len())));
    }
    if bytes.len() > need {
        return Err(Error::Format(format!("{} trailing bytes after .flo payload", bytes.len() - need)));
    }
    let n = h * w;
    let mut data = vec![0.0f32; 2 * n];
    for i in 0..n {
        data[i] = f32::from_le_bytes(word(3 + 2 * i).expect("length checked"));
        data[n + i] = f32::from_le_bytes(word(4 + 2 * i).expect("length checked"));
    }
    Tensor::new(vec![2, h, w], data)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &Tensor) -> Result<()> {
    let bytes = encode_flo(flow)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_flo(&std::fs::read(path)?)
}

/// 8-bit RGB, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; 3 * width * height] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| self.data[3 * (i % n) + i / n] as f32 / 255.0)
    }

    /// Quantises a `3×H×W` (or `1×H×W`) tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 && c != 1 {
            return Err(Error::Shape(format!("image needs 1 or 3 channels, got {c}")));
        }
        let mut img = RgbImage::new(w, h);
        for i in 0..h * w {
            for ch in 0..3 {
                let v = t.plane(if c == 1 { 0 } else { ch })[i];
                img.data[3 * i + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(img)
    }
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Length("truncated PPM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("malformed PPM header".into()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format("not a binary PPM (P6)".into()));
    }
    let mut pos = 2;
    let w = ppm_token(bytes, &mut pos)?;
    let h = ppm_token(bytes, &mut pos)?;
    let maxval = ppm_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} (only 8-bit 255 is supported)")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed PPM header".into()));
    }
    pos += 1;
    let need = 3 * w * h;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Length(format!("PPM payload has {} bytes, {w}x{h} needs {need}", payload.len())));
    }
    Ok(RgbImage { width: w, height: h, data: payload[..need].to_vec() })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let fmt = |e: png::DecodingError| Error::Format(format!("PNG: {e}"));
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(fmt)?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::Format("16-bit PNG is not supported".into()));
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("unexpanded palette PNG".into())),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("PNG bit depth {:?} is not supported", info.bit_depth)));
    }
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..(x + 1) * channels];
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            img.data[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&rgb);
        }
    }
    Ok(img)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| Error::Format(format!("PNG: {e}")))?;
        wr.write_image_data(&img.data).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    }
    Ok(out)
}

/// Decodes PNG or binary PPM, detected from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::Format("unrecognised image format (expected PNG or P6 PPM)".into()))
    }
}

/// Reads an image as a `3×H×W` tensor in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Ok(decode_image(&bytes)?.to_tensor())
}

/// Writes PNG for `.png` paths and PPM for `.ppm`.
pub fn write_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => encode_png(img)?,
        Some("ppm") => encode_ppm(img),
        _ => return Err(Error::Format(format!("cannot infer image format of {}", path.display()))),
    };
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_rgb(path, &RgbImage::from_tensor(t)?)
}

/// The 55-colour Middlebury wheel (RY 15, YG 6, GC 4, CB 11, BM 13, MR 6).
pub fn color_wheel() -> Vec<[u8; 3]> {
    let ramp = |i: usize, n: usize| (255 * i / n) as u8;
    let mut wheel = Vec::with_capacity(55);
    wheel.extend((0..15).map(|i| [255, ramp(i, 15), 0]));
    wheel.extend((0..6).map(|i| [255 - ramp(i, 6), 255, 0]));
    wheel.extend((0..4).map(|i| [0, 255, ramp(i, 4)]));
    wheel.extend((0..11).map(|i| [0, 255 - ramp(i, 11), 255]));
    wheel.extend((0..13).map(|i| [ramp(i, 13), 0, 255]));
    wheel.extend((0..6).map(|i| [255, 0, 255 - ramp(i, 6)]));
    wheel
}

/// Colour of one flow vector already divided by the normalising radius.
fn wheel_color(wheel: &[[u8; 3]], u: f64, v: f64) -> [u8; 3] {
    if !(u.is_finite() && v.is_finite()) {
        return [0, 0, 0];
    }
    let n = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = (k0 + 1) % n;
    let f = fk - k0 as f64;
    let mut out = [0u8; 3];
    for ch in 0..3 {
        // interpolated in 8-bit units so exact midpoints stay exact
        let mut col = (1.0 - f) * wheel[k0][ch] as f64 + f * wheel[k1][ch] as f64;
        if rad <= 1.0 {
            col = 255.0 - rad * (255.0 - col);
        } else {
            col *= 0.75;
        }
        out[ch] = col.floor().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Colour-wheel rendering of a `2×H×W` flow.
///
/// Vectors are divided by `max_norm`, or by the largest finite magnitude in
/// the field when it is `None`. Vectors beyond the radius are darkened.
pub fn colorize(flow: &Tensor, max_norm: Option<f32>) -> Result<RgbImage> {
    let (c, h, w) = flow.dims3()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow needs 2 channels, got {c}")));
    }
    let (u, v) = (flow.plane(0), flow.plane(1));
    let radius = max_norm.unwrap_or_else(|| {
        u.iter().zip(v).map(|(a, b)| (a * a + b * b).sqrt()).filter(|r| r.is_finite()).fold(0.0, f32::max)
    });
    let inv = if radius > 0.0 { 1.0 / radius as f64 } else { 0.0 };
    let wheel = color_wheel();
    let mut img = RgbImage::new(w, h);
    for i in 0..h * w {
        let rgb = wheel_color(&wheel, u[i] as f64 * inv, v[i] as f64 * inv);
        img.data[3 * i..3 * i + 3].copy_from_slice(&rgb);
    }
    Ok(img)
}
