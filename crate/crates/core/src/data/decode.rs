//! PPM (P6) and PNG (8-bit RGB) decoding to channel-first 0–255 tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// Format implied by a file extension (case-insensitive).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ppm" => Some(ImageFormat::Ppm),
            "png" => Some(ImageFormat::Png),
            _ => None,
        }
    }
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Tensor<f32>> {
    match format {
        ImageFormat::Ppm => decode_ppm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

fn err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Decode {
        offset,
        reason: reason.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, format!("{what} out of range")))
    }
}

/// Binary PPM. Samples are rescaled from `0..=maxval` to `0..=255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(err(2, "zero image extent"));
    }
    if maxval == 0 || maxval > 65_535 {
        return Err(err(maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(err(h.pos, "expected single whitespace before pixel data")),
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * 3 * bps;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(err(
            bytes.len(),
            format!(
                "truncated pixel data: need {need} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let scale = 255.0 / maxval as f32;
    let plane = width * height;
    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let i = (p * 3 + c) * bps;
            let v = if bps == 1 {
                payload[i] as usize
            } else {
                ((payload[i] as usize) << 8) | payload[i + 1] as usize
            };
            if v > maxval {
                return Err(err(
                    h.pos + i,
                    format!("sample {v} exceeds maxval {maxval}"),
                ));
            }
            data[c * plane + p] = v as f32 * scale;
        }
    }
    Tensor::new(&[3, height, width], data)
}

/// Encode an 8-bit `[3, H, W]` tensor (0–255) as binary PPM.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!(
            "encode_ppm expects [3, H, W], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            out.push(img.data()[c * plane + p].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// 8-bit RGB PNG.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| err(0, format!("png: {e}")))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Rgb {
        return Err(err(
            0,
            format!(
                "unsupported png: {:?} at {:?} bits, need 8-bit RGB",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| err(0, "png: image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| err(0, format!("png: {e}")))?;
    let plane = width * height;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..height {
        let row = &buf[y * frame.line_size..][..width * 3];
        for x in 0..width {
            for c in 0..3 {
                data[c * plane + y * width + x] = row[x * 3 + c] as f32;
            }
        }
    }
    Tensor::new(&[3, height, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_ppm() {
        let mut b = b"P6\n2 1\n255\n".to_vec();
        b.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = decode_ppm(&b).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[255., 0., 0., 0., 0., 255.]);
    }

    #[test]
    fn rescales_maxval_and_reads_comments() {
        let mut b = b"P6 # comment\n1 1\n# another\n15\n".to_vec();
        b.extend_from_slice(&[15, 0, 5]);
        let t = decode_ppm(&b).unwrap();
        assert_eq!(t.data(), &[255., 0., 85.]);
        let mut wide = b"P6\n1 1\n1023\n".to_vec();
        wide.extend_from_slice(&[3, 255, 0, 0, 0, 0]);
        assert_eq!(decode_ppm(&wide).unwrap().data()[0], 255.0);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut b = b"P6\n2 2\n255\n".to_vec();
        b.extend_from_slice(&[1, 2, 3]);
        match decode_ppm(&b) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, b.len()),
            other => panic!("expected decode error, got {other:?}"),
        }
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n"),
            Err(Error::Decode { offset: 0, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 x\n"),
            Err(Error::Decode { offset: 5, .. })
        ));
    }

    #[test]
    fn ppm_round_trip() {
        let t = Tensor::from_f64(
            &[3, 2, 2],
            &[0., 10., 20., 30., 40., 50., 60., 70., 80., 90., 100., 255.],
        )
        .unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn png_rgb8() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 2, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[255, 0, 0, 0, 0, 255]).unwrap();
        }
        let t = decode_png(&bytes).unwrap();
        assert_eq!(t.data(), &[255., 0., 0., 0., 0., 255.]);
        assert!(decode_png(&bytes[..bytes.len() / 2]).is_err());
    }
}
