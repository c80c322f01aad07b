//! Binary PPM (P6) and PGM (P5) with maxval 255.
//!
//! The canonical encoding is `P6\n<w> <h>\n255\n` followed by raw samples;
//! decoding also accepts arbitrary whitespace and `#` comments in the header.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
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
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
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
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| parse_err(start, format!("invalid {what}")))
    }
}

/// Decodes a P5/P6 file into `[c, h, w]` with values `v / 255`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 {
        return Err(parse_err(0, "truncated magic"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(parse_err(
                0,
                format!("unsupported magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let mut hdr = Header { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(parse_err(2, "expected whitespace after magic"));
    }
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    hdr.skip_space_and_comments();
    let maxval_at = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("maxval {maxval} unsupported, need 255")));
    }
    match bytes.get(hdr.pos) {
        Some(b) if b.is_ascii_whitespace() => hdr.pos += 1,
        _ => return Err(parse_err(hdr.pos, "expected single whitespace before raster")),
    }
    let need = channels * width * height;
    let raster = &bytes[hdr.pos..];
    if raster.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated raster: need {need} bytes, found {}", raster.len()),
        ));
    }
    // interleaved rgb -> planar
    let plane = width * height;
    let mut data = vec![0.0f32; need];
    for (i, &b) in raster[..need].iter().enumerate() {
        let (px, c) = (i / channels, i % channels);
        data[c * plane + px] = b as f32 / 255.0;
    }
    Tensor::new(vec![channels, height, width], data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[1, h, w]` as P5 or `[3, h, w]` as P6, rounding `255 * v`.
pub fn encode_image(img: &Tensor<f32>) -> Result<Vec<u8>> {
    encode_with_comment(img, None)
}

/// Like [`encode_image`], with an optional `# comment` header line.
pub fn encode_with_comment(img: &Tensor<f32>, comment: Option<&str>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::dim(format!(
            "encode_image expects [1|3, h, w], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * h * w + 32);
    out.extend_from_slice(if c == 1 { b"P5\n" } else { b"P6\n" });
    if let Some(text) = comment {
        for line in text.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    let plane = h * w;
    let d = img.data();
    for px in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + px]));
        }
    }
    Ok(out)
}
