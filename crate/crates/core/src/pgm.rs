//! Binary PGM (P5) reading and writing. 8-bit is used for images and masks
//! (masks store 0/255), 16-bit big-endian for saliency exports where [0, 1]
//! maps linearly onto [0, 65535].

use std::path::Path;

use crate::error::{GlamError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PgmData {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub data: PgmData,
}

const DIM_LIMIT: u64 = 1 << 20;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> GlamError {
        GlamError::parse(self.pos, reason)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and '#' comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(c) = self.peek() {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<u64> {
        self.skip_separators();
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(b) = self.peek() {
            if !b.is_ascii_digit() {
                break;
            }
            value = value * 10 + u64::from(b - b'0');
            if value > DIM_LIMIT * DIM_LIMIT {
                return Err(GlamError::parse(start, format!("{what} out of range")));
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {what}")));
        }
        Ok(value)
    }
}

/// Parses a P5 PGM from raw bytes. Malformed input produces a parse error
/// carrying the byte offset; this function never panics.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(GlamError::parse(0, "not a P5 PGM (bad magic)"));
    }
    cur.pos = 2;
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 || width > DIM_LIMIT || height > DIM_LIMIT {
        return Err(cur.err(format!("invalid dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.err(format!("maxval {maxval} outside 1..=65535")));
    }
    match cur.peek() {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err("expected single whitespace before payload")),
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let expected = (width * height)
        .checked_mul(bytes_per)
        .ok_or_else(|| cur.err("payload size overflow"))?;
    let remaining = (bytes.len() - cur.pos) as u64;
    if remaining < expected {
        return Err(cur.err(format!(
            "payload truncated: expected {expected} bytes, found {remaining}"
        )));
    }
    if remaining > expected {
        return Err(GlamError::parse(
            cur.pos + expected as usize,
            "trailing data after payload",
        ));
    }
    let payload = &bytes[cur.pos..];
    let data = if bytes_per == 1 {
        PgmData::U8(payload.to_vec())
    } else {
        PgmData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect(),
        )
    };
    Ok(Pgm {
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        data,
    })
}

pub fn encode_pgm8(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(GlamError::shape(format!(
            "pgm8: {} values for {width}x{height}",
            data.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

pub fn encode_pgm16(width: usize, height: usize, data: &[u16]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(GlamError::shape(format!(
            "pgm16: {} values for {width}x{height}",
            data.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path)?;
    parse_pgm(&bytes).map_err(|e| match e {
        GlamError::Parse { offset, reason } => {
            GlamError::parse(offset, format!("{}: {reason}", path.display()))
        }
        other => other,
    })
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm8(width, height, data)?)?)
}

pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm16(width, height, data)?)?)
}

/// Linear quantization of a [0, 1] value plane to 16 bits.
pub fn quantize16(values: &[f64]) -> Vec<u16> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::rng_from;

    #[test]
    fn eight_bit_round_trip_is_byte_identical() {
        let mut rng = rng_from(11);
        for _ in 0..20 {
            let w = rng.gen_range(1..9);
            let h = rng.gen_range(1..9);
            let data: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
            let enc = encode_pgm8(w, h, &data).unwrap();
            let dec = parse_pgm(&enc).unwrap();
            assert_eq!(dec.width, w);
            assert_eq!(dec.height, h);
            assert_eq!(dec.maxval, 255);
            assert_eq!(dec.data, PgmData::U8(data.clone()));
            assert_eq!(encode_pgm8(w, h, &data).unwrap(), enc);
        }
    }

    #[test]
    fn sixteen_bit_round_trip_and_endianness() {
        let data = vec![0u16, 1, 256, 65535];
        let enc = encode_pgm16(2, 2, &data).unwrap();
        // payload is big-endian
        let tail = &enc[enc.len() - 8..];
        assert_eq!(tail, &[0, 0, 0, 1, 1, 0, 255, 255]);
        let dec = parse_pgm(&enc).unwrap();
        assert_eq!(dec.data, PgmData::U16(data));
    }

    #[test]
    fn quantization_endpoints_and_midpoint() {
        let q = quantize16(&[0.0, 0.5, 1.0, -0.2, 1.7]);
        assert_eq!(q, vec![0, 32768, 65535, 0, 65535]);
    }

    #[test]
    fn quantization_error_bound() {
        let mut rng = rng_from(5);
        for _ in 0..200 {
            let v: f64 = rng.gen();
            let q = quantize16(&[v])[0] as f64 / 65535.0;
            assert!((v - q).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # a comment\n2 1 # another\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let p = parse_pgm(&bytes).unwrap();
        assert_eq!((p.width, p.height), (2, 1));
        assert_eq!(p.data, PgmData::U8(vec![7, 9]));
    }

    #[test]
    fn malformed_inputs_give_offsets_not_panics() {
        let cases: Vec<Vec<u8>> = vec![
            b"P6\n1 1\n255\nx".to_vec(),
            b"P5".to_vec(),
            b"P5\n0 4\n255\n".to_vec(),
            b"P5\n2 2\n0\n".to_vec(),
            b"P5\n2 2\n70000\n".to_vec(),
            b"P5\n2 2\n255\n\x01\x02\x03".to_vec(),
            b"P5\n2 2\n255\n\x01\x02\x03\x04\x05".to_vec(),
            b"P5\n99999999999 1\n255\n".to_vec(),
            b"P5\nab cd\n255\n".to_vec(),
        ];
        for bytes in cases {
            match parse_pgm(&bytes) {
                Err(GlamError::Parse { offset, .. }) => assert!(offset <= bytes.len()),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn random_byte_fuzz_never_panics() {
        let mut rng = rng_from(99);
        for _ in 0..300 {
            let n = rng.gen_range(0..64);
            let mut bytes: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
            if rng.gen_bool(0.5) && bytes.len() >= 2 {
                bytes[0] = b'P';
                bytes[1] = b'5';
            }
            let _ = parse_pgm(&bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm16(&path, 3, 2, &[0, 10, 20, 30, 40, 65535]).unwrap();
        let p = read_pgm(&path).unwrap();
        assert_eq!(p.data, PgmData::U16(vec![0, 10, 20, 30, 40, 65535]));
        assert!(read_pgm(&dir.path().join("missing.pgm")).is_err());
    }
}
