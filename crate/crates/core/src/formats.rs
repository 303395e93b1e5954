//! Binary raster files: an ASCII header line `<TAG> v1 <width> <height>\n`
//! followed by little-endian `f32` samples in row-major order.
//!
//! `RDEPTH` carries one sample per pixel (meters; non-positive or non-finite
//! values mark invalid pixels). `RIMG` carries three interleaved samples per pixel
//! (RGB).

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{Grid, RgbImage};

pub const DEPTH_TAG: &str = "RDEPTH";
pub const IMAGE_TAG: &str = "RIMG";

/// Longest header we accept before giving up on finding the newline.
const MAX_HEADER: usize = 64;

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Parses the header and returns `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], tag: &str) -> Result<(usize, usize, usize)> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|b| *b == b'\n')
        .ok_or_else(|| format_err(bytes.len().min(MAX_HEADER), "missing header line"))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|e| format_err(e.valid_up_to(), "header is not ASCII"))?;
    let mut fields = line.split(' ');
    let mut offset = 0usize;
    let mut next = |what: &str| -> Result<(usize, &str)> {
        let f = fields.next().ok_or_else(|| format_err(nl, format!("missing {what}")))?;
        let at = offset;
        offset += f.len() + 1;
        Ok((at, f))
    };
    let (at, t) = next("tag")?;
    if t != tag {
        return Err(format_err(at, format!("expected tag {tag}, found {t:?}")));
    }
    let (at, v) = next("version")?;
    if v != "v1" {
        return Err(format_err(at, format!("unsupported version {v:?}")));
    }
    let mut dim = |name: &str| -> Result<usize> {
        let (at, s) = next(name)?;
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format_err(at, format!("{name} is not an unsigned integer")));
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format_err(at, format!("{name} must be a positive integer"))),
            Ok(n) => Ok(n),
        }
    };
    let width = dim("width")?;
    let height = dim("height")?;
    if fields.next().is_some() {
        return Err(format_err(offset.min(nl), "trailing header fields"));
    }
    Ok((width, height, nl + 1))
}

fn read_samples(bytes: &[u8], start: usize, count: usize) -> Result<Vec<f32>> {
    let need = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| format_err(start, "dimensions overflow"))?;
    if bytes.len() < need {
        return Err(format_err(bytes.len(), format!("truncated payload: expected {} bytes", need - start)));
    }
    if bytes.len() > need {
        return Err(format_err(need, "trailing bytes after payload"));
    }
    Ok(bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Raw decoded depth samples, exactly as stored.
pub fn decode_depth(bytes: &[u8]) -> Result<Grid<f32>> {
    let (w, h, start) = parse_header(bytes, DEPTH_TAG)?;
    let n = w.checked_mul(h).ok_or_else(|| format_err(0, "dimensions overflow"))?;
    Ok(Grid::from_vec(w, h, read_samples(bytes, start, n)?))
}

pub fn encode_depth(depth: &Grid<f32>) -> Vec<u8> {
    let mut out = format!("{DEPTH_TAG} v1 {} {}\n", depth.width(), depth.height()).into_bytes();
    out.reserve(depth.len() * 4);
    for v in depth.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, start) = parse_header(bytes, IMAGE_TAG)?;
    let n = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| format_err(0, "dimensions overflow"))?;
    let samples = read_samples(bytes, start, n)?;
    Ok(Grid::from_vec(
        w,
        h,
        samples.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    ))
}

pub fn encode_image(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("{IMAGE_TAG} v1 {} {}\n", img.width(), img.height()).into_bytes();
    out.reserve(img.len() * 12);
    for px in img.iter() {
        for v in px {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let g = Grid::from_vec(2, 1, vec![1.5f32, -2.0]);
        let bytes = encode_depth(&g);
        assert!(bytes.starts_with(b"RDEPTH v1 2 1\n"));
        assert_eq!(bytes.len(), 14 + 8);
        assert_eq!(&bytes[14..18], &1.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let g = Grid::filled(3, 3, 2.0f32);
        let mut bytes = encode_depth(&g);
        bytes.truncate(bytes.len() - 3);
        match decode_depth(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_headers_are_rejected() {
        for bad in [
            &b"RDEPTH v1 2 2"[..],
            b"RDEPTH v2 1 1\n\0\0\0\0",
            b"RIMG v1 1 1\n\0\0\0\0",
            b"RDEPTH v1 0 1\n",
            b"RDEPTH v1 -1 1\n",
            b"RDEPTH v1 1 1 1\n\0\0\0\0",
            b"RDEPTH  v1 1 1\n\0\0\0\0",
            b"RDEPTH v1 99999999999999999999 1\n",
        ] {
            assert!(matches!(decode_depth(bad), Err(Error::Format { .. })), "{bad:?}");
        }
        let huge = b"RDEPTH v1 4294967296 4294967296\n";
        assert!(matches!(decode_depth(huge), Err(Error::Format { .. })));
    }

    #[test]
    fn tag_mismatch_offset_points_at_tag() {
        match decode_image(b"RDEPTH v1 1 1\n\0\0\0\0") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
        match decode_depth(b"RDEPTH v9 1 1\n\0\0\0\0") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn depth_round_trip_is_bitwise(w in 1usize..8, h in 1usize..8, seed in any::<u32>()) {
            let g = Grid::from_fn(w, h, |x, y| f32::from_bits(seed.wrapping_mul((x * 31 + y + 1) as u32)));
            let back = decode_depth(&encode_depth(&g)).unwrap();
            prop_assert_eq!(back.width(), w);
            for (a, b) in g.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn image_round_trip(w in 1usize..6, h in 1usize..6, v in -10.0f32..10.0) {
            let img = RgbImage::from_fn(w, h, |x, y| [v, x as f32, y as f32]);
            prop_assert_eq!(decode_image(&encode_image(&img)).unwrap(), img);
        }

        #[test]
        fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_depth(&bytes);
            let _ = decode_image(&bytes);
        }
    }
}
