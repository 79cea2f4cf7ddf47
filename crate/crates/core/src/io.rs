//! On-disk formats: binary PPM frames, the `DPT1` tensor container used for
//! checkpoints and lossless intermediates, and line-based `key = value` configs.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "DPT1" | u32 sections | { u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f32 payload[prod(dims)] }*
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"DPT1";

/// Encodes an `[H, W, 3]` frame as binary P6; values are clamped to `[0, 1]`
/// and rounded to the nearest of 256 levels.
pub fn encode_ppm(frame: &Tensor<f32>) -> Result<Vec<u8>> {
    if frame.rank() != 3 || frame.shape()[2] != 3 {
        return Err(Error::contract("write_ppm", format!("frame must be [H, W, 3], got {:?}", frame.shape())));
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps a value onto the 8-bit grid a PPM round trip would produce.
pub fn quantize_value(v: f32) -> f32 {
    quantize(v) as f32 / 255.0
}

fn ppm_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "PPM",
        detail: detail.into(),
    }
}

/// Decodes binary P6 with maxval 255 into an `[H, W, 3]` frame in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| ppm_err("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(ppm_err(format!("unsupported magic `{}`", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| ppm_err(format!("bad header number `{s}`")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(ppm_err(format!("only 8-bit maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = w * h * 3;
    if bytes.len() < pos + n {
        return Err(ppm_err(format!("raster holds {} bytes, need {n}", bytes.len().saturating_sub(pos))));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

pub fn write_ppm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(frame)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_container(sections: &BTreeMap<String, Tensor<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, t) in sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                section: section.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

fn container_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "container",
        detail: detail.into(),
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "<header>").map_err(|_| container_err("file shorter than magic"))?;
    if magic != CONTAINER_MAGIC {
        return Err(container_err(format!("unknown magic {magic:?}")));
    }
    let count = cur.u32("<header>")?;
    let mut out = BTreeMap::new();
    for index in 0..count {
        let placeholder = format!("#{index}");
        let len = cur.u32(&placeholder)? as usize;
        let name = std::str::from_utf8(cur.take(len, &placeholder)?)
            .map_err(|_| container_err(format!("section {index} name is not UTF-8")))?
            .to_string();
        let rank = cur.u32(&name)? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(usize::try_from(cur.u64(&name)?).map_err(|_| container_err("dimension overflow"))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| container_err(format!("section `{name}` size overflows")))?;
        let payload = cur.take(n, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(container_err(format!("duplicate section `{name}`")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(container_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(out)
}

pub fn write_container(path: &Path, sections: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    fs::write(path, encode_container(sections)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    decode_container(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: n + 1,
            detail: format!("expected `key = value`, got `{line}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config {
                line: n + 1,
                detail: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn format_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_pixel_bytes() {
        let px = Tensor::full(&[1, 1, 3], 1.0f32);
        assert_eq!(encode_ppm(&px).unwrap(), b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn ppm_round_trip_is_the_quantization_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = Tensor::from_fn(&[7, 5, 3], |_| rng.random::<f32>());
        let back = decode_ppm(&encode_ppm(&frame).unwrap()).unwrap();
        assert_eq!(back.shape(), frame.shape());
        for (a, b) in frame.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
            assert_eq!(*b, (a * 255.0).round() / 255.0);
        }
        // already-quantized frames survive unchanged
        assert_eq!(decode_ppm(&encode_ppm(&back).unwrap()).unwrap(), back);
    }

    #[test]
    fn ppm_header_with_comments() {
        let bytes = b"P6\n# made by hand\n2 1\n# depth\n255\n\x00\x00\x00\xff\x80\x00";
        let f = decode_ppm(bytes).unwrap();
        assert_eq!(f.shape(), &[1, 2, 3]);
        assert_eq!(f.at(&[0, 1, 1]), 128.0 / 255.0);
    }

    #[test]
    fn ppm_rejects_bad_inputs() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").is_err());
        assert!(encode_ppm(&Tensor::zeros(&[2, 2, 1])).is_err());
    }

    fn sample_sections() -> BTreeMap<String, Tensor<f32>> {
        let mut m = BTreeMap::new();
        m.insert("a.weight".to_string(), Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 * 0.1 - 0.2));
        m.insert("b".to_string(), Tensor::new(vec![3], vec![f32::MIN_POSITIVE, -0.0, 1e30]).unwrap());
        m.insert("scalar".to_string(), Tensor::new(vec![], vec![7.5]).unwrap());
        m
    }

    #[test]
    fn container_round_trip_bit_exact() {
        let m = sample_sections();
        let back = decode_container(&encode_container(&m)).unwrap();
        assert_eq!(back.len(), m.len());
        for (k, v) in &m {
            let w = &back[k];
            assert_eq!(w.shape(), v.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(v), bits(w));
        }
    }

    #[test]
    fn container_rejects_bad_magic() {
        let mut bytes = encode_container(&sample_sections());
        bytes[3] = b'2';
        assert!(matches!(decode_container(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn truncation_names_the_section() {
        let m = sample_sections();
        let bytes = encode_container(&m);
        // every strict prefix past the magic must fail with a truncation error
        let mut named = 0;
        for cut in 8..bytes.len() {
            match decode_container(&bytes[..cut]) {
                Err(Error::Truncated { section }) => {
                    if m.contains_key(&section) {
                        named += 1;
                    }
                }
                other => panic!("cut {cut}: unexpected {other:?}"),
            }
        }
        assert!(named > 0);
        // cutting inside the payload of "b" names "b"
        let a_len = 4 + 8 + 4 + 4 * 8 + 6 * 4;
        let b_payload = 8 + a_len + 4 + 1 + 4 + 8 + 2;
        match decode_container(&bytes[..b_payload]) {
            Err(Error::Truncated { section }) => assert_eq!(section, "b"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn container_round_trips_arbitrary_values(vals in prop::collection::vec(any::<f32>(), 0..64), name in "[a-z._0-9]{1,12}") {
            let mut m = BTreeMap::new();
            m.insert(name.clone(), Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            let back = decode_container(&encode_container(&m)).unwrap();
            let got: Vec<u32> = back[&name].data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn kv_parsing() {
        let text = "# header\nseed = 7\n\n  r=4   # trailing\nchannels = 16,32\n";
        let kv = parse_kv(text).unwrap();
        assert_eq!(
            kv,
            vec![
                ("seed".into(), "7".into()),
                ("r".into(), "4".into()),
                ("channels".into(), "16,32".into())
            ]
        );
        match parse_kv("a = 1\nbroken\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(format_kv([("a", "1".to_string())]), "a = 1\n");
    }
}
