//! Minimal reader for level-5 MAT files holding real numeric arrays.
//!
//! Supports little-endian files, zlib-compressed elements and the small
//! data element format. Cell, struct, sparse and complex arrays are skipped.

use std::collections::HashMap;
use std::io::Read;

use flate2::read::ZlibDecoder;

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

const COMPLEX_FLAG: u32 = 0x0800;

/// Values as stored on disk; the file may store e.g. a double array as bytes.
#[derive(Debug, Clone, PartialEq)]
pub enum MatValues {
    I8(Vec<i8>),
    U8(Vec<u8>),
    I16(Vec<i16>),
    U16(Vec<u16>),
    I32(Vec<i32>),
    U32(Vec<u32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl MatValues {
    pub fn len(&self) -> usize {
        match self {
            MatValues::I8(v) => v.len(),
            MatValues::U8(v) => v.len(),
            MatValues::I16(v) => v.len(),
            MatValues::U16(v) => v.len(),
            MatValues::I32(v) => v.len(),
            MatValues::U32(v) => v.len(),
            MatValues::F32(v) => v.len(),
            MatValues::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            MatValues::I8(v) => v[i] as f64,
            MatValues::U8(v) => v[i] as f64,
            MatValues::I16(v) => v[i] as f64,
            MatValues::U16(v) => v[i] as f64,
            MatValues::I32(v) => v[i] as f64,
            MatValues::U32(v) => v[i] as f64,
            MatValues::F32(v) => v[i] as f64,
            MatValues::F64(v) => v[i],
        }
    }

    pub fn iter_f64(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatArray {
    /// Column-major dimensions, as MATLAB reports them.
    pub dims: Vec<usize>,
    pub data: MatValues,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated element: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    /// Reads one element tag and payload; returns `(type, payload)`.
    fn element(&mut self) -> Result<(u32, &'a [u8]), String> {
        let first = self.u32()?;
        if first >> 16 != 0 {
            // Small data element: size and type packed into one word, 4-byte payload.
            let ty = first & 0xFFFF;
            let n = (first >> 16) as usize;
            let payload = self.take(4)?;
            return Ok((ty, &payload[..n.min(4)]));
        }
        let ty = first;
        let n = self.u32()? as usize;
        let payload = self.take(n)?;
        if ty != MI_COMPRESSED {
            let pad = (8 - n % 8) % 8;
            self.pos = (self.pos + pad).min(self.bytes.len());
        }
        Ok((ty, payload))
    }
}

fn numeric(ty: u32, payload: &[u8]) -> Result<MatValues, String> {
    macro_rules! decode {
        ($t:ty, $variant:ident) => {{
            const W: usize = std::mem::size_of::<$t>();
            if payload.len() % W != 0 {
                return Err(format!("payload of {} bytes is not a multiple of {W}", payload.len()));
            }
            MatValues::$variant(
                payload
                    .chunks_exact(W)
                    .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }};
    }
    Ok(match ty {
        MI_INT8 => decode!(i8, I8),
        MI_UINT8 => MatValues::U8(payload.to_vec()),
        MI_INT16 => decode!(i16, I16),
        MI_UINT16 => decode!(u16, U16),
        MI_INT32 => decode!(i32, I32),
        MI_UINT32 => decode!(u32, U32),
        MI_SINGLE => decode!(f32, F32),
        MI_DOUBLE => decode!(f64, F64),
        other => return Err(format!("unsupported numeric element type {other}")),
    })
}

fn int_values(ty: u32, payload: &[u8]) -> Result<Vec<usize>, String> {
    let v = numeric(ty, payload)?;
    Ok((0..v.len()).map(|i| v.get(i) as usize).collect())
}

/// Parses a `miMATRIX` payload; returns `None` for arrays this reader skips.
fn matrix(payload: &[u8]) -> Result<Option<(String, MatArray)>, String> {
    let mut c = Cursor {
        bytes: payload,
        pos: 0,
    };
    let (_, flags) = c.element()?;
    if flags.len() < 4 {
        return Err("array flags too short".into());
    }
    let flag_word = u32::from_le_bytes([flags[0], flags[1], flags[2], flags[3]]);
    let class = flag_word & 0xFF;
    let (dty, dims) = c.element()?;
    let dims = int_values(dty, dims)?;
    let (_, name) = c.element()?;
    let name = String::from_utf8_lossy(name).into_owned();
    // Numeric classes are 6 (double) through 15 (uint64).
    if !(6..=15).contains(&class) || flag_word & COMPLEX_FLAG != 0 {
        return Ok(None);
    }
    let (rty, real) = c.element()?;
    let data = numeric(rty, real)?;
    let expected: usize = dims.iter().product();
    if data.len() != expected {
        return Err(format!(
            "array `{name}` has {} values, dims {dims:?} imply {expected}",
            data.len()
        ));
    }
    Ok(Some((name, MatArray { dims, data })))
}

/// Parses every real numeric variable in a level-5 MAT file.
pub fn parse(bytes: &[u8]) -> Result<HashMap<String, MatArray>, String> {
    if bytes.len() < 128 {
        return Err("file shorter than the 128-byte MAT header".into());
    }
    match &bytes[126..128] {
        b"IM" => {}
        b"MI" => return Err("big-endian MAT files are not supported".into()),
        _ => return Err("not a level-5 MAT file (bad endian indicator)".into()),
    }
    let mut out = HashMap::new();
    let mut c = Cursor {
        bytes: &bytes[128..],
        pos: 0,
    };
    while !c.done() {
        let (ty, payload) = c.element()?;
        let inflated;
        let (ty, payload) = if ty == MI_COMPRESSED {
            let mut buf = Vec::new();
            ZlibDecoder::new(payload)
                .read_to_end(&mut buf)
                .map_err(|e| format!("zlib: {e}"))?;
            inflated = buf;
            Cursor {
                bytes: &inflated,
                pos: 0,
            }
            .element()?
        } else {
            (ty, payload)
        };
        if ty == MI_MATRIX {
            if let Some((name, array)) = matrix(payload)? {
                out.insert(name, array);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use flate2::write::ZlibEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn tag(out: &mut Vec<u8>, ty: u32, payload: &[u8]) {
        out.extend_from_slice(&ty.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(payload);
        while out.len() % 8 != 0 {
            out.push(0);
        }
    }

    /// Encodes one real array the way MATLAB's `save -v6` would.
    pub(crate) fn encode_matrix(name: &str, dims: &[i32], class: u8, ty: u32, data: &[u8]) -> Vec<u8> {
        let mut body = Vec::new();
        tag(&mut body, MI_UINT32, &[class, 0, 0, 0, 0, 0, 0, 0]);
        let d: Vec<u8> = dims.iter().flat_map(|d| d.to_le_bytes()).collect();
        tag(&mut body, MI_INT32, &d);
        tag(&mut body, MI_INT8, name.as_bytes());
        tag(&mut body, ty, data);
        let mut out = Vec::new();
        tag(&mut out, MI_MATRIX, &body);
        out
    }

    pub(crate) fn header() -> Vec<u8> {
        let mut h = vec![b' '; 116];
        h[..10].copy_from_slice(b"MATLAB 5.0");
        h.extend_from_slice(&[0; 8]);
        h.extend_from_slice(&0x0100u16.to_le_bytes());
        h.extend_from_slice(b"IM");
        h
    }

    pub(crate) fn compress(element: &[u8]) -> Vec<u8> {
        let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
        enc.write_all(element).unwrap();
        let z = enc.finish().unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&MI_COMPRESSED.to_le_bytes());
        out.extend_from_slice(&(z.len() as u32).to_le_bytes());
        out.extend_from_slice(&z);
        out
    }

    #[test]
    fn reads_plain_and_compressed_arrays() {
        let mut file = header();
        file.extend(encode_matrix("X", &[2, 3], 9, MI_UINT8, &[1, 2, 3, 4, 5, 6]));
        let y: Vec<u8> = [10.0f64, 1.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        file.extend(compress(&encode_matrix("y", &[2, 1], 6, MI_DOUBLE, &y)));
        let vars = parse(&file).unwrap();
        assert_eq!(vars["X"].dims, vec![2, 3]);
        assert_eq!(vars["X"].data.get(5), 6.0);
        assert_eq!((0..2).map(|i| vars["y"].data.get(i)).collect::<Vec<_>>(), vec![10.0, 1.0]);
    }

    #[test]
    fn rejects_bad_header_and_size_mismatch() {
        assert!(parse(&[0u8; 10]).is_err());
        let mut file = header();
        file.extend(encode_matrix("X", &[2, 2], 9, MI_UINT8, &[1, 2, 3]));
        assert!(parse(&file).unwrap_err().contains("dims"));
    }
}
