//! DAPF tensor files and the CSV fallback for hand-made fixtures.
//!
//! Layout: `"DAPF"`, `u32` version, `u64` rows, `u64` cols, then `rows * cols`
//! little-endian floats in row-major order. Version 1 stores `f32`, version 2
//! stores `f64` (used for double-precision checkpoints).

use std::fs;
use std::path::Path;

use crate::error::{DapaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DAPF_MAGIC: &[u8; 4] = b"DAPF";
pub const DAPF_VERSION_F32: u32 = 1;
pub const DAPF_VERSION_F64: u32 = 2;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

fn matrix_extent(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

/// Encodes `tensor` as a DAPF payload. Tensors of rank other than 2 are
/// flattened to `rows x (product of the remaining axes)`.
pub fn encode_dapf<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let (rows, cols) = matrix_extent(tensor.shape());
    let wide = T::NAME == "f64";
    let width = if wide { 8 } else { 4 };
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * width);
    out.extend_from_slice(DAPF_MAGIC);
    let version = if wide { DAPF_VERSION_F64 } else { DAPF_VERSION_F32 };
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for &v in tensor.data() {
        if wide {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        } else {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Header fields `(version, rows, cols)`.
pub fn decode_header(bytes: &[u8], path: &Path) -> Result<(u32, usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != DAPF_MAGIC {
        return Err(DapaError::format(path, "missing DAPF magic at byte 0"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DapaError::format(
            path,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
    if version != DAPF_VERSION_F32 && version != DAPF_VERSION_F64 {
        return Err(DapaError::format(path, format!("unsupported DAPF version {version} at byte 4")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8-byte slice"));
    let (rows, cols) = match (usize::try_from(rows), usize::try_from(cols)) {
        (Ok(r), Ok(c)) if r.checked_mul(c).is_some() => (r, c),
        _ => return Err(DapaError::format(path, format!("implausible extent {rows} x {cols}"))),
    };
    Ok((version, rows, cols))
}

pub fn decode_dapf<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let (version, rows, cols) = decode_header(bytes, path)?;
    let width = if version == DAPF_VERSION_F64 { 8 } else { 4 };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| DapaError::format(path, "payload size overflows"))?;
    if bytes.len() != expected {
        let what = if bytes.len() < expected { "truncated payload" } else { "trailing bytes" };
        return Err(DapaError::format(
            path,
            format!(
                "{what}: {rows} x {cols} needs {expected} bytes, file has {} (data starts at byte {HEADER_LEN})",
                bytes.len()
            ),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let data: Vec<T> = if width == 8 {
        payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64))
            .collect()
    };
    Tensor::new(vec![rows, cols], data)
}

pub fn write_dapf<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_dapf(tensor)).map_err(|e| DapaError::io(path, e))
}

pub fn read_dapf<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| DapaError::io(path, e))?;
    decode_dapf(&bytes, path)
}

/// Row count of a feature file without decoding the payload (DAPF), or by
/// parsing it (CSV).
pub fn feature_rows(path: &Path) -> Result<usize> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| DapaError::io(path, e))?;
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match f.read(&mut head[got..]).map_err(|e| DapaError::io(path, e))? {
            0 => break,
            n => got += n,
        }
    }
    if got >= 4 && &head[..4] == DAPF_MAGIC {
        let (version, rows, cols) = decode_header(&head[..got], path)?;
        let width = if version == DAPF_VERSION_F64 { 8 } else { 4 };
        let len = f.metadata().map_err(|e| DapaError::io(path, e))?.len() as usize;
        if len != HEADER_LEN + rows * cols * width {
            return Err(DapaError::format(
                path,
                format!("payload of {} bytes does not match {rows} x {cols}", len.saturating_sub(HEADER_LEN)),
            ));
        }
        Ok(rows)
    } else {
        Ok(read_csv_matrix(path)?.rows())
    }
}

/// Reads a feature matrix, detecting DAPF by its magic and falling back to
/// CSV otherwise. Non-finite entries are rejected.
pub fn read_feature_matrix(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| DapaError::io(path, e))?;
    let t = if bytes.starts_with(DAPF_MAGIC) {
        decode_dapf::<f32>(&bytes, path)?
    } else {
        parse_csv_matrix(&bytes, path)?
    };
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        let cols = t.cols().max(1);
        return Err(DapaError::format(
            path,
            format!("non-finite value at row {}, column {}", i / cols, i % cols),
        ));
    }
    Ok(t)
}

pub fn read_csv_matrix(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| DapaError::io(path, e))?;
    parse_csv_matrix(&bytes, path)
}

/// Comma-separated rows of numbers; a first row that does not parse as
/// numbers is taken as a header.
fn parse_csv_matrix(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| DapaError::format(path, format!("line {line}: {e}")))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f32>, _> = record.iter().map(str::parse::<f32>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if rows == 0 && cols.is_none() => {
                cols = Some(record.len());
                continue;
            }
            Err(e) => return Err(DapaError::format(path, format!("line {line}: {e}"))),
        };
        match cols {
            Some(c) if c != values.len() => {
                return Err(DapaError::format(
                    path,
                    format!("line {line}: ragged row with {} fields, expected {c}", values.len()),
                ))
            }
            _ => cols = Some(values.len()),
        }
        data.extend(values);
        rows += 1;
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_three_is_bit_exact() {
        let vals = [1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e7, -1e-30, 0.1];
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DAPF");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t: Tensor<f32> = decode_dapf(&bytes, Path::new("x")).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        for (a, b) in t.data().iter().zip(vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode_dapf(&t), bytes);
    }

    #[test]
    fn f64_round_trip_uses_version_two() {
        let t = Tensor::new(vec![2, 2], vec![0.1f64, 1.0 / 3.0, -2.5e-300, 7.0]).unwrap();
        let bytes = encode_dapf(&t);
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        let back: Tensor<f64> = decode_dapf(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn malformed_headers_and_payloads() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32; 6]).unwrap();
        let good = encode_dapf(&t);
        let p = Path::new("f.dapf");
        let err = |b: &[u8]| decode_dapf::<f32>(b, p).unwrap_err().to_string();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(err(&bad).contains("magic"));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(err(&bad).contains("version 9"));
        assert!(err(&good[..good.len() - 1]).contains("truncated payload"));
        assert!(err(&good[..10]).contains("truncated header"));
        let mut long = good.clone();
        long.push(0);
        assert!(err(&long).contains("trailing"));
    }

    #[test]
    fn csv_with_header_and_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "a,b\n1,2\n3.5,-4\n").unwrap();
        let t = read_feature_matrix(&p).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.5, -4.0]);
        assert_eq!(feature_rows(&p).unwrap(), 2);

        fs::write(&p, "1,2\n3\n").unwrap();
        let e = read_feature_matrix(&p).unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("ragged"), "{e}");
        fs::write(&p, "1,2\n3,x\n").unwrap();
        assert!(read_feature_matrix(&p).unwrap_err().to_string().contains("line 2"));
        fs::write(&p, "1,nan\n").unwrap();
        assert!(read_feature_matrix(&p).unwrap_err().to_string().contains("non-finite"));
    }

    #[test]
    fn file_round_trip_and_row_probe() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dapf");
        let t = Tensor::from_fn(&[7, 5], |i| i as f32 * 0.37 - 3.0);
        write_dapf(&p, &t).unwrap();
        assert_eq!(read_feature_matrix(&p).unwrap(), t);
        assert_eq!(feature_rows(&p).unwrap(), 7);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, bytes).unwrap();
        assert!(feature_rows(&p).is_err());
    }
}
