//! On-disk formats shared by every stage.
//!
//! Matrix files are an ASCII header line `rows cols\n` followed by
//! `rows * cols` little-endian `f32` values in row-major order. Several
//! matrices may be concatenated in one stream (bundle files).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub fn write_matrix_block<T: Scalar>(w: &mut impl Write, m: &Matrix<T>) -> Result<()> {
    writeln!(w, "{} {}", m.rows(), m.cols())?;
    let mut buf = Vec::with_capacity(m.as_slice().len() * 4);
    for &x in m.as_slice() {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix_block<T: Scalar>(r: &mut impl BufRead, origin: &Path) -> Result<Matrix<T>> {
    let mut header = String::new();
    if r.read_line(&mut header)? == 0 {
        return Err(Error::format(origin, "unexpected end of file before matrix header"));
    }
    let mut it = header.split_whitespace().map(str::parse::<usize>);
    let (rows, cols) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(r)), Some(Ok(c)), None) => (r, c),
        _ => return Err(Error::format(origin, format!("bad matrix header {:?}", header.trim_end()))),
    };
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format(origin, format!("truncated {rows}x{cols} matrix: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_matrix<T: Scalar>(path: &Path, m: &Matrix<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix_block(&mut buf, m)?;
    write_atomic(path, &buf)
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    if !path.exists() {
        return Err(Error::DanglingReference(path.to_path_buf()));
    }
    let mut r = BufReader::new(fs::File::open(path)?);
    let m = read_matrix_block(&mut r, path)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(path, "trailing bytes after matrix"));
    }
    Ok(m)
}

/// Write via a sibling temporary file and rename, so readers never observe
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// 16 kHz (or `rate`) mono 16-bit PCM WAV.
pub fn write_wav(path: &Path, samples: &[f64], rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec)
            .map_err(|e| Error::format(path, e.to_string()))?;
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            w.write_sample(v).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.finalize().map_err(|e| Error::format(path, e.to_string()))?;
    }
    write_atomic(path, &cursor.into_inner())
}

pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut r = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let rate = r.spec().sample_rate;
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((samples, rate))
}

/// Hex SHA-256 of a byte slice.
pub fn digest_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(digest_bytes(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_file_round_trip_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mat");
        let m = Matrix::<f32>::from_fn(3, 2, |i, j| i as f32 - 0.5 * j as f32);
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix::<f32>(&p).unwrap(), m);
        let mut bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"3 2\n"));
        bytes.push(0);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_matrix::<f32>(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_matrix_is_dangling() {
        let r = read_matrix::<f32>(Path::new("/nonexistent/x.mat"));
        assert!(matches!(r, Err(Error::DanglingReference(_))));
    }

    #[test]
    fn wav_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let s: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin() * 0.5).collect();
        write_wav(&p, &s, 16_000).unwrap();
        let (back, rate) = read_wav(&p).unwrap();
        assert_eq!(rate, 16_000);
        assert!(back.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
