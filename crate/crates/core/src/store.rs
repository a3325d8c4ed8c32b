//! Raw little-endian float32 blob I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_f32_blob(path: &Path, data: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a blob that must hold exactly `expected_len` floats.
pub fn read_f32_blob(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let meta = fs::metadata(path).map_err(|_| Error::Missing(path.display().to_string()))?;
    let expected = (expected_len * 4) as u64;
    if meta.len() != expected {
        return Err(Error::BlobSize { path: path.to_path_buf(), expected, actual: meta.len() });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let data = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0e38];
        write_f32_blob(&p, &data).unwrap();
        assert_eq!(std::fs::read(&p).unwrap()[..4], 1.5f32.to_le_bytes());
        assert_eq!(read_f32_blob(&p, 4).unwrap(), data);
        match read_f32_blob(&p, 5) {
            Err(Error::BlobSize { expected, actual, .. }) => assert_eq!((expected, actual), (20, 16)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
