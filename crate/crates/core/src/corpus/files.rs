use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array4};

use super::{FeatureSequence, FrameSequence};
use crate::error::{ensure_arg, Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CHNF";
pub const FRAME_MAGIC: &[u8; 4] = b"CHNV";
pub const FORMAT_VERSION: u32 = 1;

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(self.path, "bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                self.path,
                format!("unsupported version {version}"),
            ));
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4)?;
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes after payload"));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `CHNF | u32 version | u32 T | u32 D | T·D f32 LE`.
pub fn write_feature_file(features: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let a = &features.0;
    ensure_arg!(
        a.iter().all(|v| v.is_finite()),
        "refusing to write non-finite features"
    );
    let mut out = Vec::with_capacity(16 + a.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(a.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(a.ncols() as u32).to_le_bytes());
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_all(path, &out)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    let mut c = Cursor {
        path,
        buf: &buf,
        pos: 0,
    };
    c.header(FEATURE_MAGIC)?;
    let t = c.u32()? as usize;
    let d = c.u32()? as usize;
    let data = c.f32s(t * d)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite feature value"));
    }
    Ok(FeatureSequence(
        Array2::from_shape_vec((t, d), data).expect("shape checked"),
    ))
}

/// Writes `CHNV | u32 version | u32 L | u32 C | u32 H | u32 W | L·C·H·W f32 LE`.
pub fn write_frame_archive(frames: &Array4<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = frames.shape();
    let mut out = Vec::with_capacity(24 + frames.len() * 4);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for &dim in s {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_all(path, &out)
}

pub fn read_frame_archive(path: impl AsRef<Path>) -> Result<Array4<f32>> {
    let path = path.as_ref();
    let buf = read_bytes(path)?;
    let mut c = Cursor {
        path,
        buf: &buf,
        pos: 0,
    };
    c.header(FRAME_MAGIC)?;
    let l = c.u32()? as usize;
    let ch = c.u32()? as usize;
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    let data = c.f32s(l * ch * h * w)?;
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format(path, "pixel value outside [0,1]"));
    }
    Ok(Array4::from_shape_vec((l, ch, h, w), data).expect("shape checked"))
}

/// Reads all frames of a record backed by a frame archive.
pub fn read_frames(record: &super::VideoRecord) -> Result<FrameSequence> {
    let frames = read_frame_archive(&record.source)?;
    if frames.shape()[0] != record.frame_count {
        return Err(Error::format(
            &record.source,
            "frame count disagrees with manifest",
        ));
    }
    Ok(FrameSequence(frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_file_size_matches_header_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.chnf");
        let f = FeatureSequence::new(Array2::zeros((25, 4096))).unwrap();
        write_feature_file(&f, &path).unwrap();
        let len = fs::metadata(&path).unwrap().len();
        assert_eq!(len, 16 + 25 * 4096 * 4);
        assert_eq!(read_feature_file(&path).unwrap(), f);
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.chnf");
        let f = FeatureSequence::new(Array2::ones((2, 3))).unwrap();
        write_feature_file(&f, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::Format { .. })
        ));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncated_archive_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.chnv");
        write_frame_archive(&Array4::zeros((2, 1, 2, 2)), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_frame_archive(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn non_finite_features_rejected() {
        let mut a = Array2::<f32>::zeros((2, 2));
        a[[0, 1]] = f32::NAN;
        assert!(FeatureSequence::new(a).is_err());
    }

    proptest! {
        #[test]
        fn feature_round_trip_is_identity(t in 1usize..12, d in 1usize..20, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::rng_for(seed, &[]);
            let a = Array2::from_shape_fn((t, d), |_| rng.random_range(-1e6f32..1e6));
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.chnf");
            let f = FeatureSequence::new(a).unwrap();
            write_feature_file(&f, &path).unwrap();
            let back = read_feature_file(&path).unwrap();
            prop_assert!(back.0.iter().zip(f.0.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn frame_round_trip_is_bitwise(l in 1usize..4, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::rng_for(seed, &[]);
            let a = Array4::from_shape_fn((l, 3, 4, 5), |_| rng.random_range(0.0f32..=1.0));
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.chnv");
            write_frame_archive(&a, &path).unwrap();
            let back = read_frame_archive(&path).unwrap();
            prop_assert!(back.iter().zip(a.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
