//! SICG: little-endian binary container for a daily SIC series.
//!
//! ```text
//! 0   magic   "SICG"
//! 4   u32     version (1)
//! 8   u32     T (days)
//! 12  u32     H
//! 16  u32     W
//! 20  u8      has_mask
//! 21  [u8]    H*W mask bytes (0 land, 1 ocean), present iff has_mask
//! ..  i64     t0
//! ..  [f32]   T*H*W values, frame-major, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SicSeries;
use crate::error::{Result, SifmError};

pub const SICG_MAGIC: &[u8; 4] = b"SICG";
pub const SICG_VERSION: u32 = 1;

pub fn write_series<W: Write>(series: &SicSeries, mut w: W) -> Result<()> {
    w.write_all(SICG_MAGIC)?;
    w.write_all(&SICG_VERSION.to_le_bytes())?;
    for dim in [series.num_days(), series.height(), series.width()] {
        let dim = u32::try_from(dim).map_err(|_| SifmError::Range(format!("extent {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    match series.mask() {
        Some(mask) => {
            w.write_all(&[1])?;
            let bytes: Vec<u8> = mask.iter().map(|&m| u8::from(m)).collect();
            w.write_all(&bytes)?;
        }
        None => w.write_all(&[0])?,
    }
    w.write_all(&series.t0().to_le_bytes())?;
    let mut buf = Vec::with_capacity(series.data().len() * 4);
    for v in series.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn save_grid_file(series: &SicSeries, path: impl AsRef<Path>) -> Result<()> {
    write_series(series, BufWriter::new(File::create(path)?))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(SifmError::Format { offset: self.offset, message: message.into() })
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        let mut got = 0;
        while got < n {
            match self.inner.read(&mut buf[got..])? {
                0 => {
                    self.offset += got as u64;
                    return self.fail(format!("truncated while reading {what}"));
                }
                k => got += k,
            }
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let v = self.bytes(N, what)?;
        Ok(v.try_into().expect("length checked"))
    }
}

pub fn read_series<R: Read>(reader: R) -> Result<SicSeries> {
    let mut c = Cursor { inner: reader, offset: 0 };
    let magic = c.array::<4>("magic")?;
    if &magic != SICG_MAGIC {
        c.offset = 0;
        return c.fail(format!("bad magic {magic:?}, expected \"SICG\""));
    }
    let version = u32::from_le_bytes(c.array("version")?);
    if version != SICG_VERSION {
        c.offset -= 4;
        return c.fail(format!("unsupported version {version}"));
    }
    let mut dims = [0usize; 3];
    for (d, name) in dims.iter_mut().zip(["T", "H", "W"]) {
        *d = u32::from_le_bytes(c.array(name)?) as usize;
        if *d == 0 {
            c.offset -= 4;
            return c.fail(format!("{name} must be positive"));
        }
    }
    let [days, h, w] = dims;
    let cells = h.checked_mul(w).ok_or_else(|| SifmError::Format { offset: 12, message: "H*W overflows".into() })?;
    let has_mask = c.array::<1>("has_mask")?[0];
    let mask = match has_mask {
        0 => None,
        1 => {
            let start = c.offset;
            let bytes = c.bytes(cells, "mask")?;
            if let Some(i) = bytes.iter().position(|&b| b > 1) {
                c.offset = start + i as u64;
                return c.fail(format!("mask byte {} is not 0 or 1", bytes[i]));
            }
            Some(bytes.into_iter().map(|b| b == 1).collect())
        }
        other => {
            c.offset -= 1;
            return c.fail(format!("has_mask flag {other} is not 0 or 1"));
        }
    };
    let t0 = i64::from_le_bytes(c.array("t0")?);
    let total = days
        .checked_mul(cells)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| SifmError::Format { offset: 8, message: "T*H*W overflows".into() })?;
    let start = c.offset;
    let raw = c.bytes(total * 4, "values")?;
    let mut data = Vec::with_capacity(total);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !(0.0..=1.0).contains(&v) {
            c.offset = start + 4 * i as u64;
            return c.fail(format!("value {v} outside [0, 1]"));
        }
        data.push(v);
    }
    let mut probe = [0u8; 1];
    if c.inner.read(&mut probe)? != 0 {
        return c.fail("trailing bytes after values");
    }
    SicSeries::new(h, w, t0, data, mask)
}

pub fn load_grid_file(path: impl AsRef<Path>) -> Result<SicSeries> {
    read_series(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(s: &SicSeries) -> Vec<u8> {
        let mut buf = Vec::new();
        write_series(s, &mut buf).unwrap();
        buf
    }

    #[test]
    fn zero_series_has_exact_byte_count() {
        let s = SicSeries::new(2, 2, 0, vec![0.0; 4], None).unwrap();
        let bytes = encode(&s);
        // 4 magic + 4 version + 12 dims + 1 flag + 8 t0 + 4 * 4 values
        assert_eq!(bytes.len(), 29 + 16);
        assert_eq!(&bytes[..4], b"SICG");
        assert!(bytes[29..].iter().all(|&b| b == 0));
    }

    #[test]
    fn corrupted_magic_and_version_report_offsets() {
        let s = SicSeries::new(1, 2, 5, vec![0.25, 0.5], Some(vec![true, false])).unwrap();
        let mut bytes = encode(&s);
        bytes[0] = b'X';
        match read_series(bytes.as_slice()) {
            Err(SifmError::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut bytes = encode(&s);
        bytes[4] = 2;
        match read_series(bytes.as_slice()) {
            Err(SifmError::Format { offset: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let s = SicSeries::new(1, 2, 5, vec![0.25, 0.5], None).unwrap();
        let bytes = encode(&s);
        let err = read_series(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, SifmError::Format { .. }), "{err}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_series(long.as_slice()).is_err());
    }

    #[test]
    fn bad_mask_byte_is_located() {
        let s = SicSeries::new(1, 2, 5, vec![0.25, 0.5], Some(vec![true, true])).unwrap();
        let mut bytes = encode(&s);
        bytes[22] = 7;
        match read_series(bytes.as_slice()) {
            Err(SifmError::Format { offset: 22, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(days in 1usize..4, h in 1usize..5, w in 1usize..5, t0 in -1000i64..1000,
                                 with_mask in any::<bool>(), seed in any::<u32>()) {
            let data: Vec<f32> = (0..days * h * w)
                .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 10_001) as f32 / 10_000.0)
                .collect();
            let mask = with_mask.then(|| (0..h * w).map(|i| !(i as u32 + seed).is_multiple_of(3)).collect());
            let s = SicSeries::new(h, w, t0, data, mask).unwrap();
            let bytes = encode(&s);
            let back = read_series(bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
