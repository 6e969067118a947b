//! "TNSR1" binary tensor format: 5 ASCII magic bytes, one rank byte,
//! rank × u32-LE dims, then row-major f64-LE values.

use std::io::{Read, Write};

use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"TNSR1";

pub fn write_tensor(w: &mut impl Write, shape: &[usize], data: &[f64]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Format(format!(
            "shape {:?} does not match {} values",
            shape,
            data.len()
        )));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format("rank exceeds 255".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok((shape, data))
}

pub fn write_tensor_file(path: &std::path::Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, shape, data)
}

pub fn read_tensor_file(path: &std::path::Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(&buf[..5], b"TNSR1");
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &3u32.to_le_bytes());
        assert_eq!(buf.len(), 5 + 1 + 8 + 6 * 8);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE!\x01\x01\x00\x00\x00".to_vec();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
