//! Raw tensor dump format.
//!
//! Layout: magic `SDTN`, u32 rank, rank x u32 extents (little-endian), then
//! the f64 payload row-major. Complex tensors store the re plane followed by
//! the im plane.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, RealTensor};

const MAGIC: &[u8; 4] = b"SDTN";

fn write_header(w: &mut impl Write, shape: &[usize], path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
    for &extent in shape {
        w.write_all(&(extent as u32).to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn write_plane(w: &mut impl Write, data: &[f64], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_real_tensor(t: &RealTensor, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, t.shape(), path)?;
    write_plane(&mut w, t.data(), path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_complex_tensor(t: &ComplexTensor, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, t.shape(), path)?;
    write_plane(&mut w, t.re(), path)?;
    write_plane(&mut w, t.im(), path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Vec<usize>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?}, expected SDTN",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Data(format!(
            "{}: implausible rank {rank}",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    Ok(shape)
}

fn read_plane(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_real_tensor(path: &Path) -> Result<RealTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let shape = read_header(&mut r, path)?;
    let n: usize = shape.iter().product();
    let data = read_plane(&mut r, n, path)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Data(format!(
            "{}: trailing bytes after real payload (complex tensor?)",
            path.display()
        )));
    }
    RealTensor::from_vec(&shape, data)
}

pub fn read_complex_tensor(path: &Path) -> Result<ComplexTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let shape = read_header(&mut r, path)?;
    let n: usize = shape.iter().product();
    let re = read_plane(&mut r, n, path)?;
    let im = read_plane(&mut r, n, path)?;
    ComplexTensor::from_planes(&shape, re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    #[test]
    fn real_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("sdtn_test_real");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.sdtn");
        let mut rng = seeded_rng(5, "sdtn");
        let t =
            RealTensor::from_vec(&[2, 3, 4], (0..24).map(|_| rng.gen::<f64>()).collect()).unwrap();
        write_real_tensor(&t, &path).unwrap();
        let back = read_real_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn complex_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("sdtn_test_complex");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.sdtn");
        let mut rng = seeded_rng(6, "sdtn");
        let t = ComplexTensor::from_planes(
            &[4, 4],
            (0..16).map(|_| rng.gen::<f64>()).collect(),
            (0..16).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap();
        write_complex_tensor(&t, &path).unwrap();
        let back = read_complex_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn real_reader_rejects_complex_payload() {
        let dir = std::env::temp_dir().join("sdtn_test_mixed");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.sdtn");
        let t = ComplexTensor::zeros(&[2, 2]);
        write_complex_tensor(&t, &path).unwrap();
        assert!(read_real_tensor(&path).is_err());
    }
}
