//! `HVEC` binary files: little-endian header (magic, version u32, dim u32,
//! count u64, metric u8) followed by `count × dim` f32 values and, for
//! corpus files only, `count` u64 doc ids. Assignment files are a bare run
//! of `count` u32 cluster ids.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Centroids, Corpus, Metric};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HVEC";
const VERSION: u32 = 1;

struct Header {
    dim: u32,
    count: u64,
    metric: Metric,
}

fn write_header(w: &mut impl Write, h: &Header) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&h.dim.to_le_bytes())?;
    w.write_all(&h.count.to_le_bytes())?;
    w.write_all(&[h.metric.code()])?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing HVEC magic".into()));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported HVEC version {version}")));
    }
    let dim = u32::from_le_bytes(read_array(r)?);
    let count = u64::from_le_bytes(read_array(r)?);
    let [metric] = read_array::<1>(r)?;
    Ok(Header {
        dim,
        count,
        metric: Metric::from_code(metric)?,
    })
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn write_f32s(w: &mut impl Write, xs: &[f32]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            dim: corpus.dim() as u32,
            count: corpus.len() as u64,
            metric: corpus.metric(),
        },
    )?;
    write_f32s(&mut w, corpus.data())?;
    for id in corpus.ids() {
        w.write_all(&id.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    let (dim, count) = (h.dim as usize, h.count as usize);
    let data = read_f32s(&mut r, dim * count)?;
    let mut id_bytes = vec![0u8; count * 8];
    r.read_exact(&mut id_bytes)?;
    let ids = id_bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Corpus::new(dim, h.metric, ids, data)
}

pub fn write_centroids(path: impl AsRef<Path>, centroids: &Centroids, metric: Metric) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            dim: centroids.dim() as u32,
            count: centroids.k() as u64,
            metric,
        },
    )?;
    write_f32s(&mut w, centroids.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_centroids(path: impl AsRef<Path>) -> Result<(Centroids, Metric)> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    let data = read_f32s(&mut r, h.dim as usize * h.count as usize)?;
    Ok((Centroids::new(h.dim as usize, data)?, h.metric))
}

pub fn write_assignment(path: impl AsRef<Path>, assignment: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in assignment {
        w.write_all(&c.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignment(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("assignment file length is not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}
