//! Binary array container and grayscale map export.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "UQAR" | version u32 | count u32
//! per array: name_len u32 | name utf-8 | dtype u8 | ndim u32 | dims u64 * ndim | data
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::grid::Grid;

const MAGIC: &[u8; 4] = b"UQAR";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        NamedArray {
            name: name.into(),
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedArray {
            name: name.into(),
            shape,
            data: ArrayData::F64(data),
        }
    }
}

pub fn write_arrays(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::shape(format!("array {} does not match shape {:?}", a.name, a.shape)));
        }
        out.write_all(&(a.name.len() as u32).to_le_bytes())?;
        out.write_all(a.name.as_bytes())?;
        let dtype: u8 = match a.data {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
        };
        out.write_all(&[dtype])?;
        out.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for &d in &a.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        match &a.data {
            ArrayData::F32(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
            ArrayData::F64(v) => v.iter().try_for_each(|x| out.write_all(&x.to_le_bytes()))?,
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Container("unexpected end of data".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_arrays(path: &Path) -> Result<Vec<NamedArray>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Container("array name is not utf-8".into()))?;
        let dtype = c.take(1)?[0];
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = match dtype {
            0 => ArrayData::F32(
                c.take(len * 4)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            1 => ArrayData::F64(
                c.take(len * 8)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(Error::Container(format!("unknown dtype {other}"))),
        };
        arrays.push(NamedArray { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Container("trailing bytes".into()));
    }
    Ok(arrays)
}

/// Scale a map to 8-bit grayscale over `[lo, hi]`; `None` uses the map's own range.
pub fn map_to_gray(map: &Grid<f64>, range: Option<(f64, f64)>) -> GrayImage {
    let (lo, hi) = range.unwrap_or_else(|| {
        map.data
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = GrayImage::new(map.width as u32, map.height as u32);
    for y in 0..map.height {
        for x in 0..map.width {
            let v = *map.get(y, x);
            let t = if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            img.put_pixel(x as u32, y as u32, Luma([(t * 255.0).round() as u8]));
        }
    }
    img
}

/// Write a map as PNG or PGM, chosen by the file extension.
pub fn save_map(path: &Path, map: &Grid<f64>, range: Option<(f64, f64)>) -> Result<()> {
    map_to_gray(map, range).save(path)?;
    Ok(())
}
