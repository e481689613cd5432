//! Raster container (.rsr), tiling with overlap, reassembly, previews.
//!
//! On-disk layout: one UTF-8 JSON header line terminated by '\n' with
//! fields {"magic":"RSR1","bands":[...],"height":H,"width":W,
//! "dtype":"f32le","bbox":[...]|null}, followed by bands*H*W little-endian
//! f32 samples, planar (band-major, then row-major).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &str = "RSR1";

/// Bands x H x W grid of unit-interval samples; the universal image carrier.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<S = f32> {
    pub bands: Vec<String>,
    /// band-major, then row-major
    data: Vec<S>,
    pub height: usize,
    pub width: usize,
    /// closed interval the samples live in, canonically [0,1]
    pub value_range: (S, S),
    /// (lat_min, lat_max, lon_min, lon_max), degrees
    pub bbox: Option<[f64; 4]>,
}

impl<S: Scalar> Raster<S> {
    pub fn new(bands: Vec<String>, height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        let r = Raster {
            bands,
            data,
            height,
            width,
            value_range: (S::zero(), S::one()),
            bbox: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn constant(bands: Vec<String>, height: usize, width: usize, v: S) -> Self {
        Raster {
            data: vec![v; bands.len() * height * width],
            bands,
            height,
            width,
            value_range: (S::zero(), S::one()),
            bbox: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 1 || self.width < 1 {
            return Err(Error::geometry("raster extents must be >= 1"));
        }
        if self.data.len() != self.bands.len() * self.height * self.width {
            return Err(Error::Truncation {
                expected: self.bands.len() * self.height * self.width,
                found: self.data.len(),
            });
        }
        let (lo, hi) = self.value_range;
        for &v in &self.data {
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::contract(format!(
                    "sample {v} outside value_range [{lo}, {hi}] or non-finite"
                )));
            }
        }
        Ok(())
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band_index(&self, band: &str) -> Result<usize> {
        self.bands.iter().position(|b| b == band).ok_or_else(|| Error::Key(band.to_string()))
    }

    pub fn band(&self, band: &str) -> Result<&[S]> {
        let i = self.band_index(band)?;
        Ok(self.band_plane(i))
    }

    pub fn band_plane(&self, i: usize) -> &[S] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn band_plane_mut(&mut self, i: usize) -> &mut [S] {
        let n = self.height * self.width;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> S {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, band: usize, row: usize, col: usize, v: S) {
        self.data[(band * self.height + row) * self.width + col] = v;
    }

    /// Single-band view as a new raster.
    pub fn select_band(&self, band: &str) -> Result<Raster<S>> {
        let plane = self.band(band)?.to_vec();
        Ok(Raster {
            bands: vec![band.to_string()],
            data: plane,
            height: self.height,
            width: self.width,
            value_range: self.value_range,
            bbox: self.bbox,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Raster<T> {
        Raster {
            bands: self.bands.clone(),
            data: self.data.iter().map(|v| T::from_f64_(v.to_f64_())).collect(),
            height: self.height,
            width: self.width,
            value_range: (
                T::from_f64_(self.value_range.0.to_f64_()),
                T::from_f64_(self.value_range.1.to_f64_()),
            ),
            bbox: self.bbox,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    bands: Vec<String>,
    height: usize,
    width: usize,
    dtype: String,
    bbox: Option<[f64; 4]>,
}

pub fn write_raster<S: Scalar>(raster: &Raster<S>, path: impl AsRef<Path>) -> Result<()> {
    raster.validate()?;
    let header = Header {
        magic: MAGIC.to_string(),
        bands: raster.bands.clone(),
        height: raster.height,
        width: raster.width,
        dtype: "f32le".to_string(),
        bbox: raster.bbox,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for &v in &raster.data {
        w.write_all(&v.to_f32_().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raster<S: Scalar>(path: impl AsRef<Path>) -> Result<Raster<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::format("header", "missing newline terminator"));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format("header", e.to_string()))?;
    if header.magic != MAGIC {
        return Err(Error::format("magic", format!("expected {MAGIC}, got {}", header.magic)));
    }
    if header.dtype != "f32le" {
        return Err(Error::format("dtype", format!("unsupported dtype {}", header.dtype)));
    }
    if header.height < 1 || header.width < 1 {
        return Err(Error::format("height/width", "extents must be >= 1"));
    }
    let expected = header.bands.len() * header.height * header.width;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(Error::Truncation { expected, found: payload.len() / 4 });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| S::from_f64_(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let raster = Raster {
        bands: header.bands,
        data,
        height: header.height,
        width: header.width,
        value_range: (S::zero(), S::one()),
        bbox: header.bbox,
    };
    raster.validate()?;
    Ok(raster)
}

/// Tiles cut from a source raster with a fixed stride.
#[derive(Clone, Debug)]
pub struct TileSet<S = f32> {
    pub tiles: Vec<Raster<S>>,
    /// (row, col) offsets into the source, row-major sorted
    pub origins: Vec<(usize, usize)>,
    pub tile_size: usize,
    pub stride: usize,
    pub source_shape: (usize, usize),
    pub bands: Vec<String>,
}

fn axis_origins(extent: usize, tile_size: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        if o + tile_size >= extent {
            origins.push(extent - tile_size); // clamp last tile to the edge
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins.dedup();
    origins
}

pub fn tile<S: Scalar>(raster: &Raster<S>, tile_size: usize, overlap_frac: f64) -> Result<TileSet<S>> {
    if !(0.0..1.0).contains(&overlap_frac) {
        return Err(Error::config("overlap_frac must be in [0,1)"));
    }
    if tile_size > raster.height.min(raster.width) || tile_size == 0 {
        return Err(Error::size(format!(
            "tile_size {tile_size} exceeds image extent {}x{}",
            raster.height, raster.width
        )));
    }
    let overlap = (overlap_frac * tile_size as f64).round() as usize;
    let stride = tile_size - overlap;
    if stride == 0 {
        return Err(Error::config("overlap leaves zero stride"));
    }
    let rows = axis_origins(raster.height, tile_size, stride);
    let cols = axis_origins(raster.width, tile_size, stride);
    let mut tiles = Vec::new();
    let mut origins = Vec::new();
    for &r0 in &rows {
        for &c0 in &cols {
            let mut data = Vec::with_capacity(raster.n_bands() * tile_size * tile_size);
            for b in 0..raster.n_bands() {
                let plane = raster.band_plane(b);
                for y in 0..tile_size {
                    let row = &plane[(r0 + y) * raster.width + c0..(r0 + y) * raster.width + c0 + tile_size];
                    data.extend_from_slice(row);
                }
            }
            tiles.push(Raster {
                bands: raster.bands.clone(),
                data,
                height: tile_size,
                width: tile_size,
                value_range: raster.value_range,
                bbox: None,
            });
            origins.push((r0, c0));
        }
    }
    Ok(TileSet {
        tiles,
        origins,
        tile_size,
        stride,
        source_shape: (raster.height, raster.width),
        bands: raster.bands.clone(),
    })
}

/// Reassemble; overlapping pixels are combined by arithmetic mean.
pub fn untile<S: Scalar>(ts: &TileSet<S>) -> Result<Raster<S>> {
    let (h, w) = ts.source_shape;
    let nb = ts.bands.len();
    if ts.tiles.len() != ts.origins.len() {
        return Err(Error::geometry("tiles/origins length mismatch"));
    }
    let mut acc = vec![S::zero(); nb * h * w];
    let mut count = vec![0u32; h * w];
    for (tile, &(r0, c0)) in ts.tiles.iter().zip(&ts.origins) {
        if r0 + ts.tile_size > h || c0 + ts.tile_size > w {
            return Err(Error::geometry(format!(
                "origin ({r0},{c0}) with tile_size {} outside source {h}x{w}",
                ts.tile_size
            )));
        }
        if tile.height != ts.tile_size || tile.width != ts.tile_size || tile.n_bands() != nb {
            return Err(Error::geometry("tile shape inconsistent with tileset"));
        }
        for b in 0..nb {
            let plane = tile.band_plane(b);
            for y in 0..ts.tile_size {
                for x in 0..ts.tile_size {
                    acc[(b * h + r0 + y) * w + c0 + x] += plane[y * ts.tile_size + x];
                }
            }
        }
        for y in 0..ts.tile_size {
            for x in 0..ts.tile_size {
                count[(r0 + y) * w + c0 + x] += 1;
            }
        }
    }
    if count.iter().any(|&c| c == 0) {
        return Err(Error::geometry("tileset does not cover every source pixel"));
    }
    let mut data = vec![S::zero(); nb * h * w];
    for b in 0..nb {
        for p in 0..h * w {
            data[b * h * w + p] = acc[b * h * w + p] / S::from_usize_(count[p] as usize);
        }
    }
    Ok(Raster {
        bands: ts.bands.clone(),
        data,
        height: h,
        width: w,
        value_range: (S::zero(), S::one()),
        bbox: None,
    })
}

/// 8-bit grayscale preview; v maps to round(255 * v^(1/gamma)).
pub fn export_preview<S: Scalar>(
    raster: &Raster<S>,
    band: &str,
    gamma: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    if gamma <= 0.0 {
        return Err(Error::config("gamma must be positive"));
    }
    let plane = raster.band(band)?;
    let pixels: Vec<u8> = plane
        .iter()
        .map(|v| (255.0 * v.to_f64_().clamp(0.0, 1.0).powf(1.0 / gamma)).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(raster.width as u32, raster.height as u32, pixels)
        .expect("buffer sized from raster extents");
    img.save(path).map_err(|e| Error::config(format!("preview write failed: {e}")))?;
    Ok(())
}

pub fn preview_value(v: f64, gamma: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0).powf(1.0 / gamma)).round() as u8
}
