//! Checkpoint container: one JSON manifest line, then named weight blobs as
//! little-endian f32, in manifest order. Shared by denoiser, LoRA, and
//! autoencoder checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

pub fn save<S: Scalar>(
    path: impl AsRef<Path>,
    kind: &str,
    meta: Value,
    tensors: &BTreeMap<String, Tensor<S>>,
) -> Result<()> {
    let manifest = Manifest {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for t in tensors.values() {
        for &v in t.data() {
            w.write_all(&v.to_f32_().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(
    path: impl AsRef<Path>,
    expect_kind: &str,
) -> Result<(Value, BTreeMap<String, Tensor<S>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format("manifest", "missing newline terminator"));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let manifest: Manifest =
        serde_json::from_slice(&header).map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.kind != expect_kind {
        return Err(Error::format(
            "kind",
            format!("expected {expect_kind}, found {}", manifest.kind),
        ));
    }
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|_| Error::Truncation { expected: n, found: 0 })?;
        let data = buf
            .chunks_exact(4)
            .map(|c| S::from_f64_(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(&entry.shape, data));
    }
    Ok((manifest.meta, tensors))
}
