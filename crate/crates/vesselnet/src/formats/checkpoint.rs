//! Parameter checkpoints.
//!
//! A UTF-8 manifest followed by raw little-endian `f32` data:
//!
//! ```text
//! VNCKPT 1
//! spec <line count>
//! <model spec key/value lines>
//! tensors <count>
//! <name> <trainable|buffer> <shape AxBx..> <byte offset> <byte length>
//! ...
//! end
//! ```
//!
//! Offsets count from the first byte after the `end` line. Tensors appear
//! in parameter-registration order.

use std::path::Path;

use vesselnet_core::models::{build_model, Model, ModelSpec};
use vesselnet_core::nn::{ParamKind, ParamStore, Tensor};

use super::kv::{format_dims, parse_dims_any, spec_from_text, spec_lines};
use super::{read_bytes, write_atomic};
use crate::{Error, Result};

pub const HEADER: &str = "VNCKPT 1";

pub fn encode(spec: &ModelSpec, store: &ParamStore<f32>) -> Vec<u8> {
    let spec_text = spec_lines(spec);
    let mut manifest = format!("{HEADER}\nspec {}\n{spec_text}tensors {}\n", spec_text.lines().count(), store.len());
    let mut offset = 0;
    for (_, name, kind, t) in store.iter() {
        let kind = match kind {
            ParamKind::Trainable => "trainable",
            ParamKind::Buffer => "buffer",
        };
        let len = 4 * t.len();
        manifest.push_str(&format!("{name} {kind} {} {offset} {len}\n", format_dims(t.shape())));
        offset += len;
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    for (_, _, _, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Model, ParamStore<f32>), String> {
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or("manifest is not terminated by `end`")?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| "manifest is not UTF-8")?;
        pos += end + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    let data = &bytes[pos..];
    let mut it = lines.into_iter();
    if it.next() != Some(HEADER) {
        return Err(format!("missing `{HEADER}` header"));
    }
    let count = |line: Option<&str>, key: &str| -> std::result::Result<usize, String> {
        line.and_then(|l| l.strip_prefix(key))
            .and_then(|n| n.trim().parse().ok())
            .ok_or(format!("expected `{key} <count>`"))
    };
    let n_spec = count(it.next(), "spec")?;
    let spec_text: Vec<&str> = it.by_ref().take(n_spec).collect();
    let spec = spec_from_text(&spec_text.join("\n")).map_err(|e| e.to_string())?;
    let (model, mut store) = build_model::<f32>(&spec, 0).map_err(|e| e.to_string())?;
    let n_tensors = count(it.next(), "tensors")?;
    if n_tensors != store.len() {
        return Err(format!("{n_tensors} tensors, the model has {}", store.len()));
    }
    let mut seen = vec![false; store.len()];
    for line in it.by_ref().take(n_tensors) {
        let f: Vec<&str> = line.split(' ').collect();
        let [name, kind, shape, offset, len] = f[..] else {
            return Err(format!("bad tensor line {line:?}"));
        };
        let id = store.id(name).ok_or(format!("unknown parameter {name}"))?;
        let want = match store.kind(id) {
            ParamKind::Trainable => "trainable",
            ParamKind::Buffer => "buffer",
        };
        if kind != want {
            return Err(format!("{name}: kind {kind}, expected {want}"));
        }
        let shape = parse_dims_any(shape)?;
        let (offset, len): (usize, usize) = match (offset.parse(), len.parse()) {
            (Ok(o), Ok(l)) => (o, l),
            _ => return Err(format!("{name}: bad offset or length")),
        };
        let raw = data
            .get(offset..offset.checked_add(len).ok_or("overflow")?)
            .ok_or(format!("{name}: data out of range"))?;
        if raw.len() % 4 != 0 {
            return Err(format!("{name}: length not a multiple of 4"));
        }
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(&shape, values).map_err(|e| format!("{name}: {e}"))?;
        store.set(id, t).map_err(|e| e.to_string())?;
        seen[id.index()] = true;
    }
    if it.next().is_some() {
        return Err("trailing manifest lines".into());
    }
    if seen.iter().any(|s| !s) {
        return Err("manifest does not cover every parameter".into());
    }
    Ok((model, store))
}

pub fn read(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    decode(&read_bytes(path)?).map_err(|d| Error::format(path, d))
}

pub fn write(path: &Path, spec: &ModelSpec, store: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode(spec, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vesselnet_core::models::Model2DSpec;

    #[test]
    fn round_trip_preserves_every_value() {
        let spec = ModelSpec::Views(Model2DSpec::new(1, 2, 1).with_input(8, 8));
        let (_, store) = build_model::<f32>(&spec, 77).unwrap();
        let bytes = encode(&spec, &store);
        let text = String::from_utf8_lossy(&bytes[..200]);
        assert!(text.starts_with("VNCKPT 1\nspec 9\nmodel = views\n"));
        let (model, back) = decode(&bytes).unwrap();
        assert_eq!(model.spec(), spec);
        for (a, b) in store.iter().zip(back.iter()) {
            assert_eq!(a.1, b.1);
            assert_eq!(a.3, b.3);
        }
    }

    #[test]
    fn truncated_data_rejected() {
        let spec = ModelSpec::Views(Model2DSpec::new(1, 1, 1).with_input(8, 8));
        let (_, store) = build_model::<f32>(&spec, 1).unwrap();
        let bytes = encode(&spec, &store);
        assert!(decode(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode(b"VNCKPT 2\nend\n").is_err());
    }
}
