// SPDX-License-Identifier: Apache-2.0

//! Versioned binary checkpoint container.
//!
//! Layout: the 8-byte magic `LQACKPT\0`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header (config, dtype, tensor
//! names and shapes, adapter spec, free-form metadata), then the raw
//! little-endian tensor data in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, LoraAdapter, LoraFactors, LoraSpec, ModelConfig, TransformerModel};
use crate::error::{LitError, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"LQACKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    config: ModelConfig,
    tensors: Vec<Entry>,
    adapter: Option<LoraSpec>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &TransformerModel<T>, meta: serde_json::Value) -> Result<()> {
    let mut named = model.named_params();
    if let Some(ad) = model.adapter() {
        named.extend(ad.named_params());
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        adapter: model.adapter().map(|a| a.spec.clone()),
        meta,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header.len() + 20 + model.config.n_params() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &named {
        t.data().iter().for_each(|&x| x.write_le(&mut out));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`] with the same dtype.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TransformerModel<T>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            LitError::MissingArtifact {
                path: path.to_path_buf(),
                hint: "latentqa train-target".into(),
            }
        } else {
            e.into()
        }
    })?;
    let bad = |m: &str| LitError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a latentqa checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.dtype != T::DTYPE {
        return Err(bad(&format!("dtype {} requested as {}", header.dtype, T::DTYPE)));
    }
    header.config.validate()?;

    let mut offset = 20 + hlen;
    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * T::BYTES)
            .ok_or_else(|| bad(&format!("truncated data for {}", e.name)))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        offset += n * T::BYTES;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }

    let cfg = header.config;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| LitError::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(LitError::Shape {
                op: "load_checkpoint",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(t)
    };
    let d = cfg.hidden;
    let f = cfg.mlp_hidden();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        layers.push(Layer {
            attn_norm: take(&p("attn_norm"), &[1, d])?,
            wq: take(&p("wq"), &[d, d])?,
            wk: take(&p("wk"), &[d, d])?,
            wv: take(&p("wv"), &[d, d])?,
            wo: take(&p("wo"), &[d, d])?,
            mlp_norm: take(&p("mlp_norm"), &[1, d])?,
            w_up: take(&p("w_up"), &[d, f])?,
            w_down: take(&p("w_down"), &[f, d])?,
        });
    }
    let mut model = TransformerModel {
        tok_emb: take("tok_emb", &[cfg.vocab_size, d])?,
        pos_emb: take("pos_emb", &[cfg.max_context, d])?,
        layers,
        final_norm: take("final_norm", &[1, d])?,
        unembed: take("unembed", &[d, cfg.vocab_size])?,
        adapter: None,
        config: cfg.clone(),
    };
    if let Some(spec) = header.adapter {
        let mut factors = BTreeMap::new();
        for site in spec.sites() {
            let base = format!("lora.{}.{}", site.layer, site.linear.name());
            let (fi, fo) = site.linear.dims(&cfg);
            let a = take(&format!("{base}.a"), &[fi, spec.rank])?;
            let b = take(&format!("{base}.b"), &[spec.rank, fo])?;
            factors.insert(site, LoraFactors { a, b });
        }
        model.attach_adapter(LoraAdapter { spec, factors })?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(&format!("unexpected tensor {extra}")));
    }
    Ok((model, header.meta))
}
