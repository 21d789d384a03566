//! Single-file tensor container used for model checkpoints and replay-buffer dumps.
//!
//! Layout:
//!
//! ```text
//! 8 bytes   magic "STAERCK1"
//! u64 LE    manifest length in bytes
//! JSON      manifest: {"dtype": "f32"|"f64", "tensors": [{"name", "shape"}], "meta": {...}}
//! values    every tensor's elements, little-endian, in manifest order
//! ```

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, ReplayEntry, StoredLogits};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"STAERCK1";
const FMT: &str = "checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    tensors: Vec<TensorInfo>,
    meta: Value,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        format: FMT,
        detail: detail.into(),
    }
}

/// Serialize named tensors plus free-form metadata.
pub fn encode<R: Real>(tensors: &[(String, &Tensor<R>)], meta: Value) -> Result<Vec<u8>> {
    let manifest = Manifest {
        dtype: R::DTYPE.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let numel: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + numel * R::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            v.to_le(&mut out);
        }
    }
    Ok(out)
}

/// Parse a container written by [`encode`] with the same element type.
pub fn decode<R: Real>(bytes: &[u8]) -> Result<(Vec<(String, Tensor<R>)>, Value)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err("missing STAERCK1 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| format_err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.dtype != R::DTYPE {
        return Err(format_err(format!(
            "stored {} values, expected {}",
            manifest.dtype,
            R::DTYPE
        )));
    }
    let mut at = 16 + len;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for info in manifest.tensors {
        let n: usize = info.shape.iter().product();
        let raw = bytes
            .get(at..at + n * R::BYTES)
            .ok_or_else(|| format_err(format!("truncated values for {}", info.name)))?;
        let data = raw.chunks_exact(R::BYTES).map(R::from_le).collect();
        out.push((info.name, Tensor::new(&info.shape, data)?));
        at += n * R::BYTES;
    }
    if at != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok((out, manifest.meta))
}

fn running_names(i: usize) -> (String, String) {
    (format!("bn{i}.running_mean"), format!("bn{i}.running_var"))
}

/// Parameters and batch-norm running statistics of a model.
pub fn save_model<R: Real>(model: &Backbone<R>) -> Result<Vec<u8>> {
    let running: Vec<(Tensor<R>, Tensor<R>)> = model
        .running_stats()
        .iter()
        .map(|r| {
            (
                Tensor::new(&[r.mean.len()], r.mean.clone()).expect("1-d"),
                Tensor::new(&[r.var.len()], r.var.clone()).expect("1-d"),
            )
        })
        .collect();
    let mut tensors: Vec<(String, &Tensor<R>)> =
        model.params().iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
    for (i, (m, v)) in running.iter().enumerate() {
        let (mn, vn) = running_names(i);
        tensors.push((mn, m));
        tensors.push((vn, v));
    }
    let meta = serde_json::json!({
        "backbone": model.config(),
        "input": model.input_shape(),
        "classes": model.classes(),
    });
    encode(&tensors, meta)
}

/// Load values saved by [`save_model`] into a model of identical architecture.
pub fn load_model<R: Real>(model: &mut Backbone<R>, bytes: &[u8]) -> Result<()> {
    let (tensors, _) = decode::<R>(bytes)?;
    let expected = model.params().len() + 2 * model.running_stats().len();
    if tensors.len() != expected {
        return Err(format_err(format!("{} tensors, model has {expected}", tensors.len())));
    }
    let mut it = tensors.into_iter();
    for id in model.params().ids().collect::<Vec<_>>() {
        let (name, t) = it.next().expect("counted");
        let p = model.params().get(id);
        if p.name != name || p.value.shape() != t.shape() {
            return Err(format_err(format!(
                "{name} {:?} does not match {} {:?}",
                t.shape(),
                p.name,
                p.value.shape()
            )));
        }
        *model.params_mut().value_mut(id) = t;
    }
    for (i, r) in model.running_stats_mut().iter_mut().enumerate() {
        let (mn, vn) = running_names(i);
        for (want, slot) in [(mn, &mut r.mean), (vn, &mut r.var)] {
            let (name, t) = it.next().expect("counted");
            if name != want || t.numel() != slot.len() {
                return Err(format_err(format!("expected {want}, found {name}")));
            }
            *slot = t.into_data();
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    y: usize,
    task: usize,
    logits: String,
    shape: Vec<usize>,
}

/// Replay buffer contents including stored logits and the stream counter.
pub fn save_buffer(buffer: &ReplayBuffer) -> Result<Vec<u8>> {
    let mut owned: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut metas = Vec::new();
    for (i, e) in buffer.entries().iter().enumerate() {
        owned.push((format!("entry{i}.x"), Tensor::new(&[e.x.len()], e.x.clone())?));
        let kind = match &e.logits {
            StoredLogits::None => "none",
            StoredLogits::Averaged(t) => {
                owned.push((format!("entry{i}.logits"), t.clone()));
                "averaged"
            }
            StoredLogits::MultiRes { half, full, double } => {
                owned.push((format!("entry{i}.half"), half.clone()));
                owned.push((format!("entry{i}.full"), full.clone()));
                owned.push((format!("entry{i}.double"), double.clone()));
                "multi_res"
            }
        };
        metas.push(EntryMeta {
            y: e.y,
            task: e.task,
            logits: kind.to_string(),
            shape: vec![e.x.len()],
        });
    }
    let meta = serde_json::json!({
        "capacity": buffer.capacity(),
        "seen": buffer.seen(),
        "entries": metas,
    });
    let refs: Vec<(String, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    encode(&refs, meta)
}

pub fn load_buffer(bytes: &[u8]) -> Result<ReplayBuffer> {
    let (tensors, meta) = decode::<f32>(bytes)?;
    let capacity = meta["capacity"]
        .as_u64()
        .ok_or_else(|| format_err("missing capacity"))? as usize;
    let seen = meta["seen"].as_u64().ok_or_else(|| format_err("missing seen"))?;
    let metas: Vec<EntryMeta> = serde_json::from_value(meta["entries"].clone())?;
    let mut it = tensors.into_iter().map(|(_, t)| t);
    let mut next = || it.next().ok_or_else(|| format_err("missing entry tensor"));
    let mut entries = Vec::with_capacity(metas.len());
    for m in metas {
        let x = next()?.into_data();
        let logits = match m.logits.as_str() {
            "none" => StoredLogits::None,
            "averaged" => StoredLogits::Averaged(next()?),
            "multi_res" => StoredLogits::MultiRes {
                half: next()?,
                full: next()?,
                double: next()?,
            },
            other => return Err(format_err(format!("unknown logits kind {other}"))),
        };
        entries.push(ReplayEntry {
            x,
            y: m.y,
            logits,
            task: m.task,
        });
    }
    ReplayBuffer::from_parts(capacity, entries, seen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor::<f64>::scalar(7.0);
        let bytes = encode(&[("a".into(), &a), ("b".into(), &b)], serde_json::json!({"k": 1})).unwrap();
        let (t, meta) = decode::<f64>(&bytes).unwrap();
        assert_eq!(t, vec![("a".to_string(), a), ("b".to_string(), b)]);
        assert_eq!(meta["k"], 1);
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }
}
