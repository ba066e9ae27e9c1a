//! Header and summary statistics for any artifact written by this crate.

use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use serde_json::{json, Value};

use crate::curation::{read_tuple_count, TupleManifest};
use crate::error::{Error, Result};
use crate::format::{decode_container, Records};
use crate::tensor::Tensor;

fn stats(t: &Tensor) -> Value {
    let d = t.data();
    if d.is_empty() {
        return json!({ "shape": t.shape(), "numel": 0 });
    }
    let n = d.len() as f64;
    let mean = d.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let min = d.iter().copied().fold(f32::INFINITY, f32::min);
    let max = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    json!({
        "shape": t.shape(),
        "numel": d.len(),
        "mean": mean,
        "std": var.sqrt(),
        "min": min,
        "max": max,
        "finite": t.is_finite(),
    })
}

fn records_summary(records: &Records) -> Value {
    let total: usize = records.iter().map(|(_, t)| t.numel()).sum();
    json!({
        "count": records.len(),
        "numel": total,
        "tensors": records.iter().map(|(n, t)| json!({ "name": n, "stats": stats(t) })).collect::<Vec<_>>(),
    })
}

/// Dispatches on the 4-byte magic and returns a JSON summary.
pub fn inspect(path: &Path) -> Result<Value> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut magic = [0u8; 4];
    fs::File::open(path)?.read_exact(&mut magic)?;
    let mut r = BufReader::new(fs::File::open(path)?);
    match &magic {
        b"GTTN" => {
            let t = Tensor::read_from(&mut r)?;
            Ok(json!({ "kind": "GTTN", "path": path, "tensor": stats(&t) }))
        }
        b"GTDX" => {
            let count = read_tuple_count(path)?;
            let mut out = json!({ "kind": "GTDX", "path": path, "tuple_count": count });
            let manifest_path = path.with_file_name("manifest.json");
            if manifest_path.exists() {
                let m: TupleManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
                let listed = m.tuples.len();
                let c = &m.curation;
                out["manifest"] = json!({
                    "tuples": listed,
                    "shadow_count": c.shadow_count,
                    "harvest": c.harvest,
                    "skipped": m.skipped.len(),
                    "source_layout": m.source_layout.to_string(),
                    "target_layout": m.target_layout.to_string(),
                    "source_root": m.source_root,
                    "target_root": m.target_root,
                    "train": m.train_indices.len(),
                    "val": m.val_indices.len(),
                    "count_matches": listed == count as usize,
                });
            }
            Ok(out)
        }
        b"GTCK" | b"GTGT" | b"GTCU" | b"GTUV" => {
            let (header, records): (Value, Records) = decode_container(&mut r, &magic)?;
            Ok(json!({
                "kind": String::from_utf8_lossy(&magic),
                "path": path,
                "header": header,
                "records": records_summary(&records),
            }))
        }
        other => Err(Error::Format(format!(
            "{}: unknown magic {:?}",
            path.display(),
            String::from_utf8_lossy(other)
        ))),
    }
}

/// Short human-readable rendering of an [`inspect`] summary.
pub fn render(summary: &Value) -> String {
    let mut s = format!("{} {}\n", summary["kind"].as_str().unwrap_or("?"), summary["path"].as_str().unwrap_or(""));
    if let Some(n) = summary.get("tuple_count") {
        s += &format!("tuples: {n}\n");
        if let Some(m) = summary.get("manifest") {
            s += &format!(
                "manifest: {} tuples ({} train / {} val), {} shadows x {} steps, {} skipped\nsource layout {}\ntarget layout {}\n",
                m["tuples"], m["train"], m["val"], m["shadow_count"], m["harvest"], m["skipped"],
                m["source_layout"].as_str().unwrap_or(""), m["target_layout"].as_str().unwrap_or("")
            );
        }
    }
    if let Some(t) = summary.get("tensor") {
        s += &format!("tensor {t}\n");
    }
    if let Some(h) = summary.get("header") {
        s += &format!("header {}\n", serde_json::to_string_pretty(h).unwrap_or_default());
    }
    if let Some(r) = summary.get("records") {
        s += &format!("{} records, {} values\n", r["count"], r["numel"]);
        for t in r["tensors"].as_array().into_iter().flatten() {
            let st = &t["stats"];
            s += &format!(
                "  {:<28} {:<12} mean {:+.4e} std {:.4e}\n",
                t["name"].as_str().unwrap_or(""),
                st["shape"].to_string(),
                st["mean"].as_f64().unwrap_or(0.0),
                st["std"].as_f64().unwrap_or(0.0)
            );
        }
    }
    s
}
