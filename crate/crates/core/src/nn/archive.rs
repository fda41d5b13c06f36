//! Checkpoint archives: a tar file holding one descriptor/index JSON plus
//! one AHD1-style f64 blob per named array. Headers are zeroed so that
//! identical state produces identical bytes.

use super::{build_skeleton, ModelBundle, NetDescriptor, Param, ParamGroup};
use crate::tensor::{decode_f64_blob, encode_f64_blob};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

pub fn write_archive(path: &Path, entries: &[(String, Vec<u8>)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut builder = tar::Builder::new(file);
    for (name, bytes) in entries {
        let mut header = tar::Header::new_ustar();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_cksum();
        builder
            .append_data(&mut header, name, bytes.as_slice())
            .map_err(|e| Error::io(path, e))?;
    }
    builder.finish().map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = tar::Archive::new(file);
    let mut out = BTreeMap::new();
    for entry in archive.entries().map_err(|e| Error::io(path, e))? {
        let mut entry = entry.map_err(|e| Error::io(path, e))?;
        let name = entry
            .path()
            .map_err(|e| Error::io(path, e))?
            .to_string_lossy()
            .into_owned();
        let mut bytes = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        out.insert(name, bytes);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BundleIndex {
    descriptor: NetDescriptor,
    params: Vec<ParamMeta>,
}

/// Serialize a bundle as archive entries under `prefix`.
pub fn bundle_entries(prefix: &str, bundle: &ModelBundle) -> Result<Vec<(String, Vec<u8>)>> {
    let index = BundleIndex {
        descriptor: bundle.descriptor.clone(),
        params: bundle
            .params
            .iter()
            .map(|p| ParamMeta { name: p.name.clone(), group: p.group, shape: p.value.shape.clone() })
            .collect(),
    };
    let mut entries = vec![(
        format!("{prefix}index.json"),
        serde_json::to_vec_pretty(&index).map_err(|e| Error::invalid(e.to_string()))?,
    )];
    for p in &bundle.params {
        entries.push((format!("{prefix}params/{}.ahd1", p.name), encode_f64_blob(&p.value.data)));
    }
    Ok(entries)
}

/// Rebuild a bundle from archive entries under `prefix`, validating every
/// shape against the descriptor's skeleton.
pub fn bundle_from_entries(
    path: &Path,
    prefix: &str,
    entries: &BTreeMap<String, Vec<u8>>,
) -> Result<ModelBundle> {
    let index_bytes = entries
        .get(&format!("{prefix}index.json"))
        .ok_or_else(|| Error::format(path, format!("missing {prefix}index.json")))?;
    let index: BundleIndex =
        serde_json::from_slice(index_bytes).map_err(|e| Error::format(path, e.to_string()))?;

    let skeleton = build_skeleton(&index.descriptor)?;
    if skeleton.params.len() != index.params.len() {
        return Err(Error::format(
            path,
            format!(
                "descriptor expects {} parameters, archive lists {}",
                skeleton.params.len(),
                index.params.len()
            ),
        ));
    }

    let mut params = Vec::with_capacity(index.params.len());
    for (meta, expect) in index.params.iter().zip(&skeleton.params) {
        if meta.name != expect.name || meta.shape != expect.value.shape {
            return Err(Error::format(
                path,
                format!(
                    "parameter {} shape {:?} does not match descriptor ({} {:?})",
                    meta.name, meta.shape, expect.name, expect.value.shape
                ),
            ));
        }
        let blob = entries
            .get(&format!("{prefix}params/{}.ahd1", meta.name))
            .ok_or_else(|| Error::format(path, format!("missing blob for parameter {}", meta.name)))?;
        let data = decode_f64_blob(blob)?;
        if data.len() != meta.shape.iter().product::<usize>() {
            return Err(Error::format(path, format!("parameter {} blob length mismatch", meta.name)));
        }
        params.push(Param {
            name: meta.name.clone(),
            group: meta.group,
            value: crate::autodiff::Tensor::from_vec(&meta.shape, data),
        });
    }
    Ok(ModelBundle::from_params(index.descriptor, params))
}

pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    write_archive(path, &bundle_entries("", bundle)?)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let entries = read_archive(path)?;
    bundle_from_entries(path, "", &entries)
}
