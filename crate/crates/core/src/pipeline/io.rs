//! On-disk formats.
//!
//! Parameters and datasets are a text manifest plus one raw blob. The
//! manifest's first line is a format tag; `key value` lines follow, then
//! one line per array: `tensor <name> <d0,d1,..> <byte offset> <dtype>`.
//! Floats are stored as little-endian `f32` and widened on load; labels as
//! little-endian `u32`. The blob path is relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::dataset::{LabeledDataset, Split};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTParams};

const PARAMS_TAG: &str = "qvit-params v1";
const DATASET_TAG: &str = "qvit-dataset v1";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write a file, creating parent directories as needed.
pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn blob_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.file_name().unwrap_or_default().to_os_string();
    name.push(".bin");
    manifest.with_file_name(name)
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    dtype: String,
}

struct Manifest {
    meta: Vec<(String, String)>,
    blob: String,
    entries: Vec<Entry>,
}

impl Manifest {
    fn meta(&self, key: &str, path: &Path) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(path, format!("missing `{key}`")))
    }
}

fn parse_manifest(path: &Path, tag: &str) -> Result<Manifest> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(tag) {
        return Err(Error::format(path, format!("expected `{tag}` header")));
    }
    let mut meta = Vec::new();
    let mut entries = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key != "tensor" {
            meta.push((key.to_string(), rest.to_string()));
            continue;
        }
        let cols: Vec<&str> = rest.split(' ').collect();
        let [name, shape, offset, dtype] = cols[..] else {
            return Err(Error::format(path, format!("malformed entry `{line}`")));
        };
        let shape = shape
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|e| Error::format(path, format!("shape of `{name}`: {e}")))?;
        let offset = offset
            .parse()
            .map_err(|e| Error::format(path, format!("offset of `{name}`: {e}")))?;
        entries.push(Entry {
            name: name.to_string(),
            shape,
            offset,
            dtype: dtype.to_string(),
        });
    }
    let blob = meta
        .iter()
        .find(|(k, _)| k == "blob")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::format(path, "missing `blob`"))?;
    Ok(Manifest {
        meta,
        blob,
        entries,
    })
}

fn entry_line(name: &str, shape: &[usize], offset: usize, dtype: &str) -> String {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    format!("tensor {name} {} {offset} {dtype}\n", dims.join(","))
}

fn read_f32s(blob: &[u8], e: &Entry, path: &Path) -> Result<Vec<f64>> {
    if e.dtype != "f32le" {
        return Err(Error::format(
            path,
            format!("`{}` has dtype {}, expected f32le", e.name, e.dtype),
        ));
    }
    let n: usize = e.shape.iter().product();
    let bytes = blob.get(e.offset..e.offset + 4 * n).ok_or_else(|| {
        Error::format(path, format!("`{}` runs past the end of the blob", e.name))
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn push_f32s(blob: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn blob_name(manifest: &Path) -> String {
    blob_path(manifest)
        .file_name()
        .unwrap_or_default()
        .to_string_lossy()
        .into_owned()
}

/// Save parameters (rounded to `f32`).
pub fn save_params(params: &ViTParams, manifest: &Path) -> Result<()> {
    let config = serde_json::to_string(&params.config).map_err(|e| Error::Config(e.to_string()))?;
    let mut text = format!(
        "{PARAMS_TAG}\nconfig {config}\nblob {}\n",
        blob_name(manifest)
    );
    let mut blob = Vec::new();
    for (name, t) in params.named_tensors() {
        text.push_str(&entry_line(&name, t.shape(), blob.len(), "f32le"));
        push_f32s(&mut blob, t.data());
    }
    write_file(&blob_path(manifest), blob)?;
    write_file(manifest, text)
}

pub fn load_params(manifest: &Path) -> Result<ViTParams> {
    let m = parse_manifest(manifest, PARAMS_TAG)?;
    let config: ViTConfig = serde_json::from_str(m.meta("config", manifest)?)
        .map_err(|e| Error::format(manifest, format!("config: {e}")))?;
    config.validate()?;
    let blob_file = manifest.with_file_name(&m.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let mut named = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let data = read_f32s(&blob, e, manifest)?;
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let params = ViTParams::from_named(&config, named)?;
    params.validate()?;
    Ok(params)
}

pub fn save_dataset(data: &LabeledDataset, manifest: &Path) -> Result<()> {
    let mut text = format!(
        "{DATASET_TAG}\nsplit {}\nclasses {}\nblob {}\n",
        data.split.name(),
        data.classes,
        blob_name(manifest)
    );
    let mut blob = Vec::new();
    let mut shape = vec![data.len()];
    shape.extend(data.images.first().map_or(&[][..], |t| t.shape()));
    text.push_str(&entry_line("images", &shape, 0, "f32le"));
    for im in &data.images {
        push_f32s(&mut blob, im.data());
    }
    text.push_str(&entry_line("labels", &[data.len()], blob.len(), "u32le"));
    for &l in &data.labels {
        blob.extend_from_slice(&(l as u32).to_le_bytes());
    }
    write_file(&blob_path(manifest), blob)?;
    write_file(manifest, text)
}

pub fn load_dataset(manifest: &Path) -> Result<LabeledDataset> {
    let m = parse_manifest(manifest, DATASET_TAG)?;
    let split = Split::parse(m.meta("split", manifest)?)?;
    let classes = m
        .meta("classes", manifest)?
        .parse()
        .map_err(|e| Error::format(manifest, format!("classes: {e}")))?;
    let blob_file = manifest.with_file_name(&m.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    let find = |name: &str| {
        m.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(manifest, format!("missing `{name}`")))
    };
    let images_e = find("images")?;
    let labels_e = find("labels")?;
    let count = labels_e.shape[0];
    if images_e.shape.first() != Some(&count) || labels_e.dtype != "u32le" {
        return Err(Error::format(manifest, "images and labels disagree"));
    }
    let flat = read_f32s(&blob, images_e, manifest)?;
    let per = flat.len().checked_div(count).unwrap_or(0);
    let images = flat
        .chunks(per.max(1))
        .take(count)
        .map(|c| Tensor::new(images_e.shape[1..].to_vec(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let lb = blob
        .get(labels_e.offset..labels_e.offset + 4 * count)
        .ok_or_else(|| Error::format(manifest, "labels run past the end of the blob"))?;
    let labels = lb
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    LabeledDataset::new(split, classes, images, labels)
}
