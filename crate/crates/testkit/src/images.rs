//! Writers for the two image input layouts, built from raw layer tars.

use std::fs;
use std::io;
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tar::{Builder, EntryType, Header};

use crate::layers::gzip;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Image metadata for fixture writers.
#[derive(Debug, Clone)]
pub struct ImageSpec {
    pub tag: String,
    pub env: Vec<String>,
    pub workdir: Option<String>,
    /// OCI only: store layers gzip-compressed.
    pub compress: bool,
}

impl ImageSpec {
    pub fn new(tag: &str) -> Self {
        ImageSpec {
            tag: tag.to_string(),
            env: vec!["PATH=/usr/bin:/bin".to_string()],
            workdir: None,
            compress: true,
        }
    }
}

fn config_json(spec: &ImageSpec, layers: &[Vec<u8>]) -> Vec<u8> {
    let mut config = json!({ "Env": spec.env });
    if let Some(w) = &spec.workdir {
        config["WorkingDir"] = Value::from(w.clone());
    }
    let diff_ids: Vec<String> = layers.iter().map(|l| format!("sha256:{}", sha256_hex(l))).collect();
    serde_json::to_vec(&json!({
        "architecture": "amd64",
        "os": "linux",
        "config": config,
        "rootfs": { "type": "layers", "diff_ids": diff_ids },
    }))
    .unwrap()
}

fn put_blob(dir: &Path, bytes: &[u8]) -> io::Result<String> {
    let hex = sha256_hex(bytes);
    let blobs = dir.join("blobs/sha256");
    fs::create_dir_all(&blobs)?;
    fs::write(blobs.join(&hex), bytes)?;
    Ok(format!("sha256:{hex}"))
}

/// Writes an OCI image layout to `dir`; `layers` are uncompressed tars, base first.
pub fn write_oci_layout(dir: &Path, spec: &ImageSpec, layers: &[Vec<u8>]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("oci-layout"), br#"{"imageLayoutVersion":"1.0.0"}"#)?;
    let config = config_json(spec, layers);
    let config_digest = put_blob(dir, &config)?;
    let mut layer_descs = Vec::new();
    for l in layers {
        let (blob, media) = if spec.compress {
            (gzip(l), "application/vnd.oci.image.layer.v1.tar+gzip")
        } else {
            (l.clone(), "application/vnd.oci.image.layer.v1.tar")
        };
        let digest = put_blob(dir, &blob)?;
        layer_descs.push(json!({ "mediaType": media, "digest": digest, "size": blob.len() }));
    }
    let manifest = serde_json::to_vec(&json!({
        "schemaVersion": 2,
        "mediaType": "application/vnd.oci.image.manifest.v1+json",
        "config": {
            "mediaType": "application/vnd.oci.image.config.v1+json",
            "digest": config_digest,
            "size": config.len(),
        },
        "layers": layer_descs,
    }))
    .unwrap();
    let manifest_digest = put_blob(dir, &manifest)?;
    let index = json!({
        "schemaVersion": 2,
        "manifests": [{
            "mediaType": "application/vnd.oci.image.manifest.v1+json",
            "digest": manifest_digest,
            "size": manifest.len(),
            "annotations": { "org.opencontainers.image.ref.name": spec.tag },
        }],
    });
    fs::write(dir.join("index.json"), serde_json::to_vec(&index).unwrap())
}

fn append_file(b: &mut Builder<fs::File>, name: &str, data: &[u8]) -> io::Result<()> {
    let mut h = Header::new_ustar();
    h.set_entry_type(EntryType::Regular);
    h.set_mode(0o644);
    h.set_size(data.len() as u64);
    b.append_data(&mut h, name, data)
}

/// Writes a `docker save` style tarball; `layers` are uncompressed tars, base first.
pub fn write_docker_save(path: &Path, spec: &ImageSpec, layers: &[Vec<u8>]) -> io::Result<()> {
    let mut b = Builder::new(fs::File::create(path)?);
    let config = config_json(spec, layers);
    let config_name = format!("{}.json", sha256_hex(&config));
    let mut names = Vec::new();
    for l in layers {
        let name = format!("{}/layer.tar", sha256_hex(l));
        append_file(&mut b, &name, l)?;
        names.push(name);
    }
    append_file(&mut b, &config_name, &config)?;
    let manifest = json!([{ "Config": config_name, "RepoTags": [spec.tag], "Layers": names }]);
    append_file(&mut b, "manifest.json", &serde_json::to_vec(&manifest).unwrap())?;
    b.into_inner()?.sync_all()
}
