use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::Path;
use std::sync::Mutex;

use flate2::read::GzDecoder;
use serde::Deserialize;

use super::oci::ConfigFile;
use super::{
    normalize_path, BlobStore, Digest, DigestScope, ImageError, ImageFormat, ImageManifest, LayerRef, Result,
    GZIP_MAGIC,
};
use crate::Named;

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct SaveEntry {
    config: String,
    #[serde(default)]
    repo_tags: Option<Vec<String>>,
    layers: Vec<String>,
}

/// Member data of a tar, either as byte ranges into the file or held in memory.
enum Members {
    Indexed {
        file: Mutex<File>,
        spans: HashMap<String, (u64, u64)>,
    },
    Loaded(HashMap<String, Vec<u8>>),
}

fn member_key(raw: &Path) -> Result<String> {
    Ok(normalize_path(raw)?.to_string_lossy().into_owned())
}

impl Members {
    fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut magic = [0u8; 2];
        let n = file.read(&mut magic)?;
        file.seek(SeekFrom::Start(0))?;
        if n == 2 && magic == GZIP_MAGIC {
            let mut archive = tar::Archive::new(GzDecoder::new(BufReader::new(file)));
            let mut members = HashMap::new();
            for entry in archive.entries()? {
                let mut entry = entry?;
                if !entry.header().entry_type().is_file() {
                    continue;
                }
                let key = member_key(&entry.path()?)?;
                let mut data = Vec::with_capacity(entry.size() as usize);
                entry.read_to_end(&mut data)?;
                members.insert(key, data);
            }
            return Ok(Members::Loaded(members));
        }

        let mut spans = HashMap::new();
        {
            let mut archive = tar::Archive::new(BufReader::new(&file));
            for entry in archive.entries()? {
                let entry = entry?;
                if !entry.header().entry_type().is_file() {
                    continue;
                }
                let key = member_key(&entry.path()?)?;
                spans.insert(key, (entry.raw_file_position(), entry.size()));
            }
        }
        Ok(Members::Indexed {
            file: Mutex::new(file),
            spans,
        })
    }

    fn contains(&self, name: &str) -> bool {
        match self {
            Members::Indexed { spans, .. } => spans.contains_key(name),
            Members::Loaded(m) => m.contains_key(name),
        }
    }

    fn read(&self, name: &str) -> Result<Vec<u8>> {
        let key = member_key(Path::new(name))?;
        match self {
            Members::Indexed { file, spans } => {
                let &(offset, size) = spans
                    .get(&key)
                    .ok_or_else(|| ImageError::MissingBlob(name.to_string()))?;
                let mut file = file.lock().expect("tar file lock poisoned");
                file.seek(SeekFrom::Start(offset))?;
                let mut data = vec![0u8; size as usize];
                file.read_exact(&mut data)?;
                Ok(data)
            }
            Members::Loaded(m) => m
                .get(&key)
                .cloned()
                .ok_or_else(|| ImageError::MissingBlob(name.to_string())),
        }
    }
}

impl BlobStore for Members {
    fn read(&self, location: &str) -> Result<Vec<u8>> {
        Members::read(self, location)
    }
}

/// Tarball written by `docker save` (`manifest.json` plus per-layer tars).
pub struct DockerSave;

impl Named for DockerSave {
    fn name(&self) -> &'static str {
        "docker-save"
    }
}

fn is_blob_path(location: &str) -> Option<Digest> {
    location
        .strip_prefix("blobs/sha256/")
        .and_then(|hex| format!("sha256:{hex}").parse().ok())
}

impl ImageFormat for DockerSave {
    fn detect(&self, input: &Path) -> bool {
        input.is_file()
            && Members::open(input)
                .map(|m| m.contains("manifest.json"))
                .unwrap_or(false)
    }

    fn parse(&self, input: &Path, reference: Option<&str>) -> Result<ImageManifest> {
        if !input.is_file() {
            return Err(ImageError::UnknownFormat(input.to_path_buf()));
        }
        let members = Members::open(input).map_err(|e| match e {
            ImageError::Io(_) => ImageError::UnknownFormat(input.to_path_buf()),
            other => other,
        })?;
        if !members.contains("manifest.json") {
            return Err(ImageError::UnknownFormat(input.to_path_buf()));
        }
        let entries: Vec<SaveEntry> = serde_json::from_slice(&members.read("manifest.json")?)?;
        let entry = match reference {
            Some(r) => entries
                .iter()
                .find(|e| e.repo_tags.iter().flatten().any(|t| t == r))
                .ok_or_else(|| ImageError::NoSuchReference(r.to_string()))?,
            None => entries
                .first()
                .ok_or_else(|| ImageError::Malformed("manifest.json lists no images".into()))?,
        };

        let config_bytes = members.read(&entry.config)?;
        if let Some(d) = is_blob_path(&entry.config) {
            d.verify(&entry.config, &config_bytes)?;
        }
        let config: ConfigFile = serde_json::from_slice(&config_bytes)?;
        if entry.layers.is_empty() {
            return Err(ImageError::EmptyImage);
        }
        let diff_ids = config.rootfs.as_ref().map(|r| r.diff_ids.clone()).unwrap_or_default();
        if diff_ids.len() != entry.layers.len() {
            return Err(ImageError::Malformed(format!(
                "{} layers but {} diff_ids in image config",
                entry.layers.len(),
                diff_ids.len()
            )));
        }

        let mut layers = Vec::with_capacity(entry.layers.len());
        for (location, diff_id) in entry.layers.iter().zip(diff_ids) {
            let layer = LayerRef {
                digest: diff_id,
                scope: DigestScope::Diff,
                location: location.clone(),
                media_type: "application/vnd.docker.image.rootfs.diff.tar".to_string(),
            };
            // hashes the uncompressed content against diff_id
            super::load_layer(&layer, &members)?;
            layers.push(layer);
        }

        let image_name = entry
            .repo_tags
            .as_ref()
            .and_then(|t| t.first().cloned())
            .unwrap_or_else(|| {
                input
                    .file_stem()
                    .map(|s| s.to_string_lossy().trim_end_matches(".tar").to_string())
                    .unwrap_or_else(|| "image".to_string())
            });
        Ok(ImageManifest {
            image_name,
            layers,
            config_env: config.env(),
            config_workdir: config.workdir(),
        })
    }

    fn open_store(&self, input: &Path) -> Result<Box<dyn BlobStore>> {
        Ok(Box::new(Members::open(input)?))
    }
}
