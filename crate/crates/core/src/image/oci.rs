use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{BlobStore, Digest, DigestScope, ImageError, ImageFormat, ImageManifest, LayerRef, Result};
use crate::Named;

const MEDIA_INDEX: &str = "application/vnd.oci.image.index.v1+json";
const MEDIA_DOCKER_LIST: &str = "application/vnd.docker.distribution.manifest.list.v2+json";
const ANNOTATION_REF_NAME: &str = "org.opencontainers.image.ref.name";
const ANNOTATION_CONTAINERD_NAME: &str = "io.containerd.image.name";

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
pub(super) struct Descriptor {
    #[serde(default)]
    pub media_type: String,
    pub digest: Digest,
    #[serde(default)]
    pub annotations: HashMap<String, String>,
    #[serde(default)]
    pub platform: Option<Platform>,
}

#[derive(Deserialize)]
pub(super) struct Platform {
    #[serde(default)]
    pub architecture: String,
    #[serde(default)]
    pub os: String,
}

#[derive(Deserialize)]
struct Index {
    manifests: Vec<Descriptor>,
}

#[derive(Deserialize)]
struct Manifest {
    config: Descriptor,
    layers: Vec<Descriptor>,
}

#[derive(Deserialize, Default)]
pub(super) struct ConfigFile {
    #[serde(default)]
    pub config: Option<RunConfig>,
    #[serde(default)]
    pub rootfs: Option<RootfsSection>,
}

#[derive(Deserialize, Default)]
pub(super) struct RunConfig {
    #[serde(default, rename = "Env")]
    pub env: Option<Vec<String>>,
    #[serde(default, rename = "WorkingDir")]
    pub working_dir: Option<String>,
}

#[derive(Deserialize, Default)]
pub(super) struct RootfsSection {
    #[serde(default)]
    pub diff_ids: Vec<Digest>,
}

impl ConfigFile {
    pub fn env(&self) -> Vec<String> {
        self.config.as_ref().and_then(|c| c.env.clone()).unwrap_or_default()
    }

    pub fn workdir(&self) -> Option<PathBuf> {
        self.config
            .as_ref()
            .and_then(|c| c.working_dir.as_deref())
            .filter(|w| !w.is_empty())
            .map(PathBuf::from)
    }
}

fn host_arch() -> &'static str {
    match std::env::consts::ARCH {
        "x86_64" => "amd64",
        "aarch64" => "arm64",
        other => other,
    }
}

/// Chooses the descriptor matching `reference` by name annotation, otherwise
/// the one for this host's platform, otherwise the first.
pub(super) fn pick<'a>(descriptors: &'a [Descriptor], reference: Option<&str>) -> Result<&'a Descriptor> {
    if let Some(r) = reference {
        return descriptors
            .iter()
            .find(|d| {
                d.annotations.get(ANNOTATION_REF_NAME).map(String::as_str) == Some(r)
                    || d.annotations.get(ANNOTATION_CONTAINERD_NAME).map(String::as_str) == Some(r)
            })
            .ok_or_else(|| ImageError::NoSuchReference(r.to_string()));
    }
    descriptors
        .iter()
        .find(|d| {
            d.platform
                .as_ref()
                .is_some_and(|p| p.os == "linux" && p.architecture == host_arch())
        })
        .or_else(|| descriptors.first())
        .ok_or_else(|| ImageError::Malformed("image index lists no manifests".into()))
}

/// OCI image-layout directory (`oci-layout`, `index.json`, `blobs/`).
pub struct OciLayout;

struct LayoutStore {
    root: PathBuf,
}

impl BlobStore for LayoutStore {
    fn read(&self, location: &str) -> Result<Vec<u8>> {
        fs::read(self.root.join(location)).map_err(|e| missing_or_io(e, location))
    }
}

fn missing_or_io(e: io::Error, location: &str) -> ImageError {
    if e.kind() == io::ErrorKind::NotFound {
        ImageError::MissingBlob(location.to_string())
    } else {
        ImageError::Io(e)
    }
}

fn blob_location(digest: &Digest) -> String {
    format!("blobs/sha256/{}", digest.hex())
}

impl LayoutStore {
    fn verified(&self, digest: &Digest) -> Result<Vec<u8>> {
        let location = blob_location(digest);
        let bytes = self.read(&location)?;
        digest.verify(&location, &bytes)?;
        Ok(bytes)
    }

    fn verify_streaming(&self, digest: &Digest) -> Result<()> {
        let location = blob_location(digest);
        let file = File::open(self.root.join(&location)).map_err(|e| missing_or_io(e, &location))?;
        let actual = Digest::of_reader(BufReader::new(file))?;
        if &actual != digest {
            return Err(ImageError::DigestMismatch {
                what: location,
                expected: digest.clone(),
                actual,
            });
        }
        Ok(())
    }
}

impl Named for OciLayout {
    fn name(&self) -> &'static str {
        "oci"
    }
}

impl ImageFormat for OciLayout {
    fn detect(&self, input: &Path) -> bool {
        input.is_dir() && input.join("oci-layout").is_file() && input.join("index.json").is_file()
    }

    fn parse(&self, input: &Path, reference: Option<&str>) -> Result<ImageManifest> {
        if !self.detect(input) {
            return Err(ImageError::UnknownFormat(input.to_path_buf()));
        }
        let store = LayoutStore {
            root: input.to_path_buf(),
        };
        let index: Index = serde_json::from_slice(&fs::read(input.join("index.json"))?)?;
        let top = pick(&index.manifests, reference)?;
        let mut image_name = top
            .annotations
            .get(ANNOTATION_REF_NAME)
            .or_else(|| top.annotations.get(ANNOTATION_CONTAINERD_NAME))
            .cloned();

        let mut descriptor_digest = top.digest.clone();
        let mut media_type = top.media_type.clone();
        // nested indexes, as written by newer docker and buildkit
        let manifest: Manifest = loop {
            let bytes = store.verified(&descriptor_digest)?;
            if media_type == MEDIA_INDEX || media_type == MEDIA_DOCKER_LIST {
                let nested: Index = serde_json::from_slice(&bytes)?;
                let next = pick(&nested.manifests, None)?;
                if image_name.is_none() {
                    image_name = next.annotations.get(ANNOTATION_REF_NAME).cloned();
                }
                descriptor_digest = next.digest.clone();
                media_type = next.media_type.clone();
                continue;
            }
            break serde_json::from_slice(&bytes)?;
        };

        let config: ConfigFile = serde_json::from_slice(&store.verified(&manifest.config.digest)?)?;
        if manifest.layers.is_empty() {
            return Err(ImageError::EmptyImage);
        }
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for d in &manifest.layers {
            store.verify_streaming(&d.digest)?;
            layers.push(LayerRef {
                digest: d.digest.clone(),
                scope: DigestScope::Blob,
                location: blob_location(&d.digest),
                media_type: d.media_type.clone(),
            });
        }

        let image_name = image_name.unwrap_or_else(|| {
            input
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
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
        Ok(Box::new(LayoutStore {
            root: input.to_path_buf(),
        }))
    }
}
