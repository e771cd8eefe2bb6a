//! Image inputs and layer flattening.
//!
//! An image input is either an OCI image-layout directory or a `docker save`
//! tarball. Both are parsed into an [`ImageManifest`] whose layers are then
//! folded, base first, into a [`FlattenedRootfs`].

mod docker;
mod entry;
mod oci;
mod tree;

use std::fmt;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::{Named, Registry};

pub use docker::DockerSave;
pub(crate) use entry::append_entry as entry_writer;
pub use entry::{decode_layer, encode_layer, normalize_path, EntryKind, LayerEntry};
pub use oci::OciLayout;
pub use tree::{FlattenedRootfs, Node, NodeKind};

/// Location of the image metadata file written into packed rootfs trees.
pub const IMAGE_CONFIG_PATH: &str = ".airlift/config.json";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{}: not an OCI image layout or docker-save tarball", .0.display())]
    UnknownFormat(PathBuf),
    #[error("unknown image format {0:?}")]
    NoSuchFormat(String),
    #[error("digest mismatch for {what}: declared {expected}, content hashes to {actual}")]
    DigestMismatch {
        what: String,
        expected: Digest,
        actual: Digest,
    },
    #[error("missing blob {0}")]
    MissingBlob(String),
    #[error("image has no layers")]
    EmptyImage,
    #[error("path {0:?} escapes the image root")]
    PathEscape(String),
    #[error("hard link {link:?} points at {target:?}, which does not exist as a regular file")]
    HardlinkTargetMissing { link: PathBuf, target: PathBuf },
    #[error("{target:?} is removed by a whiteout but hard link {link:?} still refers to it")]
    HardlinkTargetRemoved { link: PathBuf, target: PathBuf },
    #[error("unsupported layer encoding: {0}")]
    UnsupportedMediaType(String),
    #[error("malformed image: {0}")]
    Malformed(String),
    #[error("bad digest {0:?}")]
    BadDigest(String),
    #[error("reference {0:?} not found in image")]
    NoSuchReference(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<serde_json::Error> for ImageError {
    fn from(e: serde_json::Error) -> Self {
        ImageError::Malformed(e.to_string())
    }
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// A `sha256:<hex>` content digest.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Digest {
    hex: String,
}

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self {
            hex: hex::encode(Sha256::digest(bytes)),
        }
    }

    pub fn of_reader(mut reader: impl Read) -> io::Result<Self> {
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            let n = match reader.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            };
            hasher.update(&buf[..n]);
        }
        Ok(Self {
            hex: hex::encode(hasher.finalize()),
        })
    }

    pub fn hex(&self) -> &str {
        &self.hex
    }

    pub fn verify(&self, what: &str, bytes: &[u8]) -> Result<()> {
        let actual = Digest::of_bytes(bytes);
        if &actual != self {
            return Err(ImageError::DigestMismatch {
                what: what.to_string(),
                expected: self.clone(),
                actual,
            });
        }
        Ok(())
    }
}

impl FromStr for Digest {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self> {
        let hex = s
            .strip_prefix("sha256:")
            .ok_or_else(|| ImageError::BadDigest(s.to_string()))?;
        if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ImageError::BadDigest(s.to_string()));
        }
        Ok(Self {
            hex: hex.to_ascii_lowercase(),
        })
    }
}

impl TryFrom<String> for Digest {
    type Error = ImageError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Digest> for String {
    fn from(d: Digest) -> String {
        d.to_string()
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sha256:{}", self.hex)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// What a layer digest was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DigestScope {
    /// The blob exactly as stored (OCI layer descriptors).
    Blob,
    /// The uncompressed layer tar (docker `diff_ids`).
    Diff,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRef {
    pub digest: Digest,
    pub scope: DigestScope,
    /// Blob location relative to the image input.
    pub location: String,
    pub media_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageManifest {
    pub image_name: String,
    /// Base layer first.
    pub layers: Vec<LayerRef>,
    pub config_env: Vec<String>,
    pub config_workdir: Option<PathBuf>,
}

impl ImageManifest {
    pub fn config(&self) -> ImageConfig {
        ImageConfig {
            env: self.config_env.clone(),
            workdir: self.config_workdir.clone(),
        }
    }
}

/// Image configuration carried into the unpacked rootfs at [`IMAGE_CONFIG_PATH`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageConfig {
    #[serde(default)]
    pub env: Vec<String>,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
}

impl ImageConfig {
    pub fn load(rootfs: &Path) -> io::Result<Option<Self>> {
        match std::fs::read(rootfs.join(IMAGE_CONFIG_PATH)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Read access to the blobs named by [`LayerRef::location`].
pub trait BlobStore: Send + Sync {
    fn read(&self, location: &str) -> Result<Vec<u8>>;
}

/// One supported image input layout.
pub trait ImageFormat: Named + Send + Sync {
    fn detect(&self, input: &Path) -> bool;
    fn parse(&self, input: &Path, reference: Option<&str>) -> Result<ImageManifest>;
    fn open_store(&self, input: &Path) -> Result<Box<dyn BlobStore>>;
}

/// The image formats shipped with the crate, in detection order.
pub fn formats() -> Registry<dyn ImageFormat> {
    let mut reg: Registry<dyn ImageFormat> = Registry::new();
    reg.register(Box::new(OciLayout)).register(Box::new(DockerSave));
    reg
}

/// Picks a format by name, or by detection when `name` is `None` or `"auto"`.
pub fn select_format<'r>(
    registry: &'r Registry<dyn ImageFormat>,
    input: &Path,
    name: Option<&str>,
) -> Result<&'r dyn ImageFormat> {
    match name {
        None | Some("auto") => registry
            .find(|f| f.detect(input))
            .ok_or_else(|| ImageError::UnknownFormat(input.to_path_buf())),
        Some(n) => registry.get(n).ok_or_else(|| ImageError::NoSuchFormat(n.to_string())),
    }
}

/// Parses an image input with format auto-detection.
pub fn parse_image(input: &Path) -> Result<ImageManifest> {
    let registry = formats();
    select_format(&registry, input, None)?.parse(input, None)
}

/// Parses an image input and opens its blob store in one step.
pub fn open_image(
    input: &Path,
    format: Option<&str>,
    reference: Option<&str>,
) -> Result<(ImageManifest, Box<dyn BlobStore>)> {
    let registry = formats();
    let format = select_format(&registry, input, format)?;
    let manifest = format.parse(input, reference)?;
    let store = format.open_store(input)?;
    Ok((manifest, store))
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const ZSTD_MAGIC: [u8; 4] = [0x28, 0xb5, 0x2f, 0xfd];

fn decompress(raw: Vec<u8>) -> Result<Vec<u8>> {
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::with_capacity(raw.len() * 3);
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else if raw.starts_with(&ZSTD_MAGIC) {
        Err(ImageError::UnsupportedMediaType("zstd".into()))
    } else {
        Ok(raw)
    }
}

/// Reads a layer blob, verifies its digest and returns the uncompressed tar.
pub fn load_layer(layer: &LayerRef, store: &dyn BlobStore) -> Result<Vec<u8>> {
    let raw = store.read(&layer.location)?;
    match layer.scope {
        DigestScope::Blob => {
            layer.digest.verify(&layer.location, &raw)?;
            decompress(raw)
        }
        DigestScope::Diff => {
            let tar = decompress(raw)?;
            layer.digest.verify(&layer.location, &tar)?;
            Ok(tar)
        }
    }
}

/// Squashes every layer of `manifest`, base first, into one tree.
///
/// Layers are read and decoded in parallel; application is sequential.
pub fn flatten(manifest: &ImageManifest, store: &dyn BlobStore) -> Result<FlattenedRootfs> {
    if manifest.layers.is_empty() {
        return Err(ImageError::EmptyImage);
    }
    let decoded: Vec<Result<Vec<LayerEntry>>> = std::thread::scope(|s| {
        let handles: Vec<_> = manifest
            .layers
            .iter()
            .map(|layer| s.spawn(move || decode_layer(load_layer(layer, store)?.as_slice())))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("layer decoder panicked"))
            .collect()
    });
    flatten_layers(decoded.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Left fold of [`FlattenedRootfs::apply_layer`] over already-decoded layers.
pub fn flatten_layers(layers: Vec<Vec<LayerEntry>>) -> Result<FlattenedRootfs> {
    if layers.is_empty() {
        return Err(ImageError::EmptyImage);
    }
    let mut rootfs = FlattenedRootfs::new();
    for layer in layers {
        rootfs.apply_layer(layer)?;
    }
    Ok(rootfs)
}

/// Derives a filesystem-safe directory name from an image reference.
pub fn sanitize_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '.' | '_' | '-' => c,
            _ => '_',
        })
        .collect();
    match cleaned.trim_start_matches('.') {
        "" => "image".to_string(),
        s => s.to_string(),
    }
}
