//! On-disk formats: EMB1 embedding matrices, plain-text label files and the
//! JSON dataset manifest.
//!
//! EMB1 layout (all integers little-endian):
//!
//! ```text
//! 0..4   magic "EMB1"
//! 4      version = 1
//! 5      dtype   = 1 (f32 LE)
//! 6..8   reserved, zero
//! 8..16  rows  (u64)
//! 16..20 dim   (u32)
//! 20..   rows*dim f32 values, row-major
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassTextEmbeddings, EmbeddingMatrix};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u8 = 1;
pub const EMB_DTYPE_F32: u8 = 1;
pub const EMB_HEADER_LEN: usize = 20;

pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(EMB_HEADER_LEN + 4 * matrix.rows() * matrix.dim());
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&[EMB_VERSION, EMB_DTYPE_F32, 0, 0]);
    buf.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim() as u32).to_le_bytes());
    for &x in matrix.view().iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < EMB_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != EMB_MAGIC {
            return Err(Error::UnsupportedFormat("bad magic".into()));
        }
        return Err(Error::CorruptFile(format!(
            "header truncated at {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != EMB_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    if bytes[4] != EMB_VERSION {
        return Err(Error::UnsupportedFormat(format!("version {}", bytes[4])));
    }
    if bytes[5] != EMB_DTYPE_F32 {
        return Err(Error::UnsupportedFormat(format!("dtype {}", bytes[5])));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as u64;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(EMB_HEADER_LEN as u64))
        .ok_or_else(|| Error::CorruptFile("header size overflow".into()))?;
    if bytes.len() as u64 != expected {
        return Err(Error::CorruptFile(format!(
            "expected {expected} bytes for {rows}x{dim}, found {}",
            bytes.len()
        )));
    }
    let values = bytes[EMB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingMatrix::from_rows(rows as usize, dim as usize, values)
}

pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(matrix)).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// One ASCII decimal class index per line.
pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in labels {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let label = trimmed.parse().map_err(|_| {
            Error::CorruptFile(format!("{}: line {} is not a class index", path.display(), i + 1))
        })?;
        labels.push(label);
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_patches: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub unary_embeddings_path: PathBuf,
    pub pairwise_embeddings_path: PathBuf,
    pub text_embeddings_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnails_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
}

impl DatasetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ManifestMismatch(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::ManifestMismatch(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Everything the engine needs about one slide (or synthetic stand-in).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// Embeddings used against the class texts for the unary term.
    pub unary: EmbeddingMatrix,
    /// Embeddings used for patch-to-patch similarities.
    pub pairwise: EmbeddingMatrix,
    pub text: ClassTextEmbeddings,
    pub labels: Option<Vec<usize>>,
    pub thumbnails_dir: Option<PathBuf>,
    pub grid: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        unary: EmbeddingMatrix,
        pairwise: EmbeddingMatrix,
        text: ClassTextEmbeddings,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            unary,
            pairwise,
            text,
            labels,
            thumbnails_dir: None,
            grid: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.unary.rows();
        if self.pairwise.rows() != n {
            return Err(Error::ManifestMismatch(format!(
                "unary has {n} rows, pairwise has {}",
                self.pairwise.rows()
            )));
        }
        if self.text.dim() != self.unary.dim() {
            return Err(Error::ManifestMismatch(format!(
                "text dim {} != unary dim {}",
                self.text.dim(),
                self.unary.dim()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::ManifestMismatch(format!(
                    "{} labels for {n} patches",
                    labels.len()
                )));
            }
            let l = self.num_classes();
            if let Some(&bad) = labels.iter().find(|&&x| x >= l) {
                return Err(Error::ManifestMismatch(format!(
                    "label {bad} out of range for {l} classes"
                )));
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.unary.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.text.num_classes()
    }

    pub fn class_names(&self) -> &[String] {
        self.text.class_names()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }

    /// Writes all files plus `manifest.json` into `dir` and returns the
    /// manifest path. File paths in the manifest are relative to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_embeddings(&self.unary, dir.join("unary.emb"))?;
        write_embeddings(&self.pairwise, dir.join("pairwise.emb"))?;
        write_embeddings(self.text.embeddings(), dir.join("text.emb"))?;
        let labels_path = match &self.labels {
            Some(labels) => {
                write_labels(labels, dir.join("labels.txt"))?;
                Some(PathBuf::from("labels.txt"))
            }
            None => None,
        };
        let manifest = DatasetManifest {
            name: self.name.clone(),
            num_patches: self.num_patches(),
            num_classes: self.num_classes(),
            class_names: self.class_names().to_vec(),
            unary_embeddings_path: "unary.emb".into(),
            pairwise_embeddings_path: "pairwise.emb".into(),
            text_embeddings_path: "text.emb".into(),
            labels_path,
            thumbnails_dir: self.thumbnails_dir.clone(),
            grid: self.grid,
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_for_manifest(path: &Path) -> Result<EmbeddingMatrix> {
    if !path.exists() {
        return Err(Error::ManifestMismatch(format!(
            "missing file {}",
            path.display()
        )));
    }
    read_embeddings(path)
}

/// Loads a dataset, checking every file header against the manifest counts.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let unary = read_for_manifest(&resolve(base, &manifest.unary_embeddings_path))?;
    let pairwise = read_for_manifest(&resolve(base, &manifest.pairwise_embeddings_path))?;
    let text = read_for_manifest(&resolve(base, &manifest.text_embeddings_path))?;

    let n = manifest.num_patches;
    if unary.rows() != n || pairwise.rows() != n {
        return Err(Error::ManifestMismatch(format!(
            "manifest declares {n} patches, files hold {} (unary) and {} (pairwise)",
            unary.rows(),
            pairwise.rows()
        )));
    }
    if text.rows() != manifest.num_classes || manifest.class_names.len() != manifest.num_classes {
        return Err(Error::ManifestMismatch(format!(
            "manifest declares {} classes, text file holds {} rows and {} names",
            manifest.num_classes,
            text.rows(),
            manifest.class_names.len()
        )));
    }
    let labels = match &manifest.labels_path {
        Some(p) => {
            let p = resolve(base, p);
            if !p.exists() {
                return Err(Error::ManifestMismatch(format!("missing file {}", p.display())));
            }
            Some(read_labels(p)?)
        }
        None => None,
    };
    let text = ClassTextEmbeddings::new(text, manifest.class_names.clone())
        .map_err(|e| Error::ManifestMismatch(e.to_string()))?;
    let mut ds = Dataset::new(manifest.name.clone(), unary, pairwise, text, labels)?;
    ds.thumbnails_dir = manifest.thumbnails_dir.as_ref().map(|p| resolve(base, p));
    ds.grid = manifest.grid;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_file_layout() {
        let m = EmbeddingMatrix::from_rows(1, 1, vec![0.0]).unwrap();
        let bytes = encode_embeddings(&m);
        assert_eq!(
            bytes,
            [
                0x45, 0x4D, 0x42, 0x31, 0x01, 0x01, 0x00, 0x00, 0x01, 0, 0, 0, 0, 0, 0, 0, 0x01,
                0, 0, 0, 0, 0, 0, 0
            ]
        );
    }

    #[test]
    fn bad_magic_is_unsupported() {
        let m = EmbeddingMatrix::from_rows(1, 1, vec![0.0]).unwrap();
        let mut bytes = encode_embeddings(&m);
        bytes[3] = b'2';
        let err = decode_embeddings(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported format"), "{err}");
        let mut bytes = encode_embeddings(&m);
        bytes[5] = 2;
        assert!(matches!(decode_embeddings(&bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let m = EmbeddingMatrix::from_rows(2, 3, vec![1.0; 6]).unwrap();
        let bytes = encode_embeddings(&m);
        let err = decode_embeddings(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(err.to_string().contains("corrupt file"), "{err}");
        assert!(matches!(decode_embeddings(&bytes[..10]), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        write_labels(&[0, 2, 1], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "0\n2\n1\n");
        assert_eq!(read_labels(&p).unwrap(), vec![0, 2, 1]);
    }

    proptest! {
        #[test]
        fn emb1_round_trip_is_bit_exact(
            (rows, dim, values) in (1usize..12, 1usize..12).prop_flat_map(|(r, d)| {
                (Just(r), Just(d), prop::collection::vec(
                    any::<f32>().prop_filter("finite", |x| x.is_finite()), r * d))
            })
        ) {
            let m = EmbeddingMatrix::from_rows(rows, dim, values.iter().map(|&x| x as f64).collect()).unwrap();
            let back = decode_embeddings(&encode_embeddings(&m)).unwrap();
            for (a, b) in back.view().iter().zip(&values) {
                prop_assert_eq!((*a as f32).to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.rows(), rows);
            prop_assert_eq!(back.dim(), dim);
        }
    }
}
