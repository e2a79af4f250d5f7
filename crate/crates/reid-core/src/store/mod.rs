//! Embedding store: validated in-memory feature sets plus a bit-exact
//! on-disk format.
//!
//! The on-disk layout is a TOML manifest naming two sibling files: a raw
//! matrix file (32-bit IEEE-754 floats, little-endian, row-major) and a
//! CSV metadata file with header `image_id,camera_id,tracklet_id,identity,view`.
//! Identity may be empty; tracklet_id `-1` means "no tracklet" and such
//! images act as singleton tracklets downstream. All paths in a manifest
//! are relative to the manifest's directory.

mod synth;

pub use synth::{default_query_split, synth_generate, SynthParams};

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows whose Euclidean norm is within this of 1 count as unit-length.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// Capture variant of an image. The flipped views come from horizontal
/// mirroring of the original and cropped images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Original,
    Cropped,
    FlippedOriginal,
    FlippedCropped,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Original => "original",
            View::Cropped => "cropped",
            View::FlippedOriginal => "flipped_original",
            View::FlippedCropped => "flipped_cropped",
        }
    }

    pub fn parse(s: &str) -> Option<View> {
        match s {
            "original" => Some(View::Original),
            "cropped" => Some(View::Cropped),
            "flipped_original" => Some(View::FlippedOriginal),
            "flipped_cropped" => Some(View::FlippedCropped),
            _ => None,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-image record, parallel to one row of a [`FeatureSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageMeta {
    pub image_id: String,
    pub camera_id: u32,
    /// `None` means the image has no tracklet; it acts as a singleton
    /// tracklet in every downstream aggregation.
    pub tracklet_id: Option<u32>,
    /// Ground-truth identity; absent for unlabeled test data.
    pub identity: Option<u32>,
    pub view: View,
}

/// Dense row-major embedding matrix with validated invariants: every
/// value is finite, and when `normalized` is set every row is unit-length
/// within [`NORM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    data: Vec<f32>,
    dim: usize,
    normalized: bool,
}

impl FeatureSet {
    /// Build a feature set from row-major data, validating finiteness.
    /// The `normalized` flag is detected from the data.
    pub fn from_vec(data: Vec<f32>, dim: usize) -> Result<FeatureSet> {
        if dim == 0 {
            return Err(Error::InvalidParam {
                name: "dim",
                reason: "must be positive".into(),
            });
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidParam {
                name: "data",
                reason: format!("length {} is not a multiple of dim {dim}", data.len()),
            });
        }
        let mut normalized = true;
        for (row, chunk) in data.chunks_exact(dim).enumerate() {
            let mut sq = 0f64;
            for (col, &v) in chunk.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row, col });
                }
                sq += f64::from(v) * f64::from(v);
            }
            if (sq.sqrt() - 1.0).abs() > NORM_TOLERANCE {
                normalized = false;
            }
        }
        Ok(FeatureSet {
            data,
            dim,
            normalized,
        })
    }

    /// Internal constructor for operations that guarantee the invariants
    /// themselves (all values finite, flag correct).
    pub(crate) fn from_parts_unchecked(data: Vec<f32>, dim: usize, normalized: bool) -> FeatureSet {
        debug_assert_eq!(data.len() % dim, 0);
        FeatureSet {
            data,
            dim,
            normalized,
        }
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// New set containing the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> FeatureSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureSet {
            data,
            dim: self.dim,
            normalized: self.normalized,
        }
    }
}

/// On-disk description of a feature set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub count: usize,
    /// Must be `f32le`.
    pub dtype: String,
    /// Must be `row_major`.
    pub order: String,
    /// Raw matrix file, relative to the manifest.
    pub data: String,
    /// Metadata CSV, relative to the manifest.
    pub meta: String,
}

fn check_alignment(fs: &FeatureSet, metas: &[ImageMeta]) -> Result<()> {
    if fs.count() != metas.len() {
        return Err(Error::LengthMismatch {
            features: fs.count(),
            metas: metas.len(),
        });
    }
    Ok(())
}

/// Validate that a feature set and its metadata fulfil the shared
/// invariants: matching lengths, unique `(image_id, view)` pairs, and a
/// single camera per tracklet.
pub fn validate_pair(fs: &FeatureSet, metas: &[ImageMeta]) -> Result<()> {
    check_alignment(fs, metas)?;
    let mut seen: HashSet<(&str, View)> = HashSet::with_capacity(metas.len());
    let mut tracklet_camera: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    for meta in metas {
        if !seen.insert((meta.image_id.as_str(), meta.view)) {
            return Err(Error::DuplicateImage {
                image_id: meta.image_id.clone(),
                view: meta.view.to_string(),
            });
        }
        if let Some(t) = meta.tracklet_id {
            match tracklet_camera.get(&t) {
                Some(&cam) if cam != meta.camera_id => {
                    return Err(Error::TrackletCameraConflict {
                        tracklet: t,
                        camera_a: cam,
                        camera_b: meta.camera_id,
                    });
                }
                Some(_) => {}
                None => {
                    tracklet_camera.insert(t, meta.camera_id);
                }
            }
        }
    }
    Ok(())
}

fn manifest_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| manifest_error(path, e.to_string()))?;
    if manifest.dtype != "f32le" {
        return Err(manifest_error(
            path,
            format!("dtype must be \"f32le\", got {:?}", manifest.dtype),
        ));
    }
    if manifest.order != "row_major" {
        return Err(manifest_error(
            path,
            format!("order must be \"row_major\", got {:?}", manifest.order),
        ));
    }
    if manifest.dim == 0 {
        return Err(manifest_error(path, "dim must be positive"));
    }
    Ok(manifest)
}

fn resolve(manifest_path: &Path, relative: &str) -> PathBuf {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    base.join(relative)
}

fn meta_error(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Metadata {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_image_id(raw: &str, path: &Path, line: usize) -> Result<String> {
    if raw.is_empty() {
        return Err(meta_error(path, line, "empty image_id"));
    }
    if raw.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(meta_error(
            path,
            line,
            format!("image_id {raw:?} contains whitespace or control characters"),
        ));
    }
    Ok(raw.to_string())
}

fn read_metadata(path: &Path, expected: usize) -> Result<Vec<ImageMeta>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| meta_error(path, 0, e.to_string()))?;
    {
        let headers = reader
            .headers()
            .map_err(|e| meta_error(path, 1, e.to_string()))?;
        let expected_header = ["image_id", "camera_id", "tracklet_id", "identity", "view"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected_header {
            return Err(meta_error(
                path,
                1,
                format!("header must be {expected_header:?}, got {got:?}"),
            ));
        }
    }
    let mut metas = Vec::with_capacity(expected);
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| meta_error(path, line, e.to_string()))?;
        if record.len() != 5 {
            return Err(meta_error(
                path,
                line,
                format!("expected 5 fields, got {}", record.len()),
            ));
        }
        let image_id = parse_image_id(&record[0], path, line)?;
        let camera_id: u32 = record[1]
            .parse()
            .map_err(|_| meta_error(path, line, format!("invalid camera_id {:?}", &record[1])))?;
        let tracklet_id = match record[2].trim() {
            "-1" => None,
            raw => Some(
                raw.parse::<u32>()
                    .map_err(|_| meta_error(path, line, format!("invalid tracklet_id {raw:?}")))?,
            ),
        };
        let identity = match record[3].trim() {
            "" => None,
            raw => Some(
                raw.parse::<u32>()
                    .map_err(|_| meta_error(path, line, format!("invalid identity {raw:?}")))?,
            ),
        };
        let view = View::parse(&record[4])
            .ok_or_else(|| meta_error(path, line, format!("invalid view {:?}", &record[4])))?;
        metas.push(ImageMeta {
            image_id,
            camera_id,
            tracklet_id,
            identity,
            view,
        });
    }
    Ok(metas)
}

/// Read and validate a feature set plus metadata from a manifest.
///
/// Row `i` of the returned matrix corresponds to metadata record `i`.
/// Any invariant violation is a hard error: byte-length mismatch,
/// non-finite values (reported with indices), duplicate `(image_id, view)`
/// pairs, or a tracklet spanning two cameras.
pub fn ingest(manifest_path: &Path) -> Result<(FeatureSet, Vec<ImageMeta>)> {
    let manifest = read_manifest(manifest_path)?;
    let data_path = resolve(manifest_path, &manifest.data);
    let meta_path = resolve(manifest_path, &manifest.meta);

    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = manifest.count as u64 * manifest.dim as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(manifest.count * manifest.dim);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let fs = FeatureSet::from_vec(data, manifest.dim)?;

    let metas = read_metadata(&meta_path, manifest.count)?;
    validate_pair(&fs, &metas)?;
    Ok((fs, metas))
}

/// Write a feature set plus metadata next to `manifest_path`.
///
/// The data and metadata files take the manifest's file stem with `.bin`
/// and `.csv` extensions. `ingest(export(x)) == x`, bit-exact on the
/// matrix payload.
pub fn export(fs: &FeatureSet, metas: &[ImageMeta], manifest_path: &Path) -> Result<Manifest> {
    validate_pair(fs, metas)?;
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| manifest_error(manifest_path, "manifest path has no file stem"))?;
    let data_name = format!("{stem}.bin");
    let meta_name = format!("{stem}.csv");
    let manifest = Manifest {
        dim: fs.dim(),
        count: fs.count(),
        dtype: "f32le".into(),
        order: "row_major".into(),
        data: data_name.clone(),
        meta: meta_name.clone(),
    };

    let mut bytes = Vec::with_capacity(fs.data().len() * 4);
    for &v in fs.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let data_path = resolve(manifest_path, &data_name);
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;

    let meta_path = resolve(manifest_path, &meta_name);
    let mut writer =
        csv::Writer::from_path(&meta_path).map_err(|e| meta_error(&meta_path, 0, e.to_string()))?;
    writer
        .write_record(["image_id", "camera_id", "tracklet_id", "identity", "view"])
        .map_err(|e| meta_error(&meta_path, 1, e.to_string()))?;
    for (i, meta) in metas.iter().enumerate() {
        let tracklet = meta
            .tracklet_id
            .map(|t| t.to_string())
            .unwrap_or_else(|| "-1".into());
        let identity = meta.identity.map(|v| v.to_string()).unwrap_or_default();
        writer
            .write_record([
                meta.image_id.as_str(),
                &meta.camera_id.to_string(),
                &tracklet,
                &identity,
                meta.view.as_str(),
            ])
            .map_err(|e| meta_error(&meta_path, i + 2, e.to_string()))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(&meta_path, std::io::Error::other(e)))?;

    let text =
        toml::to_string(&manifest).map_err(|e| manifest_error(manifest_path, e.to_string()))?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use tempfile::TempDir;

    fn meta(id: &str, cam: u32, tracklet: Option<u32>, identity: Option<u32>) -> ImageMeta {
        ImageMeta {
            image_id: id.into(),
            camera_id: cam,
            tracklet_id: tracklet,
            identity,
            view: View::Original,
        }
    }

    fn write_manifest(
        dir: &Path,
        dim: usize,
        count: usize,
        data: &[u8],
        meta_rows: &str,
    ) -> PathBuf {
        let manifest_path = dir.join("set.toml");
        fs::write(dir.join("set.bin"), data).unwrap();
        fs::write(
            dir.join("set.csv"),
            format!("image_id,camera_id,tracklet_id,identity,view\n{meta_rows}"),
        )
        .unwrap();
        fs::write(
            &manifest_path,
            format!(
                "dim = {dim}\ncount = {count}\ndtype = \"f32le\"\norder = \"row_major\"\ndata = \"set.bin\"\nmeta = \"set.csv\"\n"
            ),
        )
        .unwrap();
        manifest_path
    }

    #[test]
    fn ingest_empty_set() {
        let dir = TempDir::new().unwrap();
        let path = write_manifest(dir.path(), 128, 0, &[], "");
        let (fs, metas) = ingest(&path).unwrap();
        assert_eq!(fs.count(), 0);
        assert_eq!(fs.dim(), 128);
        assert!(metas.is_empty());
    }

    #[test]
    fn ingest_echoes_known_bytes_bit_exactly() {
        let source: [f32; 12] = [
            1.0, -2.5, 3.25, 0.0, 4.5, -5.0, 6.125, 7.0, -8.75, 9.0, 10.5, -11.0,
        ];
        let mut bytes = Vec::new();
        for v in source {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let dir = TempDir::new().unwrap();
        let rows = "a,0,-1,,original\nb,0,-1,,original\nc,1,-1,,original\n";
        let path = write_manifest(dir.path(), 4, 3, &bytes, rows);
        let (fs, metas) = ingest(&path).unwrap();
        assert_eq!(fs.count(), 3);
        assert_eq!(metas.len(), 3);
        for (got, want) in fs.data().iter().zip(source.iter()) {
            assert_eq!(got.to_bits(), want.to_bits());
        }
        assert_eq!(metas[2].camera_id, 1);
        assert_eq!(metas[0].tracklet_id, None);
    }

    #[test]
    fn ingest_reports_size_mismatch() {
        let dir = TempDir::new().unwrap();
        let bytes = vec![0u8; 48];
        let rows = "a,0,-1,,original\nb,0,-1,,original\n";
        let path = write_manifest(dir.path(), 4, 2, &bytes, rows);
        match ingest(&path) {
            Err(Error::SizeMismatch { expected, actual }) => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 48);
            }
            other => panic!("expected SizeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn ingest_reports_non_finite_with_indices() {
        let dir = TempDir::new().unwrap();
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, f32::NAN, 4.0, 5.0, 6.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let rows = "a,0,-1,,original\nb,0,-1,,original\n";
        let path = write_manifest(dir.path(), 3, 2, &bytes, rows);
        match ingest(&path) {
            Err(Error::NonFinite { row, col }) => {
                assert_eq!((row, col), (0, 2));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_duplicate_image_view() {
        let dir = TempDir::new().unwrap();
        let bytes = vec![0u8; 16];
        // Same id twice with the same view; same id with a new view is fine.
        let rows = "a,0,-1,,original\na,0,-1,,original\n";
        let path = write_manifest(dir.path(), 2, 2, &bytes, rows);
        assert!(matches!(ingest(&path), Err(Error::DuplicateImage { .. })));
    }

    #[test]
    fn same_id_different_view_is_allowed() {
        let dir = TempDir::new().unwrap();
        let mut bytes = Vec::new();
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let rows = "a,0,-1,,original\na,0,-1,,cropped\n";
        let path = write_manifest(dir.path(), 2, 2, &bytes, rows);
        let (_, metas) = ingest(&path).unwrap();
        assert_eq!(metas[1].view, View::Cropped);
    }

    #[test]
    fn ingest_rejects_tracklet_spanning_cameras() {
        let dir = TempDir::new().unwrap();
        let bytes = vec![0u8; 16];
        let rows = "a,0,7,,original\nb,1,7,,original\n";
        let path = write_manifest(dir.path(), 2, 2, &bytes, rows);
        match ingest(&path) {
            Err(Error::TrackletCameraConflict {
                tracklet,
                camera_a,
                camera_b,
            }) => {
                assert_eq!(tracklet, 7);
                assert_eq!((camera_a, camera_b), (0, 1));
            }
            other => panic!("expected TrackletCameraConflict, got {other:?}"),
        }
    }

    #[test]
    fn export_rejects_length_mismatch() {
        let dir = TempDir::new().unwrap();
        let fs = FeatureSet::from_vec(vec![1.0; 6], 2).unwrap();
        let metas = vec![meta("a", 0, None, None), meta("b", 0, None, None)];
        match export(&fs, &metas, &dir.path().join("out.toml")) {
            Err(Error::LengthMismatch { features, metas }) => {
                assert_eq!((features, metas), (3, 2));
            }
            other => panic!("expected LengthMismatch, got {other:?}"),
        }
    }

    #[test]
    fn export_empty_set_roundtrips() {
        let dir = TempDir::new().unwrap();
        let fs = FeatureSet::from_vec(Vec::new(), 16).unwrap();
        let path = dir.path().join("empty.toml");
        let manifest = export(&fs, &[], &path).unwrap();
        assert_eq!(manifest.count, 0);
        let (back, metas) = ingest(&path).unwrap();
        assert_eq!(back.count(), 0);
        assert!(metas.is_empty());
    }

    #[test]
    fn export_ingest_roundtrip_is_identity() {
        let mut rng = StdRng::seed_from_u64(11);
        let dim = 16;
        let count = 10;
        let data: Vec<f32> = (0..dim * count)
            .map(|_| rng.random_range(-3.0f32..3.0))
            .collect();
        let fs = FeatureSet::from_vec(data, dim).unwrap();
        let metas: Vec<ImageMeta> = (0..count)
            .map(|i| {
                meta(
                    &format!("img{i:03}"),
                    (i % 3) as u32,
                    if i % 4 == 0 {
                        None
                    } else {
                        Some((i / 2) as u32 * 3)
                    },
                    if i % 2 == 0 { Some(i as u32) } else { None },
                )
            })
            .collect();
        // Keep tracklets camera-consistent.
        let mut metas = metas;
        for m in &mut metas {
            if let Some(t) = m.tracklet_id {
                m.camera_id = t % 3;
            }
        }
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("rt.toml");
        export(&fs, &metas, &path).unwrap();
        let (back_fs, back_metas) = ingest(&path).unwrap();
        assert_eq!(back_metas, metas);
        assert_eq!(back_fs.data().len(), fs.data().len());
        for (a, b) in back_fs.data().iter().zip(fs.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ingest_detects_unit_rows() {
        let dir = TempDir::new().unwrap();
        let mut bytes = Vec::new();
        for v in [0.6f32, 0.8, 1.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let rows = "a,0,-1,,original\nb,0,-1,,original\n";
        let path = write_manifest(dir.path(), 2, 2, &bytes, rows);
        let (fs, _) = ingest(&path).unwrap();
        assert!(fs.is_normalized());
    }

    #[test]
    fn missing_data_file_is_io_error() {
        let dir = TempDir::new().unwrap();
        let manifest_path = dir.path().join("gone.toml");
        fs::write(
            &manifest_path,
            "dim = 4\ncount = 1\ndtype = \"f32le\"\norder = \"row_major\"\ndata = \"missing.bin\"\nmeta = \"missing.csv\"\n",
        )
        .unwrap();
        assert!(matches!(ingest(&manifest_path), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_rejects_wrong_dtype() {
        let dir = TempDir::new().unwrap();
        let manifest_path = dir.path().join("bad.toml");
        fs::write(
            &manifest_path,
            "dim = 4\ncount = 0\ndtype = \"f64le\"\norder = \"row_major\"\ndata = \"x.bin\"\nmeta = \"x.csv\"\n",
        )
        .unwrap();
        assert!(matches!(
            ingest(&manifest_path),
            Err(Error::Manifest { .. })
        ));
    }
}
