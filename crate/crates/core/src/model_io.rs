//! Directory containers for weight tensors and quantized artifacts.
//!
//! Source models are `manifest.json` plus one raw little-endian `f32` blob per
//! tensor. Quantized output is `quantized_manifest.json`, a little-endian
//! `i32` codes blob and `f32` scales blob per tensor, and `report.json`.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{QuantReport, QuantizedTensor};
use crate::error::{Error, Result};
use crate::quant::{LayerKind, Mode, QuantGrid, WeightTensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARTIFACT_MANIFEST_FILE: &str = "quantized_manifest.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "i32")]
    I32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrder {
    #[serde(rename = "little-endian")]
    LittleEndian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub layer_kind: LayerKind,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data_file: String,
    pub byte_order: ByteOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactManifest {
    pub format_version: u32,
    pub tensors: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactEntry {
    pub name: String,
    pub layer_kind: LayerKind,
    pub shape: Vec<usize>,
    pub bit_width: u32,
    pub mode: Mode,
    pub codes_file: String,
    pub codes_dtype: Dtype,
    pub scales_file: String,
    pub scales_dtype: Dtype,
    pub byte_order: ByteOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format_version: u32,
    pub tensors: Vec<QuantReport>,
}

/// Stored form of one quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedArtifact {
    pub name: String,
    pub layer_kind: LayerKind,
    pub shape: [usize; 4],
    pub bit_width: u32,
    pub mode: Mode,
    pub codes: Vec<i32>,
    pub scales: Vec<f32>,
    pub report: QuantReport,
}

impl QuantizedArtifact {
    pub fn from_quantized(q: &QuantizedTensor) -> Self {
        Self {
            name: q.source.name.clone(),
            layer_kind: q.source.kind,
            shape: q.source.shape(),
            bit_width: q.config.grid.bits(),
            mode: q.config.mode,
            codes: q.codes.clone(),
            scales: q.scales.iter().map(|&s| s as f32).collect(),
            report: q.report.clone(),
        }
    }

    pub fn grid(&self) -> Result<QuantGrid> {
        QuantGrid::new(self.bit_width).map_err(|e| self.invariant(e.to_string()))
    }

    fn invariant(&self, message: String) -> Error {
        Error::Invariant {
            tensor: self.name.clone(),
            message,
        }
    }

    /// Shape, length and scale checks; codes may still lie off-grid.
    pub fn validate_structure(&self) -> Result<()> {
        self.grid()?;
        if self.shape.contains(&0) {
            return Err(self.invariant(format!("zero dimension in shape {:?}", self.shape)));
        }
        let count: usize = self.shape.iter().product();
        if self.codes.len() != count {
            return Err(self.invariant(format!(
                "{} codes for shape {:?} ({count} expected)",
                self.codes.len(),
                self.shape
            )));
        }
        if self.scales.len() != self.shape[0] {
            return Err(self.invariant(format!(
                "{} scales for {} output channels",
                self.scales.len(),
                self.shape[0]
            )));
        }
        if let Some(m) = self.scales.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(self.invariant(format!(
                "scale of channel {m} is {} (must be finite and positive)",
                self.scales[m]
            )));
        }
        Ok(())
    }

    /// Full invariant check, including every code lying on the grid.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        let grid = self.grid()?;
        if let Some(pos) = self.codes.iter().position(|&c| !grid.contains(c)) {
            let per_channel = self.codes.len() / self.shape[0];
            return Err(self.invariant(format!(
                "code {} at flat index {pos} (channel {}) outside [{}, {}]",
                self.codes[pos],
                pos / per_channel,
                grid.min(),
                grid.max()
            )));
        }
        Ok(())
    }

    pub fn dequantize(&self) -> Result<Vec<f64>> {
        let scales: Vec<f64> = self.scales.iter().map(|&s| f64::from(s)).collect();
        crate::quant::dequantize(&self.codes, &scales)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, file_label: &str) -> Result<T> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Schema {
                path: file_label.to_string(),
                message: format!("{} not found", path.display()),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: format!("{file_label}:{}", e.path()),
        message: e.inner().to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn schema(path: String, message: impl Into<String>) -> Error {
    Error::Schema {
        path,
        message: message.into(),
    }
}

/// Blob paths must stay inside the container directory.
fn check_relative(file: &str, path: String) -> Result<()> {
    let p = Path::new(file);
    let ok = !file.is_empty()
        && p.components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if ok {
        Ok(())
    } else {
        Err(schema(path, format!("`{file}` is not a relative path inside the container")))
    }
}

fn check_shape(shape: &[usize], kind: LayerKind, path: String) -> Result<[usize; 4]> {
    let arr: [usize; 4] = shape
        .try_into()
        .map_err(|_| schema(path.clone(), format!("expected 4 entries [M, N, KH, KW], got {}", shape.len())))?;
    if arr.contains(&0) {
        return Err(schema(path, "shape entries must be at least 1"));
    }
    if kind == LayerKind::Fc && (arr[2] != 1 || arr[3] != 1) {
        return Err(schema(path, "fc tensors need KH = KW = 1"));
    }
    Ok(arr)
}

fn read_blob(dir: &Path, file: &str, tensor: &str, expected_len: usize) -> Result<Vec<u8>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::Integrity {
        tensor: tensor.to_string(),
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    if bytes.len() != expected_len {
        return Err(Error::Integrity {
            tensor: tensor.to_string(),
            message: format!(
                "{} holds {} bytes, shape requires {expected_len}",
                path.display(),
                bytes.len()
            ),
        });
    }
    Ok(bytes)
}

fn f32_from_le(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn i32_from_le(bytes: &[u8]) -> impl Iterator<Item = i32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Load every tensor listed in `dir/manifest.json`, widening to `f64`.
pub fn load_model(dir: impl AsRef<Path>) -> Result<Vec<WeightTensor>> {
    let dir = dir.as_ref();
    let manifest: TensorManifest = read_json(&dir.join(MANIFEST_FILE), MANIFEST_FILE)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(schema(
            format!("{MANIFEST_FILE}:format_version"),
            format!("unsupported version {} (expected {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    let mut names = HashSet::new();
    let mut shapes = Vec::with_capacity(manifest.tensors.len());
    for (idx, entry) in manifest.tensors.iter().enumerate() {
        let at = |field: &str| format!("{MANIFEST_FILE}:tensors[{idx}].{field}");
        if !names.insert(entry.name.as_str()) {
            return Err(schema(at("name"), format!("duplicate tensor name `{}`", entry.name)));
        }
        if entry.dtype != Dtype::F32 {
            return Err(schema(at("dtype"), "weights must be f32"));
        }
        check_relative(&entry.data_file, at("data_file"))?;
        shapes.push(check_shape(&entry.shape, entry.layer_kind, at("shape"))?);
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for (entry, shape) in manifest.tensors.iter().zip(shapes) {
        let count: usize = shape.iter().product();
        let bytes = read_blob(dir, &entry.data_file, &entry.name, 4 * count)?;
        let data: Vec<f64> = f32_from_le(&bytes).map(f64::from).collect();
        let tensor = WeightTensor::new(entry.name.clone(), entry.layer_kind, shape, data)
            .map_err(|e| Error::Integrity {
                tensor: entry.name.clone(),
                message: e.to_string(),
            })?;
        tensors.push(tensor);
    }
    Ok(tensors)
}

fn blob_stem(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:04}_{clean}")
}

/// Write tensors as a source model. Weights are narrowed to `f32`.
pub fn save_model(dir: impl AsRef<Path>, tensors: &[WeightTensor]) -> Result<()> {
    let dir = dir.as_ref();
    let mut names = HashSet::new();
    for t in tensors {
        if !names.insert(t.name.as_str()) {
            return Err(Error::Validation(format!("duplicate tensor name `{}`", t.name)));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (idx, t) in tensors.iter().enumerate() {
        let data_file = format!("{}.f32.bin", blob_stem(idx, &t.name));
        let bytes: Vec<u8> = t
            .data
            .iter()
            .flat_map(|&w| (w as f32).to_le_bytes())
            .collect();
        let path = dir.join(&data_file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: t.name.clone(),
            layer_kind: t.kind,
            shape: t.shape().to_vec(),
            dtype: Dtype::F32,
            data_file,
            byte_order: ByteOrder::LittleEndian,
        });
    }
    write_json(
        &dir.join(MANIFEST_FILE),
        &TensorManifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
        },
    )
}

/// Write quantized artifacts. Nothing is written if any artifact fails
/// validation.
pub fn store_artifact(dir: impl AsRef<Path>, artifacts: &[QuantizedArtifact]) -> Result<()> {
    let dir = dir.as_ref();
    let mut names = HashSet::new();
    for a in artifacts {
        a.validate()?;
        if !names.insert(a.name.as_str()) {
            return Err(Error::Invariant {
                tensor: a.name.clone(),
                message: "duplicate tensor name".into(),
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(artifacts.len());
    for (idx, a) in artifacts.iter().enumerate() {
        let stem = blob_stem(idx, &a.name);
        let codes_file = format!("{stem}.codes.i32.bin");
        let scales_file = format!("{stem}.scales.f32.bin");
        let codes: Vec<u8> = a.codes.iter().flat_map(|c| c.to_le_bytes()).collect();
        let scales: Vec<u8> = a.scales.iter().flat_map(|s| s.to_le_bytes()).collect();
        for (file, bytes) in [(&codes_file, codes), (&scales_file, scales)] {
            let path = dir.join(file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        entries.push(ArtifactEntry {
            name: a.name.clone(),
            layer_kind: a.layer_kind,
            shape: a.shape.to_vec(),
            bit_width: a.bit_width,
            mode: a.mode,
            codes_file,
            codes_dtype: Dtype::I32,
            scales_file,
            scales_dtype: Dtype::F32,
            byte_order: ByteOrder::LittleEndian,
        });
    }
    write_json(
        &dir.join(ARTIFACT_MANIFEST_FILE),
        &ArtifactManifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
        },
    )?;
    write_json(
        &dir.join(REPORT_FILE),
        &ReportFile {
            format_version: FORMAT_VERSION,
            tensors: artifacts.iter().map(|a| a.report.clone()).collect(),
        },
    )
}

/// Load quantized artifacts with structural validation only, so that a
/// verifier can still inspect off-grid codes.
pub fn load_artifact(dir: impl AsRef<Path>) -> Result<Vec<QuantizedArtifact>> {
    let dir = dir.as_ref();
    let manifest: ArtifactManifest =
        read_json(&dir.join(ARTIFACT_MANIFEST_FILE), ARTIFACT_MANIFEST_FILE)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(schema(
            format!("{ARTIFACT_MANIFEST_FILE}:format_version"),
            format!("unsupported version {}", manifest.format_version),
        ));
    }
    let report: ReportFile = read_json(&dir.join(REPORT_FILE), REPORT_FILE)?;
    let mut names = HashSet::new();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for (idx, entry) in manifest.tensors.into_iter().enumerate() {
        let at = |field: &str| format!("{ARTIFACT_MANIFEST_FILE}:tensors[{idx}].{field}");
        if !names.insert(entry.name.clone()) {
            return Err(schema(at("name"), format!("duplicate tensor name `{}`", entry.name)));
        }
        if entry.codes_dtype != Dtype::I32 {
            return Err(schema(at("codes_dtype"), "codes must be i32"));
        }
        if entry.scales_dtype != Dtype::F32 {
            return Err(schema(at("scales_dtype"), "scales must be f32"));
        }
        check_relative(&entry.codes_file, at("codes_file"))?;
        check_relative(&entry.scales_file, at("scales_file"))?;
        let shape = check_shape(&entry.shape, entry.layer_kind, at("shape"))?;
        let count: usize = shape.iter().product();
        let codes = i32_from_le(&read_blob(dir, &entry.codes_file, &entry.name, 4 * count)?).collect();
        let scales = f32_from_le(&read_blob(dir, &entry.scales_file, &entry.name, 4 * shape[0])?).collect();
        let tensor_report = report
            .tensors
            .iter()
            .find(|r| r.name == entry.name)
            .cloned()
            .ok_or_else(|| schema(format!("{REPORT_FILE}:tensors"), format!("no report for `{}`", entry.name)))?;
        let artifact = QuantizedArtifact {
            name: entry.name,
            layer_kind: entry.layer_kind,
            shape,
            bit_width: entry.bit_width,
            mode: entry.mode,
            codes,
            scales,
            report: tensor_report,
        };
        artifact.validate_structure()?;
        out.push(artifact);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::squant_tensor;
    use crate::quant::QuantConfig;

    fn write_manifest(dir: &Path, json: &str) {
        fs::write(dir.join(MANIFEST_FILE), json).unwrap();
    }

    fn conv_manifest(file: &str) -> String {
        format!(
            r#"{{"format_version":1,"tensors":[{{"name":"c","layer_kind":"conv","shape":[2,1,3,3],"dtype":"f32","data_file":"{file}","byte_order":"little-endian"}}]}}"#
        )
    }

    #[test]
    fn loads_conv_tensor() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &conv_manifest("c.bin"));
        let bytes: Vec<u8> = (0..18).flat_map(|i| (i as f32 * 0.5).to_le_bytes()).collect();
        assert_eq!(bytes.len(), 72);
        fs::write(dir.path().join("c.bin"), bytes).unwrap();
        let t = load_model(dir.path()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].m, t[0].n, t[0].k()), (2, 1, 9));
        assert_eq!(t[0].data[17], 8.5);
    }

    #[test]
    fn loads_fc_tensor() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(
            dir.path(),
            r#"{"format_version":1,"tensors":[{"name":"fc","layer_kind":"fc","shape":[10,4,1,1],"dtype":"f32","data_file":"fc.bin","byte_order":"little-endian"}]}"#,
        );
        fs::write(dir.path().join("fc.bin"), vec![0u8; 160]).unwrap();
        let t = load_model(dir.path()).unwrap();
        assert_eq!((t[0].m, t[0].n, t[0].k()), (10, 4, 1));
    }

    #[test]
    fn short_blob_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &conv_manifest("c.bin"));
        fs::write(dir.path().join("c.bin"), vec![0u8; 71]).unwrap();
        match load_model(dir.path()) {
            Err(Error::Integrity { tensor, .. }) => assert_eq!(tensor, "c"),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn schema_errors_carry_field_path() {
        let dir = tempfile::tempdir().unwrap();
        match load_model(dir.path()) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, MANIFEST_FILE),
            other => panic!("{other:?}"),
        }
        write_manifest(
            dir.path(),
            r#"{"format_version":1,"tensors":[{"name":"c","layer_kind":"conv","shape":[2,1,3,3],"dtype":"f16","data_file":"c.bin","byte_order":"little-endian"}]}"#,
        );
        match load_model(dir.path()) {
            Err(Error::Schema { path, .. }) => assert!(path.ends_with("tensors[0].dtype"), "{path}"),
            other => panic!("{other:?}"),
        }
        write_manifest(
            dir.path(),
            r#"{"format_version":1,"tensors":[{"name":"c","layer_kind":"conv","shape":[2,0,3],"dtype":"f32","data_file":"c.bin","byte_order":"little-endian"}]}"#,
        );
        match load_model(dir.path()) {
            Err(Error::Schema { path, .. }) => assert!(path.ends_with("tensors[0].shape"), "{path}"),
            other => panic!("{other:?}"),
        }
        write_manifest(dir.path(), "{not json");
        assert!(matches!(load_model(dir.path()), Err(Error::Schema { .. })));
        write_manifest(dir.path(), &conv_manifest("../escape.bin"));
        assert!(matches!(load_model(dir.path()), Err(Error::Schema { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(
            dir.path(),
            r#"{"format_version":1,"tensors":[
              {"name":"a","layer_kind":"fc","shape":[1,1,1,1],"dtype":"f32","data_file":"a.bin","byte_order":"little-endian"},
              {"name":"a","layer_kind":"fc","shape":[1,1,1,1],"dtype":"f32","data_file":"b.bin","byte_order":"little-endian"}]}"#,
        );
        match load_model(dir.path()) {
            Err(Error::Schema { path, .. }) => assert!(path.ends_with("tensors[1].name")),
            other => panic!("{other:?}"),
        }
    }

    fn sample_artifact() -> QuantizedArtifact {
        let w: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 13 % 11) as f64 - 5.0) / 4.0).collect();
        let t = WeightTensor::new("layer.0", LayerKind::Conv, [2, 3, 2, 2], w).unwrap();
        let q = squant_tensor(&t, &QuantConfig::new(QuantGrid::new(4).unwrap(), Mode::Ekc)).unwrap();
        QuantizedArtifact::from_quantized(&q)
    }

    #[test]
    fn artifact_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = sample_artifact();
        store_artifact(dir.path(), std::slice::from_ref(&a)).unwrap();
        let back = load_artifact(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].codes, a.codes);
        let bits = |v: &[f32]| v.iter().map(|s| s.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].scales), bits(&a.scales));
        assert_eq!(back[0], a);
    }

    #[test]
    fn empty_artifact_list() {
        let dir = tempfile::tempdir().unwrap();
        store_artifact(dir.path(), &[]).unwrap();
        let manifest: ArtifactManifest =
            serde_json::from_slice(&fs::read(dir.path().join(ARTIFACT_MANIFEST_FILE)).unwrap()).unwrap();
        assert!(manifest.tensors.is_empty());
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 2);
        assert!(load_artifact(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn off_grid_code_refuses_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = sample_artifact();
        a.codes[3] = 8;
        assert!(matches!(
            store_artifact(dir.path().join("out"), &[a]),
            Err(Error::Invariant { .. })
        ));
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn non_positive_scale_refuses_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = sample_artifact();
        a.scales[1] = 0.0;
        assert!(store_artifact(dir.path(), &[a]).is_err());
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = WeightTensor::new(
            "w/odd name",
            LayerKind::Conv,
            [1, 2, 1, 2],
            vec![0.25, -1.5, 3.0, 1e-3f32 as f64],
        )
        .unwrap();
        save_model(dir.path(), std::slice::from_ref(&t)).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), vec![t]);
    }

    #[test]
    fn blobs_are_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let t = WeightTensor::new("x", LayerKind::Fc, [1, 1, 1, 1], vec![1.0]).unwrap();
        save_model(dir.path(), &[t]).unwrap();
        let bytes = fs::read(dir.path().join("0000_x.f32.bin")).unwrap();
        assert_eq!(bytes, vec![0x00, 0x00, 0x80, 0x3f]);
    }
}
