//! On-disk dataset container.
//!
//! Layout: `manifest.json` plus one raw array file per sample tensor under
//! `samples/`. Array files carry an 8-byte magic, a format version, and an
//! explicit shape header; payloads are little-endian IEEE-754 float32, so
//! round-trips are bit-exact and portable across languages.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use super::{Dataset, DatasetManifest, RainRateField, Sample, SpectralSequence};
use crate::error::CoreError;
use crate::Result;

/// Magic prefix of every raw array file.
pub const MAGIC: &[u8; 8] = b"NWCARRAY";
/// Array container version.
pub const ARRAY_VERSION: u32 = 1;

pub fn write_array(path: &Path, array: &ArrayViewD<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + array.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
    buf.push(array.ndim() as u8);
    for &d in array.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in array.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn read_array(path: &Path) -> Result<ArrayD<f32>> {
    let mut file =
        fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let name = path.display();

    if bytes.len() < 13 {
        return Err(CoreError::format(format!("{name}: truncated header")));
    }
    if &bytes[0..8] != MAGIC {
        return Err(CoreError::format(format!("{name}: bad magic")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != ARRAY_VERSION {
        return Err(CoreError::format(format!(
            "{name}: unsupported array version {version}, expected {ARRAY_VERSION}"
        )));
    }
    let ndim = bytes[12] as usize;
    let header_len = 13 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(CoreError::format(format!("{name}: truncated shape header")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 13 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let expected: usize = shape.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() != expected * 4 {
        return Err(CoreError::format(format!(
            "{name}: payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            expected * 4
        )));
    }
    let mut data = Vec::with_capacity(expected);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| CoreError::format(format!("{name}: {e}")))
}

fn sample_stem(manifest: &DatasetManifest, region_id: u32, year: i32, sample_id: u32) -> String {
    let name = manifest
        .profile(region_id)
        .map(|p| sanitize(&p.name))
        .unwrap_or_else(|| format!("r{region_id:02}"));
    format!("{name}_{year}_{sample_id:05}")
}

fn sanitize(name: &str) -> String {
    let clean: String = name
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '-')
        .collect();
    if clean.is_empty() {
        "region".to_string()
    } else {
        clean
    }
}

/// Writes a dataset directory atomically (temp dir, then rename).
///
/// Fails if `path` already exists.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.manifest.validate()?;
    if path.exists() {
        return Err(CoreError::invalid(format!(
            "dataset destination {} already exists",
            path.display()
        )));
    }
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| CoreError::io(parent.display().to_string(), e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".dataset-tmp")
        .tempdir_in(parent)
        .map_err(|e| CoreError::io(parent.display().to_string(), e))?;

    let manifest_json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| CoreError::format(format!("manifest serialization: {e}")))?;
    let manifest_path = tmp.path().join("manifest.json");
    let mut f = fs::File::create(&manifest_path)
        .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?;
    f.write_all(manifest_json.as_bytes())
        .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?;

    let samples_dir = tmp.path().join("samples");
    fs::create_dir(&samples_dir)
        .map_err(|e| CoreError::io(samples_dir.display().to_string(), e))?;
    for sample in &dataset.samples {
        let stem = sample_stem(&dataset.manifest, sample.region_id, sample.year, sample.sample_id);
        write_array(
            &samples_dir.join(format!("{stem}.x")),
            &sample.x.values.view().into_dyn(),
        )?;
        write_array(
            &samples_dir.join(format!("{stem}.rate")),
            &sample.rates.rates.view().into_dyn(),
        )?;
    }

    let tmp_path: PathBuf = tmp.keep();
    fs::rename(&tmp_path, path).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Reads a dataset directory back, validating dims against the manifest.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = path.join("manifest.json");
    let manifest_json = fs::read_to_string(&manifest_path)
        .map_err(|e| CoreError::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_json)
        .map_err(|e| CoreError::format(format!("manifest.json: {e}")))?;
    manifest.validate()?;

    let dims = manifest.dims;
    let x_shape = [dims.channels, dims.t_in, dims.height, dims.width];
    let rate_shape = [dims.t_out, dims.out_height, dims.out_width];

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for key in &manifest.samples {
        let stem = sample_stem(&manifest, key.region_id, key.year, key.sample_id);
        let x_path = path.join("samples").join(format!("{stem}.x"));
        let x = read_array(&x_path)?;
        if x.shape() != x_shape {
            return Err(CoreError::format(format!(
                "{}: shape {:?} does not match manifest dims {:?}",
                x_path.display(),
                x.shape(),
                x_shape
            )));
        }
        let rate_path = path.join("samples").join(format!("{stem}.rate"));
        let rates = read_array(&rate_path)?;
        if rates.shape() != rate_shape {
            return Err(CoreError::format(format!(
                "{}: shape {:?} does not match manifest dims {:?}",
                rate_path.display(),
                rates.shape(),
                rate_shape
            )));
        }
        samples.push(Sample {
            region_id: key.region_id,
            year: key.year,
            sample_id: key.sample_id,
            x: SpectralSequence::new(x.into_dimensionality().expect("checked 4d shape"))?,
            rates: RainRateField::new(rates.into_dimensionality().expect("checked 3d shape"))?,
        });
    }
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{default_profiles, generate_dataset, GridDims};

    fn tiny_dataset() -> Dataset {
        let dims = GridDims {
            t_out: 4,
            ..GridDims::with_spatial(8, 8)
        };
        generate_dataset(5, &default_profiles(2), &[2019, 2020], 2, &dims, 0.2).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dataset = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ds");
        write_dataset(&dataset, &target).unwrap();
        let back = read_dataset(&target).unwrap();
        assert_eq!(back.manifest, dataset.manifest);
        assert_eq!(back.samples.len(), dataset.samples.len());
        for (a, b) in dataset.samples.iter().zip(back.samples.iter()) {
            assert_eq!(a.x.values, b.x.values);
            assert_eq!(a.rates.rates, b.rates.rates);
            assert_eq!((a.region_id, a.year, a.sample_id), (b.region_id, b.year, b.sample_id));
        }
    }

    #[test]
    fn truncated_array_file_is_a_format_error() {
        let dataset = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ds");
        write_dataset(&dataset, &target).unwrap();
        let victim = fs::read_dir(target.join("samples"))
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path();
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(&target) {
            Err(CoreError::Format(msg)) => assert!(msg.contains("payload"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn dim_mismatch_is_a_format_error_naming_the_file() {
        let dataset = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ds");
        write_dataset(&dataset, &target).unwrap();
        // Corrupt the manifest dims so every array mismatches.
        let manifest_path = target.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap();
        let text = text.replace("\"height\": 8", "\"height\": 16");
        fs::write(&manifest_path, text).unwrap();
        match read_dataset(&target) {
            Err(CoreError::Format(msg)) => {
                assert!(msg.contains("does not match manifest dims"), "{msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dataset = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ds");
        write_dataset(&dataset, &target).unwrap();
        let manifest_path = target.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).unwrap();
        let text = text.replace("\"format_version\": \"1\"", "\"format_version\": \"99\"");
        fs::write(&manifest_path, text).unwrap();
        match read_dataset(&target) {
            Err(CoreError::Format(msg)) => assert!(msg.contains("format_version"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn refuses_to_overwrite_existing_dataset() {
        let dataset = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("ds");
        write_dataset(&dataset, &target).unwrap();
        assert!(write_dataset(&dataset, &target).is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.x");
        fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00\x01\x01\x00\x00\x00").unwrap();
        match read_array(&path) {
            Err(CoreError::Format(msg)) => assert!(msg.contains("bad magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
