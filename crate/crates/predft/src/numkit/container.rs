use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::{invalid, Result};

/// Tensor container directory: `manifest.json` listing entries plus one raw
/// little-endian f64 binary file per tensor.
#[derive(Serialize, Deserialize)]
struct ContainerManifest {
    entries: Vec<ContainerEntry>,
}

#[derive(Serialize, Deserialize)]
struct ContainerEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    file: String,
}

fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

/// Writes tensors into `dir`, creating it if needed. Entries are sorted by
/// name so identical inputs produce byte-identical directories.
pub fn write_tensors(dir: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut sorted: Vec<&(String, &Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut entries = Vec::with_capacity(sorted.len());
    for (name, tensor) in &sorted {
        let file = file_name_for(name);
        let mut bytes = Vec::with_capacity(tensor.numel() * 8);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(dir.join(&file))?.write_all(&bytes)?;
        entries.push(ContainerEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = ContainerManifest { entries };
    let json = serde_json::to_string_pretty(&serde_json::to_value(&manifest)?)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Loads every tensor in the container, validating dtype and that
/// `product(shape) * 8` matches the file size.
pub fn read_tensors(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let manifest: ContainerManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut out = BTreeMap::new();
    for entry in manifest.entries {
        if entry.dtype != "f64" {
            return invalid(format!("container: unsupported dtype {}", entry.dtype));
        }
        let path = dir.join(&entry.file);
        let numel: usize = entry.shape.iter().product();
        let expected = numel * 8;
        let meta = fs::metadata(&path)?;
        if meta.len() as usize != expected {
            return invalid(format!(
                "container: {} has {} bytes, shape {:?} requires {expected}",
                entry.file,
                meta.len(),
                entry.shape,
            ));
        }
        let mut bytes = Vec::with_capacity(expected);
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(entry.name.clone(), Tensor::new(entry.shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_rows(&[vec![1.5, -2.25], vec![0.1, 3.0]]).unwrap();
        let b = Tensor::scalar(0.123456789012345678).unwrap();
        write_tensors(dir.path(), &[("alpha".into(), &a), ("beta".into(), &b)]).unwrap();
        let back = read_tensors(dir.path()).unwrap();
        assert_eq!(back["alpha"], a);
        assert_eq!(back["beta"].data()[0].to_bits(), b.data()[0].to_bits());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        write_tensors(dir.path(), &[("t".into(), &a)]).unwrap();
        fs::write(dir.path().join("t.bin"), [0u8; 8]).unwrap();
        assert!(read_tensors(dir.path()).is_err());
    }
}
