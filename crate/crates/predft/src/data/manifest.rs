use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::numkit::{read_tensors, write_tensors, Tensor};

use super::{invalid, DataError, FmriData, Recording, Result, RoiAtlas};

/// A loaded dataset directory: recordings, atlas, and (when present) the
/// word-embedding table that serves as the activation provider.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tr_seconds: f64,
    pub recordings: Vec<Recording>,
    pub atlas: RoiAtlas,
    pub embeddings: Option<Embeddings>,
}

/// Word-indexed feature table: row i is the embedding of `lexicon[i]`.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub table: Tensor,
    pub lexicon: Vec<String>,
}

impl Dataset {
    pub fn voxels(&self) -> usize {
        self.recordings.first().map(|r| r.fmri.voxels()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.recordings.is_empty() {
            return invalid("dataset: no recordings");
        }
        let voxels = self.voxels();
        for rec in &self.recordings {
            rec.validate()?;
            if rec.fmri.voxels() != voxels {
                return invalid(format!(
                    "dataset: recording {}/{} has {} voxels, expected {voxels}",
                    rec.subject,
                    rec.story,
                    rec.fmri.voxels()
                ));
            }
            if rec.frames() < 2 {
                return invalid(format!(
                    "dataset: recording {}/{} needs at least 2 frames",
                    rec.subject, rec.story
                ));
            }
        }
        self.atlas.validate(voxels)?;
        if let Some(embeddings) = &self.embeddings {
            let (rows, _) = embeddings.table.dims2()?;
            if rows != embeddings.lexicon.len() {
                return invalid(format!(
                    "dataset: embedding table has {rows} rows for {} lexicon words",
                    embeddings.lexicon.len()
                ));
            }
        }
        Ok(())
    }
}

fn tensor_name(rec: &Recording) -> String {
    format!("fmri__{}__{}", rec.subject, rec.story)
}

fn frame_words_file(rec: &Recording) -> String {
    format!("frame_words/{}__{}.json", rec.subject, rec.story)
}

/// Persists the dataset with write-new-then-rename: content is assembled in
/// a temporary sibling and moved into place, so an existing directory is
/// never mutated (and never overwritten).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dir.exists() {
        return invalid(format!("save_dataset: {} already exists", dir.display()));
    }
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".{}.partial",
        dir.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    write_dataset_files(dataset, &tmp)?;
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Writes the dataset files directly into an existing directory (callers
/// handle atomicity).
pub fn write_dataset_files(dataset: &Dataset, tmp: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(tmp.join("frame_words"))?;

    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    let mut recording_entries = Vec::new();
    for rec in &dataset.recordings {
        let (tensor, layout) = match &rec.fmri {
            FmriData::Surface(t) => (t, "surface"),
            FmriData::Volume(t) => (t, "volume"),
        };
        tensors.push((tensor_name(rec), tensor));
        let words_file = frame_words_file(rec);
        let words_json = serde_json::to_string(&rec.frame_words)?;
        fs::write(tmp.join(&words_file), words_json + "\n")?;
        recording_entries.push(json!({
            "subject": rec.subject,
            "story": rec.story,
            "fmri": tensor_name(rec),
            "layout": layout,
            "frame_words": words_file,
        }));
    }

    let mut embeddings_entry = Value::Null;
    if let Some(embeddings) = &dataset.embeddings {
        tensors.push(("embeddings".to_string(), &embeddings.table));
        fs::write(
            tmp.join("lexicon.json"),
            serde_json::to_string(&embeddings.lexicon)? + "\n",
        )?;
        embeddings_entry = json!({ "tensor": "embeddings", "lexicon": "lexicon.json" });
    }
    write_tensors(&tmp.join("tensors"), &tensors)?;

    let mut subjects: Vec<&str> = dataset.recordings.iter().map(|r| r.subject.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut stories: Vec<&str> = dataset.recordings.iter().map(|r| r.story.as_str()).collect();
    stories.sort_unstable();
    stories.dedup();

    // atlas schema: every key except "groups" is a region -> index list
    let mut atlas = serde_json::Map::new();
    for (region, indices) in &dataset.atlas.regions {
        if region == "groups" {
            return invalid("save_dataset: region name 'groups' collides with the schema");
        }
        atlas.insert(region.clone(), json!(indices));
    }
    atlas.insert("groups".to_string(), serde_json::to_value(&dataset.atlas.groups)?);

    let mut manifest = serde_json::Map::new();
    manifest.insert("tr_seconds".into(), json!(dataset.tr_seconds));
    manifest.insert("subjects".into(), json!(subjects));
    manifest.insert("stories".into(), json!(stories));
    manifest.insert("recordings".into(), Value::Array(recording_entries));
    manifest.insert("atlas".into(), Value::Object(atlas));
    if !embeddings_entry.is_null() {
        manifest.insert("embeddings".into(), embeddings_entry);
    }
    // route through Value so keys serialize sorted
    let manifest_value: Value = serde_json::to_value(Value::Object(manifest))?;
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest_value)? + "\n")?;
    Ok(())
}

fn as_str<'v>(v: &'v Value, key: &str) -> Result<&'v str> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| DataError::Invalid(format!("manifest: missing string field {key}")))
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let tr_seconds = manifest
        .get("tr_seconds")
        .and_then(Value::as_f64)
        .ok_or_else(|| DataError::Invalid("manifest: missing tr_seconds".into()))?;
    let tensors = read_tensors(&dir.join("tensors"))?;

    let mut recordings = Vec::new();
    let entries = manifest
        .get("recordings")
        .and_then(Value::as_array)
        .ok_or_else(|| DataError::Invalid("manifest: missing recordings".into()))?;
    for entry in entries {
        let subject = as_str(entry, "subject")?.to_string();
        let story = as_str(entry, "story")?.to_string();
        let tensor_ref = as_str(entry, "fmri")?;
        let layout = as_str(entry, "layout")?;
        let words_file = as_str(entry, "frame_words")?;
        let tensor = tensors
            .get(tensor_ref)
            .ok_or_else(|| DataError::Invalid(format!("manifest: missing tensor {tensor_ref}")))?
            .clone();
        let fmri = match layout {
            "surface" => {
                if tensor.shape().len() != 2 {
                    return invalid(format!(
                        "manifest: surface tensor {tensor_ref} must be 2-D, got {:?}",
                        tensor.shape()
                    ));
                }
                FmriData::Surface(tensor)
            }
            "volume" => {
                if tensor.shape().len() != 4 {
                    return invalid(format!(
                        "manifest: volume tensor {tensor_ref} must be 4-D, got {:?}",
                        tensor.shape()
                    ));
                }
                FmriData::Volume(tensor)
            }
            other => return invalid(format!("manifest: unknown layout {other}")),
        };
        let frame_words: Vec<Vec<String>> =
            serde_json::from_str(&fs::read_to_string(dir.join(words_file))?)?;
        recordings.push(Recording { subject, story, fmri, tr_seconds, frame_words });
    }

    let mut atlas = RoiAtlas::default();
    if let Some(atlas_value) = manifest.get("atlas").and_then(Value::as_object) {
        for (key, value) in atlas_value {
            if key == "groups" {
                atlas.groups = serde_json::from_value(value.clone())?;
            } else {
                atlas.regions.insert(key.clone(), serde_json::from_value(value.clone())?);
            }
        }
    }

    let mut embeddings = None;
    if let Some(entry) = manifest.get("embeddings") {
        let tensor_ref = as_str(entry, "tensor")?;
        let lexicon_file = as_str(entry, "lexicon")?;
        let table = tensors
            .get(tensor_ref)
            .ok_or_else(|| {
                DataError::Invalid(format!("manifest: missing embeddings tensor {tensor_ref}"))
            })?
            .clone();
        let lexicon: Vec<String> =
            serde_json::from_str(&fs::read_to_string(dir.join(lexicon_file))?)?;
        embeddings = Some(Embeddings { table, lexicon });
    }

    let dataset = Dataset { tr_seconds, recordings, atlas, embeddings };
    dataset.validate()?;
    Ok(dataset)
}
