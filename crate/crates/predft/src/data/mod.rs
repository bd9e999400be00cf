//! Dataset model, voxel normalization, ROI extraction, prediction-target
//! construction, leak-free splitting, tokenization, and the synthetic
//! naturalistic-listening generator.

mod manifest;
mod splits;
mod synth;
mod vocab;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::PredictionWindow;
use crate::numkit::{NumError, Tensor};

pub use manifest::{load_dataset, save_dataset, write_dataset_files, Dataset, Embeddings};
pub use splits::{auto_split, make_splits, SplitMode, SplitSpec, SplitViolation, Splits};
pub use synth::{build_synth_dataset, synth_generate, SynthSpec};
pub use vocab::{normalize_word, Vocab, BOS_ID, EOS_ID, PAD_ID, SEP_ID, UNK_ID};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(DataError::Invalid(msg.into()))
}

/// fMRI frame sequence in one of the two supported layouts.
#[derive(Debug, Clone, PartialEq)]
pub enum FmriData {
    /// `[w, h, d, frames]` whole-brain volumes
    Volume(Tensor),
    /// `[voxels, frames]` brain-surface series
    Surface(Tensor),
}

impl FmriData {
    pub fn frames(&self) -> usize {
        match self {
            FmriData::Volume(t) => t.shape()[3],
            FmriData::Surface(t) => t.shape()[1],
        }
    }

    pub fn voxels(&self) -> usize {
        match self {
            FmriData::Volume(t) => t.shape()[..3].iter().product(),
            FmriData::Surface(t) => t.shape()[0],
        }
    }

    /// Flattens volumes to `[voxels, frames]` with row-major voxel indices;
    /// surface data is returned as-is. Row-major `[w,h,d,frames]` storage is
    /// already voxel-major, so this is a pure reshape.
    pub fn to_surface(&self) -> Tensor {
        match self {
            FmriData::Surface(t) => t.clone(),
            FmriData::Volume(t) => {
                let frames = t.shape()[3];
                let voxels: usize = t.shape()[..3].iter().product();
                Tensor::new(vec![voxels, frames], t.data().to_vec()).expect("volume reshape")
            }
        }
    }
}

/// One (subject, story) pair: frames, per-frame word lists, and timing.
#[derive(Debug, Clone)]
pub struct Recording {
    pub subject: String,
    pub story: String,
    pub fmri: FmriData,
    pub tr_seconds: f64,
    pub frame_words: Vec<Vec<String>>,
}

impl Recording {
    pub fn frames(&self) -> usize {
        self.fmri.frames()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tr_seconds <= 0.0 {
            return invalid(format!("recording {}/{}: tr must be positive", self.subject, self.story));
        }
        if self.frame_words.len() != self.frames() {
            return invalid(format!(
                "recording {}/{}: {} frames of fMRI vs {} frames of words",
                self.subject,
                self.story,
                self.frames(),
                self.frame_words.len()
            ));
        }
        Ok(())
    }

    /// Global word index of each frame's anchor (its first word); an empty
    /// frame anchors at the next upcoming word.
    pub fn frame_anchors(&self) -> Vec<usize> {
        let mut anchors = Vec::with_capacity(self.frame_words.len());
        let mut seen = 0;
        for words in &self.frame_words {
            anchors.push(seen);
            seen += words.len();
        }
        anchors
    }

    pub fn all_words(&self) -> Vec<String> {
        self.frame_words.iter().flatten().cloned().collect()
    }
}

/// Named voxel regions plus named groups resolving to unions of regions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoiAtlas {
    pub regions: BTreeMap<String, Vec<usize>>,
    pub groups: BTreeMap<String, Vec<String>>,
}

impl RoiAtlas {
    pub fn validate(&self, voxels: usize) -> Result<()> {
        for (name, indices) in &self.regions {
            if indices.is_empty() {
                return invalid(format!("atlas region {name} is empty"));
            }
            if indices.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!("atlas region {name} must be sorted and duplicate-free"));
            }
            if *indices.last().unwrap() >= voxels {
                return invalid(format!(
                    "atlas region {name} index {} out of range {voxels}",
                    indices.last().unwrap()
                ));
            }
        }
        for (name, members) in &self.groups {
            for m in members {
                if !self.regions.contains_key(m) {
                    return invalid(format!("atlas group {name} references unknown region {m}"));
                }
            }
        }
        Ok(())
    }

    /// Resolves a group name to a sorted, duplicate-free voxel index list.
    /// `Whole` selects every voxel; `Random(seed,n)` draws a deterministic
    /// sample of n voxels.
    pub fn resolve(&self, name: &str, voxels: usize) -> Result<Vec<usize>> {
        if let Some(members) = self.groups.get(name) {
            let mut union: Vec<usize> = members
                .iter()
                .flat_map(|m| self.regions[m].iter().copied())
                .collect();
            union.sort_unstable();
            union.dedup();
            if union.is_empty() {
                return invalid(format!("atlas group {name} resolves to no voxels"));
            }
            return Ok(union);
        }
        if let Some(indices) = self.regions.get(name) {
            return Ok(indices.clone());
        }
        if name == "Whole" {
            return Ok((0..voxels).collect());
        }
        if let Some(args) = name.strip_prefix("Random(").and_then(|s| s.strip_suffix(')')) {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return invalid(format!("atlas: cannot parse {name}, want Random(seed,n)"));
            }
            let seed: u64 = parts[0]
                .parse()
                .map_err(|_| DataError::Invalid(format!("atlas: bad seed in {name}")))?;
            let n: usize = parts[1]
                .parse()
                .map_err(|_| DataError::Invalid(format!("atlas: bad count in {name}")))?;
            if n == 0 || n > voxels {
                return invalid(format!("atlas: Random count {n} outside 1..={voxels}"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<usize> = (0..voxels).collect();
            all.shuffle(&mut rng);
            let mut chosen = all[..n].to_vec();
            chosen.sort_unstable();
            return Ok(chosen);
        }
        invalid(format!("atlas: unknown region or group {name}"))
    }
}

/// Standardizes each voxel series to mean 0 / std 1 over time; constant
/// voxels map to zeros.
pub fn voxel_normalize(fmri: &FmriData) -> Result<FmriData> {
    let frames = fmri.frames();
    if frames < 2 {
        return invalid("voxel_normalize: need at least 2 frames");
    }
    let normalize = |t: &Tensor, series_len: usize| -> Tensor {
        let mut data = t.data().to_vec();
        let voxels = data.len() / series_len;
        for v in 0..voxels {
            let s = &mut data[v * series_len..(v + 1) * series_len];
            let mean = s.iter().sum::<f64>() / series_len as f64;
            let var = s.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / series_len as f64;
            if var <= 1e-24 {
                s.fill(0.0);
            } else {
                let sd = var.sqrt();
                for x in s.iter_mut() {
                    *x = (*x - mean) / sd;
                }
            }
        }
        Tensor::new(t.shape().to_vec(), data).expect("normalize preserves shape")
    };
    Ok(match fmri {
        FmriData::Volume(t) => FmriData::Volume(normalize(t, frames)),
        FmriData::Surface(t) => FmriData::Surface(normalize(t, frames)),
    })
}

/// Gathers the group's voxel columns out of `[voxels, frames]` surface data,
/// transposed to `[frames, d_r]` with columns in sorted-index order.
pub fn extract_rois(surface: &Tensor, atlas: &RoiAtlas, group: &str) -> Result<Tensor> {
    let (voxels, frames) = surface.dims2()?;
    let indices = atlas.resolve(group, voxels)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= voxels) {
        return invalid(format!("extract_rois: voxel {bad} out of range {voxels}"));
    }
    let mut data = Vec::with_capacity(frames * indices.len());
    for f in 0..frames {
        for &v in &indices {
            data.push(surface.at2(v, f));
        }
    }
    Ok(Tensor::new(vec![frames, indices.len()], data)?)
}

/// Per-frame future-word token lists: frame t yields the tokens of words
/// `[anchor(t)+d, anchor(t)+d+l)`; out-of-range positions pad.
pub fn extract_prediction_targets(
    frame_words: &[Vec<String>],
    window: PredictionWindow,
    vocab: &Vocab,
) -> Result<Vec<Vec<usize>>> {
    if window.length == 0 {
        return invalid("extract_prediction_targets: length must be >= 1");
    }
    let flat: Vec<String> = frame_words.iter().flatten().cloned().collect();
    let ids = vocab.tokenize(&flat);
    let mut out = Vec::with_capacity(frame_words.len());
    let mut anchor = 0;
    for words in frame_words {
        let mut frame_targets = Vec::with_capacity(window.length);
        for offset in 0..window.length {
            let pos = anchor + window.distance + offset;
            frame_targets.push(if pos < ids.len() { ids[pos] } else { PAD_ID });
        }
        out.push(frame_targets);
        anchor += words.len();
    }
    Ok(out)
}

/// Permutes the fMRI frame order, leaving the word stream untouched.
pub fn shuffle_frames(rec: &Recording, seed: u64) -> Recording {
    let frames = rec.frames();
    let mut perm: Vec<usize> = (0..frames).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let permute = |t: &Tensor, series_len: usize| -> Tensor {
        let voxels = t.numel() / series_len;
        let mut data = vec![0.0; t.numel()];
        for v in 0..voxels {
            for (dst, &src) in perm.iter().enumerate() {
                data[v * series_len + dst] = t.data()[v * series_len + src];
            }
        }
        Tensor::new(t.shape().to_vec(), data).expect("permute preserves shape")
    };
    let fmri = match &rec.fmri {
        FmriData::Volume(t) => FmriData::Volume(permute(t, frames)),
        FmriData::Surface(t) => FmriData::Surface(permute(t, frames)),
    };
    Recording { fmri, ..rec.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surface(rows: &[Vec<f64>]) -> FmriData {
        FmriData::Surface(Tensor::from_rows(rows).unwrap())
    }

    fn rec_with_words(frame_words: Vec<Vec<&str>>) -> Recording {
        let frames = frame_words.len();
        Recording {
            subject: "s0".into(),
            story: "st0".into(),
            fmri: surface(&[(0..frames).map(|f| f as f64).collect()]),
            tr_seconds: 2.0,
            frame_words: frame_words
                .into_iter()
                .map(|ws| ws.into_iter().map(str::to_string).collect())
                .collect(),
        }
    }

    #[test]
    fn voxel_normalize_standardizes_series() {
        let x = surface(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 5.0, 5.0, 5.0]]);
        let normed = voxel_normalize(&x).unwrap();
        let FmriData::Surface(t) = &normed else { unreachable!() };
        let row0 = t.row(0);
        let mean: f64 = row0.iter().sum::<f64>() / 4.0;
        let var: f64 = row0.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
        assert!((var.sqrt() - 1.0).abs() < 1e-8);
        assert!(t.row(1).iter().all(|&v| v == 0.0), "constant voxel must become zeros");
    }

    #[test]
    fn voxel_normalize_is_idempotent() {
        let x = surface(&[vec![0.3, -1.0, 2.5, 0.0, 1.1]]);
        let once = voxel_normalize(&x).unwrap();
        let twice = voxel_normalize(&once).unwrap();
        let (FmriData::Surface(a), FmriData::Surface(b)) = (&once, &twice) else { unreachable!() };
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn voxel_normalize_rejects_single_frame() {
        let x = surface(&[vec![1.0]]);
        assert!(voxel_normalize(&x).is_err());
    }

    #[test]
    fn voxel_normalize_volume_layout() {
        let t = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 7.0, 7.0, 7.0]).unwrap();
        let normed = voxel_normalize(&FmriData::Volume(t)).unwrap();
        let FmriData::Volume(out) = &normed else { unreachable!() };
        assert!(out.data()[3..].iter().all(|&v| v == 0.0));
        assert!(out.data()[..3].iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn extract_rois_selects_columns() {
        let atlas = RoiAtlas {
            regions: BTreeMap::from([
                ("a".to_string(), vec![3, 5]),
                ("b".to_string(), vec![3, 4]),
            ]),
            groups: BTreeMap::from([("both".to_string(), vec!["a".to_string(), "b".to_string()])]),
        };
        let rows: Vec<Vec<f64>> = (0..6).map(|v| vec![v as f64 * 10.0, v as f64 * 10.0 + 1.0]).collect();
        let s = Tensor::from_rows(&rows).unwrap();
        let got = extract_rois(&s, &atlas, "a").unwrap();
        assert_eq!(got.shape(), &[2, 2]);
        assert_eq!(got.row(0), &[30.0, 50.0]);
        // overlapping regions in a group: union, duplicates removed
        let union = extract_rois(&s, &atlas, "both").unwrap();
        assert_eq!(union.shape(), &[2, 3]);
        assert_eq!(union.row(0), &[30.0, 40.0, 50.0]);
        // Whole: every voxel in identity order
        let whole = extract_rois(&s, &atlas, "Whole").unwrap();
        assert_eq!(whole.shape(), &[2, 6]);
        assert_eq!(whole.row(1), &[1.0, 11.0, 21.0, 31.0, 41.0, 51.0]);
    }

    #[test]
    fn random_roi_is_deterministic_and_sorted() {
        let atlas = RoiAtlas::default();
        let a = atlas.resolve("Random(9,4)", 20).unwrap();
        let b = atlas.resolve("Random(9,4)", 20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let c = atlas.resolve("Random(10,4)", 20).unwrap();
        assert_ne!(a, c, "different seeds should give different draws");
    }

    #[test]
    fn prediction_targets_match_window() {
        let rec = rec_with_words(vec![
            vec!["he", "could", "still"],
            vec!["hear", "and", "feel"],
        ]);
        let vocab = Vocab::build(rec.all_words().iter().map(String::as_str), None);
        let window = PredictionWindow::new(4, 2);
        let targets = extract_prediction_targets(&rec.frame_words, window, &vocab).unwrap();
        // frame 0 anchors at "he": words +4, +5 are "and", "feel"
        assert_eq!(vocab.detokenize(&targets[0]), vec!["and", "feel"]);
        // frame 1 anchors at "hear" (index 3): +4 -> 7, +5 -> 8, both past the end
        assert_eq!(targets[1], vec![PAD_ID, PAD_ID]);

        let anchor_only = extract_prediction_targets(
            &rec.frame_words,
            PredictionWindow::new(0, 1),
            &vocab,
        )
        .unwrap();
        assert_eq!(vocab.detokenize(&anchor_only[0]), vec!["he"]);
        assert_eq!(vocab.detokenize(&anchor_only[1]), vec!["hear"]);
    }

    #[test]
    fn shuffle_frames_is_a_seeded_bijection() {
        let rec = Recording {
            subject: "s".into(),
            story: "st".into(),
            fmri: surface(&[vec![1.0, 2.0, 3.0, 4.0], vec![10.0, 20.0, 30.0, 40.0]]),
            tr_seconds: 2.0,
            frame_words: vec![vec!["w".to_string()]; 4],
        };
        let a = shuffle_frames(&rec, 5);
        let b = shuffle_frames(&rec, 5);
        let (FmriData::Surface(ta), FmriData::Surface(tb)) = (&a.fmri, &b.fmri) else {
            unreachable!()
        };
        assert_eq!(ta.data(), tb.data(), "same seed must give the same permutation");
        let mut sorted = ta.row(0).to_vec();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(sorted, vec![1.0, 2.0, 3.0, 4.0], "frames must be a permutation");
        assert_eq!(a.frame_words, rec.frame_words, "words must be untouched");
    }

    #[test]
    fn shuffle_two_frames_reaches_both_orders() {
        let rec = Recording {
            subject: "s".into(),
            story: "st".into(),
            fmri: surface(&[vec![1.0, 2.0]]),
            tr_seconds: 2.0,
            frame_words: vec![vec!["a".to_string()], vec!["b".to_string()]],
        };
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..16 {
            let shuffled = shuffle_frames(&rec, seed);
            let FmriData::Surface(t) = &shuffled.fmri else { unreachable!() };
            seen.insert(t.data().iter().map(|v| *v as i64).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 2, "both permutations of 2 frames must appear");
    }
}
