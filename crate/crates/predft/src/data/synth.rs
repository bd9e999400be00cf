use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::PredictionWindow;
use crate::numkit::Tensor;

use super::manifest::{save_dataset, Dataset, Embeddings};
use super::{invalid, Recording, Result, RoiAtlas};
use std::collections::BTreeMap;

/// Parameters of the synthetic naturalistic-listening generator.
///
/// Every story is a Zipf-distributed word stream bucketed into frames. The
/// voxel response at frame t carries the lagged mean embedding of the words
/// heard at frame t-lag, and voxels labelled BPC additionally carry the mean
/// embedding of the planted future window `[anchor(t)+d*, anchor(t)+d*+l*)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub subjects: usize,
    pub stories: usize,
    pub frames_per_story: usize,
    /// inclusive (min, max) words per frame
    pub words_per_frame: (usize, usize),
    pub embed_dim: usize,
    pub lag_frames: usize,
    pub noise_sigma: f64,
    pub planted: PredictionWindow,
    pub bpc_fraction: f64,
    pub voxels: usize,
    pub tr_seconds: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            vocab_size: 64,
            subjects: 1,
            stories: 8,
            frames_per_story: 60,
            words_per_frame: (1, 5),
            embed_dim: 24,
            lag_frames: 2,
            noise_sigma: 0.5,
            planted: PredictionWindow::new(4, 2),
            bpc_fraction: 0.1,
            voxels: 500,
            tr_seconds: 2.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("subjects", self.subjects),
            ("stories", self.stories),
            ("frames_per_story", self.frames_per_story),
            ("embed_dim", self.embed_dim),
            ("voxels", self.voxels),
        ] {
            if v == 0 {
                return invalid(format!("synth: {name} must be positive"));
            }
        }
        if self.words_per_frame.0 == 0 || self.words_per_frame.0 > self.words_per_frame.1 {
            return invalid("synth: words_per_frame range must be 1 <= min <= max");
        }
        if self.noise_sigma < 0.0 {
            return invalid("synth: noise_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.bpc_fraction) || self.bpc_fraction == 0.0 {
            return invalid("synth: bpc_fraction must be in (0, 1]");
        }
        if self.planted.length == 0 {
            return invalid("synth: planted length must be >= 1");
        }
        let min_words = self.frames_per_story * self.words_per_frame.0;
        if self.planted.distance + self.planted.length > min_words {
            return invalid(format!(
                "synth: planted window ({}, {}) invalid for stories of at least {min_words} words",
                self.planted.distance, self.planted.length
            ));
        }
        if self.tr_seconds <= 0.0 {
            return invalid("synth: tr_seconds must be positive");
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, cosine branch only so the draw count stays predictable
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct Zipf {
    cumulative: Vec<f64>,
    total: f64,
}

impl Zipf {
    fn new(k: usize, exponent: f64) -> Zipf {
        let mut cumulative = Vec::with_capacity(k);
        let mut total = 0.0;
        for rank in 1..=k {
            total += 1.0 / (rank as f64).powf(exponent);
            cumulative.push(total);
        }
        Zipf { cumulative, total }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen::<f64>() * self.total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// Builds the full dataset in memory; [`synth_generate`] persists it.
pub fn build_synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d_e = spec.embed_dim;

    let word_width = (spec.vocab_size - 1).to_string().len();
    let lexicon: Vec<String> =
        (0..spec.vocab_size).map(|i| format!("w{i:0word_width$}")).collect();

    let mut embed = vec![0.0; spec.vocab_size * d_e];
    for slot in embed.iter_mut() {
        *slot = normal(&mut rng);
    }
    let embed = Tensor::new(vec![spec.vocab_size, d_e], embed)?;

    let bpc_count = ((spec.voxels as f64 * spec.bpc_fraction).round() as usize).max(1);
    let mut shuffled: Vec<usize> = (0..spec.voxels).collect();
    shuffled.shuffle(&mut rng);
    let mut bpc: Vec<usize> = shuffled[..bpc_count].to_vec();
    bpc.sort_unstable();
    let is_bpc: Vec<bool> = {
        let mut flags = vec![false; spec.voxels];
        for &v in &bpc {
            flags[v] = true;
        }
        flags
    };
    // rank of each BPC voxel within the sorted BPC list
    let bpc_rank: BTreeMap<usize, usize> =
        bpc.iter().enumerate().map(|(rank, &v)| (v, rank)).collect();

    let scale = 1.0 / (d_e as f64).sqrt();
    let mut proj_current = vec![0.0; spec.voxels * d_e];
    for slot in proj_current.iter_mut() {
        *slot = normal(&mut rng) * scale;
    }
    let mut proj_future = vec![0.0; bpc_count * d_e];
    for slot in proj_future.iter_mut() {
        *slot = normal(&mut rng) * scale;
    }

    let zipf = Zipf::new(spec.vocab_size, 1.1);
    let story_width = (spec.stories - 1).to_string().len();
    let subject_width = (spec.subjects - 1).to_string().len();
    let mut story_word_ids: Vec<Vec<usize>> = Vec::with_capacity(spec.stories);
    let mut story_frame_counts: Vec<Vec<usize>> = Vec::with_capacity(spec.stories);
    for _ in 0..spec.stories {
        let mut counts = Vec::with_capacity(spec.frames_per_story);
        let mut ids = Vec::new();
        for _ in 0..spec.frames_per_story {
            let count = rng.gen_range(spec.words_per_frame.0..=spec.words_per_frame.1);
            counts.push(count);
            for _ in 0..count {
                ids.push(zipf.sample(&mut rng));
            }
        }
        story_word_ids.push(ids);
        story_frame_counts.push(counts);
    }

    let mean_embedding = |word_ids: &[usize], divisor: usize| -> Vec<f64> {
        let mut mean = vec![0.0; d_e];
        if divisor > 0 {
            for &w in word_ids {
                for (slot, &e) in mean.iter_mut().zip(embed.row(w)) {
                    *slot += e;
                }
            }
            for slot in mean.iter_mut() {
                *slot /= divisor as f64;
            }
        }
        mean
    };

    let mut recordings = Vec::with_capacity(spec.subjects * spec.stories);
    for subject in 0..spec.subjects {
        for story in 0..spec.stories {
            let ids = &story_word_ids[story];
            let counts = &story_frame_counts[story];
            let frames = spec.frames_per_story;

            let mut anchors = Vec::with_capacity(frames);
            let mut seen = 0;
            for &c in counts {
                anchors.push(seen);
                seen += c;
            }
            // per-frame signal components, shared across voxels
            let mut current = Vec::with_capacity(frames);
            let mut future = Vec::with_capacity(frames);
            for t in 0..frames {
                current.push(if t >= spec.lag_frames {
                    let lagged = t - spec.lag_frames;
                    let (start, len) = (anchors[lagged], counts[lagged]);
                    mean_embedding(&ids[start..start + len], len)
                } else {
                    vec![0.0; d_e]
                });
                let start = anchors[t] + spec.planted.distance;
                let end = (start + spec.planted.length).min(ids.len());
                let in_range = if start < ids.len() { &ids[start..end] } else { &[] };
                future.push(mean_embedding(in_range, spec.planted.length));
            }

            let mut data = vec![0.0; spec.voxels * frames];
            for v in 0..spec.voxels {
                let a_row = &proj_current[v * d_e..(v + 1) * d_e];
                for t in 0..frames {
                    let mut y: f64 = a_row.iter().zip(&current[t]).map(|(a, c)| a * c).sum();
                    if is_bpc[v] {
                        let rank = bpc_rank[&v];
                        let b_row = &proj_future[rank * d_e..(rank + 1) * d_e];
                        y += b_row.iter().zip(&future[t]).map(|(b, f)| b * f).sum::<f64>();
                    }
                    y += spec.noise_sigma * normal(&mut rng);
                    data[v * frames + t] = y;
                }
            }

            let frame_words: Vec<Vec<String>> = counts
                .iter()
                .scan(0usize, |cursor, &c| {
                    let words = ids[*cursor..*cursor + c]
                        .iter()
                        .map(|&w| lexicon[w].clone())
                        .collect();
                    *cursor += c;
                    Some(words)
                })
                .collect();

            recordings.push(Recording {
                subject: format!("sub-{subject:0subject_width$}"),
                story: format!("story-{story:0story_width$}"),
                fmri: super::FmriData::Surface(Tensor::new(vec![spec.voxels, frames], data)?),
                tr_seconds: spec.tr_seconds,
                frame_words,
            });
        }
    }

    let other: Vec<usize> = (0..spec.voxels).filter(|v| !is_bpc[*v]).collect();
    let mut regions = BTreeMap::from([("bpc".to_string(), bpc)]);
    let mut groups = BTreeMap::from([("BPC".to_string(), vec!["bpc".to_string()])]);
    if other.is_empty() {
        groups.insert("Whole".to_string(), vec!["bpc".to_string()]);
    } else {
        regions.insert("other".to_string(), other);
        groups.insert("Whole".to_string(), vec!["bpc".to_string(), "other".to_string()]);
    }

    Ok(Dataset {
        tr_seconds: spec.tr_seconds,
        recordings,
        atlas: RoiAtlas { regions, groups },
        embeddings: Some(Embeddings { table: embed, lexicon }),
    })
}

/// Generates and persists a dataset directory; byte-identical for equal specs.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<()> {
    let dataset = build_synth_dataset(spec)?;
    save_dataset(&dataset, dir)
}
