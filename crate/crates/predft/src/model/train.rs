use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    extract_prediction_targets, extract_rois, voxel_normalize, Recording, RoiAtlas, Vocab,
    BOS_ID, EOS_ID, SEP_ID,
};
use crate::numkit::Tensor;

use super::forward::Forward;
use super::mask::build_pc_mask;
use super::params::PredFt;
use super::{invalid, InputLayout, ModelError, Result};

/// One sample's fMRI frames in the layout the model expects.
#[derive(Debug, Clone, PartialEq)]
pub enum FmriInput {
    /// `[d_s, k+1]`
    Surface(Tensor),
    /// `[w, h, d, k+1]`
    Volume(Tensor),
}

/// One training/decoding window: the fMRI frames, the ROI slice, and the
/// token streams for both networks.
#[derive(Debug, Clone)]
pub struct Sample {
    pub subject: String,
    pub story: String,
    pub window_index: usize,
    pub fmri: FmriInput,
    pub rois: Option<Tensor>,
    pub main_input: Vec<usize>,
    pub main_targets: Vec<usize>,
    /// frame offset (0..k) of each main input token
    pub fragments: Vec<usize>,
    pub side_input: Vec<usize>,
    pub side_targets: Vec<usize>,
    pub truth_words: Vec<String>,
    pub frame_counts: Vec<usize>,
}

/// Slices recordings into non-overlapping (k+1)-frame windows and builds
/// token streams. Recordings are voxel-normalized first; the ROI group is
/// extracted when the model carries a side network.
pub fn build_samples(
    recordings: &[&Recording],
    atlas: &RoiAtlas,
    roi_group: Option<&str>,
    vocab: &Vocab,
    model: &PredFt,
) -> Result<Vec<Sample>> {
    build_samples_strided(recordings, atlas, roi_group, vocab, model, model.cfg.frames_per_sample)
}

/// Like [`build_samples`] with a custom window stride; strides below k+1
/// produce overlapping windows (training-time augmentation).
pub fn build_samples_strided(
    recordings: &[&Recording],
    atlas: &RoiAtlas,
    roi_group: Option<&str>,
    vocab: &Vocab,
    model: &PredFt,
    stride: usize,
) -> Result<Vec<Sample>> {
    if stride == 0 {
        return invalid("build_samples: stride must be >= 1");
    }
    let cfg = &model.cfg;
    let k1 = cfg.frames_per_sample;
    let mut samples = Vec::new();
    for rec in recordings {
        rec.validate()?;
        let normalized = voxel_normalize(&rec.fmri)?;
        let surface = normalized.to_surface();
        let rois_full = match roi_group {
            Some(group) if cfg.side_network_enabled => {
                let extracted = extract_rois(&surface, atlas, group)?;
                if extracted.shape()[1] != cfg.roi_dim {
                    return invalid(format!(
                        "build_samples: ROI group {group} has width {}, model expects {}",
                        extracted.shape()[1],
                        cfg.roi_dim
                    ));
                }
                Some(extracted)
            }
            _ => None,
        };
        let targets_per_frame = extract_prediction_targets(&rec.frame_words, cfg.window, vocab)?;
        let frames = rec.frames();
        let mut window_index = 0;
        let mut start = 0;
        while start + k1 <= frames {
            let frame_range: Vec<usize> = (start..start + k1).collect();
            let fmri = match (&normalized, &cfg.input) {
                (crate::data::FmriData::Surface(t), InputLayout::Surface { dim }) => {
                    if t.shape()[0] != *dim {
                        return invalid(format!(
                            "build_samples: surface width {} vs configured {dim}",
                            t.shape()[0]
                        ));
                    }
                    FmriInput::Surface(t.gather_cols(&frame_range)?)
                }
                (crate::data::FmriData::Volume(t), InputLayout::Volume { shape }) => {
                    if t.shape()[..3] != shape[..] {
                        return invalid(format!(
                            "build_samples: volume shape {:?} vs configured {shape:?}",
                            &t.shape()[..3]
                        ));
                    }
                    let voxels: usize = shape.iter().product();
                    let total_frames = t.shape()[3];
                    let mut data = Vec::with_capacity(voxels * k1);
                    for v in 0..voxels {
                        for &f in &frame_range {
                            data.push(t.data()[v * total_frames + f]);
                        }
                    }
                    FmriInput::Volume(Tensor::new(
                        vec![shape[0], shape[1], shape[2], k1],
                        data,
                    )?)
                }
                _ => return invalid("build_samples: recording layout does not match the model"),
            };
            let rois = rois_full
                .as_ref()
                .map(|r| r.gather_rows(&frame_range))
                .transpose()?;

            let mut main_input = vec![BOS_ID];
            let mut fragments = vec![0usize];
            let mut truth_words = Vec::new();
            let mut frame_counts = Vec::with_capacity(k1);
            for (offset, &f) in frame_range.iter().enumerate() {
                let words = &rec.frame_words[f];
                frame_counts.push(words.len());
                for word in words {
                    truth_words.push(word.clone());
                    fragments.push(offset);
                }
                main_input.extend(vocab.tokenize(words));
            }
            let mut main_targets = main_input[1..].to_vec();
            main_targets.push(EOS_ID);

            let mut side_input = vec![BOS_ID];
            for (offset, &f) in frame_range.iter().enumerate() {
                side_input.extend(&targets_per_frame[f]);
                if offset + 1 < k1 {
                    side_input.push(SEP_ID);
                }
            }
            let mut side_targets = side_input[1..].to_vec();
            side_targets.push(EOS_ID);

            if main_input.len() > cfg.max_tokens || side_input.len() > cfg.max_tokens {
                return invalid(format!(
                    "build_samples: window needs {} main / {} side tokens, max_tokens is {}",
                    main_input.len(),
                    side_input.len(),
                    cfg.max_tokens
                ));
            }

            samples.push(Sample {
                subject: rec.subject.clone(),
                story: rec.story.clone(),
                window_index,
                fmri,
                rois,
                main_input,
                main_targets,
                fragments,
                side_input,
                side_targets,
                truth_words,
                frame_counts,
            });
            window_index += 1;
            start += stride;
        }
    }
    if samples.is_empty() {
        return invalid(format!(
            "build_samples: no recording is long enough for {k1}-frame windows"
        ));
    }
    Ok(samples)
}

/// Cosine decay from `init` at step 0 to `fin` at the last step, exact at
/// both endpoints.
pub fn lr_at(step: usize, total_steps: usize, init: f64, fin: f64) -> f64 {
    if total_steps <= 1 || step == 0 {
        return init;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    fin + 0.5 * (init - fin) * (1.0 + (std::f64::consts::PI * t).cos())
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments aligned with the parameter order.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    fn new(model: &PredFt) -> Adam {
        let zeros: Vec<Tensor> = (0..model.params.len())
            .map(|i| Tensor::zeros(model.params.at(i).shape().to_vec()))
            .collect();
        Adam { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Per-step training record, mirrored into the JSON training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_main: f64,
    pub l_side: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationStats {
    pub l_main: f64,
    pub samples: usize,
}

/// Single-writer training state: model, optimizer moments, data-order RNG.
pub struct Trainer {
    pub model: PredFt,
    pub(crate) opt: Adam,
    pub epoch: usize,
    pub total_steps: usize,
    pub(crate) rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: PredFt, steps_per_epoch: usize) -> Trainer {
        let total_steps = steps_per_epoch * model.cfg.epochs;
        let rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ 0x7261_696e);
        let opt = Adam::new(&model);
        Trainer { model, opt, epoch: 0, total_steps, rng }
    }

    pub(crate) fn restore(
        model: PredFt,
        opt: Adam,
        epoch: usize,
        total_steps: usize,
        rng: ChaCha8Rng,
    ) -> Trainer {
        Trainer { model, opt, epoch, total_steps, rng }
    }

    pub fn step(&self) -> usize {
        self.opt.step
    }

    /// Replaces non-structural decoder input tokens with unk at the
    /// configured rate; targets are untouched.
    fn apply_word_dropout(&mut self, input: &[usize]) -> Vec<usize> {
        let p = self.model.cfg.word_dropout;
        if p == 0.0 {
            return input.to_vec();
        }
        let first_word = crate::data::SEP_ID + 1;
        input
            .iter()
            .map(|&t| {
                if t >= first_word && self.rng.gen::<f64>() < p {
                    crate::data::UNK_ID
                } else {
                    t
                }
            })
            .collect()
    }

    /// Forward both networks, backpropagate the joint loss, apply one
    /// Adam update under the cosine schedule.
    /// Adds zero-mean Gaussian noise to an input tensor (training-time
    /// augmentation; the planted signal survives, exact-value keying does
    /// not).
    fn perturb(&mut self, t: &Tensor, sigma: f64) -> Tensor {
        if sigma == 0.0 {
            return t.clone();
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| {
                let u1: f64 = 1.0 - self.rng.gen::<f64>();
                let u2: f64 = self.rng.gen();
                v + sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("noise preserves shape")
    }

    pub fn train_step(&mut self, sample: &Sample) -> Result<StepRecord> {
        let lr = lr_at(self.opt.step, self.total_steps, self.model.cfg.lr_init, self.model.cfg.lr_final);
        let main_input = self.apply_word_dropout(&sample.main_input);
        let side_input = self.apply_word_dropout(&sample.side_input);
        let sigma = self.model.cfg.input_noise;
        let fmri = match &sample.fmri {
            FmriInput::Surface(t) => FmriInput::Surface(self.perturb(t, sigma)),
            FmriInput::Volume(t) => FmriInput::Volume(self.perturb(t, sigma)),
        };
        let rois = sample.rois.as_ref().map(|r| self.perturb(r, sigma));
        let dropout_seed = self.rng.gen::<u64>();
        let mut fwd = Forward::with_dropout(&self.model, dropout_seed);
        let enc = fwd.encode(&fmri)?;
        let (pred, side) = if self.model.cfg.side_network_enabled {
            let rois = rois.as_ref().ok_or_else(|| {
                ModelError::Invalid("train_step: sample lacks ROI input".into())
            })?;
            let (pred, side_logits) = fwd.side_forward(rois, &side_input)?;
            (Some(pred), Some((side_logits, sample.side_targets.as_slice())))
        } else {
            (None, None)
        };
        let mask = build_pc_mask(&sample.fragments, self.model.cfg.k_star())?;
        let logits = fwd.main_forward(enc, pred, &main_input, Some(&mask))?;
        let loss = fwd.joint_loss(logits, &sample.main_targets, side).map_err(|e| {
            ModelError::Invalid(format!(
                "train_step aborted at step {}: non-finite or invalid loss ({e})",
                self.opt.step
            ))
        })?;

        let grads = fwd.tape.backward(loss.total)?;
        let updates: Vec<Option<Tensor>> = (0..self.model.params.len())
            .map(|index| {
                fwd.param_node(self.model.params.names()[index].as_str())
                    .and_then(|node| grads.wrt(node))
                    .cloned()
            })
            .collect();
        drop(grads);
        drop(fwd);

        let bias1 = 1.0 - BETA1.powi(self.opt.step as i32 + 1);
        let bias2 = 1.0 - BETA2.powi(self.opt.step as i32 + 1);
        for (index, grad) in updates.iter().enumerate() {
            // parameters untouched by this pass keep their moments as-is
            let Some(grad) = grad else { continue };
            let m = self.opt.m[index].data_mut();
            let v = self.opt.v[index].data_mut();
            let p = self.model.params.at_mut(index).data_mut();
            for ((pv, gv), (mv, vv)) in
                p.iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        self.opt.step += 1;
        Ok(StepRecord {
            step: self.opt.step - 1,
            lr,
            l_main: loss.l_main,
            l_side: loss.l_side,
            total: loss.total_value,
        })
    }

    /// One pass over the samples in a seed-shuffled order.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<Vec<StepRecord>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut records = Vec::with_capacity(samples.len());
        for &i in &order {
            records.push(self.train_step(&samples[i])?);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Mean main-network loss without gradient bookkeeping or updates.
    pub fn validation_loss(&self, samples: &[Sample]) -> Result<ValidationStats> {
        let mut total = 0.0;
        for sample in samples {
            let mut fwd = Forward::new(&self.model, false);
            let enc = fwd.encode(&sample.fmri)?;
            let pred = if self.model.cfg.side_network_enabled {
                let rois = sample.rois.as_ref().ok_or_else(|| {
                    ModelError::Invalid("validation: sample lacks ROI input".into())
                })?;
                Some(fwd.side_encode(rois)?)
            } else {
                None
            };
            let mask = build_pc_mask(&sample.fragments, self.model.cfg.k_star())?;
            let logits = fwd.main_forward(enc, pred, &sample.main_input, Some(&mask))?;
            let loss = fwd.joint_loss(logits, &sample.main_targets, None)?;
            total += loss.l_main;
        }
        Ok(ValidationStats { l_main: total / samples.len().max(1) as f64, samples: samples.len() })
    }
}

/// Completes the data-dependent config fields (input layout, ROI width and
/// group, fragment budget, position-table sizes) from the training
/// recordings. `vocab_size` must already be set.
pub fn configure_for_dataset(
    cfg: &mut super::ModelConfig,
    train_recordings: &[&Recording],
    atlas: &RoiAtlas,
    roi_group: Option<&str>,
) -> Result<()> {
    let Some(first) = train_recordings.first() else {
        return invalid("configure_for_dataset: no training recordings");
    };
    cfg.input = match &first.fmri {
        crate::data::FmriData::Surface(t) => InputLayout::Surface { dim: t.shape()[0] },
        crate::data::FmriData::Volume(t) => InputLayout::Volume {
            shape: [t.shape()[0], t.shape()[1], t.shape()[2]],
        },
    };
    match roi_group {
        Some(group) if cfg.side_network_enabled => {
            let voxels = first.fmri.voxels();
            let indices = atlas.resolve(group, voxels)?;
            cfg.roi_dim = indices.len();
            cfg.roi_group = Some(group.to_string());
        }
        _ => {
            cfg.side_network_enabled = false;
            cfg.roi_dim = 0;
            cfg.roi_group = None;
        }
    }

    let k1 = cfg.frames_per_sample;
    let mut total_words = 0usize;
    let mut total_frames = 0usize;
    let mut max_window_words = 0usize;
    for rec in train_recordings {
        let counts: Vec<usize> = rec.frame_words.iter().map(Vec::len).collect();
        total_words += counts.iter().sum::<usize>();
        total_frames += counts.len();
        let mut start = 0;
        while start + k1 <= counts.len() {
            max_window_words = max_window_words.max(counts[start..start + k1].iter().sum());
            start += k1;
        }
    }
    if total_frames == 0 || max_window_words == 0 {
        return invalid("configure_for_dataset: training recordings contain no words");
    }
    cfg.tokens_per_frame = total_words as f64 / total_frames as f64;
    cfg.max_gen_len = max_window_words + 4;
    let side_len = 1 + k1 * cfg.window.length + k1.saturating_sub(1);
    cfg.max_tokens = (max_window_words + 2).max(side_len).max(cfg.max_gen_len + 2);
    Ok(())
}
