use crate::data::{BOS_ID, EOS_ID};
use crate::numkit::Tensor;

use super::forward::Forward;
use super::mask::build_pc_mask;
use super::params::PredFt;
use super::train::FmriInput;
use super::Result;

/// Precomputed encoder outputs for one sample; the side decoder plays no
/// part at inference.
pub struct EncodedSample {
    pub enc: Tensor,
    pub pred: Option<Tensor>,
}

pub fn encode_sample(model: &PredFt, fmri: &FmriInput, rois: Option<&Tensor>) -> Result<EncodedSample> {
    let mut fwd = Forward::new(model, false);
    let enc = fwd.encode(fmri)?;
    let pred = if model.cfg.side_network_enabled {
        let rois = rois.ok_or_else(|| {
            super::ModelError::Invalid("encode_sample: side network needs ROI input".into())
        })?;
        let node = fwd.side_encode(rois)?;
        Some(fwd.tape.value(node).clone())
    } else {
        None
    };
    Ok(EncodedSample { enc: fwd.tape.value(enc).clone(), pred })
}

/// Fragment index for generated position j: bos sits in fragment 0 and each
/// subsequent fragment spans `tokens_per_frame` emitted tokens, clamped to
/// the last frame.
fn fragments_for(len: usize, tokens_per_frame: f64, frames: usize) -> Vec<usize> {
    let last = frames.saturating_sub(1);
    (0..len)
        .map(|j| {
            if j == 0 {
                0
            } else {
                ((((j - 1) as f64) / tokens_per_frame).floor() as usize).min(last)
            }
        })
        .collect()
}

fn forward_logits(
    model: &PredFt,
    encoded: &EncodedSample,
    tokens: &[usize],
) -> Result<Tensor> {
    let mut fwd = Forward::new(model, false);
    let enc = fwd.tape.constant(encoded.enc.clone());
    let pred = encoded.pred.as_ref().map(|p| fwd.tape.constant(p.clone()));
    let fragments =
        fragments_for(tokens.len(), model.cfg.tokens_per_frame, model.cfg.frames_per_sample);
    let mask = build_pc_mask(&fragments, model.cfg.k_star())?;
    let logits = fwd.main_forward(enc, pred, tokens, Some(&mask))?;
    Ok(fwd.tape.value(logits).clone())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from the start token; stops at the end token or
/// `max_len` emitted tokens. The returned stream excludes bos/eos.
pub fn generate(model: &PredFt, encoded: &EncodedSample, max_len: usize) -> Result<Vec<usize>> {
    let mut tokens = vec![BOS_ID];
    let mut out = Vec::new();
    while out.len() < max_len && tokens.len() < model.cfg.max_tokens {
        let logits = forward_logits(model, encoded, &tokens)?;
        let next = argmax(logits.row(tokens.len() - 1));
        if next == EOS_ID {
            break;
        }
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Beam search over summed log-probabilities; ties break toward lower token
/// ids so decoding is reproducible. `width == 1` coincides with greedy.
pub fn generate_beam(
    model: &PredFt,
    encoded: &EncodedSample,
    max_len: usize,
    width: usize,
) -> Result<Vec<usize>> {
    if width <= 1 {
        return generate(model, encoded, max_len);
    }
    #[derive(Clone)]
    struct Beam {
        tokens: Vec<usize>,
        log_prob: f64,
    }
    let mut live = vec![Beam { tokens: vec![BOS_ID], log_prob: 0.0 }];
    let mut done: Vec<Beam> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &live {
            if beam.tokens.len() >= model.cfg.max_tokens {
                done.push(beam.clone());
                continue;
            }
            let logits = forward_logits(model, encoded, &beam.tokens)?;
            let row = logits.row(beam.tokens.len() - 1);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (token, &logit) in row.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(token);
                candidates.push(Beam { tokens, log_prob: beam.log_prob + logit - log_z });
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(width);
        live = Vec::new();
        for c in candidates {
            if *c.tokens.last().unwrap() == EOS_ID {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let best = done.first().map(|b| b.tokens.clone()).unwrap_or_else(|| vec![BOS_ID]);
    Ok(best
        .into_iter()
        .skip(1)
        .take_while(|&t| t != EOS_ID)
        .collect())
}
