use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::numkit::{read_tensors, write_tensors, Tensor};

use super::params::{ParamSet, PredFt};
use super::train::Trainer;
use super::{invalid, ModelConfig, Result};

#[derive(Serialize, Deserialize)]
struct OptimizerState {
    step: usize,
    epoch: usize,
    total_steps: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    rng_seed: String,
    rng_word_pos: String,
}

/// Persists model weights, optimizer moments, config, RNG state, and the
/// vocabulary. Reloading reproduces forward passes bit-identically.
pub fn save_checkpoint(dir: &Path, trainer: &Trainer, vocab: &Vocab) -> Result<()> {
    fs::create_dir_all(dir)?;
    let model = &trainer.model;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, tensor) in model.params.iter() {
        tensors.push((name.to_string(), tensor));
    }
    let opt = &trainer.opt;
    for (index, name) in model.params.names().iter().enumerate() {
        tensors.push((format!("opt.m.{name}"), &opt.m[index]));
        tensors.push((format!("opt.v.{name}"), &opt.v[index]));
    }
    write_tensors(&dir.join("tensors"), &tensors)?;

    let config_value = serde_json::to_value(&model.cfg)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config_value)? + "\n")?;

    let rng = &trainer.rng;
    let state = OptimizerState {
        step: opt.step,
        epoch: trainer.epoch,
        total_steps: trainer.total_steps,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        rng_seed: hex::encode(rng.get_seed()),
        rng_word_pos: rng.get_word_pos().to_string(),
    };
    let state_value = serde_json::to_value(&state)?;
    fs::write(dir.join("optimizer.json"), serde_json::to_string_pretty(&state_value)? + "\n")?;
    vocab.save(&dir.join("vocab.json"))?;
    Ok(())
}

mod hex {
    pub fn encode(bytes: [u8; 32]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn decode(s: &str) -> Option<[u8; 32]> {
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = (chunk[0] as char).to_digit(16)?;
            let lo = (chunk[1] as char).to_digit(16)?;
            out[i] = (hi * 16 + lo) as u8;
        }
        Some(out)
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<(Trainer, Vocab)> {
    let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    cfg.validate()?;
    let mut tensors = read_tensors(&dir.join("tensors"))?;
    // rebuild in canonical construction order to recover names and shapes
    let template = PredFt::new(cfg.clone())?;
    let mut params = Vec::with_capacity(template.params.len());
    let mut m = Vec::with_capacity(template.params.len());
    let mut v = Vec::with_capacity(template.params.len());
    for name in template.params.names() {
        let take = |tensors: &mut std::collections::BTreeMap<String, Tensor>,
                    key: &str|
         -> Result<Tensor> {
            tensors
                .remove(key)
                .ok_or_else(|| super::ModelError::Invalid(format!("checkpoint missing tensor {key}")))
        };
        let weight = take(&mut tensors, name)?;
        if weight.shape() != template.params.get(name).unwrap().shape() {
            return invalid(format!("checkpoint tensor {name} has wrong shape"));
        }
        m.push(take(&mut tensors, &format!("opt.m.{name}"))?);
        v.push(take(&mut tensors, &format!("opt.v.{name}"))?);
        params.push((name.clone(), weight));
    }
    let model = PredFt { cfg, params: ParamSet::from_pairs(params) };

    let state: OptimizerState =
        serde_json::from_str(&fs::read_to_string(dir.join("optimizer.json"))?)?;
    let seed = hex::decode(&state.rng_seed)
        .ok_or_else(|| super::ModelError::Invalid("checkpoint: bad rng seed".into()))?;
    let word_pos: u128 = state
        .rng_word_pos
        .parse()
        .map_err(|_| super::ModelError::Invalid("checkpoint: bad rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);

    let opt = super::train::Adam { step: state.step, m, v };
    let trainer = Trainer::restore(model, opt, state.epoch, state.total_steps, rng);
    let vocab = Vocab::load(&dir.join("vocab.json"))?;
    Ok((trainer, vocab))
}
