use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numkit::Tensor;

use super::forward::cnn_plan;
use super::{invalid, InputLayout, ModelConfig, Result};

/// Named parameter tensors in a fixed construction order (the order also
/// fixes initialization draws and optimizer iteration).
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub(crate) fn from_pairs(pairs: Vec<(String, Tensor)>) -> ParamSet {
        let mut set =
            ParamSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() };
        for (name, tensor) in pairs {
            set.push(name, tensor);
        }
        set
    }

    fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            self.index.insert(name.clone(), self.names.len()).is_none(),
            "duplicate param {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn at(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn at_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.index_of(name) {
            Some(i) => {
                if self.tensors[i].shape() != t.shape() {
                    return invalid(format!(
                        "param {name}: shape {:?} cannot replace {:?}",
                        t.shape(),
                        self.tensors[i].shape()
                    ));
                }
                self.tensors[i] = t;
                Ok(())
            }
            None => invalid(format!("unknown param {name}")),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

struct Init {
    rng: ChaCha8Rng,
    set: ParamSet,
}

impl Init {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    fn weight(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> =
            (0..numel).map(|_| self.rng.gen::<f64>() * 2.0 * bound - bound).collect();
        self.set.push(name, Tensor::new(shape, data).expect("init weight"));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.weight(format!("{prefix}.w"), vec![fan_in, fan_out], fan_in);
        self.set.push(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.set.push(format!("{prefix}.gamma"), Tensor::full(vec![dim], 1.0).expect("gamma"));
        self.set.push(format!("{prefix}.beta"), Tensor::zeros(vec![dim]));
    }

    fn attention(&mut self, prefix: &str, cfg: &ModelConfig) {
        let d_k = cfg.d_model / cfg.heads;
        for h in 0..cfg.heads {
            self.weight(format!("{prefix}.q.{h}"), vec![cfg.d_model, d_k], cfg.d_model);
            self.weight(format!("{prefix}.k.{h}"), vec![cfg.d_model, d_k], cfg.d_model);
            self.weight(format!("{prefix}.v.{h}"), vec![cfg.d_model, d_k], cfg.d_model);
        }
        self.linear(&format!("{prefix}.out"), cfg.d_model, cfg.d_model);
    }

    fn feed_forward(&mut self, prefix: &str, cfg: &ModelConfig) {
        self.linear(&format!("{prefix}.ff1"), cfg.d_model, cfg.ff_hidden);
        self.linear(&format!("{prefix}.ff2"), cfg.ff_hidden, cfg.d_model);
    }

    fn encoder_layer(&mut self, prefix: &str, cfg: &ModelConfig) {
        self.attention(&format!("{prefix}.attn"), cfg);
        self.layer_norm(&format!("{prefix}.ln1"), cfg.d_model);
        self.feed_forward(prefix, cfg);
        self.layer_norm(&format!("{prefix}.ln2"), cfg.d_model);
    }
}

/// The model: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct PredFt {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl PredFt {
    /// Builds and initializes all parameters from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<PredFt> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            set: ParamSet::from_pairs(Vec::new()),
        };
        let d_m = cfg.d_model;

        init.weight("embed", vec![cfg.vocab_size, d_m], d_m);
        init.weight("main.tok_pos", vec![cfg.max_tokens, d_m], d_m);
        init.weight("main.enc_pos", vec![cfg.frames_per_sample, d_m], d_m);

        match &cfg.input {
            InputLayout::Volume { shape } => {
                let plan = cnn_plan(*shape, cfg.cnn_layers)?;
                for (i, block) in plan.blocks.iter().enumerate() {
                    init.set.push(
                        format!("main.cnn.{i}.gn_gamma"),
                        Tensor::full(vec![block.c_in], 1.0).expect("gn gamma"),
                    );
                    init.set
                        .push(format!("main.cnn.{i}.gn_beta"), Tensor::zeros(vec![block.c_in]));
                    let fan_in = block.kernel.iter().product::<usize>() * block.c_in;
                    init.weight(
                        format!("main.cnn.{i}.kernel"),
                        vec![
                            block.kernel[0],
                            block.kernel[1],
                            block.kernel[2],
                            block.c_in,
                            block.c_out,
                        ],
                        fan_in,
                    );
                    init.set.push(format!("main.cnn.{i}.bias"), Tensor::zeros(vec![block.c_out]));
                }
                init.linear("main.proj", plan.flat_dim(), d_m);
            }
            InputLayout::Surface { dim } => {
                let mut width = *dim;
                let mut layer = 0;
                loop {
                    let next = (width / 2).max(d_m);
                    init.linear(&format!("main.lin.{layer}"), width, next);
                    layer += 1;
                    if next == d_m {
                        break;
                    }
                    width = next;
                }
            }
        }

        init.linear("main.fir", d_m * cfg.fir_window, d_m);
        for i in 0..cfg.enc_layers {
            init.encoder_layer(&format!("main.enc.{i}"), &cfg);
        }
        for i in 0..cfg.dec_layers {
            let prefix = format!("main.dec.{i}");
            init.attention(&format!("{prefix}.self"), &cfg);
            init.layer_norm(&format!("{prefix}.ln1"), d_m);
            init.attention(&format!("{prefix}.cross"), &cfg);
            init.layer_norm(&format!("{prefix}.ln2"), d_m);
            if cfg.side_network_enabled {
                init.attention(&format!("{prefix}.pc"), &cfg);
                init.layer_norm(&format!("{prefix}.ln3"), d_m);
            }
            init.feed_forward(&prefix, &cfg);
            init.layer_norm(&format!("{prefix}.ln4"), d_m);
        }
        init.linear("main.head", d_m, cfg.vocab_size);

        if cfg.side_network_enabled {
            init.linear("side.fuse1", cfg.roi_dim, d_m);
            init.linear("side.fuse2", d_m, d_m);
            init.linear("side.fir", d_m * cfg.fir_window, d_m);
            init.weight("side.enc_pos", vec![cfg.frames_per_sample, d_m], d_m);
            for i in 0..cfg.side_enc_layers {
                init.encoder_layer(&format!("side.enc.{i}"), &cfg);
            }
            init.weight("side.tok_pos", vec![cfg.max_tokens, d_m], d_m);
            for i in 0..cfg.side_dec_layers {
                let prefix = format!("side.dec.{i}");
                init.attention(&format!("{prefix}.self"), &cfg);
                init.layer_norm(&format!("{prefix}.ln1"), d_m);
                init.attention(&format!("{prefix}.cross"), &cfg);
                init.layer_norm(&format!("{prefix}.ln2"), d_m);
                init.feed_forward(&prefix, &cfg);
                init.layer_norm(&format!("{prefix}.ln3"), d_m);
            }
            init.linear("side.head", d_m, cfg.vocab_size);
        }

        Ok(PredFt { cfg, params: init.set })
    }
}
