use crate::data::PAD_ID;
use crate::numkit::{BoolMask, NodeId, Tape, Tensor};

use super::mask::PcMask;
use super::params::PredFt;
use super::{invalid, InputLayout, Result};

/// One 3D-CNN block: group norm (with affine) -> ReLU -> valid conv.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBlock {
    pub kernel: [usize; 3],
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// shape-preserving blocks add the block input back
    pub residual: bool,
    /// group-norm groups for the block input channels
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct CnnPlan {
    pub blocks: Vec<ConvBlock>,
    pub out_extents: [usize; 3],
    pub out_channels: usize,
}

impl CnnPlan {
    pub fn flat_dim(&self) -> usize {
        self.out_extents.iter().product::<usize>() * self.out_channels
    }
}

fn norm_groups(channels: usize) -> usize {
    [4usize, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// Alternates downsampling blocks (3x3x3 valid conv, channel-doubling up to
/// 8) with shape-preserving residual blocks (1x1x1). Fails when the spatial
/// extents cannot support the requested depth.
pub fn cnn_plan(shape: [usize; 3], layers: usize) -> Result<CnnPlan> {
    let mut extents = shape;
    let mut channels = 1usize;
    let mut blocks = Vec::with_capacity(layers);
    for i in 0..layers {
        if i % 2 == 0 {
            if extents.iter().any(|&e| e < 3) {
                return invalid(format!(
                    "cnn_plan: spatial extents {extents:?} exhausted at block {i} of {layers}",
                ));
            }
            let c_out = (channels * 4).min(8);
            blocks.push(ConvBlock {
                kernel: [3, 3, 3],
                stride: 1,
                c_in: channels,
                c_out,
                residual: false,
                groups: norm_groups(channels),
            });
            for e in extents.iter_mut() {
                *e -= 2;
            }
            channels = c_out;
        } else {
            blocks.push(ConvBlock {
                kernel: [1, 1, 1],
                stride: 1,
                c_in: channels,
                c_out: channels,
                residual: true,
                groups: norm_groups(channels),
            });
        }
    }
    Ok(CnnPlan { blocks, out_extents: extents, out_channels: channels })
}

/// Joint loss pieces; `total` is the tape node to backpropagate.
pub struct JointLoss {
    pub total: NodeId,
    pub l_main: f64,
    pub l_side: f64,
    pub total_value: f64,
}

/// One forward pass over a fresh tape. Parameters are recorded lazily as
/// leaves (`trainable`) or constants, so gradient bookkeeping only covers
/// what the pass actually touches.
pub struct Forward<'m> {
    pub model: &'m PredFt,
    pub tape: Tape,
    ids: Vec<Option<NodeId>>,
    trainable: bool,
    dropout: Option<DropoutState>,
}

struct DropoutState {
    p: f64,
    rng: rand_chacha::ChaCha8Rng,
}

const LN_EPS: f64 = 1e-5;
const GN_EPS: f64 = 1e-5;

impl<'m> Forward<'m> {
    pub fn new(model: &'m PredFt, trainable: bool) -> Forward<'m> {
        Forward {
            model,
            tape: Tape::new(),
            ids: vec![None; model.params.len()],
            trainable,
            dropout: None,
        }
    }

    /// Training-mode pass with inverted dropout on sublayer outputs and
    /// token embeddings; masks come from the given seed so steps replay
    /// deterministically.
    pub fn with_dropout(model: &'m PredFt, seed: u64) -> Forward<'m> {
        use rand::SeedableRng;
        let mut fwd = Forward::new(model, true);
        if model.cfg.dropout > 0.0 {
            fwd.dropout = Some(DropoutState {
                p: model.cfg.dropout,
                rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            });
        }
        fwd
    }

    fn maybe_dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let Some(state) = self.dropout.as_mut() else { return Ok(x) };
        use rand::Rng;
        let p = state.p;
        let keep = 1.0 / (1.0 - p);
        let shape = self.tape.value(x).shape().to_vec();
        let numel: usize = shape.iter().product();
        let mask: Vec<f64> = (0..numel)
            .map(|_| if state.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.tape.constant(Tensor::new(shape, mask)?);
        Ok(self.tape.mul(x, mask)?)
    }

    /// Tape id of a named parameter, recording it on first use.
    pub fn p(&mut self, name: &str) -> NodeId {
        let index = self
            .model
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown param {name}"));
        if let Some(id) = self.ids[index] {
            return id;
        }
        let tensor = self.model.params.at(index).clone();
        let id = if self.trainable {
            self.tape.leaf(tensor.with_grad())
        } else {
            self.tape.constant(tensor)
        };
        self.ids[index] = Some(id);
        id
    }

    /// Leaf node for the gradient of `name` after backward, if recorded.
    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.model.params.index_of(name).and_then(|i| self.ids[i])
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.tape.value(id)
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let xw = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(xw, b)?)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        Ok(self.tape.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    fn residual_norm(&mut self, x: NodeId, sub: NodeId, ln_prefix: &str) -> Result<NodeId> {
        let dropped = self.maybe_dropout(sub)?;
        let summed = self.tape.add(x, dropped)?;
        self.layer_norm(summed, ln_prefix)
    }

    /// Multi-head attention; `mask` rows are query positions, columns key
    /// positions, all-true when absent.
    pub(crate) fn mha(
        &mut self,
        prefix: &str,
        queries: NodeId,
        keys_values: NodeId,
        mask: Option<&BoolMask>,
    ) -> Result<NodeId> {
        let heads = self.model.cfg.heads;
        let d_k = self.model.cfg.d_model / heads;
        let n = self.value(queries).dims2()?.0;
        let m = self.value(keys_values).dims2()?.0;
        let full;
        let mask = match mask {
            Some(m_ref) => {
                if m_ref.shape() != [n, m] {
                    return invalid(format!(
                        "attention mask {:?} does not match scores {n}x{m}",
                        m_ref.shape()
                    ));
                }
                m_ref
            }
            None => {
                full = BoolMask::all_true(vec![n, m]);
                &full
            }
        };
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let wq = self.p(&format!("{prefix}.q.{h}"));
            let wk = self.p(&format!("{prefix}.k.{h}"));
            let wv = self.p(&format!("{prefix}.v.{h}"));
            let q = self.tape.matmul(queries, wq)?;
            let k = self.tape.matmul(keys_values, wk)?;
            let v = self.tape.matmul(keys_values, wv)?;
            let kt = self.tape.transpose(k)?;
            let raw = self.tape.matmul(q, kt)?;
            let scores = self.tape.scale(raw, scale)?;
            let probs = self.tape.masked_softmax(scores, mask)?;
            contexts.push(self.tape.matmul(probs, v)?);
        }
        let merged = self.tape.concat_cols(&contexts)?;
        self.linear(merged, &format!("{prefix}.out"))
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let hidden = self.linear(x, &format!("{prefix}.ff1"))?;
        let activated = self.tape.relu(hidden)?;
        self.linear(activated, &format!("{prefix}.ff2"))
    }

    fn encoder_layer(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let sa = self.mha(&format!("{prefix}.attn"), x, x, None)?;
        let x = self.residual_norm(x, sa, &format!("{prefix}.ln1"))?;
        let ff = self.feed_forward(x, prefix)?;
        self.residual_norm(x, ff, &format!("{prefix}.ln2"))
    }

    fn positions(&mut self, table: &str, len: usize) -> Result<NodeId> {
        let ids: Vec<usize> = (0..len).collect();
        let pos_table = self.p(table);
        Ok(self.tape.embed(pos_table, &ids)?)
    }

    /// Volumetric path: per frame, the 3D-CNN block stack, flatten, linear
    /// projection to d_m. Output is `(k+1) x d_m`.
    pub fn fmri_encode_3d(&mut self, frames: &Tensor) -> Result<NodeId> {
        let InputLayout::Volume { shape } = &self.model.cfg.input else {
            return invalid("fmri_encode_3d: model is configured for surface input");
        };
        let k1 = self.model.cfg.frames_per_sample;
        let want = [shape[0], shape[1], shape[2], k1];
        if frames.shape() != want {
            return invalid(format!(
                "fmri_encode_3d: input {:?}, expected {want:?}",
                frames.shape()
            ));
        }
        let plan = cnn_plan(*shape, self.model.cfg.cnn_layers)?;
        let spatial: usize = shape.iter().product();
        let mut rows = Vec::with_capacity(k1);
        for t in 0..k1 {
            let mut frame = vec![0.0; spatial];
            for v in 0..spatial {
                frame[v] = frames.data()[v * k1 + t];
            }
            let frame = Tensor::new(vec![shape[0], shape[1], shape[2], 1], frame)?;
            let mut x = self.tape.constant(frame);
            for (i, block) in plan.blocks.iter().enumerate() {
                let gn = self.tape.group_norm(x, block.groups, GN_EPS)?;
                let gamma = self.p(&format!("main.cnn.{i}.gn_gamma"));
                let beta = self.p(&format!("main.cnn.{i}.gn_beta"));
                let scaled = self.tape.mul_row(gn, gamma)?;
                let shifted = self.tape.add_row(scaled, beta)?;
                let activated = self.tape.relu(shifted)?;
                let kernel = self.p(&format!("main.cnn.{i}.kernel"));
                let conv = self.tape.conv3d(activated, kernel, block.stride)?;
                let bias = self.p(&format!("main.cnn.{i}.bias"));
                let out = self.tape.add_row(conv, bias)?;
                x = if block.residual { self.tape.add(x, out)? } else { out };
            }
            let flat = self.tape.reshape(x, vec![1, plan.flat_dim()])?;
            rows.push(self.linear(flat, "main.proj")?);
        }
        Ok(self.tape.concat_rows(&rows)?)
    }

    /// Surface path: a stack of width-halving linear layers, no
    /// nonlinearity. Output is `(k+1) x d_m`.
    pub fn fmri_encode_2d(&mut self, frames: &Tensor) -> Result<NodeId> {
        let InputLayout::Surface { dim } = &self.model.cfg.input else {
            return invalid("fmri_encode_2d: model is configured for volume input");
        };
        let k1 = self.model.cfg.frames_per_sample;
        if frames.shape() != [*dim, k1] {
            return invalid(format!(
                "fmri_encode_2d: input {:?}, expected [{dim}, {k1}]",
                frames.shape()
            ));
        }
        let mut x = self.tape.constant(frames.transposed()?);
        let mut layer = 0;
        while self.model.params.index_of(&format!("main.lin.{layer}.w")).is_some() {
            x = self.linear(x, &format!("main.lin.{layer}"))?;
            layer += 1;
        }
        Ok(x)
    }

    /// FIR latency compensation: concatenate each frame with its w-1
    /// successors and fuse back to d_m. `(k+1) x d_m -> k* x d_m`.
    pub fn fir_transform(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let window = self.model.cfg.fir_window;
        let stacked = self.tape.window_concat(x, window)?;
        self.linear(stacked, prefix)
    }

    /// Full main encoder: fMRI encoder, FIR, positions, Transformer stack.
    pub fn encode(&mut self, fmri: &super::train::FmriInput) -> Result<NodeId> {
        let frames = match fmri {
            super::train::FmriInput::Surface(t) => self.fmri_encode_2d(t)?,
            super::train::FmriInput::Volume(t) => self.fmri_encode_3d(t)?,
        };
        let fir = self.fir_transform(frames, "main.fir")?;
        let pos = self.positions("main.enc_pos", self.model.cfg.k_star())?;
        let mut x = self.tape.add(fir, pos)?;
        for i in 0..self.model.cfg.enc_layers {
            x = self.encoder_layer(x, &format!("main.enc.{i}"))?;
        }
        Ok(x)
    }

    /// ROI fusion feed-forward: d_r -> d_m with one hidden ReLU layer.
    pub fn roi_fusion(&mut self, rois: &Tensor) -> Result<NodeId> {
        if !self.model.cfg.side_network_enabled {
            return invalid("roi_fusion: side network is disabled");
        }
        let k1 = self.model.cfg.frames_per_sample;
        if frames_of(rois)? != k1 || rois.shape()[1] != self.model.cfg.roi_dim {
            return invalid(format!(
                "roi_fusion: input {:?}, expected [{k1}, {}]",
                rois.shape(),
                self.model.cfg.roi_dim
            ));
        }
        let x = self.tape.constant(rois.clone());
        let hidden = self.linear(x, "side.fuse1")?;
        let activated = self.tape.relu(hidden)?;
        self.linear(activated, "side.fuse2")
    }

    /// Side encoder: ROI fusion, FIR, positions, Transformer stack. The
    /// output is the brain-prediction representation (k* x d_m).
    pub fn side_encode(&mut self, rois: &Tensor) -> Result<NodeId> {
        let fused = self.roi_fusion(rois)?;
        let fir = self.fir_transform(fused, "side.fir")?;
        let pos = self.positions("side.enc_pos", self.model.cfg.k_star())?;
        let mut x = self.tape.add(fir, pos)?;
        for i in 0..self.model.cfg.side_enc_layers {
            x = self.encoder_layer(x, &format!("side.enc.{i}"))?;
        }
        Ok(x)
    }

    /// Main decoder: causal self-attention, encoder-decoder attention over
    /// the fMRI representation, predictive-coding attention over the side
    /// representation (skipped entirely when the side network is off), and
    /// feed-forward, each with residual + layer norm. Returns `k_t x V`
    /// logits.
    pub fn main_forward(
        &mut self,
        enc: NodeId,
        pred: Option<NodeId>,
        tokens: &[usize],
        mask: Option<&PcMask>,
    ) -> Result<NodeId> {
        let cfg = &self.model.cfg;
        if pred.is_some() != cfg.side_network_enabled {
            return invalid("main_forward: predictive representation must be present iff the side network is enabled");
        }
        if tokens.len() > cfg.max_tokens {
            return invalid(format!(
                "main_forward: {} tokens exceed max_tokens {}",
                tokens.len(),
                cfg.max_tokens
            ));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return invalid(format!("main_forward: token {bad} outside vocabulary"));
        }
        let pc_mask = match (pred, mask) {
            (Some(_), Some(m)) => {
                if m.mask.shape() != [tokens.len(), cfg.k_star()] {
                    return invalid(format!(
                        "main_forward: pc mask {:?}, expected [{}, {}]",
                        m.mask.shape(),
                        tokens.len(),
                        cfg.k_star()
                    ));
                }
                Some(m)
            }
            (Some(_), None) => {
                return invalid("main_forward: predictive representation without a pc mask")
            }
            (None, _) => None,
        };

        let embed_table = self.p("embed");
        let emb = self.tape.embed(embed_table, tokens)?;
        let pos = self.positions("main.tok_pos", tokens.len())?;
        let summed = self.tape.add(emb, pos)?;
        let mut x = self.maybe_dropout(summed)?;
        let causal = BoolMask::causal(tokens.len());
        for i in 0..cfg.dec_layers {
            let prefix = format!("main.dec.{i}");
            let sa = self.mha(&format!("{prefix}.self"), x, x, Some(&causal))?;
            x = self.residual_norm(x, sa, &format!("{prefix}.ln1"))?;
            let ed = self.mha(&format!("{prefix}.cross"), x, enc, None)?;
            x = self.residual_norm(x, ed, &format!("{prefix}.ln2"))?;
            if let Some(pred) = pred {
                let pc = self.mha(
                    &format!("{prefix}.pc"),
                    x,
                    pred,
                    Some(&pc_mask.expect("checked above").mask),
                )?;
                x = self.residual_norm(x, pc, &format!("{prefix}.ln3"))?;
            }
            let ff = self.feed_forward(x, &prefix)?;
            x = self.residual_norm(x, ff, &format!("{prefix}.ln4"))?;
        }
        self.linear(x, "main.head")
    }

    /// Side decoder (training only): causal self-attention over the
    /// flattened future-token sequence, unmasked cross-attention to the
    /// predictive representation. The shared word embedding is read as a
    /// constant so side gradients never update it.
    pub fn side_decode(&mut self, pred: NodeId, future_tokens: &[usize]) -> Result<NodeId> {
        let cfg = &self.model.cfg;
        if !cfg.side_network_enabled {
            return invalid("side_decode: side network is disabled");
        }
        if future_tokens.len() > cfg.max_tokens {
            return invalid(format!(
                "side_decode: {} tokens exceed max_tokens {}",
                future_tokens.len(),
                cfg.max_tokens
            ));
        }
        let detached = self
            .model
            .params
            .get("embed")
            .expect("embed param exists")
            .clone();
        let table = self.tape.constant(detached);
        let emb = self.tape.embed(table, future_tokens)?;
        let pos = self.positions("side.tok_pos", future_tokens.len())?;
        let summed = self.tape.add(emb, pos)?;
        let mut x = self.maybe_dropout(summed)?;
        let causal = BoolMask::causal(future_tokens.len());
        for i in 0..cfg.side_dec_layers {
            let prefix = format!("side.dec.{i}");
            let sa = self.mha(&format!("{prefix}.self"), x, x, Some(&causal))?;
            x = self.residual_norm(x, sa, &format!("{prefix}.ln1"))?;
            let ed = self.mha(&format!("{prefix}.cross"), x, pred, None)?;
            x = self.residual_norm(x, ed, &format!("{prefix}.ln2"))?;
            let ff = self.feed_forward(x, &prefix)?;
            x = self.residual_norm(x, ff, &format!("{prefix}.ln3"))?;
        }
        self.linear(x, "side.head")
    }

    /// Side network in one call: predictive representation plus side-decoder
    /// logits for the flattened future-token sequence.
    pub fn side_forward(
        &mut self,
        rois: &Tensor,
        future_tokens: &[usize],
    ) -> Result<(NodeId, NodeId)> {
        let pred = self.side_encode(rois)?;
        let logits = self.side_decode(pred, future_tokens)?;
        Ok((pred, logits))
    }

    /// `total = L_main + lambda * L_side`; both are next-token cross-entropy
    /// with pad ignored.
    pub fn joint_loss(
        &mut self,
        main_logits: NodeId,
        main_targets: &[usize],
        side: Option<(NodeId, &[usize])>,
    ) -> Result<JointLoss> {
        let l_main = self.tape.cross_entropy(main_logits, main_targets, PAD_ID)?;
        let l_main_value = self.value(l_main).item()?;
        match side {
            Some((side_logits, side_targets)) => {
                let l_side = self.tape.cross_entropy(side_logits, side_targets, PAD_ID)?;
                let l_side_value = self.value(l_side).item()?;
                let weighted = self.tape.scale(l_side, self.model.cfg.lambda)?;
                let total = self.tape.add(l_main, weighted)?;
                Ok(JointLoss {
                    total,
                    l_main: l_main_value,
                    l_side: l_side_value,
                    total_value: self.value(total).item()?,
                })
            }
            None => Ok(JointLoss {
                total: l_main,
                l_main: l_main_value,
                l_side: 0.0,
                total_value: l_main_value,
            }),
        }
    }
}

fn frames_of(t: &Tensor) -> Result<usize> {
    Ok(t.dims2()?.0)
}
