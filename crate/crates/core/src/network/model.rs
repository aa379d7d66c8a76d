use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::vocab::{END, PAD, START};
use crate::layers::{
    Activation, BiLstmLayer, DenseLayer, EmbeddingTable, FusedLstm, LstmCell, LstmState,
};
use crate::optim::Adam;
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

use super::{ModelError, SsvcConfig};

type Result<T> = std::result::Result<T, ModelError>;

/// `W1, b1, W2, b2` of one additive attention scorer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// All learnable weights of the model plus the handles that locate them.
#[derive(Clone, Debug)]
pub struct SsvcParams {
    pub config: SsvcConfig,
    pub store: ParamStore,
    pub td_dense: DenseLayer,
    pub encoder_layers: Vec<BiLstmLayer>,
    pub attn_per_layer: Vec<AttentionParams>,
    pub stack_join: DenseLayer,
    pub shp_dense: Option<DenseLayer>,
    pub decoder_cell: LstmCell,
    pub output_dense: DenseLayer,
    pub embedding: EmbeddingTable,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// One `[T, 2u]` output per encoder layer.
    pub h_layers: Vec<Var>,
    /// `[T, td_units]`, input of the spatial hard pull.
    pub td_outputs: Var,
    /// Last layer's concatenated `[fwd ; bwd]` final state, width `2u`.
    pub final_state: LstmState,
}

#[derive(Clone, Debug)]
pub(crate) struct StackedContext {
    pub c_st: Var,
    pub weights: Vec<Var>,
    pub contexts: Vec<Var>,
}

/// Greedy decoding result with the attention maps of every step.
#[derive(Clone, Debug, Default)]
pub struct DecodeTrace {
    pub tokens: Vec<usize>,
    /// Encoder outputs, one `[T, 2u]` tensor per layer.
    pub h_layers: Vec<Tensor>,
    /// `attention[step][layer]` is the length-`T` weight vector.
    pub attention: Vec<Vec<Tensor>>,
    /// `contexts[step][layer]` is that layer's attention context.
    pub contexts: Vec<Vec<Tensor>>,
}

/// One additive attention layer.
///
/// The decoder state `ss` is tiled over the `T` rows of `h`, the rows
/// `[h_t ; ss]` are scored as `W2 · tanh(W1 [h_t ; ss] + b1) + b2`, the
/// scores go through a max-subtracted softmax and the context is the
/// weighted sum of the rows of `h`. Returns `(weights, context)`.
pub fn attention_one_layer(
    g: &Graph,
    h: Var,
    ss: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<(Var, Var)> {
    let steps = g.shape(h)?[0];
    let tiled = g.repeat_rows(ss, steps)?;
    let rows = g.concat(&[h, tiled], 1)?;
    let hidden = g.tanh(g.add_row(g.matmul(rows, w1)?, b1)?)?;
    let scores = g.add_row(g.matmul(hidden, w2)?, b2)?;
    let scores = g.reshape(scores, &[steps])?;
    let weights = g.softmax(scores)?;
    let context = g.weighted_sum(h, weights)?;
    Ok((weights, context))
}

impl SsvcParams {
    /// Seeded initialization; parameters are registered in a fixed order so
    /// equal seeds give bitwise-equal models.
    pub fn new(config: SsvcConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let c = &config;
        let enc_width = 2 * c.enc_units;

        let td_dense = DenseLayer::new(
            &mut store,
            rng,
            "td_dense",
            c.feature_dim,
            c.td_units,
            c.td_activation,
        );
        let encoder_layers = (0..c.enc_layers)
            .map(|i| {
                let input = if i == 0 { c.td_units } else { enc_width };
                BiLstmLayer::new(&mut store, rng, &format!("encoder.{i}"), input, c.enc_units)
            })
            .collect();
        let attn_per_layer = (0..c.enc_layers)
            .map(|i| {
                let name = format!("attn.{i}");
                AttentionParams {
                    w1: store.add(
                        format!("{name}.w1"),
                        glorot_uniform(rng, enc_width + c.dec_units, c.attn_units),
                    ),
                    b1: store.add(format!("{name}.b1"), Tensor::zeros(&[c.attn_units])),
                    w2: store.add(format!("{name}.w2"), glorot_uniform(rng, c.attn_units, 1)),
                    b2: store.add(format!("{name}.b2"), Tensor::zeros(&[1])),
                }
            })
            .collect();
        let stack_join = DenseLayer::new(
            &mut store,
            rng,
            "stack_join",
            c.enc_layers * enc_width,
            c.stack_units,
            c.stack_activation,
        );
        let shp_dense = (c.shp_units > 0).then(|| {
            DenseLayer::new(
                &mut store,
                rng,
                "shp",
                c.frames_per_seq * c.td_units,
                c.shp_units,
                Activation::Relu,
            )
        });
        let decoder_cell = LstmCell::new(
            &mut store,
            rng,
            "decoder",
            c.decoder_input_dim(),
            c.dec_units,
        );
        let output_dense = DenseLayer::new(
            &mut store,
            rng,
            "output",
            c.dec_units,
            c.vocab_size,
            Activation::None,
        );
        let embedding =
            EmbeddingTable::new(&mut store, rng, "embedding", c.vocab_size, c.embed_dim);
        store.set_trainable(embedding.matrix, c.embeddings_trainable);

        Ok(Self {
            config,
            store,
            td_dense,
            encoder_layers,
            attn_per_layer,
            stack_join,
            shp_dense,
            decoder_cell,
            output_dense,
            embedding,
        })
    }

    fn check_frames(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match shape {
            [t, d] => {
                if *t != c.frames_per_seq {
                    return Err(ModelError::FrameCount {
                        expected: c.frames_per_seq,
                        found: *t,
                    });
                }
                if *d != c.feature_dim {
                    return Err(ModelError::FeatureDim {
                        expected: c.feature_dim,
                        found: *d,
                    });
                }
                Ok(())
            }
            _ => Err(ModelError::FrameCount {
                expected: c.frames_per_seq,
                found: shape.first().copied().unwrap_or(0),
            }),
        }
    }

    pub fn encode(&self, g: &Graph, p: &Bound, frames: Var) -> Result<EncoderOutput> {
        self.check_frames(&g.shape(frames)?)?;
        let td_outputs = self.td_dense.forward(g, p, frames)?;
        let mut h_layers = Vec::with_capacity(self.encoder_layers.len());
        let mut x = td_outputs;
        let mut last = None;
        for layer in &self.encoder_layers {
            let out = layer.forward(g, p, x)?;
            h_layers.push(out.outputs);
            x = out.outputs;
            last = Some(out);
        }
        let last = last.expect("at least one encoder layer");
        let final_state = LstmState {
            h: g.concat(&[last.forward_final.h, last.backward_final.h], 0)?,
            c: g.concat(&[last.forward_final.c, last.backward_final.c], 0)?,
        };
        Ok(EncoderOutput {
            h_layers,
            td_outputs,
            final_state,
        })
    }

    pub(crate) fn stacked_attention(
        &self,
        g: &Graph,
        p: &Bound,
        h_layers: &[Var],
        ss: Var,
    ) -> Result<StackedContext> {
        if h_layers.len() != self.attn_per_layer.len() {
            return Err(ModelError::LayerCount {
                expected: h_layers.len(),
                found: self.attn_per_layer.len(),
            });
        }
        let mut weights = Vec::with_capacity(h_layers.len());
        let mut contexts = Vec::with_capacity(h_layers.len());
        for (&h, a) in h_layers.iter().zip(&self.attn_per_layer) {
            let (w, c) =
                attention_one_layer(g, h, ss, p.var(a.w1), p.var(a.b1), p.var(a.w2), p.var(a.b2))?;
            weights.push(w);
            contexts.push(c);
        }
        let joined = g.concat(&contexts, 0)?;
        let c_st = self.stack_join.forward(g, p, joined)?;
        Ok(StackedContext {
            c_st,
            weights,
            contexts,
        })
    }

    /// Stacked context for decoder state `ss`.
    pub fn stacked_context(&self, g: &Graph, p: &Bound, h_layers: &[Var], ss: Var) -> Result<Var> {
        Ok(self.stacked_attention(g, p, h_layers, ss)?.c_st)
    }

    /// Flattens all time-distributed outputs (frame-major) and projects
    /// them to `shp_units`. `None` when the path is disabled.
    pub fn spatial_hard_pull(&self, g: &Graph, p: &Bound, td_outputs: Var) -> Result<Option<Var>> {
        let Some(dense) = &self.shp_dense else {
            return Ok(None);
        };
        let flat = g.flatten(td_outputs)?;
        Ok(Some(dense.forward(g, p, flat)?))
    }

    /// One decoder step from an already computed context. Returns raw
    /// logits over the vocabulary and the updated state.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        g: &Graph,
        p: &Bound,
        decoder: &FusedLstm,
        prev_token: usize,
        state: LstmState,
        c_st: Var,
        c_shp: Option<Var>,
    ) -> Result<(Var, LstmState)> {
        if prev_token >= self.config.vocab_size {
            return Err(ModelError::Token {
                token: prev_token,
                vocab_size: self.config.vocab_size,
            });
        }
        let emb = self.embedding.lookup(g, p, &[prev_token])?;
        let emb = g.reshape(emb, &[self.config.embed_dim])?;
        let mut parts = vec![emb, c_st];
        parts.extend(c_shp);
        let x = g.concat(&parts, 0)?;
        let state = decoder.step(g, x, state)?;
        let logits = self.output_dense.forward(g, p, state.h)?;
        Ok((logits, state))
    }

    /// Index of the end marker; the caption must start with the start
    /// marker, contain an end marker and carry only pads after it.
    pub fn validate_caption(&self, caption: &[usize]) -> Result<usize> {
        if caption.len() > self.config.max_caption_len {
            return Err(ModelError::Caption(format!(
                "length {} exceeds max_caption_len {}",
                caption.len(),
                self.config.max_caption_len
            )));
        }
        if caption.first() != Some(&START) {
            return Err(ModelError::Caption("missing start marker".into()));
        }
        if let Some(&token) = caption.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Token {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        let end = caption
            .iter()
            .position(|&t| t == END)
            .ok_or_else(|| ModelError::Caption("missing end marker".into()))?;
        if caption[1..end].iter().any(|&t| t == PAD || t == START) {
            return Err(ModelError::Caption("marker inside caption body".into()));
        }
        if caption[end + 1..].iter().any(|&t| t != PAD) {
            return Err(ModelError::Caption("non-pad token after end marker".into()));
        }
        Ok(end)
    }

    /// Teacher-forced decoding: the logits at position `i` are produced
    /// from the ground-truth token `i - 1`. Returns `(target, logits)` for
    /// every non-pad target position.
    pub fn teacher_forced_logits(
        &self,
        g: &Graph,
        p: &Bound,
        frames: Var,
        caption: &[usize],
    ) -> Result<Vec<(usize, Var)>> {
        self.validate_caption(caption)?;
        let enc = self.encode(g, p, frames)?;
        let c_shp = self.spatial_hard_pull(g, p, enc.td_outputs)?;
        let decoder = self.decoder_cell.fuse(g, p)?;
        let mut state = enc.final_state;
        let mut out = Vec::with_capacity(caption.len());
        for i in 1..caption.len() {
            let target = caption[i];
            if target == PAD {
                continue;
            }
            let ctx = self.stacked_attention(g, p, &enc.h_layers, state.h)?;
            let (logits, next) =
                self.decode_step(g, p, &decoder, caption[i - 1], state, ctx.c_st, c_shp)?;
            state = next;
            out.push((target, logits));
        }
        Ok(out)
    }

    /// Mean cross-entropy over the non-pad target positions.
    pub fn caption_loss(
        &self,
        g: &Graph,
        p: &Bound,
        frames: Var,
        caption: &[usize],
    ) -> Result<Var> {
        let steps = self.teacher_forced_logits(g, p, frames, caption)?;
        let terms = steps
            .iter()
            .map(|&(target, logits)| g.softmax_cross_entropy(logits, target))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let total = g.add_n(&terms)?;
        Ok(g.scale(total, 1.0 / terms.len() as f64)?)
    }

    /// Loss and per-parameter gradients for one `(video, caption)` pair.
    pub fn loss_and_grads(
        &self,
        frames: &Tensor,
        caption: &[usize],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let g = Graph::new();
        let p = self.store.bind(&g, true);
        let x = g.constant(frames.clone());
        let loss = self.caption_loss(&g, &p, x, caption)?;
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss)?, self.store.collect_grads(&p, &grads)))
    }

    /// Loss without building gradients.
    pub fn loss(&self, frames: &Tensor, caption: &[usize]) -> Result<f64> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let x = g.constant(frames.clone());
        let loss = self.caption_loss(&g, &p, x, caption)?;
        Ok(g.scalar(loss)?)
    }

    /// One optimizer update on a single pair; returns the pre-update loss.
    pub fn train_step(
        &mut self,
        frames: &Tensor,
        caption: &[usize],
        opt: &mut Adam,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(frames, caption)?;
        opt.step(&mut self.store, &grads);
        Ok(loss)
    }

    /// Greedy decoding from the start marker until the end marker or
    /// `max_len` steps. Markers are never emitted.
    pub fn infer(&self, frames: &Tensor, max_len: usize) -> Result<Vec<usize>> {
        Ok(self.infer_traced(frames, max_len)?.tokens)
    }

    pub fn infer_traced(&self, frames: &Tensor, max_len: usize) -> Result<DecodeTrace> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let x = g.constant(frames.clone());
        let enc = self.encode(&g, &p, x)?;
        let c_shp = self.spatial_hard_pull(&g, &p, enc.td_outputs)?;
        let decoder = self.decoder_cell.fuse(&g, &p)?;
        let mut trace = DecodeTrace {
            h_layers: enc
                .h_layers
                .iter()
                .map(|&h| g.value(h))
                .collect::<std::result::Result<_, _>>()?,
            ..Default::default()
        };
        let mut state = enc.final_state;
        let mut prev = START;
        for _ in 0..max_len {
            let ctx = self.stacked_attention(&g, &p, &enc.h_layers, state.h)?;
            trace.attention.push(
                ctx.weights
                    .iter()
                    .map(|&w| g.value(w))
                    .collect::<std::result::Result<_, _>>()?,
            );
            trace.contexts.push(
                ctx.contexts
                    .iter()
                    .map(|&c| g.value(c))
                    .collect::<std::result::Result<_, _>>()?,
            );
            let (logits, next) =
                self.decode_step(&g, &p, &decoder, prev, state, ctx.c_st, c_shp)?;
            state = next;
            let token = g.value(logits)?.argmax();
            if token == END {
                break;
            }
            if token != PAD && token != START {
                trace.tokens.push(token);
            }
            prev = token;
        }
        Ok(trace)
    }
}
