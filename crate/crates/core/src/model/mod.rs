//! Set-prediction transformer for temporal span grounding.
//!
//! The encoder runs self-attention over the concatenated sequence of
//! projected frame features and projected query features; fixed sinusoidal
//! position tables (one over frame positions, one over query slots) are added
//! to attention queries and keys at every layer, never to values. The decoder
//! turns a sliced block of learnable proposal embeddings into span
//! predictions in parallel, using the proposals both as initial content and
//! as positional queries. Every decoder layer feeds a shared head, so
//! intermediate layers yield auxiliary predictions for deep supervision.

pub mod config;
pub mod pos;

pub use config::ModelConfig;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::span::TimeSpan;
use crate::tensor::{Graph, Tensor, TensorId};

/// Dropout behaviour of a forward pass. Training draws per-element masks
/// from the supplied stream; evaluation applies none.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha20Rng },
    Eval,
}

/// Borrowed views of one sample's raw features. `queries` may carry extra
/// padded rows (any content); only the first `k_real` count.
#[derive(Clone, Copy)]
pub struct SampleView<'a> {
    pub frames: &'a [f64],
    pub queries: &'a [f64],
    pub k_real: usize,
    pub k_padded: usize,
}

/// Differentiable handles for one decoder layer's predictions.
#[derive(Clone, Copy)]
pub struct LayerOut {
    /// `n x 2` span endpoints in [0, 1], start <= end rowwise.
    pub spans: TensorId,
    /// `n x k_real` correspondence, rows sum to 1.
    pub corr: TensorId,
}

/// Result of one forward pass, staying inside the graph so losses can be
/// built on top. The last layer is the main prediction; earlier layers are
/// auxiliary.
pub struct ForwardPass {
    pub layers: Vec<LayerOut>,
    /// Head-averaged encoder-decoder attention of the last decoder layer,
    /// pre-dropout, `n x (t + k_real)` row-major.
    pub cross_attention: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub t: usize,
}

/// Plain-value snapshot of a forward pass for metrics and rendering.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub spans: Vec<TimeSpan>,
    /// `n x k` row-major; rows sum to 1.
    pub correspondence: Vec<f64>,
    /// Intermediate decoder layers, oldest first.
    pub aux: Vec<(Vec<TimeSpan>, Vec<f64>)>,
    /// `n x (t + k)` row-major; rows sum to 1.
    pub cross_attention: Vec<f64>,
    pub n_proposals: usize,
    pub n_queries: usize,
    pub frame_count: usize,
}

struct AttnIds {
    qw: TensorId,
    qb: TensorId,
    kw: TensorId,
    kb: TensorId,
    vw: TensorId,
    vb: TensorId,
    ow: TensorId,
    ob: TensorId,
}

struct EncLayerIds {
    attn: AttnIds,
    ln1g: TensorId,
    ln1b: TensorId,
    ffn_w1: TensorId,
    ffn_b1: TensorId,
    ffn_w2: TensorId,
    ffn_b2: TensorId,
    ln2g: TensorId,
    ln2b: TensorId,
}

struct DecLayerIds {
    self_attn: AttnIds,
    ln1g: TensorId,
    ln1b: TensorId,
    cross_attn: AttnIds,
    ln2g: TensorId,
    ln2b: TensorId,
    ffn_w1: TensorId,
    ffn_b1: TensorId,
    ffn_w2: TensorId,
    ffn_b2: TensorId,
    ln3g: TensorId,
    ln3b: TensorId,
}

/// Parameter leaves bound into one graph, resolved to typed handles once per
/// graph instead of by name per op.
pub struct Bound {
    /// Leaf ids in parameter registration order, for gradient readout.
    pub leaf_ids: Vec<TensorId>,
    in_video_w: TensorId,
    in_video_b: TensorId,
    in_query_w: TensorId,
    in_query_b: TensorId,
    enc: Vec<EncLayerIds>,
    dec: Vec<DecLayerIds>,
    head_w1: TensorId,
    head_b1: TensorId,
    head_w2: TensorId,
    head_b2: TensorId,
    proposals: TensorId,
    pe_video: TensorId,
    pe_query: TensorId,
}

pub struct GroundingModel {
    config: ModelConfig,
    pub params: ParamStore,
    pe_video: Tensor,
    pe_query: Tensor,
}

impl GroundingModel {
    /// Builds the parameter layout for `config`; weights start at zero until
    /// [`GroundingModel::init`] seeds them.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut p = ParamStore::new();
        p.register("in.video.w", ParamKind::Weight, config.d_in, d)?;
        p.register("in.video.b", ParamKind::Bias, 1, d)?;
        p.register("in.query.w", ParamKind::Weight, config.d_in, d)?;
        p.register("in.query.b", ParamKind::Bias, 1, d)?;
        for l in 0..config.n_enc_layers {
            register_attn(&mut p, &format!("enc{l}.attn"), d)?;
            register_ln(&mut p, &format!("enc{l}.ln1"), d)?;
            register_ffn(&mut p, &format!("enc{l}.ffn"), d, config.ffn_width)?;
            register_ln(&mut p, &format!("enc{l}.ln2"), d)?;
        }
        for l in 0..config.n_dec_layers {
            register_attn(&mut p, &format!("dec{l}.self"), d)?;
            register_ln(&mut p, &format!("dec{l}.ln1"), d)?;
            register_attn(&mut p, &format!("dec{l}.cross"), d)?;
            register_ln(&mut p, &format!("dec{l}.ln2"), d)?;
            register_ffn(&mut p, &format!("dec{l}.ffn"), d, config.ffn_width)?;
            register_ln(&mut p, &format!("dec{l}.ln3"), d)?;
        }
        p.register("head.w1", ParamKind::Weight, d, d)?;
        p.register("head.b1", ParamKind::Bias, 1, d)?;
        p.register("head.w2", ParamKind::Weight, d, 2)?;
        p.register("head.b2", ParamKind::Bias, 1, 2)?;
        p.register("proposals", ParamKind::Proposal, config.n_proposal_slots(), d)?;

        let pe_video = Tensor::from_vec(
            config.frame_count,
            d,
            pos::sinusoidal_table(config.frame_count, d),
        )?;
        let pe_query =
            Tensor::from_vec(config.max_queries, d, pos::sinusoidal_table(config.max_queries, d))?;
        Ok(Self {
            config,
            params: p,
            pe_video,
            pe_query,
        })
    }

    /// Seeds every parameter deterministically.
    pub fn init(&mut self, seed: u64) {
        self.params.init(seed);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Binds parameters into `g`. With `train` false the leaves are frozen
    /// and backward never reaches them.
    pub fn bind(&self, g: &mut Graph, train: bool) -> Bound {
        let ids: Vec<TensorId> = self
            .params
            .iter()
            .map(|(_, t)| if train { g.leaf(t) } else { g.leaf_frozen(t) })
            .collect();
        self.bound_from(g, &ids).expect("own layout is consistent")
    }

    /// Binds from externally created leaves, in parameter registration
    /// order. Used by gradient checking to perturb parameters as inputs.
    pub fn bind_external(&self, g: &mut Graph, ids: &[TensorId]) -> Result<Bound> {
        if ids.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter leaves, got {}",
                self.params.len(),
                ids.len()
            )));
        }
        self.bound_from(g, ids)
    }

    fn bound_from(&self, g: &mut Graph, ids: &[TensorId]) -> Result<Bound> {
        let pos = |name: &str| -> Result<TensorId> {
            self.params
                .position(name)
                .map(|i| ids[i])
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let attn = |prefix: &str| -> Result<AttnIds> {
            Ok(AttnIds {
                qw: pos(&format!("{prefix}.q.w"))?,
                qb: pos(&format!("{prefix}.q.b"))?,
                kw: pos(&format!("{prefix}.k.w"))?,
                kb: pos(&format!("{prefix}.k.b"))?,
                vw: pos(&format!("{prefix}.v.w"))?,
                vb: pos(&format!("{prefix}.v.b"))?,
                ow: pos(&format!("{prefix}.o.w"))?,
                ob: pos(&format!("{prefix}.o.b"))?,
            })
        };
        let mut enc = Vec::with_capacity(self.config.n_enc_layers);
        for l in 0..self.config.n_enc_layers {
            enc.push(EncLayerIds {
                attn: attn(&format!("enc{l}.attn"))?,
                ln1g: pos(&format!("enc{l}.ln1.g"))?,
                ln1b: pos(&format!("enc{l}.ln1.b"))?,
                ffn_w1: pos(&format!("enc{l}.ffn.w1"))?,
                ffn_b1: pos(&format!("enc{l}.ffn.b1"))?,
                ffn_w2: pos(&format!("enc{l}.ffn.w2"))?,
                ffn_b2: pos(&format!("enc{l}.ffn.b2"))?,
                ln2g: pos(&format!("enc{l}.ln2.g"))?,
                ln2b: pos(&format!("enc{l}.ln2.b"))?,
            });
        }
        let mut dec = Vec::with_capacity(self.config.n_dec_layers);
        for l in 0..self.config.n_dec_layers {
            dec.push(DecLayerIds {
                self_attn: attn(&format!("dec{l}.self"))?,
                ln1g: pos(&format!("dec{l}.ln1.g"))?,
                ln1b: pos(&format!("dec{l}.ln1.b"))?,
                cross_attn: attn(&format!("dec{l}.cross"))?,
                ln2g: pos(&format!("dec{l}.ln2.g"))?,
                ln2b: pos(&format!("dec{l}.ln2.b"))?,
                ffn_w1: pos(&format!("dec{l}.ffn.w1"))?,
                ffn_b1: pos(&format!("dec{l}.ffn.b1"))?,
                ffn_w2: pos(&format!("dec{l}.ffn.w2"))?,
                ffn_b2: pos(&format!("dec{l}.ffn.b2"))?,
                ln3g: pos(&format!("dec{l}.ln3.g"))?,
                ln3b: pos(&format!("dec{l}.ln3.b"))?,
            });
        }
        Ok(Bound {
            leaf_ids: ids.to_vec(),
            in_video_w: pos("in.video.w")?,
            in_video_b: pos("in.video.b")?,
            in_query_w: pos("in.query.w")?,
            in_query_b: pos("in.query.b")?,
            enc,
            dec,
            head_w1: pos("head.w1")?,
            head_b1: pos("head.b1")?,
            head_w2: pos("head.w2")?,
            head_b2: pos("head.b2")?,
            proposals: pos("proposals")?,
            pe_video: g.leaf_frozen(&self.pe_video),
            pe_query: g.leaf_frozen(&self.pe_query),
        })
    }

    fn check_view(&self, view: &SampleView) -> Result<()> {
        let c = &self.config;
        if view.frames.len() != c.frame_count * c.d_in {
            return Err(Error::Shape(format!(
                "frames: {} values, expected {} x {}",
                view.frames.len(),
                c.frame_count,
                c.d_in
            )));
        }
        if view.queries.len() != view.k_padded * c.d_in {
            return Err(Error::Shape(format!(
                "queries: {} values, expected {} x {}",
                view.queries.len(),
                view.k_padded,
                c.d_in
            )));
        }
        if view.k_real == 0 || view.k_real > view.k_padded || view.k_padded > c.max_queries {
            return Err(Error::Shape(format!(
                "query counts: k_real {} of k_padded {} (max {})",
                view.k_real, view.k_padded, c.max_queries
            )));
        }
        Ok(())
    }

    /// Joint positional table for the encoder sequence `[frames; queries]`.
    fn joint_pe(&self, g: &mut Graph, bound: &Bound, k_padded: usize) -> Result<TensorId> {
        let pe_q = g.slice_rows(bound.pe_query, 0, k_padded)?;
        g.concat_rows(&[bound.pe_video, pe_q])
    }

    /// Key mask excluding padded query slots; `None` when nothing is padded.
    fn pad_mask(&self, view: &SampleView) -> Option<Arc<Vec<bool>>> {
        if view.k_real == view.k_padded {
            return None;
        }
        let t = self.config.frame_count;
        let s = t + view.k_padded;
        let mut m = vec![false; s];
        for slot in m.iter_mut().take(s).skip(t + view.k_real) {
            *slot = true;
        }
        Some(Arc::new(m))
    }

    /// Encodes one sample into memory of shape `(frame_count + k_padded) x
    /// d_model`. With zero encoder layers this is exactly the input
    /// projection.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        view: &SampleView,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        self.check_view(view)?;
        let c = &self.config;
        let frames = g.constant(c.frame_count, c.d_in, view.frames.to_vec())?;
        let queries = g.constant(view.k_padded, c.d_in, view.queries.to_vec())?;
        let v0 = g.matmul(frames, bound.in_video_w)?;
        let v = g.add_row(v0, bound.in_video_b)?;
        let q0 = g.matmul(queries, bound.in_query_w)?;
        let q = g.add_row(q0, bound.in_query_b)?;
        let mut x = g.concat_rows(&[v, q])?;

        let pe = self.joint_pe(g, bound, view.k_padded)?;
        let mask = self.pad_mask(view);
        for layer in &bound.enc {
            let qk = g.add(x, pe)?;
            let (attn, _) = self.mha(g, &layer.attn, qk, qk, x, mask.as_ref(), mode, false)?;
            x = self.post_norm(g, x, attn, layer.ln1g, layer.ln1b)?;
            let f = self.ffn(
                g,
                x,
                layer.ffn_w1,
                layer.ffn_b1,
                layer.ffn_w2,
                layer.ffn_b2,
                mode,
            )?;
            x = self.post_norm(g, x, f, layer.ln2g, layer.ln2b)?;
        }
        Ok(x)
    }

    /// Decodes `proposals_per_query * k_real` candidates against the memory.
    pub fn decode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        memory: TensorId,
        view: &SampleView,
        mode: &mut Mode,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        let t = c.frame_count;
        let k = view.k_real;
        let n = c.proposals_per_query * k;
        let prop = g.slice_rows(bound.proposals, 0, n)?;
        let pe = self.joint_pe(g, bound, view.k_padded)?;
        let mask = self.pad_mask(view);
        let text_mem = g.slice_rows(memory, t, k)?;

        let mut y = prop;
        let mut layers = Vec::with_capacity(c.n_dec_layers);
        let mut cross_attention = Vec::new();
        for (l, layer) in bound.dec.iter().enumerate() {
            let last = l + 1 == bound.dec.len();
            let qk = g.add(y, prop)?;
            let (sa, _) = self.mha(g, &layer.self_attn, qk, qk, y, None, mode, false)?;
            y = self.post_norm(g, y, sa, layer.ln1g, layer.ln1b)?;

            let q2 = g.add(y, prop)?;
            let k2 = g.add(memory, pe)?;
            let (ca, rec) =
                self.mha(g, &layer.cross_attn, q2, k2, memory, mask.as_ref(), mode, last)?;
            y = self.post_norm(g, y, ca, layer.ln2g, layer.ln2b)?;

            let f = self.ffn(
                g,
                y,
                layer.ffn_w1,
                layer.ffn_b1,
                layer.ffn_w2,
                layer.ffn_b2,
                mode,
            )?;
            y = self.post_norm(g, y, f, layer.ln3g, layer.ln3b)?;

            layers.push(self.head(g, bound, y, text_mem)?);
            if let Some(rec) = rec {
                // Drop padded key columns; they are exactly zero.
                let s_padded = t + view.k_padded;
                let s_real = t + k;
                let mut trimmed = Vec::with_capacity(n * s_real);
                for r in 0..n {
                    trimmed.extend_from_slice(&rec[r * s_padded..r * s_padded + s_real]);
                }
                cross_attention = trimmed;
            }
        }
        Ok(ForwardPass {
            layers,
            cross_attention,
            n,
            k,
            t,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        view: &SampleView,
        mode: &mut Mode,
    ) -> Result<ForwardPass> {
        let memory = self.encode(g, bound, view, mode)?;
        self.decode(g, bound, memory, view, mode)
    }

    /// Shared prediction head: sigmoid span endpoints ordered by min/max,
    /// plus temperature-softmaxed cosine correspondence against the encoded
    /// queries.
    fn head(&self, g: &mut Graph, bound: &Bound, y: TensorId, text_mem: TensorId) -> Result<LayerOut> {
        let h0 = g.matmul(y, bound.head_w1)?;
        let h1 = g.add_row(h0, bound.head_b1)?;
        let h = g.relu(h1);
        let r0 = g.matmul(h, bound.head_w2)?;
        let raw = g.add_row(r0, bound.head_b2)?;
        let sq = g.sigmoid(raw);
        let a = g.slice_cols(sq, 0, 1)?;
        let b = g.slice_cols(sq, 1, 1)?;
        let s = g.min2(a, b)?;
        let e = g.max2(a, b)?;
        let spans = g.concat_cols(&[s, e])?;

        let cos = g.cosine_rows(y, text_mem)?;
        let logits = g.scale(cos, 1.0 / self.config.corr_temperature);
        let corr = g.softmax_rows(logits, None)?;
        Ok(LayerOut { spans, corr })
    }

    #[allow(clippy::too_many_arguments)]
    fn ffn(
        &self,
        g: &mut Graph,
        x: TensorId,
        w1: TensorId,
        b1: TensorId,
        w2: TensorId,
        b2: TensorId,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let h0 = g.matmul(x, w1)?;
        let h1 = g.add_row(h0, b1)?;
        let h = g.relu(h1);
        let hd = self.maybe_dropout(g, h, mode)?;
        let o0 = g.matmul(hd, w2)?;
        g.add_row(o0, b2)
    }

    fn post_norm(
        &self,
        g: &mut Graph,
        x: TensorId,
        sub: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId> {
        let s = g.add(x, sub)?;
        g.layer_norm(s, gain, bias)
    }

    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        g: &mut Graph,
        p: &AttnIds,
        q_in: TensorId,
        k_in: TensorId,
        v_in: TensorId,
        key_mask: Option<&Arc<Vec<bool>>>,
        mode: &mut Mode,
        record: bool,
    ) -> Result<(TensorId, Option<Vec<f64>>)> {
        let d = self.config.d_model;
        let nh = self.config.n_heads;
        let dk = d / nh;
        let q0 = g.matmul(q_in, p.qw)?;
        let q = g.add_row(q0, p.qb)?;
        let k0 = g.matmul(k_in, p.kw)?;
        let k = g.add_row(k0, p.kb)?;
        let v0 = g.matmul(v_in, p.vw)?;
        let v = g.add_row(v0, p.vb)?;

        let (m, _) = g.shape(q);
        let (s, _) = g.shape(k);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(nh);
        let mut rec = if record { Some(vec![0.0; m * s]) } else { None };
        for h in 0..nh {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let sc0 = g.matmul_nt(qh, kh)?;
            let sc = g.scale(sc0, scale);
            let w = g.softmax_rows(sc, key_mask.cloned())?;
            if let Some(buf) = &mut rec {
                for (dst, src) in buf.iter_mut().zip(g.value(w)) {
                    *dst += src / nh as f64;
                }
            }
            let wd = self.maybe_dropout(g, w, mode)?;
            heads.push(g.matmul(wd, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let o0 = g.matmul(cat, p.ow)?;
        let out = g.add_row(o0, p.ob)?;
        Ok((out, rec))
    }

    fn maybe_dropout(&self, g: &mut Graph, x: TensorId, mode: &mut Mode) -> Result<TensorId> {
        let p = self.config.dropout;
        match mode {
            Mode::Train { rng } if p > 0.0 => {
                let (r, c) = g.shape(x);
                let keep = 1.0 - p;
                let mask: Vec<f64> = (0..r * c)
                    .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                g.dropout(x, Arc::new(mask))
            }
            _ => Ok(x),
        }
    }

    /// Copies a finished pass out of the graph as plain values.
    pub fn read_output(&self, g: &Graph, fp: &ForwardPass) -> Result<ModelOutput> {
        let read_layer = |lo: &LayerOut| -> Result<(Vec<TimeSpan>, Vec<f64>)> {
            let sv = g.value(lo.spans);
            let spans = sv
                .chunks_exact(2)
                .map(|p| TimeSpan::new(p[0], p[1]))
                .collect::<Result<Vec<_>>>()?;
            Ok((spans, g.value(lo.corr).to_vec()))
        };
        let (spans, correspondence) = read_layer(fp.layers.last().expect("decoder has layers"))?;
        let aux = fp.layers[..fp.layers.len() - 1]
            .iter()
            .map(read_layer)
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelOutput {
            spans,
            correspondence,
            aux,
            cross_attention: fp.cross_attention.clone(),
            n_proposals: fp.n,
            n_queries: fp.k,
            frame_count: fp.t,
        })
    }

    /// One evaluation forward on raw features, no padding, fresh graph.
    pub fn infer(&self, frames: &[f64], queries: &[f64], k: usize) -> Result<ModelOutput> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let view = SampleView {
            frames,
            queries,
            k_real: k,
            k_padded: k,
        };
        let fp = self.forward(&mut g, &bound, &view, &mut Mode::Eval)?;
        self.read_output(&g, &fp)
    }
}

fn register_attn(p: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        p.register(&format!("{prefix}.{part}.w"), ParamKind::Weight, d, d)?;
        p.register(&format!("{prefix}.{part}.b"), ParamKind::Bias, 1, d)?;
    }
    Ok(())
}

fn register_ln(p: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    p.register(&format!("{prefix}.g"), ParamKind::Gain, 1, d)?;
    p.register(&format!("{prefix}.b"), ParamKind::Bias, 1, d)
}

fn register_ffn(p: &mut ParamStore, prefix: &str, d: usize, width: usize) -> Result<()> {
    p.register(&format!("{prefix}.w1"), ParamKind::Weight, d, width)?;
    p.register(&format!("{prefix}.b1"), ParamKind::Bias, 1, width)?;
    p.register(&format!("{prefix}.w2"), ParamKind::Weight, width, d)?;
    p.register(&format!("{prefix}.b2"), ParamKind::Bias, 1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 2,
            ffn_width: 64,
            proposals_per_query: 3,
            max_queries: 3,
            frame_count: 8,
            d_in: 6,
            dropout: 0.1,
            corr_temperature: 0.07,
        }
    }

    fn tiny_model(seed: u64) -> GroundingModel {
        let mut m = GroundingModel::new(tiny_config()).unwrap();
        m.init(seed);
        m
    }

    fn random_features(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn output_shapes_and_distributions() {
        let m = tiny_model(3);
        let c = m.config().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let k = 2;
        let frames = random_features(&mut rng, c.frame_count * c.d_in, 1.0);
        let queries = random_features(&mut rng, k * c.d_in, 1.0);
        let out = m.infer(&frames, &queries, k).unwrap();

        let n = c.proposals_per_query * k;
        assert_eq!(out.n_proposals, n);
        assert_eq!(out.n_queries, k);
        assert_eq!(out.spans.len(), n);
        assert_eq!(out.correspondence.len(), n * k);
        assert_eq!(out.aux.len(), c.n_dec_layers - 1);
        assert_eq!(out.cross_attention.len(), n * (c.frame_count + k));

        for row in out.correspondence.chunks_exact(k) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|p| *p > 0.0));
        }
        for row in out.cross_attention.chunks_exact(c.frame_count + k) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for (aux_spans, aux_corr) in &out.aux {
            assert_eq!(aux_spans.len(), n);
            assert_eq!(aux_corr.len(), n * k);
        }
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let m = tiny_model(4);
        let c = m.config();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let frames = random_features(&mut rng, c.frame_count * c.d_in, 1.0);
        let queries = random_features(&mut rng, 2 * c.d_in, 1.0);
        let a = m.infer(&frames, &queries, 2).unwrap();
        let b = m.infer(&frames, &queries, 2).unwrap();
        assert_eq!(a.correspondence, b.correspondence);
        assert_eq!(a.cross_attention, b.cross_attention);
        for (x, y) in a.spans.iter().zip(&b.spans) {
            assert_eq!(x.start(), y.start());
            assert_eq!(x.end(), y.end());
        }
    }

    #[test]
    fn padded_slots_do_not_affect_real_outputs() {
        let m = tiny_model(5);
        let c = m.config().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let k = 2;
        let frames = random_features(&mut rng, c.frame_count * c.d_in, 1.0);
        let queries = random_features(&mut rng, k * c.d_in, 1.0);

        let run = |queries_buf: &[f64], k_padded: usize| {
            let mut g = Graph::new();
            let bound = m.bind(&mut g, false);
            let view = SampleView {
                frames: &frames,
                queries: queries_buf,
                k_real: k,
                k_padded,
            };
            let fp = m.forward(&mut g, &bound, &view, &mut Mode::Eval).unwrap();
            let last = fp.layers.last().unwrap();
            (
                g.value(last.spans).to_vec(),
                g.value(last.corr).to_vec(),
                fp.cross_attention.clone(),
            )
        };

        let base = run(&queries, k);
        // Garbage in the padded slot must be invisible to the real rows.
        let mut padded = queries.clone();
        padded.extend(random_features(&mut rng, c.d_in, 1e3));
        let got = run(&padded, k + 1);

        assert!(max_abs_diff(&base.0, &got.0) < 1e-9);
        assert!(max_abs_diff(&base.1, &got.1) < 1e-9);
        assert!(max_abs_diff(&base.2, &got.2) < 1e-9);
    }

    #[test]
    fn zero_encoder_layers_memory_is_input_projection() {
        let mut cfg = tiny_config();
        cfg.n_enc_layers = 0;
        let mut m = GroundingModel::new(cfg.clone()).unwrap();
        m.init(6);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let frames = random_features(&mut rng, cfg.frame_count * cfg.d_in, 1.0);
        let queries = random_features(&mut rng, cfg.d_in, 1.0);

        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let view = SampleView {
            frames: &frames,
            queries: &queries,
            k_real: 1,
            k_padded: 1,
        };
        let memory = m.encode(&mut g, &bound, &view, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(memory), (cfg.frame_count + 1, cfg.d_model));

        let w = m.params.get("in.video.w").unwrap();
        let b = m.params.get("in.video.b").unwrap();
        let mem = g.value(memory);
        for r in 0..cfg.frame_count {
            for col in 0..cfg.d_model {
                let mut want = b.data()[col];
                for i in 0..cfg.d_in {
                    want += frames[r * cfg.d_in + i] * w.data()[i * cfg.d_model + col];
                }
                assert!((mem[r * cfg.d_model + col] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn proposal_rows_are_permutation_equivariant() {
        let mut a = tiny_model(7);
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let c = a.config().clone();
        let k = 2;
        let n = c.proposals_per_query * k;
        let frames = random_features(&mut rng, c.frame_count * c.d_in, 1.0);
        let queries = random_features(&mut rng, k * c.d_in, 1.0);
        let base = a.infer(&frames, &queries, k).unwrap();

        // Swap two proposal rows inside the active slice.
        let (i, j) = (1, n - 1);
        {
            let prop = a.params.get_mut("proposals").unwrap();
            let d = c.d_model;
            let data = prop.data_mut();
            for col in 0..d {
                data.swap(i * d + col, j * d + col);
            }
        }
        let swapped = a.infer(&frames, &queries, k).unwrap();

        let perm = |r: usize| {
            if r == i {
                j
            } else if r == j {
                i
            } else {
                r
            }
        };
        for r in 0..n {
            let p = perm(r);
            assert!((base.spans[r].start() - swapped.spans[p].start()).abs() < 1e-9);
            assert!((base.spans[r].end() - swapped.spans[p].end()).abs() < 1e-9);
            let br = &base.correspondence[r * k..(r + 1) * k];
            let sr = &swapped.correspondence[p * k..(p + 1) * k];
            assert!(max_abs_diff(br, sr) < 1e-9);
        }
    }

    #[test]
    fn train_mode_dropout_is_seeded_and_differs_from_eval() {
        let m = tiny_model(8);
        let c = m.config();
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let frames = random_features(&mut rng, c.frame_count * c.d_in, 1.0);
        let queries = random_features(&mut rng, c.d_in, 1.0);
        let view = SampleView {
            frames: &frames,
            queries: &queries,
            k_real: 1,
            k_padded: 1,
        };

        let train_pass = |seed: u64| {
            let mut g = Graph::new();
            let bound = m.bind(&mut g, true);
            let mut drop_rng = ChaCha20Rng::seed_from_u64(seed);
            let mut mode = Mode::Train { rng: &mut drop_rng };
            let fp = m.forward(&mut g, &bound, &view, &mut mode).unwrap();
            g.value(fp.layers.last().unwrap().spans).to_vec()
        };

        let a = train_pass(100);
        let b = train_pass(100);
        assert_eq!(a, b);
        let c2 = train_pass(101);
        assert_ne!(a, c2);
        let eval = m.infer(&frames, &queries, 1).unwrap();
        let eval_flat: Vec<f64> = eval
            .spans
            .iter()
            .flat_map(|s| [s.start(), s.end()])
            .collect();
        assert_ne!(a, eval_flat);
    }

    #[test]
    fn many_random_forwards_stay_finite() {
        let m = tiny_model(9);
        let c = m.config().clone();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for trial in 0..200 {
            let k = 1 + trial % c.max_queries;
            let scale = match trial % 4 {
                0 => 1.0,
                1 => 1e3,
                2 => 1e-6,
                _ => 0.0,
            };
            let frames = random_features(&mut rng, c.frame_count * c.d_in, scale);
            let queries = random_features(&mut rng, k * c.d_in, scale);
            let out = m.infer(&frames, &queries, k).unwrap();
            assert!(out.correspondence.iter().all(|v| v.is_finite()));
            assert!(out.cross_attention.iter().all(|v| v.is_finite()));
            for s in &out.spans {
                assert!(s.start().is_finite() && s.end().is_finite());
            }
        }
    }

    #[test]
    fn rejects_malformed_views() {
        let m = tiny_model(10);
        let c = m.config();
        let frames = vec![0.0; c.frame_count * c.d_in];
        let queries = vec![0.0; c.d_in];
        assert!(m.infer(&frames[1..], &queries, 1).is_err());
        assert!(m.infer(&frames, &queries, 2).is_err());
        assert!(m.infer(&frames, &queries, 0).is_err());
        let too_many = vec![0.0; (c.max_queries + 1) * c.d_in];
        assert!(m.infer(&frames, &too_many, c.max_queries + 1).is_err());
    }

    #[test]
    fn init_seed_changes_outputs() {
        let c = tiny_config();
        let mut rng = ChaCha20Rng::seed_from_u64(18);
        let frames = random_features(&mut rng, c.frame_count * c.d_in, 1.0);
        let queries = random_features(&mut rng, 2 * c.d_in, 1.0);
        let a = tiny_model(1).infer(&frames, &queries, 2).unwrap();
        let b = tiny_model(1).infer(&frames, &queries, 2).unwrap();
        let other = tiny_model(2).infer(&frames, &queries, 2).unwrap();
        assert_eq!(a.correspondence, b.correspondence);
        assert_ne!(a.correspondence, other.correspondence);
    }
}
