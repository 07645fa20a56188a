//! Transformer encoder-decoder over point-proxy sequences, with one learned
//! domain token prepended to each side (slot 0).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tape::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Number of dynamic queries, equal to the number of coarse points.
    pub n_queries: usize,
    pub pooling: Pooling,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            heads: 4,
            ffn_dim: 256,
            enc_layers: 4,
            dec_layers: 4,
            n_queries: 64,
            pooling: Pooling::Max,
        }
    }
}

/// The learned domain proxy (encoder) and domain query (decoder) with their
/// positional vectors. One set per model, shared by every sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DomainTokens {
    pub q_enc: ParamId,
    pub pos_enc: ParamId,
    pub q_dec: ParamId,
    pub pos_dec: ParamId,
}

impl DomainTokens {
    fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        let mut init = |name: &str| {
            let data = (0..d).map(|_| rng.random_range(-0.02..0.02)).collect();
            store.add(format!("domain.{name}"), Tensor::from_vec(1, d, data))
        };
        Self {
            q_enc: init("q_enc"),
            pos_enc: init("pos_enc"),
            q_dec: init("q_dec"),
            pos_dec: init("pos_dec"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Multi-head scaled dot-product attention of `x` over `memory`. Returns the
    /// output and the per-head attention matrices.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
    ) -> (Var, Vec<Var>) {
        let d = g.shape(x).1;
        let hd = d / self.heads;
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
            maps.push(attn);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        (self.o.forward(g, store, cat), maps)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Slot 0 of the encoded sequence, `1 × d`.
    pub proxy_out: Var,
    /// Slots 1..=N, `N × d`.
    pub token_out: Var,
    /// Pooled `token_out`, `1 × d`.
    pub global_feature: Var,
    /// Positional vectors handed to the decoder, `N × d`.
    pub pos_dec: Var,
    /// Self-attention maps, one list of per-head matrices per layer.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct Queries {
    /// `N × 3`
    pub coarse: Var,
    /// `N × d`
    pub tokens: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Slot 0 after the last layer, `1 × d`.
    pub query_out: Var,
    /// Slots 1..=N after every layer.
    pub dynamic_out: Vec<Var>,
    /// Cross-attention maps per layer and head.
    pub cross_attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seq2Seq {
    pub cfg: Seq2SeqConfig,
    pub domain: DomainTokens,
    encoder: Vec<EncoderBlock>,
    enc_norm: LayerNorm,
    pos_dec: Linear,
    coarse: Mlp,
    query: Mlp,
    decoder: Vec<DecoderBlock>,
    dec_norm: LayerNorm,
}

impl Seq2Seq {
    pub fn new(store: &mut ParamStore, cfg: Seq2SeqConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::config(format!(
                "embed_dim {d} is not divisible by heads {}",
                cfg.heads
            )));
        }
        if cfg.dec_layers == 0 || cfg.enc_layers == 0 {
            return Err(Error::config("encoder and decoder need at least one layer"));
        }
        let domain = DomainTokens::new(store, d, rng);
        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("encoder.{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    attn: Attention::new(store, &format!("{n}.attn"), d, cfg.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                    ffn: Mlp::new(
                        store,
                        &format!("{n}.ffn"),
                        &[d, cfg.ffn_dim, d],
                        Activation::Gelu,
                        rng,
                    ),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, "encoder.norm", d);
        let pos_dec = Linear::new(store, "encoder.pos_dec", d, d, rng);
        let coarse = Mlp::new(
            store,
            "querygen.coarse",
            &[d, cfg.ffn_dim, 3 * cfg.n_queries],
            Activation::Gelu,
            rng,
        );
        let query = Mlp::new(
            store,
            "querygen.query",
            &[3 + d, d, d],
            Activation::Gelu,
            rng,
        );
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("decoder.{i}");
                DecoderBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    self_attn: Attention::new(store, &format!("{n}.self"), d, cfg.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                    cross_attn: Attention::new(store, &format!("{n}.cross"), d, cfg.heads, rng),
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), d),
                    ffn: Mlp::new(
                        store,
                        &format!("{n}.ffn"),
                        &[d, cfg.ffn_dim, d],
                        Activation::Gelu,
                        rng,
                    ),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, "decoder.norm", d);
        Ok(Self {
            cfg,
            domain,
            encoder,
            enc_norm,
            pos_dec,
            coarse,
            query,
            decoder,
            dec_norm,
        })
    }

    /// `[q_enc; f^1..f^N] + [Pos_enc; pos^1..pos^N]`
    pub fn build_encoder_input(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &TokenSequence,
    ) -> Result<Var> {
        self.augment(
            g,
            store,
            seq.tokens,
            seq.positions,
            self.domain.q_enc,
            self.domain.pos_enc,
        )
    }

    /// `[q_dec; queries] + [pos'_dec; pos'^1..pos'^N]`
    pub fn build_decoder_input(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        pos: Var,
    ) -> Result<Var> {
        self.augment(
            g,
            store,
            queries,
            pos,
            self.domain.q_dec,
            self.domain.pos_dec,
        )
    }

    fn augment(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        positions: Var,
        slot_token: ParamId,
        slot_pos: ParamId,
    ) -> Result<Var> {
        let d = self.cfg.embed_dim;
        let (ts, ps) = (g.shape(tokens), g.shape(positions));
        if ts.1 != d || ps != ts {
            return Err(Error::config(format!(
                "token shape {ts:?} / position shape {ps:?} do not match embed_dim {d}"
            )));
        }
        let q = g.param(store, slot_token);
        let qp = g.param(store, slot_pos);
        let seq = g.concat_rows(&[q, tokens]);
        let pos = g.concat_rows(&[qp, positions]);
        Ok(g.add(seq, pos))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x_e: Var) -> EncoderOutput {
        let mut x = x_e;
        let mut attention = Vec::with_capacity(self.encoder.len());
        for blk in &self.encoder {
            let h = blk.ln1.forward(g, store, x);
            let (a, maps) = blk.attn.forward(g, store, h, h);
            x = g.add(x, a);
            let h = blk.ln2.forward(g, store, x);
            let f = blk.ffn.forward(g, store, h);
            x = g.add(x, f);
            attention.push(maps);
        }
        let x = self.enc_norm.forward(g, store, x);
        let len = g.shape(x).0;
        let proxy_out = g.slice_rows(x, 0, 1);
        let token_out = g.slice_rows(x, 1, len - 1);
        let global_feature = match self.cfg.pooling {
            Pooling::Max => g.max_rows(token_out),
            Pooling::Mean => g.mean_rows(token_out),
        };
        let pos_dec = self.pos_dec.forward(g, store, token_out);
        EncoderOutput {
            proxy_out,
            token_out,
            global_feature,
            pos_dec,
            attention,
        }
    }

    /// Coarse points from the global feature, and one dynamic query per coarse
    /// point from `(point, global feature)`.
    pub fn generate_queries(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncoderOutput,
    ) -> Queries {
        let n = self.cfg.n_queries;
        let flat = self.coarse.forward(g, store, enc.global_feature);
        let coarse = g.reshape(flat, n, 3);
        let glob = g.gather_rows(enc.global_feature, &vec![0; n]);
        let input = g.concat_cols(&[coarse, glob]);
        let tokens = self.query.forward(g, store, input);
        Queries { coarse, tokens }
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_d: Var,
        enc: &EncoderOutput,
    ) -> DecoderOutput {
        let mut x = x_d;
        let len = g.shape(x).0;
        let mut dynamic_out = Vec::with_capacity(self.decoder.len());
        let mut cross_attention = Vec::with_capacity(self.decoder.len());
        let mut last = x;
        for blk in &self.decoder {
            let h = blk.ln1.forward(g, store, x);
            let (a, _) = blk.self_attn.forward(g, store, h, h);
            x = g.add(x, a);
            let h = blk.ln2.forward(g, store, x);
            let (c, maps) = blk.cross_attn.forward(g, store, h, enc.token_out);
            x = g.add(x, c);
            let h = blk.ln3.forward(g, store, x);
            let f = blk.ffn.forward(g, store, h);
            x = g.add(x, f);
            last = self.dec_norm.forward(g, store, x);
            dynamic_out.push(g.slice_rows(last, 1, len - 1));
            cross_attention.push(maps);
        }
        DecoderOutput {
            query_out: g.slice_rows(last, 0, 1),
            dynamic_out,
            cross_attention,
        }
    }
}
