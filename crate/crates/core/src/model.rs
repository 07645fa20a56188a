//! The assembled completion network: backbone, encoder-decoder, per-layer head,
//! refiner and the four domain discriminators, sharing one parameter store.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{Discriminator, DiscriminatorKind};
use crate::backbone::{Backbone, BackboneConfig, ProxyInput, TokenSequence};
use crate::error::{Error, Result};
use crate::geometry::{resample, PointCloud};
use crate::head::{vote_mean_var, HeadConfig, HeadKind, LayerHead, PredictionSet, Refiner};
use crate::nn::ParamStore;
use crate::seq2seq::{DecoderOutput, EncoderOutput, Pooling, Seq2Seq, Seq2SeqConfig};
use crate::tape::{Graph, Var};

/// Seed of the resampling that brings inputs to `n_input` points.
pub const INPUT_RESAMPLE_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Every input is resampled to this many points before proxy extraction.
    pub n_input: usize,
    pub n_proxies: usize,
    pub embed_dim: usize,
    pub knn_k: usize,
    pub edge_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Dynamic queries, which is also the coarse point count.
    pub n_queries: usize,
    pub pooling: Pooling,
    pub head: HeadKind,
    pub up_factor: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_input: 256,
            n_proxies: 64,
            embed_dim: 128,
            knn_k: 8,
            edge_dim: 64,
            heads: 4,
            ffn_dim: 256,
            enc_layers: 4,
            dec_layers: 4,
            n_queries: 64,
            pooling: Pooling::Max,
            head: HeadKind::Spd,
            up_factor: 8,
            head_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_input", self.n_input),
            ("n_proxies", self.n_proxies),
            ("embed_dim", self.embed_dim),
            ("knn_k", self.knn_k),
            ("edge_dim", self.edge_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("n_queries", self.n_queries),
            ("up_factor", self.up_factor),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.n_proxies > self.n_input {
            return Err(Error::config(format!(
                "n_proxies {} exceeds n_input {}",
                self.n_proxies, self.n_input
            )));
        }
        if self.knn_k > self.n_input {
            return Err(Error::config("knn_k exceeds n_input"));
        }
        // decoder positions are a projection of the N encoder tokens
        if self.n_queries != self.n_proxies {
            return Err(Error::config(format!(
                "n_queries {} must equal n_proxies {}",
                self.n_queries, self.n_proxies
            )));
        }
        Ok(())
    }

    pub fn dense_points(&self) -> usize {
        self.n_queries * self.up_factor
    }

    fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            n_proxies: self.n_proxies,
            embed_dim: self.embed_dim,
            knn_k: self.knn_k,
            edge_dim: self.edge_dim,
        }
    }

    fn seq2seq(&self) -> Seq2SeqConfig {
        Seq2SeqConfig {
            embed_dim: self.embed_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            n_queries: self.n_queries,
            pooling: self.pooling,
        }
    }

    fn head(&self) -> HeadConfig {
        HeadConfig {
            kind: self.head,
            up_factor: self.up_factor,
            embed_dim: self.embed_dim,
            hidden: self.head_hidden,
        }
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub proxies: TokenSequence,
    pub enc: EncoderOutput,
    pub dec: DecoderOutput,
    pub pred: PredictionSet,
}

impl Forward {
    /// Final-layer dynamic queries.
    pub fn final_queries(&self) -> Var {
        *self
            .dec
            .dynamic_out
            .last()
            .expect("at least one decoder layer")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionNet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub seq2seq: Seq2Seq,
    pub layer_head: LayerHead,
    pub refiner: Refiner,
    pub discriminators: Vec<Discriminator>,
}

/// On-disk weights: the configuration plus every named parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl CompletionNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg.backbone(), &mut rng);
        let seq2seq = Seq2Seq::new(&mut store, cfg.seq2seq(), &mut rng)?;
        let layer_head = LayerHead::new(&mut store, cfg.embed_dim, cfg.head_hidden, &mut rng);
        let refiner = Refiner::new(&mut store, &cfg.head(), &mut rng);
        let discriminators = DiscriminatorKind::ALL
            .iter()
            .map(|&k| Discriminator::new(&mut store, k, cfg.embed_dim, &mut rng))
            .collect();
        Ok(Self {
            cfg,
            store,
            backbone,
            seq2seq,
            layer_head,
            refiner,
            discriminators,
        })
    }

    pub fn discriminator(&self, kind: DiscriminatorKind) -> &Discriminator {
        self.discriminators
            .iter()
            .find(|d| d.kind == kind)
            .expect("every discriminator kind is built")
    }

    /// Resamples to `n_input` points and precomputes the proxy neighborhoods.
    pub fn prepare(&self, cloud: &PointCloud) -> Result<ProxyInput> {
        let input = if cloud.len() == self.cfg.n_input {
            cloud.clone()
        } else {
            resample(cloud, self.cfg.n_input, INPUT_RESAMPLE_SEED)?
        };
        self.backbone.prepare(&input)
    }

    pub fn forward(&self, g: &mut Graph, input: &ProxyInput) -> Forward {
        let s = &self.store;
        let proxies = self.backbone.extract_proxies(g, s, input);
        let x_e = self
            .seq2seq
            .build_encoder_input(g, s, &proxies)
            .expect("backbone width matches the encoder");
        let enc = self.seq2seq.encode(g, s, x_e);
        let queries = self.seq2seq.generate_queries(g, s, &enc);
        let x_d = self
            .seq2seq
            .build_decoder_input(g, s, queries.tokens, enc.pos_dec)
            .expect("query width matches the decoder");
        let dec = self.seq2seq.decode(g, s, x_d, &enc);
        let per_layer = self
            .layer_head
            .predict_per_layer(g, s, &dec, queries.coarse);
        let voted_mean = vote_mean_var(g, &per_layer);
        let last = *dec.dynamic_out.last().expect("at least one decoder layer");
        let dense = self.refiner.refine(g, s, last, queries.coarse);
        Forward {
            proxies,
            enc,
            dec,
            pred: PredictionSet {
                coarse: queries.coarse,
                per_layer,
                voted_mean,
                dense,
            },
        }
    }

    /// Dense completion of one partial cloud.
    pub fn complete(&self, partial: &PointCloud) -> Result<PointCloud> {
        let input = self.prepare(partial)?;
        let mut g = Graph::new();
        let f = self.forward(&mut g, &input);
        PointCloud::new(g.value(f.pred.dense).to_points())
    }

    /// Pooled encoder feature of one partial cloud.
    pub fn global_feature(&self, partial: &PointCloud) -> Result<Vec<f64>> {
        let input = self.prepare(partial)?;
        let mut g = Graph::new();
        let proxies = self.backbone.extract_proxies(&mut g, &self.store, &input);
        let x_e = self
            .seq2seq
            .build_encoder_input(&mut g, &self.store, &proxies)?;
        let enc = self.seq2seq.encode(&mut g, &self.store, x_e);
        Ok(g.value(enc.global_feature).data.clone())
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            config: self.cfg,
            params: self.store.clone(),
        }
    }

    /// Rebuilds the architecture from the stored configuration and installs
    /// the stored parameters, checking names and shapes one by one.
    pub fn from_file(file: ModelFile) -> Result<Self> {
        let mut net = Self::new(file.config, 0)?;
        net.load_params(file.params)?;
        Ok(net)
    }

    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                self.store.len()
            )));
        }
        for id in self.store.ids() {
            let (want, got) = (self.store.value(id), params.value(id));
            if self.store.name(id) != params.name(id) || want.shape() != got.shape() {
                return Err(Error::config(format!(
                    "parameter {} ({:?}) does not match checkpoint entry {} ({:?})",
                    self.store.name(id),
                    want.shape(),
                    params.name(id),
                    got.shape()
                )));
            }
        }
        self.store = params;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(read_json(path)?)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Tiny configuration for tests and smoke runs.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_input: 32,
        n_proxies: 8,
        embed_dim: 8,
        knn_k: 4,
        edge_dim: 8,
        heads: 2,
        ffn_dim: 16,
        enc_layers: 1,
        dec_layers: 2,
        n_queries: 8,
        pooling: Pooling::Max,
        head: HeadKind::Spd,
        up_factor: 4,
        head_hidden: 8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [0; 3].map(|_: i32| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes() {
        for head in [HeadKind::Fold, HeadKind::Spd] {
            let cfg = ModelConfig {
                head,
                ..toy_config()
            };
            let net = CompletionNet::new(cfg, 1).unwrap();
            let input = net.prepare(&cloud(50, 2)).unwrap();
            let mut g = Graph::new();
            let f = net.forward(&mut g, &input);
            assert_eq!(g.shape(f.pred.coarse), (8, 3));
            assert_eq!(f.pred.per_layer.len(), 2);
            assert_eq!(g.shape(f.pred.dense), (32, 3));
            assert_eq!(g.shape(f.enc.token_out), (8, 8));
            assert_eq!(g.shape(f.enc.proxy_out), (1, 8));
            assert_eq!(g.shape(f.dec.query_out), (1, 8));
        }
    }

    #[test]
    fn completion_is_deterministic() {
        let net = CompletionNet::new(toy_config(), 3).unwrap();
        let c = cloud(20, 4);
        let a = net.complete(&c).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, net.complete(&c).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let net = CompletionNet::new(toy_config(), 5).unwrap();
        net.save(&path).unwrap();
        let back = CompletionNet::load(&path).unwrap();
        assert_eq!(back.store, net.store);
        let c = cloud(40, 6);
        assert_eq!(back.complete(&c).unwrap(), net.complete(&c).unwrap());
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let mut net = CompletionNet::new(toy_config(), 5).unwrap();
        let other = CompletionNet::new(
            ModelConfig {
                embed_dim: 16,
                ..toy_config()
            },
            5,
        )
        .unwrap();
        assert!(net.load_params(other.store).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig {
            n_proxies: 64,
            n_input: 32,
            ..toy_config()
        }
        .validate()
        .is_err());
        assert!(CompletionNet::new(
            ModelConfig {
                heads: 3,
                ..toy_config()
            },
            0
        )
        .is_err());
        assert!(ModelConfig {
            up_factor: 0,
            ..toy_config()
        }
        .validate()
        .is_err());
    }
}
