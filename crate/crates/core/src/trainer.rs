//! Joint optimization over labeled source and unlabeled target batches:
//! supervised completion, the four adversarial alignment terms, the voting
//! consistency term and pseudo-label supervision, with checkpoints and logs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{grl_eta, loss_domain_token, loss_token_wise, DiscriminatorKind, Domain};
use crate::backbone::ProxyInput;
use crate::datagen::{derive_seed, load_split, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::geometry::{farthest_point_sample, lexicographic_min_index, MetricKind, PointCloud};
use crate::head::completion_loss;
use crate::model::{read_json, write_json, CompletionNet, ModelConfig};
use crate::nn::{AdamW, AdamWConfig, ParamStore};
use crate::tape::{Graph, Tensor, Var};
use crate::vpc::{
    consistency_loss_with_mean, harvest_pseudo_labels, pseudo_label_loss, update_threshold,
    Candidate, PseudoLabelStore,
};

/// Weights of the alignment and consistency terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Domain-token terms (encoder and decoder slot 0).
    pub alpha: f64,
    /// Token-wise terms (point proxies and dynamic queries).
    pub beta: f64,
    /// Voting consistency.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.025,
            beta: 0.25,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    /// `α(enc_q + dec_q) + β(enc_k + dec_k) + γ·cons`
    pub fn adaptation_term(
        &self,
        enc_q: f64,
        dec_q: f64,
        enc_k: f64,
        dec_k: f64,
        cons: f64,
    ) -> f64 {
        self.alpha * (enc_q + dec_q) + self.beta * (enc_k + dec_k) + self.gamma * cons
    }
}

/// Flat run configuration. Every key has a default, so a config file only
/// lists what it changes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Samples per domain per step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub use_dqfa_enc: bool,
    pub use_dqfa_dec: bool,
    pub use_ptfa_enc: bool,
    pub use_ptfa_dec: bool,
    pub use_vpc: bool,
    pub grl_eta_max: f64,
    pub grl_warmup_frac: f64,
    pub vpc_percentile: f64,
    pub pseudo_weight: f64,
    pub pseudo_start_epoch: usize,
    /// Evaluate on the target eval split every this many epochs (0 = only
    /// after the last epoch).
    pub eval_every: usize,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 5e-5,
            batch_size: 2,
            epochs: 30,
            seed: 0,
            alpha: 0.025,
            beta: 0.25,
            gamma: 0.01,
            use_dqfa_enc: true,
            use_dqfa_dec: true,
            use_ptfa_enc: true,
            use_ptfa_dec: true,
            use_vpc: true,
            grl_eta_max: 1.0,
            grl_warmup_frac: 0.2,
            vpc_percentile: 30.0,
            pseudo_weight: 0.5,
            pseudo_start_epoch: 1,
            eval_every: 1,
            model: ModelConfig::default(),
        }
    }
}

/// Parts that can be switched off from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    /// Token-wise alignment of point proxies and dynamic queries.
    Ptfa,
    /// Domain-token alignment in encoder and decoder.
    Dqfa,
    /// Voting consistency and pseudo-labels.
    Vpc,
}

impl std::str::FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ptfa" => Ok(Component::Ptfa),
            "dqfa" => Ok(Component::Dqfa),
            "vpc" => Ok(Component::Vpc),
            other => Err(format!(
                "unknown component `{other}` (expected ptfa, dqfa or vpc)"
            )),
        }
    }
}

/// The five ablation rows, from source-only to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    SourceOnly,
    Ptfa,
    Dqfa,
    PtfaDqfa,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SourceOnly,
        Variant::Ptfa,
        Variant::Dqfa,
        Variant::PtfaDqfa,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source-only",
            Variant::Ptfa => "ptfa",
            Variant::Dqfa => "dqfa",
            Variant::PtfaDqfa => "ptfa+dqfa",
            Variant::Full => "full",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (ptfa, dqfa, vpc) = match self {
            Variant::SourceOnly => (false, false, false),
            Variant::Ptfa => (true, false, false),
            Variant::Dqfa => (false, true, false),
            Variant::PtfaDqfa => (true, true, false),
            Variant::Full => (true, true, true),
        };
        TrainConfig {
            use_ptfa_enc: ptfa,
            use_ptfa_dec: ptfa,
            use_dqfa_enc: dqfa,
            use_dqfa_dec: dqfa,
            use_vpc: vpc,
            ..*base
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("weight_decay", self.weight_decay),
            ("grl_eta_max", self.grl_eta_max),
            ("pseudo_weight", self.pseudo_weight),
        ];
        if let Some((k, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(format!("{k} must be >= 0, got {v}")));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.grl_warmup_frac) {
            return Err(Error::config("grl_warmup_frac must lie in [0, 1]"));
        }
        if !(0.0..=100.0).contains(&self.vpc_percentile) {
            return Err(Error::config("vpc_percentile must lie in [0, 100]"));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn ablate(&mut self, c: Component) {
        match c {
            Component::Ptfa => {
                self.use_ptfa_enc = false;
                self.use_ptfa_dec = false;
            }
            Component::Dqfa => {
                self.use_dqfa_enc = false;
                self.use_dqfa_dec = false;
            }
            Component::Vpc => self.use_vpc = false,
        }
    }

    /// Parses a flat `key = value` TOML document; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config parse error: {e}")))?;
        let known = toml::Table::try_from(TrainConfig::default())
            .map_err(|e| Error::config(e.to_string()))?;
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::config(format!("unknown config key `{k}`")));
        }
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config value error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn any_alignment(&self) -> bool {
        self.use_dqfa_enc || self.use_dqfa_dec || self.use_ptfa_enc || self.use_ptfa_dec
    }
}

/// Named scalars of one step. Disabled terms are reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub completion: f64,
    pub enc_q: f64,
    pub dec_q: f64,
    pub enc_k: f64,
    pub dec_k: f64,
    pub cons: f64,
    pub pseudo: f64,
    pub total: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 8] = [
        "completion",
        "enc_q",
        "dec_q",
        "enc_k",
        "dec_k",
        "cons",
        "pseudo",
        "total",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.completion,
            self.enc_q,
            self.dec_q,
            self.enc_k,
            self.dec_k,
            self.cons,
            self.pseudo,
            self.total,
        ]
    }

    /// The total implied by the component values.
    pub fn combine(&self, w: &LossWeights, pseudo_weight: f64) -> f64 {
        self.completion
            + w.adaptation_term(self.enc_q, self.dec_q, self.enc_k, self.dec_k, self.cons)
            + pseudo_weight * self.pseudo
    }
}

/// Source training sample with its precomputed neighborhoods and targets.
#[derive(Debug, Clone)]
pub struct SourceItem {
    pub id: String,
    pub input: ProxyInput,
    pub gt: Tensor,
    /// Farthest-point subsample of `gt` at the coarse resolution.
    pub gt_seeds: Tensor,
}

#[derive(Debug, Clone)]
pub struct TargetItem {
    pub id: String,
    pub input: ProxyInput,
}

/// Everything the loop reads, prepared once.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: Vec<SourceItem>,
    pub target: Vec<TargetItem>,
    pub eval: Vec<Sample>,
}

impl TrainData {
    pub fn from_samples(
        cfg: &ModelConfig,
        source: &[Sample],
        target: &[Sample],
        eval: Vec<Sample>,
    ) -> Result<Self> {
        let net = CompletionNet::new(*cfg, 0)?;
        let source = source
            .iter()
            .map(|s| source_item(&net, s))
            .collect::<Result<Vec<_>>>()?;
        let target = target
            .iter()
            .map(|s| {
                Ok(TargetItem {
                    id: s.id.clone(),
                    input: net.prepare(&s.partial)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if source.is_empty() {
            return Err(Error::MissingData("no source training samples".into()));
        }
        Ok(Self {
            source,
            target,
            eval,
        })
    }

    /// Loads the benchmark layout written by `datagen::build_benchmark`.
    pub fn load(dir: &Path, cfg: &ModelConfig) -> Result<Self> {
        let source = load_split(&dir.join(Split::SourceTrain.dir()), true)?;
        let target = load_split(&dir.join(Split::TargetTrain.dir()), false)?;
        let eval = load_split(&dir.join(Split::TargetEval.dir()), true)?;
        Self::from_samples(cfg, &source, &target, eval)
    }
}

fn source_item(net: &CompletionNet, s: &Sample) -> Result<SourceItem> {
    let gt = s.complete.as_ref().ok_or_else(|| {
        Error::MissingData(format!("source sample {} has no complete cloud", s.id))
    })?;
    let n = net.cfg.n_queries;
    let seeds_idx = if gt.len() >= n {
        farthest_point_sample(gt, n, lexicographic_min_index(gt))?
    } else {
        return Err(Error::invalid(format!(
            "source sample {} has {} ground-truth points, need at least {n}",
            s.id,
            gt.len()
        )));
    };
    let seeds: Vec<_> = seeds_idx.iter().map(|&i| gt[i]).collect();
    Ok(SourceItem {
        id: s.id.clone(),
        input: net.prepare(&s.partial)?,
        gt: Tensor::from_points(gt),
        gt_seeds: Tensor::from_points(&seeds),
    })
}

/// Per-target-sample consistency score seen during a step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub eta: f64,
    pub target_scores: Vec<(String, f64)>,
    pub harvested: usize,
}

/// Full resumable state, saved after every epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub pseudo_labels: PseudoLabelStore,
    pub threshold: Option<f64>,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub best_cd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    /// Average target CD (scaled ×10⁴) when evaluated this epoch.
    pub target_cd: Option<f64>,
    pub threshold: Option<f64>,
    pub harvested: usize,
    pub labels: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: CompletionNet,
    pub opt: AdamW,
    pub pseudo_labels: PseudoLabelStore,
    pub threshold: Option<f64>,
    pub epoch: usize,
    pub step: u64,
    pub best_cd: Option<f64>,
}

/// Seed of the epoch-`e` shuffles; deriving it from `(seed, epoch)` means a
/// resumed run needs no generator state.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, epoch as u64]))
}

fn finite(term: &str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            step,
        })
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = CompletionNet::new(cfg.model, derive_seed(cfg.seed, &[0]))?;
        Ok(Self {
            opt: AdamW::new(cfg.adam()),
            cfg,
            net,
            pseudo_labels: PseudoLabelStore::new(),
            threshold: None,
            epoch: 0,
            step: 0,
            best_cd: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg,
            params: self.net.store.clone(),
            optimizer: self.opt.clone(),
            pseudo_labels: self.pseudo_labels.clone(),
            threshold: self.threshold,
            epoch: self.epoch,
            step: self.step,
            best_cd: self.best_cd,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config)?;
        t.net.load_params(ck.params)?;
        t.opt = ck.optimizer;
        t.pseudo_labels = ck.pseudo_labels;
        t.threshold = ck.threshold;
        t.epoch = ck.epoch;
        t.step = ck.step;
        t.best_cd = ck.best_cd;
        Ok(t)
    }

    pub fn steps_per_epoch(&self, data: &TrainData) -> usize {
        data.source.len().div_ceil(self.cfg.batch_size)
    }

    fn pseudo_active(&self) -> bool {
        self.cfg.use_vpc
            && self.cfg.pseudo_weight > 0.0
            && self.threshold.is_some()
            && self.epoch >= self.cfg.pseudo_start_epoch
    }

    /// One optimizer update on a source batch and a target batch.
    pub fn train_step(
        &mut self,
        source: &[&SourceItem],
        target: &[&TargetItem],
        eta: f64,
    ) -> Result<StepOutput> {
        let cfg = self.cfg;
        let step = self.step;
        let net = &self.net;
        let mut g = Graph::new();
        let mut rep = LossReport::default();

        let mut enc_q = Vec::new();
        let mut dec_q = Vec::new();
        let mut enc_k = Vec::new();
        let mut dec_k = Vec::new();
        let mut domains = Vec::new();
        let mut cons_terms = Vec::new();
        let mut completion_terms = Vec::new();
        let mut pseudo_terms = Vec::new();
        let mut target_scores = Vec::new();
        let mut candidates = Vec::new();
        let pseudo_on = self.pseudo_active();

        let mut record = |g: &mut Graph, f: &crate::model::Forward, dom: Domain| -> Option<Var> {
            if cfg.any_alignment() {
                enc_q.push(g.grad_reverse(f.enc.proxy_out, eta));
                dec_q.push(g.grad_reverse(f.dec.query_out, eta));
                enc_k.push(g.grad_reverse(f.enc.token_out, eta));
                dec_k.push(g.grad_reverse(f.final_queries(), eta));
                domains.push(dom);
            }
            if cfg.use_vpc {
                let c = consistency_loss_with_mean(g, f.pred.voted_mean, &f.pred.per_layer);
                cons_terms.push(c);
                Some(c)
            } else {
                None
            }
        };

        for s in source {
            let f = net.forward(&mut g, &s.input);
            let gt = g.constant(s.gt.clone());
            let seeds = g.constant(s.gt_seeds.clone());
            completion_terms.push(completion_loss(&mut g, &f.pred, gt, seeds));
            record(&mut g, &f, Domain::Source);
        }
        for t in target {
            let f = net.forward(&mut g, &t.input);
            if pseudo_on {
                if let Some(l) = pseudo_label_loss(&mut g, f.pred.dense, &t.id, &self.pseudo_labels)
                {
                    pseudo_terms.push(l);
                }
            }
            if let Some(c) = record(&mut g, &f, Domain::Target) {
                let score = g.value(c).item();
                target_scores.push((t.id.clone(), score));
                // a non-finite prediction is reported by the loss checks below
                if let Ok(cloud) = PointCloud::new(g.value(f.pred.dense).to_points()) {
                    candidates.push(Candidate {
                        id: t.id.clone(),
                        score,
                        cloud,
                    });
                }
            }
        }

        let mean_of = |g: &mut Graph, terms: &[Var]| -> Option<Var> {
            if terms.is_empty() {
                return None;
            }
            let cat = g.concat_rows(terms);
            Some(g.mean(cat))
        };
        let mut total_terms: Vec<(Var, f64)> = Vec::new();

        let completion = mean_of(&mut g, &completion_terms)
            .ok_or_else(|| Error::invalid("empty source batch"))?;
        rep.completion = finite("completion", g.value(completion).item(), step)?;
        total_terms.push((completion, 1.0));

        let align = [
            (
                DiscriminatorKind::EncQ,
                cfg.use_dqfa_enc,
                cfg.alpha,
                &enc_q,
                false,
            ),
            (
                DiscriminatorKind::DecQ,
                cfg.use_dqfa_dec,
                cfg.alpha,
                &dec_q,
                false,
            ),
            (
                DiscriminatorKind::EncK,
                cfg.use_ptfa_enc,
                cfg.beta,
                &enc_k,
                true,
            ),
            (
                DiscriminatorKind::DecK,
                cfg.use_ptfa_dec,
                cfg.beta,
                &dec_k,
                true,
            ),
        ];
        for (kind, on, weight, tokens, token_wise) in align {
            if !on || weight == 0.0 || tokens.is_empty() {
                continue;
            }
            let disc = net.discriminator(kind);
            let l = if token_wise {
                loss_token_wise(&mut g, &net.store, disc, tokens, &domains)
            } else {
                loss_domain_token(&mut g, &net.store, disc, tokens, &domains)
            };
            let v = finite(kind.name(), g.value(l).item(), step)?;
            match kind {
                DiscriminatorKind::EncQ => rep.enc_q = v,
                DiscriminatorKind::DecQ => rep.dec_q = v,
                DiscriminatorKind::EncK => rep.enc_k = v,
                DiscriminatorKind::DecK => rep.dec_k = v,
            }
            total_terms.push((l, weight));
        }

        if let Some(c) = mean_of(&mut g, &cons_terms) {
            rep.cons = finite("cons", g.value(c).item(), step)?;
            if cfg.gamma > 0.0 {
                total_terms.push((c, cfg.gamma));
            }
        }
        if let Some(p) = mean_of(&mut g, &pseudo_terms) {
            rep.pseudo = finite("pseudo", g.value(p).item(), step)?;
            total_terms.push((p, cfg.pseudo_weight));
        }

        let mut total = None;
        for (v, w) in total_terms {
            let term = if w == 1.0 { v } else { g.scale(v, w) };
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        let total = total.expect("completion term is always present");
        rep.total = finite("total", g.value(total).item(), step)?;

        let grads = g.backward(total);
        self.opt.step(&mut self.net.store, &grads);
        self.step += 1;

        let harvested = match self.threshold {
            Some(tau) if cfg.use_vpc => {
                harvest_pseudo_labels(candidates, tau, self.epoch, &mut self.pseudo_labels)
            }
            _ => 0,
        };
        Ok(StepOutput {
            report: rep,
            eta,
            target_scores,
            harvested,
        })
    }

    /// One pass over the source split with round-robin target batches. Each
    /// step's report is passed to `on_step`.
    pub fn run_epoch(
        &mut self,
        data: &TrainData,
        mut on_step: impl FnMut(u64, &StepOutput) -> Result<()>,
    ) -> Result<EpochSummary> {
        let bs = self.cfg.batch_size;
        let mut rng = epoch_rng(self.cfg.seed, self.epoch);
        let mut src: Vec<usize> = (0..data.source.len()).collect();
        src.shuffle(&mut rng);
        let mut tgt: Vec<usize> = (0..data.target.len()).collect();
        tgt.shuffle(&mut rng);
        let total_steps = (self.steps_per_epoch(data) * self.cfg.epochs) as u64;

        let mut scores = Vec::new();
        let mut harvested = 0;
        let mut total_sum = 0.0;
        let n_steps = self.steps_per_epoch(data);
        for b in 0..n_steps {
            let sb: Vec<&SourceItem> = src[b * bs..((b + 1) * bs).min(src.len())]
                .iter()
                .map(|&i| &data.source[i])
                .collect();
            let need_target = self.cfg.any_alignment() || self.cfg.use_vpc;
            let tb: Vec<&TargetItem> = if need_target && !tgt.is_empty() {
                (0..bs)
                    .map(|i| &data.target[tgt[(b * bs + i) % tgt.len()]])
                    .collect()
            } else {
                Vec::new()
            };
            let eta = grl_eta(
                self.step,
                total_steps,
                self.cfg.grl_warmup_frac,
                self.cfg.grl_eta_max,
            );
            let out = self.train_step(&sb, &tb, eta)?;
            on_step(self.step - 1, &out)?;
            total_sum += out.report.total;
            harvested += out.harvested;
            scores.extend(out.target_scores.iter().map(|(_, s)| *s));
        }
        if self.cfg.use_vpc && !scores.is_empty() {
            self.threshold = Some(update_threshold(&scores, self.cfg.vpc_percentile)?);
        }

        let last = self.epoch + 1 == self.cfg.epochs;
        let due = self.cfg.eval_every > 0 && (self.epoch + 1).is_multiple_of(self.cfg.eval_every);
        let target_cd = if (due || last) && !data.eval.is_empty() {
            let table = evaluate(&self.net, &data.eval, &[MetricKind::Chamfer])?;
            table.value(MetricKind::Chamfer)
        } else {
            None
        };
        let summary = EpochSummary {
            epoch: self.epoch,
            mean_total: total_sum / n_steps as f64,
            target_cd,
            threshold: self.threshold,
            harvested,
            labels: self.pseudo_labels.len(),
        };
        self.epoch += 1;
        Ok(summary)
    }
}

/// Loads weights from either a model file (`best.json`, `final.json`) or a
/// full training checkpoint.
pub fn load_model(path: &Path) -> Result<CompletionNet> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("optimizer").is_some() {
        let ck: Checkpoint = serde_json::from_value(value)?;
        let mut net = CompletionNet::new(ck.config.model, 0)?;
        net.load_params(ck.params)?;
        Ok(net)
    } else {
        CompletionNet::from_file(serde_json::from_value(value)?)
    }
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: Vec<EpochSummary>,
    /// Target CD after the last epoch.
    pub final_cd: Option<f64>,
    pub best_cd: Option<f64>,
}

/// Files written by `train` inside the output directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }
    pub fn step_log(&self) -> PathBuf {
        self.dir.join("train.tsv")
    }
    pub fn epoch_log(&self) -> PathBuf {
        self.dir.join("epochs.tsv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt.json")
    }
    pub fn best_model(&self) -> PathBuf {
        self.dir.join("best.json")
    }
    pub fn final_model(&self) -> PathBuf {
        self.dir.join("final.json")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let exists = path.is_file();
    let file = if append && exists {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Trains from scratch, or resumes from `out/last.ckpt.json` when `resume` is
/// set, running until `cfg.epochs`. Writes the step log, the epoch log, the
/// latest checkpoint after every epoch, and the best and final weights.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    out: &Path,
    resume: bool,
) -> Result<(Trainer, RunOutcome)> {
    let paths = RunPaths::new(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = if resume && paths.checkpoint().is_file() {
        let ck: Checkpoint = read_json(&paths.checkpoint())?;
        let stored = TrainConfig {
            epochs: cfg.epochs,
            ..ck.config
        };
        if stored != *cfg {
            return Err(Error::config(
                "checkpoint was written with a different configuration (only epochs may change on resume)",
            ));
        }
        let mut t = Trainer::from_checkpoint(ck)?;
        t.cfg.epochs = cfg.epochs;
        t
    } else {
        Trainer::new(*cfg)?
    };
    let appending = resume && trainer.epoch > 0;
    fs::write(paths.config(), cfg.to_toml()).map_err(|e| Error::io(paths.config(), e))?;

    let step_header = format!("epoch\tstep\teta\t{}", LossReport::COLUMNS.join("\t"));
    let mut step_log = open_log(&paths.step_log(), &step_header, appending)?;
    let mut epoch_log = open_log(
        &paths.epoch_log(),
        "epoch\tmean_total\ttarget_cd\tthreshold\tharvested\tlabels",
        appending,
    )?;

    let mut history = Vec::new();
    let mut final_cd = None;
    while trainer.epoch < trainer.cfg.epochs {
        let epoch = trainer.epoch;
        let log_path = paths.step_log();
        let summary = trainer.run_epoch(data, |step, out| {
            let mut line = format!("{epoch}\t{step}\t{}", out.eta);
            for v in out.report.values() {
                line.push('\t');
                line.push_str(&v.to_string());
            }
            writeln!(step_log, "{line}").map_err(|e| Error::io(&log_path, e))
        })?;
        step_log
            .flush()
            .map_err(|e| Error::io(paths.step_log(), e))?;
        writeln!(
            epoch_log,
            "{}\t{}\t{}\t{}\t{}\t{}",
            summary.epoch,
            summary.mean_total,
            opt_cell(summary.target_cd),
            opt_cell(summary.threshold),
            summary.harvested,
            summary.labels
        )
        .and_then(|_| epoch_log.flush())
        .map_err(|e| Error::io(paths.epoch_log(), e))?;

        if let Some(cd) = summary.target_cd {
            final_cd = Some(cd);
            if trainer.best_cd.is_none_or(|b| cd < b) {
                trainer.best_cd = Some(cd);
                trainer.net.save(&paths.best_model())?;
            }
        }
        write_json(&paths.checkpoint(), &trainer.checkpoint())?;
        history.push(summary);
    }
    trainer.net.save(&paths.final_model())?;
    let best_cd = trainer.best_cd;
    Ok((
        trainer,
        RunOutcome {
            history,
            final_cd,
            best_cd,
        },
    ))
}
