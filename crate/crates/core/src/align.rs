//! Adversarial feature alignment: gradient reversal and the four domain
//! discriminators (domain proxy, domain query, point proxies, dynamic queries).
//!
//! Every alignment loss is a plain binary cross-entropy that the discriminator
//! minimizes. The features reach the discriminator through a gradient-reversal
//! node, so the same backward pass pushes the features toward confusing it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Mlp, ParamStore};
use crate::tape::{Graph, Var};

/// Domain label: 0 for source, 1 for target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscriminatorKind {
    /// Encoder slot 0 (domain proxy).
    EncQ,
    /// Decoder slot 0 (domain query).
    DecQ,
    /// Encoder point proxies.
    EncK,
    /// Final-layer dynamic queries.
    DecK,
}

impl DiscriminatorKind {
    pub const ALL: [DiscriminatorKind; 4] = [
        DiscriminatorKind::EncQ,
        DiscriminatorKind::DecQ,
        DiscriminatorKind::EncK,
        DiscriminatorKind::DecK,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiscriminatorKind::EncQ => "enc_q",
            DiscriminatorKind::DecQ => "dec_q",
            DiscriminatorKind::EncK => "enc_k",
            DiscriminatorKind::DecK => "dec_k",
        }
    }

    pub fn param_prefix(self) -> String {
        format!("disc.{}", self.name())
    }
}

/// `d → d/2 → d/4 → 1` with a sigmoid on top.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Discriminator {
    pub kind: DiscriminatorKind,
    pub mlp: Mlp,
}

impl Discriminator {
    pub fn new(
        store: &mut ParamStore,
        kind: DiscriminatorKind,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let dims = [d, (d / 2).max(1), (d / 4).max(1), 1];
        Self {
            kind,
            mlp: Mlp::new(
                store,
                &kind.param_prefix(),
                &dims,
                Activation::LeakyRelu,
                rng,
            ),
        }
    }

    /// Per-row probability of the target domain, `n × 1`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let logit = self.mlp.forward(g, store, x);
        g.sigmoid(logit)
    }
}

/// Identity forward; backward multiplies by `-eta`.
pub fn gradient_reverse(g: &mut Graph, x: Var, eta: f64) -> Var {
    g.grad_reverse(x, eta)
}

/// Linear warm-up of the reversal strength from 0 to `eta_max` over the first
/// `warmup_frac` of training.
pub fn grl_eta(step: u64, total_steps: u64, warmup_frac: f64, eta_max: f64) -> f64 {
    let warm = warmup_frac * total_steps as f64;
    if warm <= 0.0 {
        return eta_max;
    }
    eta_max * (step as f64 / warm).min(1.0)
}

/// BCE of the discriminator on one slot-0 vector per sample, averaged over the
/// batch. `tokens[i]` is `1 × d` and already passed through gradient reversal.
pub fn loss_domain_token(
    g: &mut Graph,
    store: &ParamStore,
    disc: &Discriminator,
    tokens: &[Var],
    domains: &[Domain],
) -> Var {
    assert_eq!(tokens.len(), domains.len(), "one domain label per sample");
    let x = g.concat_rows(tokens);
    let p = disc.forward(g, store, x);
    let labels: Vec<f64> = domains.iter().map(|d| d.label()).collect();
    g.bce(p, &labels)
}

/// Per-token BCE averaged over the `N` tokens of each sample and then over the
/// batch. `tokens[i]` is `N × d` and already passed through gradient reversal.
pub fn loss_token_wise(
    g: &mut Graph,
    store: &ParamStore,
    disc: &Discriminator,
    tokens: &[Var],
    domains: &[Domain],
) -> Var {
    assert_eq!(tokens.len(), domains.len(), "one domain label per sample");
    let n = g.shape(tokens[0]).0;
    assert!(
        tokens.iter().all(|&t| g.shape(t).0 == n),
        "token-wise alignment expects equal token counts"
    );
    let x = g.concat_rows(tokens);
    let p = disc.forward(g, store, x);
    let labels: Vec<f64> = domains
        .iter()
        .flat_map(|d| std::iter::repeat_n(d.label(), n))
        .collect();
    g.bce(p, &labels)
}
