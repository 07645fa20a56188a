//! From decoder outputs to point clouds: per-layer predictions, their voted mean
//! and the dense refined cloud (fold or point-splitting upsampler).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Linear, Mlp, ParamId, ParamStore};
use crate::seq2seq::DecoderOutput;
use crate::tape::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Fold,
    Spd,
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fold" => Ok(HeadKind::Fold),
            "spd" => Ok(HeadKind::Spd),
            other => Err(format!("unknown head `{other}` (expected fold or spd)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub up_factor: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Spd,
            up_factor: 8,
            embed_dim: 128,
            hidden: 128,
        }
    }
}

/// Every cloud of one forward pass, as graph nodes.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// `N × 3`
    pub coarse: Var,
    /// One `N × 3` prediction per decoder layer, in slot correspondence.
    pub per_layer: Vec<Var>,
    /// Point-wise mean of `per_layer`.
    pub voted_mean: Var,
    /// `(N · up_factor) × 3`
    pub dense: Var,
}

/// Shared-weight map from each layer's dynamic queries to offsets around the
/// coarse points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerHead {
    pub mlp: Mlp,
}

impl LayerHead {
    pub fn new(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "head.layer", &[d, hidden, 3], Activation::Gelu, rng),
        }
    }

    pub fn predict_per_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dec: &DecoderOutput,
        coarse: Var,
    ) -> Vec<Var> {
        dec.dynamic_out
            .iter()
            .map(|&tokens| {
                let off = self.mlp.forward(g, store, tokens);
                g.add(coarse, off)
            })
            .collect()
    }
}

/// Pointwise mean over layers in slot correspondence.
pub fn vote_mean_var(g: &mut Graph, per_layer: &[Var]) -> Var {
    let mut acc = per_layer[0];
    for &p in &per_layer[1..] {
        acc = g.add(acc, p);
    }
    g.scale(acc, 1.0 / per_layer.len() as f64)
}

fn parent_index(n: usize, up: usize) -> Vec<usize> {
    (0..n).flat_map(|j| std::iter::repeat_n(j, up)).collect()
}

/// Fixed 2D grid of `up` samples in `[-0.2, 0.2]²`.
pub fn fold_grid(up: usize) -> Vec<[f64; 2]> {
    let mut rows = (up as f64).sqrt().floor() as usize;
    while rows > 1 && !up.is_multiple_of(rows) {
        rows -= 1;
    }
    let rows = rows.max(1);
    let cols = up / rows;
    let lin = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -0.2 + 0.4 * i as f64 / (n - 1) as f64
        }
    };
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| [lin(r, rows), lin(c, cols)]))
        .collect()
}

/// Folds a fixed 2D grid around every coarse point, conditioned on that point's
/// token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldRefiner {
    pub up_factor: usize,
    pub fold: Mlp,
}

impl FoldRefiner {
    pub fn new(store: &mut ParamStore, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        Self {
            up_factor: cfg.up_factor,
            fold: Mlp::new(
                store,
                "head.fold",
                &[cfg.embed_dim + 2, cfg.hidden, cfg.hidden, 3],
                Activation::Gelu,
                rng,
            ),
        }
    }

    pub fn refine(&self, g: &mut Graph, store: &ParamStore, tokens: Var, coarse: Var) -> Var {
        let n = g.shape(coarse).0;
        let up = self.up_factor;
        let parents = parent_index(n, up);
        let grid = fold_grid(up);
        let grid_data: Vec<f64> = (0..n)
            .flat_map(|_| grid.iter().flatten().copied())
            .collect();
        let grid = g.constant(Tensor::from_vec(n * up, 2, grid_data));
        let tok = g.gather_rows(tokens, &parents);
        let input = g.concat_cols(&[tok, grid]);
        let off = self.fold.forward(g, store, input);
        let base = g.gather_rows(coarse, &parents);
        g.add(base, off)
    }
}

/// Point splitting: each parent spawns `up_factor` children displaced by a
/// bounded learned offset conditioned on the parent token, the parent
/// coordinate, pooled context, and a learned per-child code.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpdRefiner {
    pub up_factor: usize,
    pub parent: Mlp,
    pub child_code: ParamId,
    pub displace: Linear,
    pub radius: f64,
}

impl SpdRefiner {
    pub fn new(store: &mut ParamStore, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.hidden;
        let code = (0..cfg.up_factor * h)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            up_factor: cfg.up_factor,
            parent: Mlp::new(
                store,
                "head.spd.parent",
                &[2 * d + 3, h, h],
                Activation::Gelu,
                rng,
            ),
            child_code: store.add(
                "head.spd.child_code",
                Tensor::from_vec(cfg.up_factor, h, code),
            ),
            displace: Linear::new(store, "head.spd.displace", h, 3, rng),
            radius: 0.3,
        }
    }

    pub fn refine(&self, g: &mut Graph, store: &ParamStore, tokens: Var, coarse: Var) -> Var {
        let n = g.shape(coarse).0;
        let up = self.up_factor;
        let context = g.max_rows(tokens);
        let context = g.gather_rows(context, &vec![0; n]);
        let input = g.concat_cols(&[tokens, coarse, context]);
        let parent = self.parent.forward(g, store, input);
        let parents = parent_index(n, up);
        let rep = g.gather_rows(parent, &parents);
        let codes = g.param(store, self.child_code);
        let child_idx: Vec<usize> = (0..n).flat_map(|_| 0..up).collect();
        let codes = g.gather_rows(codes, &child_idx);
        let child = g.add(rep, codes);
        let child = g.gelu(child);
        let disp = self.displace.forward(g, store, child);
        let disp = g.tanh(disp);
        let disp = g.scale(disp, self.radius);
        let base = g.gather_rows(coarse, &parents);
        g.add(base, disp)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Refiner {
    Fold(FoldRefiner),
    Spd(SpdRefiner),
}

impl Refiner {
    pub fn new(store: &mut ParamStore, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        match cfg.kind {
            HeadKind::Fold => Refiner::Fold(FoldRefiner::new(store, cfg, rng)),
            HeadKind::Spd => Refiner::Spd(SpdRefiner::new(store, cfg, rng)),
        }
    }

    pub fn refine(&self, g: &mut Graph, store: &ParamStore, tokens: Var, coarse: Var) -> Var {
        match self {
            Refiner::Fold(f) => f.refine(g, store, tokens, coarse),
            Refiner::Spd(s) => s.refine(g, store, tokens, coarse),
        }
    }

    pub fn up_factor(&self) -> usize {
        match self {
            Refiner::Fold(f) => f.up_factor,
            Refiner::Spd(s) => s.up_factor,
        }
    }
}

/// Supervised source objective: `CD(coarse, seeds) + CD(dense, gt)`, where
/// `seeds` is the farthest-point subsample of the ground truth at the coarse
/// resolution.
pub fn completion_loss(g: &mut Graph, pred: &PredictionSet, gt: Var, gt_seeds: Var) -> Var {
    let c = g.chamfer(pred.coarse, gt_seeds);
    let f = g.chamfer(pred.dense, gt);
    g.add(c, f)
}
