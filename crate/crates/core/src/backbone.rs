//! Point-proxy extraction: farthest-point centers, two stages of edge
//! convolution, and a learned positional map of the center coordinates.
//!
//! The first stage sees only relative offsets `neighbor - center`, and the second
//! stage sees `(h_center, h_neighbor - h_center)`, so token features are invariant
//! to translating the input. Absolute position reaches the sequence only through
//! the positional vectors.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_indices, lexicographic_min_index, Point3};
use crate::nn::{Activation, Linear, Mlp, ParamStore};
use crate::tape::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_proxies: usize,
    pub embed_dim: usize,
    pub knn_k: usize,
    /// Width of the first edge-convolution stage.
    pub edge_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_proxies: 64,
            embed_dim: 128,
            knn_k: 8,
            edge_dim: 64,
        }
    }
}

/// Point proxies `f^i` with their positional vectors `pos^i`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `N × d`
    pub tokens: Var,
    /// `N × d`
    pub positions: Var,
    pub centers: Vec<Point3>,
}

/// Parameter-independent neighborhood structure of one input cloud. It only
/// depends on the coordinates, so it is computed once per cloud and reused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyInput {
    pub centers: Vec<Point3>,
    /// Number of points that take part in the first stage.
    stage1_points: usize,
    /// `(stage1_points · k) × 3` relative offsets, grouped by point.
    stage1_offsets: Tensor,
    /// For each center, its row among the stage-1 points, repeated `k` times.
    center_rows: Vec<usize>,
    /// For each center, the stage-1 rows of its `k` neighbors.
    neighbor_rows: Vec<usize>,
    k: usize,
}

impl ProxyInput {
    pub fn new(points: &[Point3], n_proxies: usize, k: usize) -> Result<Self> {
        let n = points.len();
        if n_proxies == 0 || n_proxies > n {
            return Err(Error::invalid(format!(
                "need at least {n_proxies} points for {n_proxies} proxies, got {n}"
            )));
        }
        if k == 0 || k > n {
            return Err(Error::invalid(format!(
                "knn k = {k} invalid for {n} points"
            )));
        }
        let center_idx = farthest_point_sample(points, n_proxies, lexicographic_min_index(points))?;
        let centers: Vec<Point3> = center_idx.iter().map(|&i| points[i]).collect();
        let center_knn = knn_indices(points, &centers, k)?;

        // stage-1 points: every center and every neighbor of a center
        let mut row_of: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in center_idx.iter().chain(center_knn.iter().flatten()) {
            row_of.entry(i).or_insert(0);
        }
        for (row, v) in row_of.values_mut().enumerate() {
            *v = row;
        }
        let stage1: Vec<usize> = row_of.keys().copied().collect();
        let stage1_pts: Vec<Point3> = stage1.iter().map(|&i| points[i]).collect();
        let stage1_knn = knn_indices(points, &stage1_pts, k)?;
        let mut offsets = Vec::with_capacity(stage1.len() * k * 3);
        for (p, nbrs) in stage1_pts.iter().zip(&stage1_knn) {
            for &j in nbrs {
                let q = points[j];
                offsets.extend_from_slice(&[q[0] - p[0], q[1] - p[1], q[2] - p[2]]);
            }
        }
        let mut center_rows = Vec::with_capacity(n_proxies * k);
        let mut neighbor_rows = Vec::with_capacity(n_proxies * k);
        for (c, nbrs) in center_idx.iter().zip(&center_knn) {
            for &j in nbrs {
                center_rows.push(row_of[c]);
                neighbor_rows.push(row_of[&j]);
            }
        }
        Ok(Self {
            centers,
            stage1_points: stage1.len(),
            stage1_offsets: Tensor::from_vec(stage1.len() * k, 3, offsets),
            center_rows,
            neighbor_rows,
            k,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    edge1: Linear,
    edge2: Linear,
    out: Linear,
    pos: Mlp,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            cfg,
            edge1: Linear::new(store, "backbone.edge1", 3, cfg.edge_dim, rng),
            edge2: Linear::new(store, "backbone.edge2", 2 * cfg.edge_dim, d, rng),
            out: Linear::new(store, "backbone.out", d, d, rng),
            pos: Mlp::new(store, "backbone.pos", &[3, d, d], Activation::Gelu, rng),
        }
    }

    pub fn prepare(&self, points: &[Point3]) -> Result<ProxyInput> {
        ProxyInput::new(points, self.cfg.n_proxies, self.cfg.knn_k)
    }

    pub fn extract_proxies(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ProxyInput,
    ) -> TokenSequence {
        let k = input.k;
        debug_assert_eq!(input.stage1_offsets.rows, input.stage1_points * k);
        let offsets = g.constant(input.stage1_offsets.clone());
        let e1 = self.edge1.forward(g, store, offsets);
        let e1 = g.leaky_relu(e1, 0.2);
        let h1 = g.segment_max(e1, k);

        let hc = g.gather_rows(h1, &input.center_rows);
        let hn = g.gather_rows(h1, &input.neighbor_rows);
        let diff = g.sub(hn, hc);
        let edge = g.concat_cols(&[hc, diff]);
        let e2 = self.edge2.forward(g, store, edge);
        let e2 = g.leaky_relu(e2, 0.2);
        let pooled = g.segment_max(e2, k);
        let tokens = self.out.forward(g, store, pooled);

        let centers = g.constant(Tensor::from_points(&input.centers));
        let positions = self.pos.forward(g, store, centers);
        TokenSequence {
            tokens,
            positions,
            centers: input.centers.clone(),
        }
    }
}
