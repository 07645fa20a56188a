//! Shared suites used by both the focused integration tests and the
//! acceptance target. Every oracle here is a direct brute-force restatement,
//! independent of the library's kernels.

#![allow(dead_code)]

use dapc::align::{loss_domain_token, loss_token_wise, Discriminator, DiscriminatorKind, Domain};
use dapc::backbone::{Backbone, BackboneConfig};
use dapc::geometry::{
    chamfer_distance, farthest_point_sample, knn_indices, unidirectional_chamfer,
    unidirectional_hausdorff, Point3,
};
use dapc::gradcheck::{check_inputs, check_params, GradCheckReport, DEFAULT_STEP};
use dapc::head::{completion_loss, HeadConfig, HeadKind, LayerHead, PredictionSet, Refiner};
use dapc::nn::{ParamId, ParamStore};
use dapc::seq2seq::{Pooling, Seq2Seq, Seq2SeqConfig};
use dapc::tape::{Graph, Tensor, Var};
use dapc::vpc::{
    consistency_loss, consistency_score, harvest_pseudo_labels, pseudo_label_loss, vote_mean,
    Candidate, PseudoLabelStore,
};
use dapc::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIST_TOL: f64 = 1e-9;
pub const GRAD_REL_TOL: f64 = 1e-4;

// ---------------------------------------------------------------- oracles

fn d2(a: Point3, b: Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn min_d2(p: Point3, set: &[Point3]) -> f64 {
    set.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min)
}

pub fn oracle_cd(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter().map(|&p| min_d2(p, b)).sum::<f64>() / a.len() as f64
        + b.iter().map(|&p| min_d2(p, a)).sum::<f64>() / b.len() as f64
}

pub fn oracle_ucd(partial: &[Point3], pred: &[Point3]) -> f64 {
    partial.iter().map(|&p| min_d2(p, pred)).sum::<f64>() / partial.len() as f64
}

pub fn oracle_uhd(partial: &[Point3], pred: &[Point3]) -> f64 {
    partial
        .iter()
        .map(|&p| min_d2(p, pred).sqrt())
        .fold(0.0, f64::max)
}

pub fn oracle_fps(pts: &[Point3], k: usize, seed: usize) -> Vec<usize> {
    let mut chosen = vec![seed];
    while chosen.len() < k {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..pts.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| d2(pts[i], pts[c]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

pub fn oracle_knn(cloud: &[Point3], q: Point3, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = cloud
        .iter()
        .enumerate()
        .map(|(i, &p)| (d2(p, q), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Random cloud of `n` points; every other instance uses a coarse integer grid
/// so that ties are common.
pub fn random_cloud(rng: &mut impl Rng, n: usize, grid: bool) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            if grid {
                [0; 3].map(|_: i32| rng.random_range(-2..=2) as f64)
            } else {
                [0; 3].map(|_: i32| rng.random_range(-1.0..1.0))
            }
        })
        .collect()
}

/// Runs `instances` random comparisons against the brute-force oracles and
/// returns the first mismatch.
pub fn geometry_oracle_suite(instances: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..instances {
        let grid = t % 2 == 1;
        let na = rng.random_range(1..=64);
        let nb = rng.random_range(1..=64);
        let a = random_cloud(&mut rng, na, grid);
        let b = random_cloud(&mut rng, nb, grid);
        let close = |what: &str, got: f64, want: f64| {
            if (got - want).abs() <= DIST_TOL {
                Ok(())
            } else {
                Err(format!("instance {t}: {what} {got} vs oracle {want}"))
            }
        };
        close(
            "cd",
            chamfer_distance(&a, &b).map_err(|e| e.to_string())?.raw,
            oracle_cd(&a, &b),
        )?;
        close(
            "ucd",
            unidirectional_chamfer(&a, &b)
                .map_err(|e| e.to_string())?
                .raw,
            oracle_ucd(&a, &b),
        )?;
        close(
            "uhd",
            unidirectional_hausdorff(&a, &b)
                .map_err(|e| e.to_string())?
                .raw,
            oracle_uhd(&a, &b),
        )?;

        let k = rng.random_range(1..=na);
        let seed_idx = rng.random_range(0..na);
        let got = farthest_point_sample(&a, k, seed_idx).map_err(|e| e.to_string())?;
        let want = oracle_fps(&a, k, seed_idx);
        if got != want {
            return Err(format!("instance {t}: fps {got:?} vs oracle {want:?}"));
        }
        let got = knn_indices(&a, &b, k).map_err(|e| e.to_string())?;
        for (j, &q) in b.iter().enumerate() {
            let want = oracle_knn(&a, q, k);
            if got[j] != want {
                return Err(format!(
                    "instance {t}: knn row {j} {:?} vs oracle {want:?}",
                    got[j]
                ));
            }
        }
    }
    Ok(instances)
}

// ---------------------------------------------------------- gradient suite

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

/// `Σ w ⊙ x` for a fixed random `w`, turning any node into a generic scalar.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, r, c));
    let p = g.mul(x, w);
    g.sum(p)
}

fn sum_all(g: &mut Graph, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    acc
}

fn ids(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.ids_with_prefix(prefix).collect()
}

fn toy_seq2seq(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Seq2Seq {
    Seq2Seq::new(
        store,
        Seq2SeqConfig {
            embed_dim: 8,
            heads: 2,
            ffn_dim: 12,
            enc_layers: 2,
            dec_layers: 2,
            n_queries: 2,
            pooling: Pooling::Max,
        },
        rng,
    )
    .unwrap()
}

/// Named finite-difference reports for every component and loss term.
pub fn gradient_suite() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let step = DEFAULT_STEP;

    // backbone: 8 points, 4 proxies, width 8
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            n_proxies: 4,
            embed_dim: 8,
            knn_k: 3,
            edge_dim: 6,
        };
        let bb = Backbone::new(&mut store, cfg, &mut rng);
        let pts = random_cloud(&mut rng, 8, false);
        let input = bb.prepare(&pts).unwrap();
        let all = ids(&store, "backbone.");
        let r = check_params(&mut store, &all, step, |g, s| {
            let seq = bb.extract_proxies(g, s, &input);
            let a = probe(g, seq.tokens, 1);
            let b = probe(g, seq.positions, 2);
            g.add(a, b)
        });
        out.push(("backbone".into(), r));
    }

    // encoder, query generator and decoder on a 3-token toy (2 proxies + slot 0)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let s2s = toy_seq2seq(&mut store, &mut rng);
        let tokens = rand_tensor(&mut rng, 2, 8);
        let positions = rand_tensor(&mut rng, 2, 8);
        let build = |g: &mut Graph, s: &ParamStore| {
            let seq = dapc::backbone::TokenSequence {
                tokens: g.constant(tokens.clone()),
                positions: g.constant(positions.clone()),
                centers: vec![[0.0; 3]; 2],
            };
            let x = s2s.build_encoder_input(g, s, &seq).unwrap();
            s2s.encode(g, s, x)
        };
        let mut enc_ids = ids(&store, "encoder.");
        enc_ids.push(s2s.domain.q_enc);
        enc_ids.push(s2s.domain.pos_enc);
        let r = check_params(&mut store, &enc_ids, step, |g, s| {
            let e = build(g, s);
            let parts = [
                probe(g, e.proxy_out, 3),
                probe(g, e.token_out, 4),
                probe(g, e.global_feature, 5),
                probe(g, e.pos_dec, 6),
            ];
            sum_all(g, &parts)
        });
        out.push(("encoder".into(), r));

        let q_ids = ids(&store, "querygen.");
        let r = check_params(&mut store, &q_ids, step, |g, s| {
            let e = build(g, s);
            let q = s2s.generate_queries(g, s, &e);
            let a = probe(g, q.coarse, 7);
            let b = probe(g, q.tokens, 8);
            g.add(a, b)
        });
        out.push(("query generator".into(), r));

        let mut dec_ids = ids(&store, "decoder.");
        dec_ids.push(s2s.domain.q_dec);
        dec_ids.push(s2s.domain.pos_dec);
        let r = check_params(&mut store, &dec_ids, step, |g, s| {
            let e = build(g, s);
            let q = s2s.generate_queries(g, s, &e);
            let x = s2s.build_decoder_input(g, s, q.tokens, e.pos_dec).unwrap();
            let d = s2s.decode(g, s, x, &e);
            let mut parts = vec![probe(g, d.query_out, 9)];
            for (l, &v) in d.dynamic_out.iter().enumerate() {
                parts.push(probe(g, v, 10 + l as u64));
            }
            sum_all(g, &parts)
        });
        out.push(("decoder".into(), r));
    }

    // per-layer head and both refiners, w.r.t. parameters and inputs
    for kind in [HeadKind::Fold, HeadKind::Spd] {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            kind,
            up_factor: 4,
            embed_dim: 6,
            hidden: 5,
        };
        let refiner = Refiner::new(&mut store, &cfg, &mut rng);
        let tokens = rand_tensor(&mut rng, 3, 6);
        let coarse = rand_tensor(&mut rng, 3, 3);
        let name = match kind {
            HeadKind::Fold => "fold refiner",
            HeadKind::Spd => "spd refiner",
        };
        let all = ids(&store, "head.");
        let r = check_params(&mut store, &all, step, |g, s| {
            let t = g.constant(tokens.clone());
            let c = g.constant(coarse.clone());
            let d = refiner.refine(g, s, t, c);
            probe(g, d, 20)
        });
        out.push((format!("{name} (params)"), r));
        let r = check_inputs(&[tokens.clone(), coarse.clone()], step, |g, v| {
            let d = refiner.refine(g, &store, v[0], v[1]);
            probe(g, d, 21)
        });
        out.push((format!("{name} (inputs)"), r));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let head = LayerHead::new(&mut store, 6, 5, &mut rng);
        let layers = [rand_tensor(&mut rng, 3, 6), rand_tensor(&mut rng, 3, 6)];
        let coarse = rand_tensor(&mut rng, 3, 3);
        let all = ids(&store, "head.layer");
        let r = check_params(&mut store, &all, step, |g, s| {
            let dec = dapc::seq2seq::DecoderOutput {
                query_out: g.constant(Tensor::zeros(1, 6)),
                dynamic_out: layers.iter().map(|t| g.constant(t.clone())).collect(),
                cross_attention: Vec::new(),
            };
            let c = g.constant(coarse.clone());
            let preds = head.predict_per_layer(g, s, &dec, c);
            let parts: Vec<Var> = preds
                .iter()
                .enumerate()
                .map(|(l, &p)| probe(g, p, 30 + l as u64))
                .collect();
            sum_all(g, &parts)
        });
        out.push(("per-layer head".into(), r));
    }

    // discriminators and the four alignment losses
    {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let discs: Vec<Discriminator> = DiscriminatorKind::ALL
            .iter()
            .map(|&k| Discriminator::new(&mut store, k, 8, &mut rng))
            .collect();
        let slot = [rand_tensor(&mut rng, 1, 8), rand_tensor(&mut rng, 1, 8)];
        let toks = [rand_tensor(&mut rng, 3, 8), rand_tensor(&mut rng, 3, 8)];
        let doms = [Domain::Source, Domain::Target];
        for disc in &discs {
            let token_wise = matches!(disc.kind, DiscriminatorKind::EncK | DiscriminatorKind::DecK);
            let inputs: Vec<Tensor> = if token_wise {
                toks.to_vec()
            } else {
                slot.to_vec()
            };
            let loss = |g: &mut Graph, s: &ParamStore, v: &[Var]| {
                if token_wise {
                    loss_token_wise(g, s, disc, v, &doms)
                } else {
                    loss_domain_token(g, s, disc, v, &doms)
                }
            };
            let pids = ids(&store, &disc.kind.param_prefix());
            let r = check_params(&mut store, &pids, step, |g, s| {
                let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                loss(g, s, &v)
            });
            out.push((format!("discriminator {} (params)", disc.kind.name()), r));
            let r = check_inputs(&inputs, step, |g, v| loss(g, &store, v));
            out.push((format!("loss {} (features)", disc.kind.name()), r));
        }
    }

    // completion, consistency and pseudo-label losses
    {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let coarse = rand_tensor(&mut rng, 3, 3);
        let l1 = rand_tensor(&mut rng, 3, 3);
        let l2 = rand_tensor(&mut rng, 3, 3);
        let dense = rand_tensor(&mut rng, 6, 3);
        let gt = rand_tensor(&mut rng, 7, 3);
        let seeds = rand_tensor(&mut rng, 3, 3);
        let r = check_inputs(&[coarse.clone(), dense.clone()], step, |g, v| {
            let gtv = g.constant(gt.clone());
            let sv = g.constant(seeds.clone());
            let pred = PredictionSet {
                coarse: v[0],
                per_layer: vec![v[0]],
                voted_mean: v[0],
                dense: v[1],
            };
            completion_loss(g, &pred, gtv, sv)
        });
        out.push(("completion loss".into(), r));
        let r = check_inputs(
            &[l1.clone(), l2.clone(), coarse.clone()],
            step,
            consistency_loss,
        );
        out.push(("consistency loss".into(), r));
        let mut store = PseudoLabelStore::new();
        harvest_pseudo_labels(
            vec![Candidate {
                id: "t".into(),
                score: 0.0,
                cloud: PointCloud::new(gt.to_points()).unwrap(),
            }],
            1.0,
            0,
            &mut store,
        );
        let r = check_inputs(std::slice::from_ref(&dense), step, |g, v| {
            pseudo_label_loss(g, v[0], "t", &store).unwrap()
        });
        out.push(("pseudo-label loss".into(), r));
    }
    out
}

// ------------------------------------------------------------- vpc suite

/// Least-squares voter property, identical-layer zero, the two-layer single
/// point value, and exact harvest counts.
pub fn vpc_suite(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..200 {
        let l = rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let layers: Vec<Vec<Point3>> = (0..l).map(|_| random_cloud(&mut rng, n, false)).collect();
        let refs: Vec<&[Point3]> = layers.iter().map(Vec::as_slice).collect();
        let m = vote_mean(&refs).map_err(|e| e.to_string())?;
        let sse = |cand: &[Point3]| -> f64 {
            layers
                .iter()
                .map(|layer| cand.iter().zip(layer).map(|(a, b)| d2(*a, *b)).sum::<f64>())
                .sum()
        };
        let best = sse(&m);
        // a grid of perturbations around the mean never does better
        for j in 0..n {
            for k in 0..3 {
                for delta in [-0.1, -0.01, -1e-4, 1e-4, 0.01, 0.1] {
                    let mut c = m.clone();
                    c[j][k] += delta;
                    if sse(&c) < best - 1e-12 {
                        return Err(format!(
                            "toy {t}: perturbing slot {j} axis {k} by {delta} beats the mean"
                        ));
                    }
                }
            }
        }
        let same = vec![layers[0].as_slice(); l];
        let c = consistency_score(&same).map_err(|e| e.to_string())?;
        if c != 0.0 {
            return Err(format!("toy {t}: identical layers score {c}"));
        }
    }
    let a = [[0.0, 0.0, 0.0]];
    let b = [[2.0, 0.0, 0.0]];
    let c = consistency_score(&[&a, &b]).map_err(|e| e.to_string())?;
    if (c - 2.0).abs() > 1e-9 {
        return Err(format!("two-layer example gave {c}"));
    }
    for t in 0..200 {
        let n = rng.random_range(0..20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let tau = rng.random_range(0.0..1.0);
        let cands = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| Candidate {
                id: format!("s{i}"),
                score,
                cloud: PointCloud::new(vec![[0.0; 3]]).unwrap(),
            })
            .collect();
        let mut store = PseudoLabelStore::new();
        let got = harvest_pseudo_labels(cands, tau, 0, &mut store);
        let want = scores.iter().filter(|&&s| s <= tau).count();
        if got != want || store.len() != want {
            return Err(format!(
                "harvest {t}: {got} harvested, {} stored, expected {want}",
                store.len()
            ));
        }
    }
    Ok(())
}
