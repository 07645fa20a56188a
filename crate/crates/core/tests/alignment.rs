//! Adversarial alignment on a toy with two separable clusters: the
//! discriminator must learn to separate them while the features, trained
//! through the reversal layer, must learn to hide the domain.

use dapc::align::{
    gradient_reverse, loss_domain_token, loss_token_wise, Discriminator, DiscriminatorKind, Domain,
};
use dapc::nn::{AdamW, AdamWConfig, Linear, ParamStore};
use dapc::tape::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const D: usize = 4;

struct Toy {
    store: ParamStore,
    feat: Linear,
    disc: Discriminator,
    xs: Vec<Tensor>,
    doms: Vec<Domain>,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let feat = Linear::new(&mut store, "feat", 2, D, &mut rng);
    let disc = Discriminator::new(&mut store, DiscriminatorKind::EncQ, D, &mut rng);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let mut xs = Vec::new();
    let mut doms = Vec::new();
    for i in 0..16 {
        let (c, dom) = if i % 2 == 0 {
            (1.0, Domain::Source)
        } else {
            (-1.0, Domain::Target)
        };
        xs.push(Tensor::from_vec(
            1,
            2,
            vec![c + noise.sample(&mut rng), rng.random_range(-1.0..1.0)],
        ));
        doms.push(dom);
    }
    Toy {
        store,
        feat,
        disc,
        xs,
        doms,
    }
}

fn loss(t: &Toy, g: &mut Graph, store: &ParamStore, eta: f64) -> Var {
    let feats: Vec<Var> =
        t.xs.iter()
            .map(|x| {
                let x = g.constant(x.clone());
                let f = t.feat.forward(g, store, x);
                gradient_reverse(g, f, eta)
            })
            .collect();
    loss_domain_token(g, store, &t.disc, &feats, &t.doms)
}

fn eval(t: &Toy, store: &ParamStore) -> f64 {
    let mut g = Graph::new();
    let l = loss(t, &mut g, store, 1.0);
    g.value(l).item()
}

/// Applies `-lr * grad` to the parameters whose name starts with `prefix`.
fn sgd(t: &Toy, store: &mut ParamStore, prefix: &str, lr: f64) {
    let mut g = Graph::new();
    let l = loss(t, &mut g, store, 1.0);
    let grads = g.backward(l);
    for id in store.ids_with_prefix(prefix).collect::<Vec<_>>() {
        let gr = grads.param(id).unwrap().clone();
        for (w, d) in store.value_mut(id).data.iter_mut().zip(&gr.data) {
            *w -= lr * d;
        }
    }
}

#[test]
fn discriminator_descends_and_features_ascend() {
    let t = toy(1);
    let base = eval(&t, &t.store);

    let mut s = t.store.clone();
    sgd(&t, &mut s, "disc.", 1e-2);
    assert!(
        eval(&t, &s) < base,
        "discriminator step must lower the domain loss"
    );

    let mut s = t.store.clone();
    sgd(&t, &mut s, "feat.", 1e-2);
    assert!(
        eval(&t, &s) > base,
        "feature step through reversal must raise the domain loss"
    );
}

fn train(t: &mut Toy, eta: f64, steps: usize) -> f64 {
    let mut opt = AdamW::new(AdamWConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut tail = Vec::new();
    for step in 0..steps {
        let mut g = Graph::new();
        let l = loss(t, &mut g, &t.store, eta);
        if step + 50 >= steps {
            tail.push(g.value(l).item());
        }
        let grads = g.backward(l);
        opt.step(&mut t.store, &grads);
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

#[test]
fn reversal_drives_the_domains_together() {
    // without reversal pressure the discriminator separates the clusters
    let mut frozen = toy(2);
    let separated = train(&mut frozen, 0.0, 400);
    assert!(
        separated < 0.15,
        "discriminator alone reached only {separated}"
    );

    // with it the features collapse the domain direction and the loss stays near ln 2
    let mut adv = toy(2);
    let confused = train(&mut adv, 1.0, 400);
    assert!(confused > 0.55, "adversarial loss fell to {confused}");
}

#[test]
fn zero_eta_blocks_feature_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let discs: Vec<Discriminator> = DiscriminatorKind::ALL
        .iter()
        .map(|&k| Discriminator::new(&mut store, k, D, &mut rng))
        .collect();
    let doms = [Domain::Source, Domain::Target];
    for disc in &discs {
        let rows = if matches!(disc.kind, DiscriminatorKind::EncK | DiscriminatorKind::DecK) {
            3
        } else {
            1
        };
        let mut g = Graph::new();
        let xs: Vec<Var> = (0..2)
            .map(|_| {
                g.variable(Tensor::from_vec(
                    rows,
                    D,
                    (0..rows * D).map(|_| rng.random_range(-1.0..1.0)).collect(),
                ))
            })
            .collect();
        let rev: Vec<Var> = xs
            .iter()
            .map(|&x| gradient_reverse(&mut g, x, 0.0))
            .collect();
        let l = if rows == 1 {
            loss_domain_token(&mut g, &store, disc, &rev, &doms)
        } else {
            loss_token_wise(&mut g, &store, disc, &rev, &doms)
        };
        let grads = g.backward(l);
        for &x in &xs {
            assert!(grads.of(x).is_none_or(|t| t.data.iter().all(|&v| v == 0.0)));
        }
        let moved = store.ids_with_prefix(&disc.kind.param_prefix()).any(|id| {
            grads
                .param(id)
                .is_some_and(|t| t.data.iter().any(|&v| v != 0.0))
        });
        assert!(moved, "{} got no gradient", disc.kind.name());
    }
}

#[test]
fn reversal_scales_the_upstream_gradient_by_minus_eta() {
    let t = toy(4);
    let grad_of_features = |eta: Option<f64>| {
        let mut g = Graph::new();
        let xs: Vec<Var> = t.xs.iter().map(|x| g.variable(x.clone())).collect();
        let feats: Vec<Var> = xs
            .iter()
            .map(|&x| {
                let f = t.feat.forward(&mut g, &t.store, x);
                match eta {
                    Some(e) => gradient_reverse(&mut g, f, e),
                    None => f,
                }
            })
            .collect();
        let l = loss_domain_token(&mut g, &t.store, &t.disc, &feats, &t.doms);
        let grads = g.backward(l);
        xs.iter()
            .flat_map(|&x| grads.of(x).unwrap().data.clone())
            .collect::<Vec<f64>>()
    };
    let plain = grad_of_features(None);
    let reversed = grad_of_features(Some(0.7));
    for (p, r) in plain.iter().zip(&reversed) {
        assert!(
            (r + 0.7 * p).abs() <= 1e-12 * (1.0 + p.abs()),
            "{r} vs {}",
            -0.7 * p
        );
    }
}
