//! Per-category metric tables, the linear domain probe on encoder features with
//! its 2D projection, and single-cloud completion.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::Domain;
use crate::cloud_io::{read_cloud, write_cloud};
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::geometry::{
    chamfer_distance, unidirectional_chamfer, unidirectional_hausdorff, MetricKind, PointCloud,
};
use crate::model::CompletionNet;

/// Anything that maps a partial cloud to a completed one.
pub trait Completer {
    fn complete(&self, partial: &PointCloud) -> Result<PointCloud>;
}

impl Completer for CompletionNet {
    fn complete(&self, partial: &PointCloud) -> Result<PointCloud> {
        CompletionNet::complete(self, partial)
    }
}

impl<F: Fn(&PointCloud) -> Result<PointCloud>> Completer for F {
    fn complete(&self, partial: &PointCloud) -> Result<PointCloud> {
        self(partial)
    }
}

pub fn metric_name(kind: MetricKind) -> &'static str {
    match kind {
        MetricKind::Chamfer => "cd",
        MetricKind::UnidirectionalChamfer => "ucd",
        MetricKind::UnidirectionalHausdorff => "uhd",
    }
}

/// Parses `cd,ucd,uhd` (any subset, any order, no repeats).
pub fn parse_metrics(list: &str) -> Result<Vec<MetricKind>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let kind = match name {
            "cd" => MetricKind::Chamfer,
            "ucd" => MetricKind::UnidirectionalChamfer,
            "uhd" => MetricKind::UnidirectionalHausdorff,
            other => return Err(Error::config(format!("unknown metric `{other}`"))),
        };
        if out.contains(&kind) {
            return Err(Error::config(format!("metric `{name}` listed twice")));
        }
        out.push(kind);
    }
    if out.is_empty() {
        return Err(Error::config("no metrics requested"));
    }
    Ok(out)
}

/// Scaled metric value of one prediction. UCD and UHD go from the partial
/// input to the prediction; CD compares against the ground truth.
pub fn sample_metric(
    kind: MetricKind,
    partial: &PointCloud,
    pred: &PointCloud,
    complete: &PointCloud,
) -> Result<f64> {
    let v = match kind {
        MetricKind::Chamfer => chamfer_distance(pred, complete)?,
        MetricKind::UnidirectionalChamfer => unidirectional_chamfer(partial, pred)?,
        MetricKind::UnidirectionalHausdorff => unidirectional_hausdorff(partial, pred)?,
    };
    Ok(v.scaled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub count: usize,
    /// Scaled values in the order of `MetricTable::metrics`.
    pub values: Vec<f64>,
}

/// One row per category plus an `Avg` row, the unweighted mean of the
/// category rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metrics: Vec<MetricKind>,
    pub rows: Vec<MetricRow>,
    pub avg: MetricRow,
}

impl MetricTable {
    /// Builds the table from per-sample `(category, scaled values)`.
    pub fn from_samples(metrics: Vec<MetricKind>, samples: &[(String, Vec<f64>)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::MissingData("no samples to tabulate".into()));
        }
        let m = metrics.len();
        let mut groups: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
        for (cat, vals) in samples {
            let e = groups.entry(cat.as_str()).or_insert((0, vec![0.0; m]));
            e.0 += 1;
            for (acc, v) in e.1.iter_mut().zip(vals) {
                *acc += v;
            }
        }
        let rows: Vec<MetricRow> = groups
            .into_iter()
            .map(|(label, (count, sums))| MetricRow {
                label: label.to_string(),
                count,
                values: sums.into_iter().map(|s| s / count as f64).collect(),
            })
            .collect();
        let avg = MetricRow {
            label: "Avg".into(),
            count: samples.len(),
            values: (0..m)
                .map(|j| rows.iter().map(|r| r.values[j]).sum::<f64>() / rows.len() as f64)
                .collect(),
        };
        Ok(Self { metrics, rows, avg })
    }

    pub fn value(&self, kind: MetricKind) -> Option<f64> {
        let j = self.metrics.iter().position(|&k| k == kind)?;
        Some(self.avg.values[j])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,count");
        for &k in &self.metrics {
            let _ = write!(s, ",{}", metric_name(k));
        }
        s.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.avg)) {
            let _ = write!(s, "{},{}", r.label, r.count);
            for v in &r.values {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width table; CD and UCD are shown ×10⁴ and UHD ×10².
    pub fn render(&self) -> String {
        let mut s = format!("{:<10} {:>5}", "category", "n");
        for &k in &self.metrics {
            let label = format!(
                "{} x1e{}",
                metric_name(k).to_uppercase(),
                k.scale().log10().round()
            );
            let _ = write!(s, " {label:>12}");
        }
        s.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.avg)) {
            let _ = write!(s, "{:<10} {:>5}", r.label, r.count);
            for v in &r.values {
                let _ = write!(s, " {v:>12.4}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Completes every sample and tabulates the requested metrics per category.
/// Samples without ground truth are reported together in one error.
pub fn evaluate(
    model: &impl Completer,
    samples: &[Sample],
    metrics: &[MetricKind],
) -> Result<MetricTable> {
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| s.complete.is_none())
        .map(|s| s.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingData(format!(
            "ground truth missing for: {}",
            missing.join(", ")
        )));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let complete = s.complete.as_ref().expect("checked above");
        let pred = model.complete(&s.partial)?;
        let vals = metrics
            .iter()
            .map(|&k| sample_metric(k, &s.partial, &pred, complete))
            .collect::<Result<Vec<_>>>()?;
        let cat = s
            .category
            .map_or_else(|| "unknown".to_string(), |c| c.name().to_string());
        rows.push((cat, vals));
    }
    MetricTable::from_samples(metrics.to_vec(), &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy of the linear domain classifier.
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// `(x, y, λ)` per input feature, in input order.
    pub projection: Vec<[f64; 3]>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,lambda\n");
        for [x, y, l] in &self.projection {
            let _ = writeln!(s, "{x},{y},{l}");
        }
        s
    }
}

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.5;
pub const PROBE_L2: f64 = 1e-3;

fn standardize(features: &[Vec<f64>], fit_on: &[usize]) -> Vec<Vec<f64>> {
    let d = features[0].len();
    let n = fit_on.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in fit_on {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in fit_on {
        for ((s, v), m) in sd.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    features
        .iter()
        .map(|f| {
            f.iter()
                .zip(&mean)
                .zip(&sd)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic regression by full-batch gradient descent; returns `(w, b)`.
fn fit_logistic(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z = b + xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = sigmoid(z) - yi;
            gb += r / n;
            for (g, v) in gw.iter_mut().zip(xi) {
                *g += r * v / n;
            }
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= PROBE_LR * (g + PROBE_L2 * *wj);
        }
        b -= PROBE_LR * gb;
    }
    (w, b)
}

/// Fits a linear domain probe on a seeded, per-domain balanced half of the
/// features and reports accuracy on the other half, plus the projection of all
/// standardized features onto their two leading principal components.
pub fn probe_features(features: &[Vec<f64>], domains: &[Domain], seed: u64) -> Result<ProbeReport> {
    if features.len() != domains.len() {
        return Err(Error::invalid("one domain label per feature vector"));
    }
    let d = features.first().map_or(0, Vec::len);
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid(
            "features must be nonempty and of equal width",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for dom in [Domain::Source, Domain::Target] {
        let mut idx: Vec<usize> = (0..features.len()).filter(|&i| domains[i] == dom).collect();
        if idx.len() < 2 {
            return Err(Error::invalid(
                "the probe needs at least two samples per domain",
            ));
        }
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        train.extend_from_slice(&idx[..half]);
        test.extend_from_slice(&idx[half..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    let z = standardize(features, &train);
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| z[i].clone()).collect();
    let ys: Vec<f64> = train.iter().map(|&i| domains[i].label()).collect();
    let (w, b) = fit_logistic(&xs, &ys);
    let correct = test
        .iter()
        .filter(|&&i| {
            let s = b + z[i].iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (s > 0.0) == (domains[i] == Domain::Target)
        })
        .count();

    let all: Vec<usize> = (0..features.len()).collect();
    let zall = standardize(features, &all);
    let proj = principal_plane(&zall);
    let projection = zall
        .iter()
        .zip(domains)
        .map(|(f, dom)| {
            let x = f.iter().zip(&proj[0]).map(|(a, c)| a * c).sum();
            let y = f.iter().zip(&proj[1]).map(|(a, c)| a * c).sum();
            [x, y, dom.label()]
        })
        .collect();
    Ok(ProbeReport {
        accuracy: correct as f64 / test.len() as f64,
        train_size: train.len(),
        test_size: test.len(),
        projection,
    })
}

/// Two leading eigenvectors of the covariance of centered rows, each with its
/// largest-magnitude component made positive.
fn principal_plane(rows: &[Vec<f64>]) -> [Vec<f64>; 2] {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let cov = (x.transpose() * &x) / n.max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let pick = |k: usize| -> Vec<f64> {
        let Some(&j) = order.get(k) else {
            return vec![0.0; d];
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0, |m: f64, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        v
    };
    [pick(0), pick(1)]
}

/// Probe on the pooled encoder features of `source` (λ = 0) and `target`
/// (λ = 1) partial clouds.
pub fn probe_alignment(
    net: &CompletionNet,
    source: &[PointCloud],
    target: &[PointCloud],
    seed: u64,
) -> Result<ProbeReport> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::MissingData(
            "the probe needs both source and target clouds".into(),
        ));
    }
    let mut feats = Vec::with_capacity(source.len() + target.len());
    let mut doms = Vec::with_capacity(feats.capacity());
    for (clouds, dom) in [(source, Domain::Source), (target, Domain::Target)] {
        for c in clouds {
            feats.push(net.global_feature(c)?);
            doms.push(dom);
        }
    }
    probe_features(&feats, &doms, seed)
}

/// Reads `input`, completes it and writes the dense cloud to `output`.
pub fn complete_file(model: &impl Completer, input: &Path, output: &Path) -> Result<PointCloud> {
    let partial = read_cloud(input)?;
    let done = model.complete(&partial)?;
    write_cloud(&done, output)?;
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Category;
    use rand::Rng;

    fn sample(id: &str, cat: Category, partial: Vec<[f64; 3]>, complete: Vec<[f64; 3]>) -> Sample {
        Sample {
            id: id.into(),
            category: Some(cat),
            partial: PointCloud::new(partial).unwrap(),
            complete: Some(PointCloud::new(complete).unwrap()),
        }
    }

    fn toy_split() -> Vec<Sample> {
        vec![
            sample(
                "0000_box",
                Category::Box,
                vec![[0.0; 3]],
                vec![[0.0; 3], [1.0, 0.0, 0.0]],
            ),
            sample(
                "0001_box",
                Category::Box,
                vec![[0.0, 2.0, 0.0]],
                vec![[0.0; 3], [0.0, 2.0, 0.0]],
            ),
            sample(
                "0002_lamp",
                Category::Lamp,
                vec![[1.0; 3]],
                vec![[1.0; 3], [1.0, 1.0, 0.0]],
            ),
        ]
    }

    #[test]
    fn oracle_and_identity_models() {
        let split = toy_split();
        let all = parse_metrics("cd,ucd,uhd").unwrap();
        let gt: BTreeMap<String, PointCloud> = split
            .iter()
            .map(|s| {
                (
                    format!("{:?}", s.partial.points()),
                    s.complete.clone().unwrap(),
                )
            })
            .collect();
        let oracle =
            |p: &PointCloud| -> Result<PointCloud> { Ok(gt[&format!("{:?}", p.points())].clone()) };
        let ident = |p: &PointCloud| -> Result<PointCloud> { Ok(p.clone()) };
        let t = evaluate(&oracle, &split, &all).unwrap();
        assert_eq!(t.avg.values[0], 0.0);

        let t = evaluate(&ident, &split, &all).unwrap();
        assert_eq!(t.value(MetricKind::UnidirectionalChamfer), Some(0.0));
        assert!(t.value(MetricKind::Chamfer).unwrap() > 0.0);
        // box rows: CD 0.5 and 2.0, lamp: 0.5
        assert!((t.rows[0].values[0] - 1.25e4).abs() < 1e-9);
        assert!((t.rows[1].values[0] - 0.5e4).abs() < 1e-9);
        assert!((t.avg.values[0] - (1.25e4 + 0.5e4) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn missing_ground_truth_lists_ids() {
        let mut split = toy_split();
        split[1].complete = None;
        let ident = |p: &PointCloud| -> Result<PointCloud> { Ok(p.clone()) };
        match evaluate(&ident, &split, &[MetricKind::Chamfer]) {
            Err(Error::MissingData(msg)) => assert!(msg.contains("0001_box")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_and_render() {
        let t = MetricTable::from_samples(
            vec![MetricKind::Chamfer, MetricKind::UnidirectionalHausdorff],
            &[
                ("box".into(), vec![1.0, 2.0]),
                ("lamp".into(), vec![3.0, 4.0]),
            ],
        )
        .unwrap();
        let csv = t.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "category,count,cd,uhd");
        assert_eq!(csv.lines().last().unwrap(), "Avg,2,2,3");
        assert!(t.render().contains("UHD x1e2"));
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(parse_metrics("ucd, cd").unwrap().len(), 2);
        assert!(parse_metrics("cd,cd").is_err());
        assert!(parse_metrics("emd").is_err());
        assert!(parse_metrics("").is_err());
    }

    fn gaussian_features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn probe_chance_on_identical_distributions() {
        let f = gaussian_features(100, 8, 1);
        let mut feats = f.clone();
        feats.extend(f);
        let doms: Vec<Domain> = (0..200)
            .map(|i| {
                if i < 100 {
                    Domain::Source
                } else {
                    Domain::Target
                }
            })
            .collect();
        let r = probe_features(&feats, &doms, 3).unwrap();
        assert!((r.accuracy - 0.5).abs() <= 0.1, "{}", r.accuracy);
        assert_eq!(r.projection.len(), 200);
        assert_eq!(r.train_size + r.test_size, 200);
    }

    #[test]
    fn probe_separates_offset_domains() {
        let mut feats = gaussian_features(100, 8, 1);
        for f in &mut feats[50..] {
            f.iter_mut().for_each(|v| *v += 10.0);
        }
        let doms: Vec<Domain> = (0..100)
            .map(|i| {
                if i < 50 {
                    Domain::Source
                } else {
                    Domain::Target
                }
            })
            .collect();
        let r = probe_features(&feats, &doms, 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.projection.iter().all(|p| p[2] == 0.0 || p[2] == 1.0));
        assert_eq!(r.to_csv().lines().count(), 101);
    }

    #[test]
    fn principal_plane_finds_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64 - 9.5) * 3.0, ((i % 2) as f64 - 0.5) * 0.1])
            .collect();
        let [a, b] = principal_plane(&rows);
        assert!(
            (a[0] - 1.0).abs() < 1e-3 && a[1].abs() < 1e-3,
            "{a:?} {b:?}"
        );
        assert!((b[1].abs() - 1.0).abs() < 1e-3);
    }
}
