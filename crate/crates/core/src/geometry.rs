//! Point cloud kernels: distances, sampling and neighborhoods.
//!
//! Conventions used by every metric here:
//!
//! * **CD** sums the two directional means of *squared* nearest-neighbor distances.
//! * **UCD** is the partial → prediction half of CD (squared, per-point mean).
//! * **UHD** is the maximum *non-squared* nearest-neighbor distance from partial to
//!   prediction.
//!
//! Reported values are multiplied by 10⁴ (CD, UCD) or 10² (UHD). All tie-breaks go
//! to the lowest index.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

pub const CD_SCALE: f64 = 1e4;
pub const UCD_SCALE: f64 = 1e4;
pub const UHD_SCALE: f64 = 1e2;

/// An ordered, non-empty list of finite 3D points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point3>", into = "Vec<Point3>")]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid(
                "point cloud must contain at least one point",
            ));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from `[x0, y0, z0, x1, ...]`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "flat coordinate buffer length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self
                .points
                .get(i)
                .ok_or_else(|| Error::invalid(format!("index {i} out of range")))?;
            out.push(*p);
        }
        Self::new(out)
    }

    pub fn translated(&self, t: Point3) -> Self {
        Self {
            points: self.points.iter().map(|p| add(*p, t)).collect(),
        }
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Centers the cloud on its bounding-box center and scales it so the farthest
    /// point lies on the unit sphere.
    pub fn normalized_unit_sphere(&self) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let radius = self
            .points
            .iter()
            .map(|p| dist2(*p, center))
            .fold(0.0, f64::max)
            .sqrt();
        let s = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        Self {
            points: self
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| (p[k] - center[k]) * s))
                .collect(),
        }
    }
}

impl Deref for PointCloud {
    type Target = [Point3];

    fn deref(&self) -> &[Point3] {
        &self.points
    }
}

impl TryFrom<Vec<Point3>> for PointCloud {
    type Error = Error;

    fn try_from(points: Vec<Point3>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<PointCloud> for Vec<Point3> {
    fn from(c: PointCloud) -> Self {
        c.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Chamfer,
    UnidirectionalChamfer,
    UnidirectionalHausdorff,
}

impl MetricKind {
    pub fn scale(self) -> f64 {
        match self {
            MetricKind::Chamfer => CD_SCALE,
            MetricKind::UnidirectionalChamfer => UCD_SCALE,
            MetricKind::UnidirectionalHausdorff => UHD_SCALE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub raw: f64,
    pub scaled: f64,
}

impl MetricValue {
    pub fn new(kind: MetricKind, raw: f64) -> Self {
        Self {
            kind,
            raw,
            scaled: raw * kind.scale(),
        }
    }
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn ensure_nonempty(name: &str, pts: &[Point3]) -> Result<()> {
    if pts.is_empty() {
        Err(Error::invalid(format!("{name} cloud is empty")))
    } else {
        Ok(())
    }
}

/// For every point of `from`, the index of its nearest point in `to` and the
/// squared distance to it.
pub fn nearest_neighbors(from: &[Point3], to: &[Point3]) -> Vec<(usize, f64)> {
    from.iter()
        .map(|&p| {
            let mut best = (0usize, f64::INFINITY);
            for (j, &q) in to.iter().enumerate() {
                let d = dist2(p, q);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

fn mean_nn_sq(from: &[Point3], to: &[Point3]) -> f64 {
    let nn = nearest_neighbors(from, to);
    nn.iter().map(|&(_, d)| d).sum::<f64>() / nn.len() as f64
}

pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> Result<MetricValue> {
    ensure_nonempty("first", a)?;
    ensure_nonempty("second", b)?;
    let raw = mean_nn_sq(a, b) + mean_nn_sq(b, a);
    Ok(MetricValue::new(MetricKind::Chamfer, raw))
}

pub fn unidirectional_chamfer(partial: &[Point3], pred: &[Point3]) -> Result<MetricValue> {
    ensure_nonempty("partial", partial)?;
    ensure_nonempty("prediction", pred)?;
    Ok(MetricValue::new(
        MetricKind::UnidirectionalChamfer,
        mean_nn_sq(partial, pred),
    ))
}

pub fn unidirectional_hausdorff(partial: &[Point3], pred: &[Point3]) -> Result<MetricValue> {
    ensure_nonempty("partial", partial)?;
    ensure_nonempty("prediction", pred)?;
    let worst = nearest_neighbors(partial, pred)
        .into_iter()
        .map(|(_, d)| d)
        .fold(0.0, f64::max);
    Ok(MetricValue::new(
        MetricKind::UnidirectionalHausdorff,
        worst.sqrt(),
    ))
}

/// Index of the lexicographically smallest point (x, then y, then z; lowest index
/// on exact ties).
pub fn lexicographic_min_index(pts: &[Point3]) -> usize {
    let mut best = 0;
    for (i, p) in pts.iter().enumerate().skip(1) {
        if p.partial_cmp(&pts[best]) == Some(std::cmp::Ordering::Less) {
            best = i;
        }
    }
    best
}

/// Greedy max-min subset selection starting from `seed_index`.
pub fn farthest_point_sample(pts: &[Point3], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = pts.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot select {k} points from a cloud of {n}"
        )));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    selected.push(seed_index);
    let mut min_d: Vec<f64> = pts.iter().map(|&p| dist2(p, pts[seed_index])).collect();
    min_d[seed_index] = f64::NEG_INFINITY;
    while selected.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        selected.push(best);
        min_d[best] = f64::NEG_INFINITY;
        let c = pts[best];
        for (i, d) in min_d.iter_mut().enumerate() {
            if *d > f64::NEG_INFINITY {
                let nd = dist2(pts[i], c);
                if nd < *d {
                    *d = nd;
                }
            }
        }
    }
    Ok(selected)
}

/// For each query point, the `k` nearest indices into `cloud`, ascending by
/// distance with ties going to the lower index.
pub fn knn_indices(cloud: &[Point3], query: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k > cloud.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds cloud size {}",
            cloud.len()
        )));
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(cloud.len());
    Ok(query
        .iter()
        .map(|&q| {
            order.clear();
            order.extend(cloud.iter().enumerate().map(|(i, &p)| (dist2(p, q), i)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k > 0 && k < order.len() {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            let head = &mut order[..k];
            head.sort_unstable_by(cmp);
            head.iter().map(|&(_, i)| i).collect()
        })
        .collect())
}

/// Brings a cloud to exactly `n` points: farthest-point subsampling when it has
/// enough points, otherwise all originals plus uniformly drawn duplicates.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("cannot resample to zero points"));
    }
    let size = cloud.len();
    if size >= n {
        let start = lexicographic_min_index(cloud);
        let idx = farthest_point_sample(cloud, n, start)?;
        return cloud.select(&idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = cloud.points().to_vec();
    for _ in size..n {
        pts.push(cloud[rng.random_range(0..size)]);
    }
    PointCloud::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xs(v: &[f64]) -> Vec<Point3> {
        v.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        assert_eq!(chamfer_distance(&a, &a).unwrap().raw, 0.0);
        let v = chamfer_distance(&[[0.0, 0.0, 0.0]], &[[3.0, 4.0, 0.0]]).unwrap();
        assert_eq!(v.raw, 50.0);
        assert_eq!(v.scaled, 50.0 * 1e4);
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(chamfer_distance(&a, &b).unwrap().raw, 1.0);
    }

    #[test]
    fn unidirectional_examples() {
        let ucd = unidirectional_chamfer(&xs(&[1.0]), &xs(&[0.0, 2.0])).unwrap();
        assert_eq!(ucd.raw, 1.0);
        assert_eq!(
            unidirectional_chamfer(&xs(&[0.0, 1.0]), &xs(&[0.0]))
                .unwrap()
                .raw,
            0.5
        );
        assert_eq!(
            unidirectional_chamfer(&xs(&[1.0]), &xs(&[0.0, 1.0, 2.0]))
                .unwrap()
                .raw,
            0.0
        );
        let uhd = unidirectional_hausdorff(&xs(&[0.0, 1.0]), &xs(&[0.0])).unwrap();
        assert_eq!(uhd.raw, 1.0);
        assert_eq!(uhd.scaled, 100.0);
        let p = [[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]];
        let q = [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(unidirectional_hausdorff(&p, &q).unwrap().raw, 1.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let a = xs(&[0.0]);
        assert!(matches!(
            chamfer_distance(&a, &[]),
            Err(Error::InvalidInput(_))
        ));
        assert!(unidirectional_chamfer(&[], &a).is_err());
        assert!(unidirectional_hausdorff(&[], &a).is_err());
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn fps_examples() {
        let pts = xs(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sample(&pts, 1, 2).unwrap(), vec![2]);
        let mut all = farthest_point_sample(&pts, 4, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&pts, 5, 0).is_err());
        assert!(farthest_point_sample(&pts, 2, 7).is_err());
    }

    #[test]
    fn fps_ties_go_to_lowest_index() {
        // 1 and 2 are both at distance 1 from the seed.
        let pts = xs(&[0.0, 1.0, -1.0]);
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn knn_examples() {
        let cloud = xs(&[0.0, 1.0, 5.0]);
        assert_eq!(
            knn_indices(&cloud, &xs(&[0.4]), 2).unwrap(),
            vec![vec![0, 1]]
        );
        let own = knn_indices(&cloud, &cloud, 1).unwrap();
        assert_eq!(own, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(
            knn_indices(&cloud, &xs(&[4.0]), 3).unwrap(),
            vec![vec![2, 1, 0]]
        );
        assert!(knn_indices(&cloud, &cloud, 4).is_err());
        // equidistant neighbors resolve by index
        assert_eq!(
            knn_indices(&xs(&[1.0, -1.0]), &xs(&[0.0]), 2).unwrap(),
            vec![vec![0, 1]]
        );
    }

    #[test]
    fn resample_examples() {
        let c = PointCloud::new(xs(&[0.0, 1.0, 2.0, 10.0])).unwrap();
        let same = resample(&c, 4, 3).unwrap();
        let mut got: Vec<f64> = same.iter().map(|p| p[0]).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![0.0, 1.0, 2.0, 10.0]);

        let two = resample(&c, 2, 0).unwrap();
        assert_eq!(two.points(), &xs(&[0.0, 10.0])[..]);

        let small = PointCloud::new(xs(&[0.0, 1.0, 2.0])).unwrap();
        let up = resample(&small, 5, 9).unwrap();
        assert_eq!(up.len(), 5);
        for p in small.iter() {
            assert!(up.contains(p));
        }
        assert_eq!(up, resample(&small, 5, 9).unwrap());
        assert!(resample(&small, 0, 1).is_err());
    }

    #[test]
    fn normalization_fits_unit_sphere() {
        let c = PointCloud::new(vec![[2.0, 2.0, 2.0], [4.0, 2.0, 2.0], [3.0, 5.0, 2.0]]).unwrap();
        let n = c.normalized_unit_sphere();
        let r = n.iter().map(|p| dist2(*p, [0.0; 3])).fold(0.0, f64::max);
        assert!((r - 1.0).abs() < 1e-12);
    }
}
