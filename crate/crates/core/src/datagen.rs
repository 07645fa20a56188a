//! Procedural shapes, occlusion-based partial scans, and the on-disk benchmark
//! with a labeled source domain and a shifted, unlabeled target domain.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::align::Domain;
use crate::cloud_io::{read_cloud, write_cloud};
use crate::error::{Error, Result};
use crate::geometry::{dist2, resample, Point3, PointCloud};

pub const MIN_COMPLETE_POINTS: usize = 64;
pub const MIN_KEPT_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Box,
    Cylinder,
    Lamp,
    Table,
    Chair,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Box,
        Category::Cylinder,
        Category::Lamp,
        Category::Table,
        Category::Chair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::Cylinder => "cylinder",
            Category::Lamp => "lamp",
            Category::Table => "table",
            Category::Chair => "chair",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-category dimensions. `y` is up; every shape rests on or is centered
/// around the origin before posing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShapeParams {
    Box {
        size: [f64; 3],
    },
    Cylinder {
        radius: f64,
        height: f64,
    },
    Lamp {
        base_radius: f64,
        pole_radius: f64,
        pole_height: f64,
        shade_bottom: f64,
        shade_top: f64,
        shade_height: f64,
    },
    Table {
        top: [f64; 3],
        leg_height: f64,
        leg_width: f64,
    },
    Chair {
        seat: [f64; 3],
        leg_height: f64,
        leg_width: f64,
        back_height: f64,
        back_thickness: f64,
    },
}

impl ShapeParams {
    pub fn category(&self) -> Category {
        match self {
            ShapeParams::Box { .. } => Category::Box,
            ShapeParams::Cylinder { .. } => Category::Cylinder,
            ShapeParams::Lamp { .. } => Category::Lamp,
            ShapeParams::Table { .. } => Category::Table,
            ShapeParams::Chair { .. } => Category::Chair,
        }
    }

    fn dims(&self) -> Vec<f64> {
        match self {
            ShapeParams::Box { size } => size.to_vec(),
            ShapeParams::Cylinder { radius, height } => vec![*radius, *height],
            ShapeParams::Lamp {
                base_radius,
                pole_radius,
                pole_height,
                shade_bottom,
                shade_top,
                shade_height,
            } => vec![
                *base_radius,
                *pole_radius,
                *pole_height,
                *shade_bottom,
                *shade_top,
                *shade_height,
            ],
            ShapeParams::Table {
                top,
                leg_height,
                leg_width,
            } => vec![top[0], top[1], top[2], *leg_height, *leg_width],
            ShapeParams::Chair {
                seat,
                leg_height,
                leg_width,
                back_height,
                back_thickness,
            } => vec![
                seat[0],
                seat[1],
                seat[2],
                *leg_height,
                *leg_width,
                *back_height,
                *back_thickness,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    /// Rotation about the up axis, radians.
    pub yaw: f64,
    pub translation: Point3,
}

impl Pose {
    fn apply(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] + s * p[2] + self.translation[0],
            p[1] + self.translation[1],
            -s * p[0] + c * p[2] + self.translation[2],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub params: ShapeParams,
    pub pose: Pose,
}

impl ShapeSpec {
    pub fn new(params: ShapeParams) -> Self {
        Self {
            params,
            pose: Pose::default(),
        }
    }

    pub fn category(&self) -> Category {
        self.params.category()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self
            .params
            .dims()
            .into_iter()
            .find(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::invalid(format!(
                "{} dimensions must be positive, got {bad}",
                self.category()
            )));
        }
        if let ShapeParams::Table { top, leg_width, .. }
        | ShapeParams::Chair {
            seat: top,
            leg_width,
            ..
        } = &self.params
        {
            if 2.0 * leg_width > top[0].min(top[2]) {
                return Err(Error::invalid("legs wider than the top they support"));
            }
        }
        Ok(())
    }

    /// Random dimensions within per-category ranges and a random pose.
    pub fn random(category: Category, rng: &mut impl Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let params = match category {
            Category::Box => ShapeParams::Box {
                size: [u(0.5, 1.5), u(0.5, 1.5), u(0.5, 1.5)],
            },
            Category::Cylinder => ShapeParams::Cylinder {
                radius: u(0.3, 0.7),
                height: u(0.6, 1.8),
            },
            Category::Lamp => {
                let shade_bottom = u(0.35, 0.6);
                ShapeParams::Lamp {
                    base_radius: u(0.2, 0.4),
                    pole_radius: u(0.03, 0.06),
                    pole_height: u(0.8, 1.4),
                    shade_bottom,
                    shade_top: shade_bottom * u(0.3, 0.7),
                    shade_height: u(0.3, 0.5),
                }
            }
            Category::Table => {
                let top = [u(1.0, 1.8), u(0.05, 0.12), u(0.6, 1.2)];
                ShapeParams::Table {
                    top,
                    leg_height: u(0.5, 0.9),
                    leg_width: u(0.06, 0.12),
                }
            }
            Category::Chair => {
                let seat = [u(0.5, 0.8), u(0.05, 0.1), u(0.5, 0.8)];
                ShapeParams::Chair {
                    seat,
                    leg_height: u(0.4, 0.6),
                    leg_width: u(0.05, 0.08),
                    back_height: u(0.4, 0.8),
                    back_thickness: u(0.05, 0.1),
                }
            }
        };
        let pose = Pose {
            yaw: u(-PI / 6.0, PI / 6.0),
            translation: [u(-0.1, 0.1), u(-0.1, 0.1), u(-0.1, 0.1)],
        };
        Self { params, pose }
    }
}

#[derive(Debug, Clone, Copy)]
enum Patch {
    /// `origin + a·u + b·v`, `a, b ∈ [0, 1]`
    Rect {
        origin: Point3,
        u: Point3,
        v: Point3,
    },
    /// Horizontal disk.
    Disk { center: Point3, radius: f64 },
    /// Open frustum side along +y (a cylinder when both radii agree).
    Frustum {
        base: Point3,
        r0: f64,
        r1: f64,
        height: f64,
    },
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Patch {
    fn area(&self) -> f64 {
        match *self {
            Patch::Rect { u, v, .. } => dist2(cross(u, v), [0.0; 3]).sqrt(),
            Patch::Disk { radius, .. } => PI * radius * radius,
            Patch::Frustum { r0, r1, height, .. } => {
                let slant = (height * height + (r1 - r0) * (r1 - r0)).sqrt();
                PI * (r0 + r1) * slant
            }
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Point3 {
        match *self {
            Patch::Rect { origin, u, v } => {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                [0, 1, 2].map(|k| origin[k] + a * u[k] + b * v[k])
            }
            Patch::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..2.0 * PI);
                [center[0] + r * t.cos(), center[1], center[2] + r * t.sin()]
            }
            Patch::Frustum {
                base,
                r0,
                r1,
                height,
            } => {
                // area density along the slant is proportional to the radius
                let rmax = r0.max(r1);
                let s = loop {
                    let s: f64 = rng.random();
                    if rng.random::<f64>() * rmax <= r0 + (r1 - r0) * s {
                        break s;
                    }
                };
                let r = r0 + (r1 - r0) * s;
                let t = rng.random_range(0.0..2.0 * PI);
                [
                    base[0] + r * t.cos(),
                    base[1] + s * height,
                    base[2] + r * t.sin(),
                ]
            }
        }
    }
}

/// Six faces of an axis-aligned box given its minimum corner and size.
fn box_patches(lo: Point3, size: [f64; 3], out: &mut Vec<Patch>) {
    let [w, h, d] = size;
    let ex = [w, 0.0, 0.0];
    let ey = [0.0, h, 0.0];
    let ez = [0.0, 0.0, d];
    let hi = [lo[0] + w, lo[1] + h, lo[2] + d];
    out.push(Patch::Rect {
        origin: lo,
        u: ey,
        v: ez,
    });
    out.push(Patch::Rect {
        origin: [hi[0], lo[1], lo[2]],
        u: ey,
        v: ez,
    });
    out.push(Patch::Rect {
        origin: lo,
        u: ex,
        v: ez,
    });
    out.push(Patch::Rect {
        origin: [lo[0], hi[1], lo[2]],
        u: ex,
        v: ez,
    });
    out.push(Patch::Rect {
        origin: lo,
        u: ex,
        v: ey,
    });
    out.push(Patch::Rect {
        origin: [lo[0], lo[1], hi[2]],
        u: ex,
        v: ey,
    });
}

fn legs(top_w: f64, top_d: f64, leg_h: f64, leg_w: f64, out: &mut Vec<Patch>) {
    for sx in [-1.0, 1.0] {
        for sz in [-1.0, 1.0] {
            let cx = sx * (top_w / 2.0 - leg_w / 2.0);
            let cz = sz * (top_d / 2.0 - leg_w / 2.0);
            box_patches(
                [cx - leg_w / 2.0, 0.0, cz - leg_w / 2.0],
                [leg_w, leg_h, leg_w],
                out,
            );
        }
    }
}

fn patches(params: &ShapeParams) -> Vec<Patch> {
    let mut out = Vec::new();
    match *params {
        ShapeParams::Box { size } => {
            box_patches(size.map(|s| -s / 2.0), size, &mut out);
        }
        ShapeParams::Cylinder { radius, height } => {
            let y0 = -height / 2.0;
            out.push(Patch::Frustum {
                base: [0.0, y0, 0.0],
                r0: radius,
                r1: radius,
                height,
            });
            out.push(Patch::Disk {
                center: [0.0, y0, 0.0],
                radius,
            });
            out.push(Patch::Disk {
                center: [0.0, y0 + height, 0.0],
                radius,
            });
        }
        ShapeParams::Lamp {
            base_radius,
            pole_radius,
            pole_height,
            shade_bottom,
            shade_top,
            shade_height,
        } => {
            out.push(Patch::Disk {
                center: [0.0; 3],
                radius: base_radius,
            });
            out.push(Patch::Frustum {
                base: [0.0; 3],
                r0: pole_radius,
                r1: pole_radius,
                height: pole_height,
            });
            out.push(Patch::Frustum {
                base: [0.0, pole_height - 0.5 * shade_height, 0.0],
                r0: shade_bottom,
                r1: shade_top,
                height: shade_height,
            });
        }
        ShapeParams::Table {
            top,
            leg_height,
            leg_width,
        } => {
            box_patches([-top[0] / 2.0, leg_height, -top[2] / 2.0], top, &mut out);
            legs(top[0], top[2], leg_height, leg_width, &mut out);
        }
        ShapeParams::Chair {
            seat,
            leg_height,
            leg_width,
            back_height,
            back_thickness,
        } => {
            box_patches([-seat[0] / 2.0, leg_height, -seat[2] / 2.0], seat, &mut out);
            legs(seat[0], seat[2], leg_height, leg_width, &mut out);
            box_patches(
                [-seat[0] / 2.0, leg_height + seat[1], -seat[2] / 2.0],
                [seat[0], back_height, back_thickness],
                &mut out,
            );
        }
    }
    out
}

/// Samples `n` points uniformly by area over the posed shape's surfaces.
pub fn generate_complete(spec: &ShapeSpec, n: usize, seed: u64) -> Result<PointCloud> {
    if n < MIN_COMPLETE_POINTS {
        return Err(Error::invalid(format!(
            "complete clouds need at least {MIN_COMPLETE_POINTS} points, asked for {n}"
        )));
    }
    spec.validate()?;
    let patches = patches(&spec.params);
    let weights = WeightedIndex::new(patches.iter().map(Patch::area))
        .map_err(|e| Error::invalid(format!("degenerate surface: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| {
            spec.pose
                .apply(patches[weights.sample(&mut rng)].sample(&mut rng))
        })
        .collect();
    PointCloud::new(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcclusionMode {
    /// Removes everything beyond a plane with a random normal.
    HalfSpace,
    /// Removes a cone of directions, seen from the centroid, around a random axis.
    ViewCone,
    /// Removes a few compact patches around random seed points.
    PatchDrop,
}

impl std::str::FromStr for OcclusionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "half-space" => Ok(OcclusionMode::HalfSpace),
            "view-cone" => Ok(OcclusionMode::ViewCone),
            "patch-drop" => Ok(OcclusionMode::PatchDrop),
            other => Err(format!(
                "unknown occlusion `{other}` (expected half-space, view-cone or patch-drop)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub occlusion: OcclusionMode,
    pub fraction: f64,
    /// Point count of every partial cloud.
    pub resolution: usize,
    pub noise_sigma: f64,
    pub domain: Domain,
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.05..=0.6).contains(&self.fraction) {
            return Err(Error::config(format!(
                "occlusion fraction {} outside [0.05, 0.6]",
                self.fraction
            )));
        }
        if self.resolution == 0 {
            return Err(Error::config("resolution must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be a finite value >= 0"));
        }
        Ok(())
    }

    /// True when occlusion mode, resolution or noise differ.
    pub fn differs_from(&self, other: &DomainConfig) -> bool {
        self.occlusion != other.occlusion
            || self.resolution != other.resolution
            || self.noise_sigma != other.noise_sigma
    }
}

fn random_unit(rng: &mut impl Rng) -> Point3 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Point3 = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = dist2(v, [0.0; 3]).sqrt();
        if len > 1e-9 {
            return v.map(|c| c / len);
        }
    }
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Indices kept after removing `round(fraction · n)` points by `mode`. The
/// direction is the plane normal (half-space) or cone axis (view-cone); patch
/// drop draws its own seeds from `rng`.
pub fn kept_indices(
    pts: &[Point3],
    mode: OcclusionMode,
    direction: Point3,
    fraction: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = pts.len();
    let remove = (fraction * n as f64).round() as usize;
    let mut removed = vec![false; n];
    let drop_top = |score: &dyn Fn(Point3) -> f64, count: usize, removed: &mut Vec<bool>| {
        let mut order: Vec<(f64, usize)> = (0..n)
            .filter(|&i| !removed[i])
            .map(|i| (score(pts[i]), i))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in order.iter().take(count) {
            removed[i] = true;
        }
    };
    match mode {
        OcclusionMode::HalfSpace => drop_top(&|p| dot(p, direction), remove, &mut removed),
        OcclusionMode::ViewCone => {
            let c = PointCloud::new(pts.to_vec())
                .map(|c| c.centroid())
                .unwrap_or([0.0; 3]);
            drop_top(
                &|p| {
                    let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    let len = dist2(v, [0.0; 3]).sqrt();
                    if len > 0.0 {
                        dot(v, direction) / len
                    } else {
                        -1.0
                    }
                },
                remove,
                &mut removed,
            );
        }
        OcclusionMode::PatchDrop => {
            const PATCHES: usize = 3;
            let mut left = remove;
            for k in 0..PATCHES {
                let count = left / (PATCHES - k);
                let seed = pts[rng.random_range(0..n)];
                drop_top(&|p| -dist2(p, seed), count, &mut removed);
                left -= count;
            }
        }
    }
    (0..n).filter(|&i| !removed[i]).collect()
}

/// Occludes a complete cloud, brings it to `cfg.resolution` points and adds
/// Gaussian coordinate noise.
pub fn occlude(complete: &PointCloud, cfg: &DomainConfig, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = random_unit(&mut rng);
    occlude_along(complete, cfg, direction, &mut rng)
}

pub fn occlude_along(
    complete: &PointCloud,
    cfg: &DomainConfig,
    direction: Point3,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&cfg.fraction) {
        return Err(Error::invalid(format!(
            "occlusion fraction {} outside [0, 1)",
            cfg.fraction
        )));
    }
    let kept = kept_indices(complete, cfg.occlusion, direction, cfg.fraction, rng);
    if kept.len() < MIN_KEPT_POINTS.min(complete.len()) {
        return Err(Error::invalid(format!(
            "occlusion fraction {} leaves {} points, need {MIN_KEPT_POINTS}",
            cfg.fraction,
            kept.len()
        )));
    }
    let partial = complete.select(&kept)?;
    let partial = resample(&partial, cfg.resolution, rng.random())?;
    if cfg.noise_sigma == 0.0 {
        return Ok(partial);
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let pts = partial
        .iter()
        .map(|p| p.map(|c| c + noise.sample(rng)))
        .collect();
    PointCloud::new(pts)
}

/// SplitMix64 finalizer over a master seed and a path of integers.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut z = master;
    for &p in path {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetEval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::TargetTrain, Split::TargetEval];

    pub fn dir(self) -> &'static str {
        match self {
            Split::SourceTrain => "source/train",
            Split::TargetTrain => "target/train",
            Split::TargetEval => "target/eval",
        }
    }

    /// Whether complete clouds are written for this split.
    pub fn has_complete(self) -> bool {
        !matches!(self, Split::TargetTrain)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub id: String,
    pub category: Category,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub per_category: usize,
    pub n_complete: usize,
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn plan(
        source: DomainConfig,
        target: DomainConfig,
        per_category: usize,
        n_complete: usize,
        seed: u64,
    ) -> Result<Self> {
        source.validate()?;
        target.validate()?;
        if !source.differs_from(&target) {
            return Err(Error::config(
                "source and target must differ in occlusion mode, resolution or noise",
            ));
        }
        if source.domain != Domain::Source || target.domain != Domain::Target {
            return Err(Error::config(
                "domain labels must be source for source and target for target",
            ));
        }
        let mut entries = Vec::new();
        for split in Split::ALL {
            let mut idx = 0u64;
            for (ci, cat) in Category::ALL.into_iter().enumerate() {
                for k in 0..per_category {
                    entries.push(ManifestEntry {
                        split,
                        id: format!("{idx:04}_{cat}"),
                        category: cat,
                        seed: derive_seed(seed, &[split.index(), ci as u64, k as u64]),
                    });
                    idx += 1;
                }
            }
        }
        Ok(Self {
            seed,
            per_category,
            n_complete,
            source,
            target,
            entries,
        })
    }

    pub fn domain_config(&self, split: Split) -> &DomainConfig {
        match split {
            Split::SourceTrain => &self.source,
            Split::TargetTrain | Split::TargetEval => &self.target,
        }
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Complete (normalized to the unit sphere) and partial cloud of one entry.
pub fn generate_entry(
    entry: &ManifestEntry,
    manifest: &Manifest,
) -> Result<(PointCloud, PointCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(entry.seed);
    let spec = ShapeSpec::random(entry.category, &mut rng);
    let complete =
        generate_complete(&spec, manifest.n_complete, rng.random())?.normalized_unit_sphere();
    let partial = occlude(&complete, manifest.domain_config(entry.split), rng.random())?;
    Ok((complete, partial))
}

fn entry_path(root: &Path, split: Split, kind: &str, id: &str) -> PathBuf {
    root.join(split.dir()).join(kind).join(format!("{id}.ply"))
}

/// Writes every split of `manifest` under `root`, plus `manifest.json`.
pub fn build_from_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    for e in &manifest.entries {
        let (complete, partial) = generate_entry(e, manifest)?;
        write_cloud(&partial, &entry_path(root, e.split, "partial", &e.id))?;
        if e.split.has_complete() {
            write_cloud(&complete, &entry_path(root, e.split, "complete", &e.id))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn build_benchmark(
    root: &Path,
    source: DomainConfig,
    target: DomainConfig,
    per_category: usize,
    n_complete: usize,
    seed: u64,
) -> Result<Manifest> {
    let manifest = Manifest::plan(source, target, per_category, n_complete, seed)?;
    build_from_manifest(root, &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub category: Option<Category>,
    pub partial: PointCloud,
    pub complete: Option<PointCloud>,
}

/// `NNNN_category` → category.
pub fn category_of(id: &str) -> Option<Category> {
    id.split_once('_').and_then(|(_, c)| Category::from_name(c))
}

fn list_clouds(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if matches!(p.extension().and_then(|e| e.to_str()), Some("ply" | "xyz")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `dir/partial/*` and, when `need_complete`, the matching
/// `dir/complete/*`. A directory without a `partial` child is read as a flat
/// list of partial clouds.
pub fn load_split(dir: &Path, need_complete: bool) -> Result<Vec<Sample>> {
    let partial_dir = dir.join("partial");
    let (pdir, flat) = if partial_dir.is_dir() {
        (partial_dir, false)
    } else {
        (dir.to_path_buf(), true)
    };
    if !pdir.is_dir() {
        return Err(Error::MissingData(format!(
            "{} does not exist",
            pdir.display()
        )));
    }
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for p in list_clouds(&pdir)? {
        let id = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let partial = read_cloud(&p)?;
        let complete = if need_complete && !flat {
            let cp = dir.join("complete").join(p.file_name().expect("file name"));
            if cp.is_file() {
                Some(read_cloud(&cp)?)
            } else {
                missing.push(id.clone());
                None
            }
        } else {
            None
        };
        out.push(Sample {
            category: category_of(&id),
            id,
            partial,
            complete,
        });
    }
    if need_complete && (flat || !missing.is_empty()) {
        if flat {
            missing = out.iter().map(|s| s.id.clone()).collect();
        }
        return Err(Error::MissingData(format!(
            "ground truth missing for: {}",
            missing.join(", ")
        )));
    }
    if out.is_empty() {
        return Err(Error::MissingData(format!(
            "no clouds in {}",
            pdir.display()
        )));
    }
    Ok(out)
}
