//! Emission-absorption volume rendering.
//!
//! For samples `i = 1..N` along a ray with color `c_i`, density `sigma_i` and
//! spacing `delta_i`, the pixel color is
//! `sum_i T_i alpha_i c_i + T_{N+1} background`, where
//! `alpha_i = 1 - exp(-sigma_i delta_i)` and `T_i = prod_{j<i} (1 - alpha_j)`.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::io;
use crate::matching::ImageGrid;
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

/// Rays stop accumulating once transmittance falls below this.
const MIN_TRANSMITTANCE: f64 = 1e-12;

/// Pinhole camera with the principal point at the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::invalid(format!("focal length must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be at least 1x1"));
        }
        Ok(())
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub near: f64,
    pub far: f64,
    #[serde(default)]
    pub stratified: bool,
    #[serde(default = "white")]
    pub background: [f64; 3],
}

fn white() -> [f64; 3] {
    [1.0; 3]
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { n_samples: 64, near: 1.0, far: 8.0, stratified: false, background: white() }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be at least 1"));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::invalid(format!("need 0 < near < far, got {} and {}", self.near, self.far)));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background color must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A scene queried at a point and viewing direction for color and density.
/// Implementations must be free of side effects.
pub trait RadianceField: Sync {
    fn query(&self, x: &Vector3<f64>, d: &Vector3<f64>) -> ([f64; 3], f64);
}

/// Field with zero density everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyField;

impl RadianceField for EmptyField {
    fn query(&self, _: &Vector3<f64>, _: &Vector3<f64>) -> ([f64; 3], f64) {
        ([0.0; 3], 0.0)
    }
}

/// Scene primitive rasterized into a [`VoxelField`].
///
/// `color_gradient` (rows per RGB channel) adds `G (p - center) / extent` to
/// the base color, where `extent` is the sphere radius or the box half-size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f64; 3],
        density: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        color_gradient: Option<[[f64; 3]; 3]>,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        color: [f64; 3],
        density: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        color_gradient: Option<[[f64; 3]; 3]>,
    },
}

impl Primitive {
    fn validate(&self) -> Result<()> {
        let (color, density) = match self {
            Primitive::Sphere { radius, color, density, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::invalid("sphere radius must be positive"));
                }
                (color, density)
            }
            Primitive::Box { min, max, color, density, .. } => {
                if (0..3).any(|k| !(min[k] < max[k])) {
                    return Err(Error::invalid("box min must be below max on every axis"));
                }
                (color, density)
            }
        };
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("primitive color must lie in [0, 1]"));
        }
        if !(*density >= 0.0 && density.is_finite()) {
            return Err(Error::invalid("primitive density must be finite and nonnegative"));
        }
        Ok(())
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => (p - Vector3::from(*center)).norm() <= *radius,
            Primitive::Box { min, max, .. } => (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]),
        }
    }

    fn density(&self) -> f64 {
        match self {
            Primitive::Sphere { density, .. } | Primitive::Box { density, .. } => *density,
        }
    }

    fn color_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        let (base, gradient, center, extent) = match self {
            Primitive::Sphere { center, radius, color, color_gradient, .. } => {
                (color, color_gradient, Vector3::from(*center), *radius)
            }
            Primitive::Box { min, max, color, color_gradient, .. } => {
                let (lo, hi) = (Vector3::from(*min), Vector3::from(*max));
                (color, color_gradient, (lo + hi) / 2.0, ((hi - lo) / 2.0).max())
            }
        };
        let Some(g) = gradient else { return *base };
        let rel = (p - center) / extent;
        let mut out = *base;
        for (c, row) in out.iter_mut().zip(g) {
            *c = (*c + row[0] * rel.x + row[1] * rel.y + row[2] * rel.z).clamp(0.0, 1.0);
        }
        out
    }
}

/// Voxel grid description plus the primitives rasterized into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub resolution: [usize; 3],
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

/// Per-axis subsamples used to estimate primitive coverage of a voxel.
const COVERAGE_SUBSAMPLES: usize = 3;

/// Axis-aligned grid of `(r, g, b, sigma)` samples at voxel centers, stored
/// x-fastest. Queries interpolate trilinearly; color is weighted by density.
/// Points outside the bounding box are empty. View direction is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    resolution: [usize; 3],
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    voxels: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VoxelHeader {
    format: String,
    layout: String,
    resolution: [usize; 3],
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    #[serde(flatten)]
    meta: serde_json::Map<String, serde_json::Value>,
}

const VOXEL_FORMAT: &str = "viewcal-voxels/1";
const VOXEL_LAYOUT: &str = "rgb-sigma f64le x-fastest";

impl VoxelField {
    pub fn new(resolution: [usize; 3], bbox_min: [f64; 3], bbox_max: [f64; 3], voxels: Vec<[f64; 4]>) -> Result<Self> {
        if resolution.contains(&0) {
            return Err(Error::invalid("voxel resolution must be positive on every axis"));
        }
        if (0..3).any(|k| !(bbox_min[k] < bbox_max[k])) {
            return Err(Error::invalid("voxel bounding box must have positive extent"));
        }
        if voxels.len() != resolution.iter().product::<usize>() {
            return Err(Error::invalid("voxel count does not match resolution"));
        }
        for v in &voxels {
            if v[..3].iter().any(|c| !(0.0..=1.0).contains(c)) || !(v[3] >= 0.0 && v[3].is_finite()) {
                return Err(Error::invalid("voxels need colors in [0, 1] and finite nonnegative density"));
            }
        }
        Ok(Self { resolution, bbox_min, bbox_max, voxels })
    }

    /// Rasterizes the primitives: each voxel takes the coverage-weighted sum
    /// of primitive densities and the density-weighted mean of their colors.
    pub fn from_scene(spec: &SceneSpec) -> Result<Self> {
        for p in &spec.primitives {
            p.validate()?;
        }
        let mut field =
            Self::new(spec.resolution, spec.bbox_min, spec.bbox_max, vec![[0.0; 4]; spec.resolution.iter().product()])?;
        if spec.primitives.is_empty() {
            return Ok(field);
        }
        let size = field.voxel_size();
        let sub = COVERAGE_SUBSAMPLES;
        let weight = 1.0 / (sub * sub * sub) as f64;
        let [nx, ny, nz] = spec.resolution;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let corner = Vector3::new(
                        spec.bbox_min[0] + i as f64 * size.x,
                        spec.bbox_min[1] + j as f64 * size.y,
                        spec.bbox_min[2] + k as f64 * size.z,
                    );
                    let center = corner + size / 2.0;
                    let (mut sigma, mut rgb) = (0.0, [0.0; 3]);
                    for prim in &spec.primitives {
                        let mut covered = 0usize;
                        for (a, b, c) in
                            (0..sub).flat_map(|a| (0..sub).flat_map(move |b| (0..sub).map(move |c| (a, b, c))))
                        {
                            let offset = Vector3::new(
                                (a as f64 + 0.5) / sub as f64 * size.x,
                                (b as f64 + 0.5) / sub as f64 * size.y,
                                (c as f64 + 0.5) / sub as f64 * size.z,
                            );
                            covered += prim.contains(&(corner + offset)) as usize;
                        }
                        if covered == 0 {
                            continue;
                        }
                        let s = prim.density() * covered as f64 * weight;
                        let col = prim.color_at(&center);
                        for (acc, c) in rgb.iter_mut().zip(col) {
                            *acc += s * c;
                        }
                        sigma += s;
                    }
                    if sigma > 0.0 {
                        let v = &mut field.voxels[(k * ny + j) * nx + i];
                        *v = [rgb[0] / sigma, rgb[1] / sigma, rgb[2] / sigma, sigma];
                    }
                }
            }
        }
        Ok(field)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn voxels(&self) -> &[[f64; 4]] {
        &self.voxels
    }

    pub fn voxel_size(&self) -> Vector3<f64> {
        Vector3::from_fn(|k, _| (self.bbox_max[k] - self.bbox_min[k]) / self.resolution[k] as f64)
    }

    /// Center of voxel `(i, j, k)` in world coordinates.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let size = self.voxel_size();
        Vector3::new(
            self.bbox_min[0] + (i as f64 + 0.5) * size.x,
            self.bbox_min[1] + (j as f64 + 0.5) * size.y,
            self.bbox_min[2] + (k as f64 + 0.5) * size.z,
        )
    }

    fn at(&self, i: usize, j: usize, k: usize) -> &[f64; 4] {
        &self.voxels[(k * self.resolution[1] + j) * self.resolution[0] + i]
    }

    /// Framed file bytes; `meta` entries are merged into the header.
    pub fn to_bytes(&self, meta: serde_json::Map<String, serde_json::Value>) -> Result<Vec<u8>> {
        let header = VoxelHeader {
            format: VOXEL_FORMAT.into(),
            layout: VOXEL_LAYOUT.into(),
            resolution: self.resolution,
            bbox_min: self.bbox_min,
            bbox_max: self.bbox_max,
            meta,
        };
        let payload: Vec<f64> = self.voxels.iter().flatten().copied().collect();
        io::encode_framed(&header, &payload)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload): (VoxelHeader, Vec<f64>) = io::decode_framed(bytes, path)?;
        let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
        if header.format != VOXEL_FORMAT || header.layout != VOXEL_LAYOUT {
            return Err(bad(format!("unsupported voxel format {:?} / {:?}", header.format, header.layout)));
        }
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of voxels".into()));
        }
        let voxels = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        Self::new(header.resolution, header.bbox_min, header.bbox_max, voxels).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, path: &Path, meta: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        io::write_bytes(path, &self.to_bytes(meta)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_bytes(path)?, path)
    }
}

impl RadianceField for VoxelField {
    fn query(&self, x: &Vector3<f64>, _: &Vector3<f64>) -> ([f64; 3], f64) {
        if (0..3).any(|k| x[k] < self.bbox_min[k] || x[k] > self.bbox_max[k]) {
            return ([0.0; 3], 0.0);
        }
        let mut lo = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let n = self.resolution[k];
            let u = (x[k] - self.bbox_min[k]) / (self.bbox_max[k] - self.bbox_min[k]) * n as f64 - 0.5;
            let u = u.clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            lo[k] = i0;
            frac[k] = u - i0 as f64;
        }
        let (mut sigma, mut rgb) = (0.0, [0.0; 3]);
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for k in 0..3 {
                let hi = corner >> k & 1 == 1;
                idx[k] = (lo[k] + hi as usize).min(self.resolution[k] - 1);
                w *= if hi { frac[k] } else { 1.0 - frac[k] };
            }
            if w == 0.0 {
                continue;
            }
            let v = self.at(idx[0], idx[1], idx[2]);
            let s = w * v[3];
            sigma += s;
            for c in 0..3 {
                rgb[c] += s * v[c];
            }
        }
        if sigma > 0.0 {
            for c in rgb.iter_mut() {
                *c = (*c / sigma).clamp(0.0, 1.0);
            }
        }
        (rgb, sigma)
    }
}

/// Direction through pixel `(u, v)` in camera coordinates (not normalized).
fn camera_direction(intr: &Intrinsics, u: usize, v: usize) -> Vector3<f64> {
    let (cx, cy) = intr.principal_point();
    Vector3::new((u as f64 + 0.5 - cx) / intr.focal, -(v as f64 + 0.5 - cy) / intr.focal, -1.0)
}

/// One ray per pixel in row-major order, starting at the camera position.
pub fn generate_rays(pose: &Pose, intr: &Intrinsics) -> Vec<Ray> {
    let (r, origin) = (pose.rotation(), pose.position());
    let mut rays = Vec::with_capacity(intr.width * intr.height);
    for v in 0..intr.height {
        for u in 0..intr.width {
            rays.push(Ray { origin, direction: (r * camera_direction(intr, u, v)).normalize() });
        }
    }
    rays
}

/// Running front-to-back accumulation along one ray.
struct Accumulator {
    rgb: [f64; 3],
    transmittance: f64,
}

impl Accumulator {
    fn new() -> Self {
        Self { rgb: [0.0; 3], transmittance: 1.0 }
    }

    fn done(&self) -> bool {
        self.transmittance < MIN_TRANSMITTANCE
    }

    fn add(&mut self, color: [f64; 3], sigma: f64, delta: f64) {
        let alpha = 1.0 - (-sigma * delta).exp();
        let w = self.transmittance * alpha;
        for (acc, c) in self.rgb.iter_mut().zip(color) {
            *acc += w * c;
        }
        self.transmittance *= 1.0 - alpha;
    }

    fn finish(self, background: [f64; 3]) -> [f64; 3] {
        let mut out = self.rgb;
        for (o, b) in out.iter_mut().zip(background) {
            *o = (*o + self.transmittance * b).clamp(0.0, 1.0);
        }
        out
    }
}

/// Composites samples front to back over `background`.
pub fn composite(colors: &[[f64; 3]], sigmas: &[f64], deltas: &[f64], background: [f64; 3]) -> Result<[f64; 3]> {
    if colors.len() != sigmas.len() || sigmas.len() != deltas.len() {
        return Err(Error::invalid("colors, sigmas and deltas must have equal lengths"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("density must be nonnegative, got {s}")));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::invalid(format!("sample spacing must be positive, got {d}")));
    }
    let mut acc = Accumulator::new();
    for ((c, s), d) in colors.iter().zip(sigmas).zip(deltas) {
        if acc.done() {
            break;
        }
        acc.add(*c, *s, *d);
    }
    Ok(acc.finish(background))
}

/// Transmittance before each sample, `T_1 = 1, T_i = prod_{j<i} (1 - alpha_j)`.
pub fn transmittances(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut t = 1.0;
    sigmas
        .iter()
        .zip(deltas)
        .map(|(s, d)| {
            let before = t;
            t *= (-s * d).exp();
            before
        })
        .collect()
}

/// Sample depths along a ray: bin midpoints, or one uniform draw per bin
/// when `jitter` is given.
fn sample_depths(cfg: &RenderConfig, jitter: Option<&mut SplitMix64>, out: &mut Vec<f64>) {
    out.clear();
    let step = (cfg.far - cfg.near) / cfg.n_samples as f64;
    match jitter {
        None => out.extend((0..cfg.n_samples).map(|i| cfg.near + (i as f64 + 0.5) * step)),
        Some(rng) => out.extend((0..cfg.n_samples).map(|i| cfg.near + (i as f64 + rng.next_f64()) * step)),
    }
}

/// Renders `field` from `pose`. Stratified jitter for pixel `p` is drawn from
/// the stream `derive_seed(seed, p)`, so each ray is independent of the others.
pub fn render(
    field: &dyn RadianceField,
    pose: &Pose,
    intr: &Intrinsics,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<ImageGrid> {
    intr.validate()?;
    cfg.validate()?;
    let rays = generate_rays(pose, intr);
    let mut data = Vec::with_capacity(rays.len() * 3);
    let mut depths = Vec::with_capacity(cfg.n_samples);
    for (p, ray) in rays.iter().enumerate() {
        let mut rng = cfg.stratified.then(|| SplitMix64::new(derive_seed(seed, p as u64)));
        sample_depths(cfg, rng.as_mut(), &mut depths);
        let mut acc = Accumulator::new();
        for (i, &t) in depths.iter().enumerate() {
            if acc.done() {
                break;
            }
            let delta = depths.get(i + 1).copied().unwrap_or(cfg.far) - t;
            let (color, sigma) = field.query(&(ray.origin + ray.direction * t), &ray.direction);
            if !(sigma >= 0.0) {
                return Err(Error::invalid(format!("field returned invalid density {sigma}")));
            }
            if delta > 0.0 {
                acc.add(color, sigma, delta);
            }
        }
        data.extend_from_slice(&acc.finish(cfg.background));
    }
    ImageGrid::new(intr.width, intr.height, data)
}

/// Mean over image pairs of the summed squared channel differences.
pub fn photometric_loss(rendered: &[ImageGrid], real: &[ImageGrid]) -> Result<f64> {
    if rendered.is_empty() || rendered.len() != real.len() {
        return Err(Error::invalid(format!(
            "need equally many rendered and real images, got {} and {}",
            rendered.len(),
            real.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in rendered.iter().zip(real) {
        if (a.width(), a.height()) != (b.width(), b.height()) {
            return Err(Error::invalid("image dimensions differ"));
        }
        total += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / rendered.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use nalgebra::{Rotation3, Unit};

    /// Homogeneous slab `z in [-0.5, 0.5]` of unit density and white emission.
    struct Slab;

    impl RadianceField for Slab {
        fn query(&self, x: &Vector3<f64>, _: &Vector3<f64>) -> ([f64; 3], f64) {
            if x.z.abs() <= 0.5 {
                ([1.0; 3], 1.0)
            } else {
                ([0.0; 3], 0.0)
            }
        }
    }

    fn slab_luminance(n: usize) -> f64 {
        let pose = Pose::from_parts(nalgebra::Matrix3::identity(), Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let intr = Intrinsics { focal: 1.0, width: 1, height: 1 };
        let cfg = RenderConfig { n_samples: n, near: 1.5, far: 2.5, stratified: false, background: [0.0; 3] };
        let img = render(&Slab, &pose, &intr, &cfg, 0).unwrap();
        img.data().iter().sum::<f64>() / 3.0
    }

    #[test]
    fn center_ray_points_down_negative_z() {
        let intr = Intrinsics { focal: 10.0, width: 5, height: 5 };
        let rays = generate_rays(&Pose::identity(), &intr);
        assert_eq!(rays.len(), 25);
        assert_eq!(rays[12].direction, Vector3::new(0.0, 0.0, -1.0));
        assert!(rays.iter().all(|r| r.origin == Vector3::zeros()));
        assert!(rays.iter().all(|r| (r.direction.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rays_rotate_with_the_pose() {
        let intr = Intrinsics { focal: 7.0, width: 6, height: 4 };
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(0.3, -1.0, 0.5)), 1.1).into_inner();
        let pose = Pose::from_parts(rot, Vector3::new(1.0, 2.0, 3.0)).unwrap();
        for (a, b) in generate_rays(&Pose::identity(), &intr).iter().zip(generate_rays(&pose, &intr)) {
            assert!((rot * a.direction - b.direction).amax() < 1e-12);
            assert_eq!(b.origin, Vector3::new(1.0, 2.0, 3.0));
        }
    }

    #[test]
    fn transparent_samples_show_background() {
        let out = composite(&[[0.3; 3]; 4], &[0.0; 4], &[0.1; 4], [0.2, 0.4, 0.6]).unwrap();
        assert_eq!(out, [0.2, 0.4, 0.6]);
    }

    #[test]
    fn opaque_first_sample_wins() {
        let out = composite(&[[0.1, 0.5, 0.9], [1.0; 3]], &[500.0, 1.0], &[0.1, 0.1], [1.0; 3]).unwrap();
        for (o, e) in out.iter().zip([0.1, 0.5, 0.9]) {
            assert!((o - e).abs() < 1e-9);
        }
    }

    #[test]
    fn negative_density_is_rejected() {
        assert!(composite(&[[0.0; 3]], &[-1.0], &[1.0], [0.0; 3]).is_err());
        assert!(composite(&[[0.0; 3]], &[1.0], &[0.0], [0.0; 3]).is_err());
        assert!(composite(&[[0.0; 3]; 2], &[1.0], &[1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn homogeneous_slab_matches_closed_form() {
        let exact = 1.0 - (-1.0f64).exp();
        let errors: Vec<f64> = [32, 64, 128, 256].iter().map(|&n| (slab_luminance(n) - exact).abs()).collect();
        assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
        assert!(errors[3] < 2e-3);
    }

    #[test]
    fn density_and_spacing_trade_off_exactly() {
        let colors = [[0.2, 0.7, 0.1], [0.9, 0.3, 0.5], [0.4, 0.4, 1.0]];
        let (s, d) = ([0.5, 2.0, 7.0], [0.1, 0.3, 0.05]);
        let a = composite(&colors, &s, &d, [1.0; 3]).unwrap();
        let b = composite(&colors, &s.map(|x| 2.0 * x), &d.map(|x| x / 2.0), [1.0; 3]).unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn transmittance_is_monotone_in_unit_interval() {
        let t = transmittances(&[0.0, 1.0, 3.0, 0.5, 10.0], &[0.2; 5]);
        assert_eq!(t[0], 1.0);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
        assert!(t.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn empty_field_renders_background() {
        let intr = Intrinsics { focal: 8.0, width: 6, height: 5 };
        let cfg = RenderConfig { background: [0.25, 0.5, 0.75], stratified: true, ..Default::default() };
        let img = render(&EmptyField, &Pose::identity(), &intr, &cfg, 3).unwrap();
        assert!(img.data().chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
    }

    #[test]
    fn uniform_sampling_is_deterministic() {
        let field = VoxelField::from_scene(&two_sphere_spec()).unwrap();
        let pose = look_at(&Vector3::new(4.0, 0.5, 1.0), &Vector3::zeros(), &Vector3::z()).unwrap();
        let intr = Intrinsics { focal: 20.0, width: 16, height: 16 };
        let cfg = RenderConfig { near: 2.0, far: 6.0, ..Default::default() };
        let a = render(&field, &pose, &intr, &cfg, 1).unwrap();
        let b = render(&field, &pose, &intr, &cfg, 2).unwrap();
        assert_eq!(a, b);
        let jittered = RenderConfig { stratified: true, ..cfg };
        assert_eq!(
            render(&field, &pose, &intr, &jittered, 5).unwrap(),
            render(&field, &pose, &intr, &jittered, 5).unwrap()
        );
    }

    fn two_sphere_spec() -> SceneSpec {
        SceneSpec {
            resolution: [24, 24, 24],
            bbox_min: [-1.5; 3],
            bbox_max: [1.5; 3],
            primitives: vec![
                Primitive::Sphere {
                    center: [0.4, 0.0, 0.0],
                    radius: 0.5,
                    color: [0.9, 0.2, 0.1],
                    density: 20.0,
                    color_gradient: None,
                },
                Primitive::Sphere {
                    center: [-0.5, 0.3, 0.2],
                    radius: 0.4,
                    color: [0.1, 0.3, 0.9],
                    density: 20.0,
                    color_gradient: None,
                },
            ],
        }
    }

    #[test]
    fn single_voxel_projects_to_its_footprint() {
        let h = 0.25;
        let field = VoxelField::new([1, 1, 1], [-h; 3], [h; 3], vec![[0.0, 0.0, 0.0, 1000.0]]).unwrap();
        let pose = look_at(&Vector3::new(4.0, 0.0, 0.0), &Vector3::zeros(), &Vector3::z()).unwrap();
        let intr = Intrinsics { focal: 40.0, width: 33, height: 33 };
        let cfg = RenderConfig { n_samples: 512, near: 2.0, far: 6.0, ..Default::default() };
        let img = render(&field, &pose, &intr, &cfg, 0).unwrap();

        let (mut umin, mut umax, mut vmin, mut vmax) = (usize::MAX, 0, usize::MAX, 0);
        for v in 0..33 {
            for u in 0..33 {
                if img.pixel(u, v) != [1.0; 3] {
                    (umin, umax, vmin, vmax) = (umin.min(u), umax.max(u), vmin.min(v), vmax.max(v));
                }
            }
        }
        // oracle: pinhole projection of the eight cube corners
        let world_to_cam = pose.rotation().transpose();
        let (cx, cy) = intr.principal_point();
        let (mut pu, mut pv) = ((f64::MAX, f64::MIN), (f64::MAX, f64::MIN));
        for c in 0..8 {
            let corner = Vector3::new(
                if c & 1 == 0 { -h } else { h },
                if c & 2 == 0 { -h } else { h },
                if c & 4 == 0 { -h } else { h },
            );
            let p = world_to_cam * (corner - pose.position());
            let (x, y) = (cx + intr.focal * p.x / -p.z, cy - intr.focal * p.y / -p.z);
            pu = (pu.0.min(x), pu.1.max(x));
            pv = (pv.0.min(y), pv.1.max(y));
        }
        let near = |pixel: usize, edge: f64| (pixel as f64 + 0.5 - edge).abs() <= 1.0;
        assert!(near(umin, pu.0) && near(umax, pu.1), "u {umin}..{umax} vs {pu:?}");
        assert!(near(vmin, pv.0) && near(vmax, pv.1), "v {vmin}..{vmax} vs {pv:?}");
        assert_eq!(umin + umax, 32);
        assert_eq!(vmin + vmax, 32);
    }

    #[test]
    fn sphere_density_stays_inside_its_radius() {
        let spec = SceneSpec {
            resolution: [20, 20, 20],
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius: 0.6,
                color: [0.5; 3],
                density: 4.0,
                color_gradient: None,
            }],
        };
        let field = VoxelField::from_scene(&spec).unwrap();
        let margin = 1.5 * field.voxel_size().norm();
        let mut rng = SplitMix64::new(12);
        for _ in 0..5000 {
            let p = Vector3::new(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
            let (_, sigma) = field.query(&p, &Vector3::z());
            if p.norm() > 0.6 + margin {
                assert_eq!(sigma, 0.0, "{p:?}");
            }
            if p.norm() < 0.6 - margin {
                assert!((sigma - 4.0).abs() < 1e-12, "{p:?}");
            }
        }
    }

    #[test]
    fn empty_primitive_list_gives_zero_field() {
        let spec = SceneSpec { resolution: [4, 5, 6], bbox_min: [0.0; 3], bbox_max: [1.0; 3], primitives: vec![] };
        let field = VoxelField::from_scene(&spec).unwrap();
        assert!(field.voxels().iter().all(|v| *v == [0.0; 4]));
    }

    #[test]
    fn voxel_file_round_trip() {
        let field = VoxelField::from_scene(&two_sphere_spec()).unwrap();
        let mut meta = serde_json::Map::new();
        meta.insert("seed".into(), 4.into());
        let bytes = field.to_bytes(meta).unwrap();
        assert_eq!(VoxelField::from_bytes(&bytes, Path::new("s")).unwrap(), field);
    }

    #[test]
    fn photometric_loss_examples() {
        let a = ImageGrid::filled(1, 1, [0.5; 3]).unwrap();
        let b = ImageGrid::filled(1, 1, [1.0; 3]).unwrap();
        assert_eq!(photometric_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        assert_eq!(photometric_loss(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap(), 0.75);
        let wide = ImageGrid::filled(2, 1, [1.0; 3]).unwrap();
        assert!(photometric_loss(std::slice::from_ref(&a), &[wide]).is_err());
        assert!(photometric_loss(&[a], &[]).is_err());
    }

    #[test]
    fn photometric_loss_matches_elementwise_oracle() {
        let mut rng = SplitMix64::new(31);
        let mk = |rng: &mut SplitMix64| {
            ImageGrid::from_fn(5, 4, |_, _| [rng.next_f64(), rng.next_f64(), rng.next_f64()]).unwrap()
        };
        let (r, t): (Vec<_>, Vec<_>) = (0..3).map(|_| (mk(&mut rng), mk(&mut rng))).unzip();
        let mut expect = 0.0;
        for (a, b) in r.iter().zip(&t) {
            for y in 0..4 {
                for x in 0..5 {
                    for c in 0..3 {
                        expect += (a.pixel(x, y)[c] - b.pixel(x, y)[c]).powi(2);
                    }
                }
            }
        }
        assert!((photometric_loss(&r, &t).unwrap() - expect / 3.0).abs() < 1e-10);
    }
}
