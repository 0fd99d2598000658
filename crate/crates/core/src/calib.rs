//! Relative-pose regression from transport plans, its unsupervised training,
//! photometric pose refinement and pose-error reports.
//!
//! The regressor maps the mass-normalized `l x l` plan between two views to
//! `(t_x, t_y, t_z, theta_x, theta_y, theta_z)`. Training minimizes
//! `|| H(rt) A - B ||_F^2` over pose pairs `(A, B)`, where `H(rt)` is the
//! homogeneous relative transform; the plan is held constant within a step.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    calibrate, decode_rot6d, encode_rot6d, euler_rotation_partials, perturb_pose, pose_error, sample_pose, Pose,
    PoseDistribution, PoseError, RelativeTransform, Rot6D,
};
use crate::io;
use crate::matching::{cosine_cost, extract_features, uniform_masses, ImageGrid, DEFAULT_DIM, DEFAULT_GRID};
use crate::ot::{solve_uot, TransportPlan, UotConfig};
use crate::render::{photometric_loss, render, Intrinsics, RadianceField, RenderConfig};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
const OUTPUTS: usize = 6;

/// Two-layer perceptron `y = W2 tanh(W1 x + b1) + b2`.
///
/// Parameters are stored flat in the order `W1` (row-major, `hidden x input`),
/// `b1`, `W2` (row-major, `6 x hidden`), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    input: usize,
    hidden: usize,
    params: Vec<f64>,
}

struct Forward {
    hidden: Vec<f64>,
    output: [f64; OUTPUTS],
}

impl Regressor {
    pub fn param_count(input: usize, hidden: usize) -> usize {
        hidden * input + hidden + OUTPUTS * hidden + OUTPUTS
    }

    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(input: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut reg = Self::zeros(input, hidden)?;
        let mut rng = SplitMix64::new(seed);
        let (b1, b2) = (1.0 / (input as f64).sqrt(), 1.0 / (hidden as f64).sqrt());
        let first = hidden * input + hidden;
        for (i, p) in reg.params.iter_mut().enumerate() {
            let bound = if i < first { b1 } else { b2 };
            *p = rng.uniform(-bound, bound);
        }
        Ok(reg)
    }

    pub fn zeros(input: usize, hidden: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::invalid("regressor widths must be positive"));
        }
        Ok(Self { input, hidden, params: vec![0.0; Self::param_count(input, hidden)] })
    }

    pub fn from_params(input: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let mut reg = Self::zeros(input, hidden)?;
        if params.len() != reg.params.len() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", reg.params.len(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("regressor parameters must be finite"));
        }
        reg.params = params;
        Ok(reg)
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        (b1, w2, w2 + OUTPUTS * self.hidden)
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &p[j * self.input..(j + 1) * self.input];
                let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                (z + p[b1 + j]).tanh()
            })
            .collect();
        let mut output = [0.0; OUTPUTS];
        for (k, out) in output.iter_mut().enumerate() {
            let row = &p[w2 + k * self.hidden..w2 + (k + 1) * self.hidden];
            *out = row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>() + p[b2 + k];
        }
        Forward { hidden, output }
    }

    /// Flattened plan divided by its total mass.
    pub fn plan_input(&self, plan: &TransportPlan) -> Result<Vec<f64>> {
        if plan.nrows() != plan.ncols() || plan.nrows() * plan.ncols() != self.input {
            return Err(Error::invalid(format!(
                "plan is {}x{} but the regressor expects {} inputs",
                plan.nrows(),
                plan.ncols(),
                self.input
            )));
        }
        let total = plan.total_mass();
        Ok(plan.to_row_major().into_iter().map(|v| v / total).collect())
    }

    pub fn predict_relative(&self, plan: &TransportPlan) -> Result<RelativeTransform> {
        let x = self.plan_input(plan)?;
        let rt = RelativeTransform::from_array(self.forward(&x).output);
        if !rt.is_finite() {
            return Err(Error::Numeric("regressor produced a non-finite transform".into()));
        }
        Ok(rt)
    }

    /// Calibration loss for a fixed plan and its gradient with respect to
    /// every parameter, in storage order.
    pub fn loss_and_gradient(&self, plan: &TransportPlan, pose_a: &Pose, pose_b: &Pose) -> Result<(f64, Vec<f64>)> {
        let x = self.plan_input(plan)?;
        let fwd = self.forward(&x);
        let rt = RelativeTransform::from_array(fwd.output);
        let (a, b) = (pose_a.matrix(), pose_b.matrix());
        let residual = rt.to_matrix() * a - b;
        let loss = residual.norm_squared();
        let d_h: Matrix4<f64> = 2.0 * residual * a.transpose();

        let mut d_out = [0.0; OUTPUTS];
        for k in 0..3 {
            d_out[k] = d_h[(k, 3)];
        }
        for (k, partial) in euler_rotation_partials(&rt).iter().enumerate() {
            d_out[3 + k] =
                (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| d_h[(r, c)] * partial[(r, c)]).sum();
        }

        let (b1, w2, b2) = self.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let mut d_hidden = vec![0.0; self.hidden];
        for k in 0..OUTPUTS {
            grad[b2 + k] = d_out[k];
            for j in 0..self.hidden {
                grad[w2 + k * self.hidden + j] = d_out[k] * fwd.hidden[j];
                d_hidden[j] += d_out[k] * self.params[w2 + k * self.hidden + j];
            }
        }
        for j in 0..self.hidden {
            let dz = d_hidden[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
            grad[b1 + j] = dz;
            for (g, v) in grad[j * self.input..(j + 1) * self.input].iter_mut().zip(&x) {
                *g = dz * v;
            }
        }
        Ok((loss, grad))
    }

    /// Checkpoint bytes: JSON header with dims, seed and step, then weights.
    pub fn to_bytes(&self, seed: u64, step: usize) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            input: self.input,
            hidden: self.hidden,
            output: OUTPUTS,
            seed,
            step,
        };
        io::encode_framed(&header, &self.params)
    }

    /// Returns the regressor with the seed and step it was saved with.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Self, u64, usize)> {
        let (h, params): (CheckpointHeader, Vec<f64>) = io::decode_framed(bytes, path)?;
        let bad = |message: String| Error::Format { path: path.to_path_buf(), message };
        if h.format != CHECKPOINT_FORMAT || h.output != OUTPUTS {
            return Err(bad(format!("unsupported checkpoint format {:?}", h.format)));
        }
        let reg = Self::from_params(h.input, h.hidden, params).map_err(|e| bad(e.to_string()))?;
        Ok((reg, h.seed, h.step))
    }

    pub fn save(&self, path: &Path, seed: u64, step: usize) -> Result<()> {
        io::write_bytes(path, &self.to_bytes(seed, step)?)
    }

    pub fn load(path: &Path) -> Result<(Self, u64, usize)> {
        Self::from_bytes(&io::read_bytes(path)?, path)
    }
}

const CHECKPOINT_FORMAT: &str = "viewcal-regressor/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    input: usize,
    hidden: usize,
    output: usize,
    seed: u64,
    step: usize,
}

/// `|| H(rt) A - B ||_F^2` on 4x4 camera-to-world matrices.
pub fn pose_matrix_loss(rt: &RelativeTransform, pose_a: &Pose, pose_b: &Pose) -> f64 {
    (rt.to_matrix() * pose_a.matrix() - pose_b.matrix()).norm_squared()
}

/// Everything needed to turn two camera poses into a transport plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchSettings {
    pub intrinsics: Intrinsics,
    pub render: RenderConfig,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub uot: UotConfig,
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl MatchSettings {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.render.validate()?;
        self.uot.validate()?;
        if self.grid == 0 || self.dim == 0 {
            return Err(Error::invalid("grid and descriptor dimension must be positive"));
        }
        if self.grid > self.intrinsics.width.min(self.intrinsics.height) {
            return Err(Error::invalid("grid is finer than the image"));
        }
        Ok(())
    }

    /// Number of features per view, `grid^2`.
    pub fn features(&self) -> usize {
        self.grid * self.grid
    }
}

/// Matches two images: patch descriptors, cosine costs, uniform masses,
/// entropic transport.
pub fn view_plan(source: &ImageGrid, target: &ImageGrid, settings: &MatchSettings) -> Result<TransportPlan> {
    let fs = extract_features(source, settings.grid, settings.dim)?;
    let ft = extract_features(target, settings.grid, settings.dim)?;
    let cost = cosine_cost(&fs, &ft)?;
    let mass = uniform_masses(fs.count())?;
    Ok(solve_uot(&cost, &mass, &mass, &settings.uot)?.plan)
}

/// Renders both poses, matches the views and scores the calibrated first pose
/// against the second.
pub fn calibration_loss(
    reg: &Regressor,
    field: &dyn RadianceField,
    pose_a: &Pose,
    pose_b: &Pose,
    settings: &MatchSettings,
    seed: u64,
) -> Result<f64> {
    let plan = pair_plan(field, pose_a, pose_b, settings, seed)?;
    Ok(pose_matrix_loss(&reg.predict_relative(&plan)?, pose_a, pose_b))
}

fn pair_plan(
    field: &dyn RadianceField,
    a: &Pose,
    b: &Pose,
    settings: &MatchSettings,
    seed: u64,
) -> Result<TransportPlan> {
    let img_a = render(field, a, &settings.intrinsics, &settings.render, derive_seed(seed, 0))?;
    let img_b = render(field, b, &settings.intrinsics, &settings.render, derive_seed(seed, 1))?;
    view_plan(&img_a, &img_b, settings)
}

/// Predicts a relative transform from the rendering at `initial` and the
/// observed image, then applies it.
pub fn calibrate_view(
    reg: &Regressor,
    field: &dyn RadianceField,
    initial: &Pose,
    observed: &ImageGrid,
    settings: &MatchSettings,
    seed: u64,
) -> Result<Pose> {
    let rendered = render(field, initial, &settings.intrinsics, &settings.render, seed)?;
    let plan = view_plan(&rendered, observed, settings)?;
    calibrate(initial, &reg.predict_relative(&plan)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pairs_per_epoch: usize,
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub seed: u64,
    #[serde(default)]
    pub pose_distribution: PoseDistribution,
    pub max_angle_deg: f64,
    pub max_translation: f64,
}

fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_epoch == 0 || self.epochs == 0 || self.hidden == 0 {
            return Err(Error::invalid("pairs_per_epoch, epochs and hidden must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and nonnegative"));
        }
        if !(self.max_angle_deg >= 0.0 && self.max_angle_deg <= 180.0 && self.max_translation >= 0.0) {
            return Err(Error::invalid("perturbation bounds must be nonnegative (angle at most 180 degrees)"));
        }
        self.pose_distribution.validate()
    }

    pub fn steps(&self) -> usize {
        self.pairs_per_epoch * self.epochs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Training {
    pub regressor: Regressor,
    /// Mean calibration loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Seed of the stream that initializes the regressor weights.
pub fn init_seed(train_seed: u64) -> u64 {
    derive_seed(train_seed, u64::MAX)
}

/// Trains a freshly initialized regressor; see [`train_from`].
pub fn train_regressor(field: &dyn RadianceField, settings: &MatchSettings, cfg: &TrainConfig) -> Result<Training> {
    let l = settings.features();
    let reg = Regressor::new(l * l, cfg.hidden, init_seed(cfg.seed))?;
    train_from(reg, field, settings, cfg)
}

/// One Adam step per sampled pose pair. Pair `s` uses the seed
/// `derive_seed(cfg.seed, s)`: sub-stream 0 draws the first pose, 1 the
/// perturbation and 2 the render jitter.
pub fn train_from(
    mut reg: Regressor,
    field: &dyn RadianceField,
    settings: &MatchSettings,
    cfg: &TrainConfig,
) -> Result<Training> {
    settings.validate()?;
    cfg.validate()?;
    let l = settings.features();
    if reg.input() != l * l {
        return Err(Error::invalid(format!("regressor expects {} inputs but matching yields {}", reg.input(), l * l)));
    }
    let mut adam = Adam::new(cfg.learning_rate, reg.params.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for i in 0..cfg.pairs_per_epoch {
            let step = epoch * cfg.pairs_per_epoch + i;
            let seed = derive_seed(cfg.seed, step as u64);
            let (seed_a, seed_b) = (derive_seed(seed, 0), derive_seed(seed, 1));
            let pose_a = sample_pose(&cfg.pose_distribution, seed_a)?;
            let pose_b = perturb_pose(&pose_a, &mut SplitMix64::new(seed_b), cfg.max_angle_deg, cfg.max_translation)?;
            let plan = pair_plan(field, &pose_a, &pose_b, settings, derive_seed(seed, 2))?;
            let (loss, grad) = reg.loss_and_gradient(&plan, &pose_a, &pose_b)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite calibration loss at step {step} (pose seeds {seed_a}, {seed_b})"
                )));
            }
            adam.step(&mut reg.params, &grad);
            sum += loss;
        }
        epoch_losses.push(sum / cfg.pairs_per_epoch as f64);
    }
    Ok(Training { regressor: reg, epoch_losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Iterations per blur level.
    pub steps: usize,
    /// Largest parameter update (Euclidean norm) taken in one iteration.
    pub step_size: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Gaussian blur widths in pixels, coarse to fine; 0 compares raw images.
    #[serde(default = "default_blur")]
    pub blur: Vec<f64>,
}

fn default_fd_step() -> f64 {
    1e-3
}

fn default_blur() -> Vec<f64> {
    vec![0.0]
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { steps: 40, step_size: 0.1, fd_step: default_fd_step(), blur: default_blur() }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.fd_step > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("refinement step sizes must be positive"));
        }
        if self.blur.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::invalid("blur widths must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Best photometric loss after each iteration, starting with the initial loss.
    pub curve: Vec<f64>,
}

const MAX_HALVINGS: usize = 5;
const MAX_DAMPING: f64 = 1e8;

fn pose_params(pose: &Pose) -> [f64; 9] {
    let Rot6D(r) = encode_rot6d(&pose.rotation());
    let p = pose.position();
    [r[0], r[1], r[2], r[3], r[4], r[5], p.x, p.y, p.z]
}

fn params_pose(v: &[f64; 9]) -> Option<Pose> {
    let r = decode_rot6d(&Rot6D([v[0], v[1], v[2], v[3], v[4], v[5]])).ok()?;
    Pose::from_parts(r, Vector3::new(v[6], v[7], v[8])).ok()
}

/// Separable Gaussian blur of an interleaved RGB image; weights are
/// renormalized at the borders.
fn blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height as isize {
            for x in 0..width as isize {
                let (mut acc, mut norm) = ([0.0; 3], 0.0);
                for (d, w) in (-radius..=radius).zip(&kernel) {
                    let (sx, sy) = if along_x { (x + d, y) } else { (x, y + d) };
                    if sx < 0 || sy < 0 || sx >= width as isize || sy >= height as isize {
                        continue;
                    }
                    let i = (sy as usize * width + sx as usize) * 3;
                    for c in 0..3 {
                        acc[c] += w * src[i + c];
                    }
                    norm += w;
                }
                let o = (y as usize * width + x as usize) * 3;
                for c in 0..3 {
                    out[o + c] = acc[c] / norm;
                }
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Descends the photometric loss of one view over `(Rot6D, position)`.
///
/// For each blur level, coarse to fine, both images are blurred and each
/// iteration differentiates the blurred rendering by central finite
/// differences in all 9 parameters, then takes the damped Gauss-Newton step
/// `-(J^T J + mu D)^-1 J^T r`, at most `step_size` long. A step that does
/// not lower the level's loss is halved, at most five times; if all fail,
/// the damping grows, which turns the step towards the negative gradient.
/// The pose with the lowest unblurred loss seen is returned, so the final
/// loss never exceeds the initial one.
pub fn refine_pose(
    field: &dyn RadianceField,
    pose: &Pose,
    target: &ImageGrid,
    intr: &Intrinsics,
    render_cfg: &RenderConfig,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<Refinement> {
    cfg.validate()?;
    if (target.width(), target.height()) != (intr.width, intr.height) {
        return Err(Error::invalid("target image does not match the intrinsics"));
    }
    let (w, h) = (intr.width, intr.height);
    let draw = |p: &Pose| render(field, p, intr, render_cfg, seed);
    let true_loss = |img: &ImageGrid| photometric_loss(std::slice::from_ref(img), std::slice::from_ref(target));

    let initial_loss = true_loss(&draw(pose)?)?;
    let (mut best_pose, mut best_loss) = (*pose, initial_loss);
    let mut curve = vec![initial_loss];
    let mut current = pose_params(pose);
    let mut current_pose = *pose;
    for &sigma in &cfg.blur {
        let goal = DVector::from_vec(blur(target.data(), w, h, sigma));
        let residual = |img: &ImageGrid| DVector::from_vec(blur(img.data(), w, h, sigma)) - &goal;
        let mut level_loss = residual(&draw(&current_pose)?).norm_squared();
        let mut damping = 1e-3;
        let mut normal: Option<(DMatrix<f64>, DVector<f64>)> = None;
        for _ in 0..cfg.steps {
            if level_loss == 0.0 {
                break;
            }
            let (jtj, jtr) = match normal.take() {
                Some(n) => n,
                None => {
                    let r0 = residual(&draw(&current_pose)?);
                    let mut jac = DMatrix::zeros(r0.len(), 9);
                    for k in 0..9 {
                        let (mut hi, mut lo) = (current, current);
                        hi[k] += cfg.fd_step;
                        lo[k] -= cfg.fd_step;
                        let (Some(ph), Some(pl)) = (params_pose(&hi), params_pose(&lo)) else { continue };
                        let diff = residual(&draw(&ph)?) - residual(&draw(&pl)?);
                        jac.set_column(k, &(diff / (2.0 * cfg.fd_step)));
                    }
                    (jac.tr_mul(&jac), jac.tr_mul(&r0))
                }
            };
            let diag_max = jtj.diagonal().max();
            if !(diag_max > 0.0 && diag_max.is_finite()) {
                break;
            }
            let mut system = jtj.clone();
            for k in 0..9 {
                system[(k, k)] += damping * (jtj[(k, k)] + 1e-6 * diag_max);
            }
            let Some(chol) = system.cholesky() else { break };
            let mut delta = -chol.solve(&jtr);
            let norm = delta.norm();
            if norm > cfg.step_size {
                delta *= cfg.step_size / norm;
            }

            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let trial: [f64; 9] = std::array::from_fn(|k| current[k] + delta[k]);
                if let Some(p) = params_pose(&trial) {
                    let img = draw(&p)?;
                    let loss = residual(&img).norm_squared();
                    if loss < level_loss {
                        let full = true_loss(&img)?;
                        if full < best_loss {
                            (best_pose, best_loss) = (p, full);
                        }
                        (current, current_pose, level_loss) = (trial, p, loss);
                        accepted = true;
                        break;
                    }
                }
                delta /= 2.0;
            }
            curve.push(best_loss);
            if accepted {
                damping = (damping / 3.0).max(1e-7);
            } else {
                damping *= 10.0;
                if damping > MAX_DAMPING {
                    break;
                }
                normal = Some((jtj, jtr));
            }
        }
    }
    Ok(Refinement { pose: best_pose, initial_loss, final_loss: best_loss, curve })
}

/// Per-pose errors and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub errors: Vec<PoseError>,
    pub mean_rot_deg: f64,
    pub mean_trans: f64,
}

pub fn evaluate(estimates: &[Pose], truths: &[Pose]) -> Result<ErrorSummary> {
    if estimates.len() != truths.len() {
        return Err(Error::invalid(format!("{} estimates for {} ground-truth poses", estimates.len(), truths.len())));
    }
    let errors: Vec<PoseError> = estimates.iter().zip(truths).map(|(e, t)| pose_error(e, t)).collect();
    let n = errors.len().max(1) as f64;
    Ok(ErrorSummary {
        mean_rot_deg: errors.iter().map(|e| e.rot_deg).sum::<f64>() / n,
        mean_trans: errors.iter().map(|e| e.trans).sum::<f64>() / n,
        errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewErrors {
    pub id: String,
    pub rot_init_deg: f64,
    pub trans_init: f64,
    pub rot_final_deg: f64,
    pub trans_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub views: Vec<ViewErrors>,
    pub mean_rot_init_deg: f64,
    pub mean_trans_init: f64,
    pub mean_rot_final_deg: f64,
    pub mean_trans_final: f64,
    /// Mean calibration loss per training epoch; empty when the regressor was loaded.
    pub training_loss: Vec<f64>,
    /// Photometric loss per refinement iteration, one curve per view.
    pub refinement_curves: Vec<Vec<f64>>,
}

impl CalibrationReport {
    pub fn new(
        ids: &[String],
        initial: &ErrorSummary,
        last: &ErrorSummary,
        training_loss: Vec<f64>,
        refinement_curves: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if ids.len() != initial.errors.len() || ids.len() != last.errors.len() {
            return Err(Error::invalid("ids and error lists differ in length"));
        }
        let views = ids
            .iter()
            .zip(initial.errors.iter().zip(&last.errors))
            .map(|(id, (a, b))| ViewErrors {
                id: id.clone(),
                rot_init_deg: a.rot_deg,
                trans_init: a.trans,
                rot_final_deg: b.rot_deg,
                trans_final: b.trans,
            })
            .collect();
        Ok(Self {
            views,
            mean_rot_init_deg: initial.mean_rot_deg,
            mean_trans_init: initial.mean_trans,
            mean_rot_final_deg: last.mean_rot_deg,
            mean_trans_final: last.mean_trans,
            training_loss,
            refinement_curves,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,rot_init_deg,trans_init,rot_final_deg,trans_final\n");
        for v in &self.views {
            out += &format!("{},{},{},{},{}\n", v.id, v.rot_init_deg, v.trans_init, v.rot_final_deg, v.trans_final);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use crate::render::{Primitive, SceneSpec, VoxelField};
    use nalgebra::DMatrix;

    fn random_plan(rng: &mut SplitMix64, l: usize) -> TransportPlan {
        TransportPlan::new(DMatrix::from_fn(l, l, |_, _| rng.uniform(0.01, 1.0))).unwrap()
    }

    fn random_pose(rng: &mut SplitMix64) -> Pose {
        let dist = PoseDistribution::default();
        sample_pose(&dist, rng.next_u64()).unwrap()
    }

    fn scene() -> VoxelField {
        VoxelField::from_scene(&SceneSpec {
            resolution: [32, 32, 32],
            bbox_min: [-1.5; 3],
            bbox_max: [1.5; 3],
            primitives: vec![
                Primitive::Sphere {
                    center: [0.45, 0.0, 0.0],
                    radius: 0.6,
                    color: [0.8, 0.3, 0.2],
                    density: 30.0,
                    color_gradient: Some([[0.2, 0.0, 0.0], [0.0, 0.3, 0.0], [0.0, 0.0, 0.2]]),
                },
                Primitive::Sphere {
                    center: [-0.55, 0.35, 0.2],
                    radius: 0.45,
                    color: [0.2, 0.4, 0.8],
                    density: 30.0,
                    color_gradient: None,
                },
            ],
        })
        .unwrap()
    }

    fn settings() -> MatchSettings {
        MatchSettings {
            intrinsics: Intrinsics { focal: 32.0, width: 24, height: 24 },
            render: RenderConfig { n_samples: 48, near: 2.0, far: 6.0, ..Default::default() },
            grid: 4,
            dim: 64,
            uot: UotConfig::default(),
        }
    }

    #[test]
    fn zero_weights_predict_identity() {
        let reg = Regressor::zeros(9, 5).unwrap();
        let plan = random_plan(&mut SplitMix64::new(1), 3);
        assert_eq!(reg.predict_relative(&plan).unwrap(), RelativeTransform::default());
    }

    #[test]
    fn forward_matches_layer_by_layer_oracle() {
        let mut rng = SplitMix64::new(2);
        let reg = Regressor::new(4, 3, 9).unwrap();
        let plan = random_plan(&mut rng, 2);
        let total: f64 = plan.to_row_major().iter().sum();
        let x: Vec<f64> = plan.to_row_major().iter().map(|v| v / total).collect();
        let p = reg.params();
        let w1 = DMatrix::from_row_slice(3, 4, &p[..12]);
        let b1 = nalgebra::DVector::from_row_slice(&p[12..15]);
        let w2 = DMatrix::from_row_slice(6, 3, &p[15..33]);
        let b2 = nalgebra::DVector::from_row_slice(&p[33..39]);
        let h = (w1 * nalgebra::DVector::from_vec(x) + b1).map(f64::tanh);
        let y = w2 * h + b2;
        let got = reg.predict_relative(&plan).unwrap().to_array();
        for k in 0..6 {
            assert!((got[k] - y[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_ignores_plan_scale() {
        let mut rng = SplitMix64::new(3);
        let reg = Regressor::new(16, 8, 4).unwrap();
        let plan = random_plan(&mut rng, 4);
        let tripled = TransportPlan::new(plan.matrix() * 3.0).unwrap();
        let (a, b) = (reg.predict_relative(&plan).unwrap(), reg.predict_relative(&tripled).unwrap());
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn plan_size_must_match() {
        let reg = Regressor::zeros(16, 4).unwrap();
        let plan = random_plan(&mut SplitMix64::new(5), 3);
        assert!(matches!(reg.predict_relative(&plan), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let reg = Regressor::new(100, 16, 7).unwrap();
        let (b1, _, _) = reg.offsets();
        assert!(reg.params()[..b1 + 16].iter().all(|w| w.abs() <= 0.1));
        assert!(reg.params()[b1 + 16..].iter().all(|w| w.abs() <= 0.25));
        assert_eq!(reg, Regressor::new(100, 16, 7).unwrap());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..5 {
            let reg = Regressor::new(9, 6, rng.next_u64()).unwrap();
            let plan = random_plan(&mut rng, 3);
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let (_, grad) = reg.loss_and_gradient(&plan, &a, &b).unwrap();
            let h = 1e-5;
            for k in 0..reg.params().len() {
                let mut shifted = reg.params().to_vec();
                shifted[k] += h;
                let up = Regressor::from_params(9, 6, shifted.clone()).unwrap();
                shifted[k] -= 2.0 * h;
                let down = Regressor::from_params(9, 6, shifted).unwrap();
                let f = |r: &Regressor| pose_matrix_loss(&r.predict_relative(&plan).unwrap(), &a, &b);
                let numeric = (f(&up) - f(&down)) / (2.0 * h);
                let rel = (numeric - grad[k]).abs() / numeric.abs().max(grad[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "param {k}: {numeric} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn loss_vanishes_for_identical_poses_and_zero_output() {
        let field = scene();
        let pose = look_at(&Vector3::new(4.0, 0.0, 0.5), &Vector3::zeros(), &Vector3::z()).unwrap();
        let reg = Regressor::zeros(256, 4).unwrap();
        assert_eq!(calibration_loss(&reg, &field, &pose, &pose, &settings(), 0).unwrap(), 0.0);
    }

    #[test]
    fn calibration_loss_matches_staged_recomputation() {
        let field = scene();
        let s = settings();
        let a = look_at(&Vector3::new(4.0, 0.3, 0.5), &Vector3::zeros(), &Vector3::z()).unwrap();
        let b = look_at(&Vector3::new(3.8, 0.9, 0.7), &Vector3::zeros(), &Vector3::z()).unwrap();
        let reg = Regressor::new(256, 8, 3).unwrap();
        let loss = calibration_loss(&reg, &field, &a, &b, &s, 6).unwrap();

        let ia = render(&field, &a, &s.intrinsics, &s.render, derive_seed(6, 0)).unwrap();
        let ib = render(&field, &b, &s.intrinsics, &s.render, derive_seed(6, 1)).unwrap();
        let fa = extract_features(&ia, 4, 64).unwrap();
        let fb = extract_features(&ib, 4, 64).unwrap();
        let mass = uniform_masses(16).unwrap();
        let plan = solve_uot(&cosine_cost(&fa, &fb).unwrap(), &mass, &mass, &s.uot).unwrap().plan;
        let rt = reg.predict_relative(&plan).unwrap();
        let calibrated = calibrate(&a, &rt).unwrap();
        let expect = (calibrated.matrix() - b.matrix()).norm_squared();
        assert!(loss >= 0.0);
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let field = scene();
        let cfg = TrainConfig {
            pairs_per_epoch: 2,
            epochs: 2,
            learning_rate: 0.0,
            hidden: 8,
            seed: 5,
            pose_distribution: PoseDistribution::default(),
            max_angle_deg: 10.0,
            max_translation: 0.25,
        };
        let out = train_regressor(&field, &settings(), &cfg).unwrap();
        assert_eq!(out.regressor, Regressor::new(256, 8, init_seed(5)).unwrap());
        assert_eq!(out.epoch_losses.len(), 2);
    }

    #[test]
    fn training_is_reproducible() {
        let field = scene();
        let cfg = TrainConfig {
            pairs_per_epoch: 3,
            epochs: 2,
            learning_rate: 1e-2,
            hidden: 8,
            seed: 8,
            pose_distribution: PoseDistribution::default(),
            max_angle_deg: 10.0,
            max_translation: 0.25,
        };
        let a = train_regressor(&field, &settings(), &cfg).unwrap();
        let b = train_regressor(&field, &settings(), &cfg).unwrap();
        assert_eq!(
            a.epoch_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.epoch_losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.regressor, b.regressor);
        assert_ne!(a.regressor, Regressor::new(256, 8, init_seed(8)).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let reg = Regressor::new(16, 4, 2).unwrap();
        let bytes = reg.to_bytes(99, 500).unwrap();
        assert_eq!(Regressor::from_bytes(&bytes, Path::new("c")).unwrap(), (reg, 99, 500));
    }

    #[test]
    fn refinement_at_truth_keeps_the_pose() {
        let field = scene();
        let s = settings();
        let truth = look_at(&Vector3::new(4.0, 0.5, 0.8), &Vector3::zeros(), &Vector3::z()).unwrap();
        let target = render(&field, &truth, &s.intrinsics, &s.render, 0).unwrap();
        let out = refine_pose(&field, &truth, &target, &s.intrinsics, &s.render, &RefineConfig::default(), 0).unwrap();
        assert_eq!(out.pose, truth);
        assert!((out.final_loss - out.initial_loss).abs() < 1e-12);
        let none = RefineConfig { steps: 0, ..Default::default() };
        assert_eq!(refine_pose(&field, &truth, &target, &s.intrinsics, &s.render, &none, 0).unwrap().pose, truth);
    }

    #[test]
    fn refinement_reduces_rotation_error() {
        let field = scene();
        let s = settings();
        let truth = look_at(&Vector3::new(4.0, 0.5, 0.8), &Vector3::zeros(), &Vector3::z()).unwrap();
        let target = render(&field, &truth, &s.intrinsics, &s.render, 0).unwrap();
        let axis = nalgebra::Unit::new_normalize(Vector3::new(0.3, 1.0, -0.4));
        let tilt = nalgebra::Rotation3::from_axis_angle(&axis, 5f64.to_radians()).into_inner();
        let start = Pose::from_parts(tilt * truth.rotation(), truth.position()).unwrap();
        let cfg = RefineConfig { steps: 10, blur: vec![4.0, 2.0, 1.0, 0.0], ..Default::default() };
        let out = refine_pose(&field, &start, &target, &s.intrinsics, &s.render, &cfg, 0).unwrap();
        let (before, after) = (pose_error(&start, &truth), pose_error(&out.pose, &truth));
        assert!(out.final_loss <= out.initial_loss);
        assert!(out.curve.windows(2).all(|w| w[1] <= w[0]));
        assert!(after.rot_deg < before.rot_deg, "{before:?} -> {after:?}");
    }

    #[test]
    fn evaluate_examples() {
        let mut rng = SplitMix64::new(4);
        let poses: Vec<Pose> = (0..4).map(|_| random_pose(&mut rng)).collect();
        let same = evaluate(&poses, &poses).unwrap();
        assert!(same.mean_rot_deg < 1e-6 && same.mean_trans == 0.0);

        let turned = Pose::from_parts(
            nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner()
                * poses[0].rotation(),
            poses[0].position(),
        )
        .unwrap();
        let mut est = poses.clone();
        est[0] = turned;
        assert!((evaluate(&est, &poses).unwrap().mean_rot_deg - 22.5).abs() < 1e-5);
        assert!(evaluate(&est[..3], &poses).is_err());
    }

    #[test]
    fn evaluate_means_match_direct_average() {
        let mut rng = SplitMix64::new(21);
        let est: Vec<Pose> = (0..9).map(|_| random_pose(&mut rng)).collect();
        let truth: Vec<Pose> = (0..9).map(|_| random_pose(&mut rng)).collect();
        let summary = evaluate(&est, &truth).unwrap();
        let (mut rot, mut trans) = (0.0, 0.0);
        for (e, t) in est.iter().zip(&truth) {
            let c = ((e.rotation().transpose() * t.rotation()).trace() - 1.0) / 2.0;
            rot += c.clamp(-1.0, 1.0).acos().to_degrees();
            trans += (e.position() - t.position()).norm();
        }
        assert!((summary.mean_rot_deg - rot / 9.0).abs() < 1e-12);
        assert!((summary.mean_trans - trans / 9.0).abs() < 1e-12);
    }

    #[test]
    fn report_csv_has_fixed_header() {
        let s =
            ErrorSummary { errors: vec![PoseError { rot_deg: 1.5, trans: 0.25 }], mean_rot_deg: 1.5, mean_trans: 0.25 };
        let report = CalibrationReport::new(&["v0".into()], &s, &s, vec![], vec![]).unwrap();
        assert_eq!(report.to_csv(), "id,rot_init_deg,trans_init,rot_final_deg,trans_final\nv0,1.5,0.25,1.5,0.25\n");
    }
}
