//! Config-driven experiment harness behind the `viewcal` binary.
//!
//! One JSON [`ExperimentConfig`] fully determines a run. Every command is a
//! pure function of the config, the master seed and its input files, and
//! every JSON file it writes carries the config hash and seed.
//!
//! Verbs: `gen-scene`, `render-views`, `match`, `calibrate`, `evaluate`,
//! `pipeline`. Exit codes: 0 success, 2 config or input error, 3 I/O or
//! file-format error, 4 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::calib::{
    calibrate_view, evaluate, refine_pose, train_regressor, CalibrationReport, MatchSettings, RefineConfig, Regressor,
    TrainConfig, DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE,
};
use crate::geometry::{perturb_pose, sample_pose, Pose, PoseDistribution};
use crate::io;
use crate::matching::{extract_features, top_matches, ImageGrid, LinkRecord, DEFAULT_DIM, DEFAULT_GRID};
use crate::ot::UotConfig;
use crate::render::{photometric_loss, render, Intrinsics, RenderConfig, SceneSpec, VoxelField};
use crate::rng::{derive_seed, SplitMix64};
use crate::{Error, Result};

const STREAM_VIEWS: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_RENDER: u64 = 4;

pub const SCENE_FILE: &str = "scene.vox";
pub const VIEWS_FILE: &str = "views.json";
pub const INITIAL_FILE: &str = "initial_poses.json";
pub const ESTIMATES_FILE: &str = "estimated_poses.json";
pub const CHECKPOINT_FILE: &str = "regressor.ckpt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PLAN_FILE: &str = "plan.bin";
pub const MATCHES_FILE: &str = "matches.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    #[serde(default)]
    pub pose_distribution: PoseDistribution,
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub uot: UotConfig,
    #[serde(default)]
    pub matching: MatchingConfig,
    pub training: TrainingConfig,
    pub calibration: CalibrationConfig,
    /// Not part of the config hash.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    pub grid: usize,
    pub dim: usize,
    pub top_k: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self { grid: DEFAULT_GRID, dim: DEFAULT_DIM, top_k: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub pairs_per_epoch: usize,
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub max_angle_deg: f64,
    pub max_translation: f64,
}

fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Number of ground-truth views rendered by `pipeline`.
    pub views: usize,
    /// Initial poses are the ground truth rotated about the camera center by
    /// at most this angle and shifted by at most `max_translation`.
    pub max_angle_deg: f64,
    pub max_translation: f64,
    #[serde(default = "yes")]
    pub refine: bool,
    #[serde(default)]
    pub refinement: RefineConfig,
    /// Load the regressor from this checkpoint instead of training it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// Reads and validates a config; any problem is a config error naming the
    /// offending field and position.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_bytes(path)?;
        let cfg: Self = io::parse_json(&bytes).map_err(|msg| Error::Config(format!("{}: {msg}", path.display())))?;
        cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        VoxelField::from_scene(&SceneSpec { primitives: vec![], ..self.scene.clone() })?;
        self.pose_distribution.validate()?;
        self.match_settings().validate()?;
        self.train_config().validate()?;
        self.calibration.refinement.validate()?;
        let c = &self.calibration;
        if !(c.max_angle_deg >= 0.0 && c.max_angle_deg <= 180.0 && c.max_translation >= 0.0) {
            return Err(Error::invalid("calibration perturbation bounds must be nonnegative"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization (output directory excluded).
    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn match_settings(&self) -> MatchSettings {
        MatchSettings {
            intrinsics: self.intrinsics,
            render: self.render,
            grid: self.matching.grid,
            dim: self.matching.dim,
            uot: self.uot,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            pairs_per_epoch: t.pairs_per_epoch,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            hidden: t.hidden,
            seed: derive_seed(self.seed, STREAM_TRAIN),
            pose_distribution: self.pose_distribution.clone(),
            max_angle_deg: t.max_angle_deg,
            max_translation: t.max_translation,
        }
    }

    fn stream(&self, stream: u64, index: usize) -> u64 {
        derive_seed(derive_seed(self.seed, stream), index as u64)
    }
}

/// An output body tagged with the config hash and master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub id: String,
    pub pose: Pose,
    /// Image path relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseList {
    pub poses: Vec<PoseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub row_sums: Vec<f64>,
    pub col_sums: Vec<f64>,
    pub links: Vec<LinkRecord>,
}

#[derive(Serialize, Deserialize)]
struct PlanHeader {
    format: String,
    rows: usize,
    cols: usize,
    config_hash: String,
    seed: u64,
}

/// A loaded config together with its hash and output directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Experiment {
    /// `seed` overrides the config's master seed; `out` its output directory.
    pub fn new(mut config: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(o) = out {
            config.output_dir = o;
        }
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        let hash = config.hash();
        let out = config.output_dir.clone();
        Ok(Self { config, hash, out })
    }

    pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        Self::new(ExperimentConfig::load(path)?, seed, out)
    }

    fn stamp<T>(&self, body: T) -> Stamped<T> {
        Stamped { config_hash: self.hash.clone(), seed: self.config.seed, body }
    }

    fn write_json<T: Serialize>(&self, name: &str, body: T) -> Result<PathBuf> {
        let path = self.out.join(name);
        io::write_json(&path, &self.stamp(body))?;
        Ok(path)
    }

    fn meta(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        m.insert("config_hash".into(), self.hash.clone().into());
        m.insert("seed".into(), self.config.seed.into());
        m
    }

    /// Writes the voxelized scene to `<out>/scene.vox`.
    pub fn gen_scene(&self) -> Result<(VoxelField, PathBuf)> {
        let field = VoxelField::from_scene(&self.config.scene)?;
        let path = self.out.join(SCENE_FILE);
        field.write(&path, self.meta())?;
        Ok((field, path))
    }

    /// Loads a scene file and checks its grid against the config.
    pub fn load_scene(&self, path: &Path) -> Result<VoxelField> {
        let field = VoxelField::read(path)?;
        let probe = VoxelField::from_scene(&SceneSpec { primitives: vec![], ..self.config.scene.clone() })?;
        if field.resolution() != probe.resolution() || field.voxel_size() != probe.voxel_size() {
            return Err(Error::Config(format!("scene {} does not match the configured voxel grid", path.display())));
        }
        Ok(field)
    }

    /// `n` ground-truth poses drawn from the configured distribution.
    pub fn sample_views(&self, n: usize) -> Result<Vec<PoseEntry>> {
        (0..n)
            .map(|i| {
                Ok(PoseEntry {
                    id: format!("view_{i:03}"),
                    pose: sample_pose(&self.config.pose_distribution, self.config.stream(STREAM_VIEWS, i))?,
                    image: None,
                })
            })
            .collect()
    }

    /// Renders every pose to `<out>/views/<id>.ppm` and writes the manifest
    /// `<out>/views.json`.
    pub fn render_views(&self, field: &VoxelField, poses: &[PoseEntry]) -> Result<PathBuf> {
        let mut entries = Vec::with_capacity(poses.len());
        for (i, entry) in poses.iter().enumerate() {
            let img = render(
                field,
                &entry.pose,
                &self.config.intrinsics,
                &self.config.render,
                self.config.stream(STREAM_RENDER, i),
            )?;
            let rel = format!("views/{}.ppm", entry.id);
            img.write_ppm(&self.out.join(&rel))?;
            entries.push(PoseEntry { image: Some(rel), ..entry.clone() });
        }
        self.write_json(VIEWS_FILE, PoseList { poses: entries })
    }

    /// Matches two images and writes the plan and the strongest links.
    pub fn match_images(&self, source: &Path, target: &Path) -> Result<MatchSummary> {
        let (a, b) = (ImageGrid::read_ppm(source)?, ImageGrid::read_ppm(target)?);
        let m = &self.config.matching;
        let fs = extract_features(&a, m.grid, m.dim)?;
        let ft = extract_features(&b, m.grid, m.dim)?;
        let cost = crate::matching::cosine_cost(&fs, &ft)?;
        let mass = crate::matching::uniform_masses(fs.count())?;
        let sol = crate::ot::solve_uot(&cost, &mass, &mass, &self.config.uot)?;
        let links = top_matches(&sol.plan, &fs, &ft, m.top_k)?;
        let header = PlanHeader {
            format: "viewcal-plan/1".into(),
            rows: sol.plan.nrows(),
            cols: sol.plan.ncols(),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
        };
        io::write_bytes(&self.out.join(PLAN_FILE), &io::encode_framed(&header, &sol.plan.to_row_major())?)?;
        let summary = MatchSummary {
            rows: sol.plan.nrows(),
            cols: sol.plan.ncols(),
            iterations: sol.iterations,
            converged: sol.converged,
            objective: sol.objective,
            row_sums: sol.plan.row_sums(),
            col_sums: sol.plan.col_sums(),
            links: links.iter().map(LinkRecord::from).collect(),
        };
        self.write_json(MATCHES_FILE, summary.clone())?;
        Ok(summary)
    }

    /// Trains the regressor, or loads it when a checkpoint is given.
    fn regressor(&self, field: &VoxelField, checkpoint: Option<&Path>) -> Result<(Regressor, Vec<f64>)> {
        let l = self.config.matching.grid * self.config.matching.grid;
        if let Some(path) = checkpoint {
            let (reg, _, _) = Regressor::load(path)?;
            if reg.input() != l * l {
                return Err(Error::Config(format!(
                    "checkpoint {} expects {} inputs but the config yields {}",
                    path.display(),
                    reg.input(),
                    l * l
                )));
            }
            return Ok((reg, vec![]));
        }
        let train = self.train_config();
        let out = train_regressor(field, &self.config.match_settings(), &train)?;
        out.regressor.save(&self.out.join(CHECKPOINT_FILE), train.seed, train.steps())?;
        Ok((out.regressor, out.epoch_losses))
    }

    fn train_config(&self) -> TrainConfig {
        self.config.train_config()
    }

    /// Calibrates the views listed in a manifest.
    ///
    /// Per view: the initial pose is a bounded perturbation of the recorded
    /// pose; the regressor's correction is kept only if it does not raise the
    /// photometric loss; the result is then optionally refined.
    pub fn calibrate(
        &self,
        field: &VoxelField,
        manifest: &Path,
        checkpoint: Option<&Path>,
        refine: bool,
    ) -> Result<CalibrationReport> {
        let list: Stamped<PoseList> = io::read_json(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new(""));
        let views = list.body.poses;
        let mut targets = Vec::with_capacity(views.len());
        for v in &views {
            let rel = v.image.as_ref().ok_or_else(|| Error::Format {
                path: manifest.to_path_buf(),
                message: format!("view {} has no image", v.id),
            })?;
            let img = ImageGrid::read_ppm(&base.join(rel))?;
            if (img.width(), img.height()) != (self.config.intrinsics.width, self.config.intrinsics.height) {
                return Err(Error::Config(format!("image of view {} does not match the configured intrinsics", v.id)));
            }
            targets.push(img);
        }

        let c = &self.config.calibration;
        let initial: Vec<PoseEntry> = views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut rng = SplitMix64::new(self.config.stream(STREAM_INIT, i));
                Ok(PoseEntry {
                    id: v.id.clone(),
                    pose: perturb_pose(&v.pose, &mut rng, c.max_angle_deg, c.max_translation)?,
                    image: None,
                })
            })
            .collect::<Result<_>>()?;

        let (reg, training_loss) = self.regressor(field, checkpoint)?;
        let settings = self.config.match_settings();
        let (intr, rcfg) = (&self.config.intrinsics, &self.config.render);
        let mut estimates = Vec::with_capacity(views.len());
        let mut curves = Vec::new();
        for (i, (start, target)) in initial.iter().zip(&targets).enumerate() {
            let seed = self.config.stream(STREAM_RENDER, views.len() + i);
            let loss_of = |p: &Pose| -> Result<f64> {
                photometric_loss(&[render(field, p, intr, rcfg, seed)?], std::slice::from_ref(target))
            };
            let predicted = calibrate_view(&reg, field, &start.pose, target, &settings, seed)?;
            let mut pose = if loss_of(&predicted)? <= loss_of(&start.pose)? { predicted } else { start.pose };
            if refine {
                let r = refine_pose(field, &pose, target, intr, rcfg, &c.refinement, seed)?;
                pose = r.pose;
                curves.push(r.curve);
            }
            estimates.push(PoseEntry { id: start.id.clone(), pose, image: None });
        }

        self.write_json(INITIAL_FILE, PoseList { poses: initial.clone() })?;
        self.write_json(ESTIMATES_FILE, PoseList { poses: estimates.clone() })?;
        let truths: Vec<Pose> = views.iter().map(|v| v.pose).collect();
        let first = evaluate(&initial.iter().map(|e| e.pose).collect::<Vec<_>>(), &truths)?;
        let last = evaluate(&estimates.iter().map(|e| e.pose).collect::<Vec<_>>(), &truths)?;
        let ids: Vec<String> = views.iter().map(|v| v.id.clone()).collect();
        let report = CalibrationReport::new(&ids, &first, &last, training_loss, curves)?;
        self.write_report(&report)?;
        Ok(report)
    }

    fn write_report(&self, report: &CalibrationReport) -> Result<()> {
        self.write_json(REPORT_JSON, report.clone())?;
        io::write_bytes(&self.out.join(REPORT_CSV), report.to_csv().as_bytes())
    }

    /// Scores pose files against ground truth. Without `initial`, the
    /// initial columns repeat the estimates.
    pub fn evaluate_files(&self, estimates: &Path, truths: &Path, initial: Option<&Path>) -> Result<CalibrationReport> {
        let load = |p: &Path| -> Result<Vec<PoseEntry>> { Ok(io::read_json::<Stamped<PoseList>>(p)?.body.poses) };
        let (est, truth) = (load(estimates)?, load(truths)?);
        let init = match initial {
            Some(p) => load(p)?,
            None => est.clone(),
        };
        for (name, list) in [("estimates", &est), ("initial poses", &init)] {
            if list.len() != truth.len() {
                return Err(Error::invalid(format!("{} {name} for {} ground-truth poses", list.len(), truth.len())));
            }
            if let Some((a, b)) = list.iter().zip(&truth).find(|(a, b)| a.id != b.id) {
                return Err(Error::invalid(format!("{name} list has id {} where ground truth has {}", a.id, b.id)));
            }
        }
        let poses = |l: &[PoseEntry]| l.iter().map(|e| e.pose).collect::<Vec<_>>();
        let truths = poses(&truth);
        let ids: Vec<String> = truth.iter().map(|e| e.id.clone()).collect();
        let report = CalibrationReport::new(
            &ids,
            &evaluate(&poses(&init), &truths)?,
            &evaluate(&poses(&est), &truths)?,
            vec![],
            vec![],
        )?;
        self.write_report(&report)?;
        Ok(report)
    }

    /// Scene generation, ground-truth rendering and calibration in one run.
    pub fn pipeline(&self) -> Result<CalibrationReport> {
        let (field, _) = self.gen_scene()?;
        let views = self.sample_views(self.config.calibration.views)?;
        let manifest = self.render_views(&field, &views)?;
        let checkpoint = self.config.calibration.checkpoint.clone();
        self.calibrate(&field, &manifest, checkpoint.as_deref(), self.config.calibration.refine)
    }
}

#[derive(Debug, Parser)]
#[command(name = "viewcal", version, about = "View matching and camera pose calibration experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Voxelize the configured scene.
    GenScene(Common),
    /// Render ground-truth views and write a pose manifest.
    RenderViews {
        #[command(flatten)]
        common: Common,
        /// Scene file; defaults to <out>/scene.vox.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Render at the poses of this manifest instead of sampling.
        #[arg(long, conflicts_with = "count")]
        poses: Option<PathBuf>,
        /// Number of poses to sample; defaults to calibration.views.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Match two PPM images and write the plan and top links.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Calibrate perturbed poses against the views of a manifest.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// View manifest; defaults to <out>/views.json.
        #[arg(long)]
        views: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        no_refine: bool,
    },
    /// Score estimated poses against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        truths: PathBuf,
        #[arg(long)]
        initial: Option<PathBuf>,
    },
    /// gen-scene, render-views and calibrate in one go.
    Pipeline(Common),
}

fn print_report(r: &CalibrationReport) {
    println!(
        "views {}  rot {:.4} -> {:.4} deg  trans {:.4} -> {:.4}",
        r.views.len(),
        r.mean_rot_init_deg,
        r.mean_rot_final_deg,
        r.mean_trans_init,
        r.mean_trans_final
    );
}

pub fn execute(cmd: Command) -> Result<()> {
    let exp = |c: Common| Experiment::load(&c.config, c.seed, c.out);
    match cmd {
        Command::GenScene(c) => {
            let (_, path) = exp(c)?.gen_scene()?;
            println!("wrote {}", path.display());
        }
        Command::RenderViews { common, scene, poses, count } => {
            let e = exp(common)?;
            let field = e.load_scene(&scene.unwrap_or_else(|| e.out.join(SCENE_FILE)))?;
            let entries = match poses {
                Some(p) => io::read_json::<Stamped<PoseList>>(&p)?.body.poses,
                None => e.sample_views(count.unwrap_or(e.config.calibration.views))?,
            };
            println!("wrote {}", e.render_views(&field, &entries)?.display());
        }
        Command::Match { common, source, target } => {
            let e = exp(common)?;
            let s = e.match_images(&source, &target)?;
            println!("plan {}x{} after {} iterations, {} links", s.rows, s.cols, s.iterations, s.links.len());
        }
        Command::Calibrate { common, scene, views, checkpoint, no_refine } => {
            let e = exp(common)?;
            let field = e.load_scene(&scene.unwrap_or_else(|| e.out.join(SCENE_FILE)))?;
            let manifest = views.unwrap_or_else(|| e.out.join(VIEWS_FILE));
            let checkpoint = checkpoint.or_else(|| e.config.calibration.checkpoint.clone());
            let refine = e.config.calibration.refine && !no_refine;
            print_report(&e.calibrate(&field, &manifest, checkpoint.as_deref(), refine)?);
        }
        Command::Evaluate { common, estimates, truths, initial } => {
            print_report(&exp(common)?.evaluate_files(&estimates, &truths, initial.as_deref())?);
        }
        Command::Pipeline(c) => print_report(&exp(c)?.pipeline()?),
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
