//! Command-line front end.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid input (parse errors,
//! spec or class-table mismatch, bad config), 3 missing data (files or
//! frames), 4 lifecycle tracking without proposal scores.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::io::{
    load_boxes, load_manifest, load_scores, read_raw, save_manifest, save_scores, save_text, write_grid, DatasetError,
    SequenceManifest,
};
use crate::label_gen::{generate_frame_labels, LabelError, SemanticGrid};
use crate::metrics::{EvalOptions, MetricAccumulator, MetricError, MetricReport};
use crate::synth::{corrupt, frame_file_name, render_sequence, write_grids, NoiseSpec, Scenario, SynthError};
use crate::trackers::{track_sequence, Method, TrackerConfig, TrackerError};
use crate::voxel::{PanopticGrid, TrackedBox};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NO_SCORES: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "occ4d", version, about = "4D panoptic occupancy evaluation and tracking")]
pub struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, env = "OCC4D_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build panoptic ground truth from semantic grids and box tracks.
    GenLabels(GenLabelsArgs),
    /// Score a predicted sequence against ground truth.
    Eval(EvalArgs),
    /// Assign temporally consistent track ids to a predicted sequence.
    Track(TrackArgs),
    /// Render a synthetic scenario, optionally with a corrupted prediction.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct GenLabelsArgs {
    /// Manifest listing the semantic grids.
    #[arg(long)]
    pub semantic: PathBuf,
    /// Box track file; defaults to the manifest's `boxes_path`.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum MetricName {
    Occstq,
    Pq,
    Pqstar,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "occstq,pq,pqstar")]
    pub metrics: Vec<MetricName>,
    /// Evaluate only gt-visible voxels (the default).
    #[arg(long, overrides_with = "no_visible_only")]
    pub visible_only: bool,
    /// Evaluate every voxel instead of only gt-visible ones.
    #[arg(long, overrides_with = "visible_only")]
    pub no_visible_only: bool,
    /// Report file (TOML); a per-frame CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// Tracker config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Proposal scores; defaults to the manifest's `scores_path`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Noise spec; when given, a corrupted prediction is written to `pred/`.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// Replaces the noise spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let code = match &e {
            DatasetError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            DatasetError::Io { .. } => EXIT_INTERNAL,
            _ => EXIT_INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        let code = match e {
            MetricError::EmptyAccumulator => EXIT_MISSING,
            _ => EXIT_INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        let kind = match &e {
            LabelError::FrameMismatch { .. } => "FrameMismatch",
            LabelError::MissingClassTableEntry { .. } => "MissingClassTableEntry",
            LabelError::InvalidBox { .. } => "InvalidBox",
            LabelError::Grid(_) => "InvalidGrid",
        };
        CliError::new(EXIT_INVALID, format!("{kind}: {e}"))
    }
}

impl From<TrackerError> for CliError {
    fn from(e: TrackerError) -> Self {
        let code = match e {
            TrackerError::MissingScore { .. } => EXIT_NO_SCORES,
            _ => EXIT_INVALID,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Dataset(d) => d.into(),
            other => CliError::new(EXIT_INVALID, other.to_string()),
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            let _ = std::io::stdout().write_all(summary.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Runs a parsed command and returns the text it prints on success.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::GenLabels(a) => cmd_gen_labels(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Track(a) => cmd_track(a),
        Command::Synth(a) => cmd_synth(a),
    })
}

/// Removes files written by a command that failed part way.
#[derive(Default)]
struct Cleanup {
    created_dir: Option<PathBuf>,
    files: Vec<PathBuf>,
    armed: bool,
}

impl Cleanup {
    fn for_dir(dir: &Path) -> Self {
        Self {
            created_dir: (!dir.exists()).then(|| dir.to_path_buf()),
            files: Vec::new(),
            armed: true,
        }
    }

    fn disarm(mut self) {
        self.armed = false;
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.created_dir {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn load_frames(manifest: &SequenceManifest) -> Result<Vec<PanopticGrid>, CliError> {
    (0..manifest.frames.len())
        .into_par_iter()
        .map(|k| manifest.load_frame(k).map_err(CliError::from))
        .collect()
}

fn write_sequence(
    manifest: &SequenceManifest,
    grids: &[PanopticGrid],
    out: &Path,
    cleanup: &mut Cleanup,
) -> Result<SequenceManifest, CliError> {
    let mut written = manifest.clone();
    written.base_dir = out.to_path_buf();
    written.boxes_path = None;
    written.scores_path = None;
    for (entry, g) in written.frames.iter_mut().zip(grids) {
        entry.grid_path = frame_file_name(g.frame_index());
        let path = out.join(&entry.grid_path);
        cleanup.files.push(path.clone());
        write_grid(g, &path)?;
    }
    let path = out.join("manifest.toml");
    cleanup.files.push(path.clone());
    save_manifest(&written, &path)?;
    Ok(written)
}

fn cmd_gen_labels(a: &GenLabelsArgs) -> Result<String, CliError> {
    let manifest = load_manifest(&a.semantic)?;
    let table = &manifest.class_table;
    let boxes_path = match (&a.boxes, &manifest.boxes_path) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => manifest.resolve(p),
        (None, None) => return Err(CliError::new(EXIT_MISSING, "no boxes file given and manifest has no boxes_path")),
    };
    let boxes = load_boxes(&boxes_path, table)?;
    let mut by_frame: BTreeMap<u64, Vec<TrackedBox>> = BTreeMap::new();
    for b in boxes {
        by_frame.entry(b.frame_index).or_default().push(b);
    }
    if let Some((&frame, bs)) = by_frame.iter().find(|(f, _)| !manifest.frames.iter().any(|e| e.frame_index == **f)) {
        return Err(CliError::new(
            EXIT_INVALID,
            format!("FrameMismatch: box track {} has frame_index {frame}, which the manifest does not list", bs[0].track_id),
        ));
    }

    let labels = manifest
        .frames
        .par_iter()
        .map(|entry| {
            let raw = read_raw(&manifest.resolve(&entry.grid_path))?;
            let sem = SemanticGrid::from_raw(raw, entry.frame_index, entry.ego_pose, table)?;
            let boxes = by_frame.get(&entry.frame_index).map(Vec::as_slice).unwrap_or(&[]);
            Ok(generate_frame_labels(&sem, boxes, table)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut cleanup = Cleanup::for_dir(&a.out);
    let grids: Vec<PanopticGrid> = labels.iter().map(|l| l.grid.clone()).collect();
    write_sequence(&manifest, &grids, &a.out, &mut cleanup)?;
    cleanup.disarm();

    let mut counts = vec![0u64; table.len()];
    let mut out = String::new();
    for l in &labels {
        for &c in l.grid.classes() {
            counts[c as usize] += 1;
        }
        for fb in &l.fallbacks {
            let target = fb.demoted_to.and_then(|c| table.name(c)).unwrap_or("unchanged class with id 0");
            eprintln!(
                "warning: frame {}: {} voxels of `{}` have no box of their class; relabeled as {target}",
                l.grid.frame_index(),
                fb.voxels,
                table.name(fb.class).unwrap_or("?")
            );
        }
    }
    out.push_str(&format!("wrote {} frames to {}\n", labels.len(), a.out.display()));
    for e in table.entries() {
        out.push_str(&format!("  {:<20} {}\n", e.name, counts[e.id as usize]));
    }
    Ok(out)
}

fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    if a.metrics.is_empty() {
        return Err(CliError::new(EXIT_INVALID, "--metrics must name at least one metric"));
    }
    if a.out == a.gt || a.out == a.pred {
        return Err(CliError::new(EXIT_INVALID, "--out must differ from the input manifests"));
    }
    let gt = load_manifest(&a.gt)?;
    let pred = load_manifest(&a.pred)?;
    if gt.class_table != pred.class_table {
        return Err(CliError::new(EXIT_INVALID, "gt and pred manifests use different class tables"));
    }
    let pred_pos: BTreeMap<u64, usize> = pred.frames.iter().enumerate().map(|(k, f)| (f.frame_index, k)).collect();
    if let Some(f) = gt.frames.iter().find(|f| !pred_pos.contains_key(&f.frame_index)) {
        return Err(CliError::new(EXIT_MISSING, format!("pred has no frame {}", f.frame_index)));
    }
    if pred.frames.len() != gt.frames.len() {
        return Err(CliError::new(EXIT_INVALID, "pred lists frames that are not in gt"));
    }

    let want = |m| a.metrics.contains(&m);
    let options = EvalOptions {
        visible_only: !a.no_visible_only,
        panoptic_quality: want(MetricName::Pq) || want(MetricName::Pqstar),
    };
    let table = gt.class_table.clone();
    let acc = (0..gt.frames.len())
        .into_par_iter()
        .try_fold(
            || MetricAccumulator::new(table.clone(), options),
            |mut acc, k| {
                let g = gt.load_frame(k)?;
                let p = pred.load_frame(pred_pos[&gt.frames[k].frame_index])?;
                acc.ingest_frame(&g, &p)?;
                Ok::<_, CliError>(acc)
            },
        )
        .try_reduce(|| MetricAccumulator::new(table.clone(), options), |x, y| Ok(x.merge(&y)?))?;

    let mut report: MetricReport = acc.finalize()?;
    if !want(MetricName::Pq) {
        report.summary.pq = None;
        report.classes.iter_mut().for_each(|c| c.pq = None);
        report.frames.iter_mut().for_each(|f| f.pq = None);
    }
    if !want(MetricName::Pqstar) {
        report.summary.pq_star = None;
        report.classes.iter_mut().for_each(|c| c.pq_star = None);
        report.frames.iter_mut().for_each(|f| f.pq_star = None);
    }
    save_text(&a.out, &report.to_toml())?;
    save_text(&a.out.with_extension("csv"), &report.frames_csv())?;
    Ok(format!("{}\n", report.summary_line()))
}

fn cmd_track(a: &TrackArgs) -> Result<String, CliError> {
    let manifest = load_manifest(&a.pred)?;
    let config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| DatasetError::Io {
                path: path.clone(),
                source: e,
            })?;
            TrackerConfig::from_toml(&text)?
        }
        None => TrackerConfig::default(),
    };
    let scores = if a.method == Method::Lifecycle {
        let path = match (&a.scores, &manifest.scores_path) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => manifest.resolve(p),
            (None, None) => {
                return Err(CliError::new(
                    EXIT_NO_SCORES,
                    "lifecycle tracking needs proposal scores (--scores or scores_path)",
                ))
            }
        };
        match load_scores(&path) {
            Ok(s) => Some(s),
            Err(DatasetError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::new(EXIT_NO_SCORES, format!("score file {} not found", path.display())))
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };

    let grids = load_frames(&manifest)?;
    let tracked = track_sequence(&grids, a.method, &config, scores.as_deref(), &manifest.class_table)?;
    let mut cleanup = Cleanup::for_dir(&a.out);
    write_sequence(&manifest, &tracked.grids, &a.out, &mut cleanup)?;
    cleanup.disarm();
    let s = tracked.summary;
    Ok(format!("{}: tracks {} births {} deaths {}\n", a.method, s.tracks, s.births, s.deaths))
}

fn cmd_synth(a: &SynthArgs) -> Result<String, CliError> {
    let read = |path: &PathBuf| {
        fs::read_to_string(path).map_err(|e| {
            CliError::from(DatasetError::Io {
                path: path.clone(),
                source: e,
            })
        })
    };
    let scenario = Scenario::from_toml(&read(&a.scenario)?)?;
    let noise = a.noise.as_ref().map(|p| read(p).and_then(|t| Ok(NoiseSpec::from_toml(&t)?))).transpose()?;
    let rendered = render_sequence(&scenario)?;
    let cleanup = Cleanup::for_dir(&a.out);
    let written = rendered.write(&a.out)?;
    let mut out = format!(
        "rendered {} frames, {} actors\n  gt: {}\n",
        rendered.gt.len(),
        scenario.actors.len(),
        written.gt_manifest.display()
    );
    if let Some(mut noise) = noise {
        if let Some(seed) = a.seed {
            noise.seed = seed;
        }
        let pred = corrupt(&rendered.gt, &noise, &rendered.table)?;
        let dir = a.out.join("pred");
        let manifest_path = write_grids(&rendered.sequence_id, &rendered.table, &pred.grids, &rendered.timestamps, &dir)?;
        save_scores(&pred.scores, &dir.join("scores.toml"))?;
        let mut manifest = load_manifest(&manifest_path)?;
        manifest.scores_path = Some(PathBuf::from("scores.toml"));
        save_manifest(&manifest, &manifest_path)?;
        out.push_str(&format!("  pred: {}\n", manifest_path.display()));
    }
    cleanup.disarm();
    Ok(out)
}
