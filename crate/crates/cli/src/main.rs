use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lbmtrack::assoc::{AssocConfig, Matcher};
use lbmtrack::io::{
    encode_detections, load_checkpoint, read_detections, read_frames, save_checkpoint, write_atomic, write_clip_dir,
    GtFile, TrackFile, GT_FILE,
};
use lbmtrack::pipeline::{associate, eval_points, gen_clip, gt_as_tracks, synthetic_detections, track_points};
use lbmtrack::selftest;
use lbmtrack::synth::{SceneSpec, SpriteKind};
use lbmtrack::train::{eval_samples, evaluate, train, TrainConfig};
use lbmtrack::{Error, Result};

const DETECTIONS_FILE: &str = "detections.csv";
const TRACKS_FILE: &str = "tracks.jsonl";

#[derive(Parser)]
#[command(name = "lbmtrack", version, about = "Online point tracking and point-based object association")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sprite {
    Polygon,
    Blob,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatcherArg {
    Greedy,
    Hungarian,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic clip: PPM frames, gt.jsonl and detections.csv.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        sprites: usize,
        #[arg(long, value_enum, default_value_t = Sprite::Polygon)]
        kind: Sprite,
        #[arg(long, default_value_t = 8)]
        queries: usize,
    },
    /// Train a model from a TOML config; writes model.lbmt, train_log.tsv and eval.txt.
    Train {
        /// Training config (TOML); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track the clip's queries online and write a track file.
    TrackPoints {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// Defaults to <clip>/tracks.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a track file against ground truth and print the metrics.
    EvalPoints {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Associate detections over a clip and write the event log.
    TrackObjects {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// Defaults to <clip>/detections.csv.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MatcherArg::Greedy)]
        matcher: MatcherArg,
        /// Drop the score and label factors from the similarity.
        #[arg(long)]
        unweighted: bool,
    },
    /// Run the built-in oracle, property, gradient and association suites.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { out, height, width, frames, sprites, kind, queries } => {
            let kind = match kind {
                Sprite::Polygon => SpriteKind::Polygon,
                Sprite::Blob => SpriteKind::Blob,
            };
            let spec =
                SceneSpec { seed: seed.unwrap_or(0), height, width, frames, sprites, kind, ..SceneSpec::default() };
            let (clip, gt) = gen_clip(&spec, queries)?;
            write_clip_dir(&out, &clip.frames, &gt)?;
            write_atomic(&out.join(DETECTIONS_FILE), encode_detections(&synthetic_detections(&clip)).as_bytes())?;
            println!("wrote {} frames to {}", clip.frames.len(), out.display());
        }
        Command::Train { config, out } => {
            let mut cfg = match &config {
                Some(p) => read_config(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let every = cfg.checkpoint_every;
            let mut log = Vec::new();
            let outcome = train(&cfg, &mut log, &mut |r, m| {
                if (r.step + 1) % 100 == 0 || r.step + 1 == r.total_steps {
                    eprintln!("step {}/{} loss {:.4}", r.step + 1, r.total_steps, r.loss.total);
                }
                if every > 0 && (r.step + 1) % every == 0 && r.step + 1 < r.total_steps {
                    save_checkpoint(&out.join(format!("model_step{:06}.lbmt", r.step + 1)), m)?;
                }
                Ok(())
            })?;
            write_atomic(&out.join("train_log.tsv"), &log)?;
            save_checkpoint(&out.join("model.lbmt"), &outcome.model)?;
            let report = evaluate(&outcome.model, &eval_samples(&cfg)?)?;
            let text = report_text(&report.report_lines());
            write_atomic(&out.join("eval.txt"), text.as_bytes())?;
            print!("{text}");
        }
        Command::TrackPoints { checkpoint, clip, out } => {
            let model = load_checkpoint(&checkpoint)?;
            let gt = GtFile::read(&clip.join(GT_FILE))?;
            let frames = read_frames(&clip)?;
            let tracks = track_points(&model, &frames, &gt.header)?;
            let out = out.unwrap_or_else(|| clip.join(TRACKS_FILE));
            write_atomic(&out, &tracks.encode()?)?;
            println!("wrote {} records to {}", tracks.records.len(), out.display());
        }
        Command::EvalPoints { tracks, gt } => {
            let gt_path = if gt.is_dir() { gt.join(GT_FILE) } else { gt };
            // A ground-truth file is accepted as predictions too.
            let pred = match TrackFile::read(&tracks) {
                Ok(t) => t,
                Err(e) => GtFile::read(&tracks).map(|g| gt_as_tracks(&g)).map_err(|_| e)?,
            };
            let report = eval_points(&pred, &GtFile::read(&gt_path)?)?;
            print!("{}", report_text(&report.report_lines()));
        }
        Command::TrackObjects { checkpoint, clip, detections, out, matcher, unweighted } => {
            let model = load_checkpoint(&checkpoint)?;
            let frames = read_frames(&clip)?;
            let rows = read_detections(&detections.unwrap_or_else(|| clip.join(DETECTIONS_FILE)))?;
            let cfg = AssocConfig {
                seed: seed.unwrap_or(0),
                matcher: match matcher {
                    MatcherArg::Greedy => Matcher::Greedy,
                    MatcherArg::Hungarian => Matcher::Hungarian,
                },
                score_weight: !unweighted,
                label_penalty: !unweighted,
                ..AssocConfig::default()
            };
            let run = associate(&model, &frames, &rows, &cfg)?;
            write_atomic(&out, run.event_log().as_bytes())?;
            println!("wrote {} events to {}", run.events.len(), out.display());
        }
        Command::Selftest => {
            let checks = selftest::run_all(seed.unwrap_or(0));
            let mut stdout = std::io::stdout().lock();
            for c in &checks {
                let _ = writeln!(stdout, "{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            let _ = writeln!(stdout, "{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
        Error::Parse { path: path.to_path_buf(), line, msg: e.message().to_string() }
    })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn report_text(lines: &[(String, f64)]) -> String {
    lines.iter().map(|(k, v)| format!("{k} {v:.6}\n")).collect()
}
