use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use savgrid_core::cascade::{format_trail, parse_trail, BundlePaths, ExpertBundle, ModelRole, Separator, Strategy};
use savgrid_core::classifier::Classifier;
use savgrid_core::config::{Configurable, Settings};
use savgrid_core::gridnet::Extractor;
use savgrid_core::harness::{
    analyze_outliers, compare_strategies, confusion, evaluate, parse_records_csv, records_csv, render_confusion,
    render_summary, scene_labels, summarize, train_classifier, train_extractor, EpochStats, RunConfig, System,
};
use savgrid_core::scene::{build_dataset, load_dataset, Scene};
use savgrid_core::visual::FaceTrack;
use savgrid_core::{wav, CoreError, Result};

/// Scenario-aware audio-visual target speech extraction.
#[derive(Parser)]
#[command(name = "savgrid", version)]
struct Cli {
    /// INI-style configuration; every hyperparameter has a dotted key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic scene dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        noise_ratio: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Trains a universal model or a scenario expert.
    TrainExtractor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "universal")]
        role: RoleArg,
        /// Warm start; the optimizer state is always fresh.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        dynamic_mixing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the interference-type classifier.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs one extractor on a scene or on a WAV file with its face track.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Routes mixtures through the classifier and experts.
    Route {
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[command(flatten)]
        bundle: BundleArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Decision trail destination; stdout when omitted.
        #[arg(long)]
        trail: Option<PathBuf>,
        /// Writes one `<scene_id>.wav` per routed mixture.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Scores a system on a labelled dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        system: SystemArg,
        /// Extractor checkpoint for `--system model`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "plain")]
        strategy: StrategyArg,
        #[command(flatten)]
        bundle: BundleArgs,
        /// Per-scene CSV output.
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        trail: Option<PathBuf>,
    },
    /// Summaries, outlier counts, strategy comparisons and confusion matrices.
    Report {
        #[arg(long)]
        records: Option<PathBuf>,
        /// Second record set to compare against `--records`.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// SI-SDRi below this counts as an outlier.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        threshold: f64,
        #[arg(long)]
        trail: Option<PathBuf>,
        /// Labelled dataset for the confusion matrix.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Dataset directory holding `--scene`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long)]
    face: Option<PathBuf>,
}

#[derive(Args)]
struct BundleArgs {
    #[arg(long)]
    universal: Option<PathBuf>,
    #[arg(long)]
    speech_expert: Option<PathBuf>,
    #[arg(long)]
    noise_expert: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Universal,
    Speech,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Plain,
    Pp1,
    Pp2,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Identity,
    Oracle,
    Model,
    Cascade,
}

impl From<RoleArg> for ModelRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Universal => ModelRole::Universal,
            RoleArg::Speech => ModelRole::ExpertSpeech,
            RoleArg::Noise => ModelRole::ExpertNoise,
        }
    }
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Plain => Strategy::Plain,
            StrategyArg::Pp1 => Strategy::Pp1,
            StrategyArg::Pp2 => Strategy::Pp2,
            StrategyArg::Oracle => Strategy::Oracle,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}

fn settings(cli: &Cli) -> Result<Settings> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::new(),
    };
    for o in &cli.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return config_err(format!("override {o:?} is not KEY=VALUE"));
        };
        s.set(k.trim(), v.trim());
    }
    Ok(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn progress(s: &EpochStats) {
    eprintln!(
        "epoch {:>3}  train {:.4}  dev {:.4}  best {:.4}  lr {:.2e}{}",
        s.epoch,
        s.train_loss,
        s.dev_loss,
        s.best_dev,
        s.lr,
        if s.improved { "  *" } else { "" }
    );
}

fn load_optional(dir: &Option<PathBuf>) -> Result<Vec<Scene>> {
    dir.as_ref().map_or(Ok(Vec::new()), |d| load_dataset(d))
}

/// Scene inputs: a whole dataset, one scene of it, or a WAV with a face track.
fn inputs(input: &InputArgs) -> Result<Vec<(String, Vec<f64>, FaceTrack, Option<Scene>)>> {
    match (&input.data, &input.scene, &input.wav, &input.face) {
        (Some(dir), scene, None, None) => {
            let scenes = load_dataset(dir)?;
            let picked: Vec<Scene> = match scene {
                Some(id) => {
                    let s = scenes.into_iter().find(|s| &s.scene_id == id);
                    vec![s.ok_or_else(|| CoreError::InvalidInput(format!("scene {id} not in {}", dir.display())))?]
                }
                None => scenes,
            };
            Ok(picked
                .into_iter()
                .map(|s| (s.scene_id.clone(), s.mixture.samples.clone(), s.face_track.clone(), Some(s)))
                .collect())
        }
        (None, None, Some(w), Some(f)) => {
            let clip = wav::read(w)?;
            let face = FaceTrack::read(f)?;
            let id = w.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
            Ok(vec![(id, clip.samples, face, None)])
        }
        _ => Err(CoreError::InvalidInput(
            "give --data [--scene ID], or --wav PATH with --face PATH".into(),
        )),
    }
}

fn bundle(b: &BundleArgs) -> Result<ExpertBundle> {
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| CoreError::Config(format!("{flag} checkpoint is required")))
    };
    ExpertBundle::load(&BundlePaths {
        universal: need(&b.universal, "--universal")?,
        expert_speech: need(&b.speech_expert, "--speech-expert")?,
        expert_noise: need(&b.noise_expert, "--noise-expert")?,
        classifier: need(&b.classifier, "--classifier")?,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::from_settings(settings(&cli)?)?;
    match cli.command {
        Command::Simulate {
            out,
            count,
            duration,
            noise_ratio,
            seed,
        } => {
            let mut spec = cfg.scenes.clone();
            spec.count = count.unwrap_or(spec.count);
            spec.duration_s = duration.unwrap_or(spec.duration_s);
            spec.noise_ratio = noise_ratio.unwrap_or(spec.noise_ratio);
            spec.seed = seed.unwrap_or(spec.seed);
            let entries = build_dataset(&spec, &out)?;
            println!("wrote {} scenes to {}", entries.len(), out.display());
        }
        Command::TrainExtractor {
            data,
            dev,
            role,
            init,
            dynamic_mixing,
            out,
        } => {
            let train = load_dataset(&data)?;
            let dev = load_optional(&dev)?;
            let mut ex = match &init {
                Some(p) => Extractor::load(p)?.0,
                None => Extractor::new(&cfg.gridnet, cfg.seed)?,
            };
            let mut tc = cfg.train.clone();
            tc.dynamic_mixing |= dynamic_mixing;
            let role = ModelRole::from(role);
            let report = train_extractor(&mut ex, role, &train, &dev, &tc, &mut progress)?;
            let mut extra = Settings::new();
            extra.set("model.role", role.name());
            if let Some(p) = &init {
                extra.set("model.init", p.display());
            }
            tc.write_settings(&mut extra, "train");
            ex.save(&out, &extra)?;
            println!(
                "best dev loss {:.4} at epoch {}; saved {}",
                report.best_dev,
                report.best_epoch,
                out.display()
            );
        }
        Command::TrainClassifier { data, dev, out } => {
            let train = load_dataset(&data)?;
            let dev = load_optional(&dev)?;
            let mut c = Classifier::new(&cfg.classifier, cfg.seed)?;
            let report = train_classifier(&mut c, &train, &dev, &cfg.classifier_train, &mut progress)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let mut extra = Settings::new();
            cfg.classifier_train.write_settings(&mut extra, "train");
            c.save(&out, &extra)?;
            println!(
                "best dev loss {:.4} at epoch {}; saved {}",
                report.best_dev,
                report.best_epoch,
                out.display()
            );
        }
        Command::Extract { model, input, out } => {
            let (ex, _) = Extractor::load(&model)?;
            let items = inputs(&input)?;
            if items.len() != 1 {
                return Err(CoreError::InvalidInput("extract takes exactly one scene".into()));
            }
            let (_, mixture, face, _) = &items[0];
            let est = ex.separate(mixture, face)?;
            wav::write(&out, &savgrid_core::signal::AudioClip::new(wav::quantize_all(&est), savgrid_core::signal::SAMPLE_RATE)?)?;
            println!("wrote {}", out.display());
        }
        Command::Route {
            strategy,
            bundle: b,
            input,
            trail,
            out_dir,
        } => {
            let bundle = bundle(&b)?;
            let mut decisions = Vec::new();
            let mut items = inputs(&input)?;
            items.sort_by(|a, b| a.0.cmp(&b.0));
            if let Some(d) = &out_dir {
                std::fs::create_dir_all(d).map_err(|e| CoreError::Io {
                    path: d.clone(),
                    source: e,
                })?;
            }
            for (id, mixture, face, scene) in &items {
                let truth = scene.as_ref().map(|s| s.scenario);
                let (out, d) = bundle.route(strategy.into(), id, mixture, face, truth)?;
                if let Some(dir) = &out_dir {
                    let clip = savgrid_core::signal::AudioClip::new(wav::quantize_all(&out), savgrid_core::signal::SAMPLE_RATE)?;
                    wav::write(&dir.join(format!("{id}.wav")), &clip)?;
                }
                decisions.push(d);
            }
            let bytes = format_trail(&decisions)?;
            match &trail {
                Some(p) => write_file(p, &bytes)?,
                None => print!("{}", String::from_utf8_lossy(&bytes)),
            }
        }
        Command::Evaluate {
            data,
            system,
            model,
            strategy,
            bundle: b,
            records,
            trail,
        } => {
            let scenes = load_dataset(&data)?;
            let ex;
            let bun;
            let sys = match system {
                SystemArg::Identity => System::Identity,
                SystemArg::Oracle => System::Oracle,
                SystemArg::Model => {
                    let p = model.ok_or_else(|| CoreError::Config("--model is required for --system model".into()))?;
                    ex = Extractor::load(&p)?.0;
                    System::Model(&ex)
                }
                SystemArg::Cascade => {
                    bun = bundle(&b)?;
                    System::Cascade(&bun, strategy.into())
                }
            };
            let recs = evaluate(&scenes, &sys)?;
            print!("{}", render_summary(&summarize(&recs)));
            if let Some(p) = &records {
                write_file(p, &records_csv(&recs)?)?;
            }
            let decisions: Vec<_> = recs.iter().filter_map(|r| r.decision.clone()).collect();
            if !decisions.is_empty() {
                print!("{}", render_confusion(&confusion(&decisions, &scene_labels(&scenes))?));
                if let Some(p) = &trail {
                    write_file(p, &format_trail(&decisions)?)?;
                }
            }
        }
        Command::Report {
            records,
            compare,
            threshold,
            trail,
            data,
        } => {
            if records.is_none() && trail.is_none() {
                return Err(CoreError::InvalidInput("give --records and/or --trail".into()));
            }
            if let Some(p) = &records {
                let a = parse_records_csv(&read_file(p)?)?;
                print!("{}", render_summary(&summarize(&a)));
                let o = analyze_outliers(&a, threshold);
                println!("outliers below {threshold} dB: {}", o.count);
                for (sc, n) in &o.per_scenario {
                    println!("  {sc}: {n}");
                }
                if let Some(q) = &compare {
                    let b = parse_records_csv(&read_file(q)?)?;
                    let c = compare_strategies(&a, &b, threshold)?;
                    println!(
                        "second set: {} wins, {} losses, {} ties, mean delta {:+.3} dB, outliers {} -> {}",
                        c.wins, c.losses, c.ties, c.mean_delta_db, c.outliers_a, c.outliers_b
                    );
                }
            }
            if let Some(t) = &trail {
                let decisions = parse_trail(&read_file(t)?)?;
                let dir = data.ok_or_else(|| CoreError::InvalidInput("--trail needs --data for ground truth".into()))?;
                let scenes = load_dataset(&dir)?;
                print!("{}", render_confusion(&confusion(&decisions, &scene_labels(&scenes))?));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
