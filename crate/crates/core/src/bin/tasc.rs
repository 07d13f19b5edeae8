use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tasc::error::{Error, Result};
use tasc::pipeline::{self, Inputs, RunConfig, TrainReport};
use tasc::search::SearchReport;
use tasc::synth::SynthConfig;
use tasc::unims::{write_scores_csv, ScoreVariant};
use tasc::{load_embeddings, run_pipeline};

#[derive(Parser)]
#[command(
    name = "tasc",
    version,
    about = "Universal domain adaptation over precomputed embeddings"
)]
struct Cli {
    /// TOML run configuration (see `init-config`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. 1 gives bitwise reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Unknown score: unims, ms-s, ms-t, ms-s-weighted, ms-t-weighted.
    #[arg(long, global = true)]
    variant: Option<ScoreVariant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bundle into <out>/data.
    Synth {
        /// TOML file holding generator settings.
        #[arg(long)]
        synth: Option<PathBuf>,
    },
    /// Greedy text-center search; writes search_report.json.
    Search,
    /// Train the linear adapter; writes adapter.embx and train_report.json.
    Refine,
    /// Score target samples; writes scores.csv.
    Score,
    /// Fit the two-component mixture and threshold; writes fit_report.json.
    Threshold,
    /// Evaluate against target labels; writes eval_report.{json,csv} and plot_data.csv.
    Eval,
    /// Run every stage.
    Pipeline {
        /// TOML file holding generator settings; implies synthetic inputs.
        #[arg(long)]
        synth: Option<PathBuf>,
    },
    /// Print the full default configuration.
    InitConfig,
    /// Check EMBX files against their manifests and each other.
    Validate {
        /// Files to check; defaults to the configured inputs.
        files: Vec<PathBuf>,
    },
}

fn load_synth(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Toml {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn resolve(cli: &Cli, synth: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = synth {
        cfg.synth = load_synth(p)?;
        cfg.inputs = None;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(v) = cli.variant {
        cfg.variant = v;
    }
    let seed = cli.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    cfg.validate()?;
    Inputs::load(&cfg.input_paths())
}

fn search_report(cfg: &RunConfig) -> Result<SearchReport> {
    pipeline::read_json(&cfg.out(pipeline::SEARCH_REPORT))
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

fn validate_files(files: &[PathBuf]) -> Result<()> {
    let mut dims = None;
    for f in files {
        let (m, manifest) = load_embeddings(f)?;
        println!(
            "{}: {:?}, {} rows x {} dims",
            f.display(),
            manifest.role,
            m.rows(),
            m.dims()
        );
        match dims {
            None => dims = Some((m.dims(), f)),
            Some((d, first)) if d != m.dims() => {
                return Err(Error::Shape(format!(
                    "{} has {} dims but {} has {d}",
                    f.display(),
                    m.dims(),
                    first.display()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::InitConfig => {
            print!("{}", resolve(cli, None)?.to_toml());
        }
        Command::Validate { files } => {
            let files = if files.is_empty() {
                let p = resolve(cli, None)?.input_paths();
                vec![
                    p.source_images,
                    p.target_images,
                    p.source_classnames,
                    p.noun_vocab,
                ]
            } else {
                files.clone()
            };
            validate_files(&files)?;
            println!("ok");
        }
        Command::Synth { synth } => {
            let cfg = resolve(cli, synth.as_deref())?;
            cfg.synth.validate()?;
            pipeline::stage_synth(&cfg).map_err(|e| e.in_stage("synth"))?;
            log::info!("wrote {}", cfg.data_dir().display());
        }
        Command::Pipeline { synth } => {
            let cfg = resolve(cli, synth.as_deref())?;
            let out = run_pipeline(&cfg)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&out.eval).expect("report serializes")
            );
        }
        Command::Search => {
            let cfg = resolve(cli, None)?;
            let inputs = load_inputs(&cfg)?;
            ensure_out(&cfg)?;
            let report = pipeline::stage_search(&cfg, &inputs).map_err(|e| e.in_stage("search"))?;
            pipeline::write_json(&cfg.out(pipeline::SEARCH_REPORT), &report)?;
        }
        Command::Refine => {
            let cfg = resolve(cli, None)?;
            let inputs = load_inputs(&cfg)?;
            let report = search_report(&cfg)?;
            let (adapter, train) =
                pipeline::stage_refine(&cfg, &inputs, &report).map_err(|e| e.in_stage("refine"))?;
            adapter.save(&cfg.out(pipeline::ADAPTER))?;
            pipeline::write_json(&cfg.out(pipeline::TRAIN_REPORT), &train)?;
        }
        Command::Score => {
            let cfg = resolve(cli, None)?;
            let inputs = load_inputs(&cfg)?;
            let report = search_report(&cfg)?;
            let adapter = pipeline::load_adapter(&cfg)?;
            let scores = pipeline::stage_score(&cfg, &inputs, &report, adapter.as_ref())
                .map_err(|e| e.in_stage("score"))?;
            write_scores_csv(&cfg.out(pipeline::SCORES), &scores)?;
        }
        Command::Threshold => {
            let cfg = resolve(cli, None)?;
            let report = search_report(&cfg)?;
            let scores = pipeline::load_scores(&cfg)?;
            let fit =
                pipeline::stage_threshold(&scores, &report).map_err(|e| e.in_stage("threshold"))?;
            pipeline::write_json(&cfg.out(pipeline::FIT_REPORT), &fit)?;
        }
        Command::Eval => {
            let cfg = resolve(cli, None)?;
            let inputs = load_inputs(&cfg)?;
            let report = search_report(&cfg)?;
            let adapter = pipeline::load_adapter(&cfg)?;
            let scores = pipeline::load_scores(&cfg)?;
            let fit = pipeline::read_json(&cfg.out(pipeline::FIT_REPORT))?;
            let train: Option<TrainReport> = if cfg.refine {
                Some(pipeline::read_json(&cfg.out(pipeline::TRAIN_REPORT))?)
            } else {
                None
            };
            let eval = pipeline::stage_eval(&cfg, &inputs, adapter.as_ref(), &scores, &fit)
                .map_err(|e| e.in_stage("eval"))?;
            pipeline::write_eval_outputs(&cfg, &eval, &report, train.as_ref(), &scores)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&eval).expect("report serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TASC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
