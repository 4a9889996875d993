//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when
//! the data itself is unreadable or unusable. Results go to stdout as
//! `key: value` lines; diagnostics go to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::metrics::{self, ScoreRecord};
use crate::network::{
    grid_search_lr, load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig,
};
use crate::protocol::{self, pct, ExperimentConfig};
use crate::scoring::{score_with_own_template, Aggregation, ScoreOptions, DEFAULT_TEMPLATE_K};
use crate::synth::{make_dataset, Dataset, GenerationSpec};

pub const SEED_ENV: &str = "MORPHGATE_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "morphgate",
    version,
    about = "Single-image morphing-attack detection with a triplet-loss embedder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an embedder on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with training options (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset used for validation EER and learning-rate search.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Fixed learning rate; disables the grid search.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a dataset against a template drawn from its own bona fide samples.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TEMPLATE_K)]
        template_k: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "mean")]
        aggregation: Aggregation,
        /// Also score the samples the template was built from.
        #[arg(long)]
        keep_template_sources: bool,
    },
    /// Compute EER, BPCER10 and BPCER20 from a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Also write the full-precision report as TOML.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the DET curve of a score file as CSV.
    Det {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the attacks to one species.
        #[arg(long)]
        species: Option<String>,
    },
    /// Run a full experiment and write its report directory.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("morphgate: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// An explicit `--seed` wins, then the environment, then the file.
fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    match flag {
        Some(s) => Ok(Some(s)),
        None => env_seed(),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    metrics::read_scores(std::io::BufReader::new(file), path)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth {
            spec,
            out: dir,
            seed,
        } => {
            let mut spec = GenerationSpec::load(&spec)?;
            if let Some(s) = resolve_seed(seed)? {
                spec.seed = s;
            }
            let dataset = make_dataset(&spec)?;
            dataset.save(&dir)?;
            let c = &dataset.manifest.counts;
            let mut text = format!(
                "dataset: {}\nsamples: {}\nbonafide: {}\n",
                dataset.manifest.dataset_tag, dataset.manifest.samples, c.bonafide
            );
            for (species, n) in &c.morph {
                text.push_str(&format!("morph.{species}: {n}\n"));
            }
            write_out(out, &text)
        }
        Command::Train {
            data,
            out: ckpt_path,
            config,
            validation,
            epochs,
            lr,
            seed,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    toml::from_str::<TrainConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = resolve_seed(seed)? {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
                cfg.lr_grid = vec![lr];
            }
            let train_set = Dataset::load(&data)?.samples;
            let validation = validation.map(|v| Dataset::load(&v)).transpose()?;
            let mut text = String::new();
            let outcome = match &validation {
                Some(v) if cfg.lr_grid.len() > 1 => {
                    let result = grid_search_lr(&train_set, &v.samples, &cfg)?;
                    for (lr, eer) in &result.per_lr {
                        text.push_str(&format!("grid.lr_{lr:e}.val_eer_pct: {}\n", pct(*eer)));
                    }
                    cfg.learning_rate = result.best_lr;
                    result.best
                }
                _ => {
                    if let [only] = cfg.lr_grid[..] {
                        cfg.learning_rate = only;
                    }
                    train(
                        &train_set,
                        validation.as_ref().map(|v| v.samples.as_slice()),
                        &cfg,
                    )?
                }
            };
            save_checkpoint(
                &ckpt_path,
                &Checkpoint {
                    params: outcome.params.clone(),
                    margin: cfg.margin,
                    seed: cfg.seed,
                },
            )?;
            text.push_str(&format!(
                "learning_rate: {:e}\nepochs: {}\n",
                cfg.learning_rate, cfg.epochs
            ));
            if let Some(last) = outcome.history.last() {
                text.push_str(&format!("final_loss: {:.6}\n", last.loss));
                if let Some(eer) = last.validation_eer {
                    text.push_str(&format!("val_eer_pct: {}\n", pct(eer)));
                }
            }
            write_out(out, &text)
        }
        Command::Score {
            model,
            data,
            out: scores_path,
            template_k,
            seed,
            aggregation,
            keep_template_sources,
        } => {
            let checkpoint = load_checkpoint(&model)?;
            let samples = Dataset::load(&data)?.samples;
            let seed = resolve_seed(seed)?.unwrap_or(checkpoint.seed);
            let options = ScoreOptions {
                aggregation,
                exclude_template_sources: !keep_template_sources,
            };
            let (template, records) =
                score_with_own_template(&samples, &checkpoint.params, template_k, seed, options)?;
            metrics::write_scores(create(&scores_path)?, &records)?;
            write_out(
                out,
                &format!(
                    "probes: {}\ntemplate: {}\n",
                    records.len(),
                    template.source_ids.join(" ")
                ),
            )
        }
        Command::Eval { scores, report } => {
            let records = load_scores(&scores)?;
            let r = metrics::evaluate(&records)?;
            if let Some(path) = report {
                let text = metrics::report_to_string(&r);
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            let bona_fide = records.iter().filter(|r| !r.label.is_attack()).count();
            let mut text = format!(
                "probes: {}\nbonafide: {bona_fide}\nattacks: {}\neer_pct: {}\neer_threshold: {}\nbpcer10_pct: {}\nbpcer20_pct: {}\n",
                records.len(),
                records.len() - bona_fide,
                pct(r.eer),
                r.eer_threshold,
                pct(r.bpcer10),
                pct(r.bpcer20),
            );
            for (species, m) in &r.per_species {
                text.push_str(&format!(
                    "species.{species}.eer_pct: {}\nspecies.{species}.bpcer10_pct: {}\nspecies.{species}.bpcer20_pct: {}\n",
                    pct(m.eer),
                    pct(m.bpcer10),
                    pct(m.bpcer20)
                ));
            }
            write_out(out, &text)
        }
        Command::Det {
            scores,
            out: det_path,
            species,
        } => {
            let records = load_scores(&scores)?;
            let (bona_fide, by_species) = metrics::split_scores(&records);
            let attacks: Vec<f64> = match &species {
                Some(s) => by_species.get(s).cloned().ok_or_else(|| {
                    Error::Config(format!(
                        "no attacks of species '{s}' in {}",
                        scores.display()
                    ))
                })?,
                None => by_species.values().flatten().copied().collect(),
            };
            let points = metrics::det_curve(&bona_fide, &attacks)?;
            metrics::write_det(create(&det_path)?, &points)?;
            write_out(out, &format!("points: {}\n", points.len()))
        }
        Command::Experiment { config, out: dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = env_seed()? {
                cfg = cfg.with_seed(s);
            }
            let report = protocol::run_experiment(&cfg)?;
            protocol::write_report_dir(&report, &dir)?;
            write_out(out, &protocol::render_report(&report))
        }
    }
}
