use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mgclip::compensation::CompensationClassifier;
use mgclip::data::read_table;
use mgclip::encoder::save_checkpoint;
use mgclip::gapmetrics::measure_gap;
use mgclip::protocol::{
    gap_trace_csv, per_task_csv, pretrain_model, render_report, run_seeds, run_with_cache, load_dataset, MethodVariant,
    PretrainCache, RunConfig, RunResult,
};
use mgclip::subspace::{analyze_subspaces, random_verification, SubspaceAnalysis, DEFAULT_ENERGY};
use mgclip::{Error, Result};

#[derive(Parser)]
#[command(name = "mgclip", version, about = "Modality-gap preservation and compensation on toy dual encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining; writes a checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint stem (`<stem>.json` + `<stem>.bin`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Full class-incremental run; writes JSON and CSV outputs.
    RunCl {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds; overrides --seed and adds a summary.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Directory for pretrained checkpoints shared across runs.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coverage of the image-feature subspace by the classifier subspaces.
    AnalyzeSubspace {
        #[command(flatten)]
        config: ConfigArgs,
        /// Analyze exported tables instead of running the config.
        #[arg(long, requires = "text")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        text: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ENERGY)]
        energy: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerical checks of the classifier-geometry results on random instances.
    VerifyBounds {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Markdown table from one or more result JSON files.
    ExportReport {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<MethodVariant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_tasks: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.num_tasks {
            cfg.num_tasks = t;
        }
        if let Some(a) = self.alpha {
            cfg.preservation.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.ensemble.beta = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_run(dir: &Path, stem: &str, r: &RunResult) -> Result<()> {
    write(&dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(r)?)?;
    write(&dir.join(format!("{stem}-tasks.csv")), per_task_csv(r))?;
    write(&dir.join(format!("{stem}-gap.csv")), gap_trace_csv(r))?;
    if let Some(p) = &r.probe {
        write(&dir.join(format!("{stem}-probe.csv")), p.trace_csv())?;
    }
    if let Some(s) = &r.subspace {
        write(&dir.join(format!("{stem}-subspace.csv")), subspace_csv(s))?;
    }
    Ok(())
}

fn subspace_csv(s: &SubspaceAnalysis) -> String {
    let mut out = format!("{}\n", SubspaceAnalysis::CSV_HEADER);
    for row in s.csv_rows() {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = config.load()?;
            let data = load_dataset(&cfg.data)?;
            let (train, test) = mgclip::data::holdout_split(&data.labels, cfg.data.test_fraction, cfg.seed);
            let enc = pretrain_model(&cfg, &data, &train)?;
            save_checkpoint(&out, &enc, None)?;
            let texts = enc.embed_texts(&data.raw_text)?;
            for (name, rows) in [("train", &train), ("test", &test)] {
                if rows.is_empty() {
                    continue;
                }
                let labels = rows.iter().map(|&i| data.labels[i]).collect();
                let g = measure_gap(&enc.embed_images(&data.raw_image.select_rows(rows), labels)?, &texts)?;
                println!("{name}: pos {:.4} neg {:.4} inter {:.4}", g.pos, g.neg, g.inter_modality_mean);
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::RunCl {
            config,
            seeds,
            cache_dir,
            out,
        } => {
            let cfg = config.load()?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut cache = match cache_dir {
                Some(d) => PretrainCache::with_dir(d),
                None => PretrainCache::new(),
            };
            if seeds.is_empty() {
                let out_run = run_with_cache(&cfg, &mut cache)?;
                let r = &out_run.result;
                write_run(&out, "result", r)?;
                save_checkpoint(out.join("model"), &out_run.encoder, out_run.classifier.as_ref())?;
                println!("{} seed {}: Avg {:.4} Last {:.4}", r.method.name(), r.seed, r.avg, r.last);
            } else {
                let sweep = run_seeds(&cfg, &seeds, &mut cache)?;
                for r in &sweep.results {
                    write_run(&out, &format!("result-{}", r.seed), r)?;
                    println!("{} seed {}: Avg {:.4} Last {:.4}", r.method.name(), r.seed, r.avg, r.last);
                }
                write(&out.join("summary.json"), serde_json::to_vec_pretty(&sweep)?)?;
                println!("mean: Avg {:.4} Last {:.4}", sweep.mean_avg, sweep.mean_last);
            }
        }
        Command::AnalyzeSubspace {
            config,
            image,
            text,
            energy,
            out,
        } => {
            let analysis = match (image, text) {
                (Some(image), Some(text)) => {
                    let cfg = config.load()?;
                    let images = read_table(image)?;
                    let texts = read_table(text)?;
                    let classes: Vec<usize> = texts.labels().to_vec();
                    let clf = CompensationClassifier::new(images.dim(), cfg.classifier.scale)?
                        .init_new_classes(&images, &classes)?
                        .train_classifier(&images, cfg.classifier.epochs, cfg.classifier.learning_rate, cfg.seed)?;
                    analyze_subspaces(&images, &texts.vectors().transpose(), clf.weights(), energy)?
                }
                _ => {
                    let mut cfg = config.load()?;
                    if !cfg.method.compensates() {
                        return Err(Error::InvalidConfig(format!(
                            "method {} has no visual classifier to analyze",
                            cfg.method.name()
                        )));
                    }
                    cfg.analyze_subspace = true;
                    let run = run_with_cache(&cfg, &mut PretrainCache::new())?;
                    let clf = run.classifier.expect("compensating method");
                    let data = load_dataset(&cfg.data)?;
                    let (train, _) = mgclip::data::holdout_split(&data.labels, cfg.data.test_fraction, cfg.seed);
                    let labels = train.iter().map(|&i| data.labels[i]).collect();
                    let features = run.encoder.embed_images(&data.raw_image.select_rows(&train), labels)?;
                    let texts = run.encoder.embed_texts(&data.raw_text)?.select(clf.class_ids());
                    analyze_subspaces(&features, &texts.vectors().transpose(), clf.weights(), energy)?
                }
            };
            print!("{}", subspace_csv(&analysis));
            if let Some(out) = out {
                write(&out, serde_json::to_vec_pretty(&analysis)?)?;
            }
        }
        Command::VerifyBounds { trials, seed } => {
            let sweep = random_verification(trials, seed)?;
            println!("{}", serde_json::to_string_pretty(&sweep)?);
            return Ok(sweep.holds());
        }
        Command::ExportReport { results, out } => {
            let mut parsed = Vec::with_capacity(results.len());
            for path in &results {
                let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
                parsed.push(serde_json::from_slice::<RunResult>(&raw)?);
            }
            let report = render_report(&parsed);
            match out {
                Some(out) => write(&out, report)?,
                None => print!("{report}"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
