//! Command-line front end. Every subcommand writes its outputs and a
//! `manifest.json` into the `--out` directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use fwdchoice::cascade::{load_cascades, save_cascades, Cascade};
use fwdchoice::eval::{evaluate, run_ablation, temporal_split};
use fwdchoice::exposure::{extract_instances, read_instances, resolve_instances, save_instances};
use fwdchoice::features::{
    featurize_all, load_features, save_features, FeatureGroup, Grouping, HistoryIndex,
};
use fwdchoice::model::{fit, ChoiceModel, FitConfig};
use fwdchoice::pipeline::{self, PipelineConfig};
use fwdchoice::synth::{generate_graph, sample_instances, simulate_cascades, SynthConfig};
use fwdchoice::{Error, ExposureDistribution, FollowGraph};

#[derive(Parser, Debug)]
#[command(
    name = "fwdchoice",
    version,
    about = "Predict which exposure a forwarding user cites"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a follow graph (edges.tsv).
    SynthGraph(SynthArgs),
    /// Simulate cascades on a graph (cascades.jsonl).
    SynthCascades {
        #[arg(long)]
        edges: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Sample labeled feature vectors directly (features.tsv).
    SynthInstances {
        /// Number of vectors.
        #[arg(long)]
        n: usize,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Exposure-count distribution W(k) (exposure_distribution.tsv).
    ExposureStats {
        #[command(flatten)]
        input: GraphInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract two-exposure choice instances (instances.tsv).
    Extract {
        #[command(flatten)]
        input: GraphInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute feature vectors (features.tsv, or a train/test pair with
    /// --boundary).
    Featurize {
        #[command(flatten)]
        input: GraphInput,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long, default_value_t = fwdchoice::features::DEFAULT_TZ_OFFSET_HOURS, allow_hyphen_values = true)]
        tz_offset: f64,
        /// Split on original-post time (epoch seconds).
        #[arg(long, allow_hyphen_values = true)]
        boundary: Option<i64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the choice model (model.json, train_report.json).
    Train {
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on a test set (eval.json).
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full model plus leave-one-group-out refits (ablation.tsv).
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// extract, featurize, split, train, evaluate and ablate in one go.
    Pipeline {
        #[command(flatten)]
        input: GraphInput,
        #[arg(long, default_value_t = fwdchoice::features::DEFAULT_TZ_OFFSET_HOURS, allow_hyphen_values = true)]
        tz_offset: f64,
        /// Split on original-post time (epoch seconds); default is the
        /// median instance time.
        #[arg(long, allow_hyphen_values = true)]
        boundary: Option<i64>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// TOML parameter file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_cascades: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GraphInput {
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    cascades: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// `table`, `prose`, or a JSON file mapping groups to feature indices.
    #[arg(long, default_value = "table")]
    grouping: String,
    /// Leave a feature group out (train only).
    #[arg(long)]
    exclude: Vec<String>,
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

impl FitArgs {
    fn config(&self) -> CliResult<FitConfig> {
        if !(self.l2 >= 0.0 && self.tol > 0.0) {
            return Err(usage("--l2 must be >= 0 and --tol > 0"));
        }
        let excluded = self
            .exclude
            .iter()
            .map(|g| FeatureGroup::from_name(g))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FitConfig {
            l2: self.l2,
            tol: self.tol,
            max_iter: self.max_iter,
            grouping: Grouping::from_name(&self.grouping)?,
            excluded,
            ..FitConfig::default()
        })
    }
}

impl SynthArgs {
    fn config(&self) -> CliResult<SynthConfig> {
        let mut cfg = match &self.config {
            Some(path) => SynthConfig::load(path)?,
            None => SynthConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.n_users {
            cfg.n_users = n;
        }
        if let Some(n) = self.n_cascades {
            cfg.n_cascades = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_threshold(t: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(usage(format!("--threshold must be in [0, 1], got {t}")))
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{}: no such file", path.display())))
    }
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let io = |e: std::io::Error| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    writeln!(w).and_then(|_| w.flush()).map_err(io)
}

fn load_graph(path: &Path) -> CliResult<FollowGraph> {
    require_file(path)?;
    let (g, stats) = FollowGraph::load_edges(path)?;
    log::info!(
        "{}: {} edges over {} users ({} duplicates, {} self-loops dropped)",
        path.display(),
        stats.edges,
        stats.users,
        stats.duplicates,
        stats.self_loops
    );
    Ok(g)
}

fn load_cascade_file(path: &Path, counts: &mut Value) -> CliResult<Vec<Cascade>> {
    require_file(path)?;
    let load = load_cascades(path)?;
    for r in &load.rejected {
        log::warn!(
            "{}: line {}: message {} rejected: {}",
            path.display(),
            r.line,
            r.message_id,
            r.reason
        );
    }
    counts["cascades"] = json!(load.cascades.len());
    counts["cascades_rejected"] = json!(load.rejected.len());
    counts["repeat_forwards_dropped"] = json!(load.repeat_forwards_dropped);
    if load.cascades.is_empty() {
        return Err(Failure {
            code: 1,
            message: format!(
                "{}: no valid cascades ({} rejected)",
                path.display(),
                load.rejected.len()
            ),
        });
    }
    Ok(load.cascades)
}

/// What a subcommand reports back for the manifest.
struct Outcome {
    out: PathBuf,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    counts: Value,
}

fn run(command: &Command) -> CliResult<Outcome> {
    let mut counts = json!({});
    let outcome = |out: &Path, inputs: Vec<&Path>, seed, counts| Outcome {
        out: out.to_path_buf(),
        inputs: inputs.into_iter().map(Path::to_path_buf).collect(),
        seed,
        counts,
    };
    match command {
        Command::SynthGraph(args) => {
            let cfg = args.config()?;
            prepare_out(&args.out)?;
            let g = generate_graph(&cfg)?;
            g.save_edges(args.out.join("edges.tsv"))?;
            counts["users"] = json!(g.user_count());
            counts["edges"] = json!(g.edge_count());
            write_json(&args.out.join("synth_config.json"), &cfg)?;
            let inputs = args.config.iter().map(PathBuf::as_path).collect();
            Ok(outcome(&args.out, inputs, Some(cfg.seed), counts))
        }
        Command::SynthCascades { edges, synth } => {
            let cfg = synth.config()?;
            let g = load_graph(edges)?;
            prepare_out(&synth.out)?;
            let cascades = simulate_cascades(&g, &cfg)?;
            save_cascades(synth.out.join("cascades.jsonl"), &cascades)?;
            counts["cascades"] = json!(cascades.len());
            counts["events"] = json!(cascades.iter().map(Cascade::len).sum::<usize>());
            write_json(&synth.out.join("synth_config.json"), &cfg)?;
            let mut inputs = vec![edges.as_path()];
            inputs.extend(synth.config.as_deref());
            Ok(outcome(&synth.out, inputs, Some(cfg.seed), counts))
        }
        Command::SynthInstances { n, synth } => {
            let cfg = synth.config()?;
            if *n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            prepare_out(&synth.out)?;
            let data = sample_instances(&cfg, *n)?;
            save_features(synth.out.join("features.tsv"), &data)?;
            counts["instances"] = json!(data.len());
            counts["label_1"] = json!(data.iter().filter(|r| r.label == 1).count());
            write_json(&synth.out.join("synth_config.json"), &cfg)?;
            let inputs = synth.config.iter().map(PathBuf::as_path).collect();
            Ok(outcome(&synth.out, inputs, Some(cfg.seed), counts))
        }
        Command::ExposureStats { input, out } => {
            let g = load_graph(&input.edges)?;
            let cascades = load_cascade_file(&input.cascades, &mut counts)?;
            prepare_out(out)?;
            let dist = ExposureDistribution::for_cascades(&g, &cascades);
            let path = out.join("exposure_distribution.tsv");
            let io = |e| {
                Failure::from(Error::Io {
                    path: path.clone(),
                    source: e,
                })
            };
            let mut w = BufWriter::new(File::create(&path).map_err(io)?);
            dist.write_tsv(&mut w).and_then(|_| w.flush()).map_err(io)?;
            dist.write_tsv(std::io::stdout().lock())
                .map_err(|e| usage(e.to_string()))?;
            counts["exposed_pairs"] = json!(dist.total());
            Ok(outcome(
                out,
                vec![&input.edges, &input.cascades],
                None,
                counts,
            ))
        }
        Command::Extract { input, out } => {
            let g = load_graph(&input.edges)?;
            let cascades = load_cascade_file(&input.cascades, &mut counts)?;
            prepare_out(out)?;
            let ex = extract_instances(&g, &cascades);
            save_instances(out.join("instances.tsv"), &ex.instances)?;
            counts["instances"] = json!(ex.instances.len());
            counts["parent_mismatch"] = json!(ex.parent_mismatch);
            counts["tied_instances"] = json!(ex.instances.iter().filter(|i| i.tied).count());
            Ok(outcome(
                out,
                vec![&input.edges, &input.cascades],
                None,
                counts,
            ))
        }
        Command::Featurize {
            input,
            instances,
            tz_offset,
            boundary,
            out,
        } => {
            let g = load_graph(&input.edges)?;
            let cascades = load_cascade_file(&input.cascades, &mut counts)?;
            require_file(instances)?;
            let file = File::open(instances).map_err(|e| Error::Io {
                path: instances.clone(),
                source: e,
            })?;
            let rows = read_instances(std::io::BufReader::new(file))?;
            let resolved = resolve_instances(&rows, &cascades)?;
            prepare_out(out)?;
            let history = HistoryIndex::build(&cascades, i64::MAX);
            let inputs = vec![
                input.edges.as_path(),
                input.cascades.as_path(),
                instances.as_path(),
            ];
            match boundary {
                None => {
                    let data = featurize_all(&resolved, &g, &cascades, &history, *tz_offset)?;
                    save_features(out.join("features.tsv"), &data)?;
                    counts["instances"] = json!(data.len());
                }
                Some(b) => {
                    let (train, test) = temporal_split(&resolved, *b);
                    let train = featurize_all(&train, &g, &cascades, &history, *tz_offset)?;
                    let test = featurize_all(&test, &g, &cascades, &history, *tz_offset)?;
                    save_features(out.join("features_train.tsv"), &train)?;
                    save_features(out.join("features_test.tsv"), &test)?;
                    counts["train"] = json!(train.len());
                    counts["test"] = json!(test.len());
                }
            }
            Ok(outcome(out, inputs, None, counts))
        }
        Command::Train {
            train,
            fit: fa,
            out,
        } => {
            let cfg = fa.config()?;
            require_file(train)?;
            let data = load_features(train)?;
            prepare_out(out)?;
            let (model, report) = fit(&data, &cfg)?;
            if !report.converged {
                log::warn!(
                    "optimizer stopped without converging: {:?}",
                    report.stop_reason
                );
            }
            model.save(out.join("model.json"))?;
            write_json(&out.join("train_report.json"), &report)?;
            counts["instances"] = json!(data.len());
            counts["iterations"] = json!(report.iterations);
            Ok(outcome(out, vec![train], None, counts))
        }
        Command::Evaluate {
            model,
            test,
            threshold,
            out,
        } => {
            check_threshold(*threshold)?;
            require_file(model)?;
            require_file(test)?;
            let m = ChoiceModel::load(model)?;
            let data = load_features(test)?;
            prepare_out(out)?;
            let report = evaluate(&m, &data, *threshold)?;
            println!(
                "precision {}  recall {}  F1 {}  (n = {})",
                report.precision.format(3),
                report.recall.format(3),
                report.f1.format(3),
                report.n
            );
            write_json(&out.join("eval.json"), &report)?;
            counts["instances"] = json!(data.len());
            Ok(outcome(out, vec![model, test], None, counts))
        }
        Command::Ablate {
            train,
            test,
            fit: fa,
            threshold,
            out,
        } => {
            check_threshold(*threshold)?;
            let cfg = fa.config()?;
            require_file(train)?;
            require_file(test)?;
            let tr = load_features(train)?;
            let te = load_features(test)?;
            prepare_out(out)?;
            let table = run_ablation(&tr, &te, &cfg.grouping, &cfg, *threshold)?;
            write_ablation(out, &table)?;
            print!("{}", table.to_pretty());
            counts["train"] = json!(tr.len());
            counts["test"] = json!(te.len());
            Ok(outcome(out, vec![train, test], None, counts))
        }
        Command::Pipeline {
            input,
            tz_offset,
            boundary,
            threshold,
            fit: fa,
            out,
        } => {
            check_threshold(*threshold)?;
            let cfg = PipelineConfig {
                tz_offset_hours: *tz_offset,
                boundary: *boundary,
                threshold: *threshold,
                fit: fa.config()?,
            };
            let g = load_graph(&input.edges)?;
            let cascades = load_cascade_file(&input.cascades, &mut counts)?;
            let result = pipeline::run(&g, &cascades, &cfg).map_err(|e| match e {
                Error::Data(msg) => Failure {
                    code: 1,
                    message: format!("{msg} ({} cascades)", cascades.len()),
                },
                other => other.into(),
            })?;
            prepare_out(out)?;
            result.write(out)?;
            write_json(&out.join("ablation.json"), &result.ablation)?;
            print!("{}", result.ablation.to_pretty());
            counts["pipeline"] = serde_json::to_value(&result.counts).map_err(Error::from)?;
            Ok(outcome(
                out,
                vec![&input.edges, &input.cascades],
                None,
                counts,
            ))
        }
    }
}

fn write_ablation(out: &Path, table: &fwdchoice::eval::AblationTable) -> CliResult<()> {
    let path = out.join("ablation.tsv");
    let io = |e| {
        Failure::from(Error::Io {
            path: path.clone(),
            source: e,
        })
    };
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    table
        .write_tsv(&mut w)
        .and_then(|_| w.flush())
        .map_err(io)?;
    write_json(&out.join("ablation.json"), table)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SynthGraph(_) => "synth-graph",
        Command::SynthCascades { .. } => "synth-cascades",
        Command::SynthInstances { .. } => "synth-instances",
        Command::ExposureStats { .. } => "exposure-stats",
        Command::Extract { .. } => "extract",
        Command::Featurize { .. } => "featurize",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Ablate { .. } => "ablate",
        Command::Pipeline { .. } => "pipeline",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if !fwdchoice::par::set_threads(n) {
            log::warn!(
                "--threads {n} ignored: thread pool already started or parallelism disabled"
            );
        }
    }

    let start = Instant::now();
    match run(&cli.command) {
        Ok(o) => {
            let manifest = json!({
                "command": command_name(&cli.command),
                "version": env!("CARGO_PKG_VERSION"),
                "args": std::env::args().skip(1).collect::<Vec<_>>(),
                "inputs": o.inputs,
                "seed": o.seed,
                "threads": cli.threads,
                "counts": o.counts,
                "wall_time_secs": start.elapsed().as_secs_f64(),
            });
            match write_json(&o.out.join("manifest.json"), &manifest) {
                Ok(()) => ExitCode::SUCCESS,
                Err(f) => {
                    eprintln!("error: {}", f.message);
                    ExitCode::from(f.code)
                }
            }
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
