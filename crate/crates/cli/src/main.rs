use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mobiseq::clusterer::select_k;
use mobiseq::ingest::CategoryCatalog;
use mobiseq::patterns::PatternCatalog;
use mobiseq::pipeline::{
    fit_records, load_catalog, open_file, read_json, read_profiles, run_pipeline, with_jobs, write_csv_file,
    write_json, write_marginal_means_csv, PipelineConfig, Stage,
};
use mobiseq::simgen::{generate_log, GenConfig};
use mobiseq::spellseq::DissimilarityMatrix;
use mobiseq::trajectory::{read_records_csv, read_trajectories_csv, reengagement_records, write_records_csv};
use mobiseq::{Error, Result, EXIT_USAGE};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mobiseq", version, about = "Mine behavioral sequences from app-use event logs")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Random seed for simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra config overrides, `key=value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct InputArgs {
    /// Events file (CSV or JSONL).
    #[arg(long)]
    events: Option<PathBuf>,
    /// `csv` or `jsonl`.
    #[arg(long)]
    format: Option<String>,
    /// Profiles CSV.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Category catalog, one label per line.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// `reject` or `clip`.
    #[arg(long)]
    overlap: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse and validate events and profiles.
    Ingest(InputArgs),
    /// Generate a synthetic log with planted patterns.
    Simulate {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
        /// JSON generator config; flags override it.
        #[arg(long)]
        gen_config: Option<PathBuf>,
    },
    /// Split each user's events into sessions.
    Sessionize,
    /// Session statistics, initiating apps and transitions.
    Describe,
    /// Per-user spell-sequence dissimilarity matrices.
    Dist,
    /// Cluster a matrix file, or every user matrix of a run.
    Cluster {
        /// Matrix sidecar JSON; prints the clustering as JSON.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        kmin: Option<usize>,
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Rank medoid patterns and draw the pattern plot.
    Patterns {
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Build ON/OFF trajectories.
    Trajectories {
        #[arg(long)]
        slot_secs: Option<u32>,
        #[arg(long)]
        tz_offset: Option<String>,
    },
    /// Re-engagement rates per user, day and timespan.
    Reengage {
        /// Trajectories CSV; writes rates to `--output` or stdout.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit the random-intercept model to re-engagement rates.
    Lmm {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        formula: Option<String>,
        /// Model the empirical logit of the rate.
        #[arg(long)]
        logit: bool,
    },
    /// Render a pattern catalog as SVG.
    Plot {
        /// Catalog JSON written by `patterns`.
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, default_value_t = 30)]
        top_n: usize,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        categories: Option<PathBuf>,
    },
    /// Run every stage, or a resumed range of stages.
    Pipeline {
        #[command(flatten)]
        input: InputArgs,
        /// First stage to run; earlier artifacts are read from disk.
        #[arg(long)]
        from: Option<String>,
        /// Last stage to run.
        #[arg(long)]
        to: Option<String>,
    },
}

#[derive(Serialize)]
struct ClusterOutput {
    k: usize,
    medoids: Vec<usize>,
    assignment: Vec<usize>,
    total_cost: f64,
    asw_by_k: Vec<(usize, f64)>,
    degenerate: bool,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_input(cfg: &mut PipelineConfig, input: &InputArgs) -> Result<()> {
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    for (key, value) in [
        ("events", path(&input.events)),
        ("profiles", path(&input.profiles)),
        ("categories", path(&input.categories)),
        ("format", input.format.clone()),
        ("overlap", input.overlap.clone()),
    ] {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(())
}

fn stage(cfg: &PipelineConfig, s: Stage) -> Result<()> {
    run_pipeline(cfg, Some(s), Some(s)).map(|_| ())
}

fn parse_stage(s: &Option<String>) -> Result<Option<Stage>> {
    s.as_deref().map(|v| v.parse().map_err(Error::Usage)).transpose()
}

fn write_or_print(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = build_config(&cli)?;
    match &cli.command {
        Command::Ingest(input) => {
            apply_input(&mut cfg, input)?;
            stage(&cfg, Stage::Ingest)
        }
        Command::Simulate { users, days, gen_config } => {
            let mut g: GenConfig = match gen_config {
                Some(p) => read_json(p)?,
                None => GenConfig::default(),
            };
            g.seed = cfg.seed;
            if let Some(u) = users {
                g.n_users = *u;
            }
            if let Some(d) = days {
                g.n_days = *d;
            }
            let catalog = load_catalog(cfg.categories.as_deref())?;
            let generated = with_jobs(cfg.jobs, || Ok(generate_log(&g, &catalog)?))?;
            let out = &cfg.out;
            write_csv_file(&out.join("events.csv"), |w| generated.log.write_csv(w))?;
            write_csv_file(&out.join("profiles.csv"), |w| generated.profiles.write_csv(w))?;
            write_json(&out.join("ground_truth.json"), &generated.truth)?;
            write_json(&out.join("generator.json"), &g)
        }
        Command::Sessionize => stage(&cfg, Stage::Sessionize),
        Command::Describe => stage(&cfg, Stage::Describe),
        Command::Dist => stage(&cfg, Stage::Dist),
        Command::Cluster { matrix, kmin, kmax } => {
            if let Some(k) = kmin {
                cfg.kmin = *k;
            }
            if let Some(k) = kmax {
                cfg.kmax = *k;
            }
            match matrix {
                Some(path) => {
                    cfg.validate()?;
                    let d = DissimilarityMatrix::import(path)?;
                    let sel = with_jobs(cfg.jobs, || Ok(select_k(&d, cfg.kmin, Some(cfg.kmax))?))?;
                    let c = sel.clustering;
                    let out = ClusterOutput {
                        k: c.k,
                        medoids: c.medoids,
                        assignment: c.assignment,
                        total_cost: c.total_cost,
                        asw_by_k: sel.asw_by_k,
                        degenerate: sel.degenerate,
                    };
                    let text = serde_json::to_string_pretty(&out).expect("serializable");
                    println!("{text}");
                    Ok(())
                }
                None => stage(&cfg, Stage::Cluster),
            }
        }
        Command::Patterns { top_n } => {
            if let Some(n) = top_n {
                cfg.top_n = *n;
            }
            stage(&cfg, Stage::Patterns)
        }
        Command::Trajectories { slot_secs, tz_offset } => {
            if let Some(s) = slot_secs {
                cfg.slot_secs = *s;
            }
            if let Some(tz) = tz_offset {
                cfg.set("tz_offset", tz)?;
            }
            stage(&cfg, Stage::Trajectories)
        }
        Command::Reengage { trajectories, output } => match trajectories {
            Some(path) => {
                let trajs = read_trajectories_csv(open_file(path)?)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                let table = reengagement_records(&trajs);
                let mut buf = Vec::new();
                write_records_csv(&table.records, &mut buf).map_err(|e| Error::Data(e.to_string()))?;
                write_or_print(output.as_deref(), &String::from_utf8(buf).expect("csv is utf-8"))
            }
            None => stage(&cfg, Stage::Reengage),
        },
        Command::Lmm {
            records,
            profiles,
            formula,
            logit,
        } => {
            if let Some(f) = formula {
                cfg.formula = f.clone();
            }
            cfg.logit |= *logit;
            match records {
                Some(path) => {
                    let spec = cfg.model_spec()?;
                    let recs = read_records_csv(open_file(path)?)
                        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                    let table = match profiles {
                        Some(p) => read_profiles(p)?,
                        None => Default::default(),
                    };
                    let mut report = fit_records(&recs, &table, &spec)?;
                    report.formula = cfg.formula.clone();
                    let dir = cfg.out.join("lmm");
                    write_json(&dir.join("fit.json"), &report)?;
                    write_csv_file(&dir.join("marginal_means.csv"), |w| {
                        write_marginal_means_csv(&report.marginal_means, w)
                    })
                }
                None => stage(&cfg, Stage::Lmm),
            }
        }
        Command::Plot {
            catalog,
            top_n,
            output,
            categories,
        } => {
            let patterns: PatternCatalog = read_json(catalog)?;
            let names = match categories {
                Some(p) => CategoryCatalog::from_reader(open_file(p)?)?,
                None => CategoryCatalog::default(),
            };
            let svg = mobiseq::svg::render_pattern_plot(&patterns, *top_n, &names)?;
            write_or_print(output.as_deref(), &svg)
        }
        Command::Pipeline { input, from, to } => {
            apply_input(&mut cfg, input)?;
            let manifest = run_pipeline(&cfg, parse_stage(from)?, parse_stage(to)?)?;
            eprintln!(
                "completed {} stages, manifest at {}",
                manifest.stages.len(),
                cfg.out.join("run_manifest.json").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
