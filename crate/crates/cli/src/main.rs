use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use critgen_core::ablation::{self, AblationSetup};
use critgen_core::config::{RunConfig, SeedRange};
use critgen_core::data::{self, Dataset};
use critgen_core::diffusion::DiffusionModel;
use critgen_core::gradcheck;
use critgen_core::metrics::{self, PropertySamples};
use critgen_core::pipeline;
use critgen_core::simulate::{self, GuidedPlanner, NamedScenario, SimLog};

/// Safety-critical traffic scenario generation with guided diffusion.
#[derive(Parser)]
#[command(name = "critgen", version)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output target of the command. Without it a run directory is created
    /// under `$CRITGEN_OUT` (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suffix of the run directory name.
    #[arg(long, global = true)]
    tag: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scripted training corpus and the evaluation battery.
    GenData {
        /// `all` or a comma separated list of straight, curve, t_junction.
        #[arg(long, default_value = "all")]
        maps: String,
        #[arg(long)]
        episodes: Option<usize>,
        /// Also write the scenario battery to this directory.
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Train the denoiser on a corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run closed-loop episodes with guided SVs.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        /// Seed range `a..b` (end exclusive).
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Compute CR, IR, SS and RD of a log directory.
    Evaluate {
        #[arg(long)]
        logs: PathBuf,
        /// Dataset directory providing the realism reference.
        #[arg(long)]
        reference: PathBuf,
        /// Binary route incompletion instead of proportional progress.
        #[arg(long)]
        ir_binary: bool,
    },
    /// Guidance on/off grid over AB, DV and AS.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        /// Vary BC and OR independently.
        #[arg(long, hide = true)]
        split_ab: bool,
        /// Write the simulation logs of every row.
        #[arg(long)]
        keep_logs: bool,
        #[arg(long)]
        ir_binary: bool,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_CASES)]
        cases: usize,
    },
}

#[derive(Args, Clone)]
struct GuidanceArgs {
    #[arg(long)]
    omega_b: Option<f64>,
    #[arg(long)]
    omega_d: Option<f64>,
    #[arg(long)]
    omega_a: Option<f64>,
    #[arg(long)]
    omega_o: Option<f64>,
    #[arg(long)]
    guidance_scale: Option<f64>,
}

impl GuidanceArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.guidance;
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut g.omega_b, self.omega_b);
        set(&mut g.omega_d, self.omega_d);
        set(&mut g.omega_a, self.omega_a);
        set(&mut g.omega_o, self.omega_o);
        set(&mut g.guidance_scale, self.guidance_scale);
    }
}

/// Where a command writes its results.
struct Output {
    /// Explicit artifact path from `--out`, if any.
    target: Option<PathBuf>,
    /// Run directory, created only without `--out`.
    run_dir: Option<PathBuf>,
}

impl Output {
    fn new(cli: &Cli, command: &str) -> Result<Self> {
        if let Some(t) = &cli.out {
            return Ok(Self {
                target: Some(t.clone()),
                run_dir: None,
            });
        }
        let root = std::env::var_os("CRITGEN_OUT").map(PathBuf::from).unwrap_or_else(|| "out".into());
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let tag = cli.tag.as_deref().unwrap_or(command);
        let mut dir = root.join(format!("{stamp}-{tag}"));
        let mut n = 1;
        while dir.exists() {
            dir = root.join(format!("{stamp}-{tag}-{n}"));
            n += 1;
        }
        for sub in ["logs", "tables"] {
            fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(Self {
            target: None,
            run_dir: Some(dir),
        })
    }

    /// Artifact path: the explicit target, or `default` inside the run directory.
    fn path(&self, default: &str) -> PathBuf {
        match (&self.target, &self.run_dir) {
            (Some(t), _) => t.clone(),
            (None, Some(d)) => d.join(default),
            (None, None) => PathBuf::from(default),
        }
    }

    /// Directory for auxiliary tables.
    fn tables(&self) -> PathBuf {
        match (&self.run_dir, &self.target) {
            (Some(d), _) => d.join("tables"),
            (None, Some(t)) if t.extension().is_some() => t.parent().map(Path::to_path_buf).unwrap_or_default(),
            (None, Some(t)) => t.clone(),
            (None, None) => PathBuf::from("."),
        }
    }

    /// Write the resolved config and a provenance manifest into the run directory.
    fn archive(&self, cfg: &RunConfig, cli: &Cli, command: &str, inputs: &[&Path]) -> Result<()> {
        let Some(dir) = &self.run_dir else {
            return Ok(());
        };
        fs::write(dir.join("config.resolved"), cfg.to_toml()?)?;
        let mut checksums = BTreeMap::new();
        for input in inputs {
            for file in input_files(input)? {
                let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
                checksums.insert(file.display().to_string(), data::sha256_hex(&bytes));
            }
        }
        let manifest = serde_json::json!({
            "tool": "critgen",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": cli.seed,
            "inputs": checksums,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn input_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for e in entries {
        out.extend(input_files(&e)?);
    }
    Ok(out)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn read_logs(dir: &Path) -> Result<Vec<SimLog>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .jsonl logs in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| SimLog::read(p).with_context(|| format!("reading log {}", p.display())))
        .collect()
}

fn write_logs(dir: &Path, logs: &[SimLog]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for l in logs {
        let s = &l.summary;
        l.write(&dir.join(format!("{}-seed{:04}.jsonl", s.scenario, s.seed)))?;
    }
    Ok(())
}

fn seeds(cfg: &RunConfig, arg: &Option<String>) -> Result<Vec<u64>> {
    Ok(match arg {
        Some(s) => SeedRange::parse(s)?.seeds(),
        None => cfg.simulation.seeds.seeds(),
    })
}

fn load_scenarios(dir: &Path) -> Result<Vec<NamedScenario>> {
    let s = simulate::load_scenarios(dir).with_context(|| format!("loading scenarios from {}", dir.display()))?;
    if s.is_empty() {
        bail!("no scenarios in {}", dir.display());
    }
    Ok(s)
}

fn json_line<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn run(cli: &Cli) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData {
            maps,
            episodes,
            scenarios,
        } => {
            if let Some(n) = episodes {
                cfg.data.episodes = *n;
            }
            cfg.validate()?;
            let out = Output::new(cli, "gen-data")?;
            out.archive(&cfg, cli, "gen-data", &[])?;
            let map_list = data::maps_from_spec(maps)?;
            let ds = data::generate_dataset(&map_list, &data::default_scripts(), &cfg.data, cfg.dynamics.horizon, cli.seed)?;
            let dir = out.path("data");
            ds.save(&dir)?;
            log::info!(
                "wrote {} episodes ({} skipped) to {}",
                ds.episodes.len(),
                ds.skipped,
                dir.display()
            );
            let battery_dir = scenarios.clone().or_else(|| out.run_dir.as_ref().map(|d| d.join("scenarios")));
            if let Some(b) = battery_dir {
                let battery = simulate::scenario_battery(cfg.simulation.scenarios, cfg.simulation.battery_seed);
                simulate::save_scenarios(&b, &battery)?;
                log::info!("wrote {} scenarios to {}", battery.len(), b.display());
            }
        }
        Command::Train { data: dir, steps } => {
            if let Some(s) = steps {
                cfg.diffusion.train.steps = *s;
            }
            cfg.validate()?;
            let out = Output::new(cli, "train")?;
            out.archive(&cfg, cli, "train", &[dir])?;
            let ds = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            let (model, report) = pipeline::train_model(&cfg, &ds, cli.seed)?;
            let ckpt = out.path("model.ckpt.json");
            model.save(&ckpt)?;
            let tables = out.tables();
            if out.run_dir.is_some() {
                let mut csv = String::from("step,loss\n");
                for (i, l) in report.losses.iter().enumerate() {
                    csv.push_str(&format!("{i},{l}\n"));
                }
                fs::write(tables.join("loss.csv"), csv)?;
                fs::write(out.path("report.json"), json_line(&report)?)?;
            }
            let n = report.losses.len();
            if n > 0 {
                let head = &report.losses[..n.min(10)];
                let tail = &report.losses[n - n.min(500)..];
                log::info!(
                    "trained {n} steps: initial loss {:.4}, final loss {:.4}",
                    head.iter().sum::<f64>() / head.len() as f64,
                    tail.iter().sum::<f64>() / tail.len() as f64
                );
            }
            log::info!("checkpoint {}", ckpt.display());
        }
        Command::Generate {
            ckpt,
            scenarios,
            seeds: seed_arg,
            guidance,
        } => {
            guidance.apply(&mut cfg);
            cfg.validate()?;
            let out = Output::new(cli, "generate")?;
            out.archive(&cfg, cli, "generate", &[ckpt, scenarios])?;
            let model = DiffusionModel::load(ckpt)?;
            let battery = load_scenarios(scenarios)?;
            let planner = GuidedPlanner {
                model: &model,
                guidance: cfg.guidance.clone(),
            };
            let logs = simulate::run_battery(&battery, &seeds(&cfg, seed_arg)?, &planner, &cfg.sim_config())?;
            let dir = out.path("logs");
            write_logs(&dir, &logs)?;
            let invalid = logs.iter().filter(|l| !l.summary.valid).count();
            log::info!("wrote {} logs ({invalid} invalid) to {}", logs.len(), dir.display());
        }
        Command::Evaluate {
            logs,
            reference,
            ir_binary,
        } => {
            cfg.metrics.ir_binary |= *ir_binary;
            cfg.validate()?;
            let out = Output::new(cli, "evaluate")?;
            out.archive(&cfg, cli, "evaluate", &[logs, reference])?;
            let sim = read_logs(logs)?;
            let ds = Dataset::load(reference)?;
            let refs = PropertySamples::from_dataset(&ds);
            let report = metrics::evaluate(&sim, &refs, &cfg.metrics)?;
            let path = out.path("report.json");
            if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(p)?;
            }
            fs::write(&path, json_line(&report)?)?;
            let tables = out.tables();
            fs::create_dir_all(&tables)?;
            fs::write(tables.join("episodes.csv"), metrics::episodes_csv(&sim, &cfg.metrics))?;
            fs::write(
                tables.join("histograms.csv"),
                metrics::histograms_csv(&PropertySamples::from_logs(&sim), &refs, &cfg.metrics)?,
            )?;
            println!(
                "CR {:.4}  IR {:.4}  SS {:.4}  RD {:.4}  episodes {} (invalid {})",
                report.cr, report.ir, report.ss, report.rd, report.episodes, report.invalid_episodes
            );
        }
        Command::Ablate {
            ckpt,
            scenarios,
            reference,
            seeds: seed_arg,
            split_ab,
            keep_logs,
            ir_binary,
            guidance,
        } => {
            guidance.apply(&mut cfg);
            cfg.metrics.ir_binary |= *ir_binary;
            cfg.validate()?;
            let out = Output::new(cli, "ablate")?;
            out.archive(&cfg, cli, "ablate", &[ckpt, scenarios, reference])?;
            let model = DiffusionModel::load(ckpt)?;
            let battery = load_scenarios(scenarios)?;
            let refs = PropertySamples::from_dataset(&Dataset::load(reference)?);
            let seed_list = seeds(&cfg, seed_arg)?;
            let sim = cfg.sim_config();
            let setup = AblationSetup {
                model: &model,
                scenarios: &battery,
                seeds: &seed_list,
                guidance: &cfg.guidance,
                sim: &sim,
                metrics: &cfg.metrics,
                reference: &refs,
            };
            let root = out.path("");
            let tables = out.tables();
            fs::create_dir_all(&tables)?;
            let mut partial = ablation::AblationTable::default();
            let result = ablation::run_ablation(&setup, &ablation::grid(*split_ab), &mut |row, logs| {
                partial.rows.push(row.clone());
                fs::write(tables.join("ablation.csv"), partial.to_csv())
                    .map_err(|e| critgen_core::Error::Config(e.to_string()))?;
                if *keep_logs {
                    write_logs(&root.join("logs").join(&row.label), logs)
                        .map_err(|e| critgen_core::Error::Config(e.to_string()))?;
                }
                Ok(())
            });
            let table = match result {
                Ok(t) => t,
                Err(e) => {
                    fs::write(tables.join("ablation.txt"), partial.to_text())?;
                    return Err(e).context("ablation aborted; completed rows are preserved");
                }
            };
            fs::write(tables.join("ablation.txt"), table.to_text())?;
            fs::write(root.join("report.json"), json_line(&table)?)?;
            print!("{}", table.to_text());
        }
        Command::Gradcheck { cases } => {
            cfg.validate()?;
            let out = Output::new(cli, "gradcheck")?;
            out.archive(&cfg, cli, "gradcheck", &[])?;
            let report = gradcheck::run_gradcheck(cli.seed, *cases)?;
            let path = out.path("report.json");
            if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(p)?;
            }
            fs::write(&path, json_line(&report)?)?;
            print!("{}", report.to_text());
            if !report.passed {
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
