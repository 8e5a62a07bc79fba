//! Command implementations behind the `trajcl` binary.

pub mod config;
pub mod output;
pub mod viz;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diffcore::Checkpoint;
use trajcl::evalharness::{mean, Benchmark, Protocol};
use trajcl::model::{Mode, Variant};
use trajcl::synthgen::{mutual_information, oracle_accuracy, Regime};
use trajcl::trainer::{confusion_matrix, train, TrainConfig, Trained};
use trajcl::trajdata::{
    assign_context, build_grid, partition, read_archive, read_feature_table, read_raw_csv, split,
    write_archive, write_feature_table, write_raw_csv, Cell, FeatureTable, Grid, Mbr, RawTrajectory,
    TrajInstance, CONTEXT_DIM,
};

use config::{ExperimentConfig, REFERENCE_TOML};
use output::{write_atomic, Summary};

#[derive(Debug, Parser)]
#[command(name = "trajcl", version, about = "Causal trajectory representation learning")]
pub struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split raw trajectories into fixed-duration instances.
    Partition {
        /// Raw CSV with header traj_id,lon,lat,t,label.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Instance archive (JSON Lines).
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a grid over a bounding rectangle and attach a feature table.
    Grid {
        /// Feature table CSV with header row,col,<24 feature names>.
        #[arg(long)]
        features: Option<PathBuf>,
        /// lon_min,lat_min,lon_max,lat_max
        #[arg(long, value_parser = parse_mbr, allow_hyphen_values = true)]
        mbr: Option<Mbr>,
        /// Derive the rectangle from an instance archive instead of --mbr.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Grid bundle (JSON).
        #[arg(long)]
        output: PathBuf,
    },
    /// Attach per-point context rows from a grid bundle.
    Assign {
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic confounded benchmark.
    Synth {
        /// Directory receiving world.json, the datasets and the raw pipeline inputs.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write its best-validation checkpoint.
    Train {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch CSV report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a checkpoint on a labelled archive.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Train every ablation variant and report mean test accuracy.
    Ablate {
        #[command(flatten)]
        data: EvalData,
        /// Comma-separated subset of full,no_ec,no_ci,no_dise,no_env.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Accuracy over a codebook-size × hidden-size grid.
    Sweep {
        #[command(flatten)]
        data: EvalData,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        d: Option<Vec<usize>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Export per-point prototype and mask values as GeoJSON.
    ExportViz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Export at most this many instances.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the reference configuration with every default.
    Defaults,
}

#[derive(Debug, Args)]
pub struct TrainData {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Split a single archive with the configured ratios instead of --train/--val.
    #[arg(long, conflicts_with_all = ["train", "val"])]
    pub instances: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalData {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

/// Runs one command and returns its summary line.
pub fn run(cli: Cli) -> Result<String> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), cli.seed)?;
    let summary = match cli.command {
        Command::Partition { input, output } => cmd_partition(&cfg, input, &output)?,
        Command::Grid {
            features,
            mbr,
            instances,
            output,
        } => cmd_grid(&cfg, features, mbr, instances, &output)?,
        Command::Assign {
            instances,
            grid,
            output,
        } => cmd_assign(&cfg, instances, grid, &output)?,
        Command::Synth { out_dir } => cmd_synth(&cfg, &out_dir)?,
        Command::Train {
            data,
            mode,
            variant,
            max_epochs,
            checkpoint,
            report,
        } => {
            let mut cfg = cfg;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(v) = variant {
                cfg.train.variant = v;
            }
            if let Some(e) = max_epochs {
                cfg.train.max_epochs = e;
            }
            cmd_train(&cfg, data, &checkpoint, report.as_deref())?
        }
        Command::Eval {
            checkpoint,
            instances,
        } => cmd_eval(&cfg, &checkpoint, instances)?,
        Command::Ablate {
            data,
            variants,
            runs,
            max_epochs,
            output,
        } => {
            let cfg = with_overrides(cfg, runs, max_epochs);
            let variants = variants.unwrap_or_else(|| Variant::ALL.to_vec());
            cmd_ablate(&cfg, data, &variants, &output)?
        }
        Command::Sweep {
            data,
            k,
            d,
            runs,
            max_epochs,
            output,
        } => {
            let mut cfg = with_overrides(cfg, runs, max_epochs);
            if let Some(k) = k {
                cfg.sweep.k = k;
            }
            if let Some(d) = d {
                cfg.sweep.d = d;
            }
            cmd_sweep(&cfg, data, &output)?
        }
        Command::ExportViz {
            checkpoint,
            instances,
            limit,
            output,
        } => cmd_export_viz(&cfg, &checkpoint, instances, limit, &output)?,
        Command::Defaults => {
            print!("{REFERENCE_TOML}");
            Summary::new("defaults")
        }
    };
    Ok(summary.line())
}

fn parse_mbr(s: &str) -> std::result::Result<Mbr, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [a, b, c, d] if a < c && b < d => Ok(Mbr::new(a, b, c, d)),
        [..] if v.len() == 4 => Err("expected lon_min < lon_max and lat_min < lat_max".into()),
        _ => Err(format!("expected 4 comma-separated numbers, got {}", v.len())),
    }
}

fn with_overrides(
    mut cfg: ExperimentConfig,
    runs: Option<usize>,
    max_epochs: Option<usize>,
) -> ExperimentConfig {
    if let Some(r) = runs {
        cfg.runs.count = r.max(1);
    }
    if let Some(e) = max_epochs {
        cfg.train.max_epochs = e;
    }
    cfg
}

fn pick(flag: Option<PathBuf>, fallback: &Option<String>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.as_ref().map(PathBuf::from))
        .ok_or_else(|| anyhow!("no {what} given: pass --{what} or set paths.{what} in the config"))
}

pub fn load_archive(path: &Path) -> Result<Vec<TrajInstance>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_archive(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn archive_bytes(instances: &[TrajInstance]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_archive(&mut buf, instances)?;
    Ok(buf)
}

fn cmd_partition(cfg: &ExperimentConfig, input: Option<PathBuf>, output: &Path) -> Result<Summary> {
    let input = pick(input, &cfg.paths.raw, "input")?;
    let f = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
    let raws = read_raw_csv(BufReader::new(f)).with_context(|| format!("reading {}", input.display()))?;
    let (instances, report) = partition(&raws, &cfg.partition)?;
    for r in &report.rejected {
        log::warn!("trajectory {} rejected: {}", r.traj_id, r.reason);
    }
    let out = write_atomic(output, &archive_bytes(&instances)?)?;
    eprintln!(
        "kept {} instances, dropped {} (short {}, sparse {}), downsampled {}, rejected {}",
        report.kept,
        report.dropped_short + report.dropped_sparse,
        report.dropped_short,
        report.dropped_sparse,
        report.downsampled,
        report.rejected.len()
    );
    Ok(Summary::new("partition")
        .set("trajectories", report.trajectories)
        .set("kept", report.kept)
        .set("dropped", report.dropped_short + report.dropped_sparse)
        .set("downsampled", report.downsampled)
        .set("rejected", report.rejected.len())
        .path("output", &out))
}

/// A grid plus its feature table in one JSON document.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBundle {
    pub format: String,
    pub version: u32,
    pub grid: Grid,
    /// `(row, col, counts)` triples.
    pub cells: Vec<(usize, usize, Vec<f64>)>,
}

pub const GRID_FORMAT: &str = "trajcl-grid";

impl GridBundle {
    pub fn new(grid: Grid, table: &FeatureTable) -> Self {
        Self {
            format: GRID_FORMAT.into(),
            version: 1,
            grid,
            cells: table.iter().map(|(c, r)| (c.row, c.col, r.to_vec())).collect(),
        }
    }

    pub fn table(&self) -> Result<FeatureTable> {
        let mut t = FeatureTable::new();
        for (row, col, counts) in &self.cells {
            let arr: [f64; CONTEXT_DIM] = counts.as_slice().try_into().map_err(|_| {
                anyhow!(
                    "cell ({row}, {col}) has {} counts, expected {CONTEXT_DIM}",
                    counts.len()
                )
            })?;
            t.insert(Cell { row: *row, col: *col }, arr)?;
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let b: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if b.format != GRID_FORMAT || b.version != 1 {
            bail!("{} is not a version-1 grid bundle", path.display());
        }
        Ok(b)
    }
}

fn cmd_grid(
    cfg: &ExperimentConfig,
    features: Option<PathBuf>,
    mbr: Option<Mbr>,
    instances: Option<PathBuf>,
    output: &Path,
) -> Result<Summary> {
    let features = pick(features, &cfg.paths.features, "features")?;
    let f = File::open(&features).with_context(|| format!("opening {}", features.display()))?;
    let table =
        read_feature_table(BufReader::new(f)).with_context(|| format!("reading {}", features.display()))?;
    let mbr = match (mbr, instances) {
        (Some(m), _) => m,
        (None, Some(p)) => {
            let inst = load_archive(&p)?;
            Mbr::of_points(inst.iter().flat_map(|i| i.points.iter()))
                .ok_or_else(|| anyhow!("{} holds no points", p.display()))?
        }
        (None, None) => bail!("pass --mbr or --instances to fix the grid extent"),
    };
    let grid = build_grid(mbr, cfg.grid.cell_size_m)?;
    let outside = table
        .iter()
        .filter(|(c, _)| c.row >= grid.rows || c.col >= grid.cols)
        .count();
    if outside > 0 {
        log::warn!(
            "{outside} feature rows lie outside the {}×{} grid",
            grid.rows,
            grid.cols
        );
    }
    let bundle = GridBundle::new(grid.clone(), &table);
    let out = write_atomic(output, serde_json::to_string(&bundle)?.as_bytes())?;
    Ok(Summary::new("grid")
        .set("rows", grid.rows)
        .set("cols", grid.cols)
        .set("feature_cells", table.len())
        .set("outside", outside)
        .path("output", &out))
}

fn cmd_assign(
    cfg: &ExperimentConfig,
    instances: Option<PathBuf>,
    grid: Option<PathBuf>,
    output: &Path,
) -> Result<Summary> {
    let instances = pick(instances, &cfg.paths.instances, "instances")?;
    let grid = pick(grid, &cfg.paths.grid, "grid")?;
    let bundle = GridBundle::load(&grid)?;
    let table = bundle.table()?;
    let (mut points, mut clamped) = (0, 0);
    let out_instances: Vec<TrajInstance> = load_archive(&instances)?
        .into_iter()
        .map(|i| {
            let (inst, r) = assign_context(i, &bundle.grid, &table);
            points += r.points;
            clamped += r.clamped;
            inst
        })
        .collect();
    let out = write_atomic(output, &archive_bytes(&out_instances)?)?;
    Ok(Summary::new("assign")
        .set("instances", out_instances.len())
        .set("points", points)
        .set("clamped", clamped)
        .path("output", &out))
}

fn protocol(cfg: &ExperimentConfig) -> Protocol {
    Protocol {
        world: cfg.synth.world_config(cfg.seed),
        n_train: cfg.synth.n_train,
        n_val: cfg.synth.n_val,
        n_test: cfg.synth.n_test,
        seeds: vec![cfg.seed],
        train: cfg.train.clone(),
    }
}

fn cmd_synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    let bench = Benchmark::new(protocol(cfg))?;
    let data = bench.data(cfg.seed)?;
    let world = &bench.world;
    let join = |name: &str| out_dir.join(name);

    write_atomic(&join("world.json"), world.to_json()?.as_bytes())?;
    for (name, set) in [
        ("train.jsonl", &data.train),
        ("val.jsonl", &data.val),
        ("test_correlated.jsonl", &data.test_correlated),
        ("test_shifted.jsonl", &data.test_shifted),
    ] {
        write_atomic(&join(name), &archive_bytes(set)?)?;
    }
    // Raw inputs for rebuilding the training archive through partition/grid/assign.
    let raws: Vec<RawTrajectory> = data
        .train
        .iter()
        .map(|i| RawTrajectory {
            id: i.id.clone(),
            label: i.label,
            points: i.points.clone(),
        })
        .collect();
    let mut raw_csv = Vec::new();
    write_raw_csv(&mut raw_csv, &raws)?;
    write_atomic(&join("train_raw.csv"), &raw_csv)?;
    let mut table_csv = Vec::new();
    write_feature_table(&mut table_csv, &world.table)?;
    write_atomic(&join("features.csv"), &table_csv)?;
    let bundle = GridBundle::new(world.grid.clone(), &world.table);
    write_atomic(&join("grid.json"), serde_json::to_string(&bundle)?.as_bytes())?;

    let zones = |set: &[TrajInstance]| -> Vec<usize> {
        set.iter()
            .map(|i| world.zone_at(i.points[0].lon, i.points[0].lat))
            .collect()
    };
    let labels = |set: &[TrajInstance]| -> Vec<usize> { set.iter().map(|i| i.label).collect() };
    let mi_train = mutual_information(&zones(&data.train), &labels(&data.train));
    let mi_shifted = mutual_information(&zones(&data.test_shifted), &labels(&data.test_shifted));
    let oracle = oracle_accuracy(world, &data.test_shifted);
    eprintln!(
        "{} train / {} val / {} + {} test instances; zone-label MI {mi_train:.4} (train) vs {mi_shifted:.4} ({}); oracle accuracy {oracle:.4}",
        data.train.len(),
        data.val.len(),
        data.test_correlated.len(),
        data.test_shifted.len(),
        Regime::TestShifted.name()
    );
    Ok(Summary::new("synth")
        .set("n_train", data.train.len())
        .set("n_val", data.val.len())
        .set("n_test", data.test_shifted.len())
        .set("mi_train_nats", mi_train)
        .set("mi_shifted_nats", mi_shifted)
        .set("oracle_shifted_acc", oracle)
        .path("out_dir", &output::resolve_out(out_dir)))
}

fn train_val(
    cfg: &ExperimentConfig,
    data: TrainData,
) -> Result<(Vec<TrajInstance>, Vec<TrajInstance>, Vec<TrajInstance>)> {
    if let Some(p) = data.instances.or_else(|| {
        if data.train.is_none() && cfg.paths.train.is_none() {
            cfg.paths.instances.as_ref().map(PathBuf::from)
        } else {
            None
        }
    }) {
        let s = &cfg.split;
        let parts = split(load_archive(&p)?, (s.train, s.val, s.test), cfg.seed)?;
        return Ok((parts.train, parts.val, parts.test));
    }
    let tr = load_archive(&pick(data.train, &cfg.paths.train, "train")?)?;
    let va = load_archive(&pick(data.val, &cfg.paths.val, "val")?)?;
    Ok((tr, va, Vec::new()))
}

fn cmd_train(
    cfg: &ExperimentConfig,
    data: TrainData,
    checkpoint: &Path,
    report_path: Option<&Path>,
) -> Result<Summary> {
    let (tr, va, te) = train_val(cfg, data)?;
    let (ck, report) = train(&tr, &va, &cfg.train)?;
    let ck_path = write_atomic(checkpoint, &ck.to_bytes())?;
    let mut summary = Summary::new("train")
        .set("mode", cfg.train.mode.name())
        .set("variant", cfg.train.variant.name())
        .set("seed", cfg.seed)
        .set("best_epoch", report.best_epoch)
        .set("best_val_acc", report.best_val_acc)
        .set("epochs_run", report.epochs.len())
        .set("stop", report.stop.name())
        .path("checkpoint", &ck_path);
    if let Some(p) = report_path {
        let rp = write_atomic(p, report.to_csv().as_bytes())?;
        summary = summary.path("report", &rp);
    }
    if !te.is_empty() {
        summary = summary.set("test_acc", Trained::from_checkpoint(&ck)?.accuracy(&te)?);
    }
    Ok(summary)
}

fn load_checkpoint(path: &Path) -> Result<Trained> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Trained::from_checkpoint(&ck)?)
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, instances: Option<PathBuf>) -> Result<Summary> {
    let model = load_checkpoint(checkpoint)?;
    let path = pick(instances, &cfg.paths.test, "instances")?;
    let set = load_archive(&path)?;
    let preds = model.predict(&set)?;
    let labels: Vec<usize> = set.iter().map(|i| i.label).collect();
    let classes = model.model.cfg.classes;
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        bail!("label {l} out of range for a {classes}-class checkpoint");
    }
    let cm = confusion_matrix(&preds, &labels, classes);
    let acc = trajcl::trainer::accuracy(&preds, &labels);
    Ok(Summary::new("eval")
        .set("instances", set.len())
        .set("accuracy", acc)
        .set("confusion", serde_json::to_value(cm)?))
}

struct Splits {
    train: Vec<TrajInstance>,
    val: Vec<TrajInstance>,
    test: Vec<TrajInstance>,
}

fn eval_data(cfg: &ExperimentConfig, data: EvalData) -> Result<Splits> {
    Ok(Splits {
        train: load_archive(&pick(data.train, &cfg.paths.train, "train")?)?,
        val: load_archive(&pick(data.val, &cfg.paths.val, "val")?)?,
        test: load_archive(&pick(data.test, &cfg.paths.test, "test")?)?,
    })
}

/// Mean test accuracy over `runs.count` seeds starting at the configured seed.
fn mean_accuracy(cfg: &ExperimentConfig, train_cfg: &TrainConfig, s: &Splits) -> Result<(f64, Vec<f64>)> {
    let mut accs = Vec::with_capacity(cfg.runs.count);
    for r in 0..cfg.runs.count as u64 {
        let run_cfg = TrainConfig {
            seed: cfg.seed + r,
            ..train_cfg.clone()
        };
        let (ck, _) = train(&s.train, &s.val, &run_cfg)?;
        accs.push(Trained::from_checkpoint(&ck)?.accuracy(&s.test)?);
    }
    Ok((mean(accs.iter().copied()), accs))
}

fn cmd_ablate(
    cfg: &ExperimentConfig,
    data: EvalData,
    variants: &[Variant],
    output: &Path,
) -> Result<Summary> {
    let s = eval_data(cfg, data)?;
    let mut csv = String::from("variant,runs,mean_accuracy,accuracies\n");
    let mut summary = Summary::new("ablate").set("runs", cfg.runs.count);
    for &v in variants {
        let tc = TrainConfig {
            mode: Mode::Trajcl,
            variant: v,
            ..cfg.train.clone()
        };
        let (m, accs) = mean_accuracy(cfg, &tc, &s)?;
        let joined: Vec<String> = accs.iter().map(|a| a.to_string()).collect();
        csv.push_str(&format!("{},{},{m},{}\n", v.name(), accs.len(), joined.join(";")));
        summary = summary.set(v.name(), m);
    }
    let out = write_atomic(output, csv.as_bytes())?;
    Ok(summary.path("output", &out))
}

fn cmd_sweep(cfg: &ExperimentConfig, data: EvalData, output: &Path) -> Result<Summary> {
    let s = eval_data(cfg, data)?;
    let mut csv = String::from("k,d,mean_accuracy\n");
    let mut rows = 0;
    for &k in &cfg.sweep.k {
        for &d in &cfg.sweep.d {
            let tc = TrainConfig {
                k,
                d,
                ..cfg.train.clone()
            };
            let (m, _) = mean_accuracy(cfg, &tc, &s)?;
            csv.push_str(&format!("{k},{d},{m}\n"));
            rows += 1;
        }
    }
    let out = write_atomic(output, csv.as_bytes())?;
    Ok(Summary::new("sweep").set("rows", rows).path("output", &out))
}

fn cmd_export_viz(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    instances: Option<PathBuf>,
    limit: Option<usize>,
    output: &Path,
) -> Result<Summary> {
    let model = load_checkpoint(checkpoint)?;
    let path = pick(instances, &cfg.paths.test, "instances")?;
    let mut set = load_archive(&path)?;
    if let Some(n) = limit {
        set.truncate(n);
    }
    let collection = viz::feature_collection(&model, &set)?;
    let text = serde_json::to_string(&collection)?;
    let out = write_atomic(output, text.as_bytes())?;
    Ok(Summary::new("export-viz")
        .set("features", collection.features.len())
        .set("instances", set.len())
        .path("output", &out))
}
