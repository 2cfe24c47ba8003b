use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use trajepa::checkpoint::Checkpoint;
use trajepa::config::RunConfig;
use trajepa::data::{load_csv, synth_generate, write_csv, Trajectory};
use trajepa::eval::{finetune_decoder, ModelEncoder, RandomEncoder, TrajEncoder};
use trajepa::measures::{pairwise_matrix, MeasureConfig, MeasureKind};
use trajepa::pipeline;
use trajepa::region_embed::EmbeddingTable;
use trajepa::rng::derive_seed;
use trajepa::train::{TrainLog, Trainer};

#[derive(Parser)]
#[command(name = "trajepa", version, about = "Hierarchical JEPA trajectory representations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set model.dim=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    /// attention, embed_concat or none.
    #[arg(long)]
    interaction: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic trajectories as CSV.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `data.synth_count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain cell vectors on the training split of a CSV corpus.
    PretrainCells {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder hierarchy; one checkpoint per epoch in the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Self-similarity mean ranks on the test split.
    EvalSelfsim {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Score random embeddings instead of a model.
        #[arg(long, value_parser = ["random"])]
        baseline: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit a pair decoder on frozen embeddings to a heuristic measure.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        measure: MeasureKind,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pairwise heuristic distances between trajectories.
    Measure {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: MeasureKind,
        /// Matching threshold for EDR/LCSS; defaults to the grid edge length.
        #[arg(long)]
        eps_m: Option<f64>,
        /// Use only the first N trajectories.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Neighbours per query in the CSV listing.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<trajepa::Error>() {
            Some(e) if e.is_data_error() => 3,
            Some(trajepa::Error::Config(_)) => 2,
            _ => 1,
        };
        Self { code, err }
    }
}

impl From<trajepa::Error> for Failure {
    fn from(e: trajepa::Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn usage(msg: String) -> Failure {
    Failure {
        code: 2,
        err: anyhow!(msg),
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn require_file(p: &Path) -> Res<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", p.display())))
    }
}

/// Sets a dotted key in a TOML table; the value is parsed as TOML and
/// falls back to a plain string.
fn set_key(doc: &mut toml::Table, key: &str, raw: &str) -> Res<()> {
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn load_config(a: &ConfigArgs) -> Res<RunConfig> {
    let base = match &a.config {
        Some(p) => {
            require_file(p)?;
            fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => RunConfig::default().to_toml(),
    };
    apply_overrides(&base, a)
}

fn apply_overrides(base: &str, a: &ConfigArgs) -> Res<RunConfig> {
    let mut doc: toml::Table = toml::from_str(base).map_err(|e| usage(format!("config: {e}")))?;
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("override {o} is not KEY=VALUE")))?;
        set_key(&mut doc, k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        set_key(&mut doc, "seed", &s.to_string())?;
    }
    if let Some(l) = a.levels {
        set_key(&mut doc, "model.levels", &l.to_string())?;
    }
    if let Some(i) = &a.interaction {
        set_key(&mut doc, "model.interaction", &format!("\"{i}\""))?;
    }
    if let Some(e) = a.epochs {
        set_key(&mut doc, "train.epochs", &e.to_string())?;
    }
    let text = toml::to_string(&doc).map_err(|e| usage(e.to_string()))?;
    RunConfig::from_toml(&text).map_err(|e| usage(e.to_string()))
}

fn read_data(path: &Path, cfg: &RunConfig) -> Res<Vec<Trajectory>> {
    require_file(path)?;
    let (trajs, report) = load_csv(path, &cfg.grid.spec(), &cfg.data.filter)?;
    log::info!(
        "loaded {} trajectories from {} ({report:?})",
        trajs.len(),
        path.display()
    );
    Ok(trajs)
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

fn newest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("epoch-") && name.ends_with(".ckpt")
        })
        .collect();
    found.sort();
    found.pop()
}

fn synth(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Res<()> {
    let spec = cfg.grid.spec();
    let n = count.unwrap_or(cfg.data.synth_count);
    let trajs = synth_generate(n, &spec, &cfg.data.filter, &cfg.data.synth, derive_seed(cfg.seed, &[1]))?;
    let mut w = create(out)?;
    write_csv(&trajs, &mut w)?;
    w.flush().context("writing trajectories")?;
    log::info!("wrote {n} trajectories to {}", out.display());
    Ok(())
}

fn pretrain_cells(cfg: &RunConfig, data: &Path, out: &Path) -> Res<()> {
    let trajs = read_data(data, cfg)?;
    let (train, _) = pipeline::split(cfg, trajs)?;
    let res = pipeline::pretrain(cfg, &train, &cfg.grid.spec())?;
    let mut w = create(out)?;
    res.table.write_to(&mut w)?;
    w.flush().context("writing table")?;
    log::info!(
        "{} cells, final skip-gram loss {:?}",
        res.table.len(),
        res.epoch_losses.last()
    );
    Ok(())
}

/// Header and rows of an existing log for steps before `step`.
fn log_prefix(path: &Path, step: u64) -> Res<String> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    if out.is_empty() {
        out.push_str("step,level,component,value\n");
    }
    Ok(out)
}

fn train(cfg: RunConfig, data: &Path, table: &Path, run_dir: &Path, resume: bool) -> Res<()> {
    require_file(data)?;
    require_file(table)?;
    let spec = cfg.grid.spec();
    let table = {
        let mut r = std::io::BufReader::new(File::open(table).context("opening table")?);
        EmbeddingTable::read_from(&mut r)?
    };
    if table.dim() != cfg.model.dim {
        return Err(usage(format!(
            "table width {} differs from model.dim {}",
            table.dim(),
            cfg.model.dim
        )));
    }
    let trajs = read_data(data, &cfg)?;
    let (train_set, _) = pipeline::split(&cfg, trajs)?;
    let items = trajepa::train::prepare_embeddings(&train_set, &table, &spec)?;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let mut trainer = match newest_checkpoint(run_dir).filter(|_| resume) {
        Some(p) => {
            let mut ck = Checkpoint::load(&p)?;
            // only the epoch budget may change between sessions
            let mut saved = ck.trainer.config.clone();
            saved.train.epochs = cfg.train.epochs;
            if saved.hash() != cfg.hash() {
                return Err(usage(format!("{} was written under a different config", p.display())));
            }
            log::info!("resuming from {}", p.display());
            ck.trainer.config = saved;
            ck.trainer
        }
        None => Trainer::new(cfg.clone())?,
    };
    fs::write(run_dir.join("config.toml"), cfg.to_toml()).context("writing config echo")?;
    let log_path = run_dir.join("train_log.csv");
    let fresh = trainer.step == 0;
    let kept = if fresh {
        String::new()
    } else {
        log_prefix(&log_path, trainer.step)?
    };
    let mut w = BufWriter::new(File::create(&log_path).context("opening training log")?);
    w.write_all(kept.as_bytes()).context("writing training log")?;
    let mut tlog = TrainLog::new(w, fresh)?;
    let mut on_step = |step: u64, r: &trajepa::losses::LossReport| tlog.append(step, r);
    let mut on_epoch = |t: &Trainer, s: &trajepa::train::EpochSummary| {
        let ck = Checkpoint {
            trainer: t.clone(),
            table: table.clone(),
            spec: spec.clone(),
        };
        ck.save(&checkpoint_path(run_dir, t.epoch))?;
        log::info!("checkpoint after epoch {} ({} steps)", t.epoch, s.steps);
        Ok(())
    };
    pipeline::train_epochs(&mut trainer, &items, &mut on_step, &mut on_epoch)?;
    tlog.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).context("writing report")?;
    w.flush().context("writing report")?;
    Ok(())
}

fn eval_selfsim(ck: Option<&Path>, baseline: bool, args: &ConfigArgs, data: &Path, out_dir: &Path) -> Res<()> {
    let (cfg, loaded) = match ck {
        Some(p) if !baseline => {
            require_file(p)?;
            let c = Checkpoint::load(p)?;
            if args.config.is_some() {
                return Err(usage("--config cannot be combined with --checkpoint; use --set".into()));
            }
            (apply_overrides(&c.trainer.config.to_toml(), args)?, Some(c))
        }
        _ => (load_config(args)?, None),
    };
    let trajs = read_data(data, &cfg)?;
    let (_, test) = pipeline::split(&cfg, trajs)?;
    let spec = cfg.grid.spec();
    let random = RandomEncoder {
        dim: cfg.model.dim,
        seed: derive_seed(cfg.seed, &[5]),
    };
    let model;
    let enc: &dyn TrajEncoder = match &loaded {
        Some(c) => {
            model = ModelEncoder {
                state: &c.trainer.state,
                table: &c.table,
                spec: &c.spec,
            };
            &model
        }
        None => &random,
    };
    let seed = derive_seed(cfg.seed, &[4]);
    let setup = trajepa::eval::build_selfsim(&test, &cfg.selfsim, seed)?;
    let report = trajepa::eval::self_similarity(enc, &setup, &cfg.selfsim, &spec, seed)?;
    fs::create_dir_all(out_dir).context("creating output directory")?;
    report.write_csv(create(&out_dir.join("selfsim.csv"))?)?;
    let table = format!("# config {}\n{}", cfg.hash(), report.summary_table());
    write_text(&out_dir.join("selfsim.txt"), &table)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn finetune(ck: &Path, data: &Path, kind: MeasureKind, out_dir: &Path, args: &ConfigArgs) -> Res<()> {
    require_file(ck)?;
    let c = Checkpoint::load(ck)?;
    if args.config.is_some() {
        return Err(usage("--config cannot be combined with --checkpoint; use --set".into()));
    }
    let cfg = &apply_overrides(&c.trainer.config.to_toml(), args)?;
    let trajs = read_data(data, cfg)?;
    let (_, test) = pipeline::split(cfg, trajs)?;
    let n = cfg.finetune.pool_size;
    if test.len() < n {
        return Err(usage(format!(
            "finetune pool of {n} exceeds the {} test trajectories",
            test.len()
        )));
    }
    let eps = if cfg.finetune.eps_m > 0.0 {
        cfg.finetune.eps_m
    } else {
        c.spec.edge_len_m
    };
    let mc = MeasureConfig { kind, eps_m: eps };
    let enc = ModelEncoder {
        state: &c.trainer.state,
        table: &c.table,
        spec: &c.spec,
    };
    let (_, report) = finetune_decoder(
        &enc,
        &test[..n],
        &mc,
        &cfg.finetune,
        &c.spec,
        derive_seed(cfg.seed, &[6]),
    )?;
    report.write_csv(create(&out_dir.join(format!("finetune_{}.csv", kind.name())))?)?;
    println!(
        "{} HR@5 {:.4} HR@20 {:.4} R5@20 {:.4}",
        kind.name(),
        report.hr5,
        report.hr20,
        report.r5_20
    );
    Ok(())
}

fn measure(
    cfg: &RunConfig,
    data: &Path,
    kind: MeasureKind,
    eps_m: Option<f64>,
    limit: Option<usize>,
    out_dir: &Path,
    k: usize,
) -> Res<()> {
    let mut trajs = read_data(data, cfg)?;
    if let Some(l) = limit {
        trajs.truncate(l);
    }
    let spec = cfg.grid.spec();
    let mc = MeasureConfig {
        kind,
        eps_m: eps_m.unwrap_or(spec.edge_len_m),
    };
    let planar: Vec<_> = trajs.iter().map(|t| t.projected(&spec)).collect();
    let m = pairwise_matrix(&planar, &mc, true)?;
    let ids: Vec<String> = trajs.iter().map(|t| t.id.clone()).collect();
    let name = kind.name();
    m.write_binary(&mut create(&out_dir.join(format!("{name}.pwmx")))?)?;
    let mut w = csv::Writer::from_writer(create(&out_dir.join(format!("{name}_matrix.csv")))?);
    let mut header = vec![String::from("id")];
    header.extend(ids.iter().cloned());
    w.write_record(&header).context("writing matrix")?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).context("writing matrix")?;
    }
    w.flush().context("writing matrix")?;
    let mut nb = create(&out_dir.join(format!("{name}_neighbors.csv")))?;
    m.write_neighbors_csv(&ids, k, &mut nb)?;
    nb.flush().context("writing neighbours")?;
    log::info!("{name}: {} x {} matrix", m.len(), m.len());
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match cli.cmd {
        Cmd::Synth { cfg, out, count } => synth(&load_config(&cfg)?, &out, count),
        Cmd::PretrainCells { cfg, data, out } => pretrain_cells(&load_config(&cfg)?, &data, &out),
        Cmd::Train {
            cfg,
            data,
            table,
            run_dir,
            resume,
        } => train(load_config(&cfg)?, &data, &table, &run_dir, resume),
        Cmd::EvalSelfsim {
            checkpoint,
            baseline,
            cfg,
            data,
            out_dir,
        } => eval_selfsim(checkpoint.as_deref(), baseline.is_some(), &cfg, &data, &out_dir),
        Cmd::Finetune {
            checkpoint,
            data,
            measure: kind,
            out_dir,
            cfg,
        } => finetune(&checkpoint, &data, kind, &out_dir, &cfg),
        Cmd::Measure {
            cfg,
            data,
            kind,
            eps_m,
            limit,
            out_dir,
            k,
        } => measure(&load_config(&cfg)?, &data, kind, eps_m, limit, &out_dir, k),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
