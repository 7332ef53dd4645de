use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pyramid_reid::data::{generate_dataset, load_dataset, save_dataset, CorruptionConfig, Dataset, GenConfig};
use pyramid_reid::evaluation::Metrics;
use pyramid_reid::pyramid::BranchMask;
use pyramid_reid::trainer::{evaluate_checkpoint, Checkpoint, Profile, TrainConfig, TraceWriter, Trainer};
use pyramid_reid::Error;

use crate::error::{CliError, CliResult};
use crate::{AblateArgs, EvalArgs, GenDataArgs, RunArgs, TrainArgs};

pub const CONFIG_FILE: &str = "config.ini";
pub const TRACE_FILE: &str = "trace.csv";
pub const MODEL_FILE: &str = "model.pyrt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_INFO_FILE: &str = "run_info.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ABLATION_FILE: &str = "ablation.csv";

/// When set (to anything but `0`), `run_info.txt` carries no wall-clock data and
/// every output of a command is byte-identical across repeated runs.
pub const DETERMINISTIC_ENV: &str = "PYREID_DETERMINISTIC";

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| CliError::missing_flag(flag))
}

fn create_dir(dir: &Path, flag: &str) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{flag} {}: {e}", dir.display())))
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    if !path.is_dir() {
        return Err(CliError::input(format!("--dataset {}: not a directory", path.display())));
    }
    load_dataset(path).map_err(|e| CliError::from(e).context(format!("--dataset {}", path.display())))
}

fn load_checkpoint(path: &Path, flag: &str) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::input(format!("{flag} {}: no such file", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::from(e).context(format!("{flag} {}", path.display())))
}

fn parse_mask(text: &str) -> CliResult<BranchMask> {
    text.parse()
        .map_err(|e: Error| CliError::from(e).context(format!("--pyramid-mask {text}")))
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let out = required(&args.out, "--out")?;
    let gen = GenConfig {
        num_ids: args.ids,
        imgs_per_id: args.images_per_id,
        num_cams: args.cameras,
        height: args.height,
        width: args.width,
    };
    let data = generate_dataset(&gen, &CorruptionConfig { severity: args.severity }, args.seed)?;
    create_dir(out, "--out")?;
    save_dataset(&data, out)?;
    println!(
        "wrote {}: {} train, {} query, {} gallery images of 3x{}x{}",
        out.display(),
        data.train.len(),
        data.query.len(),
        data.gallery.len(),
        gen.height,
        gen.width
    );
    Ok(())
}

pub fn resolve_config(run: &RunArgs) -> CliResult<TrainConfig> {
    let profile: Profile = run.profile.parse()?;
    let mut cfg = TrainConfig::profile(profile);
    if let Some(path) = &run.config {
        cfg = TrainConfig::load(path, cfg).map_err(|e| CliError::from(e).context(format!("--config {}", path.display())))?;
    }
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(dim) = run.feature_dim {
        cfg.feature_dim = dim;
    }
    if let Some(mask) = &run.pyramid_mask {
        cfg.pyramid_mask = parse_mask(mask)?;
    }
    if run.no_triplet {
        cfg.no_triplet_alternating = true;
    }
    for kv in &run.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(key.trim(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v != "0")
}

pub fn metrics_csv(metrics: &Metrics) -> String {
    format!(
        "mAP,rank1,rank5,rank10\n{},{},{},{}\n",
        metrics.map,
        metrics.rank1(),
        metrics.rank5(),
        metrics.rank10()
    )
}

fn metrics_table(metrics: &Metrics) -> String {
    format!(
        "mAP     rank-1  rank-5  rank-10\n{:<7.4} {:<7.4} {:<7.4} {:.4}\n",
        metrics.map,
        metrics.rank1(),
        metrics.rank5(),
        metrics.rank10()
    )
}

pub struct RunOutcome {
    pub metrics: Metrics,
    pub iterations: u64,
}

/// Trains `config` on `data`, writing every artifact under `out`.
pub fn run_training(config: &TrainConfig, data: &Dataset, out: &Path, resume: Option<&Path>) -> CliResult<RunOutcome> {
    let started = unix_seconds();
    fs::write(out.join(CONFIG_FILE), config.to_ini())?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, "--resume")?;
            Trainer::resume(config.clone(), data, &ckpt)
                .map_err(|e| CliError::from(e).context(format!("--resume {}", path.display())))?
        }
        None => Trainer::new(config.clone(), data)?,
    };
    let mut trace = TraceWriter::new(fs::File::create(out.join(TRACE_FILE))?)?;
    let per_epoch = trainer.iterations_per_epoch();
    let first = trainer.iteration();
    while !trainer.is_finished() {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e) => {
                trace.flush()?;
                return Err(e.into());
            }
        };
        trace.write(&row)?;
        if trainer.iteration() % per_epoch == 0 {
            trace.flush()?;
            let epoch = trainer.epoch();
            if config.checkpoint_epochs.contains(&epoch) {
                let dir = out.join(CHECKPOINT_DIR);
                fs::create_dir_all(&dir)?;
                trainer.checkpoint()?.save(dir.join(format!("epoch_{epoch:03}.pyrt")))?;
            }
        }
    }
    trace.flush()?;
    trainer.checkpoint()?.save(out.join(MODEL_FILE))?;
    let metrics = trainer.evaluate(data)?;
    fs::write(out.join(METRICS_FILE), metrics_csv(&metrics))?;

    let mut info = fs::File::create(out.join(RUN_INFO_FILE))?;
    if deterministic() {
        writeln!(info, "deterministic = true")?;
    } else {
        writeln!(info, "started = {started}")?;
        writeln!(info, "finished = {}", unix_seconds())?;
    }
    Ok(RunOutcome {
        metrics,
        iterations: trainer.iteration() - first,
    })
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let config = resolve_config(&args.run)?;
    let dataset = required(&args.run.dataset, "--dataset")?;
    let out = required(&args.run.out, "--out")?;
    let data = load_data(dataset)?;
    create_dir(out, "--out")?;
    print!("{}", config.to_ini());
    let outcome = run_training(&config, &data, out, args.resume.as_deref())?;
    println!("trained {} iterations; outputs in {}", outcome.iterations, out.display());
    print!("{}", metrics_table(&outcome.metrics));
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let path = required(&args.checkpoint, "--checkpoint")?;
    let dataset = required(&args.dataset, "--dataset")?;
    let ckpt = load_checkpoint(path, "--checkpoint")?;
    let data = load_data(dataset)?;
    let mask = args.pyramid_mask.as_deref().map(parse_mask).transpose()?;
    let metrics = if args.normalize {
        let mut cfg = ckpt.config()?;
        cfg.eval_normalize = true;
        let mut model = ckpt.model()?;
        let mask = mask.unwrap_or(cfg.pyramid_mask.clone());
        pyramid_reid::trainer::evaluate_on(&mut model, &data, &mask, true)?
    } else {
        evaluate_checkpoint(&ckpt, &data, mask.as_ref())?
    };
    print!("{}", metrics_table(&metrics));
    println!();
    print!("{}", metrics_csv(&metrics));
    if let Some(out) = &args.out {
        create_dir(out, "--out")?;
        fs::write(out.join(METRICS_FILE), metrics_csv(&metrics))?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> CliResult<Vec<T>> {
    let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(CliError::usage(format!("{flag} needs at least one value")));
    }
    items
        .iter()
        .map(|s| s.parse().map_err(|_| CliError::usage(format!("{flag}: invalid value `{s}`"))))
        .collect()
}

struct AblationRow {
    mask: String,
    seed: String,
    metrics: Option<Metrics>,
    status: String,
}

fn run_dir(out: &Path, mask: &str, seed: u64) -> PathBuf {
    out.join("runs").join(format!("mask_{mask}_seed_{seed}"))
}

pub fn ablate(args: &AblateArgs) -> CliResult<()> {
    let base = resolve_config(&args.run)?;
    let masks: Vec<String> = parse_list(required(&args.masks, "--masks")?, "--masks")?;
    let seeds: Vec<u64> = match &args.seeds {
        Some(text) => parse_list(text, "--seeds")?,
        None => vec![base.seed],
    };
    let mut configs = Vec::new();
    for mask in &masks {
        let parsed = parse_mask(mask)?;
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.pyramid_mask = parsed.clone();
            cfg.seed = seed;
            cfg.validate().map_err(|e| CliError::from(e).context(format!("mask {mask}")))?;
            configs.push((mask.clone(), seed, cfg));
        }
    }
    let dataset = required(&args.run.dataset, "--dataset")?;
    let out = required(&args.run.out, "--out")?;
    let data = load_data(dataset)?;
    create_dir(out, "--out")?;

    let mut rows = Vec::new();
    for (mask, seed, cfg) in configs {
        let dir = run_dir(out, &mask, seed);
        let result = fs::create_dir_all(&dir)
            .map_err(CliError::from)
            .and_then(|_| run_training(&cfg, &data, &dir, None));
        let (metrics, status) = match result {
            Ok(o) => (Some(o.metrics), "ok".to_string()),
            Err(e) => (None, e.to_string()),
        };
        println!("mask {mask} seed {seed}: {status}");
        rows.push(AblationRow {
            mask,
            seed: seed.to_string(),
            metrics,
            status,
        });
    }
    for mask in &masks {
        let ok: Vec<&Metrics> = rows
            .iter()
            .filter(|r| &r.mask == mask && r.seed != "mean")
            .filter_map(|r| r.metrics.as_ref())
            .collect();
        let metrics = (!ok.is_empty()).then(|| {
            let n = ok.len() as f64;
            Metrics {
                map: ok.iter().map(|m| m.map).sum::<f64>() / n,
                cmc: (0..ok[0].cmc.len()).map(|i| ok.iter().map(|m| m.cmc[i]).sum::<f64>() / n).collect(),
            }
        });
        let status = if metrics.is_some() {
            format!("mean of {} seeds", ok.len())
        } else {
            "no successful seed".to_string()
        };
        rows.push(AblationRow {
            mask: mask.clone(),
            seed: "mean".into(),
            metrics,
            status,
        });
    }

    let mut w = csv::Writer::from_path(out.join(ABLATION_FILE))?;
    w.write_record(["mask", "seed", "mAP", "rank1", "rank5", "rank10", "status"])?;
    for r in &rows {
        let cells = match &r.metrics {
            Some(m) => [m.map, m.rank1(), m.rank5(), m.rank10()].map(|v| v.to_string()),
            None => Default::default(),
        };
        w.write_record([r.mask.as_str(), r.seed.as_str()].into_iter().chain(cells.iter().map(String::as_str)).chain([r.status.as_str()]))?;
    }
    w.flush()?;

    println!("\nmask      seed  mAP     rank-1  rank-5  rank-10");
    for r in &rows {
        match &r.metrics {
            Some(m) => println!(
                "{:<9} {:<5} {:<7.4} {:<7.4} {:<7.4} {:.4}",
                r.mask,
                r.seed,
                m.map,
                m.rank1(),
                m.rank5(),
                m.rank10()
            ),
            None => println!("{:<9} {:<5} failed", r.mask, r.seed),
        }
    }
    let failed = rows.iter().filter(|r| r.seed != "mean" && r.metrics.is_none()).count();
    if failed > 0 {
        return Err(CliError::failure(
            "ablate",
            format!("{failed} of {} runs failed; see {}", masks.len() * seeds.len(), out.join(ABLATION_FILE).display()),
        ));
    }
    Ok(())
}
