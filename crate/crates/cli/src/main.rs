use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use protoseg::config::{Precision, RunConfig};
use protoseg::explain::{evaluate, export_explanations, metrics_csv};
use protoseg::numcore::Real;
use protoseg::segmodel::checkpoint::Checkpoint;
use protoseg::synthdata::{generate_dataset, load_split, save_split, SegSample, Split};
use protoseg::trainer::{checkpoint_path, latest_checkpoint, report_csv, run_pipeline, Stage, TrainData, TrainState};

#[derive(Parser)]
#[command(name = "protoseg", version, about = "Prototype-based semantic segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Run the training stages, resuming from the latest checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run only this stage (its predecessor's checkpoint must exist).
        #[arg(long)]
        stage: Option<String>,
    },
    /// Compute metrics of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Write activation maps, assignment maps and manifests.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Comma separated image ids of the split.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        images: Vec<usize>,
        /// Only export this prototype's activation map.
        #[arg(long)]
        prototype: Option<usize>,
    },
    /// gen-data, train and eval in one go.
    Pipeline(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the diversity loss.
    #[arg(long = "lambda-j")]
    lambda_j: Option<f64>,
    /// Output directory (the dataset directory for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite existing outputs instead of refusing or resuming.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct Source {
    /// Checkpoint to load (default: the latest one in the output directory).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train or val.
    #[arg(long, default_value = "val")]
    split: String,
}

impl Common {
    fn resolve(&self, out_is_data: bool) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = self.lambda_j {
            cfg.lambda_j = l;
        }
        if let Some(d) = &self.data {
            cfg.data_dir = d.display().to_string();
        }
        if let Some(o) = &self.out {
            if out_is_data {
                cfg.data_dir = o.display().to_string();
            } else {
                cfg.out_dir = o.display().to_string();
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        println!("# resolved configuration");
        print!("{}", cfg.to_text());
        println!();
        Ok(cfg)
    }
}

fn dir_has_entries(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn gen_data(cfg: &RunConfig, force: bool) -> Result<()> {
    let root = PathBuf::from(&cfg.data_dir);
    if dir_has_entries(&root) {
        if !force {
            bail!("{} exists and is not empty (use --force to overwrite)", root.display());
        }
        fs::remove_dir_all(&root).with_context(|| format!("removing {}", root.display()))?;
    }
    let data = generate_dataset(&cfg.dataset_spec())?;
    save_split(&root, Split::Train, &data.train)?;
    save_split(&root, Split::Val, &data.val)?;
    fs::write(root.join("config.txt"), cfg.to_text())?;
    println!(
        "wrote {} train and {} val samples to {}",
        data.train.len(),
        data.val.len(),
        root.display()
    );
    Ok(())
}

fn load_samples(cfg: &RunConfig, split: Split) -> Result<Vec<(usize, SegSample)>> {
    let root = PathBuf::from(&cfg.data_dir);
    let samples = load_split(&root, split).with_context(|| format!("loading the {} split of {}", split.name(), root.display()))?;
    for (id, s) in &samples {
        s.validate(cfg.num_classes)
            .with_context(|| format!("{} sample {id}", split.name()))?;
    }
    Ok(samples)
}

fn load_data(cfg: &RunConfig) -> Result<TrainData> {
    let strip = |v: Vec<(usize, SegSample)>| v.into_iter().map(|(_, s)| s).collect();
    Ok(TrainData {
        train: strip(load_samples(cfg, Split::Train)?),
        val: strip(load_samples(cfg, Split::Val)?),
    })
}

fn clear_checkpoints(out: &Path) -> Result<()> {
    for s in Stage::ALL {
        let p = checkpoint_path(out, s);
        if p.exists() {
            fs::remove_file(&p)?;
        }
    }
    let r = out.join("report.csv");
    if r.exists() {
        fs::remove_file(r)?;
    }
    Ok(())
}

fn train_typed<T: Real>(cfg: &RunConfig, data: &TrainData, stage: Option<Stage>, force: bool) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    let mut log = |m: &str| println!("{m}");
    if force && stage.is_none() {
        clear_checkpoints(&out)?;
    }
    let mut state = match stage {
        Some(Stage::Warmup) => TrainState::<T>::new(cfg)?,
        Some(s) => {
            let prev = Stage::ALL[s.index() - 1];
            let path = checkpoint_path(&out, prev);
            if !path.is_file() {
                bail!("stage {s} needs the {prev} checkpoint {}, which does not exist", path.display());
            }
            resume_from::<T>(&path, cfg)?
        }
        None => match latest_checkpoint(&out) {
            Some((s, path)) => {
                println!("resuming after {s} from {}", path.display());
                resume_from::<T>(&path, cfg)?
            }
            None => TrainState::<T>::new(cfg)?,
        },
    };
    let until = stage.unwrap_or(Stage::Tune2);
    run_pipeline(&mut state, data, Some(&out), until, &mut log)?;
    print!("{}", report_csv(&state.report));
    Ok(())
}

fn resume_from<T: Real>(path: &Path, cfg: &RunConfig) -> Result<TrainState<T>> {
    let mut state = TrainState::<T>::from_checkpoint(&Checkpoint::read(path)?)?;
    if state.config.model_config() != cfg.model_config() {
        bail!(
            "checkpoint {} was trained with a different model configuration (use --force to start over)",
            path.display()
        );
    }
    // schedules and paths may change between invocations; the model may not
    state.config = cfg.clone();
    Ok(state)
}

fn train(cfg: &RunConfig, stage: Option<&str>, force: bool) -> Result<()> {
    let stage = stage.map(Stage::parse).transpose()?;
    let data = load_data(cfg)?;
    match cfg.precision {
        Precision::F64 => train_typed::<f64>(cfg, &data, stage, force),
        Precision::F32 => train_typed::<f32>(cfg, &data, stage, force),
    }
}

fn checkpoint_for(cfg: &RunConfig, source: &Source) -> Result<PathBuf> {
    match &source.checkpoint {
        Some(p) => Ok(p.clone()),
        None => latest_checkpoint(Path::new(&cfg.out_dir))
            .map(|(_, p)| p)
            .ok_or_else(|| anyhow!("no checkpoint found in {}", cfg.out_dir)),
    }
}

fn load_model_state<T: Real>(path: &Path, cfg: &RunConfig) -> Result<TrainState<T>> {
    let state = TrainState::<T>::from_checkpoint(&Checkpoint::read(path)?)
        .with_context(|| format!("loading {}", path.display()))?;
    if state.config.num_classes != cfg.num_classes {
        bail!(
            "checkpoint {} has {} classes but the configuration has {}",
            path.display(),
            state.config.num_classes,
            cfg.num_classes
        );
    }
    Ok(state)
}

fn eval_typed<T: Real>(cfg: &RunConfig, source: &Source) -> Result<()> {
    let path = checkpoint_for(cfg, source)?;
    let state = load_model_state::<T>(&path, cfg)?;
    let split = Split::parse(&source.split)?;
    let samples: Vec<SegSample> = load_samples(cfg, split)?.into_iter().map(|(_, s)| s).collect();
    let metrics = evaluate(&state.model, &samples)?;
    let csv = metrics_csv(&metrics);
    fs::create_dir_all(&cfg.out_dir)?;
    let out = Path::new(&cfg.out_dir).join(format!("metrics_{}.csv", split.name()));
    fs::write(&out, &csv)?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, source: &Source) -> Result<()> {
    match cfg.precision {
        Precision::F64 => eval_typed::<f64>(cfg, source),
        Precision::F32 => eval_typed::<f32>(cfg, source),
    }
}

fn explain_typed<T: Real>(cfg: &RunConfig, source: &Source, images: &[usize], prototype: Option<usize>) -> Result<()> {
    let path = checkpoint_for(cfg, source)?;
    let state = load_model_state::<T>(&path, cfg)?;
    let split = Split::parse(&source.split)?;
    let samples = load_samples(cfg, split)?;
    if let Some(j) = prototype {
        let valid = state.model.prototypes.active_indices();
        if !valid.contains(&j) {
            bail!("prototype {j} is not an active prototype; valid ids: {valid:?}");
        }
    }
    for &id in images {
        let (_, sample) = samples
            .iter()
            .find(|(i, _)| *i == id)
            .ok_or_else(|| anyhow!("unknown {} image id {id}", split.name()))?;
        let dir = Path::new(&cfg.out_dir).join("explain").join(format!("{}_{id}", split.name()));
        let summary = export_explanations(&state.model, sample, id, &dir, prototype)?;
        for w in &summary.warnings {
            eprintln!("warning: {w}");
        }
        println!("wrote {} files to {}", summary.files.len(), dir.display());
    }
    Ok(())
}

fn explain(cfg: &RunConfig, source: &Source, images: &[usize], prototype: Option<usize>) -> Result<()> {
    match cfg.precision {
        Precision::F64 => explain_typed::<f64>(cfg, source, images, prototype),
        Precision::F32 => explain_typed::<f32>(cfg, source, images, prototype),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PROTOSEG_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow!("PROTOSEG_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| anyhow!("{e}"))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::GenData(c) => gen_data(&c.resolve(true)?, c.force),
        Command::Train { common, stage } => train(&common.resolve(false)?, stage.as_deref(), common.force),
        Command::Eval { common, source } => eval(&common.resolve(false)?, &source),
        Command::Explain {
            common,
            source,
            images,
            prototype,
        } => explain(&common.resolve(false)?, &source, &images, prototype),
        Command::Pipeline(c) => {
            let cfg = c.resolve(false)?;
            let root = Path::new(&cfg.data_dir);
            if c.force || !root.join("val").join("index.txt").is_file() {
                gen_data(&cfg, true)?;
            }
            train(&cfg, None, c.force)?;
            eval(
                &cfg,
                &Source {
                    checkpoint: None,
                    split: "val".into(),
                },
            )
        }
    }
}
