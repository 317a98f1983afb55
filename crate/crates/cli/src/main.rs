mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use basetx_core::encoder::{FrozenEncoder, Provenance};
use basetx_core::episodes::{synth_dataset, Split, SplitDataset};
use basetx_core::evalrig::{
    evaluate, export_attention, shot_sweep, write_sweep, EvalConfig, EvalModel, FeatureCache, Method,
};
use basetx_core::membank::{build_bank, MemoryBank};
use basetx_core::query::{OraclePrototypes, QueryMode, Querier, SemanticSource, SimilarityMatrix};
use basetx_core::trainer::{meta_train, oracle_prototypes, pretrain, write_log, MetaInputs, MetaModel};
use basetx_core::{Error, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "basetx", version, about = "Few-shot classification with base-feature attention")]
struct Cli {
    /// JSON run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. --set meta.lr=0.01 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset directory (paths.data).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Evaluation worker threads (eval.workers).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic compositional dataset and its similarity matrix.
    Synth,
    /// Train φ₀ on the base split.
    Pretrain,
    /// Memory bank operations.
    Bank {
        #[command(subcommand)]
        action: BankAction,
    },
    /// Class prototypes from an encoder pretrained on base and novel classes.
    Oracle,
    /// Episodic training of encoder and transformer.
    Metatrain,
    /// Evaluate on novel-split tasks.
    Eval {
        /// eval.method
        #[arg(long, value_parser = parse_method)]
        mode: Option<Method>,
        /// eval.tasks
        #[arg(long)]
        tasks: Option<usize>,
        /// eval.shot
        #[arg(long)]
        shot: Option<usize>,
        /// eval.query_mode
        #[arg(long, value_parser = parse_query)]
        query: Option<QueryMode>,
    },
    /// Accuracy of eval.method and ProtoNet over a range of shots.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 3, 4, 5])]
        shots: Vec<usize>,
    },
    /// Export attention heatmaps for one novel support instance.
    Attnmap {
        /// Novel class label; the first novel class by default.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand, Debug)]
enum BankAction {
    /// Encode base instances with φ₀.
    Build,
}

#[derive(Subcommand, Debug)]
enum ConfigAction {
    /// Print the fully defaulted configuration.
    Dump,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_query(s: &str) -> std::result::Result<QueryMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn artifact(&self, set: &Option<PathBuf>, name: &str) -> PathBuf {
        set.clone().unwrap_or_else(|| self.out.join(name))
    }

    fn data_dir(&self) -> PathBuf {
        self.artifact(&self.cfg.paths.data, "data")
    }

    fn dataset(&self) -> Result<SplitDataset> {
        SplitDataset::load_dir(&self.data_dir())
    }

    fn phi0(&self) -> Result<FrozenEncoder> {
        FrozenEncoder::load(self.cfg.encoder.clone(), &self.artifact(&self.cfg.paths.phi0, "phi0.btwt"))
    }

    fn bank(&self, phi0: &FrozenEncoder) -> Result<MemoryBank> {
        MemoryBank::load(&self.artifact(&self.cfg.paths.bank, "bank.btwt"), Some(phi0))
    }

    fn model(&self) -> Result<MetaModel> {
        MetaModel::load(
            &self.artifact(&self.cfg.paths.checkpoint, "checkpoint.btwt"),
            self.cfg.encoder.clone(),
            self.cfg.meta.transformer.clone(),
        )
    }

    fn semantic(&self) -> Result<Option<SemanticSource>> {
        let path = match &self.cfg.paths.semantic {
            Some(p) => p.clone(),
            None => self.data_dir().join("similarity.json"),
        };
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(SemanticSource::Matrix(SimilarityMatrix::load(&path)?)))
    }

    fn oracle(&self) -> Result<Option<OraclePrototypes>> {
        let p = self.artifact(&self.cfg.paths.oracle, "oracle.json");
        if self.cfg.paths.oracle.is_none() && !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    fn mkdir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let out = synth_dataset(&ctx.cfg.synth)?;
    let dir = ctx.data_dir();
    out.dataset.save_dir(&dir)?;
    out.similarity.save(&dir.join("similarity.json"))?;
    write_json(&dir.join("recipes.json"), &out.recipes)?;
    println!("wrote dataset to {}", dir.display());
    Ok(())
}

fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let outcome = pretrain(&ds, &ctx.cfg.encoder, &ctx.cfg.pretrain)?;
    ctx.mkdir()?;
    outcome.encoder.save(&ctx.out.join("phi0.btwt"))?;
    write_log(&ctx.out.join("pretrain_log.ndjson"), &outcome.log)?;
    match outcome.best_val {
        Some(v) => println!("pretrained; best val accuracy {v:.2}%"),
        None => println!("pretrained"),
    }
    Ok(())
}

fn cmd_bank(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let phi0 = ctx.phi0()?;
    let bank = build_bank(&ds, &phi0, ctx.cfg.bank.per_class_cap, ctx.cfg.seed)?;
    ctx.mkdir()?;
    bank.save(&ctx.out.join("bank.btwt"))?;
    println!("bank: {} classes, fingerprint {}", bank.num_classes(), bank.fingerprint());
    Ok(())
}

fn cmd_oracle(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let oracle = oracle_prototypes(&ds, &ctx.cfg.encoder, &ctx.cfg.pretrain)?;
    ctx.mkdir()?;
    write_json(&ctx.out.join("oracle.json"), &oracle)?;
    println!("oracle prototypes for {} classes", oracle.labels.len());
    Ok(())
}

fn cmd_metatrain(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let phi0 = ctx.phi0()?;
    let bank = ctx.bank(&phi0)?;
    let semantic = ctx.semantic()?;
    let oracle = ctx.oracle()?;
    let inputs = MetaInputs {
        dataset: &ds,
        phi0: &phi0,
        bank: &bank,
        semantic: semantic.as_ref(),
        oracle: oracle.as_ref(),
    };
    let outcome = meta_train(&inputs, &ctx.cfg.meta)?;
    ctx.mkdir()?;
    outcome.model.save(&ctx.out.join("checkpoint.btwt"), basetx_core::ndkernel::checkpoint::Dtype::F64)?;
    write_log(&ctx.out.join("meta_log.ndjson"), &outcome.log)?;
    write_json(&ctx.out.join("fetch_audit.json"), &outcome.audit)?;
    println!(
        "meta-trained; {} bank fetches, {} same-class instances",
        outcome.audit.fetches, outcome.audit.same_class
    );
    Ok(())
}

/// Loaded artifacts for evaluating one method.
struct Evaluated {
    features: FeatureCache,
    phi0_features: Option<FeatureCache>,
    model: Option<MetaModel>,
    bank: Option<MemoryBank>,
    semantic: Option<SemanticSource>,
    oracle: Option<OraclePrototypes>,
}

impl Evaluated {
    fn load(ctx: &Ctx, ds: &SplitDataset, method: Method) -> Result<Self> {
        let phi0 = ctx.phi0()?;
        if method == Method::Protonet {
            return Ok(Evaluated {
                features: FeatureCache::encode_frozen(ds, Split::Novel, &phi0)?,
                phi0_features: None,
                model: None,
                bank: None,
                semantic: None,
                oracle: None,
            });
        }
        let model = ctx.model()?;
        let visual = ctx.cfg.eval.query_mode == QueryMode::Visual;
        Ok(Evaluated {
            features: FeatureCache::encode(ds, Split::Novel, &model.encoder)?,
            phi0_features: if visual {
                Some(FeatureCache::encode_frozen(ds, Split::Novel, &phi0)?)
            } else {
                None
            },
            bank: if method == Method::Bt { Some(ctx.bank(&phi0)?) } else { None },
            model: Some(model),
            semantic: ctx.semantic()?,
            oracle: ctx.oracle()?,
        })
    }

    fn view(&self) -> EvalModel<'_> {
        EvalModel {
            features: &self.features,
            phi0: self.phi0_features.as_ref(),
            transformer: self.model.as_ref().map(|m| &m.transformer),
            bank: self.bank.as_ref(),
            semantic: self.semantic.as_ref(),
            oracle: self.oracle.as_ref(),
        }
    }
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let cfg: &EvalConfig = &ctx.cfg.eval;
    let loaded = Evaluated::load(ctx, &ds, cfg.method)?;
    let report = evaluate(&ds, &loaded.view(), cfg)?;
    ctx.mkdir()?;
    report.save(&ctx.out.join("report.json"))?;
    println!(
        "{} {}-way {}-shot: {:.2}% ± {:.2}% over {} tasks",
        cfg.method.name(),
        cfg.way,
        cfg.shot,
        report.mean_accuracy,
        report.ci95_halfwidth,
        report.tasks
    );
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, shots: &[usize]) -> Result<()> {
    let ds = ctx.dataset()?;
    let cfg = &ctx.cfg.eval;
    let mut methods = vec![cfg.method];
    if cfg.method != Method::Protonet {
        methods.push(Method::Protonet);
    }
    let loaded: Vec<Evaluated> = methods
        .iter()
        .map(|&m| Evaluated::load(ctx, &ds, m))
        .collect::<Result<_>>()?;
    let models: Vec<(Method, EvalModel)> = methods.iter().copied().zip(loaded.iter().map(Evaluated::view)).collect();
    let rows = shot_sweep(&ds, &models, cfg, shots)?;
    ctx.mkdir()?;
    write_sweep(&rows, &ctx.out.join("sweep.csv"), &ctx.out.join("sweep.json"))?;
    print!("{}", basetx_core::evalrig::sweep_csv(&rows));
    Ok(())
}

fn cmd_attnmap(ctx: &Ctx, class: Option<&str>, instance: usize) -> Result<()> {
    let ds = ctx.dataset()?;
    let phi0 = ctx.phi0()?;
    let bank = ctx.bank(&phi0)?;
    let model = ctx.model()?;
    let label = match class {
        Some(l) => l.to_string(),
        None => ds
            .novel()
            .first()
            .map(|c| c.label.clone())
            .ok_or_else(|| Error::InsufficientData("novel split is empty".into()))?,
    };
    let class_images = ds
        .novel()
        .iter()
        .find(|c| c.label == label)
        .ok_or_else(|| Error::UnknownLabel {
            label: label.clone(),
            known: ds.novel().len(),
        })?;
    let image = ds.stack(class_images, &[instance])?;
    let support = model.encoder.encode(&image, Provenance::TrainablePhi)?.remove(0);
    let semantic = ctx.semantic()?;
    let oracle = ctx.oracle()?;
    let eval = &ctx.cfg.eval;
    let querier = Querier::new(eval.query_mode, eval.top_c, &bank, semantic.as_ref(), oracle.as_ref())?;
    let phi0_map = phi0.encode(&image)?.remove(0);
    let top = querier.top(&label, Some(&phi0_map), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let picks = bank.fetch(&top, eval.k_total, None, &mut rng)?;
    let bases: Vec<_> = picks.iter().map(|&p| bank.map(p)).collect();
    let labels: Vec<String> = picks.iter().map(|&(c, _)| bank.labels()[c].clone()).collect();
    let dir = ctx.out.join("attention");
    let (_, files) = export_attention(&model.transformer, &support, &bases, &labels, ds.image_size(), &dir)?;
    println!("wrote {} heatmaps to {}", files.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(d) = &cli.data {
        cfg.paths.data = Some(d.clone());
    }
    if let Some(w) = cli.workers {
        cfg.eval.workers = w;
    }
    if let Command::Eval { mode, tasks, shot, query } = &cli.command {
        if let Some(m) = mode {
            cfg.eval.method = *m;
        }
        if let Some(t) = tasks {
            cfg.eval.tasks = *t;
        }
        if let Some(s) = shot {
            cfg.eval.shot = *s;
        }
        if let Some(q) = query {
            cfg.eval.query_mode = *q;
        }
    }
    for s in &cli.set {
        cfg.set(s)?;
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, out: cli.out };
    match &cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Bank { action: BankAction::Build } => cmd_bank(&ctx),
        Command::Oracle => cmd_oracle(&ctx),
        Command::Metatrain => cmd_metatrain(&ctx),
        Command::Eval { .. } => cmd_eval(&ctx),
        Command::Sweep { shots } => cmd_sweep(&ctx, shots),
        Command::Attnmap { class, instance } => cmd_attnmap(&ctx, class.as_deref(), *instance),
        Command::Config { action: ConfigAction::Dump } => {
            println!("{}", serde_json::to_string_pretty(&ctx.cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
