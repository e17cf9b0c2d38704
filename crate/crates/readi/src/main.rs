use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use readi::bench::switch_vs_reload;
use readi::config::{Config, Pipeline};
use readi::error::{Error, Result, StageExt};
use readi::experiment::{self, materialize, train_base};
use readi::io::{load_dataset, load_model, load_variant, save_dataset, save_model, save_variant};
use readi::report::{Report, Table};
use readi::row;
use readi::store::{StoreConfig, VariantStore};
use readi::storedir::StoreDir;
use readi_core::adapt::{adapt, install_sites, AdaptConfig, Scope, TrainablePolicy};
use readi_core::contrastive::{contrastive_pretrain, LossForm};
use readi_core::distort::{apply_all, DistortionSpec};
use readi_core::model::{eigen_energy_profile, FusionModel};
use readi_core::synth::generate_dataset;
use readi_core::train::evaluate;
use readi_core::variant::{InterpolationMode, KeyEncoder, VariationKey};

#[derive(Parser)]
#[command(name = "readi", version, about = "Variation-aware adaptation for a camera + lidar fusion detector")]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for CSV/JSON results.
    #[arg(long, default_value = "results")]
    results: PathBuf,
}

impl Common {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(p) => Config::load(p),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Datagen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Apply sensor distortions to a dataset.
    Simulate {
        #[arg(long, default_value_t = 0.0)]
        fog: f32,
        #[arg(long, default_value_t = 0.0)]
        snow: f32,
        #[arg(long, default_value_t = 1)]
        blur: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the base detector.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive missing-modality pretraining of a trained model.
    ContrastivePretrain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drop_p: Option<f64>,
        /// `standard` or `literal`.
        #[arg(long)]
        form: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a model to distorted data and write the variant delta.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variation key such as e0.b0.f2.s0.m11.
        #[arg(long, conflicts_with = "calibrate")]
        key: Option<String>,
        /// Clean dataset to calibrate the key encoder; the key is then
        /// derived from the adaptation data.
        #[arg(long)]
        calibrate: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        no_lora: bool,
        #[arg(long)]
        no_adapter: bool,
        /// heads_only, heads_bn, heads_bn_injected or all.
        #[arg(long)]
        policy: Option<String>,
        /// all, camera or lidar.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Evaluate before and after on this dataset.
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// mAP of a model, and of the model with each given variant applied.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time variant switches against full checkpoint reloads.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        variants: Vec<PathBuf>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Eigenvalue energy profile of one camera attention head.
    Eigen {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        block: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run a named experiment pipeline end to end.
    Experiment {
        #[arg(long)]
        pipeline: Option<String>,
        /// Cache file for the trained base model.
        #[arg(long)]
        base_model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Manage a variant store directory.
    Variant {
        /// Store directory.
        #[arg(long)]
        dir: PathBuf,
        #[command(subcommand)]
        cmd: VariantCmd,
    },
}

#[derive(Subcommand)]
enum VariantCmd {
    /// Add a variant file. `--base` creates the store on first use.
    Register {
        variant: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    Activate {
        key: String,
    },
    /// Blend a camera-domain and a lidar-domain variant.
    Interpolate {
        #[arg(long)]
        camera: String,
        #[arg(long)]
        lidar: String,
        #[arg(long, default_value_t = 0.5)]
        lambda_c: f64,
        /// Leave layers tuned by both at their base values.
        #[arg(long)]
        exclusive_only: bool,
    },
    /// Zero small frozen base weights.
    Prune {
        #[arg(long, default_value_t = 1e-3)]
        threshold: f32,
    },
    Report {
        #[arg(long, default_value = "results")]
        results: PathBuf,
    },
}

fn report(name: &str, cfg: &impl serde::Serialize, seed: u64, tables: Vec<Table>) -> Result<Report> {
    Ok(Report { pipeline: name.to_string(), seed, config: serde_json::to_value(cfg)?, tables })
}

fn emit(r: &Report, dir: &Path) -> Result<()> {
    for p in r.write(dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn model_of(cfg: &readi_core::model::ModelConfig) -> Result<FusionModel> {
    Ok(FusionModel::new(cfg.clone())?)
}

fn map_table(name: &str, r: &readi_core::metrics::MapReport, maps: &mut Table, aps: &mut Table) {
    maps.push(row![name, r.map]);
    for (class, t, ap) in &r.cells {
        aps.push(row![name, class.name(), *t, *ap]);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Datagen { n, seed, out, config } => {
            let cfg = match config {
                Some(p) => Config::load(&p)?,
                None => Config::default(),
            };
            let data = generate_dataset(&cfg.data.scene, n, seed).stage("datagen")?;
            save_dataset(&out, &data)?;
            println!("wrote {} scenes to {}", data.len(), out.display());
        }
        Cmd::Simulate { fog, snow, blur, gamma, seed, input, out, config } => {
            let cfg = match config {
                Some(p) => Config::load(&p)?,
                None => Config::default(),
            };
            let spec = DistortionSpec { fog, snow, blur, gamma, seed };
            spec.validate()?;
            let data = load_dataset(&input)?;
            let distorted = apply_all(&data, &spec, cfg.data.scene.origin).stage("simulate")?;
            save_dataset(&out, &distorted)?;
            println!("wrote {} scenes to {}", distorted.len(), out.display());
        }
        Cmd::TrainBase { data, out, epochs, seed, common } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.base.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let model = model_of(&cfg.model)?;
            let data = load_dataset(&data)?;
            let (store, curve) = train_base(&model, &data, &cfg).stage("train-base")?;
            save_model(&out, &cfg.model, &store)?;
            let mut t = Table::new("curve", &["epoch", "loss", "trainable_fraction"]);
            for e in &curve {
                t.push(row![e.epoch, e.loss, e.trainable_fraction]);
            }
            emit(&report("train_base", &cfg, cfg.seed, vec![t])?, &common.results)?;
        }
        Cmd::ContrastivePretrain { model, data, out, drop_p, form, epochs, common } => {
            let cfg = common.load()?;
            let mut ccfg = cfg.contrastive.clone();
            if let Some(p) = drop_p {
                ccfg.drop_p = p;
            }
            if let Some(f) = form {
                ccfg.form = LossForm::parse(&f)?;
            }
            if let Some(e) = epochs {
                ccfg.train.epochs = e;
            }
            let (mcfg, mut store) = load_model(&model)?;
            let net = model_of(&mcfg)?;
            let data = load_dataset(&data)?;
            let curve = contrastive_pretrain(&net, &mut store, &data, &ccfg, |e| {
                log::info!("contrastive epoch {} loss {:.4}", e.epoch, e.loss)
            })
            .stage("contrastive-pretrain")?;
            save_model(&out, &mcfg, &store)?;
            let mut t = Table::new("curve", &["epoch", "loss", "pos_sim", "neg_sim"]);
            for e in &curve {
                t.push(row![e.epoch, e.loss, e.pos_sim, e.neg_sim]);
            }
            emit(&report("contrastive_pretrain", &ccfg, ccfg.train.seed, vec![t])?, &common.results)?;
        }
        Cmd::Adapt { model, data, out, key, calibrate, k, r, no_lora, no_adapter, policy, scope, epochs, test, common } => {
            let cfg = common.load()?;
            let mut acfg = cfg.adapt.clone();
            if k.is_some() {
                acfg.k = k;
            }
            if r.is_some() {
                acfg.r = r;
            }
            if no_lora {
                acfg.k = None;
            }
            if no_adapter {
                acfg.r = None;
            }
            if let Some(p) = policy {
                acfg.policy = TrainablePolicy::parse(&p)?;
            }
            if let Some(s) = scope {
                acfg.scope = Scope::parse(&s)?;
            }
            if let Some(e) = epochs {
                acfg.train.epochs = e;
            }
            let (mcfg, base) = load_model(&model)?;
            let net = model_of(&mcfg)?;
            let data = load_dataset(&data)?;
            let key: VariationKey = match (key, calibrate) {
                (Some(k), _) => k.parse()?,
                (None, Some(clean)) => {
                    KeyEncoder::calibrate(&load_dataset(&clean)?)?.dominant(&data)
                }
                (None, None) => return Err(Error::Config("adapt needs --key or --calibrate".into())),
            };
            let adapted = adapt(&net, &base, &data, key, &acfg, |e| log::info!("adapt epoch {} loss {:.4}", e.epoch, e.loss)).stage("adapt")?;
            save_variant(&out, &adapted.delta)?;
            let mut curve = Table::new("curve", &["epoch", "loss", "trainable_fraction"]);
            for e in &adapted.curve {
                curve.push(row![e.epoch, e.loss, e.trainable_fraction]);
            }
            let mut summary = Table::new("summary", &["metric", "value"]);
            summary.push(row!["key", key.to_string()]);
            summary.push(row!["delta_params", adapted.delta.numel()]);
            summary.push(row!["delta_fraction", adapted.delta.numel() as f64 / base.base_numel() as f64]);
            if let Some(t) = test {
                let t = load_dataset(&t)?;
                summary.push(row!["map_before", evaluate(&net, &base, &t, &cfg.matching).stage("eval")?.map]);
                summary.push(row!["map_after", evaluate(&net, &adapted.store, &t, &cfg.matching).stage("eval")?.map]);
            }
            emit(&report("adapt", &acfg, acfg.train.seed, vec![curve, summary])?, &common.results)?;
        }
        Cmd::Eval { model, data, variant, common } => {
            let cfg = common.load()?;
            let (mcfg, base) = load_model(&model)?;
            let net = model_of(&mcfg)?;
            let data = load_dataset(&data)?;
            let mut maps = Table::new("map", &["model", "map"]);
            let mut aps = Table::new("ap", &["model", "class", "threshold", "ap"]);
            map_table("base", &evaluate(&net, &base, &data, &cfg.matching).stage("eval base")?, &mut maps, &mut aps);
            for v in &variant {
                let delta = load_variant(v)?;
                let store = materialize(&base, &delta)?;
                let r = evaluate(&net, &store, &data, &cfg.matching).stage(&format!("eval {}", v.display()))?;
                map_table(&delta.key.to_string(), &r, &mut maps, &mut aps);
            }
            for row in &maps.rows {
                println!("{} mAP {}", row[0], row[1]);
            }
            emit(&report("eval", &cfg.matching, cfg.seed, vec![maps, aps])?, &common.results)?;
        }
        Cmd::Bench { model, variants, trials, seed, common } => {
            let cfg = common.load()?;
            let (mcfg, mut base) = load_model(&model)?;
            install_sites(&model_of(&mcfg)?, &mut base, &AdaptConfig { scope: Scope::All, ..cfg.adapt.clone() })?;
            let store = VariantStore::new(base, StoreConfig { budget: None, ..cfg.store.clone() });
            for v in &variants {
                store.register(load_variant(v)?).stage(&format!("register {}", v.display()))?;
            }
            let b = switch_vs_reload(&store, &model, trials, seed).stage("bench")?;
            println!(
                "switch p90 {:.1} us, reload p90 {:.1} us, ratio {:.1}; memory {} B vs {} B",
                b.switch.p90_us,
                b.reload.p90_us,
                b.p90_ratio,
                b.memory.total_bytes(),
                b.full_models_bytes
            );
            let mut r = report("bench", &b.env, seed, b.tables())?;
            r.config = serde_json::json!({ "env": b.env, "memory": b.memory, "switch": b.switch, "reload": b.reload });
            emit(&r, &common.results)?;
        }
        Cmd::Eigen { model, data, sample, block, head, common } => {
            let cfg = common.load()?;
            let (mcfg, base) = load_model(&model)?;
            let net = model_of(&mcfg)?;
            let data = load_dataset(&data)?;
            let s = data.get(sample).ok_or_else(|| Error::Config(format!("sample {sample} out of range ({} scenes)", data.len())))?;
            if head >= mcfg.heads {
                return Err(Error::Config(format!("head {head} out of range ({} heads)", mcfg.heads)));
            }
            let layer = net.attention_layer(&base, block)?;
            let x = net.attention_inputs(&base, s).stage("eigen")?.swap_remove(block);
            let p = eigen_energy_profile(&x, &layer, head).stage("eigen")?;
            let mut curve = Table::new("profile", &["index", "magnitude", "cumulative"]);
            for (i, (m, c)) in p.magnitudes.iter().zip(&p.cumulative).enumerate() {
                curve.push(row![i + 1, *m, *c]);
            }
            let mut summary = Table::new("summary", &["metric", "value"]);
            summary.push(row!["tokens", p.magnitudes.len()]);
            summary.push(row!["numerical_rank", p.numerical_rank(cfg.eigen.rank_tol)]);
            summary.push(row!["count_for_share", p.count_for_share(cfg.eigen.energy_share)]);
            summary.push(row!["top3pct_share", experiment::top_share(&p, 0.03)]);
            summary.push(row!["symmetrized", p.symmetrized]);
            let echo = serde_json::json!({ "sample": sample, "block": block, "head": head, "eigen": cfg.eigen });
            emit(&report("eigen", &echo, cfg.seed, vec![curve, summary])?, &common.results)?;
        }
        Cmd::Experiment { pipeline, base_model, common } => {
            let mut cfg = common.load()?;
            if let Some(p) = pipeline {
                cfg.pipeline = Some(Pipeline::parse(&p)?);
            }
            if base_model.is_some() {
                cfg.base_model = base_model;
            }
            let r = experiment::run(&cfg)?;
            emit(&r, &common.results)?;
        }
        Cmd::Variant { dir, cmd } => variant(&dir, cmd)?,
    }
    Ok(())
}

fn variant(dir: &Path, cmd: VariantCmd) -> Result<()> {
    match cmd {
        VariantCmd::Register { variant, base, config } => {
            let mut store = match (StoreDir::exists(dir), base) {
                (true, None) => StoreDir::open(dir)?,
                (true, Some(_)) => return Err(Error::Config(format!("{} already holds a store; drop --base", dir.display()))),
                (false, Some(model)) => {
                    let cfg = match config {
                        Some(p) => Config::load(&p)?,
                        None => Config::default(),
                    };
                    StoreDir::create(dir, &model, &cfg.adapt, cfg.store)?
                }
                (false, None) => return Err(Error::Config(format!("{} has no store; pass --base to create one", dir.display()))),
            };
            let key = store.register(&variant)?;
            println!("registered {key}");
        }
        VariantCmd::Activate { key } => match StoreDir::open(dir)?.activate(&key)? {
            Some(k) => println!("active {k}"),
            None => println!("active base"),
        },
        VariantCmd::Interpolate { camera, lidar, lambda_c, exclusive_only } => {
            let mode = if exclusive_only { InterpolationMode::ExclusiveOnly } else { InterpolationMode::Weighted };
            let key = StoreDir::open(dir)?.interpolate(&camera, &lidar, lambda_c, mode)?;
            println!("registered {key}");
        }
        VariantCmd::Prune { threshold } => {
            let r = StoreDir::open(dir)?.prune(threshold)?;
            println!("pruned {} of {} frozen weights ({:.4})", r.pruned, r.frozen_total, r.fraction);
        }
        VariantCmd::Report { results } => {
            let store = StoreDir::open(dir)?;
            let tables = store.report()?;
            emit(&report("variant_report", &store.manifest, 0, tables)?, &results)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
