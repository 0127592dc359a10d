use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use clap::{Args, Parser, Subcommand, ValueEnum};

use fexgan::affect::{default_hybrids, AffectClass};
use fexgan::corpus::{gen_corpus, CorpusSpec};
use fexgan::eval::{self, NeutralSource};
use fexgan::trainer::{self, load_checkpoint, Checkpoint, TrainConfig, TrainingData};

use crate::service::{self, ServiceConfig, Snapshot, TransformRequest};

#[derive(Debug, Parser)]
#[command(name = "fexgan", version, about = "Facial expression generation: corpus, training, evaluation and serving")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic face corpus.
    GenCorpus(GenCorpusArgs),
    /// Train from a TOML config.
    Train(TrainArgs),
    /// Write evaluation tables and grids for a checkpoint.
    Eval(EvalArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
    /// Transform one image file.
    Transform(TransformArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = CorpusSpec::DESK.n_identities)]
    pub identities: u32,
    #[arg(long, default_value_t = CorpusSpec::DESK.frames_per_pair)]
    pub frames: u32,
    #[arg(long, default_value_t = CorpusSpec::DESK.image_size)]
    pub size: u32,
    #[arg(long, default_value_t = CorpusSpec::DESK.corpus_seed)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print a progress line every N steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    Table,
    Random,
    Transform,
    Hybrid,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub kind: EvalKind,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corpus root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Cells in the random grid.
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Request body limit in bytes.
    #[arg(long, default_value_t = 8 << 20)]
    pub max_body: usize,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    /// Directory served under /ui.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target affect, or a blend such as `anger:0.5,sadness:0.5`.
    #[arg(long)]
    pub affect: String,
    #[arg(long, default_value = "neutral")]
    pub source_affect: String,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub lambda: f64,
    /// Sample latent noise from this seed instead of using the mean.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Transform(a) => transform_cmd(a),
    }
}

fn gen_corpus_cmd(a: GenCorpusArgs) -> Result<()> {
    let spec = CorpusSpec {
        n_identities: a.identities,
        frames_per_pair: a.frames,
        image_size: a.size,
        corpus_seed: a.seed,
    };
    let manifest = gen_corpus(&spec, &a.out).with_context(|| format!("generating corpus in {}", a.out.display()))?;
    println!("wrote {} images to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let every = a.log_every;
    let ckpt = trainer::train(&config, a.resume.as_deref(), |m| {
        if every > 0 && m.step % every == 0 {
            let l = &m.losses;
            eprintln!(
                "step {:>7}  gen {:.4} (adv {:.4} rec {:.4} kl {:.4})  disc {:.4}",
                m.step, l.gen_total, l.gen_adv, l.reconst, l.kl, l.disc_total
            );
        }
    })?;
    println!(
        "finished at step {}; outputs in {}",
        ckpt.state.step,
        config.output_dir.display()
    );
    Ok(())
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn training_data(ckpt: &Checkpoint, corpus: Option<&Path>) -> Result<TrainingData> {
    let mut config = ckpt.config.clone();
    if let Some(root) = corpus {
        config.corpus_root = root.to_owned();
    }
    TrainingData::load(&config).with_context(|| format!("loading corpus {}", config.corpus_root.display()))
}

/// First neutral frame per identity, preferring the validation split.
fn sources(data: &TrainingData) -> Result<Vec<NeutralSource>> {
    let ids: Vec<u32> = data
        .dataset
        .records
        .iter()
        .map(|r| r.identity_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.iter()
        .map(|&id| {
            eval::neutral_sources(&data.dataset, &data.val, &[id])
                .or_else(|_| eval::neutral_sources(&data.dataset, &data.train, &[id]))
                .map(|mut v| v.remove(0))
                .map_err(Into::into)
        })
        .collect()
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = load(&a.ckpt)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let wants = |k: EvalKind| a.kind == k || a.kind == EvalKind::All;
    let generator = &ckpt.models.generator;

    if wants(EvalKind::Random) {
        let path = a.out.join("random.png");
        eval::random_grid(generator, a.samples, a.seed, &path)?;
        println!("wrote {}", path.display());
    }
    if !(wants(EvalKind::Table) || wants(EvalKind::Transform) || wants(EvalKind::Hybrid)) {
        return Ok(());
    }
    let data = training_data(&ckpt, a.corpus.as_deref())?;
    if wants(EvalKind::Table) {
        let table = eval::accuracy_table(generator, &ckpt.models.discriminator, &data.dataset, &data.train, &data.val, a.seed)?;
        let path = a.out.join("accuracy.csv");
        std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        print!("{}", table.to_csv());
    }
    let srcs = sources(&data)?;
    if wants(EvalKind::Transform) {
        let path = a.out.join("transform.png");
        let cells = eval::transform_grid(generator, &srcs, &path)?;
        let agreement = eval::affect_agreement(&ckpt.models.discriminator, &cells, &eval::transform_labels(srcs.len()))?;
        println!("wrote {} (discriminator agreement {agreement:.3})", path.display());
    }
    if wants(EvalKind::Hybrid) {
        let path = a.out.join("hybrid.png");
        eval::hybrid_grid(generator, &srcs, &default_hybrids(), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        bind: a.bind,
        checkpoint: a.ckpt,
        corpus_root: a.corpus,
        max_body_bytes: a.max_body,
        request_timeout: Duration::from_secs(a.timeout_secs),
        static_dir: a.static_dir,
    };
    tokio::runtime::Runtime::new()?.block_on(service::serve(config))
}

/// `joy` or `anger:0.5,sadness:0.5`.
pub fn parse_blend(text: &str) -> Result<std::collections::BTreeMap<String, f64>> {
    let mut out = std::collections::BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, weight) = match part.split_once(':') {
            Some((n, w)) => (n.trim(), w.trim().parse::<f64>().with_context(|| format!("weight in `{part}`"))?),
            None => (part, 1.0),
        };
        if out.insert(name.to_string(), weight).is_some() {
            bail!("affect `{name}` appears twice");
        }
    }
    if out.is_empty() {
        bail!("empty affect specification");
    }
    Ok(out)
}

fn transform_cmd(a: TransformArgs) -> Result<()> {
    let ckpt = load(&a.ckpt)?;
    let snap = Arc::new(Snapshot {
        generator: ckpt.models.generator,
        step: ckpt.state.step,
        identities: Vec::new(),
    });
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let req = TransformRequest {
        image: BASE64.encode(bytes),
        source_affect: a.source_affect.parse::<AffectClass>()?.name().into(),
        blend: parse_blend(&a.affect)?,
        lambda: a.lambda,
        deterministic: a.seed.is_none(),
        seed: a.seed.unwrap_or(0),
    };
    let png = service::run_transform(&snap, &req).map_err(|e| anyhow::anyhow!("{}", e.detail()))?;
    std::fs::write(&a.out, BASE64.decode(png)?).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
