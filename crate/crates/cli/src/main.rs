use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use uch_core::data::{self, LabelMatrix, PairedDataset, SplitTag, SyntheticSpec};
use uch_core::gradcheck::{self, GradcheckConfig};
use uch_core::losses::LossWeights;
use uch_core::networks::{Direction, NetworkBundle, NetworkDims};
use uch_core::retrieval::{self, CodeMatrix, EvalSet};
use uch_core::trainer::{self, CodeSource, Optimizer, TrainConfig};

/// Coupled-cycle adversarial cross-modal hashing.
#[derive(Parser)]
#[command(name = "uch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clustered synthetic paired dataset.
    Synth(SynthArgs),
    /// Train a network bundle.
    Train(TrainArgs),
    /// Compute binary codes with a trained checkpoint.
    Encode(EncodeArgs),
    /// Score query codes against database codes.
    Eval(EvalArgs),
    /// Check every loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 250)]
    pairs_per_cluster: usize,
    #[arg(long, default_value_t = 64)]
    dimg: usize,
    #[arg(long, default_value_t = 32)]
    dtxt: usize,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Fraction of pairs whose text comes from another cluster.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving images.feat, texts.feat and labels.lab.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    texts: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Items held out as queries; the rest form the retrieval/training set.
    #[arg(long, default_value_t = 0)]
    query_count: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_image: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr_text: f64,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "on")]
    gen_adv: OnOff,
    #[arg(long, value_enum, default_value = "sgd-momentum")]
    optimizer: OptimizerArg,
    /// Width of the text embedding layer.
    #[arg(long, default_value_t = 300)]
    embed_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    w_adv: f64,
    #[arg(long, default_value_t = 1.0)]
    w_rec: f64,
    #[arg(long, default_value_t = 1.0)]
    w_sim: f64,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    log: PathBuf,
    /// Paired codes of the training set.
    #[arg(long)]
    codes: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    All,
    Query,
    Retrieval,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Paired,
    Image,
    Text,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    subset: Subset,
    #[arg(long, value_enum, default_value = "paired")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    ImageToText,
    TextToImage,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    database: PathBuf,
    /// Labels of the full dataset the codes were computed from.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0)]
    query_count: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, value_enum, default_value = "query")]
    query_subset: Subset,
    #[arg(long, value_enum, default_value = "retrieval")]
    database_subset: Subset,
    #[arg(long, value_enum)]
    direction: DirectionArg,
    /// Cutoffs for precision@N; defaults to min(1000, database size).
    #[arg(long, value_delimiter = ',')]
    at: Vec<usize>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    dimg: usize,
    #[arg(long, default_value_t = 12)]
    dtxt: usize,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Sampled coordinates per parameter tensor.
    #[arg(long, default_value_t = 3)]
    samples: usize,
    #[arg(long, hide = true)]
    corrupt_adjoint: Option<f64>,
}

fn subset_indices(tags: &[SplitTag], subset: Subset) -> Vec<usize> {
    (0..tags.len())
        .filter(|&i| match subset {
            Subset::All => true,
            Subset::Query => tags[i] == SplitTag::Query,
            Subset::Retrieval => tags[i] == SplitTag::Retrieval,
        })
        .collect()
}

fn load(args: &DatasetArgs) -> anyhow::Result<PairedDataset> {
    let loaded = data::load_dataset(&args.images, &args.texts, args.labels.as_deref())?;
    if !loaded.pruned.is_empty() {
        eprintln!("dropped {} items without labels", loaded.pruned.len());
    }
    Ok(loaded.dataset.split(args.query_count, args.split_seed)?)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        clusters: a.clusters,
        pairs_per_cluster: a.pairs_per_cluster,
        image_dim: a.dimg,
        text_dim: a.dtxt,
        noise: a.sigma,
        misalignment: a.rho,
        seed: a.seed,
    };
    let generated = data::generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let labels = a.out_dir.join("labels.lab");
    generated.dataset.save(
        &a.out_dir.join("images.feat"),
        &a.out_dir.join("texts.feat"),
        Some(&labels),
    )?;
    println!(
        "wrote {} pairs to {}",
        generated.dataset.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let dataset = load(&a.data)?;
    let train_set = dataset.subset(&dataset.indices_tagged(SplitTag::Retrieval));
    let config = TrainConfig {
        code_bits: a.k,
        batch_size: a.batch,
        max_iters: a.iters,
        lr_image: a.lr_image,
        lr_text: a.lr_text,
        weight_decay: a.weight_decay,
        seed: a.seed,
        gen_adv: matches!(a.gen_adv, OnOff::On),
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::SgdMomentum => Optimizer::SgdMomentum,
            OptimizerArg::Adam => Optimizer::Adam,
        },
        weights: LossWeights {
            adversarial: a.w_adv,
            reconstruction: a.w_rec,
            similarity: a.w_sim,
        },
        text_embed_dim: a.embed_dim,
    };
    let (bundle, log) = match trainer::fit(train_set.images(), train_set.texts(), &config) {
        Ok(done) => done,
        Err(stopped) => {
            write_file(&a.log, &stopped.log.to_csv())?;
            return Err(stopped.error.into());
        }
    };
    write_file(&a.log, &log.to_csv())?;
    bundle.save(&a.checkpoint)?;
    if let Some(path) = &a.codes {
        let codes = trainer::extract_codes(
            &bundle,
            CodeSource::Paired {
                images: train_set.images(),
                texts: train_set.texts(),
            },
        )?;
        codes.save(path)?;
    }
    if let Some(last) = log.rows.last() {
        println!(
            "trained {} iterations, final L_total {}",
            log.len(),
            last.l_total
        );
    } else {
        println!("trained 0 iterations");
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> anyhow::Result<()> {
    let dataset = load(&a.data)?;
    let part = dataset.subset(&subset_indices(dataset.tags(), a.subset));
    let bundle = NetworkBundle::load(&a.checkpoint)?;
    let source = match a.mode {
        Mode::Paired => CodeSource::Paired {
            images: part.images(),
            texts: part.texts(),
        },
        Mode::Image => CodeSource::Images(part.images()),
        Mode::Text => CodeSource::Texts(part.texts()),
    };
    let codes = trainer::extract_codes(&bundle, source)?;
    codes.save(&a.out)?;
    println!(
        "wrote {} codes of {} bits to {}",
        codes.len(),
        codes.bits(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let queries = CodeMatrix::load(&a.queries)?;
    let database = CodeMatrix::load(&a.database)?;
    let labels = LabelMatrix::load(&a.labels)?;
    let split = data::split_indices(labels.len(), a.query_count, a.split_seed)?;
    let pick = |s: Subset| match s {
        Subset::All => (0..labels.len()).collect::<Vec<_>>(),
        Subset::Query => split.query.clone(),
        Subset::Retrieval => split.retrieval.clone(),
    };
    let query_labels = labels.select(&pick(a.query_subset));
    let database_labels = labels.select(&pick(a.database_subset));
    if query_labels.len() != queries.len() || database_labels.len() != database.len() {
        bail!(uch_core::Error::Data(format!(
            "label subsets have {} query and {} database items, codes have {} and {}",
            query_labels.len(),
            database_labels.len(),
            queries.len(),
            database.len()
        )));
    }
    let set = EvalSet::new(&queries, &database, &query_labels, &database_labels)?;
    let ns = if a.at.is_empty() {
        vec![database.len().min(1000)]
    } else {
        a.at.clone()
    };
    let direction = match a.direction {
        DirectionArg::ImageToText => Direction::ImageToText,
        DirectionArg::TextToImage => Direction::TextToImage,
    };
    let report = retrieval::evaluate(&set, direction, &ns)?;
    match &a.out {
        Some(path) => {
            write_file(path, &report.to_string())?;
            println!("map {}", report.map.map);
        }
        None => print!("{report}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<bool> {
    let cfg = GradcheckConfig {
        dims: NetworkDims {
            image_dim: a.dimg,
            text_dim: a.dtxt,
            text_embed_dim: a.dtxt,
            code_bits: a.k,
        },
        batch: a.batch,
        seed: a.seed,
        samples_per_tensor: a.samples,
        matmul_fault: a.corrupt_adjoint,
        ..Default::default()
    };
    let report = gradcheck::run(&cfg)?;
    for t in &report.terms {
        println!("{t}");
    }
    let passed = report.passed();
    println!(
        "{}",
        if passed {
            "gradcheck passed"
        } else {
            "gradcheck FAILED"
        }
    );
    Ok(passed)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let divergence = err
        .chain()
        .filter_map(|e| e.downcast_ref::<uch_core::Error>())
        .any(|e| !e.is_validation());
    if divergence {
        3
    } else {
        2
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("UCH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| uch_core::Error::Data(format!("UCH_THREADS must be a count, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a).map(|()| true),
        Command::Train(a) => train(a).map(|()| true),
        Command::Encode(a) => encode(a).map(|()| true),
        Command::Eval(a) => eval(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
