//! Command-line driver: pretrain the autoencoder, run the clustering
//! variants, evaluate predictions, and run reference baselines.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use kscn::baselines::{self, BaselineResult};
use kscn::cae::{load_checkpoint, save_checkpoint};
use kscn::data::{gen_synth, load_idx, Dataset, SynthSpec};
use kscn::error::Error;
use kscn::ksc::{run_plain_grassmann, run_plain_ksc, KscConfig, Membership};
use kscn::linalg::Matrix;
use kscn::metrics::ClusterMetrics;
use kscn::trainer::{self, TrainConfig, Variant};

#[derive(Parser)]
#[command(
    name = "kscn",
    version,
    about = "Scalable deep k-subspace clustering without affinity matrices"
)]
struct Cli {
    /// Cap the number of worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the convolutional autoencoder on reconstruction only and
    /// write a checkpoint.
    Pretrain(PretrainArgs),
    /// Fine-tune with the k-subspace loss and cluster the dataset.
    Cluster(ClusterArgs),
    /// Score a predictions file against ground-truth labels.
    Eval(EvalArgs),
    /// Run reference baselines and print a CSV table.
    Baseline(BaselineArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    /// Training and test files concatenated (70k images for MNIST).
    Whole,
    /// The 10k-image test file alone.
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DatasetName {
    Mnist,
    Fashion,
}

#[derive(Args)]
struct DataArgs {
    /// Which IDX dataset to load.
    #[arg(long, value_enum)]
    dataset: Option<DatasetName>,

    /// Directory holding the IDX files (also: env KSCN_DATA_DIR, then ./data).
    /// Files may be gzipped. Looked up in <dir>/<dataset>/ then <dir>/.
    #[arg(long)]
    data_dir: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,

    #[arg(long, default_value_t = 200)]
    epochs: usize,

    #[arg(long, default_value_t = 1e-3)]
    lr: f64,

    #[arg(long, default_value_t = 256)]
    batch_size: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,

    /// Optional JSON-lines file of per-epoch reconstruction losses.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Synthetic union-of-subspaces input instead of an image dataset,
    /// e.g. "k=5,d=20,p=3,n=200,sigma=0.01,outliers=0,seed=0".
    #[arg(long, conflicts_with = "dataset")]
    synth: Option<String>,

    /// Subspace update rule: svd or grassmann.
    #[arg(long, default_value = "svd")]
    variant: String,

    #[arg(long)]
    k: Option<usize>,

    /// Subspace dimension p.
    #[arg(long)]
    p: Option<usize>,

    /// Balance between reconstruction and clustering loss.
    #[arg(long)]
    lambda: Option<f64>,

    /// Fine-tuning epochs; on --synth inputs, the iteration cap
    /// (default 20, or 200 for --synth).
    #[arg(long)]
    epochs: Option<usize>,

    /// Pretraining epochs when no checkpoint is given.
    #[arg(long)]
    pretrain_epochs: Option<usize>,

    /// Start fine-tuning from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    #[arg(long, default_value_t = 256)]
    batch_size: usize,

    #[arg(long, default_value_t = 1e-3)]
    lr: f64,

    /// Fraction of each cluster's farthest points excluded from SVD updates.
    #[arg(long, default_value_t = 0.1)]
    outlier_fraction: f64,

    /// Base Grassmann step size, scaled by 1/n_i per subspace
    /// (default 1e-3, or 0.3 for --synth inputs).
    #[arg(long)]
    grass_eta: Option<f64>,

    /// Random-init restarts for --synth runs; the best objective wins.
    #[arg(long, default_value_t = 10)]
    restarts: usize,

    #[arg(long, default_value_t = 20)]
    kmeans_restarts: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Write final cluster indices, one per line.
    #[arg(long)]
    memberships: Option<PathBuf>,

    /// Write per-epoch JSON-lines records.
    #[arg(long)]
    report: Option<PathBuf>,

    /// Write the fine-tuned checkpoint (parameters plus subspaces).
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted labels: text file with one integer per line.
    #[arg(long)]
    pred: PathBuf,

    /// Ground truth: a text file of integers or an IDX label file (.gz ok).
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Comma-separated subset of kmeans,pca-ks,cae-km.
    #[arg(long, default_value = "kmeans,pca-ks")]
    which: String,

    /// Pretrained checkpoint (required by cae-km).
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    #[arg(long, default_value_t = 10)]
    k: usize,

    /// Subspace dimension for pca-ks.
    #[arg(long, default_value_t = 7)]
    p: usize,

    /// PCA projection dimension for pca-ks.
    #[arg(long, default_value_t = 80)]
    pca_dim: usize,

    /// Restarts for the k-means baselines.
    #[arg(long, default_value_t = 20)]
    restarts: usize,

    /// Restarts for pca-ks.
    #[arg(long, default_value_t = 10)]
    pca_restarts: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    let result = match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Baseline(args) => cmd_baseline(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io { .. } | Error::Format(_) => 2,
        Error::Dim(_) | Error::RankDeficient(_) | Error::NonFinite(_) | Error::EmptyCluster(_) => 3,
    }
}

fn data_dir(args: &DataArgs) -> PathBuf {
    args.data_dir
        .clone()
        .or_else(|| std::env::var_os("KSCN_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn find_idx(dirs: &[PathBuf], stem: &str) -> Result<PathBuf, Error> {
    for dir in dirs {
        for name in [stem.to_string(), format!("{stem}.gz")] {
            let candidate = dir.join(&name);
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::Io {
        path: dirs
            .iter()
            .map(|d| d.join(stem).display().to_string())
            .collect::<Vec<_>>()
            .join(", "),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    })
}

fn load_dataset(args: &DataArgs) -> Result<Dataset, Error> {
    let name = args
        .dataset
        .ok_or_else(|| Error::Config("--dataset is required here".into()))?;
    let base = data_dir(args);
    let sub = match name {
        DatasetName::Mnist => "mnist",
        DatasetName::Fashion => "fashion",
    };
    let dirs = vec![base.join(sub), base];
    let test = || -> Result<Dataset, Error> {
        let images = find_idx(&dirs, "t10k-images-idx3-ubyte")?;
        let labels = find_idx(&dirs, "t10k-labels-idx1-ubyte")?;
        load_idx(&images, Some(&labels))
    };
    let mut ds = match args.split {
        Split::Test => test()?,
        Split::Whole => {
            let images = find_idx(&dirs, "train-images-idx3-ubyte")?;
            let labels = find_idx(&dirs, "train-labels-idx1-ubyte")?;
            load_idx(&images, Some(&labels))?.concat(test()?)?
        }
    };
    ds.name = sub.to_string();
    Ok(ds)
}

fn train_config(args: &ClusterArgs) -> Result<TrainConfig, Error> {
    let mut cfg = match args.data.dataset {
        Some(DatasetName::Fashion) => TrainConfig::fashion(),
        _ => TrainConfig::mnist(),
    };
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(p) = args.p {
        cfg.p = p;
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    cfg.batch_size = args.batch_size;
    cfg.epochs = args.epochs.unwrap_or(20);
    cfg.pretrain_epochs = args.pretrain_epochs.unwrap_or(0);
    cfg.lr = args.lr;
    cfg.grass_eta = args.grass_eta.unwrap_or(1e-3);
    cfg.outlier_fraction = args.outlier_fraction;
    cfg.seed = args.seed;
    cfg.variant = args.variant.parse()?;
    cfg.kmeans_restarts = args.kmeans_restarts;
    Ok(cfg)
}

fn write_text(path: &Path, contents: &str) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_memberships(path: &Path, m: &Membership) -> Result<(), Error> {
    let mut out = String::with_capacity(m.len() * 3);
    for &l in m.as_slice() {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    write_text(path, &out)
}

fn metrics_or_null(metrics: Option<&ClusterMetrics>) -> serde_json::Value {
    match metrics {
        Some(m) => json!({"acc": m.acc, "nmi": m.nmi, "ari": m.ari}),
        None => json!({"acc": null, "nmi": null, "ari": null}),
    }
}

fn print_peak_rss() {
    if let Some(kb) = peak_rss_kb() {
        eprintln!("peak_rss_kb={kb}");
    }
}

#[cfg(target_os = "linux")]
fn peak_rss_kb() -> Option<u64> {
    // getrusage reports the peak directly; some sandboxed /proc
    // filesystems omit VmHWM.
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc == 0 {
        let usage = unsafe { usage.assume_init() };
        if usage.ru_maxrss > 0 {
            return Some(usage.ru_maxrss as u64);
        }
    }
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    for key in ["VmHWM:", "VmRSS:"] {
        if let Some(v) = status
            .lines()
            .find_map(|l| l.strip_prefix(key))
        {
            return v.trim().trim_end_matches("kB").trim().parse().ok();
        }
    }
    None
}

#[cfg(not(target_os = "linux"))]
fn peak_rss_kb() -> Option<u64> {
    None
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), Error> {
    let data = load_dataset(&args.data)?;
    let mut cfg = match args.data.dataset {
        Some(DatasetName::Fashion) => TrainConfig::fashion(),
        _ => TrainConfig::mnist(),
    };
    cfg.pretrain_epochs = args.epochs;
    cfg.lr = args.lr;
    cfg.batch_size = args.batch_size;
    cfg.seed = args.seed;

    let (params, losses) = trainer::pretrain(&data, &cfg)?;
    save_checkpoint(&args.out, &params, None)?;

    let mut lines = String::new();
    for (e, loss) in losses.iter().enumerate() {
        let line = json!({"epoch": e + 1, "loss_ae": loss});
        println!("{line}");
        lines.push_str(&line.to_string());
        lines.push('\n');
    }
    if let Some(report) = &args.report {
        write_text(report, &lines)?;
    }
    eprintln!("wrote checkpoint {}", args.out.display());
    Ok(())
}

fn parse_synth(spec: &str) -> Result<SynthSpec, Error> {
    let mut out = SynthSpec::default();
    for part in spec.split(',').filter(|s| !s.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("synth field '{part}' is not key=value")))?;
        let bad = || Error::Config(format!("synth field '{part}' has a bad value"));
        match key.trim() {
            "k" => out.k = value.parse().map_err(|_| bad())?,
            "d" => out.d = value.parse().map_err(|_| bad())?,
            "p" => out.p = value.parse().map_err(|_| bad())?,
            "n" => out.points_per_cluster = value.parse().map_err(|_| bad())?,
            "sigma" => out.noise_sigma = value.parse().map_err(|_| bad())?,
            "outliers" => out.outlier_count = value.parse().map_err(|_| bad())?,
            "seed" => out.seed = value.parse().map_err(|_| bad())?,
            other => return Err(Error::Config(format!("unknown synth field '{other}'"))),
        }
    }
    Ok(out)
}

/// Clusters synthetic latent-space points directly with the plain
/// alternating loops; no autoencoder is involved. Follows the usual
/// restart protocol: random orthonormal initializations plus one
/// k-means-based one, best final objective wins.
fn cluster_synth(args: &ClusterArgs, spec: &str) -> Result<(), Error> {
    let spec = parse_synth(spec)?;
    let (points, labels, _) = gen_synth(&spec)?;
    let variant: Variant = args.variant.parse()?;
    let kcfg = KscConfig {
        k: args.k.unwrap_or(spec.k),
        p: args.p.unwrap_or(spec.p),
        outlier_fraction: if spec.outlier_count > 0 {
            args.outlier_fraction
        } else {
            0.0
        },
        max_iters: args.epochs.unwrap_or(200).max(1),
        tol: 1e-9,
    };
    let eta = args.grass_eta.unwrap_or(0.3);

    let mut inits = Vec::with_capacity(args.restarts + 1);
    let tcfg = TrainConfig {
        k: kcfg.k,
        p: kcfg.p,
        kmeans_restarts: args.kmeans_restarts,
        seed: args.seed,
        ..TrainConfig::mnist()
    };
    inits.push(trainer::init_subspaces(&points, &tcfg)?.0);
    for r in 0..args.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(r as u64 + 1);
        inits.push(kscn::ksc::random_subspace_set(
            kcfg.k, spec.d, kcfg.p, &mut rng,
        )?);
    }

    let mut best: Option<(f64, Membership, usize)> = None;
    for init in &inits {
        let (_, m, trace) = match variant {
            Variant::Svd => run_plain_ksc(&points, &kcfg, init)?,
            Variant::Grassmann => run_plain_grassmann(&points, &kcfg, init, eta)?,
        };
        let obj = *trace.last().unwrap_or(&f64::INFINITY);
        if best.as_ref().is_none_or(|(bo, _, _)| obj < *bo) {
            best = Some((obj, m, trace.len()));
        }
    }
    let (objective, m, iters) = best.expect("at least one restart ran");

    // Score against generator labels, outliers excluded.
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if l >= 0 {
            pred.push(m.label(j));
            truth.push(l as usize);
        }
    }
    let metrics = ClusterMetrics::compute(&pred, &truth)?;
    let summary = json!({
        "input": "synth",
        "variant": args.variant,
        "iters": iters,
        "objective": objective,
        "acc": metrics.acc,
        "nmi": metrics.nmi,
        "ari": metrics.ari,
    });
    println!("{summary}");
    if let Some(path) = &args.memberships {
        write_memberships(path, &m)?;
    }
    Ok(())
}

fn cmd_cluster(args: ClusterArgs) -> Result<(), Error> {
    if let Some(spec) = args.synth.clone() {
        return cluster_synth(&args, &spec);
    }
    if args.checkpoint.is_none() && args.pretrain_epochs.is_none() {
        return Err(Error::Config(
            "cluster needs --checkpoint or --pretrain-epochs".into(),
        ));
    }
    let data = load_dataset(&args.data)?;
    let cfg = train_config(&args)?;

    let init_params = match &args.checkpoint {
        Some(path) => Some(load_checkpoint(path)?.0),
        None => None,
    };

    let started = Instant::now();
    let (params, subs, m, report) = trainer::train(&data, &cfg, init_params)?;

    if let Some(path) = &args.report {
        write_text(path, &report.to_jsonl())?;
    }
    if let Some(path) = &args.memberships {
        write_memberships(path, &m)?;
    }
    if let Some(path) = &args.out_checkpoint {
        save_checkpoint(path, &params, Some(&subs))?;
    }

    let metrics = data
        .labels
        .as_ref()
        .map(|l| ClusterMetrics::compute(m.as_slice(), l))
        .transpose()?;
    let last = report.epochs.last();
    let summary = json!({
        "dataset": data.name,
        "n": data.n,
        "variant": args.variant,
        "epochs": report.epochs.len(),
        "loss_total": last.map(|e| e.loss_total),
        "metrics": metrics_or_null(metrics.as_ref()),
        "seconds": started.elapsed().as_secs_f64(),
    });
    println!("{summary}");
    print_peak_rss();
    Ok(())
}

fn read_labels_file(path: &Path) -> Result<Vec<usize>, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let is_gz = bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
    let raw = if is_gz {
        use std::io::Read;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        out
    } else {
        bytes
    };
    // IDX label files start with magic 2049; anything else is read as text.
    if raw.len() >= 8 && u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]) == 2049 {
        let n = u32::from_be_bytes([raw[4], raw[5], raw[6], raw[7]]) as usize;
        let payload = raw
            .get(8..8 + n)
            .ok_or_else(|| Error::Format(format!("{}: truncated label payload", path.display())))?;
        return Ok(payload.iter().map(|&b| b as usize).collect());
    }
    let text = String::from_utf8(raw)
        .map_err(|_| Error::Format(format!("{}: neither IDX nor text labels", path.display())))?;
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse::<usize>().map_err(|_| {
            Error::Format(format!(
                "{}:{}: '{line}' is not a label",
                path.display(),
                ln + 1
            ))
        })?);
    }
    Ok(labels)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let pred = read_labels_file(&args.pred)?;
    let truth = read_labels_file(&args.truth)?;
    let metrics = ClusterMetrics::compute(&pred, &truth)?;
    println!(
        "{}",
        json!({"acc": metrics.acc, "nmi": metrics.nmi, "ari": metrics.ari})
    );
    Ok(())
}

fn pixel_matrix(data: &Dataset) -> Result<Matrix, Error> {
    Matrix::from_vec(data.n, data.pixels_per_image(), data.images.clone())
}

fn cmd_baseline(args: BaselineArgs) -> Result<(), Error> {
    let data = load_dataset(&args.data)?;
    let labels = data
        .labels
        .clone()
        .ok_or_else(|| Error::Config("baselines need ground-truth labels".into()))?;
    let pixels = pixel_matrix(&data)?;

    let mut results: Vec<BaselineResult> = Vec::new();
    for which in args.which.split(',').filter(|s| !s.is_empty()) {
        let started = Instant::now();
        let (name, membership) = match which.trim() {
            "kmeans" => {
                let out = baselines::kmeans(&pixels, args.k, args.restarts, args.seed)?;
                ("kmeans", out.membership)
            }
            "pca-ks" => {
                let cfg = KscConfig {
                    k: args.k,
                    p: args.p,
                    ..KscConfig::default()
                };
                let dim = args.pca_dim.min(pixels.cols()).min(pixels.rows());
                let (m, _) = baselines::pca_ks(&pixels, dim, &cfg, args.seed, args.pca_restarts)?;
                ("pca-ks", m)
            }
            "cae-km" => {
                let path = args
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::Config("cae-km needs --checkpoint".into()))?;
                let (params, _) = load_checkpoint(path)?;
                let latents = trainer::encode_dataset(&params, &data)?;
                let out = baselines::kmeans(&latents, args.k, args.restarts, args.seed)?;
                ("cae-km", out.membership)
            }
            other => return Err(Error::Config(format!("unknown baseline '{other}'"))),
        };
        let metrics = ClusterMetrics::compute(membership.as_slice(), &labels)?;
        results.push(BaselineResult {
            name: name.to_string(),
            metrics,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    println!("name,acc,nmi,ari,seconds");
    for r in &results {
        println!(
            "{},{:.4},{:.6},{:.6},{:.3}",
            r.name, r.metrics.acc, r.metrics.nmi, r.metrics.ari, r.seconds
        );
    }
    Ok(())
}
