//! `leafseg` — command-line pipeline over the leafseg library: synthetic
//! fixtures, augmented views, geodesic similarity targets, loss evaluation,
//! direct embedding optimization, bottom-up clustering, mAP scoring, and
//! the noise-robustness sweep.
//!
//! Exit codes: 0 success, 1 input error (bad files, flags, or parameters),
//! 2 runtime error (divergence, output I/O). Every subcommand that writes a
//! primary output first echoes its fully resolved configuration to
//! `<output>.config.json`; rerunning with `--config` on that sidecar
//! reproduces the outputs byte for byte.

mod plot;

use clap::{Args, Parser, Subcommand};
use leafseg::augment::{make_views, DistortionParams, ViewConfig};
use leafseg::cloud::SynthPlantParams;
use leafseg::cluster::{
    agglomerative_cluster, dbscan, graph_cut_cluster, radius_decremental_cluster,
    InstanceAssignment, PostprocessConfig, RadialPlane,
};
use leafseg::eval::{
    mean_average_precision, noise_kind_name, noise_sweep, save_summary_csv, save_sweep_csv,
    summarize_sweep, NoiseKind, SweepConfig, SweepMethod,
};
use leafseg::geodesy::{
    apsp_sparse, build_knn_graph, euclidean_distance_matrix, floyd_warshall_blocked,
    init_distance_matrix, similarity_matrix, DistanceMatrix, DEFAULT_FW_BLOCK,
};
use leafseg::io::{load_cloud, save_cloud, CloudFormat};
use leafseg::loss::{
    build_target, contrastive_loss, loss_gradient, optimize_embeddings, Discrepancy, Embeddings,
    LossConfig, LossTarget, Reduction, TargetKind,
};
use leafseg::{subsample, Error, PointCloud, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "leafseg", version, about = "Self-supervised leaf instance segmentation pipeline")]
struct Cli {
    /// Cap on threads used by parallel kernels (also LEAFSEG_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base random seed (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic rosette plant.
    Synth(SynthArgs),
    /// Produce one or two augmented views of a cloud.
    Augment(AugmentArgs),
    /// Build the kNN graph and write its edge list.
    Graph(GraphArgs),
    /// Compute a dense distance matrix (geodesic or Euclidean).
    Distances(DistancesArgs),
    /// Compute the similarity target from distances.
    Similarity(SimilarityArgs),
    /// Evaluate the contrastive loss on given embeddings.
    Loss(LossArgs),
    /// Optimize per-point embeddings by gradient descent.
    Optimize(OptimizeArgs),
    /// Cluster embeddings into leaf instances.
    Cluster(ClusterArgs),
    /// Score a predicted assignment against ground-truth labels.
    Eval(EvalArgs),
    /// Run the noise-robustness sweep over clustering methods.
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let threads = cli.threads.or_else(|| {
        std::env::var("LEAFSEG_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
        {
            eprintln!("warning: could not set thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => run_synth(cli, args),
        Command::Augment(args) => run_augment(cli, args),
        Command::Graph(args) => run_graph(cli, args),
        Command::Distances(args) => run_distances(cli, args),
        Command::Similarity(args) => run_similarity(cli, args),
        Command::Loss(args) => run_loss(cli, args),
        Command::Optimize(args) => run_optimize(cli, args),
        Command::Cluster(args) => run_cluster(cli, args),
        Command::Eval(args) => run_eval(cli, args),
        Command::Sweep(args) => run_sweep(cli, args),
    }
}

/// Defaults <- JSON config file <- explicit flags, in that order.
fn resolve_config<T: Default + DeserializeOwned>(config: Option<&PathBuf>) -> Result<T> {
    match config {
        None => Ok(T::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
        }
    }
}

/// Echo the resolved config next to the primary output before computing.
fn write_sidecar<T: Serialize>(output: &Path, resolved: &T) -> Result<()> {
    let path = sidecar_path(output);
    let text = serde_json::to_string_pretty(resolved)
        .map_err(|e| Error::invalid(format!("config serialization: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    output.with_file_name(name)
}

fn cloud_format_of(path: &Path) -> CloudFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => CloudFormat::PlyAscii,
        _ => CloudFormat::Csv,
    }
}

fn load_cloud_auto(path: &Path) -> Result<PointCloud> {
    load_cloud(path, cloud_format_of(path))
}

fn is_binary(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("bin"))
}

fn load_embeddings_auto(path: &Path) -> Result<Embeddings> {
    if is_binary(path) {
        Embeddings::load_bin(path)
    } else {
        Embeddings::load_csv(path)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

// ---------------------------------------------------------------- synth --

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    leaves: Option<usize>,
    #[arg(long)]
    points_per_leaf: Option<usize>,
    #[arg(long)]
    stem_points: Option<usize>,
    #[arg(long)]
    leaf_length: Option<f64>,
    #[arg(long)]
    leaf_width: Option<f64>,
    #[arg(long)]
    droop_angle: Option<f64>,
    #[arg(long)]
    position_jitter: Option<f64>,
    #[arg(long)]
    petiole_radius: Option<f64>,
    /// Output cloud; `.ply` selects ascii PLY, anything else CSV.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SynthConfig {
    params: SynthPlantParams,
}

fn run_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = resolve_config(cli.config.as_ref())?;
    let p = &mut cfg.params;
    apply(&mut p.n_leaves, args.leaves);
    apply(&mut p.points_per_leaf, args.points_per_leaf);
    apply(&mut p.stem_points, args.stem_points);
    apply(&mut p.leaf_length, args.leaf_length);
    apply(&mut p.leaf_width, args.leaf_width);
    apply(&mut p.droop_angle, args.droop_angle);
    apply(&mut p.position_jitter, args.position_jitter);
    apply(&mut p.petiole_radius, args.petiole_radius);
    apply(&mut p.seed, cli.seed);

    write_sidecar(&args.output, &cfg)?;
    let cloud = leafseg::synth_plant(&cfg.params)?;
    save_cloud(&cloud, &args.output, cloud_format_of(&args.output))?;
    eprintln!(
        "synth: wrote {} ({} points, {} leaves)",
        args.output.display(),
        cloud.len(),
        cfg.params.n_leaves
    );
    Ok(())
}

fn apply<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

// -------------------------------------------------------------- augment --

#[derive(Args)]
struct AugmentArgs {
    /// Input cloud.
    #[arg(short, long)]
    input: PathBuf,
    /// Output prefix; writes `<prefix>.base.csv`, `<prefix>.view<k>.csv`,
    /// and `<prefix>.indices.csv`.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    n_points: Option<usize>,
    /// Enable occlusion with K ellipses.
    #[arg(long)]
    occlusion_k: Option<usize>,
    /// Max ellipse semi-axes as `dx,dy` meters.
    #[arg(long)]
    occlusion_delta: Option<String>,
    #[arg(long)]
    erase: Option<f64>,
    #[arg(long)]
    rotate: Option<f64>,
    #[arg(long)]
    translate: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    /// Enable distortion with max angles `ax,ay,az` radians.
    #[arg(long)]
    distort: Option<String>,
    /// Also write the sampled ellipses and angles to `<prefix>.draws.json`.
    #[arg(long)]
    record_draws: bool,
}

fn run_augment(cli: &Cli, args: &AugmentArgs) -> Result<()> {
    let mut cfg: ViewConfig = resolve_config(cli.config.as_ref())?;
    apply(&mut cfg.seed, cli.seed);
    if let Some(v) = args.views {
        cfg.n_views = v;
    }
    if args.n_points.is_some() {
        cfg.n_points = args.n_points;
    }
    if let Some(k) = args.occlusion_k {
        let mut occ = cfg.occlusion.take().unwrap_or_default();
        occ.k_ellipses = k;
        cfg.occlusion = Some(occ);
    }
    if let Some(delta) = &args.occlusion_delta {
        let d: Vec<f64> = parse_list(delta, "occlusion delta")?;
        if d.len() != 2 {
            return Err(Error::invalid("occlusion delta needs exactly dx,dy"));
        }
        let mut occ = cfg.occlusion.take().unwrap_or_default();
        occ.delta = [d[0], d[1]];
        cfg.occlusion = Some(occ);
    }
    if args.erase.is_some() {
        cfg.erase_fraction = args.erase;
    }
    if args.rotate.is_some() {
        cfg.rotation_range = args.rotate;
    }
    if args.translate.is_some() {
        cfg.translation_range = args.translate;
    }
    if args.jitter.is_some() {
        cfg.jitter = args.jitter;
    }
    if let Some(angles) = &args.distort {
        let a: Vec<f64> = parse_list(angles, "distortion angles")?;
        if a.len() != 3 {
            return Err(Error::invalid("distortion needs exactly ax,ay,az"));
        }
        let mut dist = cfg.distortion.take().unwrap_or(DistortionParams {
            theta_max: [0.0; 3],
            seed: 0,
            about_origin: false,
        });
        dist.theta_max = [a[0], a[1], a[2]];
        cfg.distortion = Some(dist);
    }

    write_sidecar(&args.output, &cfg)?;
    let cloud = load_cloud_auto(&args.input)?;
    let out = make_views(&cloud, &cfg)?;

    let stem = args.output.clone();
    let with_suffix = |suffix: &str| -> PathBuf {
        let mut name = stem.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        stem.with_file_name(name)
    };
    save_cloud(&out.base, &with_suffix(".base.csv"), CloudFormat::Csv)?;
    for (k, view) in out.views.iter().enumerate() {
        save_cloud(view, &with_suffix(&format!(".view{k}.csv")), CloudFormat::Csv)?;
    }
    {
        use std::io::Write;
        let path = with_suffix(".indices.csv");
        let file = std::fs::File::create(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(w, "base_index,original_index")?;
            for (b, o) in out.base_indices.iter().enumerate() {
                writeln!(w, "{b},{o}")?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    if args.record_draws {
        let path = with_suffix(".draws.json");
        let text = serde_json::to_string_pretty(&out.draws)
            .map_err(|e| Error::invalid(format!("draw serialization: {e}")))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    eprintln!(
        "augment: {} view(s) of {} points from {}",
        out.views.len(),
        out.base.len(),
        args.input.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- graph --

#[derive(Args)]
struct GraphArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(short)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GraphConfig {
    k: usize,
    tau: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: leafseg::geodesy::DEFAULT_K,
            tau: leafseg::geodesy::DEFAULT_TAU,
        }
    }
}

fn run_graph(cli: &Cli, args: &GraphArgs) -> Result<()> {
    let mut cfg: GraphConfig = resolve_config(cli.config.as_ref())?;
    apply(&mut cfg.k, args.k);
    apply(&mut cfg.tau, args.tau);
    write_sidecar(&args.output, &cfg)?;
    let cloud = load_cloud_auto(&args.input)?;
    let graph = build_knn_graph(&cloud, cfg.k, cfg.tau)?;
    use std::io::Write;
    let file = std::fs::File::create(&args.output)
        .map_err(|e| Error::io(args.output.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(w, "u,v,weight")?;
        for (u, v, weight) in graph.edges() {
            writeln!(w, "{u},{v},{weight}")?;
        }
        w.flush()
    })()
    .map_err(|e| Error::io(args.output.display().to_string(), e))?;
    eprintln!(
        "graph: {} vertices, {} edges (k={}, tau={})",
        graph.n_vertices(),
        graph.edges().len(),
        cfg.k,
        cfg.tau
    );
    Ok(())
}

// ------------------------------------------------------------ distances --

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
enum DistanceMethod {
    /// Geodesic via blocked Floyd-Warshall closure.
    Fw,
    /// Geodesic via per-source Dijkstra.
    Sparse,
    /// Dense pairwise Euclidean.
    Euclidean,
}

#[derive(Args)]
struct DistancesArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Output matrix; `.bin` selects the raw binary format, else CSV.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    method: Option<DistanceMethod>,
    #[arg(short)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    block: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct DistancesConfig {
    method: DistanceMethod,
    k: usize,
    tau: f64,
    block: usize,
}

impl Default for DistancesConfig {
    fn default() -> Self {
        DistancesConfig {
            method: DistanceMethod::Fw,
            k: leafseg::geodesy::DEFAULT_K,
            tau: leafseg::geodesy::DEFAULT_TAU,
            block: DEFAULT_FW_BLOCK,
        }
    }
}

fn compute_distances(cloud: &PointCloud, cfg: &DistancesConfig) -> Result<DistanceMatrix> {
    match cfg.method {
        DistanceMethod::Fw => {
            let graph = build_knn_graph(cloud, cfg.k, cfg.tau)?;
            floyd_warshall_blocked(&init_distance_matrix(&graph), cfg.block)
        }
        DistanceMethod::Sparse => {
            let graph = build_knn_graph(cloud, cfg.k, cfg.tau)?;
            Ok(apsp_sparse(&graph))
        }
        DistanceMethod::Euclidean => Ok(euclidean_distance_matrix(cloud)),
    }
}

fn run_distances(cli: &Cli, args: &DistancesArgs) -> Result<()> {
    let mut cfg: DistancesConfig = resolve_config(cli.config.as_ref())?;
    apply(&mut cfg.method, args.method);
    apply(&mut cfg.k, args.k);
    apply(&mut cfg.tau, args.tau);
    apply(&mut cfg.block, args.block);
    write_sidecar(&args.output, &cfg)?;
    let cloud = load_cloud_auto(&args.input)?;
    let d = compute_distances(&cloud, &cfg)?;
    if is_binary(&args.output) {
        d.save_bin(&args.output)?;
    } else {
        d.save_csv(&args.output)?;
    }
    eprintln!("distances: {0}x{0} matrix -> {1}", d.n(), args.output.display());
    Ok(())
}

// ----------------------------------------------------------- similarity --

#[derive(Args)]
struct SimilarityArgs {
    /// Input cloud (builds distances with --method first).
    #[arg(short, long, conflicts_with = "distances")]
    input: Option<PathBuf>,
    /// Precomputed distance matrix (`.bin` or CSV).
    #[arg(long)]
    distances: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    method: Option<DistanceMethod>,
    #[arg(short)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SimilarityConfig {
    method: DistanceMethod,
    k: usize,
    tau: f64,
    block: usize,
    epsilon: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            method: DistanceMethod::Fw,
            k: leafseg::geodesy::DEFAULT_K,
            tau: leafseg::geodesy::DEFAULT_TAU,
            block: DEFAULT_FW_BLOCK,
            epsilon: leafseg::geodesy::DEFAULT_EPSILON,
        }
    }
}

fn run_similarity(cli: &Cli, args: &SimilarityArgs) -> Result<()> {
    let mut cfg: SimilarityConfig = resolve_config(cli.config.as_ref())?;
    apply(&mut cfg.method, args.method);
    apply(&mut cfg.k, args.k);
    apply(&mut cfg.tau, args.tau);
    apply(&mut cfg.epsilon, args.epsilon);
    write_sidecar(&args.output, &cfg)?;
    let d = match (&args.input, &args.distances) {
        (_, Some(path)) => {
            if is_binary(path) {
                DistanceMatrix::load_bin(path)?
            } else {
                DistanceMatrix::load_csv(path)?
            }
        }
        (Some(cloud_path), None) => {
            let cloud = load_cloud_auto(cloud_path)?;
            compute_distances(
                &cloud,
                &DistancesConfig {
                    method: cfg.method,
                    k: cfg.k,
                    tau: cfg.tau,
                    block: cfg.block,
                },
            )?
        }
        (None, None) => {
            return Err(Error::invalid("similarity needs --input or --distances"))
        }
    };
    let s = similarity_matrix(&d, cfg.epsilon)?;
    if is_binary(&args.output) {
        s.save_bin(&args.output)?;
    } else {
        s.save_csv(&args.output)?;
    }
    eprintln!("similarity: {0}x{0} target -> {1}", s.n(), args.output.display());
    Ok(())
}

// ----------------------------------------------------------------- loss --

#[derive(Args)]
struct LossArgs {
    /// Input cloud the target is built on.
    #[arg(short, long)]
    input: PathBuf,
    /// View-0 embeddings (CSV or .bin).
    #[arg(short, long)]
    embeddings: PathBuf,
    /// View-1 embeddings; implies two-view mode.
    #[arg(long)]
    embeddings2: Option<PathBuf>,
    #[arg(long, value_enum)]
    target: Option<CliTarget>,
    #[arg(long, value_enum)]
    discrepancy: Option<CliDiscrepancy>,
    #[arg(long, value_enum)]
    reduction: Option<CliReduction>,
    #[arg(long)]
    mask_diagonal: bool,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(short)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Write the view-0 gradient here (two-view mode adds `-view1`).
    #[arg(long)]
    grad_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CliTarget {
    Identity,
    Euclidean,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CliDiscrepancy {
    Squared,
    Absolute,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CliReduction {
    Mean,
    Sum,
}

fn apply_loss_flags(cfg: &mut LossConfig, args: &LossArgs) {
    if let Some(t) = args.target {
        cfg.target = match t {
            CliTarget::Identity => TargetKind::Identity,
            CliTarget::Euclidean => TargetKind::Euclidean,
            CliTarget::Graph => TargetKind::Graph,
        };
    }
    if let Some(d) = args.discrepancy {
        cfg.discrepancy = match d {
            CliDiscrepancy::Squared => Discrepancy::Squared,
            CliDiscrepancy::Absolute => Discrepancy::Absolute,
            CliDiscrepancy::Literal => Discrepancy::Literal,
        };
    }
    if let Some(r) = args.reduction {
        cfg.reduction = match r {
            CliReduction::Mean => Reduction::Mean,
            CliReduction::Sum => Reduction::Sum,
        };
    }
    if args.mask_diagonal {
        cfg.mask_diagonal = true;
    }
    apply(&mut cfg.n_points, args.n_points);
    apply(&mut cfg.epsilon, args.epsilon);
    apply(&mut cfg.graph_k, args.k);
    apply(&mut cfg.graph_tau, args.tau);
}

fn run_loss(cli: &Cli, args: &LossArgs) -> Result<()> {
    let mut cfg: LossConfig = resolve_config(cli.config.as_ref())?;
    apply_loss_flags(&mut cfg, args);
    if args.embeddings2.is_some() {
        cfg.n_views = 2;
    }

    let cloud = load_cloud_auto(&args.input)?;
    let mut views = vec![load_embeddings_auto(&args.embeddings)?];
    if let Some(path) = &args.embeddings2 {
        views.push(load_embeddings_auto(path)?);
    }
    // Shared loss subsample: same indices for the target cloud and every
    // embedding matrix.
    let seed = cli.seed.unwrap_or(0);
    let (sub, indices) = subsample(&cloud, cfg.n_points, seed)?;
    let views: Vec<Embeddings> = views
        .iter()
        .map(|e| {
            if e.n() == cloud.len() && indices.len() < cloud.len() {
                Ok(e.select(&indices))
            } else if e.n() == indices.len() {
                Ok(e.clone())
            } else {
                Err(Error::ShapeMismatch(format!(
                    "embeddings have {} rows; cloud has {} points ({} after subsample)",
                    e.n(),
                    cloud.len(),
                    indices.len()
                )))
            }
        })
        .collect::<Result<_>>()?;

    let target_matrix = build_target(&sub, &cfg)?;
    let target = match &target_matrix {
        Some(s) => LossTarget::Spatial(s),
        None => LossTarget::Identity,
    };
    if let Some(grad_path) = &args.grad_out {
        write_sidecar(grad_path, &cfg)?;
        let (loss, grads) = loss_gradient(&views, &target, &cfg)?;
        grads[0].save_csv(grad_path)?;
        if let Some(g1) = grads.get(1) {
            let mut name = grad_path
                .file_stem()
                .unwrap_or_default()
                .to_os_string();
            name.push("-view1.csv");
            g1.save_csv(&grad_path.with_file_name(name))?;
        }
        println!("{loss}");
    } else {
        let loss = contrastive_loss(&views, &target, &cfg)?;
        println!("{loss}");
    }
    Ok(())
}

// ------------------------------------------------------------- optimize --

#[derive(Args)]
struct OptimizeArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Output embeddings (CSV or .bin).
    #[arg(short, long)]
    output: PathBuf,
    /// Loss-trace CSV (`step,loss`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    target: Option<CliTarget>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(short)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    views: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct OptimizeConfig {
    loss: LossConfig,
    steps: usize,
    learning_rate: f64,
    seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            loss: LossConfig::default(),
            steps: 500,
            learning_rate: 10.0,
            seed: 0,
        }
    }
}

fn run_optimize(cli: &Cli, args: &OptimizeArgs) -> Result<()> {
    let mut cfg: OptimizeConfig = resolve_config(cli.config.as_ref())?;
    if let Some(t) = args.target {
        cfg.loss.target = match t {
            CliTarget::Identity => TargetKind::Identity,
            CliTarget::Euclidean => TargetKind::Euclidean,
            CliTarget::Graph => TargetKind::Graph,
        };
    }
    apply(&mut cfg.loss.embed_dim, args.dim);
    apply(&mut cfg.loss.n_points, args.n_points);
    apply(&mut cfg.loss.epsilon, args.epsilon);
    apply(&mut cfg.loss.graph_k, args.k);
    apply(&mut cfg.loss.graph_tau, args.tau);
    apply(&mut cfg.loss.n_views, args.views);
    apply(&mut cfg.steps, args.steps);
    apply(&mut cfg.learning_rate, args.lr);
    apply(&mut cfg.seed, cli.seed);

    write_sidecar(&args.output, &cfg)?;
    let cloud = load_cloud_auto(&args.input)?;
    let out = optimize_embeddings(&cloud, &cfg.loss, cfg.steps, cfg.learning_rate, cfg.seed)?;
    if is_binary(&args.output) {
        out.embeddings.save_bin(&args.output)?;
    } else {
        out.embeddings.save_csv(&args.output)?;
    }
    if let Some(trace_path) = &args.trace {
        use std::io::Write;
        let file = std::fs::File::create(trace_path)
            .map_err(|e| Error::io(trace_path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(w, "step,loss")?;
            for (i, l) in out.trace.iter().enumerate() {
                writeln!(w, "{i},{l}")?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(trace_path.display().to_string(), e))?;
    }
    eprintln!(
        "optimize: {} rows x {} dims, loss {} -> {}",
        out.embeddings.n(),
        out.embeddings.dim(),
        out.trace.first().unwrap_or(&f64::NAN),
        out.trace.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}

// -------------------------------------------------------------- cluster --

#[derive(Args)]
struct ClusterArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Embedding rows aligned with the cloud. Omit to cluster positions
    /// (dbscan baseline only).
    #[arg(short, long)]
    embeddings: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gamma_agg: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    plane: Option<CliPlane>,
    #[arg(short)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum CliPlane {
    Xy,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ClusterConfig {
    method: SweepMethod,
    postprocess: PostprocessConfig,
    dbscan_eps: f64,
    dbscan_min_pts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            method: SweepMethod::Radius,
            postprocess: PostprocessConfig::default(),
            dbscan_eps: 0.5,
            dbscan_min_pts: 3,
        }
    }
}

fn run_cluster(cli: &Cli, args: &ClusterArgs) -> Result<()> {
    let mut cfg: ClusterConfig = resolve_config(cli.config.as_ref())?;
    if let Some(m) = &args.method {
        cfg.method = SweepMethod::parse(m)?;
    }
    apply(&mut cfg.postprocess.merge_threshold, args.gamma);
    apply(&mut cfg.postprocess.agglomerative_threshold, args.gamma_agg);
    apply(&mut cfg.postprocess.steps, args.steps);
    if let Some(p) = args.plane {
        cfg.postprocess.radial_plane = match p {
            CliPlane::Xy => RadialPlane::Xy,
            CliPlane::ThreeD => RadialPlane::ThreeD,
        };
    }
    apply(&mut cfg.postprocess.graph_k, args.k);
    apply(&mut cfg.postprocess.graph_tau, args.tau);
    apply(&mut cfg.dbscan_eps, args.eps);
    apply(&mut cfg.dbscan_min_pts, args.min_pts);

    write_sidecar(&args.output, &cfg)?;
    let cloud = load_cloud_auto(&args.input)?;
    let embeddings = match &args.embeddings {
        Some(path) => load_embeddings_auto(path)?,
        None => {
            if cfg.method != SweepMethod::Dbscan {
                return Err(Error::invalid(
                    "only dbscan can run without --embeddings (on positions)",
                ));
            }
            Embeddings::from_positions(&cloud)
        }
    };
    if embeddings.n() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings have {} rows but cloud has {} points",
            embeddings.n(),
            cloud.len()
        )));
    }
    let assignment = match cfg.method {
        SweepMethod::Radius => radius_decremental_cluster(&cloud, &embeddings, &cfg.postprocess)?,
        SweepMethod::GraphCut => graph_cut_cluster(&cloud, &embeddings, &cfg.postprocess)?,
        SweepMethod::Dbscan => dbscan(&embeddings, cfg.dbscan_eps, cfg.dbscan_min_pts)?,
        SweepMethod::Agglomerative => {
            agglomerative_cluster(&embeddings, cfg.postprocess.agglomerative_threshold)?
        }
    };
    assignment.save_csv(&args.output)?;
    if let Some(note) = &assignment.note {
        eprintln!("cluster: note: {note}");
    }
    eprintln!(
        "cluster: {} instances over {} points -> {}",
        assignment.n_instances(),
        assignment.n_points(),
        args.output.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- eval --

#[derive(Args)]
struct EvalArgs {
    /// Labeled ground-truth cloud.
    #[arg(short, long)]
    input: PathBuf,
    /// Predicted assignment CSV.
    #[arg(long)]
    pred: PathBuf,
    /// Optional per-threshold CSV output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn run_eval(_cli: &Cli, args: &EvalArgs) -> Result<()> {
    let cloud = load_cloud_auto(&args.input)?;
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::invalid("eval needs a labeled cloud"))?;
    let pred = InstanceAssignment::load_csv(&args.pred)?;
    let result = mean_average_precision(&pred, labels)?;
    if let Some(out) = &args.output {
        use std::io::Write;
        let file =
            std::fs::File::create(out).map_err(|e| Error::io(out.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        (|| -> std::io::Result<()> {
            writeln!(w, "threshold,ap,tp,fp,fn")?;
            for t in &result.per_threshold {
                writeln!(w, "{},{},{},{},{}", t.threshold, t.ap, t.tp, t.fp, t.fn_count)?;
            }
            w.flush()
        })()
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    println!("map {}", result.map);
    println!("ap50 {}", result.ap50);
    Ok(())
}

// ---------------------------------------------------------------- sweep --

#[derive(Args)]
struct SweepArgs {
    /// Labeled ground-truth cloud.
    #[arg(short, long)]
    input: PathBuf,
    /// Long-format results CSV; also writes `<output>.summary.csv`.
    #[arg(short, long)]
    output: PathBuf,
    /// Comma-separated: radius,graphcut,dbscan,agglomerative.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated: uniform,gaussian_center.
    #[arg(long)]
    noise: Option<String>,
    /// Comma-separated noise magnitudes.
    #[arg(long)]
    magnitudes: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gamma_agg: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    /// Render the Fig.-style SVG comparison.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepRunConfig {
    methods: Vec<SweepMethod>,
    magnitudes: Vec<f64>,
    sweep: SweepConfig,
}

impl Default for SweepRunConfig {
    fn default() -> Self {
        SweepRunConfig {
            methods: vec![SweepMethod::Radius, SweepMethod::GraphCut, SweepMethod::Dbscan],
            magnitudes: vec![0.0, 0.2, 0.4, 0.6],
            sweep: SweepConfig::default(),
        }
    }
}

fn run_sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let mut cfg: SweepRunConfig = resolve_config(cli.config.as_ref())?;
    if let Some(methods) = &args.methods {
        cfg.methods = methods
            .split(',')
            .filter(|s| !s.is_empty())
            .map(SweepMethod::parse)
            .collect::<Result<_>>()?;
    }
    if let Some(noise) = &args.noise {
        cfg.sweep.kinds = noise
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| match s.trim() {
                "uniform" => Ok(NoiseKind::Uniform),
                "gaussian_center" => Ok(NoiseKind::GaussianCenter),
                other => Err(Error::invalid(format!("unknown noise kind {other:?}"))),
            })
            .collect::<Result<_>>()?;
    }
    if let Some(m) = &args.magnitudes {
        cfg.magnitudes = parse_list(m, "magnitude")?;
    }
    apply(&mut cfg.sweep.reps, args.reps);
    if args.dim.is_some() {
        cfg.sweep.embed_dim = args.dim;
    }
    if args.sigma.is_some() {
        cfg.sweep.sigma = args.sigma;
    }
    apply(&mut cfg.sweep.postprocess.merge_threshold, args.gamma);
    apply(
        &mut cfg.sweep.postprocess.agglomerative_threshold,
        args.gamma_agg,
    );
    apply(&mut cfg.sweep.postprocess.steps, args.steps);
    apply(&mut cfg.sweep.dbscan_eps, args.eps);
    apply(&mut cfg.sweep.dbscan_min_pts, args.min_pts);
    apply(&mut cfg.sweep.base_seed, cli.seed);

    write_sidecar(&args.output, &cfg)?;
    let cloud = load_cloud_auto(&args.input)?;
    let rows = noise_sweep(&cloud, &cfg.methods, &cfg.magnitudes, &cfg.sweep)?;
    save_sweep_csv(&rows, &args.output)?;
    let summary = summarize_sweep(&rows);
    let summary_path = {
        let mut name = args.output.file_name().unwrap_or_default().to_os_string();
        name.push(".summary.csv");
        args.output.with_file_name(name)
    };
    save_summary_csv(&summary, &summary_path)?;
    if let Some(plot_path) = &args.plot {
        plot::emit_plot(&rows, plot_path)?;
    }
    for s in &summary {
        eprintln!(
            "sweep: {} {} m={}: mAP {:.4} +- {:.4}",
            s.method.name(),
            noise_kind_name(s.kind),
            s.magnitude,
            s.mean_map,
            s.std_map
        );
    }
    Ok(())
}
