//! `crh`: generate data, train, encode and evaluate collision-resistant hash codes.
//!
//! Exit codes: 0 success, 2 usage, 3 format or unreadable input, 4 numeric
//! failure, 5 failed verification.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crh_core::eval::{collision_report, mean_ap, nhd_histogram, rank_by_hamming, self_retrieval_map, Report};
use crh_core::format::{read_codes, read_dataset, read_model, write_codes, write_dataset, write_model, DatasetFile};
use crh_core::gradcheck::{run_all, GradcheckConfig};
use crh_core::hamming::{random_code_stats, PackedCodeSet};
use crh_core::pseudo_labels::{ApConfig, Preference};
use crh_core::rng::{derive, stream};
use crh_core::synth::{augment, generate, SynthSpec};
use crh_core::train::{cluster_features, continuous_codes, encode, train_with_observer, LossMode, TrainConfig, Variant};
use crh_core::Error;

use manifest::{manifest_path, Manifest};

#[derive(Parser)]
#[command(name = "crh", version, about = "Collision-resistant unsupervised hashing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fine-grained dataset.
    GenData(GenData),
    /// Add Gaussian noise to every sample of a dataset.
    Augment(AugmentArgs),
    /// Train an encoder and write the model, codes and metrics.
    Train(TrainArgs),
    /// Hash a dataset with a trained model.
    Encode(EncodeArgs),
    /// Retrieval mAP of a code set.
    Eval(EvalArgs),
    /// Collision census of a code set.
    Collision(CollisionArgs),
    /// Statistics of uniformly random codes.
    RandStats(RandStatsArgs),
    /// Histogram of pairwise normalized Hamming distances.
    NhdHist(NhdHistArgs),
    /// Affinity propagation over a model's continuous codes.
    Cluster(ClusterArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Manifest path (default: next to the primary output, else standard error).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    n_coarse: usize,
    #[arg(long, default_value_t = 4)]
    fines_per_coarse: usize,
    #[arg(long, default_value_t = 32)]
    samples_per_fine: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 9)]
    positions: usize,
    #[arg(long, default_value_t = 10.0)]
    coarse_spread: f64,
    #[arg(long, default_value_t = 2.0)]
    fine_spread: f64,
    #[arg(long, default_value_t = 0.5)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 4.0)]
    rare_patch_strength: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelLevel {
    Fine,
    Coarse,
}

impl LabelLevel {
    fn name(self) -> &'static str {
        match self {
            LabelLevel::Fine => "fine",
            LabelLevel::Coarse => "coarse",
        }
    }

    fn pick(self, labels: &(Vec<u32>, Vec<u32>)) -> &[u32] {
        match self {
            LabelLevel::Fine => &labels.0,
            LabelLevel::Coarse => &labels.1,
        }
    }
}

#[derive(Args)]
struct ApArgs {
    /// Affinity propagation damping.
    #[arg(long, default_value_t = 0.7)]
    ap_damping: f64,
    #[arg(long, default_value_t = 200)]
    ap_max_iter: usize,
    #[arg(long, default_value_t = 15)]
    ap_window: usize,
    /// "median" or a number.
    #[arg(long, default_value = "median")]
    ap_preference: String,
}

impl ApArgs {
    fn config(&self) -> Result<ApConfig, CliError> {
        let preference = match self.ap_preference.as_str() {
            "median" => Preference::Median,
            x => Preference::Value(
                x.parse()
                    .map_err(|_| CliError::Usage(format!("invalid preference {x:?}")))?,
            ),
        };
        Ok(ApConfig {
            damping: self.ap_damping,
            max_iter: self.ap_max_iter,
            convergence_window: self.ap_window,
            preference,
        })
    }

    fn record(&self, m: &mut Manifest) {
        m.config("ap_damping", self.ap_damping);
        m.config("ap_max_iter", self.ap_max_iter);
        m.config("ap_window", self.ap_window);
        m.config("ap_preference", &self.ap_preference);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_codes: PathBuf,
    #[arg(long)]
    out_metrics: PathBuf,
    #[arg(long, default_value_t = 16)]
    bits: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8.0)]
    s: f64,
    #[arg(long, default_value_t = 8.0)]
    s1: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_nhd: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_pseudo: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_att: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_code: f64,
    #[arg(long, default_value_t = 5)]
    pseudo_refresh: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// nhd_full, nhd_only or l2_baseline.
    #[arg(long, default_value = "nhd_full")]
    loss_mode: String,
    /// sign or codebook.
    #[arg(long, default_value = "sign")]
    variant: String,
    /// Replace the attended feature by the global mean.
    #[arg(long)]
    no_csa: bool,
    /// Train against augmented views with this noise level (0 = off).
    #[arg(long, default_value_t = 0.0)]
    anchor_sigma: f64,
    /// Labels used for the logged mAP.
    #[arg(long, value_enum, default_value_t = LabelLevel::Fine)]
    label_level: LabelLevel,
    #[command(flatten)]
    ap: ApArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Database codes.
    #[arg(long)]
    codes: PathBuf,
    /// Dataset holding the database labels.
    #[arg(long)]
    data: PathBuf,
    /// Query codes; without them every database code queries the rest.
    #[arg(long, requires = "query_data")]
    queries: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    query_data: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_enum, default_value_t = LabelLevel::Fine)]
    label_level: LabelLevel,
    /// Report path (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CollisionArgs {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RandStatsArgs {
    #[arg(long, default_value_t = 64)]
    bits: usize,
    #[arg(long, default_value_t = 100_000)]
    pairs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct NhdHistArgs {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pairs: u64,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Cluster index of every sample, one per line.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    s1: f64,
    #[command(flatten)]
    ap: ApArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
    Verify(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Domain(_)) => 2,
            CliError::Core(Error::Format(_) | Error::Io(_)) => 3,
            CliError::Core(Error::DegenerateNorm { .. } | Error::NoExemplars { .. }) => 4,
            CliError::Verify(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Value of CRH_THREADS. Everything runs on one thread, which satisfies any cap.
fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("CRH_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("CRH_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn load_dataset(m: &mut Manifest, role: &str, path: &Path) -> Result<DatasetFile, CliError> {
    let bytes = m.input(role, path)?;
    Ok(read_dataset(&bytes[..])?)
}

fn load_codes(m: &mut Manifest, role: &str, path: &Path) -> Result<PackedCodeSet, CliError> {
    let bytes = m.input(role, path)?;
    Ok(read_codes(&bytes[..])?)
}

fn labels_of<'a>(d: &'a DatasetFile, level: LabelLevel, what: &str) -> Result<&'a [u32], CliError> {
    d.labels
        .as_ref()
        .map(|l| level.pick(l))
        .ok_or_else(|| CliError::Usage(format!("{what} carries no labels")))
}

/// Send a report to its file or to standard output.
fn emit_report(m: &mut Manifest, report: &Report, out: Option<&Path>) {
    let text = report.to_string().into_bytes();
    match out {
        Some(p) => m.output("report", p, text),
        None => {
            print!("{}", String::from_utf8_lossy(&text));
            m.stdout("report", &text);
        }
    }
}

fn finish(m: Manifest, common: &Common, primary: Option<&Path>) -> CliResult {
    m.finish(manifest_path(common.manifest.as_deref(), primary).as_deref())?;
    Ok(())
}

fn gen_data(a: GenData, threads: usize) -> CliResult {
    let mut m = Manifest::new("gen-data", threads);
    let spec = SynthSpec {
        n_coarse: a.n_coarse,
        fines_per_coarse: a.fines_per_coarse,
        samples_per_fine: a.samples_per_fine,
        channels: a.channels,
        positions: a.positions,
        coarse_spread: a.coarse_spread,
        fine_spread: a.fine_spread,
        noise_sigma: a.noise_sigma,
        rare_patch_strength: a.rare_patch_strength,
        seed: a.seed,
    };
    m.note("seed", a.seed);
    m.config("n_coarse", spec.n_coarse);
    m.config("fines_per_coarse", spec.fines_per_coarse);
    m.config("samples_per_fine", spec.samples_per_fine);
    m.config("channels", spec.channels);
    m.config("positions", spec.positions);
    m.config("coarse_spread", spec.coarse_spread);
    m.config("fine_spread", spec.fine_spread);
    m.config("noise_sigma", spec.noise_sigma);
    m.config("rare_patch_strength", spec.rare_patch_strength);
    let t = Instant::now();
    let d = generate(&spec)?;
    m.note("n", d.samples.len());
    let mut buf = Vec::new();
    write_dataset(&d.samples, Some((&d.fine_labels, &d.coarse_labels)), &mut buf)?;
    m.timing("generate", t.elapsed().as_secs_f64());
    m.output("dataset", &a.out, buf);
    finish(m, &a.common, Some(&a.out))
}

fn augment_cmd(a: AugmentArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("augment", threads);
    m.note("seed", a.seed);
    m.note("seed_splitting", "sample i uses derive(seed, AUGMENT, i)");
    m.config("sigma", a.sigma);
    let d = load_dataset(&mut m, "dataset", &a.data)?;
    let samples = d
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| augment(s, a.sigma, derive(a.seed, stream::AUGMENT, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut buf = Vec::new();
    let labels = d.labels.as_ref().map(|(f, c)| (&f[..], &c[..]));
    write_dataset(&samples, labels, &mut buf)?;
    m.output("dataset", &a.out, buf);
    finish(m, &a.common, Some(&a.out))
}

fn train_cmd(a: TrainArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("train", threads);
    let loss_mode: LossMode = a.loss_mode.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let variant: Variant = a.variant.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let mut cfg = TrainConfig {
        bits: a.bits,
        epochs: a.epochs,
        batch_size: a.batch,
        s: a.s,
        s1: a.s1,
        lambda_nhd: a.lambda_nhd,
        lambda_pseudo: a.lambda_pseudo,
        lambda_att: a.lambda_att,
        lambda_code: a.lambda_code,
        pseudo_refresh_epochs: a.pseudo_refresh,
        seed: a.seed,
        loss_mode,
        variant,
        use_csa: !a.no_csa,
        anchor_sigma: a.anchor_sigma,
        ap: a.ap.config()?,
        ..TrainConfig::default()
    };
    cfg.adam.lr = a.lr;
    m.note("seed", a.seed);
    m.note(
        "seed_splitting",
        "derive(seed, stream, index) with streams PARAM_INIT, CODEBOOK_INIT, SHUFFLE (index epoch), AP_JITTER, AUGMENT",
    );
    m.config("bits", cfg.bits);
    m.config("epochs", cfg.epochs);
    m.config("batch", cfg.batch_size);
    m.config("lr", cfg.adam.lr);
    m.config("beta1", cfg.adam.beta1);
    m.config("beta2", cfg.adam.beta2);
    m.config("eps_adam", cfg.adam.eps);
    m.config("s", cfg.s);
    m.config("s1", cfg.s1);
    m.config("lambda_nhd", cfg.lambda_nhd);
    m.config("lambda_pseudo", cfg.lambda_pseudo);
    m.config("lambda_att", cfg.lambda_att);
    m.config("lambda_code", cfg.lambda_code);
    m.config("pseudo_refresh", cfg.pseudo_refresh_epochs);
    m.config("loss_mode", cfg.loss_mode);
    m.config("variant", cfg.variant);
    m.config("use_csa", cfg.use_csa);
    m.config("anchor_sigma", cfg.anchor_sigma);
    m.config("label_level", a.label_level.name());
    a.ap.record(&mut m);

    let d = load_dataset(&mut m, "dataset", &a.data)?;
    let labels = d.labels.as_ref().map(|l| a.label_level.pick(l));
    let t = Instant::now();
    let mut csv = String::from("epoch,loss,mean_norm_v,p_collision,map\n");
    let out = train_with_observer(&d.samples, labels, &cfg, |e| {
        csv.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.loss, e.mean_norm_v, e.p_collision, e.map));
    })?;
    m.timing("train", t.elapsed().as_secs_f64());
    if let Some(last) = out.metrics.last() {
        m.note("final.loss", last.loss);
        m.note("final.p_collision", last.p_collision);
        m.note("final.map", last.map);
        m.note("final.mean_norm_v", last.mean_norm_v);
        m.note("final.mean_abs_vhat", last.mean_abs_vhat);
        m.note("final.mean_d_ii", last.mean_d_ii);
        m.note("final.n_clusters", last.n_clusters);
    }
    let mut model = Vec::new();
    write_model(&out.state, &mut model)?;
    let mut codes = Vec::new();
    write_codes(&out.codes, &mut codes)?;
    m.output("model", &a.out_model, model);
    m.output("codes", &a.out_codes, codes);
    m.output("metrics", &a.out_metrics, csv.into_bytes());
    finish(m, &a.common, Some(&a.out_model))
}

fn encode_cmd(a: EncodeArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("encode", threads);
    let bytes = m.input("model", &a.model)?;
    let state = read_model(&bytes[..])?;
    let d = load_dataset(&mut m, "dataset", &a.data)?;
    let t = Instant::now();
    let codes = encode(&d.samples, &state)?;
    m.timing("encode", t.elapsed().as_secs_f64());
    let mut buf = Vec::new();
    write_codes(&codes, &mut buf)?;
    m.output("codes", &a.out, buf);
    finish(m, &a.common, Some(&a.out))
}

fn eval_cmd(a: EvalArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("eval", threads);
    m.config("top_k", a.top_k.map_or("all".to_string(), |k| k.to_string()));
    m.config("label_level", a.label_level.name());
    let db = load_codes(&mut m, "codes", &a.codes)?;
    let db_data = load_dataset(&mut m, "dataset", &a.data)?;
    let db_labels = labels_of(&db_data, a.label_level, "the database dataset")?;
    let t = Instant::now();
    let mut report = Report::new();
    let (map, n_queries) = match (&a.queries, &a.query_data) {
        (Some(qp), Some(qd)) => {
            let queries = load_codes(&mut m, "queries", qp)?;
            let q_data = load_dataset(&mut m, "query_dataset", qd)?;
            let q_labels = labels_of(&q_data, a.label_level, "the query dataset")?;
            let result = rank_by_hamming(&queries, &db, a.top_k)?;
            (mean_ap(&result, q_labels, db_labels, a.top_k)?, queries.len())
        }
        _ => (self_retrieval_map(&db, db_labels, a.top_k)?, db.len()),
    };
    m.timing("eval", t.elapsed().as_secs_f64());
    report.push_f64("map", map);
    report.push("n_queries", n_queries);
    report.push("n_database", db.len());
    report.push("bits", db.bits());
    report.push("mode", if a.queries.is_some() { "query" } else { "leave_one_out" });
    emit_report(&mut m, &report, a.out.as_deref());
    finish(m, &a.common, a.out.as_deref())
}

fn collision_cmd(a: CollisionArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("collision", threads);
    let codes = load_codes(&mut m, "codes", &a.codes)?;
    let mut report = Report::new();
    report.push("n", codes.len());
    report.push("bits", codes.bits());
    for (k, v) in collision_report(&codes)?.to_report().entries() {
        report.push(k.clone(), v);
    }
    emit_report(&mut m, &report, a.out.as_deref());
    finish(m, &a.common, a.out.as_deref())
}

fn rand_stats_cmd(a: RandStatsArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("rand-stats", threads);
    m.note("seed", a.seed);
    m.config("bits", a.bits);
    m.config("pairs", a.pairs);
    let t = Instant::now();
    let stats = random_code_stats(a.bits, a.pairs, a.seed)?;
    m.timing("sample", t.elapsed().as_secs_f64());
    let mut report = Report::new();
    report.push("bits", a.bits);
    report.push("pairs", a.pairs);
    report.push_f64("mean_nhd", stats.mean_nhd);
    report.push_f64("std_nhd", stats.std_nhd);
    report.push_f64("collision_rate", stats.collision_rate);
    report.push_f64("ideal_collision_rate", 0.5f64.powi(a.bits.min(1100) as i32));
    emit_report(&mut m, &report, a.out.as_deref());
    finish(m, &a.common, a.out.as_deref())
}

fn nhd_hist_cmd(a: NhdHistArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("nhd-hist", threads);
    m.note("seed", a.seed);
    m.config("pairs", a.pairs);
    m.config("bins", a.bins);
    let codes = load_codes(&mut m, "codes", &a.codes)?;
    let hist = nhd_histogram(&codes, a.pairs, a.bins, a.seed)?;
    emit_report(&mut m, &hist.to_report(), a.out.as_deref());
    finish(m, &a.common, a.out.as_deref())
}

fn purity(assignment: &[usize], labels: &[u32]) -> f64 {
    use std::collections::HashMap;
    let mut counts: HashMap<(usize, u32), usize> = HashMap::new();
    for (&a, &l) in assignment.iter().zip(labels) {
        *counts.entry((a, l)).or_default() += 1;
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for ((a, _), c) in counts {
        let e = best.entry(a).or_default();
        *e = (*e).max(c);
    }
    best.values().sum::<usize>() as f64 / assignment.len() as f64
}

fn cluster_cmd(a: ClusterArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("cluster", threads);
    m.config("s1", a.s1);
    a.ap.record(&mut m);
    let ap = a.ap.config()?;
    let bytes = m.input("model", &a.model)?;
    let state = read_model(&bytes[..])?;
    let d = load_dataset(&mut m, "dataset", &a.data)?;
    let t = Instant::now();
    let vs = continuous_codes(&d.samples, &state)?;
    let clustering = cluster_features(&vs, a.s1, &ap)?;
    m.timing("cluster", t.elapsed().as_secs_f64());
    let mut report = Report::new();
    report.push("n", d.samples.len());
    report.push("n_clusters", clustering.n_clusters());
    report.push("iterations", clustering.iterations);
    if let Some((fine, coarse)) = &d.labels {
        report.push_f64("purity_fine", purity(&clustering.assignment, fine));
        report.push_f64("purity_coarse", purity(&clustering.assignment, coarse));
    }
    let text: String = clustering.assignment.iter().map(|c| format!("{c}\n")).collect();
    m.output("assignment", &a.out, text.into_bytes());
    emit_report(&mut m, &report, None);
    finish(m, &a.common, Some(&a.out))
}

fn gradcheck_cmd(a: GradcheckArgs, threads: usize) -> CliResult {
    let mut m = Manifest::new("gradcheck", threads);
    m.note("seed", a.seed);
    m.config("instances", a.instances);
    m.config("h", a.h);
    m.config("tol", a.tol);
    if !(a.h > 0.0 && a.tol > 0.0) {
        return Err(CliError::Usage("h and tol must be positive".into()));
    }
    let cfg = GradcheckConfig {
        instances: a.instances,
        h: a.h,
        tol: a.tol,
        seed: a.seed,
    };
    let t = Instant::now();
    let results = run_all(&cfg)?;
    m.timing("gradcheck", t.elapsed().as_secs_f64());
    let mut report = Report::new();
    let mut worst: Option<&crh_core::gradcheck::CheckResult> = None;
    for r in &results {
        report.push_f64(format!("{}.max_rel_err", r.name), r.max_rel_err);
        report.push(format!("{}.instances", r.name), r.instances);
        report.push(format!("{}.components", r.name), r.components);
        report.push(format!("{}.redrawn", r.name), r.skipped);
        report.push(format!("{}.passed", r.name), r.passed(a.tol));
        if worst.is_none_or(|w| r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed(a.tol)).collect();
    report.push("passed", failed.is_empty());
    if let Some(w) = worst {
        report.push("worst", format!("{} {:e} at {}", w.name, w.max_rel_err, w.worst));
    }
    emit_report(&mut m, &report, a.out.as_deref());
    finish(m, &a.common, a.out.as_deref())?;
    match failed.first() {
        None => Ok(()),
        Some(r) => Err(CliError::Verify(format!("{} max relative error {:e} at {}", r.name, r.max_rel_err, r.worst))),
    }
}

fn run(cli: Cli) -> CliResult {
    let threads = thread_cap()?;
    match cli.command {
        Command::GenData(a) => gen_data(a, threads),
        Command::Augment(a) => augment_cmd(a, threads),
        Command::Train(a) => train_cmd(a, threads),
        Command::Encode(a) => encode_cmd(a, threads),
        Command::Eval(a) => eval_cmd(a, threads),
        Command::Collision(a) => collision_cmd(a, threads),
        Command::RandStats(a) => rand_stats_cmd(a, threads),
        Command::NhdHist(a) => nhd_hist_cmd(a, threads),
        Command::Cluster(a) => cluster_cmd(a, threads),
        Command::Gradcheck(a) => gradcheck_cmd(a, threads),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors by itself.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crh: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
