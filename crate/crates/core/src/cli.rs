//! Command-line front end: scene synthesis, inference, evaluation,
//! benchmarking and the embedded self-test.
//!
//! Exit codes: 0 success, 2 input/config/format error, 3 numeric error.
//! A self-test with failing checks exits with 1.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{load_flow, save_flow, write_flow_csv, DecodeFrame, DecoderConfig};
use crate::error::{Error, Result};
use crate::loss::{scene_adaptive_loss, three_bucket_loss, write_loss_csv, DEFAULT_K};
use crate::metrics::{evaluate, ObjectClass};
use crate::pipeline::infer;
use crate::pointcloud::{load_scene, save_scene, synth_scene, ClassLabel, SceneConfig, DEFAULT_DYNAMIC_THRESHOLD};
use crate::ssm::{
    scan_blocked, scan_sequential, zoh_discretize, FlowSsmLayer, HiddenState, SsmParams, TokenSequence, ZohMode,
    DEFAULT_BLOCK,
};
use crate::stdcb::{DilationMode, StdcbConfig};
use crate::voxelizer::VoxelGrid;
use crate::weights::{ModelShape, ModelWeights, WeightStore};

pub const THREADS_ENV: &str = "SFKIT_THREADS";

/// Every tunable of a run. Loaded from JSON; missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: VoxelGrid,
    pub scene: SceneConfig,
    pub channels: usize,
    pub encoder_depths: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub decoder_layers: usize,
    pub state: usize,
    pub zoh: ZohMode,
    pub dilation: DilationMode,
    pub decode_frame: DecodeFrame,
    /// Scene generator seed.
    pub seed: u64,
    /// Seed for generated weights.
    pub weight_seed: u64,
    pub k_bins: usize,
    /// Motion threshold for dynamic IoU, meters per frame pair.
    pub iou_threshold: f64,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = StdcbConfig::default();
        Self {
            grid: VoxelGrid::default(),
            scene: SceneConfig::default(),
            channels: backbone.channels,
            encoder_depths: backbone.encoder_depths,
            decoder_depths: backbone.decoder_depths,
            decoder_layers: 1,
            state: 16,
            zoh: ZohMode::Simplified,
            dilation: DilationMode::Gap1,
            decode_frame: DecodeFrame::T,
            seed: 0,
            weight_seed: 0,
            k_bins: DEFAULT_K,
            iou_threshold: DEFAULT_DYNAMIC_THRESHOLD,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            backbone: StdcbConfig {
                channels: self.channels,
                encoder_depths: self.encoder_depths.clone(),
                decoder_depths: self.decoder_depths.clone(),
                dilation: self.dilation,
            },
            decoder: DecoderConfig {
                n_layers: self.decoder_layers,
                channels: self.channels,
                state: self.state,
                head_hidden: self.channels,
                zoh: self.zoh,
                frame: self.decode_frame,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.scene.validate()?;
        self.shape().validate()?;
        if self.k_bins < 2 {
            return Err(Error::InvalidConfig(format!("k_bins must be >= 2, got {}", self.k_bins)));
        }
        if !(self.iou_threshold.is_finite() && self.iou_threshold > 0.0) {
            return Err(Error::InvalidConfig("iou_threshold must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ZohArg {
    Exact,
    Simplified,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DilationArg {
    Gap1,
    Literal,
}

#[derive(Debug, Parser)]
#[command(name = "sfkit", version, about = "Scene-flow toolkit: synthesis, inference, evaluation, benchmarks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Scene seed (synth) or weight seed (infer, export-weights).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[arg(long = "k-bins", global = true)]
    pub k_bins: Option<usize>,
    #[arg(long = "decoder-layers", global = true)]
    pub decoder_layers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub zoh: Option<ZohArg>,
    #[arg(long, global = true, value_enum)]
    pub dilation: Option<DilationArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Keep only the first N configured movers.
        #[arg(long)]
        movers: Option<usize>,
        /// Also export frame t as ASCII PLY.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Predict flow for frame t of a scene.
    Infer {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Load weights instead of seeding them.
        #[arg(long, conflicts_with_all = ["seed_weights", "zero_weights"])]
        weights: Option<PathBuf>,
        /// Seed for generated weights (overrides --seed).
        #[arg(long = "seed-weights")]
        seed_weights: Option<u64>,
        /// Use all-zero weights.
        #[arg(long = "zero-weights")]
        zero_weights: bool,
        /// Also write the flow as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Dump the backbone output tensor as CSV.
        #[arg(long = "dump-tensor")]
        dump_tensor: Option<PathBuf>,
    },
    /// Score a flow file against a scene's ground truth.
    Eval {
        scene: PathBuf,
        flow: PathBuf,
        /// Metrics CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "loss-out")]
        loss_out: Option<PathBuf>,
    },
    /// Time the sequential and blocked scans.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0usize, 256, 1024, 4096, 16384])]
        lengths: Vec<usize>,
        #[arg(long = "d-inner", default_value_t = 32)]
        d_inner: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = DEFAULT_BLOCK)]
        block: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Write a weight file.
    ExportWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        zero: bool,
    },
    /// Run the embedded oracle checks.
    Selftest {
        /// Only run checks whose group contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Also verify that this weight file loads for the configured model.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(k) = g.k_bins {
        cfg.k_bins = k;
    }
    if let Some(n) = g.decoder_layers {
        cfg.decoder_layers = n;
    }
    if let Some(z) = g.zoh {
        cfg.zoh = match z {
            ZohArg::Exact => ZohMode::Exact,
            ZohArg::Simplified => ZohMode::Simplified,
        };
    }
    if let Some(d) = g.dilation {
        cfg.dilation = match d {
            DilationArg::Gap1 => DilationMode::Gap1,
            DilationArg::Literal => DilationMode::Literal,
        };
    }
    if g.threads.is_some() {
        cfg.threads = g.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<i32> {
    let cfg = resolve_config(&cli.global)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let seed = cli.global.seed;
    pool.install(|| match cli.command {
        Command::Synth { out, movers, ply } => cmd_synth(&cfg, seed, movers, &out, ply.as_deref()),
        Command::Infer { scene, out, weights, seed_weights, zero_weights, csv, dump_tensor } => {
            let source = match (weights, zero_weights) {
                (Some(p), _) => WeightSource::File(p),
                (None, true) => WeightSource::Zero,
                (None, false) => WeightSource::Seeded(seed_weights.or(seed).unwrap_or(cfg.weight_seed)),
            };
            cmd_infer(&cfg, &scene, &source, &out, csv.as_deref(), dump_tensor.as_deref())
        }
        Command::Eval { scene, flow, out, loss_out } => cmd_eval(&cfg, &scene, &flow, out.as_deref(), loss_out.as_deref()),
        Command::Bench { out, lengths, d_inner, state, batch, block, reps } => {
            let opts = BenchOptions { lengths, d_inner, state, batch, block, reps, seed: seed.unwrap_or(0) };
            cmd_bench(&opts, out.as_deref())
        }
        Command::ExportWeights { out, zero } => {
            let shape = cfg.shape();
            let w = if zero { ModelWeights::zeros(&shape) } else { ModelWeights::seeded(&shape, seed.unwrap_or(cfg.weight_seed)) };
            w.save(&out)?;
            println!("wrote {} parameters to {}", w.param_count(), out.display());
            Ok(0)
        }
        Command::Selftest { filter, weights } => cmd_selftest(&cfg, filter.as_deref(), weights.as_deref()),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn cmd_synth(cfg: &RunConfig, seed: Option<u64>, movers: Option<usize>, out: &Path, ply: Option<&Path>) -> Result<i32> {
    let mut scene_cfg = cfg.scene.clone();
    if let Some(n) = movers {
        if n > scene_cfg.movers.len() {
            return Err(Error::InvalidConfig(format!(
                "--movers {n} exceeds the {} configured movers",
                scene_cfg.movers.len()
            )));
        }
        scene_cfg.movers.truncate(n);
    }
    let seed = seed.unwrap_or(cfg.seed);
    let scene = synth_scene(&scene_cfg, seed)?;
    save_scene(&scene, out)?;
    for (k, f) in scene.frames.iter().enumerate() {
        println!("frame {k} (tau {:+}): {} points", f.frame_index, f.len());
    }
    for (i, m) in scene_cfg.movers.iter().enumerate() {
        let speed = crate::pointcloud::norm3(m.velocity);
        println!(
            "mover {i}: {} points, center ({}, {}, {}), velocity ({}, {}, {}) m/s, speed {speed:.3} m/s",
            m.points, m.center[0], m.center[1], m.center[2], m.velocity[0], m.velocity[1], m.velocity[2]
        );
    }
    let fd = scene.mask.iter().filter(|l| **l == ClassLabel::ForegroundDynamic).count();
    println!("frame t: {fd} foreground-dynamic points; seed {seed}; wrote {}", out.display());
    if let Some(p) = ply {
        crate::pointcloud::write_ply(scene.frame_t(), create(p)?)?;
    }
    Ok(0)
}

#[derive(Debug, Clone)]
pub enum WeightSource {
    File(PathBuf),
    Seeded(u64),
    Zero,
}

pub fn cmd_infer(
    cfg: &RunConfig,
    scene_path: &Path,
    source: &WeightSource,
    out: &Path,
    csv: Option<&Path>,
    dump: Option<&Path>,
) -> Result<i32> {
    let scene = load_scene(scene_path)?;
    let shape = cfg.shape();
    let weights = match source {
        WeightSource::File(p) => ModelWeights::load(&shape, p)?,
        WeightSource::Seeded(s) => ModelWeights::seeded(&shape, *s),
        WeightSource::Zero => ModelWeights::zeros(&shape),
    };
    let result = infer(&scene, &cfg.grid, &shape, &weights)?;
    save_flow(&result.flow, out)?;
    if let Some(p) = csv {
        write_flow_csv(&result.flow, create(p)?)?;
    }
    if let Some(p) = dump {
        result.features.write_csv(create(p)?)?;
    }
    println!("wrote flow for {} points to {}", result.flow.len(), out.display());
    Ok(0)
}

/// Object class per point: the scene file carries only motion labels, so
/// foreground is scored as `Car` and background as `Background`.
pub fn object_classes(labels: &[ClassLabel]) -> Vec<ObjectClass> {
    labels.iter().map(|l| if l.is_foreground() { ObjectClass::Car } else { ObjectClass::Background }).collect()
}

pub fn cmd_eval(cfg: &RunConfig, scene_path: &Path, flow_path: &Path, out: Option<&Path>, loss_out: Option<&Path>) -> Result<i32> {
    let scene = load_scene(scene_path)?;
    let flow = load_flow(flow_path)?;
    if flow.len() != scene.gt_flow.len() {
        return Err(Error::InvalidInput(format!(
            "flow file has {} vectors, scene frame t has {} points",
            flow.len(),
            scene.gt_flow.len()
        )));
    }
    let classes = object_classes(&scene.mask);
    let mut report = evaluate(&flow, &scene.gt_flow, &scene.mask, &classes, cfg.scene.dt)?;
    report.dynamic_iou = crate::metrics::dynamic_iou(&flow, &scene.gt_flow, cfg.iou_threshold)?;
    let loss = scene_adaptive_loss(&flow, &scene.gt_flow, cfg.k_bins)?;
    let bucket_loss = three_bucket_loss(&flow, &scene.gt_flow, cfg.scene.dt)?;

    print!("{}", report.to_text());
    println!();
    println!("scene-adaptive loss (K = {})", loss.k);
    println!(
        "  alpha {}  r_alpha {}{}",
        loss.threshold.alpha,
        loss.threshold.r_alpha,
        if loss.threshold.fallback { "  (fallback: all static)" } else { "" }
    );
    println!("  static  {} points  term {}", loss.n_static, loss.static_term);
    println!("  dynamic {} points  term {}", loss.n_dynamic, loss.dynamic_term);
    println!("  total {}", loss.total);
    println!("three-bucket loss {bucket_loss}");

    match out {
        Some(p) => report.write_csv(create(p)?)?,
        None => {
            println!();
            report.write_csv(std::io::stdout().lock())?;
        }
    }
    if let Some(p) = loss_out {
        write_loss_csv(&[(scene.seed.to_string(), loss)], create(p)?)?;
    }
    Ok(0)
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub d_inner: usize,
    pub state: usize,
    pub batch: usize,
    pub block: usize,
    pub reps: usize,
    pub seed: u64,
}

pub const BENCH_HEADER: &str = "impl,L,D_inner,S,tokens_per_second";

fn random_seq(rng: &mut ChaCha8Rng, b: usize, l: usize, c: usize, lo: f64, hi: f64) -> Result<TokenSequence> {
    TokenSequence::new(b, l, c, (0..b * l * c).map(|_| rng.random_range(lo..hi)).collect())
}

/// Relative sup-norm distance `|a - b|_inf / max(|b|_inf, tiny)`.
pub fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    num / den
}

pub fn cmd_bench(opts: &BenchOptions, out: Option<&Path>) -> Result<i32> {
    if opts.d_inner == 0 || opts.state == 0 || opts.batch == 0 || opts.block == 0 || opts.reps == 0 {
        return Err(Error::InvalidConfig("bench sizes must be positive".into()));
    }
    let mut rows = vec![BENCH_HEADER.to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for &len in &opts.lengths {
        if len == 0 {
            eprintln!("note: skipping L = 0 (nothing to scan)");
            continue;
        }
        let (b, d, s) = (opts.batch, opts.d_inner, opts.state);
        let a: Vec<f64> = (0..d * s).map(|_| -rng.random_range(0.5..2.0)).collect();
        let bm = random_seq(&mut rng, b, len, s, -1.0, 1.0)?;
        let cm = random_seq(&mut rng, b, len, s, -1.0, 1.0)?;
        let delta = random_seq(&mut rng, b, len, d, 0.001, 0.1)?;
        let x = random_seq(&mut rng, b, len, d, -1.0, 1.0)?;
        let d_skip: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let disc = zoh_discretize(&a, &bm, &delta, ZohMode::Simplified)?;
        let h0 = HiddenState::zeros(b, d, s);

        let (ys, hs) = scan_sequential(&disc, &cm, &d_skip, &x, &h0)?;
        let (yb, hb) = scan_blocked(&disc, &cm, &d_skip, &x, &h0, opts.block)?;
        let gap = relative_gap(&yb.data, &ys.data).max(relative_gap(&hb.data, &hs.data));
        if gap > 1e-10 {
            return Err(Error::Numeric {
                index: len,
                message: format!("blocked scan deviates from sequential by {gap:e} at L = {len}"),
            });
        }

        let tokens = (b * len * opts.reps) as f64;
        let t0 = Instant::now();
        for _ in 0..opts.reps {
            std::hint::black_box(scan_sequential(&disc, &cm, &d_skip, &x, &h0)?);
        }
        let seq_tps = tokens / t0.elapsed().as_secs_f64().max(1e-12);
        let t0 = Instant::now();
        for _ in 0..opts.reps {
            std::hint::black_box(scan_blocked(&disc, &cm, &d_skip, &x, &h0, opts.block)?);
        }
        let blk_tps = tokens / t0.elapsed().as_secs_f64().max(1e-12);
        rows.push(format!("sequential,{len},{d},{s},{seq_tps:.1}"));
        rows.push(format!("blocked,{len},{d},{s},{blk_tps:.1}"));
    }
    let text = rows.join("\n") + "\n";
    match out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(0)
}

type Check = fn() -> std::result::Result<(), String>;

fn checks() -> Vec<(&'static str, &'static str, Check)> {
    vec![
        ("serialization", "round trip", selftest::serialization_round_trip),
        ("serialization", "morton", selftest::morton_round_trip),
        ("ssm", "scan equivalence", selftest::scan_equivalence),
        ("ssm", "finite-difference gradients", selftest::fd_gradients),
        ("ssm", "zoh second order", selftest::zoh_second_order),
        ("pointcloud", "scene file round trip", selftest::scene_round_trip),
        ("stdcb", "zero gate scaling", selftest::zero_gate),
        ("loss", "99 static + 1 dynamic", selftest::loss_construction),
        ("loss", "uniform fallback", selftest::loss_fallback),
        ("metrics", "3-4-5", selftest::metrics_345),
        ("weights", "file round trip", selftest::weights_round_trip),
    ]
}

pub fn cmd_selftest(cfg: &RunConfig, filter: Option<&str>, weights: Option<&Path>) -> Result<i32> {
    if let Some(p) = weights {
        let w = ModelWeights::load(&cfg.shape(), p)?;
        println!("PASS weights/load {} ({} parameters)", p.display(), w.param_count());
    }
    let mut failures = Vec::new();
    let mut ran = 0;
    for (group, name, check) in checks() {
        if filter.is_some_and(|f| !group.contains(f)) {
            continue;
        }
        ran += 1;
        match check() {
            Ok(()) => println!("PASS {group}/{name}"),
            Err(msg) => {
                println!("FAIL {group}/{name}: {msg}");
                failures.push(format!("{group}/{name}"));
            }
        }
    }
    if ran == 0 && weights.is_none() {
        return Err(Error::InvalidInput(format!("no checks match filter {:?}", filter.unwrap_or(""))));
    }
    if failures.is_empty() {
        println!("{ran} check(s) passed");
        Ok(0)
    } else {
        println!("{} of {ran} check(s) failed: {}", failures.len(), failures.join(", "));
        Ok(1)
    }
}

mod selftest {
    use super::*;
    use crate::loss::{build_histogram, select_threshold};
    use crate::metrics::epe;
    use crate::nn::{FeatureMatrix, Initializer};
    use crate::pointcloud::{decode_scene, encode_scene, FlowField};
    use crate::serialization::{deserialize, morton_decode, morton_encode, serialize};
    use crate::stdcb::{temporal_gated_block, GateWeights, SfsmWeights};
    use crate::voxelizer::{SparseTensor4D, VoxelCoord};

    type R = std::result::Result<(), String>;

    fn ensure(ok: bool, msg: impl FnOnce() -> String) -> R {
        if ok {
            Ok(())
        } else {
            Err(msg())
        }
    }

    fn err(e: Error) -> String {
        e.to_string()
    }

    pub fn serialization_round_trip() -> R {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2000;
        let coords: Vec<VoxelCoord> =
            (0..n).map(|_| VoxelCoord::new(rng.random_range(0..64), rng.random_range(0..64), rng.random_range(0..16))).collect();
        let rows = FeatureMatrix::from_vec(n, 3, (0..3 * n).map(|_| rng.random::<f64>()).collect()).map_err(err)?;
        let back = deserialize(&serialize(&rows, &coords).map_err(err)?).map_err(err)?;
        ensure(back == rows, || "deserialize(serialize(x)) != x".into())
    }

    pub fn morton_round_trip() -> R {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let c = VoxelCoord::new(rng.random_range(0..1 << 21), rng.random_range(0..1 << 21), rng.random_range(0..1 << 21));
            let back = morton_decode(morton_encode(c).map_err(err)?);
            if back != c {
                return Err(format!("{c:?} decoded as {back:?}"));
            }
        }
        Ok(())
    }

    pub fn scan_equivalence() -> R {
        let opts = BenchOptions { lengths: vec![], d_inner: 4, state: 8, batch: 2, block: 64, reps: 1, seed: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for len in [1, 2, 255, 1000] {
            let (b, d, s) = (opts.batch, opts.d_inner, opts.state);
            let a: Vec<f64> = (0..d * s).map(|_| -rng.random_range(0.5..2.0)).collect();
            let bm = random_seq(&mut rng, b, len, s, -1.0, 1.0).map_err(err)?;
            let cm = random_seq(&mut rng, b, len, s, -1.0, 1.0).map_err(err)?;
            let delta = random_seq(&mut rng, b, len, d, 0.001, 0.5).map_err(err)?;
            let x = random_seq(&mut rng, b, len, d, -1.0, 1.0).map_err(err)?;
            let h0 = HiddenState::new(b, d, s, (0..b * d * s).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(err)?;
            let dsk = vec![0.5; d];
            let disc = zoh_discretize(&a, &bm, &delta, ZohMode::Simplified).map_err(err)?;
            let (ys, _) = scan_sequential(&disc, &cm, &dsk, &x, &h0).map_err(err)?;
            let (yb, _) = scan_blocked(&disc, &cm, &dsk, &x, &h0, opts.block).map_err(err)?;
            let gap = relative_gap(&yb.data, &ys.data);
            ensure(gap <= 1e-10, || format!("L = {len}: relative gap {gap:e}"))?;
        }
        Ok(())
    }

    pub fn zoh_second_order() -> R {
        let a = vec![-1.3];
        let b = TokenSequence::new(1, 1, 1, vec![0.7]).map_err(err)?;
        let gap = |dt: f64| -> std::result::Result<f64, String> {
            let d = TokenSequence::new(1, 1, 1, vec![dt]).map_err(err)?;
            let e = zoh_discretize(&a, &b, &d, ZohMode::Exact).map_err(err)?;
            let s = zoh_discretize(&a, &b, &d, ZohMode::Simplified).map_err(err)?;
            Ok((e.b_bar[0] - s.b_bar[0]).abs())
        };
        let ratio = gap(0.02)? / gap(0.01)?;
        ensure((ratio - 4.0).abs() <= 0.4, || format!("halving ratio {ratio}"))
    }

    struct FdCase {
        params: SsmParams,
        x: TokenSequence,
        f: TokenSequence,
        h0: HiddenState,
        r: Vec<f64>,
    }

    impl FdCase {
        fn loss(&self, mode: ZohMode) -> std::result::Result<f64, String> {
            let layer = FlowSsmLayer::new(self.params.clone(), mode);
            let (y, _) = layer.forward(&self.x, &self.f, &self.h0).map_err(err)?;
            Ok(y.data.iter().zip(&self.r).map(|(a, b)| a * b).sum())
        }
    }

    pub fn fd_gradients() -> R {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, d, s, c) = (6, 4, 3, 2);
        let mut init = Initializer::new(5);
        let mut case = FdCase {
            params: SsmParams::seeded(&mut init, d, s, c),
            x: random_seq(&mut rng, 1, l, d, -1.0, 1.0).map_err(err)?,
            f: random_seq(&mut rng, 1, l, c, -1.0, 1.0).map_err(err)?,
            h0: HiddenState::new(1, d, s, (0..d * s).map(|_| rng.random_range(-0.5..0.5)).collect()).map_err(err)?,
            r: (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        for mode in [ZohMode::Simplified, ZohMode::Exact] {
            let mut layer = FlowSsmLayer::new(case.params.clone(), mode);
            layer.forward_recorded(&case.x, &case.f, &case.h0).map_err(err)?;
            let dy = TokenSequence::new(1, l, d, case.r.clone()).map_err(err)?;
            let g = layer.backward(&dy, None).map_err(err)?;
            let targets: [(&str, &[f64], fn(&mut FdCase) -> &mut Vec<f64>); 9] = [
                ("x", &g.x.data, |c| &mut c.x.data),
                ("f_offset", &g.f_offset.data, |c| &mut c.f.data),
                ("h0", &g.h0.data, |c| &mut c.h0.data),
                ("a_log", &g.a_log, |c| &mut c.params.a_log),
                ("d_skip", &g.d_skip, |c| &mut c.params.d_skip),
                ("w_delta", &g.w_delta, |c| &mut c.params.w_delta),
                ("delta_bias", &g.delta_bias, |c| &mut c.params.delta_bias),
                ("w_b", &g.w_b, |c| &mut c.params.w_b),
                ("w_c", &g.w_c, |c| &mut c.params.w_c),
            ];
            let h = 1e-6;
            for (name, analytic, field) in targets {
                for (i, an) in analytic.iter().enumerate() {
                    let orig = field(&mut case)[i];
                    field(&mut case)[i] = orig + h;
                    let up = case.loss(mode)?;
                    field(&mut case)[i] = orig - h;
                    let down = case.loss(mode)?;
                    field(&mut case)[i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let tol = 1e-5 * an.abs().max(fd.abs()).max(1e-3);
                    if (an - fd).abs() > tol {
                        return Err(format!("{mode:?} d/d{name}[{i}]: analytic {an}, finite difference {fd}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn scene_round_trip() -> R {
        let cfg = SceneConfig { background_points: 200, ..Default::default() };
        let scene = synth_scene(&cfg, 9).map_err(err)?;
        let back = decode_scene(&encode_scene(&scene).map_err(err)?).map_err(err)?;
        ensure(back == scene, || "decoded scene differs".into())
    }

    pub fn zero_gate() -> R {
        let entries = vec![([0, 1, 2, 3], vec![2.0, -1.0]), ([1, 1, 2, 3], vec![0.5, 4.0])];
        let s = SparseTensor4D::from_entries(2, 5, entries).map_err(err)?;
        let mut init = Initializer::new(6);
        let sfsm = SfsmWeights::seeded(&mut init, 2);
        let (sp, _) = temporal_gated_block(&s, &s, &s, &sfsm, &GateWeights::zeros(2)).map_err(err)?;
        let expect: Vec<f64> = s.data().iter().map(|v| 1.5 * v).collect();
        ensure(sp.data() == expect.as_slice(), || format!("got {:?}", sp.data()))
    }

    pub fn loss_construction() -> R {
        let mut gt = vec![[0.0; 3]; 99];
        gt.push([2.0, 0.0, 0.0]);
        let gt = FlowField::new(gt);
        let mut pred = gt.clone();
        pred.vectors[99][0] += 1.0;
        let l = scene_adaptive_loss(&pred, &gt, 100).map_err(err)?;
        ensure(l.threshold.alpha == 1 && l.n_dynamic == 1 && l.total == 1.0, || format!("{l:?}"))
    }

    pub fn loss_fallback() -> R {
        let gt = FlowField::new((0..100).map(|j| [(j as f64 + 0.5) / 100.0, 0.0, 0.0]).collect());
        let t = select_threshold(&build_histogram(&gt, 100).map_err(err)?);
        ensure(t.fallback && t.alpha == 100, || format!("{t:?}"))
    }

    pub fn metrics_345() -> R {
        let e = epe(&FlowField::new(vec![[3.0, 4.0, 0.0]]), &FlowField::zeros(1)).map_err(err)?;
        ensure(e == [5.0], || format!("{e:?}"))
    }

    pub fn weights_round_trip() -> R {
        let shape = RunConfig { channels: 4, state: 4, ..Default::default() }.shape();
        let w = ModelWeights::seeded(&shape, 8);
        let store = WeightStore::decode(&w.to_store().map_err(err)?.encode()).map_err(err)?;
        let back = ModelWeights::from_store(&shape, &store).map_err(err)?;
        ensure(back == w, || "weights changed in round trip".into())
    }
}
