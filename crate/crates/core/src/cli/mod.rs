//! Run configuration, checkpoints and the `gen`, `train`, `eval`,
//! `gradcheck` and `bench` commands.

pub mod bench;
pub mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnFlavor, GateGranularity, GatedAxialLayer, TransformerLayerConfig};
use crate::data::{self, Sample, SynthSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport};
use crate::model::{parse, Model, ModelConfig, Variant};
use crate::nn::Builder;
use crate::tensor::{Graph, OpKind, ParamStore, Tensor};
use crate::train::{self, EvalReport, TrainConfig, TrainHistory, THRESHOLD};

pub use bench::BenchRow;

pub const METRICS_FILE: &str = "metrics.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.axsg";
pub const PREDICTIONS_DIR: &str = "predictions";

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthSpec,
    /// Corpus read by `train` and `eval`.
    pub corpus: PathBuf,
    /// Output directory of every command.
    pub out: PathBuf,
    /// Checkpoint read by `eval`; defaults to `<out>/checkpoint.axsg`.
    pub checkpoint: Option<PathBuf>,
    /// Share of the corpus used for training; 1 trains and evaluates on everything.
    pub train_fraction: f64,
    pub bench_sizes: Vec<usize>,
    pub bench_channels: usize,
    pub gradcheck_eps: f64,
    pub gradcheck_tol: f64,
    /// Include the micro-MedT in `gradcheck`.
    pub gradcheck_model: bool,
    /// Backward rule to corrupt in `gradcheck` (negative control).
    pub gradcheck_fault: Option<OpKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let data = SynthSpec {
            img_size: model.img_size,
            ..SynthSpec::default()
        };
        Self {
            model,
            train: TrainConfig::default(),
            data,
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("run"),
            checkpoint: None,
            train_fraction: 0.8,
            bench_sizes: vec![8, 16, 32, 64],
            bench_channels: 1,
            gradcheck_eps: 1e-6,
            gradcheck_tol: 1e-5,
            gradcheck_model: true,
            gradcheck_fault: None,
        }
    }
}

const OWN_KEYS: [&str; 10] = [
    "corpus",
    "out",
    "checkpoint",
    "train_fraction",
    "bench_sizes",
    "bench_channels",
    "gradcheck_eps",
    "gradcheck_tol",
    "gradcheck_model",
    "gradcheck_fault",
];

impl RunConfig {
    /// Every accepted key.
    pub fn keys() -> Vec<&'static str> {
        ModelConfig::KEYS
            .iter()
            .chain(&TrainConfig::KEYS)
            .chain(&SynthSpec::KEYS)
            .chain(&OWN_KEYS)
            .copied()
            .collect()
    }

    /// Parses `key=value` lines; `#` starts a comment. Unknown keys and
    /// malformed values are rejected with their line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Applies one setting. `seed` seeds the model and the shuffle,
    /// `data_seed` the generator; `img_size` applies to model and data.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                self.model.seed = parse(key, value)?;
                self.train.seed = self.model.seed;
            }
            "img_size" => {
                self.model.img_size = parse(key, value)?;
                self.data.img_size = self.model.img_size;
            }
            "corpus" => self.corpus = PathBuf::from(value),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "bench_sizes" => {
                self.bench_sizes = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "bench_channels" => self.bench_channels = parse(key, value)?,
            "gradcheck_eps" => self.gradcheck_eps = parse(key, value)?,
            "gradcheck_tol" => self.gradcheck_tol = parse(key, value)?,
            "gradcheck_model" => self.gradcheck_model = parse(key, value)?,
            "gradcheck_fault" => {
                self.gradcheck_fault = match value {
                    "" | "none" => None,
                    name => Some(OpKind::from_name(name).ok_or_else(|| {
                        Error::Config(format!("gradcheck_fault: unknown op {name:?}"))
                    })?),
                }
            }
            _ => {
                let known = self.model.set(key, value)? || self.train.set(key, value)? || self.data.set(key, value)?;
                if !known {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Every setting in [`RunConfig::keys`] order; feeding them back through
    /// [`RunConfig::set`] reproduces the config.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.model.entries();
        out.extend(self.train.entries());
        out.extend(self.data.entries());
        let fault = self.gradcheck_fault.map_or("none", |k| k.name());
        let sizes: Vec<_> = self.bench_sizes.iter().map(|s| s.to_string()).collect();
        out.extend([
            ("corpus", self.corpus.display().to_string()),
            ("out", self.out.display().to_string()),
            ("checkpoint", self.checkpoint_path().display().to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("bench_sizes", sizes.join(",")),
            ("bench_channels", self.bench_channels.to_string()),
            ("gradcheck_eps", self.gradcheck_eps.to_string()),
            ("gradcheck_tol", self.gradcheck_tol.to_string()),
            ("gradcheck_model", self.gradcheck_model.to_string()),
            ("gradcheck_fault", fault.to_string()),
        ]);
        out
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn emit(log: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(log, "{}", line.as_ref()).map_err(|e| Error::io("<output>", e))
}

/// Writes the synthetic corpus to `cfg.out`. Returns the sample count.
pub fn cmd_gen(cfg: &RunConfig, log: &mut dyn Write) -> Result<usize> {
    let samples = data::generate(&cfg.data)?;
    create_dir(&cfg.out)?;
    data::write_corpus(&cfg.out, &samples)?;
    emit(
        log,
        format!(
            "wrote {} samples of {}x{} to {}",
            samples.len(),
            cfg.data.img_size,
            cfg.data.img_size,
            cfg.out.display()
        ),
    )?;
    Ok(samples.len())
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<Sample>> {
    if !cfg.corpus.join(data::MANIFEST).is_file() {
        return Err(Error::Config(format!(
            "no corpus at {} (missing {})",
            cfg.corpus.display(),
            data::MANIFEST
        )));
    }
    data::read_corpus(&cfg.corpus)
}

/// Train/test split of the corpus, or the whole corpus twice when it is too
/// small to split or `train_fraction >= 1`.
pub fn split_corpus(cfg: &RunConfig, samples: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if samples.len() < 2 || cfg.train_fraction >= 1.0 {
        return Ok((samples.clone(), samples));
    }
    data::split(&samples, cfg.train_fraction, cfg.train.seed)
}

/// Trains `cfg.model` on the corpus, writing `metrics.txt` and
/// `checkpoint.axsg` under `cfg.out`.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainHistory> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let samples = load_corpus(cfg)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("corpus {} is empty", cfg.corpus.display())));
    }
    let (train_set, test_set) = split_corpus(cfg, samples)?;
    let mut model = Model::<f32>::new(&cfg.model)?;
    create_dir(&cfg.out)?;
    let metrics_path = cfg.out.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let ckpt = cfg.checkpoint_path();
    emit(
        log,
        format!(
            "variant={} params={} train={} test={}",
            cfg.model.variant,
            model.count_parameters(),
            train_set.len(),
            test_set.len()
        ),
    )?;
    train::train(&mut model, &train_set, &test_set, &cfg.train, |p| {
        let mut lines = vec![p.record.to_string()];
        lines.extend(p.eval.map(|e| e.to_string()));
        for line in &lines {
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            emit(log, line)?;
        }
        if p.eval.is_some() || p.last {
            checkpoint::save(p.model, &ckpt)?;
        }
        Ok(())
    })
}

/// Scores a checkpoint on the corpus and writes thresholded masks to
/// `<out>/predictions/<id>.pgm`.
pub fn cmd_eval(cfg: &RunConfig, log: &mut dyn Write) -> Result<EvalReport> {
    let model: Model<f32> = checkpoint::load(&cfg.checkpoint_path())?;
    let samples = load_corpus(cfg)?;
    let size = model.config().img_size;
    if let Some(s) = samples.iter().find(|s| s.image.shape() != [1, 1, size, size]) {
        return Err(Error::Config(format!(
            "sample {} is {:?} but the checkpoint expects {size}x{size} images",
            s.id,
            s.image.shape()
        )));
    }
    let (report, preds) = train::evaluate(&model, &samples, cfg.train.batch_size)?;
    let dir = cfg.out.join(PREDICTIONS_DIR);
    create_dir(&dir)?;
    for ((id, m), p) in report.per_image.iter().zip(&preds) {
        emit(log, format!("image={id} f1={:.6} iou={:.6} loss={:.6}", m.f1, m.iou, m.loss))?;
        let mask = p.map(|v| if v as f64 >= THRESHOLD { 1.0 } else { 0.0 });
        data::save_pgm(&mask, &dir.join(format!("{id}.pgm")))?;
    }
    let (m, pooled) = (report.mean, report.pooled);
    emit(
        log,
        format!(
            "mean f1={:.6} iou={:.6} loss={:.6} pooled_f1={:.6} pooled_iou={:.6}",
            m.f1, m.iou, m.loss, pooled.f1, pooled.iou
        ),
    )?;
    Ok(report)
}

/// Worst relative error per parameter class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassError {
    pub class: &'static str,
    pub entries: usize,
    pub max_rel_error: f64,
}

/// Class of a parameter from its name: attention projections, relative
/// tables, gates, normalization, or convolution.
pub fn param_class(name: &str) -> &'static str {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "w_q" | "w_k" | "w_v" => "qkv",
        "r_q" | "r_k" | "r_v" => "relpos",
        "g_q" | "g_k" | "g_v1" | "g_v2" => "gate",
        "gamma" | "beta" => "norm",
        _ => "conv",
    }
}

pub fn class_errors(report: &GradCheckReport) -> Vec<ClassError> {
    let mut out: Vec<ClassError> = Vec::new();
    for p in &report.params {
        let class = param_class(&p.name);
        match out.iter_mut().find(|c| c.class == class) {
            Some(c) => {
                c.entries += p.entries;
                c.max_rel_error = c.max_rel_error.max(p.max_rel_error);
            }
            None => out.push(ClassError {
                class,
                entries: p.entries,
                max_rel_error: p.max_rel_error,
            }),
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradcheckSummary {
    pub eps: f64,
    pub tol: f64,
    pub ops: Vec<(OpKind, GradCheckReport)>,
    pub layer: GradCheckReport,
    pub model: Option<GradCheckReport>,
    /// Ops whose isolated probe fails.
    pub faulty_ops: Vec<OpKind>,
}

impl GradcheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.reports().map(|r| r.max_rel_error()).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    fn reports(&self) -> impl Iterator<Item = &GradCheckReport> {
        self.ops.iter().map(|(_, r)| r).chain([&self.layer]).chain(&self.model)
    }

    /// Parameter with the largest error across the layer and model checks.
    pub fn worst_param(&self) -> Option<&gradcheck::ParamCheck> {
        [&self.layer]
            .into_iter()
            .chain(&self.model)
            .filter_map(|r| r.worst())
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Configuration of the micro-MedT used by `gradcheck`.
pub fn micro_medt(seed: u64, granularity: GateGranularity) -> ModelConfig {
    ModelConfig {
        variant: Variant::Medt,
        img_size: 16,
        in_channels: 1,
        base_channels: 2,
        heads: 2,
        global_depth: 2,
        local_depth: 5,
        patch_grid: 2,
        gate_granularity: granularity,
        seed,
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn fault_hook(fault: Option<OpKind>) -> impl FnMut(&mut Graph<f64>) {
    move |g| {
        if let Some(k) = fault {
            g.corrupt_backward(k);
        }
    }
}

/// One gated axial transformer layer, 4 -> 8 channels on a 6x6 map, stride 2.
pub fn check_gated_layer(seed: u64, eps: f64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let layer = GatedAxialLayer::new(
        &mut Builder::new(&mut store, seed),
        "layer",
        TransformerLayerConfig {
            channels_in: 4,
            channels_out: 8,
            heads: 2,
            stride: 2,
            flavor: AttnFlavor::Gated,
            granularity: GateGranularity::PerLayer,
            height: 6,
            width: 6,
        },
    )?;
    // Non-unit gates so every gate factor is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for set in layer.gate_sets() {
        set.set_values(&mut store, [0; 4].map(|_| rng.random_range(0.5..1.5)));
    }
    let x = random(&[2, 4, 6, 6], &mut rng)?;
    let c = random(&[2, 8, 3, 3], &mut rng)?;
    gradcheck::grad_check_with(
        &mut store,
        eps,
        |g, s| {
            let xi = g.input(x.clone());
            let y = layer.forward(g, s, xi)?;
            let ci = g.input(c.clone());
            let p = g.mul(y, ci)?;
            Ok(g.sum(p))
        },
        fault_hook(fault),
    )
}

/// BCE of the full micro-MedT on a random batch of two.
pub fn check_micro_medt(config: &ModelConfig, eps: f64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    for set in model.net.gate_sets() {
        set.set_values(&mut model.params, [0; 4].map(|_| rng.random_range(0.5..1.5)));
    }
    let n = config.img_size;
    let x = random(&[2, 1, n, n], &mut rng)?;
    let y = random(&[2, 1, n, n], &mut rng)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let net = model.net.clone();
    gradcheck::grad_check_with(
        &mut model.params,
        eps,
        |g, s| {
            let xi = g.input(x.clone());
            let p = net.forward(g, s, xi)?;
            g.bce_loss(p, y.clone())
        },
        fault_hook(fault),
    )
}

/// Finite-difference check of every op, one gated layer and (optionally)
/// the micro-MedT. The caller decides the exit status from
/// [`GradcheckSummary::passes`].
pub fn cmd_gradcheck(cfg: &RunConfig, log: &mut dyn Write) -> Result<GradcheckSummary> {
    let (eps, tol, fault) = (cfg.gradcheck_eps, cfg.gradcheck_tol, cfg.gradcheck_fault);
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("gradcheck_eps must be positive, got {eps}")));
    }
    emit(log, format!("gradcheck eps={eps:e} tol={tol:e}"))?;
    if let Some(k) = fault {
        emit(log, format!("injected fault: backward of {}", k.name()))?;
    }
    let ops = gradcheck::check_all_ops(eps, fault)?;
    for (k, r) in &ops {
        emit(log, format!("op {:<16} max_rel_err={:.3e}", k.name(), r.max_rel_error()))?;
    }
    let faulty_ops = gradcheck::localize(&ops, tol);

    let layer = check_gated_layer(cfg.model.seed, eps, fault)?;
    emit(log, format!("gated_axial_layer entries={} max_rel_err={:.3e}", layer.entries(), layer.max_rel_error()))?;
    for c in class_errors(&layer) {
        emit(log, format!("  class {:<7} entries={:<6} max_rel_err={:.3e}", c.class, c.entries, c.max_rel_error))?;
    }
    let model = if cfg.gradcheck_model {
        let micro = micro_medt(cfg.model.seed, cfg.model.gate_granularity);
        let r = check_micro_medt(&micro, eps, fault)?;
        emit(log, format!("micro_medt entries={} max_rel_err={:.3e}", r.entries(), r.max_rel_error()))?;
        for c in class_errors(&r) {
            emit(log, format!("  class {:<7} entries={:<6} max_rel_err={:.3e}", c.class, c.entries, c.max_rel_error))?;
        }
        Some(r)
    } else {
        None
    };
    let summary = GradcheckSummary {
        eps,
        tol,
        ops,
        layer,
        model,
        faulty_ops,
    };
    if summary.passes() {
        emit(log, format!("PASS max_rel_err={:.3e}", summary.max_rel_error()))?;
    } else {
        let worst = summary.worst_param().map_or("-".to_string(), |p| p.name.clone());
        let ops: Vec<_> = summary.faulty_ops.iter().map(|k| k.name()).collect();
        emit(
            log,
            format!(
                "FAIL max_rel_err={:.3e} worst_param={worst} faulty_ops={}",
                summary.max_rel_error(),
                if ops.is_empty() { "-".to_string() } else { ops.join(",") }
            ),
        )?;
    }
    Ok(summary)
}

/// MAC table for every configured size; errors if any measured count
/// differs from its closed form.
pub fn cmd_bench(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<BenchRow>> {
    if let Some(&s) = cfg.bench_sizes.iter().find(|&&s| s == 0 || s > bench::MAX_FULL_SIDE) {
        return Err(Error::Config(format!(
            "bench size {s} is outside 1..={} allowed for full attention",
            bench::MAX_FULL_SIDE
        )));
    }
    emit(log, format!("channels={} (analytic per unit channel: full 2*(s^2)^2, axial 2*s^2*s)", cfg.bench_channels))?;
    emit(log, bench::HEADER)?;
    let mut rows = Vec::with_capacity(cfg.bench_sizes.len());
    for &s in &cfg.bench_sizes {
        let row = bench::bench_side(s, cfg.bench_channels, cfg.model.seed)?;
        emit(log, row.to_string())?;
        if !row.exact() {
            return Err(Error::invalid("bench", format!("measured MACs differ from the closed form at s={s}")));
        }
        rows.push(row);
    }
    for w in rows.windows(2) {
        if w[1].side == 2 * w[0].side {
            emit(
                log,
                format!(
                    "s {}->{}: full x{} axial x{} wall-time x{:.2}",
                    w[0].side,
                    w[1].side,
                    w[1].full_macs / w[0].full_macs,
                    w[1].axial_macs / w[0].axial_macs,
                    w[1].full_secs / w[0].full_secs.max(1e-9)
                ),
            )?;
        }
    }
    Ok(rows)
}
