//! Library side of the `shifteq` command-line tool.
//!
//! Exit codes: 0 when every positive suite passed and every counterexample
//! suite failed as expected, 1 when some suite missed its expectation, 2 for
//! configuration or I/O errors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use shifteq::attention::{gsa_poly, window_attention_poly, AttentionParams, WindowSpec};
use shifteq::conv::ConvFilter;
use shifteq::harness::report::{csv_rows, AuditReport, CSV_HEADER};
use shifteq::harness::suites::{run_suite, SuiteName, SuiteSettings};
use shifteq::harness::ShiftSampler;
use shifteq::model::{argmax, Model, ModelSpec, Variant};
use shifteq::polyphase::anchor;
use shifteq::{NormOrder, Rng, Shift2D, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SUITE_FAILED: i32 = 1;
pub const EXIT_BAD_CONFIG: i32 = 2;

/// Environment variable consulted when neither the command line nor the
/// config sets a seed.
pub const SEED_ENV: &str = "SHIFTEQ_SEED";

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, unreadable input or unwritable output.
    Config(String),
    /// Failure while running an operation on a valid configuration.
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_BAD_CONFIG,
            CliError::Run(_) => EXIT_SUITE_FAILED,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Run(m) => write!(f, "run error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err(e: impl fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
}

fn default_model() -> ModelSpec {
    ModelSpec::new(Variant::VitPoly)
}

fn default_trials() -> usize {
    50
}

fn default_inputs() -> usize {
    16
}

fn default_worst_of_n() -> usize {
    30
}

fn default_variance_sampler() -> ShiftSampler {
    ShiftSampler::exhaustive(-5, 5)
}

/// The JSON document read by `audit --config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    pub suites: Vec<String>,
    #[serde(default)]
    pub sampler: ShiftSampler,
    #[serde(default = "default_variance_sampler")]
    pub variance_sampler: ShiftSampler,
    #[serde(default)]
    pub output: OutputConfig,
    /// Per-suite tolerance overrides, keyed by suite name.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    /// Seeds suite inputs; model weights use `model.seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_inputs")]
    pub inputs: usize,
    #[serde(default = "default_worst_of_n")]
    pub worst_of_n: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(config_err)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Parsed suite names, in config order.
    pub fn suite_names(&self) -> Result<Vec<SuiteName>, CliError> {
        self.suites.iter().map(|s| s.parse::<SuiteName>().map_err(config_err)).collect()
    }

    fn check(&self) -> Result<(), CliError> {
        if self.suites.is_empty() {
            return Err(config_err("no suites selected"));
        }
        self.suite_names()?;
        for (name, tol) in &self.tolerances {
            name.parse::<SuiteName>().map_err(config_err)?;
            if !(tol.is_finite() && *tol >= 0.0) {
                return Err(config_err(format!("tolerance for {name} must be finite and non-negative")));
            }
        }
        let [_, h, w] = self.model.image;
        self.sampler.validate(h, w).map_err(config_err)?;
        self.variance_sampler.validate(h, w).map_err(config_err)?;
        for (name, v) in [("trials", self.trials), ("inputs", self.inputs), ("worst_of_n", self.worst_of_n)] {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Seed precedence: explicit override, then config, then `SHIFTEQ_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        env_seed().map(|s| s.unwrap_or(0))
    }
}

/// Reads `SHIFTEQ_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| config_err(format!("{SEED_ENV}={v:?} is not an unsigned integer")))
        }
        Err(_) => Ok(None),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: String,
    pub expect_failure: bool,
    pub meets_expectation: bool,
}

/// Run-level metadata. The timestamp lives here and nowhere else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEnv {
    pub generated_at: String,
    pub version: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOutput {
    pub passed: bool,
    pub outcomes: Vec<SuiteOutcome>,
    pub reports: Vec<AuditReport>,
    pub env: RunEnv,
}

impl AuditOutput {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_SUITE_FAILED
        }
    }

    pub fn render(&self, format: Format) -> Result<String, CliError> {
        match format {
            Format::Json => serde_json::to_string_pretty(self).map(|s| s + "\n").map_err(run_err),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(CSV_HEADER).map_err(run_err)?;
                for r in &self.reports {
                    for row in csv_rows(r) {
                        w.write_record(&row).map_err(run_err)?;
                    }
                }
                String::from_utf8(w.into_inner().map_err(run_err)?).map_err(run_err)
            }
        }
    }
}

/// Runs every suite in `cfg` with the given global seed.
pub fn run_audit(cfg: &RunConfig, seed: u64) -> Result<AuditOutput, CliError> {
    let mut reports = Vec::new();
    let mut outcomes = Vec::new();
    for name in cfg.suite_names()? {
        let settings = SuiteSettings {
            trials: cfg.trials,
            seed,
            tolerance: cfg.tolerances.get(name.as_str()).copied(),
            model: cfg.model.clone(),
            sampler: cfg.sampler.clone(),
            variance_sampler: cfg.variance_sampler.clone(),
            inputs: cfg.inputs,
            worst_of_n: cfg.worst_of_n,
        };
        let report = run_suite(name, &settings).map_err(run_err)?;
        outcomes.push(SuiteOutcome {
            suite: name.to_string(),
            expect_failure: report.expect_failure,
            meets_expectation: report.meets_expectation(),
        });
        reports.push(report);
    }
    Ok(AuditOutput {
        passed: outcomes.iter().all(|o| o.meets_expectation),
        outcomes,
        reports,
        env: RunEnv {
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
        },
    })
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(text: &str, path: Option<&Path>) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| config_err(format!("cannot write {}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(run_err),
    }
}

/// One model's view of the demo input pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoRow {
    pub variant: Variant,
    pub logits: Tensor,
    pub shifted_logits: Tensor,
    pub residual: f64,
    pub class: usize,
    pub shifted_class: usize,
}

/// Evaluates the baseline and poly form of `variant` on a seeded input and
/// its shift by `g`. Both models share weights drawn from `seed`.
pub fn demo_rows(variant: Variant, seed: u64, g: Shift2D) -> Result<Vec<DemoRow>, CliError> {
    let pair = if variant.is_poly() { [variant.counterpart(), variant] } else { [variant, variant.counterpart()] };
    let mut rows = Vec::new();
    for v in pair {
        let model = Model::build(ModelSpec::new(v).with_seed(seed)).map_err(config_err)?;
        let x = model.sample_input(&mut Rng::with_stream(seed, 1));
        let logits = model.logits(&x).map_err(run_err)?;
        let shifted_logits = model.logits(&x.circular_shift(g).map_err(run_err)?).map_err(run_err)?;
        rows.push(DemoRow {
            variant: v,
            residual: logits.max_abs_diff(&shifted_logits).map_err(run_err)?,
            class: argmax(&logits),
            shifted_class: argmax(&shifted_logits),
            logits,
            shifted_logits,
        });
    }
    Ok(rows)
}

fn fmt_vec(t: &Tensor) -> String {
    let parts: Vec<String> = t.data().iter().map(|v| format!("{v:+.6}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn render_demo(rows: &[DemoRow], seed: u64, g: Shift2D) -> String {
    let mut out = format!("seed {seed}, shift {g}\n");
    for r in rows {
        let name = r.variant.name();
        out += &format!("{name:>10}  logits(x)   {}\n", fmt_vec(&r.logits));
        out += &format!("{name:>10}  logits(g.x) {}\n", fmt_vec(&r.shifted_logits));
        out += &format!(
            "{name:>10}  max residual {:.3e}  class {} -> {}{}\n",
            r.residual,
            r.class,
            r.shifted_class,
            if r.class == r.shifted_class { "" } else { "  (changed)" }
        );
    }
    out
}

/// Median wall-clock seconds of one call to each benchmarked operator.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub anchor: f64,
    pub window_attention_poly: f64,
    pub gsa_poly: f64,
}

const BENCH_CHANNELS: usize = 16;
const BENCH_STRIDE: usize = 2;

fn median_secs(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[reps / 2]
}

/// Times the anchored operators on `[16, n, n]` normal inputs with stride
/// and window 2.
pub fn bench(sizes: &[usize], reps: usize) -> Result<Vec<BenchRow>, CliError> {
    let mut rng = Rng::new(0);
    let d = BENCH_CHANNELS;
    let theta = AttentionParams::new(rng.normal(&[d, d]), rng.normal(&[d, d]), rng.normal(&[d, d])).map_err(run_err)?;
    let h = ConvFilter::new(rng.normal(&[d, d, BENCH_STRIDE, BENCH_STRIDE]), BENCH_STRIDE, None).map_err(run_err)?;
    let p = NormOrder::L2;
    let mut rows = Vec::new();
    for &n in sizes {
        if n == 0 || n % BENCH_STRIDE != 0 {
            return Err(config_err(format!("bench size {n} must be a positive multiple of {BENCH_STRIDE}")));
        }
        let x = rng.normal(&[d, n, n]);
        let spec = WindowSpec::new(BENCH_STRIDE, n, n).map_err(run_err)?;
        let reps = reps.max(1);
        rows.push(BenchRow {
            size: n,
            anchor: median_secs(reps, || {
                anchor(&x, BENCH_STRIDE, p).expect("valid bench input");
            }),
            window_attention_poly: median_secs(reps, || {
                window_attention_poly(&x, &spec, &theta, p).expect("valid bench input");
            }),
            gsa_poly: median_secs(reps, || {
                gsa_poly(&x, BENCH_STRIDE, &h, &theta, p).expect("valid bench input");
            }),
        });
    }
    Ok(rows)
}

pub fn render_bench(rows: &[BenchRow]) -> String {
    let mut out =
        format!("{:>6} {:>14} {:>24} {:>14}\n", "size", "anchor_ms", "window_attention_poly_ms", "gsa_poly_ms");
    for r in rows {
        out += &format!(
            "{:>6} {:>14.4} {:>24.4} {:>14.4}\n",
            r.size,
            r.anchor * 1e3,
            r.window_attention_poly * 1e3,
            r.gsa_poly * 1e3
        );
    }
    out
}

/// Anchoring must cost less than either full anchored operator.
pub fn bench_sane(rows: &[BenchRow]) -> bool {
    rows.iter().all(|r| r.anchor < r.window_attention_poly && r.anchor < r.gsa_poly)
}
