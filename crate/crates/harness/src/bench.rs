//! Forward-pass wall time and peak tensor memory across input resolutions.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use a2mamba::block::MixerConfig;
use a2mamba::memtrack::{self, BudgetExceeded};
use a2mamba::model::{build_model, Model, ModelConfig, RESOLUTION_MULTIPLE};
use a2mamba::rng::SeededRng;
use a2mamba::{Error, Result};

pub const SCHEMA: &str = "a2bench,v1";
pub const COLUMNS: &str =
    "variant,resolution,batch,tokens,wall_ms_mean,wall_ms_std,peak_bytes,status";
/// Default tensor payload budget before a resolution is marked "oom".
pub const DEFAULT_BUDGET: usize = 3 << 30;

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ok {
        mean_ms: f64,
        std_ms: f64,
        peak_bytes: usize,
    },
    Oom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub resolution: usize,
    pub batch: usize,
    pub tokens: usize,
    pub outcome: Outcome,
}

impl BenchRow {
    fn csv_line(&self) -> String {
        let head = format!(
            "{},{},{},{}",
            self.variant, self.resolution, self.batch, self.tokens
        );
        match &self.outcome {
            Outcome::Ok {
                mean_ms,
                std_ms,
                peak_bytes,
            } => {
                format!("{head},{mean_ms:.3},{std_ms:.3},{peak_bytes},ok")
            }
            Outcome::Oom => format!("{head},,,,oom"),
        }
    }
}

/// Tokens summed over the four stages of an `res × res` input.
pub fn tokens(res: usize) -> usize {
    (2..=5).map(|s| (res >> s) * (res >> s)).sum()
}

/// Least-squares slope of `ln y` against `ln x`; `None` below two points.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Silences the default panic message for budget overruns, which are
/// expected and reported as "oom" rows.
struct QuietBudgetPanics {
    previous: Option<Box<dyn Fn(&std::panic::PanicHookInfo<'_>) + Sync + Send + 'static>>,
}

impl QuietBudgetPanics {
    fn install() -> Self {
        let previous = std::panic::take_hook();
        let shared: std::sync::Arc<dyn Fn(&std::panic::PanicHookInfo<'_>) + Sync + Send> =
            std::sync::Arc::from(previous);
        let inner = std::sync::Arc::clone(&shared);
        std::panic::set_hook(Box::new(move |info| {
            if info.payload().downcast_ref::<BudgetExceeded>().is_none() {
                inner(info);
            }
        }));
        QuietBudgetPanics {
            previous: Some(Box::new(move |info| shared(info))),
        }
    }
}

impl Drop for QuietBudgetPanics {
    fn drop(&mut self) {
        if let Some(p) = self.previous.take() {
            std::panic::set_hook(p);
        }
    }
}

/// Times `reps` evaluation forwards after one warm-up, under `budget` bytes.
pub fn bench_model(
    model: &Model,
    variant: &str,
    res: usize,
    batch: usize,
    reps: usize,
    budget: usize,
) -> Result<BenchRow> {
    if res == 0 || !res.is_multiple_of(RESOLUTION_MULTIPLE) {
        return Err(Error::Resolution {
            height: res,
            width: res,
            multiple: RESOLUTION_MULTIPLE,
        });
    }
    let x = SeededRng::new(res as u64).normal_tensor(&[batch, 3, res, res], 1.0);
    let _quiet = QuietBudgetPanics::install();
    memtrack::set_limit(Some(budget));
    let run = catch_unwind(AssertUnwindSafe(|| -> Result<(Vec<f64>, usize)> {
        model.logits(&x)?;
        let base = memtrack::current_bytes();
        memtrack::reset_peak();
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            let y = model.logits(&x)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            drop(y);
        }
        Ok((times, memtrack::peak_bytes().saturating_sub(base)))
    }));
    memtrack::set_limit(None);
    let outcome = match run {
        Ok(r) => {
            let (times, peak_bytes) = r?;
            let n = times.len().max(1) as f64;
            let mean_ms = times.iter().sum::<f64>() / n;
            let var = times.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            Outcome::Ok {
                mean_ms,
                std_ms: var.sqrt(),
                peak_bytes,
            }
        }
        Err(payload) if payload.downcast_ref::<BudgetExceeded>().is_some() => Outcome::Oom,
        Err(payload) => std::panic::resume_unwind(payload),
    };
    Ok(BenchRow {
        variant: variant.to_string(),
        resolution: res,
        batch,
        tokens: tokens(res),
        outcome,
    })
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Time-versus-tokens slope of one variant over its completed rows.
    pub fn slope(&self, variant: &str) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| match r.outcome {
                Outcome::Ok { mean_ms, .. } => Some((r.tokens as f64, mean_ms)),
                Outcome::Oom => None,
            })
            .collect();
        loglog_slope(&pts)
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            writeln!(s, "{}", r.csv_line()).unwrap();
        }
        s
    }

    /// Writes the schema header and column names to a new or empty file,
    /// then appends the rows. An existing file must carry the same schema.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let fresh = match std::fs::File::open(path) {
            Ok(f) => {
                let mut first = String::new();
                BufReader::new(f).read_line(&mut first)?;
                if !first.is_empty() && first.trim_end() != SCHEMA {
                    return Err(Error::Format {
                        offset: 0,
                        detail: format!("{} is not an {SCHEMA} file", path.display()),
                    });
                }
                first.is_empty()
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => true,
            Err(e) => return Err(e.into()),
        };
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if fresh {
            writeln!(f, "{SCHEMA}\n{COLUMNS}")?;
        }
        f.write_all(self.csv_rows().as_bytes())?;
        Ok(())
    }
}

/// The benchmarked model and its global-attention ablation: a window
/// covering each stage map and no state space branch.
pub fn variants(cfg: &ModelConfig) -> [(&'static str, ModelConfig); 2] {
    [
        ("mass", cfg.clone()),
        (
            "global_attention",
            cfg.clone().with_mixer(MixerConfig::global_attention()),
        ),
    ]
}

pub fn run_bench(
    cfg: &ModelConfig,
    resolutions: &[usize],
    batch: usize,
    reps: usize,
    budget: usize,
    mut progress: impl FnMut(&BenchRow),
) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for (name, vcfg) in variants(cfg) {
        let model = build_model(&vcfg, 0)?;
        for &res in resolutions {
            let row = bench_model(&model, name, res, batch, reps, budget)?;
            progress(&row);
            rows.push(row);
        }
    }
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_schedule() {
        assert_eq!(tokens(64), 256 + 64 + 16 + 4);
        assert_eq!(tokens(224), 56 * 56 + 28 * 28 + 14 * 14 + 49);
    }

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 4.0, 16.0, 64.0]
            .iter()
            .map(|&x: &f64| (x, 3.0 * x.powf(1.8)))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 1.8).abs() < 1e-12);
        assert_eq!(loglog_slope(&pts[..1]), None);
    }

    #[test]
    fn tiny_budget_marks_oom_and_recovers() {
        let model = build_model(&ModelConfig::toy(), 0).unwrap();
        let row = bench_model(&model, "mass", 64, 1, 1, 1 << 10).unwrap();
        assert_eq!(row.outcome, Outcome::Oom);
        let row = bench_model(&model, "mass", 64, 1, 2, DEFAULT_BUDGET).unwrap();
        assert!(matches!(row.outcome, Outcome::Ok { peak_bytes, .. } if peak_bytes > 0));
    }

    #[test]
    fn resolution_must_be_a_multiple_of_32() {
        let model = build_model(&ModelConfig::toy(), 0).unwrap();
        assert!(matches!(
            bench_model(&model, "mass", 48, 1, 1, DEFAULT_BUDGET),
            Err(Error::Resolution { .. })
        ));
    }

    #[test]
    fn csv_is_schema_versioned_and_append_safe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        let report = BenchReport {
            rows: vec![
                BenchRow {
                    variant: "mass".into(),
                    resolution: 64,
                    batch: 1,
                    tokens: tokens(64),
                    outcome: Outcome::Ok {
                        mean_ms: 1.5,
                        std_ms: 0.25,
                        peak_bytes: 1024,
                    },
                },
                BenchRow {
                    variant: "global_attention".into(),
                    resolution: 512,
                    batch: 1,
                    tokens: tokens(512),
                    outcome: Outcome::Oom,
                },
            ],
        };
        report.append_to(&path).unwrap();
        report.append_to(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SCHEMA);
        assert_eq!(lines[1], COLUMNS);
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[2], "mass,64,1,340,1.500,0.250,1024,ok");
        assert_eq!(lines[3], "global_attention,512,1,21760,,,,oom");
        assert_eq!(lines.iter().filter(|l| **l == SCHEMA).count(), 1);

        let other = dir.path().join("other.csv");
        std::fs::write(&other, "something else\n").unwrap();
        assert!(matches!(
            report.append_to(&other),
            Err(Error::Format { .. })
        ));
    }
}
