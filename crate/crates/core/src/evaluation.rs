//! Depth-completion metrics, the benchmark loop, and the two ablation
//! runners.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{DepthMap, TransparencyMask};
use crate::pipeline::{Pipeline, Prepared};
use crate::scheduler::make_timestep_plan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    TransparentOnly,
    AllPixels,
}

impl fmt::Display for MaskScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskScope::TransparentOnly => "transparent_only",
            MaskScope::AllPixels => "all_pixels",
        })
    }
}

impl FromStr for MaskScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transparent_only" => Ok(MaskScope::TransparentOnly),
            "all_pixels" => Ok(MaskScope::AllPixels),
            _ => Err(Error::Config(format!(
                "unknown scope {s:?}; expected transparent_only or all_pixels"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every evaluated pixel counts once across the whole split.
    PixelWeighted,
    /// Plain mean of per-sample metrics.
    PerSample,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_weighted" => Ok(Aggregation::PixelWeighted),
            "per_sample" => Ok(Aggregation::PerSample),
            _ => Err(Error::Config(format!(
                "unknown aggregation {s:?}; expected pixel_weighted or per_sample"
            ))),
        }
    }
}

/// Errors in meters, deltas in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rel: f64,
    pub mae: f64,
    pub delta_105: f64,
    pub delta_110: f64,
    pub delta_125: f64,
    pub pixel_count: usize,
    pub mask_scope: MaskScope,
}

impl MetricsReport {
    fn checked(self) -> Self {
        assert!(
            self.delta_105 <= self.delta_110 && self.delta_110 <= self.delta_125,
            "delta thresholds out of order: {self:?}"
        );
        for d in [self.delta_105, self.delta_110, self.delta_125] {
            assert!((0.0..=100.0).contains(&d), "delta out of range: {self:?}");
        }
        // rmse >= mae up to rounding in the square root
        assert!(
            self.mae >= 0.0 && self.rmse >= self.mae * (1.0 - 1e-12),
            "rmse below mae: {self:?}"
        );
        self
    }
}

pub const DELTAS: [f64; 3] = [1.05, 1.10, 1.25];

/// Metrics over the pixels selected by `scope`. The δ test is strict.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, mask: &TransparencyMask, scope: MaskScope) -> Result<MetricsReport> {
    let (h, w) = (gt.height(), gt.width());
    if pred.height() != h || pred.width() != w || mask.mask().len() != h * w {
        return Err(shape(format!(
            "prediction {}x{}, ground truth {h}x{w} and mask ({} pixels) must agree",
            pred.height(),
            pred.width(),
            mask.mask().len()
        )));
    }
    let (p, g, m) = (pred.values(), gt.values(), mask.mask());
    let (mut n, mut se, mut ae, mut re) = (0usize, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for i in 0..h * w {
        if scope == MaskScope::TransparentOnly && !m[i] {
            continue;
        }
        let (d, t) = (p[i], g[i]);
        if !(t > 0.0) {
            return Err(invalid(format!("ground truth {t} at pixel {i} is not positive")));
        }
        if !d.is_finite() {
            return Err(Error::Numerical(format!("prediction {d} at pixel {i} is not finite")));
        }
        let e = d - t;
        n += 1;
        se += e * e;
        ae += e.abs();
        re += e.abs() / t;
        let ratio = (d / t).max(t / d);
        for (k, &delta) in DELTAS.iter().enumerate() {
            if ratio < delta {
                hits[k] += 1;
            }
        }
    }
    if n == 0 {
        return Err(invalid(format!("no pixels in scope {scope}")));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        rmse: (se / nf).sqrt(),
        rel: re / nf,
        mae: ae / nf,
        delta_105: 100.0 * hits[0] as f64 / nf,
        delta_110: 100.0 * hits[1] as f64 / nf,
        delta_125: 100.0 * hits[2] as f64 / nf,
        pixel_count: n,
        mask_scope: scope,
    }
    .checked())
}

/// Combines per-sample reports. Pixel weighting pools squared errors, so the
/// aggregate RMSE is the root of the weighted mean of per-sample MSEs.
pub fn aggregate(reports: &[MetricsReport], how: Aggregation) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| invalid("nothing to aggregate"))?;
    if reports.iter().any(|r| r.mask_scope != first.mask_scope) {
        return Err(invalid("cannot aggregate reports with different scopes"));
    }
    let weight = |r: &MetricsReport| match how {
        Aggregation::PixelWeighted => r.pixel_count as f64,
        Aggregation::PerSample => 1.0,
    };
    let total: f64 = reports.iter().map(weight).sum();
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| weight(r) * f(r)).sum::<f64>() / total;
    let rmse = match how {
        Aggregation::PixelWeighted => mean(&|r| r.rmse * r.rmse).sqrt(),
        Aggregation::PerSample => mean(&|r| r.rmse),
    };
    Ok(MetricsReport {
        rmse,
        rel: mean(&|r| r.rel),
        mae: mean(&|r| r.mae),
        delta_105: mean(&|r| r.delta_105).clamp(0.0, 100.0),
        delta_110: mean(&|r| r.delta_110).clamp(0.0, 100.0),
        delta_125: mean(&|r| r.delta_125).clamp(0.0, 100.0),
        pixel_count: reports.iter().map(|r| r.pixel_count).sum(),
        mask_scope: first.mask_scope,
    }
    .checked())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub scope: MaskScope,
    pub aggregation: Aggregation,
    /// Base seed for the initial noise; sample `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            scope: MaskScope::TransparentOnly,
            aggregation: Aggregation::PixelWeighted,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub aggregation: Aggregation,
    pub aggregate: MetricsReport,
    pub samples: Vec<SampleResult>,
    pub failures: usize,
}

impl BenchmarkReport {
    /// More than 1% of samples failed.
    pub fn too_many_failures(&self) -> bool {
        self.failures * 100 > self.samples.len()
    }
}

/// Scores `predict` on every item; failing samples are recorded and left
/// out of the aggregate.
pub fn run_benchmark<T>(
    items: &[T],
    id: impl Fn(&T) -> String,
    mut predict: impl FnMut(usize, &T) -> Result<(DepthMap, DepthMap, TransparencyMask)>,
    opts: &EvalOptions,
) -> Result<BenchmarkReport> {
    if items.is_empty() {
        return Err(invalid("benchmark split is empty"));
    }
    let mut samples = Vec::with_capacity(items.len());
    let mut ok = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let res = predict(i, item).and_then(|(pred, gt, mask)| compute_metrics(&pred, &gt, &mask, opts.scope));
        match res {
            Ok(m) => {
                ok.push(m);
                samples.push(SampleResult {
                    id: id(item),
                    metrics: Some(m),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("sample {} failed: {e}", id(item));
                samples.push(SampleResult {
                    id: id(item),
                    metrics: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let failures = samples.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::EvaluationFailures {
            failed: failures,
            total: items.len(),
        });
    }
    Ok(BenchmarkReport {
        aggregation: opts.aggregation,
        aggregate: aggregate(&ok, opts.aggregation)?,
        samples,
        failures,
    })
}

/// Which depth a benchmark scores.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    /// Sensor depth with invalid pixels scored as 0 m.
    Raw,
    /// Global-optimization output alone.
    Refined,
    /// Diffusion output for the given step count.
    Diffusion(&'a Pipeline, usize),
}

/// Raw sensor depth as a prediction; invalid pixels read as 0.
pub fn raw_prediction(raw: &DepthMap) -> Result<DepthMap> {
    DepthMap::dense(raw.height(), raw.width(), raw.sensor_values())
}

pub fn benchmark_method(data: &[Prepared], method: Method, opts: &EvalOptions) -> Result<BenchmarkReport> {
    let plan = match method {
        Method::Diffusion(p, count) => Some(make_timestep_plan(p.denoiser.horizon(), count)?),
        _ => None,
    };
    run_benchmark(
        data,
        |p| p.sample.id.clone(),
        |i, p| {
            let pred = match method {
                Method::Raw => raw_prediction(&p.sample.raw_depth)?,
                Method::Refined => p.refined.clone(),
                Method::Diffusion(pipe, _) => {
                    pipe.infer_prepared(p, plan.as_ref().expect("plan built"), opts.seed.wrapping_add(i as u64))?
                }
            };
            Ok((pred, p.sample.gt_depth.clone(), p.sample.mask.clone()))
        },
        opts,
    )
}

const HEADERS: [&str; 6] = ["RMSE", "REL", "MAE", "δ1.05", "δ1.10", "δ1.25"];

fn metric_cells(r: &MetricsReport) -> [String; 6] {
    [
        format!("{:.4}", r.rmse),
        format!("{:.4}", r.rel),
        format!("{:.4}", r.mae),
        format!("{:.2}", r.delta_105),
        format!("{:.2}", r.delta_110),
        format!("{:.2}", r.delta_125),
    ]
}

/// Aligned plain-text table; `labels` name the leading columns.
pub fn format_table(labels: &[&str], rows: &[(Vec<String>, MetricsReport)]) -> String {
    let mut cells: Vec<Vec<String>> = vec![labels.iter().chain(HEADERS.iter()).map(|s| s.to_string()).collect()];
    for (lead, r) in rows {
        let mut row = lead.clone();
        row.extend(metric_cells(r));
        cells.push(row);
    }
    let ncol = cells[0].len();
    let width: Vec<usize> = (0..ncol)
        .map(|c| cells.iter().map(|r| r.get(c).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (ri, row) in cells.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = width[c] - s.chars().count();
                if c < labels.len() {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if ri == 0 {
            let total = width.iter().sum::<usize>() + 2 * (ncol - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Base checkpoint run with fewer inference steps.
    Reuse,
    /// Checkpoint trained on the same plan it is run with.
    Retrain,
}

impl fmt::Display for StepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepMode::Reuse => "reuse",
            StepMode::Retrain => "retrain",
        })
    }
}

impl FromStr for StepMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reuse" => Ok(StepMode::Reuse),
            "retrain" => Ok(StepMode::Retrain),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected reuse or retrain"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub mode: StepMode,
    pub count: usize,
    pub report: MetricsReport,
}

/// One row per requested (mode, count). Retrain mode needs a checkpoint
/// trained on exactly that plan.
pub fn ablate_inference_steps(
    base: &Pipeline,
    retrained: &BTreeMap<usize, Pipeline>,
    counts: &[usize],
    modes: &[StepMode],
    data: &[Prepared],
    opts: &EvalOptions,
) -> Result<Vec<StepRow>> {
    for &mode in modes {
        for &count in counts {
            if mode == StepMode::Retrain {
                let p = retrained
                    .get(&count)
                    .ok_or_else(|| invalid(format!("no retrain-mode checkpoint for {count} steps")))?;
                if !p.train.train_on_plan || p.train.inference_count != count {
                    return Err(invalid(format!(
                        "checkpoint for {count} steps was not trained on a {count}-step plan"
                    )));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for &mode in modes {
        for &count in counts {
            let pipe = match mode {
                StepMode::Reuse => base,
                StepMode::Retrain => &retrained[&count],
            };
            let report = benchmark_method(data, Method::Diffusion(pipe, count), opts)?;
            rows.push(StepRow {
                mode,
                count,
                report: report.aggregate,
            });
        }
    }
    Ok(rows)
}

pub fn steps_table(rows: &[StepRow]) -> String {
    let body: Vec<(Vec<String>, MetricsReport)> = rows
        .iter()
        .map(|r| (vec![r.mode.to_string(), r.count.to_string()], r.report))
        .collect();
    format_table(&["Mode", "Steps"], &body)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub label: String,
    pub report: MetricsReport,
}

/// Scores two checkpoints that differ only in their conditioning inputs.
pub fn ablate_condition(
    refined: &Pipeline,
    rgb_only: &Pipeline,
    count: usize,
    data: &[Prepared],
    opts: &EvalOptions,
) -> Result<Vec<ConditionRow>> {
    let mut a = refined.denoiser.config().clone();
    let mut b = rgb_only.denoiser.config().clone();
    b.condition = a.condition;
    a.condition = b.condition;
    if a != b {
        return Err(invalid("the two denoisers differ in more than their conditioning"));
    }
    if refined.train != rgb_only.train {
        return Err(invalid("the two checkpoints were trained with different settings"));
    }
    if refined.codec.params().checksum() != rgb_only.codec.params().checksum() {
        return Err(invalid("the two checkpoints use different codecs"));
    }
    if refined.geometry != rgb_only.geometry {
        return Err(invalid("the two pipelines use different geometry settings"));
    }
    let mut rows = Vec::new();
    for (label, pipe) in [("refined", refined), ("rgb_only", rgb_only)] {
        let report = benchmark_method(data, Method::Diffusion(pipe, count), opts)?;
        rows.push(ConditionRow {
            label: label.to_string(),
            report: report.aggregate,
        });
    }
    Ok(rows)
}

pub fn condition_table(rows: &[ConditionRow]) -> String {
    let body: Vec<(Vec<String>, MetricsReport)> = rows.iter().map(|r| (vec![r.label.clone()], r.report)).collect();
    format_table(&["Condition"], &body)
}
