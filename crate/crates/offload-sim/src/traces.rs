//! Throughput traces and task generation.
//!
//! Traces are piecewise-constant (zero-order hold) rate series that wrap
//! cyclically when a simulation outruns them. Transmission times are obtained
//! by exact inversion of the cumulative-bits integral rather than fixed-point
//! iteration on the average rate, so `avg_rate` and `solve_tx_end` are
//! mutually consistent by construction.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Task;

pub const NUM_QUALITY_LAYERS: usize = 7;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("non-monotone timestamp at line {line}")]
    NonMonotone { line: usize },
    #[error("negative rate at line {line}")]
    NegativeRate { line: usize },
    #[error("empty trace")]
    Empty,
    #[error("invalid interval [{start}, {end})")]
    InvalidInterval { start: f64, end: f64 },
    #[error("transmission never completes: trace carries no data in a full period")]
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

/// Time-indexed throughput series in bits/s.
///
/// Sample `i` holds the rate on `[starts[i], starts[i+1])`; the last sample
/// extends to `duration_s`. Queries past `duration_s` wrap modulo the
/// duration, so a trace behaves as a periodic signal.
#[derive(Debug, Clone)]
pub struct ThroughputTrace {
    pub trace_id: String,
    pub direction: Direction,
    starts: Vec<f64>,
    rates_bps: Vec<f64>,
    duration_s: f64,
    /// Bits carried over one full period.
    bits_per_period: f64,
}

impl ThroughputTrace {
    /// Builds a trace from `(t_seconds, rate_bps)` samples.
    ///
    /// Timestamps must be strictly increasing and rates nonnegative. The time
    /// origin is shifted to zero. The final sample is assumed to last as long
    /// as the gap before it, so `n` uniformly spaced samples cover
    /// `n * period` seconds; a single sample yields a 1 s constant trace.
    pub fn from_samples(
        trace_id: impl Into<String>,
        direction: Direction,
        samples: &[(f64, f64)],
    ) -> Result<Self, TraceError> {
        if samples.is_empty() {
            return Err(TraceError::Empty);
        }
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(TraceError::NonMonotone { line: i + 2 });
            }
        }
        for (i, &(_, r)) in samples.iter().enumerate() {
            if r < 0.0 || !r.is_finite() {
                return Err(TraceError::NegativeRate { line: i + 1 });
            }
        }
        let t0 = samples[0].0;
        let starts: Vec<f64> = samples.iter().map(|&(t, _)| t - t0).collect();
        let rates_bps: Vec<f64> = samples.iter().map(|&(_, r)| r).collect();
        let n = starts.len();
        let last_width = if n >= 2 {
            starts[n - 1] - starts[n - 2]
        } else {
            1.0
        };
        let duration_s = starts[n - 1] + last_width;
        Ok(Self::from_parts(
            trace_id.into(),
            direction,
            starts,
            rates_bps,
            duration_s,
        ))
    }

    fn from_parts(
        trace_id: String,
        direction: Direction,
        starts: Vec<f64>,
        rates_bps: Vec<f64>,
        duration_s: f64,
    ) -> Self {
        let mut bits = 0.0;
        for i in 0..starts.len() {
            let end = if i + 1 < starts.len() {
                starts[i + 1]
            } else {
                duration_s
            };
            bits += rates_bps[i] * (end - starts[i]);
        }
        Self {
            trace_id,
            direction,
            starts,
            rates_bps,
            duration_s,
            bits_per_period: bits,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    pub fn num_samples(&self) -> usize {
        self.starts.len()
    }

    pub fn mean_rate_bps(&self) -> f64 {
        self.bits_per_period / self.duration_s
    }

    /// Instantaneous rate at time `t` (wrapped).
    pub fn rate_at(&self, t: f64) -> f64 {
        let phase = t.rem_euclid(self.duration_s);
        // Last segment whose start is <= phase.
        let idx = match self
            .starts
            .binary_search_by(|s| s.partial_cmp(&phase).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        self.rates_bps[idx]
    }

    /// Bits carried over `[t_start, t_end)`, wrapping cyclically.
    pub fn bits_between(&self, t_start: f64, t_end: f64) -> f64 {
        if t_end <= t_start {
            return 0.0;
        }
        let span = t_end - t_start;
        let full_cycles = (span / self.duration_s).floor();
        let mut bits = full_cycles * self.bits_per_period;
        let rem = span - full_cycles * self.duration_s;
        let phase = t_start.rem_euclid(self.duration_s);
        let a = phase;
        let b = phase + rem;
        bits += self.bits_in_period_window(a, b.min(self.duration_s));
        if b > self.duration_s {
            bits += self.bits_in_period_window(0.0, b - self.duration_s);
        }
        bits
    }

    /// Integral of the rate over `[a, b)` with `0 <= a <= b <= duration`.
    fn bits_in_period_window(&self, a: f64, b: f64) -> f64 {
        let mut bits = 0.0;
        for i in 0..self.starts.len() {
            let seg_start = self.starts[i];
            let seg_end = if i + 1 < self.starts.len() {
                self.starts[i + 1]
            } else {
                self.duration_s
            };
            let lo = seg_start.max(a);
            let hi = seg_end.min(b);
            if hi > lo {
                bits += self.rates_bps[i] * (hi - lo);
            }
        }
        bits
    }
}

/// Time-average rate over `[t_start, t_end)` in bits/s.
pub fn avg_rate(trace: &ThroughputTrace, t_start_s: f64, t_end_s: f64) -> Result<f64, TraceError> {
    if t_start_s < 0.0 || t_end_s <= t_start_s {
        return Err(TraceError::InvalidInterval {
            start: t_start_s,
            end: t_end_s,
        });
    }
    Ok(trace.bits_between(t_start_s, t_end_s) / (t_end_s - t_start_s))
}

/// Earliest `t_end` such that the trace carries `payload_bits` over
/// `[t_start, t_end)`.
///
/// Exact for piecewise-constant traces: whole periods are skipped
/// arithmetically and the final segment is inverted in closed form.
/// Zero-rate segments are never credited, so the returned end time is the
/// smallest solution.
pub fn solve_tx_end(
    trace: &ThroughputTrace,
    t_start_s: f64,
    payload_bits: f64,
) -> Result<f64, TraceError> {
    if t_start_s < 0.0 {
        return Err(TraceError::InvalidInterval {
            start: t_start_s,
            end: t_start_s,
        });
    }
    if payload_bits <= 0.0 {
        return Ok(t_start_s);
    }
    if trace.bits_per_period <= 0.0 {
        return Err(TraceError::Unbounded);
    }
    let mut remaining = payload_bits;
    let mut t = t_start_s;
    // Bits available from the starting phase to the end of the period.
    let phase = t_start_s.rem_euclid(trace.duration_s);
    let tail = trace.bits_in_period_window(phase, trace.duration_s);
    let mut walk_phase = phase;
    if remaining > tail {
        remaining -= tail;
        t += trace.duration_s - phase;
        let full = (remaining / trace.bits_per_period).floor();
        // Guard against remaining being an exact multiple: keep one period
        // to walk so the boundary lands inside a real segment.
        let full = if full * trace.bits_per_period >= remaining {
            (full - 1.0).max(0.0)
        } else {
            full
        };
        remaining -= full * trace.bits_per_period;
        t += full * trace.duration_s;
        walk_phase = 0.0;
    }
    // Walk segments from walk_phase, wrapping at most twice.
    let mut guard = 0;
    loop {
        for i in 0..trace.starts.len() {
            let seg_start = trace.starts[i];
            let seg_end = if i + 1 < trace.starts.len() {
                trace.starts[i + 1]
            } else {
                trace.duration_s
            };
            if seg_end <= walk_phase {
                continue;
            }
            let lo = seg_start.max(walk_phase);
            let width = seg_end - lo;
            let rate = trace.rates_bps[i];
            let seg_bits = rate * width;
            if rate > 0.0 && remaining <= seg_bits {
                return Ok(t + remaining / rate);
            }
            remaining -= seg_bits;
            t += width;
        }
        walk_phase = 0.0;
        guard += 1;
        if guard > 2 {
            // Unreachable given the period-skipping above; fail loudly
            // rather than spin.
            return Err(TraceError::Unbounded);
        }
    }
}

/// Loads a CSV trace in `t_seconds,rate_mbps` format (header optional).
pub fn load_trace(path: &Path, direction: Direction) -> Result<ThroughputTrace, TraceError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut parts = trimmed.split(',');
        let t_str = parts.next().unwrap_or("").trim();
        let r_str = parts
            .next()
            .ok_or_else(|| TraceError::Format {
                line: line_no,
                msg: "expected `t_seconds,rate_mbps`".to_string(),
            })?
            .trim();
        let (t, r) = match (t_str.parse::<f64>(), r_str.parse::<f64>()) {
            (Ok(t), Ok(r)) => (t, r),
            _ if line_no == 1 => continue, // header row
            _ => {
                return Err(TraceError::Format {
                    line: line_no,
                    msg: format!("cannot parse `{trimmed}` as numbers"),
                })
            }
        };
        if r < 0.0 {
            return Err(TraceError::NegativeRate { line: line_no });
        }
        if let Some(&(prev, _)) = samples.last() {
            if t <= prev {
                return Err(TraceError::NonMonotone { line: line_no });
            }
        }
        samples.push((t, r * 1e6));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".to_string());
    ThroughputTrace::from_samples(name, direction, &samples)
}

/// Statistical model for substitute traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceModel {
    IidLognormal,
    GaussMarkov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTraceSpec {
    pub mean_bps: f64,
    pub std_bps: f64,
    pub model: TraceModel,
    /// Lag-1 autocorrelation of the log-rate (gauss_markov only).
    pub correlation: f64,
    pub sample_period_s: f64,
}

impl Default for SyntheticTraceSpec {
    fn default() -> Self {
        Self {
            mean_bps: 2e8,
            std_bps: 8e7,
            model: TraceModel::GaussMarkov,
            correlation: 0.8,
            sample_period_s: 0.1,
        }
    }
}

/// Lognormal (mu, sigma) matching a target mean and standard deviation.
fn lognormal_params(mean: f64, std: f64) -> (f64, f64) {
    let sigma2 = (1.0 + (std * std) / (mean * mean)).ln();
    let mu = mean.ln() - 0.5 * sigma2;
    (mu, sigma2.sqrt())
}

/// Generates a trace whose sample distribution matches `spec`.
///
/// Rates are lognormal with the first two moments matched; the `gauss_markov`
/// model runs an AR(1) recursion on the log-rate so the stationary marginal
/// stays lognormal while adjacent samples correlate.
pub fn synthesize_trace<R: Rng>(
    spec: &SyntheticTraceSpec,
    duration_s: f64,
    direction: Direction,
    rng: &mut R,
) -> ThroughputTrace {
    assert!(duration_s > 0.0, "duration must be positive");
    assert!(spec.mean_bps > 0.0, "mean rate must be positive");
    let n = (duration_s / spec.sample_period_s).ceil().max(1.0) as usize;
    let starts: Vec<f64> = (0..n).map(|i| i as f64 * spec.sample_period_s).collect();
    let rates: Vec<f64> = if spec.std_bps <= 0.0 {
        vec![spec.mean_bps; n]
    } else {
        let (mu, sigma) = lognormal_params(spec.mean_bps, spec.std_bps);
        match spec.model {
            TraceModel::IidLognormal => {
                let dist = LogNormal::new(mu, sigma).expect("valid lognormal");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            TraceModel::GaussMarkov => {
                let phi = spec.correlation;
                assert!((0.0..1.0).contains(&phi), "correlation must be in [0,1)");
                let stationary = Normal::new(mu, sigma).expect("valid normal");
                let innovation =
                    Normal::new(0.0, sigma * (1.0 - phi * phi).sqrt()).expect("valid normal");
                let mut x = stationary.sample(rng);
                let mut out = Vec::with_capacity(n);
                out.push(x.exp());
                for _ in 1..n {
                    x = mu + phi * (x - mu) + innovation.sample(rng);
                    out.push(x.exp());
                }
                out
            }
        }
    };
    ThroughputTrace::from_parts(
        format!("synthetic-{:?}", spec.model),
        direction,
        starts,
        rates,
        n as f64 * spec.sample_period_s,
    )
}

/// Writes a trace back out in the CSV format `load_trace` reads.
pub fn write_trace_csv(trace: &ThroughputTrace, path: &Path) -> Result<(), TraceError> {
    use std::io::Write;
    let mut f = File::create(path)?;
    writeln!(f, "t_seconds,rate_mbps")?;
    for i in 0..trace.starts.len() {
        writeln!(f, "{},{}", trace.starts[i], trace.rates_bps[i] / 1e6)?;
    }
    Ok(())
}

/// Distribution of task computational intensity (cycles/bit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensityDist {
    pub mean_cpb: f64,
    pub std_cpb: f64,
}

impl Default for IntensityDist {
    fn default() -> Self {
        Self {
            mean_cpb: 1.0,
            std_cpb: 0.35,
        }
    }
}

/// Per-quality-layer task generator.
///
/// Layer sizes are lognormal with configured per-layer moments; PSNR is a
/// per-layer lookup. Higher layers must not shrink in mean size or PSNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskGenConfig {
    pub layer_size_mean_bits: [f64; NUM_QUALITY_LAYERS],
    pub layer_size_std_bits: [f64; NUM_QUALITY_LAYERS],
    pub layer_psnr_db: [f64; NUM_QUALITY_LAYERS],
    /// Categorical weights over quality layers (normalized at sampling).
    pub layer_weights: [f64; NUM_QUALITY_LAYERS],
    pub intensity: IntensityDist,
    pub deadline_s: f64,
    /// Result size as a fraction of task size.
    pub result_size_ratio: f64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        let layer_size_mean_bits = [8e6, 1.6e7, 2.4e7, 3.2e7, 4.0e7, 4.8e7, 5.6e7];
        let layer_size_std_bits = layer_size_mean_bits.map(|m| 0.25 * m);
        Self {
            layer_size_mean_bits,
            layer_size_std_bits,
            layer_psnr_db: [30.0, 33.0, 36.0, 38.5, 40.5, 42.0, 43.2],
            layer_weights: [1.0; NUM_QUALITY_LAYERS],
            intensity: IntensityDist::default(),
            deadline_s: 1.0,
            result_size_ratio: 0.2,
        }
    }
}

impl TaskGenConfig {
    pub fn psnr_for_layer(&self, layer: u8) -> f64 {
        self.layer_psnr_db[(layer as usize - 1).min(NUM_QUALITY_LAYERS - 1)]
    }
}

/// Draws one task: layer from the categorical, size from the layer's
/// lognormal, intensity from the intensity distribution.
pub fn sample_task<R: Rng>(gen: &TaskGenConfig, rng: &mut R) -> Task {
    let total: f64 = gen.layer_weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut layer = NUM_QUALITY_LAYERS - 1;
    for (i, &w) in gen.layer_weights.iter().enumerate() {
        if u < w {
            layer = i;
            break;
        }
        u -= w;
    }
    let size = sample_lognormal(
        gen.layer_size_mean_bits[layer],
        gen.layer_size_std_bits[layer],
        rng,
    );
    let intensity = sample_lognormal(gen.intensity.mean_cpb, gen.intensity.std_cpb, rng);
    Task {
        size_bits: size,
        intensity_cycles_per_bit: intensity,
        deadline_s: gen.deadline_s,
        result_size_bits: gen.result_size_ratio * size,
        quality_layer: (layer + 1) as u8,
    }
}

fn sample_lognormal<R: Rng>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std <= 0.0 {
        return mean;
    }
    let (mu, sigma) = lognormal_params(mean, std);
    LogNormal::new(mu, sigma).expect("valid lognormal").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn from_samples_rejects_non_monotone() {
        let err = ThroughputTrace::from_samples("t", Direction::Uplink, &[(1.0, 5.0), (0.0, 5.0)])
            .unwrap_err();
        assert!(matches!(err, TraceError::NonMonotone { line: 2 }));
    }

    #[test]
    fn avg_rate_constant_trace() {
        let tr =
            ThroughputTrace::from_samples("t", Direction::Uplink, &[(0.0, 1e8)]).unwrap();
        assert_eq!(avg_rate(&tr, 0.0, 0.5).unwrap(), 1e8);
        assert_eq!(avg_rate(&tr, 3.2, 17.9).unwrap(), 1e8);
    }

    #[test]
    fn avg_rate_step_trace_closed_form() {
        let tr = ThroughputTrace::from_samples(
            "t",
            Direction::Uplink,
            &[(0.0, 1e8), (1.0, 3e8)],
        )
        .unwrap();
        assert_eq!(tr.duration_s(), 2.0);
        // [0,2): (1e8*1 + 3e8*1)/2
        assert!((avg_rate(&tr, 0.0, 2.0).unwrap() - 2e8).abs() < 1e-3);
        // Wrap: [1.5, 2.5) = half of sample 2 plus half of sample 1.
        assert!((avg_rate(&tr, 1.5, 2.5).unwrap() - 2e8).abs() < 1e-3);
    }

    #[test]
    fn avg_rate_rejects_zero_length() {
        let tr =
            ThroughputTrace::from_samples("t", Direction::Uplink, &[(0.0, 1e8)]).unwrap();
        assert!(avg_rate(&tr, 1.0, 1.0).is_err());
    }

    #[test]
    fn avg_rate_invariant_under_period_shift() {
        let tr = ThroughputTrace::from_samples(
            "t",
            Direction::Uplink,
            &[(0.0, 1e8), (0.5, 2e8), (1.5, 5e7)],
        )
        .unwrap();
        let d = tr.duration_s();
        let a = avg_rate(&tr, 0.3, 1.7).unwrap();
        let b = avg_rate(&tr, 0.3 + d, 1.7 + d).unwrap();
        assert!((a - b).abs() < 1e-6 * a.abs());
    }

    #[test]
    fn solve_tx_end_constant_rate() {
        let tr =
            ThroughputTrace::from_samples("t", Direction::Uplink, &[(0.0, 1e8)]).unwrap();
        let t_end = solve_tx_end(&tr, 0.0, 1e6).unwrap();
        assert!((t_end - 0.01).abs() < 1e-12);
        assert_eq!(solve_tx_end(&tr, 2.5, 0.0).unwrap(), 2.5);
    }

    #[test]
    fn solve_tx_end_skips_zero_rate_segment() {
        let tr = ThroughputTrace::from_samples(
            "t",
            Direction::Uplink,
            &[(0.0, 1e8), (1.0, 0.0), (2.0, 1e8)],
        )
        .unwrap();
        let t_end = solve_tx_end(&tr, 0.0, 1.5e8).unwrap();
        assert!((t_end - 2.5).abs() < 1e-9, "got {t_end}");
    }

    #[test]
    fn solve_tx_end_unbounded_on_dead_trace() {
        let tr =
            ThroughputTrace::from_samples("t", Direction::Uplink, &[(0.0, 0.0)]).unwrap();
        assert!(matches!(
            solve_tx_end(&tr, 0.0, 1.0),
            Err(TraceError::Unbounded)
        ));
    }

    #[test]
    fn solve_tx_end_inverts_bits_between() {
        let mut r = rng(7);
        for _ in 0..200 {
            let n = r.gen_range(1..8);
            let mut t = 0.0;
            let mut samples = Vec::new();
            for _ in 0..n {
                let rate = if r.gen_bool(0.2) {
                    0.0
                } else {
                    r.gen_range(1e6..1e9)
                };
                samples.push((t, rate));
                t += r.gen_range(0.1..2.0);
            }
            let tr = ThroughputTrace::from_samples("t", Direction::Uplink, &samples).unwrap();
            if tr.mean_rate_bps() <= 0.0 {
                continue;
            }
            let start = r.gen_range(0.0..3.0 * tr.duration_s());
            let payload = r.gen_range(1.0..5.0 * tr.bits_between(0.0, tr.duration_s()));
            let t_end = solve_tx_end(&tr, start, payload).unwrap();
            let got = tr.bits_between(start, t_end);
            assert!(
                (got - payload).abs() <= 1e-9 * payload,
                "bits {got} vs payload {payload}"
            );
        }
    }

    #[test]
    fn load_trace_converts_mbps_and_counts_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tr.csv");
        std::fs::write(&p, "0,100\n1,200\n").unwrap();
        let tr = load_trace(&p, Direction::Uplink).unwrap();
        assert_eq!(tr.num_samples(), 2);
        assert_eq!(tr.rate_at(0.5), 1e8);
        assert_eq!(tr.rate_at(1.5), 2e8);

        let p2 = dir.path().join("bad.csv");
        std::fs::write(&p2, "1,5\n0,5\n").unwrap();
        let err = load_trace(&p2, Direction::Uplink).unwrap_err();
        assert!(matches!(err, TraceError::NonMonotone { line: 2 }));
    }

    #[test]
    fn load_trace_header_file_duration() {
        // A 1000-line file with a header holds 999 samples -> 999 * period.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("long.csv");
        let mut body = String::from("t_seconds,rate_mbps\n");
        for i in 0..999 {
            body.push_str(&format!("{},{}\n", i as f64 * 0.5, 10.0));
        }
        std::fs::write(&p, body).unwrap();
        let tr = load_trace(&p, Direction::Downlink).unwrap();
        assert_eq!(tr.num_samples(), 999);
        assert!((tr.duration_s() - 999.0 * 0.5).abs() < 1e-9);
    }

    #[test]
    fn synthesize_constant_when_std_zero() {
        let spec = SyntheticTraceSpec {
            mean_bps: 1e8,
            std_bps: 0.0,
            model: TraceModel::IidLognormal,
            correlation: 0.0,
            sample_period_s: 1.0,
        };
        let tr = synthesize_trace(&spec, 10.0, Direction::Uplink, &mut rng(1));
        assert_eq!(tr.rate_at(3.7), 1e8);
        assert_eq!(tr.mean_rate_bps(), 1e8);
    }

    #[test]
    fn synthesize_matches_moments() {
        for model in [TraceModel::IidLognormal, TraceModel::GaussMarkov] {
            let spec = SyntheticTraceSpec {
                mean_bps: 1e8,
                std_bps: 5e7,
                model,
                correlation: 0.6,
                sample_period_s: 1.0,
            };
            let tr = synthesize_trace(&spec, 1e5, Direction::Uplink, &mut rng(42));
            let n = tr.num_samples() as f64;
            let mean = tr.rates_bps.iter().sum::<f64>() / n;
            let var = tr
                .rates_bps
                .iter()
                .map(|r| (r - mean) * (r - mean))
                .sum::<f64>()
                / n;
            assert!(
                (mean - 1e8).abs() < 0.02 * 1e8,
                "{model:?} mean {mean}"
            );
            assert!(
                (var.sqrt() - 5e7).abs() < 0.02 * 5e7 * 2.5,
                "{model:?} std {}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn gauss_markov_correlation_orders() {
        let lag1 = |tr: &ThroughputTrace| {
            let logs: Vec<f64> = tr.rates_bps.iter().map(|r| r.ln()).collect();
            let n = logs.len();
            let mean = logs.iter().sum::<f64>() / n as f64;
            let var = logs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
            let cov: f64 = logs
                .windows(2)
                .map(|w| (w[0] - mean) * (w[1] - mean))
                .sum();
            cov / var
        };
        let mk = |corr: f64| SyntheticTraceSpec {
            mean_bps: 1e8,
            std_bps: 5e7,
            model: TraceModel::GaussMarkov,
            correlation: corr,
            sample_period_s: 1.0,
        };
        let hi = synthesize_trace(&mk(0.9), 2e4, Direction::Uplink, &mut rng(3));
        let lo = synthesize_trace(&mk(0.0), 2e4, Direction::Uplink, &mut rng(3));
        let (c_hi, c_lo) = (lag1(&hi), lag1(&lo));
        assert!(c_hi > 0.8, "high-corr lag1 {c_hi}");
        assert!(c_lo.abs() < 0.1, "zero-corr lag1 {c_lo}");
    }

    #[test]
    fn synthesize_is_seed_reproducible() {
        let spec = SyntheticTraceSpec::default();
        let a = synthesize_trace(&spec, 100.0, Direction::Uplink, &mut rng(9));
        let b = synthesize_trace(&spec, 100.0, Direction::Uplink, &mut rng(9));
        assert_eq!(a.rates_bps, b.rates_bps);
    }

    #[test]
    fn sample_task_degenerate_is_deterministic() {
        let mut gen = TaskGenConfig::default();
        gen.layer_weights = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        gen.layer_size_std_bits = [0.0; 7];
        gen.intensity.std_cpb = 0.0;
        let t1 = sample_task(&gen, &mut rng(1));
        let t2 = sample_task(&gen, &mut rng(2));
        assert_eq!(t1.size_bits, gen.layer_size_mean_bits[0]);
        assert_eq!(t1.size_bits, t2.size_bits);
        assert_eq!(t1.quality_layer, 1);
        assert_eq!(t1.result_size_bits, 0.2 * t1.size_bits);
    }

    #[test]
    fn sample_task_layer_means_match_config() {
        let gen = TaskGenConfig::default();
        let mut r = rng(11);
        let mut sums = [0.0; 7];
        let mut counts = [0usize; 7];
        for _ in 0..100_000 {
            let t = sample_task(&gen, &mut r);
            let l = t.quality_layer as usize - 1;
            sums[l] += t.size_bits;
            counts[l] += 1;
        }
        for l in 0..7 {
            let mean = sums[l] / counts[l] as f64;
            let want = gen.layer_size_mean_bits[l];
            assert!(
                (mean - want).abs() < 0.02 * want,
                "layer {l}: {mean} vs {want}"
            );
        }
    }

    #[test]
    fn sample_task_sizes_grow_with_layer() {
        let gen = TaskGenConfig::default();
        let mut r = rng(5);
        let (mut s1, mut n1, mut s7, mut n7) = (0.0, 0, 0.0, 0);
        for _ in 0..10_000 {
            let t = sample_task(&gen, &mut r);
            match t.quality_layer {
                1 => {
                    s1 += t.size_bits;
                    n1 += 1;
                }
                7 => {
                    s7 += t.size_bits;
                    n7 += 1;
                }
                _ => {}
            }
        }
        assert!(s7 / n7 as f64 > s1 / n1 as f64);
    }
}
