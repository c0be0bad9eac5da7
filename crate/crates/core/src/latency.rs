//! Wall-clock latency of configured sub-networks on the host.
//!
//! Timing is only meaningful with exclusive, single-threaded access to the
//! machine; records taken while other work runs should be discarded.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FIRST_REGULAR_ID;
use crate::elastic::ElasticTransformerLayer;
use crate::error::{Error, Result};
use crate::space::{DesignSpace, ShapeVector};
use crate::stats::{mad, median};
use crate::supernet::Supernet;
use crate::surrogate::{SurrogateSample, FORMAT_VERSION};

/// Monotonic time source.
pub trait Clock {
    fn now(&mut self) -> Duration;
    /// Smallest observable tick.
    fn resolution(&mut self) -> Duration;
    fn describe(&self) -> String;
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&mut self) -> Duration {
        self.origin.elapsed()
    }

    fn resolution(&mut self) -> Duration {
        let mut best = Duration::MAX;
        for _ in 0..64 {
            let a = Instant::now();
            let mut b = Instant::now();
            while b == a {
                b = Instant::now();
            }
            best = best.min(b - a);
        }
        best
    }

    fn describe(&self) -> String {
        "std::time::Instant (monotonic)".into()
    }
}

/// Test clock: the k-th timed interval lasts `intervals[k]`.
pub struct FakeClock {
    intervals: Vec<Duration>,
    resolution: Duration,
    t: Duration,
    calls: usize,
}

impl FakeClock {
    pub fn new(intervals: Vec<Duration>, resolution: Duration) -> Self {
        FakeClock {
            intervals,
            resolution,
            t: Duration::ZERO,
            calls: 0,
        }
    }
}

impl Clock for FakeClock {
    fn now(&mut self) -> Duration {
        if self.calls % 2 == 1 {
            let k = self.calls / 2;
            self.t += self.intervals[k % self.intervals.len()];
        }
        self.calls += 1;
        self.t
    }

    fn resolution(&mut self) -> Duration {
        self.resolution
    }

    fn describe(&self) -> String {
        "fake".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchParams {
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Dataset building spreads each shape's `reps` over this many rounds
    /// (capped at `reps`), visiting the shapes in a fresh random order each
    /// round, so slow drift of the host is shared by all shapes instead of
    /// landing on a few.
    pub rounds: usize,
    pub device: String,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            batch_size: 1,
            seq_len: 64,
            warmup: 5,
            reps: 30,
            rounds: 5,
            device: "host-cpu".into(),
        }
    }
}

impl BenchParams {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 1 {
            return Err(Error::Config("warmup must be at least 1".into()));
        }
        if self.reps < 3 {
            return Err(Error::Config("at least 3 timed repetitions are needed".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch size and sequence length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub shape: ShapeVector,
    pub params: u64,
    pub median_ms: f64,
    pub mad_ms: f64,
    pub reps: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub device: String,
    /// Set when the clock tick exceeds 1% of the median.
    pub warning: Option<String>,
}

/// Times `reps` encoder forwards of `shape` after `warmup` untimed ones.
/// Shape application and input construction happen outside the timed region.
pub fn measure_latency(
    model: &mut Supernet,
    shape: &ShapeVector,
    bench: &BenchParams,
    clock: &mut dyn Clock,
) -> Result<LatencyRecord> {
    check_bench(model, bench)?;
    let ids = bench_ids(model, bench);
    let times = time_block(model, shape, &ids, bench, bench.reps, clock)?;
    summarize(model, shape, &times, bench, clock)
}

fn check_bench(model: &Supernet, bench: &BenchParams) -> Result<()> {
    bench.validate()?;
    let max_seq = model.config().max_seq_len;
    if bench.seq_len > max_seq {
        return Err(Error::Config(format!("seq_len {} exceeds max {max_seq}", bench.seq_len)));
    }
    Ok(())
}

fn bench_ids(model: &Supernet, bench: &BenchParams) -> Vec<usize> {
    let vocab = model.config().vocab_size;
    (0..bench.batch_size * bench.seq_len)
        .map(|i| FIRST_REGULAR_ID + i % (vocab - FIRST_REGULAR_ID))
        .collect()
}

/// Applies `shape`, runs the warmup forwards, then times `reps` forwards.
fn time_block(
    model: &mut Supernet,
    shape: &ShapeVector,
    ids: &[usize],
    bench: &BenchParams,
    reps: usize,
    clock: &mut dyn Clock,
) -> Result<Vec<f64>> {
    model.apply_shape(shape)?;
    let layers = model.layers().to_vec();
    for _ in 0..bench.warmup {
        std::hint::black_box(model.encode_with(&layers, ids, bench.batch_size, bench.seq_len)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = clock.now();
        let out = model.encode_with(&layers, ids, bench.batch_size, bench.seq_len)?;
        let end = clock.now();
        std::hint::black_box(out);
        times.push((end - start).as_secs_f64() * 1e3);
    }
    Ok(times)
}

fn summarize(
    model: &Supernet,
    shape: &ShapeVector,
    times: &[f64],
    bench: &BenchParams,
    clock: &mut dyn Clock,
) -> Result<LatencyRecord> {
    let median_ms = median(times).expect("reps >= 3");
    let mad_ms = mad(times).expect("reps >= 3");
    if median_ms <= 0.0 {
        return Err(Error::Validation(format!("non-positive median latency for {shape}")));
    }
    let tick_ms = clock.resolution().as_secs_f64() * 1e3;
    let warning = (tick_ms > 0.01 * median_ms)
        .then(|| format!("clock resolution {tick_ms} ms is coarser than 1% of the median {median_ms} ms"));
    Ok(LatencyRecord {
        shape: shape.clone(),
        params: model.count_params(shape)?,
        median_ms,
        mad_ms,
        reps: times.len(),
        warmup: bench.warmup,
        batch_size: bench.batch_size,
        device: bench.device.clone(),
        warning,
    })
}

impl LatencyRecord {
    pub fn to_sample(&self) -> SurrogateSample {
        SurrogateSample {
            shape: self.shape.clone(),
            params: self.params,
            target: self.median_ms,
        }
    }
}

/// Metadata written next to a latency dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySidecar {
    pub format_version: u32,
    pub device: String,
    pub bench: BenchParams,
    pub clock: String,
    pub clock_resolution_ns: u128,
    /// Shape timed next to every dataset forward.
    pub reference_shape: ShapeVector,
    /// Median over all reference forwards; rows are scaled to this level.
    pub reference_median_ms: f64,
    pub requested: usize,
    pub measured: usize,
    pub failed: usize,
    pub failures: Vec<String>,
    pub warnings: usize,
}

#[derive(Debug, Clone)]
pub struct LatencyDataset {
    pub records: Vec<LatencyRecord>,
    pub sidecar: LatencySidecar,
}

impl LatencyDataset {
    pub fn samples(&self) -> Vec<SurrogateSample> {
        self.records.iter().map(LatencyRecord::to_sample).collect()
    }
}

/// Measures `n` uniform random shapes.
///
/// Every timed forward of a shape is paired with an adjacent forward of the
/// reference shape (the largest in the space). A row's timings are the
/// per-pair ratios scaled by the median of all reference forwards, which
/// cancels multiplicative drift of the host's speed. Each shape's repetitions
/// are also split over `bench.rounds` rounds that visit the shapes in a new
/// random order. A failed measurement skips its row and is counted in the
/// sidecar.
pub fn build_latency_dataset<R: Rng + ?Sized>(
    model: &mut Supernet,
    space: &DesignSpace,
    n: usize,
    bench: &BenchParams,
    clock: &mut dyn Clock,
    rng: &mut R,
) -> Result<LatencyDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    check_bench(model, bench)?;
    let shapes: Vec<ShapeVector> = (0..n).map(|_| space.sample(rng)).collect();
    let ids = bench_ids(model, bench);
    let reference = space.largest();
    let ref_layers = model.configured_layers(&reference)?;
    let rounds = bench.rounds.min(bench.reps);
    let mut ratios: Vec<Vec<f64>> = vec![Vec::with_capacity(bench.reps); n];
    let mut ref_times = Vec::with_capacity(n * bench.reps);
    let mut errors: Vec<Option<String>> = vec![None; n];
    let mut order: Vec<usize> = (0..n).collect();
    for round in 0..rounds {
        let reps = bench.reps / rounds + usize::from(round < bench.reps % rounds);
        order.shuffle(rng);
        for &i in &order {
            if errors[i].is_some() {
                continue;
            }
            let timed = model
                .configured_layers(&shapes[i])
                .and_then(|layers| time_pairs(model, &layers, &ref_layers, &ids, bench, reps, clock));
            match timed {
                Ok(pairs) => {
                    for (r, t) in pairs {
                        ref_times.push(r);
                        ratios[i].push(t / r);
                    }
                }
                Err(e) => errors[i] = Some(e.to_string()),
            }
        }
    }
    let reference_median_ms = median(&ref_times).unwrap_or(f64::NAN);
    let mut records = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for (i, shape) in shapes.iter().enumerate() {
        let outcome = match errors[i].take() {
            Some(e) => Err(e),
            None => {
                let times: Vec<f64> = ratios[i].iter().map(|q| q * reference_median_ms).collect();
                summarize(model, shape, &times, bench, clock).map_err(|e| e.to_string())
            }
        };
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(format!("{shape}: {e}")),
        }
    }
    let sidecar = LatencySidecar {
        format_version: FORMAT_VERSION,
        device: bench.device.clone(),
        bench: bench.clone(),
        clock: clock.describe(),
        clock_resolution_ns: clock.resolution().as_nanos(),
        reference_shape: reference,
        reference_median_ms,
        requested: n,
        measured: records.len(),
        failed: failures.len(),
        failures,
        warnings: records.iter().filter(|r| r.warning.is_some()).count(),
    };
    Ok(LatencyDataset { records, sidecar })
}

/// Warms up both layer sets, then times `reps` (reference, shape) pairs of
/// back-to-back forwards.
fn time_pairs(
    model: &Supernet,
    layers: &[ElasticTransformerLayer],
    ref_layers: &[ElasticTransformerLayer],
    ids: &[usize],
    bench: &BenchParams,
    reps: usize,
    clock: &mut dyn Clock,
) -> Result<Vec<(f64, f64)>> {
    let forward = |l: &[ElasticTransformerLayer]| model.encode_with(l, ids, bench.batch_size, bench.seq_len);
    for _ in 0..bench.warmup {
        std::hint::black_box(forward(ref_layers)?);
        std::hint::black_box(forward(layers)?);
    }
    let timed = |l: &[ElasticTransformerLayer], clock: &mut dyn Clock| -> Result<f64> {
        let start = clock.now();
        let out = forward(l)?;
        let end = clock.now();
        std::hint::black_box(out);
        Ok((end - start).as_secs_f64() * 1e3)
    };
    (0..reps)
        .map(|_| Ok((timed(ref_layers, clock)?, timed(layers, clock)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::BackboneConfig;
    use rand::SeedableRng;

    fn tiny() -> Supernet {
        let cfg = BackboneConfig {
            num_layers: 2,
            d_model: 8,
            d_attn: 8,
            d_ff: 16,
            heads: 2,
            vocab_size: 20,
            max_seq_len: 8,
            allowed_dims: vec![4, 8],
            init_std: 0.02,
        };
        Supernet::build(cfg, 0).unwrap()
    }

    fn bench(reps: usize) -> BenchParams {
        BenchParams {
            batch_size: 1,
            seq_len: 4,
            warmup: 1,
            reps,
            rounds: 1,
            device: "test".into(),
        }
    }

    #[test]
    fn fake_clock_equal_timings() {
        let mut m = tiny();
        let s = ShapeVector::new(vec![4, 8]);
        let mut c = FakeClock::new(vec![Duration::from_millis(7)], Duration::from_nanos(1));
        let r = measure_latency(&mut m, &s, &bench(5), &mut c).unwrap();
        assert_eq!(r.median_ms, 7.0);
        assert_eq!(r.mad_ms, 0.0);
        assert_eq!(r.warning, None);
        assert_eq!(r.params, m.count_params(&s).unwrap());
    }

    #[test]
    fn fake_clock_median_of_three() {
        let mut m = tiny();
        let s = ShapeVector::new(vec![8, 8]);
        let ms = |v| Duration::from_millis(v);
        let mut c = FakeClock::new(vec![ms(3), ms(1), ms(2)], Duration::from_millis(1));
        let r = measure_latency(&mut m, &s, &bench(3), &mut c).unwrap();
        assert_eq!(r.median_ms, 2.0);
        assert!(r.warning.is_some());
    }

    #[test]
    fn bench_params_are_checked() {
        let mut m = tiny();
        let s = ShapeVector::new(vec![8, 8]);
        let mut c = FakeClock::new(vec![Duration::from_millis(1)], Duration::ZERO);
        assert!(matches!(measure_latency(&mut m, &s, &bench(2), &mut c), Err(Error::Config(_))));
        let mut b = bench(3);
        b.seq_len = 9;
        assert!(matches!(measure_latency(&mut m, &s, &b, &mut c), Err(Error::Config(_))));
    }

    #[test]
    fn one_row_dataset() {
        let mut m = tiny();
        let space = m.design_space();
        let mut c = FakeClock::new(vec![Duration::from_micros(10)], Duration::ZERO);
        let mut rng = rand::rng();
        let d = build_latency_dataset(&mut m, &space, 1, &bench(3), &mut c, &mut rng).unwrap();
        assert_eq!(d.records.len(), 1);
        assert_eq!(d.sidecar.failed, 0);
        let s = &d.samples()[0];
        assert_eq!(s.params, m.count_params(&s.shape).unwrap());
    }

    #[test]
    fn paired_reference_cancels_drift() {
        let mut m = tiny();
        let space = m.design_space();
        let ms = |v| Duration::from_millis(v);
        // (reference, shape) pairs; the host speed changes between blocks.
        let intervals = vec![ms(2), ms(4), ms(6), ms(12), ms(3), ms(6)];
        let b = BenchParams { rounds: 3, ..bench(3) };
        let mut c = FakeClock::new(intervals, Duration::ZERO);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = build_latency_dataset(&mut m, &space, 4, &b, &mut c, &mut rng).unwrap();
        assert_eq!(d.sidecar.reference_median_ms, 3.0);
        assert_eq!(d.sidecar.reference_shape, space.largest());
        for r in &d.records {
            assert_eq!(r.median_ms, 6.0);
            assert_eq!(r.mad_ms, 0.0);
            assert_eq!(r.reps, 3);
        }
    }

    #[test]
    fn rounds_are_capped_at_reps() {
        let mut m = tiny();
        let space = m.design_space();
        let mut c = FakeClock::new(vec![Duration::from_micros(10)], Duration::ZERO);
        let b = BenchParams { rounds: 10, ..bench(4) };
        let mut rng = rand::rng();
        let d = build_latency_dataset(&mut m, &space, 2, &b, &mut c, &mut rng).unwrap();
        assert!(d.records.iter().all(|r| r.reps == 4 && (r.median_ms - 0.01).abs() < 1e-12));
        assert!(BenchParams { rounds: 0, ..bench(3) }.validate().is_err());
    }
}
