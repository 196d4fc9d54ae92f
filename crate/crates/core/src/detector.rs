//! R-peak detection on the baseline-corrected stream: boxcar smoothing,
//! adaptive-threshold local-maximum detection, the R-R counter and the
//! sliding-window heart-rate estimator.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology::{BaselineCorrector, FilteredSample, StructuringElement};
use crate::signal_io::SAMPLE_RATE_HZ;

/// Heart rate is republished this often (10 s of samples).
pub const RATE_UPDATE_SAMPLES: u64 = 10 * SAMPLE_RATE_HZ as u64;
/// Heart rate counts peaks over this trailing window (60 s of samples).
pub const RATE_WINDOW_SAMPLES: u64 = 60 * SAMPLE_RATE_HZ as u64;
/// R-R counter width.
pub const RR_COUNTER_MAX: u16 = u16::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetectorConfigError {
    #[error("moving-average width must be at least 1")]
    ZeroWidth,
    #[error("threshold ratio denominator must be non-zero")]
    ZeroBetaDen,
    #[error("threshold ratio {num}/{den} must lie in (0, 1]")]
    BetaRange { num: u32, den: u32 },
    #[error("threshold floor must be non-negative")]
    NegativeFloor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Structuring element for the opening/closing pair.
    pub se: StructuringElement,
    /// Moving-average width `W` in samples.
    pub smooth_width: usize,
    pub beta_num: u32,
    pub beta_den: u32,
    /// Absolute lower bound for the adaptive threshold (ADC-code units).
    pub threshold_floor: i32,
    pub refractory_ms: u32,
    /// Detect on |x| instead of x.
    pub rectify: bool,
    /// Samples of valid signal used to seed the threshold.
    pub learning_samples: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            se: StructuringElement::default(),
            smooth_width: 5,
            beta_num: 1,
            beta_den: 2,
            threshold_floor: 50,
            refractory_ms: 200,
            rectify: false,
            learning_samples: 2 * SAMPLE_RATE_HZ as usize,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorConfigError> {
        if self.smooth_width == 0 {
            return Err(DetectorConfigError::ZeroWidth);
        }
        if self.beta_den == 0 {
            return Err(DetectorConfigError::ZeroBetaDen);
        }
        if self.beta_num == 0 || self.beta_num > self.beta_den {
            return Err(DetectorConfigError::BetaRange {
                num: self.beta_num,
                den: self.beta_den,
            });
        }
        if self.threshold_floor < 0 {
            return Err(DetectorConfigError::NegativeFloor);
        }
        Ok(())
    }

    pub fn refractory_samples(&self) -> u64 {
        refractory_samples(self.refractory_ms)
    }
}

pub fn refractory_samples(ms: u32) -> u64 {
    u64::from(ms) * u64::from(SAMPLE_RATE_HZ) / 1000
}

/// Serial boxcar: a delay line plus a running sum.
#[derive(Debug, Clone)]
pub struct MovingAverage {
    window: VecDeque<i32>,
    width: usize,
    running_sum: i64,
}

impl MovingAverage {
    pub fn new(width: usize) -> Self {
        assert!(width > 0, "moving-average width must be positive");
        Self {
            window: VecDeque::with_capacity(width),
            width,
            running_sum: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.width
    }

    pub fn running_sum(&self) -> i64 {
        self.running_sum
    }

    /// `floor(sum / fill)`; the divisor is the number of samples held.
    pub fn smooth(&mut self, x: FilteredSample) -> FilteredSample {
        if self.window.len() == self.width {
            let old = self.window.pop_front().expect("full window");
            self.running_sum -= i64::from(old);
        }
        self.window.push_back(x.value);
        self.running_sum += i64::from(x.value);
        let mean = self.running_sum.div_euclid(self.window.len() as i64);
        FilteredSample {
            value: mean as i32,
            t: x.t,
            valid: x.valid && self.is_full(),
        }
    }

    /// Keeps the newest samples that still fit.
    pub fn set_width(&mut self, width: usize) {
        assert!(width > 0, "moving-average width must be positive");
        while self.window.len() > width {
            let old = self.window.pop_front().expect("non-empty");
            self.running_sum -= i64::from(old);
        }
        self.width = width;
    }
}

/// A local maximum that cleared the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeakCandidate {
    pub t: u64,
    pub amplitude: i32,
}

/// Adaptive threshold comparator with refractory blanking.
///
/// A candidate fires at the first sample where the signal stops rising
/// while above the threshold, so the reported time is the apex.
#[derive(Debug, Clone)]
pub struct ThresholdState {
    threshold: i32,
    floor: i32,
    beta_num: u32,
    beta_den: u32,
    refractory: u64,
    last_peak: Option<u64>,
    last_peak_amplitude: Option<i32>,
    prev: Option<FilteredSample>,
    rising: bool,
}

impl ThresholdState {
    pub fn new(initial: i32, floor: i32, beta_num: u32, beta_den: u32, refractory: u64) -> Self {
        assert!(beta_den > 0);
        Self {
            threshold: initial.max(floor),
            floor,
            beta_num,
            beta_den,
            refractory,
            last_peak: None,
            last_peak_amplitude: None,
            prev: None,
            rising: false,
        }
    }

    pub fn threshold(&self) -> i32 {
        self.threshold
    }

    pub fn last_peak_amplitude(&self) -> Option<i32> {
        self.last_peak_amplitude
    }

    /// Samples of blanking left as of sample `now`.
    pub fn refractory_remaining(&self, now: u64) -> u64 {
        match self.last_peak {
            Some(p) => self.refractory.saturating_sub(now.saturating_sub(p)),
            None => 0,
        }
    }

    pub fn set_beta(&mut self, num: u32, den: u32) {
        assert!(den > 0);
        self.beta_num = num;
        self.beta_den = den;
    }

    pub fn set_floor(&mut self, floor: i32) {
        self.floor = floor;
        self.threshold = self.threshold.max(floor);
    }

    pub fn set_refractory(&mut self, samples: u64) {
        self.refractory = samples;
    }

    /// Threshold implied by a peak: `max(floor(beta * peak), floor)`.
    pub fn threshold_for(&self, peak_amplitude: i32) -> i32 {
        let scaled = (i64::from(peak_amplitude) * i64::from(self.beta_num))
            .div_euclid(i64::from(self.beta_den));
        (scaled as i32).max(self.floor)
    }

    pub fn update_threshold(&mut self, peak_amplitude: i32) -> i32 {
        self.threshold = self.threshold_for(peak_amplitude);
        self.last_peak_amplitude = Some(peak_amplitude);
        self.threshold
    }

    /// Feeds one sample; may confirm the previous sample as a peak.
    pub fn detect(&mut self, x: FilteredSample) -> Option<PeakCandidate> {
        let mut fired = None;
        if let Some(p) = self.prev {
            let outside_refractory = self
                .last_peak
                .is_none_or(|last| p.t - last >= self.refractory);
            if self.rising && x.value <= p.value && p.value > self.threshold && outside_refractory {
                self.last_peak = Some(p.t);
                self.update_threshold(p.value);
                fired = Some(PeakCandidate {
                    t: p.t,
                    amplitude: p.value,
                });
            }
            self.rising = x.value > p.value;
        }
        self.prev = Some(x);
        fired
    }
}

/// Clocks between two peaks on a 16-bit saturating counter.
pub fn rr_interval(prev_peak: u64, new_peak: u64) -> u16 {
    debug_assert!(new_peak > prev_peak);
    u16::try_from(new_peak - prev_peak).unwrap_or(RR_COUNTER_MAX)
}

/// One heart-rate publication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateReport {
    /// Sample index of publication; always a multiple of 2560.
    pub t: u64,
    pub bpm: u16,
    /// Set while fewer than 60 s have elapsed; the count is rescaled.
    pub provisional: bool,
}

/// Peak times inside the trailing 60 s window.
#[derive(Debug, Clone, Default)]
pub struct RateState {
    peak_times: VecDeque<u64>,
    last_update: Option<u64>,
}

impl RateState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_peak(&mut self, t: u64) {
        self.peak_times.push_back(t);
    }

    pub fn last_update(&self) -> Option<u64> {
        self.last_update
    }

    pub fn queued(&self) -> usize {
        self.peak_times.len()
    }

    /// Publishes at every non-zero multiple of 2560, counting peaks with
    /// `now - 15360 <= t < now`.
    pub fn heart_rate(&mut self, now: u64) -> Option<RateReport> {
        if now == 0 || !now.is_multiple_of(RATE_UPDATE_SAMPLES) {
            return None;
        }
        let start = now.saturating_sub(RATE_WINDOW_SAMPLES);
        while self.peak_times.front().is_some_and(|&t| t < start) {
            self.peak_times.pop_front();
        }
        let count = self.peak_times.iter().filter(|&&t| t < now).count() as u64;
        self.last_update = Some(now);
        let (bpm, provisional) = if now < RATE_WINDOW_SAMPLES {
            ((count * RATE_WINDOW_SAMPLES + now / 2) / now, true)
        } else {
            (count, false)
        };
        Some(RateReport {
            t: now,
            bpm: u16::try_from(bpm).unwrap_or(u16::MAX),
            provisional,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub t_peak: u64,
    pub amplitude: i32,
    /// Absent for the first peak.
    pub rr_clocks: Option<u16>,
    /// Latest full-window heart rate, once one exists.
    pub heart_rate_bpm: Option<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorEvent {
    Peak(DetectionEvent),
    HeartRate(RateReport),
}

/// Per-sample signals for plotting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TracePoint {
    pub t: u64,
    pub filtered: i32,
    pub smoothed: i32,
    /// Absent while the threshold is still being learned.
    pub threshold: Option<i32>,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineStep {
    pub trace: Option<TracePoint>,
    pub events: Vec<DetectorEvent>,
}

/// The full QRS path: baseline correction, smoothing, threshold detection,
/// R-R counting and heart-rate estimation, fed one ADC code per sample.
///
/// Event times are raw input sample indices. The threshold is seeded from
/// the first `learning_samples` valid samples; those samples are buffered
/// and replayed through the comparator once the seed is known, so beats in
/// the learning window are still reported.
#[derive(Debug, Clone)]
pub struct QrsDetector {
    config: DetectorConfig,
    corrector: BaselineCorrector,
    smoother: MovingAverage,
    threshold: Option<ThresholdState>,
    learning: Vec<FilteredSample>,
    rate: RateState,
    last_peak: Option<u64>,
    latest_bpm: Option<u16>,
}

impl QrsDetector {
    pub fn new(config: DetectorConfig) -> Result<Self, DetectorConfigError> {
        config.validate()?;
        Ok(Self {
            corrector: BaselineCorrector::new(&config.se),
            smoother: MovingAverage::new(config.smooth_width),
            threshold: None,
            learning: Vec::with_capacity(config.learning_samples),
            rate: RateState::new(),
            last_peak: None,
            latest_bpm: None,
            config,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Raw-sample delay between an input and its corrected output.
    pub fn group_delay(&self) -> usize {
        self.corrector.group_delay()
    }

    pub fn threshold(&self) -> Option<i32> {
        self.threshold.as_ref().map(ThresholdState::threshold)
    }

    pub fn last_peak(&self) -> Option<u64> {
        self.last_peak
    }

    pub fn set_beta(&mut self, num: u32, den: u32) -> Result<(), DetectorConfigError> {
        let mut next = self.config.clone();
        next.beta_num = num;
        next.beta_den = den;
        next.validate()?;
        self.config = next;
        if let Some(th) = &mut self.threshold {
            th.set_beta(num, den);
        }
        Ok(())
    }

    pub fn set_threshold_floor(&mut self, floor: i32) -> Result<(), DetectorConfigError> {
        if floor < 0 {
            return Err(DetectorConfigError::NegativeFloor);
        }
        self.config.threshold_floor = floor;
        if let Some(th) = &mut self.threshold {
            th.set_floor(floor);
        }
        Ok(())
    }

    pub fn set_refractory_ms(&mut self, ms: u32) {
        self.config.refractory_ms = ms;
        if let Some(th) = &mut self.threshold {
            th.set_refractory(refractory_samples(ms));
        }
    }

    pub fn set_smooth_width(&mut self, width: usize) -> Result<(), DetectorConfigError> {
        if width == 0 {
            return Err(DetectorConfigError::ZeroWidth);
        }
        self.config.smooth_width = width;
        self.smoother.set_width(width);
        Ok(())
    }

    pub fn push(&mut self, code: u16) -> PipelineStep {
        let mut step = PipelineStep::default();
        let Some(filtered) = self.corrector.push(i32::from(code)) else {
            return step;
        };
        let smoothed = if filtered.valid {
            let s = self.smoother.smooth(filtered);
            if s.valid {
                self.feed(s, &mut step.events);
            }
            s.value
        } else {
            filtered.value
        };
        step.trace = Some(TracePoint {
            t: filtered.t,
            filtered: filtered.value,
            smoothed,
            threshold: self.threshold(),
        });
        if let Some(report) = self.rate.heart_rate(filtered.t) {
            if !report.provisional {
                self.latest_bpm = Some(report.bpm);
            }
            step.events.push(DetectorEvent::HeartRate(report));
        }
        step
    }

    fn feed(&mut self, s: FilteredSample, events: &mut Vec<DetectorEvent>) {
        let s = if self.config.rectify {
            FilteredSample {
                value: s.value.abs(),
                ..s
            }
        } else {
            s
        };
        if self.threshold.is_some() {
            self.compare(s, events);
            return;
        }
        self.learning.push(s);
        if self.learning.len() < self.config.learning_samples.max(1) {
            return;
        }
        let peak = self.learning.iter().map(|s| s.value).max().unwrap_or(0);
        let mut th = ThresholdState::new(
            0,
            self.config.threshold_floor,
            self.config.beta_num,
            self.config.beta_den,
            self.config.refractory_samples(),
        );
        th.update_threshold(peak);
        self.threshold = Some(th);
        for s in std::mem::take(&mut self.learning) {
            self.compare(s, events);
        }
    }

    fn compare(&mut self, s: FilteredSample, events: &mut Vec<DetectorEvent>) {
        let th = self.threshold.as_mut().expect("threshold seeded");
        let Some(peak) = th.detect(s) else {
            return;
        };
        let rr_clocks = self.last_peak.map(|prev| rr_interval(prev, peak.t));
        self.last_peak = Some(peak.t);
        self.rate.record_peak(peak.t);
        events.push(DetectorEvent::Peak(DetectionEvent {
            t_peak: peak.t,
            amplitude: peak.amplitude,
            rr_clocks,
            heart_rate_bpm: self.latest_bpm,
        }));
    }

    /// Convenience: runs a whole code vector and collects the events.
    pub fn run(config: DetectorConfig, codes: &[u16]) -> Result<Vec<DetectorEvent>, DetectorConfigError> {
        let mut det = Self::new(config)?;
        Ok(codes.iter().flat_map(|&c| det.push(c).events).collect())
    }
}
