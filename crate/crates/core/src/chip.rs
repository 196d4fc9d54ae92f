//! The chip: ADC sample stream, QRS detector, framer, FIFO, CCU and the two
//! SPI slaves, advanced on one picosecond timeline.
//!
//! Three clocks drive the model:
//!
//! * the ADC sample clock (256 Hz), which feeds the detector and the framer;
//! * the FIFO write clock, which moves one framed word per edge from the
//!   framer into the FIFO;
//! * the SCLK of the data link, whose sampling edges clock the FIFO read
//!   side (the extracted clock). The read side therefore only runs while
//!   the host is clocking the bus.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccu::{
    frame_ecg, frame_heart_rate, frame_rr, frame_status, Action, CcuEvent, CcuState, ConfigChange, FifoStatus,
    InterruptCause, Mode, RegisterAck, RegisterDefaults, StatusEvent, REGISTER_MAX,
};
use crate::detector::{DetectorConfig, DetectorConfigError, DetectorEvent, QrsDetector, TracePoint};
use crate::fifo_cdc::{AsyncFifo, Domain, FifoConfig, FifoConfigError, FifoEvent, PushOutcome, TranscriptLine};
use crate::signal_io::SAMPLE_RATE_HZ;
use crate::spi_link::{Command, SlaveDevice, SlaveEvent, SlaveState, SpiBus, SpiMode, TICKS_PER_SCLK};

pub const PS_PER_SECOND: u64 = 1_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipTiming {
    /// FIFO write clock.
    pub write_clock_hz: u64,
    /// Host SPI clock.
    pub sclk_hz: u64,
}

impl Default for ChipTiming {
    fn default() -> Self {
        Self {
            write_clock_hz: 4 * u64::from(SAMPLE_RATE_HZ),
            sclk_hz: 1_000_000,
        }
    }
}

impl ChipTiming {
    pub fn sample_period_ps(&self) -> u64 {
        PS_PER_SECOND / u64::from(SAMPLE_RATE_HZ)
    }

    pub fn write_period_ps(&self) -> u64 {
        PS_PER_SECOND / self.write_clock_hz
    }

    /// Write edges sit half a period after sample instants.
    pub fn write_phase_ps(&self) -> u64 {
        self.write_period_ps() / 2
    }

    /// Bus model resolution: four ticks per SCLK period.
    pub fn spi_tick_ps(&self) -> u64 {
        PS_PER_SECOND / (self.sclk_hz * TICKS_PER_SCLK)
    }

    pub fn validate(&self) -> Result<(), ChipError> {
        if self.write_clock_hz == 0 || self.sclk_hz == 0 {
            return Err(ChipError::Timing("clock rates must be positive"));
        }
        if self.write_clock_hz < u64::from(SAMPLE_RATE_HZ) {
            return Err(ChipError::Timing("write clock must be at least the sample rate"));
        }
        if self.sclk_hz * TICKS_PER_SCLK > PS_PER_SECOND {
            return Err(ChipError::Timing("SCLK too fast for a picosecond tick"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChipConfig {
    pub detector: DetectorConfig,
    pub fifo: FifoConfig,
    pub timing: ChipTiming,
    /// SPI mode number, 0 to 3, used by both links.
    pub spi_mode: u8,
    /// Probability that a pointer synchronizer misses an edge.
    pub metastability: f64,
    pub seed: u64,
    /// Keep FIFO transcript lines.
    pub record_fifo_transcript: bool,
}

impl Default for ChipConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            fifo: FifoConfig::default(),
            timing: ChipTiming::default(),
            spi_mode: 0,
            metastability: 0.0,
            seed: 0,
            record_fifo_transcript: false,
        }
    }
}

impl ChipConfig {
    pub fn spi_mode(&self) -> Result<SpiMode, ChipError> {
        SpiMode::from_number(self.spi_mode).ok_or(ChipError::SpiMode(self.spi_mode))
    }
}

#[derive(Debug, Error)]
pub enum ChipError {
    #[error(transparent)]
    Detector(#[from] DetectorConfigError),
    #[error(transparent)]
    Fifo(#[from] FifoConfigError),
    #[error("invalid timing: {0}")]
    Timing(&'static str),
    #[error("SPI mode must be 0 to 3, got {0}")]
    SpiMode(u8),
    #[error("metastability probability must lie in [0, 1]")]
    Metastability,
    #[error("ADC code {0} exceeds 12 bits")]
    AdcCode(u16),
}

/// Latest values for the dedicated R-R link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RrLatch {
    pub rr: Option<u16>,
    /// Count of R-R intervals published so far.
    pub seq: u16,
    /// Latest heart-rate word, if any.
    pub heart_rate_word: Option<u16>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipStats {
    pub samples_taken: u64,
    pub words_framed: u64,
    pub words_written: u64,
    /// Write edges that found the FIFO full; the word stayed in the framer.
    pub write_rejections: u64,
    pub fifo_pops: u64,
    /// Completed data-link frames that carried a FIFO word.
    pub data_frames_sent: u64,
    pub interrupts: u64,
    pub max_fifo_occupancy: u32,
    pub max_framer_depth: usize,
    pub partial_frames: u64,
    pub modes_visited: Vec<Mode>,
    /// Breaches of the model's own invariants.
    pub violations: Vec<String>,
}

/// The part of the chip behind the data link, split out so the slave engine
/// can borrow it while the rest of the chip is untouched.
#[derive(Debug)]
struct Core {
    fifo: AsyncFifo,
    ccu: CcuState,
    credits: u32,
    queued_is_data: VecDeque<bool>,
    rng: ChaCha8Rng,
    metastability: f64,
    stats: ChipStats,
    fifo_log: Option<Vec<TranscriptLine>>,
    now: u64,
    rr_latch: RrLatch,
}

impl Core {
    fn meta(&mut self) -> bool {
        self.metastability > 0.0 && self.rng.random_bool(self.metastability)
    }

    fn fifo_status(&self) -> FifoStatus {
        FifoStatus {
            flags: self.fifo.update_flags(),
            read_view_occupancy: self.fifo.read_view_occupancy(),
            capacity: self.fifo.capacity(),
        }
    }

    fn log(&mut self, domain: Domain, event: FifoEvent) {
        if let Some(log) = &mut self.fifo_log {
            log.push(TranscriptLine::capture(self.now, domain, event, &self.fifo));
        }
    }

    fn read_edge(&mut self, pop: bool) -> Option<u16> {
        let before = self.fifo.true_occupancy();
        let meta = self.meta();
        let w = self.fifo.read_edge(pop, meta);
        if meta {
            self.log(Domain::Read, FifoEvent::Metastable);
        }
        if let Some(w) = w {
            if before == 0 {
                self.stats.violations.push(format!("t={}: pop from an empty FIFO", self.now));
            }
            self.log(Domain::Read, FifoEvent::Pop(w));
        }
        w
    }

    fn respond(&mut self, q: &mut VecDeque<u16>, word: u16) {
        q.push_back(word);
        self.queued_is_data.push_back(false);
    }

    fn apply_actions(&mut self, actions: &[Action]) {
        for a in actions {
            if let Action::AssertInterrupt(cause) = a {
                self.check_honesty(*cause);
            }
        }
    }

    fn check_honesty(&mut self, cause: InterruptCause) {
        self.stats.interrupts += 1;
        let occ = self.fifo.true_occupancy();
        let need = self.fifo.capacity() - self.fifo.margin();
        if occ < need {
            self.stats
                .violations
                .push(format!("t={}: interrupt {cause:?} raised at occupancy {occ} < {need}", self.now));
        }
    }
}

impl SlaveDevice for Core {
    fn clock_edge(&mut self) {
        self.read_edge(false);
    }

    fn frame_received(&mut self, rx: u16, sent: Option<u16>, q: &mut VecDeque<u16>) {
        if sent.is_some() && self.queued_is_data.pop_front() == Some(true) {
            self.stats.data_frames_sent += 1;
        }
        match Command::decode(rx) {
            Command::Nop => {}
            Command::Read(n) => self.credits += u32::from(n),
            Command::RegWrite { addr, value } => {
                let (ack, actions) = self.ccu.write_control_register(addr, value);
                self.apply_actions(&actions);
                self.respond(q, ack.word(addr));
            }
            Command::RegRead { addr } => {
                let ack = self.ccu.read_control_register(addr, self.fifo_status());
                self.respond(q, ack.word(addr));
            }
            Command::Reserved { addr, .. } => self.respond(q, RegisterAck::Nak.word(addr)),
        }
        let pop = self.credits > 0 && q.is_empty() && !self.fifo.read_flags().0;
        if let Some(w) = self.read_edge(pop) {
            q.push_back(w);
            self.queued_is_data.push_back(true);
            self.credits -= 1;
            self.stats.fifo_pops += 1;
            if self.ccu.mode() == Mode::InterruptPending {
                self.ccu.step(CcuEvent::DrainStarted);
            }
            if self.ccu.mode() == Mode::Draining && self.fifo.read_flags().1 {
                self.ccu.step(CcuEvent::NearlyEmpty);
            }
        }
    }
}

/// The dedicated R-R link: each selection stages a header, the raw
/// interval and the latest heart-rate word.
struct RrLink<'a>(&'a RrLatch);

impl SlaveDevice for RrLink<'_> {
    fn select(&mut self, q: &mut VecDeque<u16>) {
        q.clear();
        match self.0.rr {
            None => q.push_back(frame_status(StatusEvent::NoData)),
            Some(rr) => {
                q.push_back(frame_status(StatusEvent::RrReady {
                    seq: self.0.seq & REGISTER_MAX,
                }));
                q.push_back(rr);
                q.push_back(
                    self.0
                        .heart_rate_word
                        .unwrap_or_else(|| frame_status(StatusEvent::NoData)),
                );
            }
        }
    }

    fn deselect(&mut self, q: &mut VecDeque<u16>) {
        q.clear();
    }

    fn frame_received(&mut self, _rx: u16, _sent: Option<u16>, _q: &mut VecDeque<u16>) {}
}

#[derive(Debug)]
pub struct ChipModel {
    timing: ChipTiming,
    codes: Vec<u16>,
    next_code: usize,
    next_sample_at: u64,
    next_write_at: u64,
    detector: QrsDetector,
    framer: VecDeque<u16>,
    hr_seq: u32,
    nearly_full_prev: bool,
    core: Core,
    main_slave: SlaveState,
    rr_slave: SlaveState,
    events: Vec<DetectorEvent>,
    trace: Vec<TracePoint>,
}

impl ChipModel {
    /// A chip that will digitize `codes`, one per sample clock while
    /// acquisition is enabled.
    pub fn new(config: &ChipConfig, codes: Vec<u16>) -> Result<Self, ChipError> {
        config.timing.validate()?;
        config.spi_mode()?;
        if !(0.0..=1.0).contains(&config.metastability) {
            return Err(ChipError::Metastability);
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > crate::signal_io::ADC_MAX_CODE) {
            return Err(ChipError::AdcCode(bad));
        }
        let detector = QrsDetector::new(config.detector.clone())?;
        let fifo = AsyncFifo::new(config.fifo)?;
        let ccu = CcuState::new(RegisterDefaults::from_config(&config.detector, &config.fifo));
        Ok(Self {
            timing: config.timing,
            next_code: 0,
            next_sample_at: 0,
            next_write_at: config.timing.write_phase_ps(),
            detector,
            framer: VecDeque::new(),
            hr_seq: 0,
            nearly_full_prev: false,
            core: Core {
                fifo,
                ccu,
                credits: 0,
                queued_is_data: VecDeque::new(),
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                metastability: config.metastability,
                stats: ChipStats::default(),
                fifo_log: config.record_fifo_transcript.then(Vec::new),
                now: 0,
                rr_latch: RrLatch::default(),
            },
            main_slave: SlaveState::new(),
            rr_slave: SlaveState::new(),
            events: Vec::new(),
            trace: Vec::new(),
            codes,
        })
    }

    pub fn timing(&self) -> ChipTiming {
        self.timing
    }

    pub fn now(&self) -> u64 {
        self.core.now
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn samples_taken(&self) -> usize {
        self.next_code
    }

    /// Every code has been sampled.
    pub fn production_finished(&self) -> bool {
        self.next_code >= self.codes.len()
    }

    pub fn framer_depth(&self) -> usize {
        self.framer.len()
    }

    pub fn mode(&self) -> Mode {
        self.core.ccu.mode()
    }

    pub fn ccu(&self) -> &CcuState {
        &self.core.ccu
    }

    pub fn fifo(&self) -> &AsyncFifo {
        &self.core.fifo
    }

    pub fn interrupt_asserted(&self) -> bool {
        self.core.ccu.interrupt().asserted
    }

    pub fn rr_latch(&self) -> RrLatch {
        self.core.rr_latch
    }

    pub fn detector(&self) -> &QrsDetector {
        &self.detector
    }

    pub fn events(&self) -> &[DetectorEvent] {
        &self.events
    }

    pub fn trace(&self) -> &[TracePoint] {
        &self.trace
    }

    pub fn fifo_transcript(&self) -> &[TranscriptLine] {
        self.core.fifo_log.as_deref().unwrap_or(&[])
    }

    pub fn main_slave(&self) -> &SlaveState {
        &self.main_slave
    }

    pub fn stats(&self) -> ChipStats {
        let mut s = self.core.stats.clone();
        s.partial_frames = self.main_slave.discarded_frames() + self.rr_slave.discarded_frames();
        s.modes_visited = self.core.ccu.visited();
        s
    }

    /// Pops minus words that have left on the wire or still wait in the
    /// slave's queue; zero when no FIFO word was lost on the link.
    pub fn pop_imbalance(&self) -> i64 {
        let staged = self.core.queued_is_data.iter().filter(|d| **d).count() as i64;
        self.core.stats.fifo_pops as i64 - self.core.stats.data_frames_sent as i64 - staged
    }

    fn apply_pending(&mut self) {
        for change in self.core.ccu.take_pending() {
            let r = match change {
                ConfigChange::SmoothWidth(w) => self.detector.set_smooth_width(w).map_err(|e| e.to_string()),
                ConfigChange::Beta { num, den } => self.detector.set_beta(num, den).map_err(|e| e.to_string()),
                ConfigChange::Floor(f) => self.detector.set_threshold_floor(f).map_err(|e| e.to_string()),
                ConfigChange::RefractoryMs(ms) => {
                    self.detector.set_refractory_ms(ms);
                    Ok(())
                }
                ConfigChange::Margin(m) => self.core.fifo.set_margin(m).map_err(|e| e.to_string()),
            };
            if let Err(e) = r {
                log::warn!("chip: register change {change:?} rejected: {e}");
            }
        }
    }

    fn sample_edge(&mut self) {
        self.core.now = self.next_sample_at;
        self.next_sample_at += self.timing.sample_period_ps();
        if !self.core.ccu.acquiring() || self.production_finished() {
            return;
        }
        self.apply_pending();
        let code = self.codes[self.next_code];
        self.next_code += 1;
        self.core.stats.samples_taken += 1;
        let step = self.detector.push(code);
        let before = self.framer.len();
        self.framer.push_back(frame_ecg(code));
        for ev in &step.events {
            match ev {
                DetectorEvent::HeartRate(r) => {
                    let w = frame_heart_rate(r.bpm, self.hr_seq);
                    self.hr_seq += 1;
                    self.framer.push_back(w);
                    self.core.rr_latch.heart_rate_word = Some(w);
                }
                DetectorEvent::Peak(p) => {
                    if let Some(rr) = p.rr_clocks {
                        self.framer.extend(frame_rr(rr));
                        self.core.rr_latch.rr = Some(rr);
                        self.core.rr_latch.seq = self.core.rr_latch.seq.wrapping_add(1);
                    }
                }
            }
        }
        self.core.stats.words_framed += (self.framer.len() - before) as u64;
        self.core.stats.max_framer_depth = self.core.stats.max_framer_depth.max(self.framer.len());
        self.trace.extend(step.trace);
        self.events.extend(step.events);
    }

    fn write_edge(&mut self) {
        self.core.now = self.next_write_at;
        self.next_write_at += self.timing.write_period_ps();
        let word = self.framer.front().copied();
        let meta = self.core.meta();
        let before = self.core.fifo.true_occupancy();
        match self.core.fifo.write_edge(word, meta) {
            Some(PushOutcome::Accepted) => {
                let w = self.framer.pop_front().expect("framer word");
                self.core.stats.words_written += 1;
                if before >= self.core.fifo.capacity() {
                    let t = self.core.now;
                    self.core.stats.violations.push(format!("t={t}: write into a full FIFO"));
                }
                self.core.log(Domain::Write, FifoEvent::Push(w));
            }
            Some(PushOutcome::Rejected) => {
                self.core.stats.write_rejections += 1;
                self.core.log(Domain::Write, FifoEvent::Reject(word.expect("framer word")));
            }
            None => {}
        }
        if meta {
            self.core.log(Domain::Write, FifoEvent::Metastable);
        }
        let occ = self.core.fifo.true_occupancy();
        self.core.stats.max_fifo_occupancy = self.core.stats.max_fifo_occupancy.max(occ);
        let (full, nearly_full) = self.core.fifo.write_flags();
        let rising = nearly_full && !self.nearly_full_prev;
        self.nearly_full_prev = nearly_full;
        let ccu = &mut self.core.ccu;
        let actions = if rising && ccu.mode() == Mode::Acquire {
            ccu.step(CcuEvent::NearlyFull)
        } else if full && ccu.mode() != Mode::Idle && ccu.interrupt().cause != Some(InterruptCause::FifoFull) {
            ccu.step(CcuEvent::Full)
        } else {
            Vec::new()
        };
        self.core.apply_actions(&actions);
    }

    fn next_event_at(&self) -> u64 {
        self.next_sample_at.min(self.next_write_at)
    }

    fn process_next(&mut self) {
        if self.next_sample_at <= self.next_write_at {
            self.sample_edge();
        } else {
            self.write_edge();
        }
    }

    /// Runs the sample and write clocks up to and including time `t`.
    pub fn advance_to(&mut self, t: u64) {
        while self.next_event_at() <= t {
            self.process_next();
        }
        self.core.now = self.core.now.max(t);
    }

    /// Runs until the interrupt line is asserted or `deadline` passes.
    /// Returns whether the interrupt is asserted; `now()` is then the
    /// instant it was raised.
    pub fn advance_until_interrupt(&mut self, deadline: u64) -> bool {
        loop {
            if self.interrupt_asserted() {
                return true;
            }
            if self.next_event_at() > deadline {
                self.advance_to(deadline);
                return false;
            }
            self.process_next();
        }
    }

    /// Lets both slaves react to this tick's line states.
    pub fn spi_tick(&mut self, main: &mut SpiBus, rr: &mut SpiBus) -> (Option<SlaveEvent>, Option<SlaveEvent>) {
        let m = self.main_slave.tick(main, &mut self.core);
        let latch = self.core.rr_latch;
        let r = self.rr_slave.tick(rr, &mut RrLink(&latch));
        (m, r)
    }

    /// Ticks only the data link, leaving the R-R bus idle.
    pub fn spi_tick_main(&mut self, main: &mut SpiBus) -> Option<SlaveEvent> {
        self.main_slave.tick(main, &mut self.core)
    }

    /// Checks the FIFO-level invariants the model can see.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut v = self.core.stats.violations.clone();
        let f = &self.core.fifo;
        if f.gray_violations() > 0 {
            v.push(format!("{} pointer increments changed more than one bit", f.gray_violations()));
        }
        if f.true_occupancy() > f.capacity() {
            v.push(format!("occupancy {} exceeds capacity", f.true_occupancy()));
        }
        let imbalance = self.pop_imbalance();
        if imbalance != 0 {
            v.push(format!("FIFO pops and transmitted data words differ by {imbalance}"));
        }
        v
    }
}
