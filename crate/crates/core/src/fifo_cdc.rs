//! Dual-clock FIFO with gray-coded pointer synchronization.
//!
//! Each domain owns a `(P+1)`-bit binary pointer and its gray image. The
//! opposite domain sees the gray image only through a two-register
//! synchronizer clocked by its own edges, so every flag is computed from a
//! view that is at least two destination edges old. Such views can only
//! overstate occupancy on the write side and understate it on the read side,
//! which is what keeps `full` and `empty` safe.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Binary to reflected gray code.
pub fn bin_to_gray(b: u32) -> u32 {
    b ^ (b >> 1)
}

/// Inverse of [`bin_to_gray`].
pub fn gray_to_bin(g: u32) -> u32 {
    let mut b = g;
    let mut shift = 1;
    while shift < u32::BITS {
        b ^= b >> shift;
        shift <<= 1;
    }
    b
}

/// A gray-coded pointer of a fixed width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrayCode {
    bits: u32,
    width: u32,
}

impl GrayCode {
    pub fn from_binary(b: u32, width: u32) -> Self {
        debug_assert!(width <= 31 && b < (1 << width));
        Self {
            bits: bin_to_gray(b),
            width,
        }
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn to_binary(self) -> u32 {
        gray_to_bin(self.bits)
    }

    pub fn hamming(self, other: Self) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FifoConfigError {
    #[error("address width must be in 1..=16, got {0}")]
    AddrBits(u32),
    #[error("margin {margin} must be below capacity {capacity}")]
    Margin { margin: u32, capacity: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FifoConfig {
    /// `P`: the FIFO holds `2^P` words.
    pub addr_bits: u32,
    /// Distance from full/empty at which the "nearly" flags assert.
    pub margin: u32,
}

impl Default for FifoConfig {
    /// 8 Kb of 16-bit words.
    fn default() -> Self {
        Self {
            addr_bits: 9,
            margin: 16,
        }
    }
}

impl FifoConfig {
    pub fn capacity(&self) -> u32 {
        1 << self.addr_bits
    }

    pub fn validate(&self) -> Result<(), FifoConfigError> {
        if !(1..=16).contains(&self.addr_bits) {
            return Err(FifoConfigError::AddrBits(self.addr_bits));
        }
        if self.margin >= self.capacity() {
            return Err(FifoConfigError::Margin {
                margin: self.margin,
                capacity: self.capacity(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FifoFlags {
    pub full: bool,
    pub nearly_full: bool,
    pub empty: bool,
    pub nearly_empty: bool,
}

impl fmt::Display for FifoFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bit = |b: bool, c: char| if b { c } else { '-' };
        write!(
            f,
            "{}{}{}{}",
            bit(self.full, 'F'),
            bit(self.nearly_full, 'f'),
            bit(self.empty, 'E'),
            bit(self.nearly_empty, 'e')
        )
    }
}

/// Outcome of a write-domain edge that carried a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    /// The write side saw the FIFO full; the word was not stored.
    Rejected,
}

#[derive(Debug, Clone)]
pub struct AsyncFifo {
    storage: Vec<u16>,
    addr_bits: u32,
    margin: u32,
    // write domain
    wptr_bin: u32,
    wptr_gray: u32,
    rptr_sync: [u32; 2],
    // read domain
    rptr_bin: u32,
    rptr_gray: u32,
    wptr_sync: [u32; 2],
    // diagnostics
    overflow_rejections: u64,
    underflow_reads: u64,
    gray_transitions: u64,
    gray_violations: u64,
}

impl AsyncFifo {
    pub fn new(config: FifoConfig) -> Result<Self, FifoConfigError> {
        config.validate()?;
        Ok(Self {
            storage: vec![0; config.capacity() as usize],
            addr_bits: config.addr_bits,
            margin: config.margin,
            wptr_bin: 0,
            wptr_gray: 0,
            rptr_sync: [0; 2],
            rptr_bin: 0,
            rptr_gray: 0,
            wptr_sync: [0; 2],
            overflow_rejections: 0,
            underflow_reads: 0,
            gray_transitions: 0,
            gray_violations: 0,
        })
    }

    pub fn capacity(&self) -> u32 {
        1 << self.addr_bits
    }

    pub fn margin(&self) -> u32 {
        self.margin
    }

    pub fn set_margin(&mut self, margin: u32) -> Result<(), FifoConfigError> {
        if margin >= self.capacity() {
            return Err(FifoConfigError::Margin {
                margin,
                capacity: self.capacity(),
            });
        }
        self.margin = margin;
        Ok(())
    }

    fn ptr_mask(&self) -> u32 {
        (1 << (self.addr_bits + 1)) - 1
    }

    fn addr_mask(&self) -> u32 {
        (1 << self.addr_bits) - 1
    }

    /// Occupancy as the write domain sees it (never below the truth).
    pub fn write_view_occupancy(&self) -> u32 {
        self.wptr_bin.wrapping_sub(gray_to_bin(self.rptr_sync[1])) & self.ptr_mask()
    }

    /// Occupancy as the read domain sees it (never above the truth).
    pub fn read_view_occupancy(&self) -> u32 {
        gray_to_bin(self.wptr_sync[1]).wrapping_sub(self.rptr_bin) & self.ptr_mask()
    }

    /// Model-only ground truth; hardware cannot observe this.
    pub fn true_occupancy(&self) -> u32 {
        self.wptr_bin.wrapping_sub(self.rptr_bin) & self.ptr_mask()
    }

    pub fn write_flags(&self) -> (bool, bool) {
        let occ = self.write_view_occupancy();
        (occ == self.capacity(), occ >= self.capacity() - self.margin)
    }

    pub fn read_flags(&self) -> (bool, bool) {
        let occ = self.read_view_occupancy();
        (occ == 0, occ <= self.margin)
    }

    /// Full/nearly-full from the write domain, empty/nearly-empty from the
    /// read domain, each from its own synchronized view.
    pub fn update_flags(&self) -> FifoFlags {
        let (full, nearly_full) = self.write_flags();
        let (empty, nearly_empty) = self.read_flags();
        FifoFlags {
            full,
            nearly_full,
            empty,
            nearly_empty,
        }
    }

    pub fn wptr_bin(&self) -> u32 {
        self.wptr_bin
    }

    pub fn rptr_bin(&self) -> u32 {
        self.rptr_bin
    }

    pub fn wptr_gray(&self) -> GrayCode {
        GrayCode {
            bits: self.wptr_gray,
            width: self.addr_bits + 1,
        }
    }

    pub fn rptr_gray(&self) -> GrayCode {
        GrayCode {
            bits: self.rptr_gray,
            width: self.addr_bits + 1,
        }
    }

    pub fn overflow_rejections(&self) -> u64 {
        self.overflow_rejections
    }

    pub fn underflow_reads(&self) -> u64 {
        self.underflow_reads
    }

    pub fn gray_transitions(&self) -> u64 {
        self.gray_transitions
    }

    pub fn gray_violations(&self) -> u64 {
        self.gray_violations
    }

    fn advance(&mut self, bin: u32, gray: u32) -> (u32, u32) {
        let next_bin = (bin + 1) & self.ptr_mask();
        let next_gray = bin_to_gray(next_bin);
        self.gray_transitions += 1;
        if (gray ^ next_gray).count_ones() != 1 {
            self.gray_violations += 1;
        }
        (next_bin, next_gray)
    }

    /// One write-domain clock edge. `word` is stored unless the write side
    /// sees the FIFO full. The read pointer synchronizer then shifts; with
    /// `metastable` set its first stage fails to capture this edge.
    pub fn write_edge(&mut self, word: Option<u16>, metastable: bool) -> Option<PushOutcome> {
        let outcome = word.map(|w| {
            if self.write_flags().0 {
                self.overflow_rejections += 1;
                PushOutcome::Rejected
            } else {
                let addr = (self.wptr_bin & self.addr_mask()) as usize;
                self.storage[addr] = w;
                (self.wptr_bin, self.wptr_gray) = self.advance(self.wptr_bin, self.wptr_gray);
                PushOutcome::Accepted
            }
        });
        self.rptr_sync[1] = self.rptr_sync[0];
        if !metastable {
            self.rptr_sync[0] = self.rptr_gray;
        }
        outcome
    }

    /// One read-domain clock edge, popping when `pop` is set and the read
    /// side does not see the FIFO empty.
    pub fn read_edge(&mut self, pop: bool, metastable: bool) -> Option<u16> {
        let mut word = None;
        if pop {
            if self.read_flags().0 {
                self.underflow_reads += 1;
            } else {
                let addr = (self.rptr_bin & self.addr_mask()) as usize;
                word = Some(self.storage[addr]);
                (self.rptr_bin, self.rptr_gray) = self.advance(self.rptr_bin, self.rptr_gray);
            }
        }
        self.wptr_sync[1] = self.wptr_sync[0];
        if !metastable {
            self.wptr_sync[0] = self.wptr_gray;
        }
        word
    }

    pub fn push(&mut self, word: u16) -> bool {
        self.write_edge(Some(word), false) == Some(PushOutcome::Accepted)
    }

    pub fn pop(&mut self) -> Option<u16> {
        self.read_edge(true, false)
    }
}

/// A free-running clock with optional per-edge jitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockProcess {
    /// Edge spacing in model time units.
    pub period: u64,
    /// Time of edge 0.
    pub phase: u64,
    /// Each edge is delayed by a uniform draw in `0..=jitter`.
    pub jitter: u64,
    pub jitter_seed: u64,
}

impl ClockProcess {
    pub fn new(period: u64, phase: u64) -> Self {
        Self {
            period,
            phase,
            jitter: 0,
            jitter_seed: 0,
        }
    }

    pub fn with_jitter(mut self, jitter: u64, seed: u64) -> Self {
        self.jitter = jitter;
        self.jitter_seed = seed;
        self
    }

    fn validate(&self) -> Result<(), CdcError> {
        if self.period == 0 {
            return Err(CdcError::ZeroPeriod);
        }
        if self.jitter >= self.period {
            return Err(CdcError::JitterTooLarge);
        }
        Ok(())
    }

    fn edges(&self) -> impl Iterator<Item = u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.jitter_seed);
        let (period, phase, jitter) = (self.period, self.phase, self.jitter);
        (0u64..).map(move |k| {
            let j = if jitter == 0 { 0 } else { rng.random_range(0..=jitter) };
            phase + k * period + j
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CdcError {
    #[error("clock period must be positive")]
    ZeroPeriod,
    #[error("clock jitter must be smaller than its period")]
    JitterTooLarge,
    #[error("metastability probability must lie in [0, 1]")]
    BadProbability,
    #[error("data integrity violated at consumed word {index}: {detail}")]
    Integrity { index: usize, detail: String },
    #[error("{0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Write,
    Read,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Write => "W",
            Domain::Read => "R",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FifoEvent {
    Push(u16),
    Reject(u16),
    Pop(u16),
    EmptyRead,
    Metastable,
}

impl fmt::Display for FifoEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FifoEvent::Push(w) => write!(f, "push {w:04x}"),
            FifoEvent::Reject(w) => write!(f, "reject {w:04x}"),
            FifoEvent::Pop(w) => write!(f, "pop {w:04x}"),
            FifoEvent::EmptyRead => f.write_str("empty-read"),
            FifoEvent::Metastable => f.write_str("metastable"),
        }
    }
}

/// One transcript row: `time,domain,event,wptr/rptr/wsync/rsync,flags`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranscriptLine {
    pub time: u64,
    pub domain: Domain,
    pub event: FifoEvent,
    pub wptr: u32,
    pub rptr: u32,
    pub wptr_seen_by_reader: u32,
    pub rptr_seen_by_writer: u32,
    pub flags: FifoFlags,
}

impl TranscriptLine {
    pub fn capture(time: u64, domain: Domain, event: FifoEvent, fifo: &AsyncFifo) -> Self {
        Self {
            time,
            domain,
            event,
            wptr: fifo.wptr_bin,
            rptr: fifo.rptr_bin,
            wptr_seen_by_reader: gray_to_bin(fifo.wptr_sync[1]),
            rptr_seen_by_writer: gray_to_bin(fifo.rptr_sync[1]),
            flags: fifo.update_flags(),
        }
    }
}

impl fmt::Display for TranscriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},w={} r={} ws={} rs={},{}",
            self.time,
            self.domain,
            self.event,
            self.wptr,
            self.rptr,
            self.wptr_seen_by_reader,
            self.rptr_seen_by_writer,
            self.flags
        )
    }
}

/// When the read side pops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsumerPolicy {
    /// Pop on every read edge.
    Eager,
    /// Start popping once the read view reaches `start_at` words (or the
    /// producer is finished) and keep going until the view is empty.
    Burst { start_at: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoClockSim {
    pub fifo: FifoConfig,
    pub wclk: ClockProcess,
    pub rclk: ClockProcess,
    /// Words the producer offers, one per write edge; a rejected word is
    /// offered again on the next edge.
    pub words: Vec<u16>,
    pub consumer: ConsumerPolicy,
    /// Per-capture probability that a synchronizer stage misses an edge.
    pub metastability: f64,
    pub seed: u64,
    /// Model time after which the run stops.
    pub duration: u64,
    pub record_transcript: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SimReport {
    pub produced: Vec<u16>,
    pub consumed: Vec<u16>,
    pub rejected_offers: u64,
    pub write_edges: u64,
    pub read_edges: u64,
    pub metastable_captures: u64,
    pub gray_transitions: u64,
    pub gray_violations: u64,
    pub max_true_occupancy: u32,
    pub bursts: u64,
    pub end_time: u64,
    pub transcript: Vec<TranscriptLine>,
    /// Breaches of the model-only invariants (occupancy out of range,
    /// a flag missing while its condition held).
    pub violations: Vec<String>,
}

impl SimReport {
    /// No loss, duplication or reordering, every offered word delivered, and
    /// no invariant breach along the way.
    pub fn check_integrity(&self, offered: &[u16]) -> Result<(), CdcError> {
        if let Some(v) = self.violations.first() {
            return Err(CdcError::Invariant(v.clone()));
        }
        if self.gray_violations > 0 {
            return Err(CdcError::Invariant(format!(
                "{} pointer increments changed more than one bit",
                self.gray_violations
            )));
        }
        for (i, (got, want)) in self.consumed.iter().zip(offered).enumerate() {
            if got != want {
                return Err(CdcError::Integrity {
                    index: i,
                    detail: format!("got {got:04x}, expected {want:04x}"),
                });
            }
        }
        if self.consumed.len() != offered.len() {
            return Err(CdcError::Integrity {
                index: self.consumed.len().min(offered.len()),
                detail: format!("consumed {} of {} words", self.consumed.len(), offered.len()),
            });
        }
        Ok(())
    }
}

/// Discrete-event run of both clock domains against one FIFO.
///
/// Edges of both clocks go through a single time-ordered queue; edges at
/// the same instant run write before read.
pub fn run_two_clock_sim(sim: &TwoClockSim) -> Result<SimReport, CdcError> {
    sim.wclk.validate()?;
    sim.rclk.validate()?;
    if !(0.0..=1.0).contains(&sim.metastability) {
        return Err(CdcError::BadProbability);
    }
    let mut fifo = AsyncFifo::new(sim.fifo).map_err(|e| CdcError::Invariant(e.to_string()))?;
    let capacity = fifo.capacity();
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let mut wedges = sim.wclk.edges();
    let mut redges = sim.rclk.edges();
    let mut queue = BinaryHeap::new();
    queue.push(Reverse((wedges.next().unwrap(), 0u8)));
    queue.push(Reverse((redges.next().unwrap(), 1u8)));

    let mut report = SimReport::default();
    let mut next_word = 0usize;
    let mut draining = false;

    while let Some(Reverse((time, rank))) = queue.pop() {
        if time > sim.duration {
            break;
        }
        report.end_time = time;
        let meta = sim.metastability > 0.0 && rng.random_bool(sim.metastability);
        if meta {
            report.metastable_captures += 1;
        }
        let before = fifo.true_occupancy();
        if rank == 0 {
            report.write_edges += 1;
            let offer = sim.words.get(next_word).copied();
            if before == capacity && !fifo.write_flags().0 {
                report.violations.push(format!("t={time}: full flag missing at occupancy {before}"));
            }
            match fifo.write_edge(offer, meta) {
                Some(PushOutcome::Accepted) => {
                    let w = offer.expect("offered");
                    report.produced.push(w);
                    next_word += 1;
                    if before >= capacity {
                        report.violations.push(format!("t={time}: push into a full FIFO"));
                    }
                    if sim.record_transcript {
                        report.transcript.push(TranscriptLine::capture(time, Domain::Write, FifoEvent::Push(w), &fifo));
                    }
                }
                Some(PushOutcome::Rejected) => {
                    report.rejected_offers += 1;
                    if sim.record_transcript {
                        let w = offer.expect("offered");
                        report.transcript.push(TranscriptLine::capture(time, Domain::Write, FifoEvent::Reject(w), &fifo));
                    }
                }
                None => {}
            }
            queue.push(Reverse((wedges.next().unwrap(), 0)));
        } else {
            report.read_edges += 1;
            if before == 0 && !fifo.read_flags().0 {
                report.violations.push(format!("t={time}: empty flag missing"));
            }
            let producer_done = next_word >= sim.words.len();
            let want = match sim.consumer {
                ConsumerPolicy::Eager => true,
                ConsumerPolicy::Burst { start_at } => {
                    let occ = fifo.read_view_occupancy();
                    if !draining && (occ >= start_at || (producer_done && occ > 0)) {
                        draining = true;
                        report.bursts += 1;
                    }
                    if draining && occ == 0 {
                        draining = false;
                    }
                    draining
                }
            };
            let got = fifo.read_edge(want, meta);
            if let Some(w) = got {
                report.consumed.push(w);
                if before == 0 {
                    report.violations.push(format!("t={time}: pop from an empty FIFO"));
                }
            }
            if sim.record_transcript && want {
                let ev = got.map_or(FifoEvent::EmptyRead, FifoEvent::Pop);
                report.transcript.push(TranscriptLine::capture(time, Domain::Read, ev, &fifo));
            }
            queue.push(Reverse((redges.next().unwrap(), 1)));
        }
        if meta && sim.record_transcript {
            let domain = if rank == 0 { Domain::Write } else { Domain::Read };
            report.transcript.push(TranscriptLine::capture(time, domain, FifoEvent::Metastable, &fifo));
        }
        let occ = fifo.true_occupancy();
        if occ > capacity {
            report.violations.push(format!("t={time}: occupancy {occ} exceeds capacity"));
        }
        report.max_true_occupancy = report.max_true_occupancy.max(occ);
        if next_word >= sim.words.len() && report.consumed.len() == report.produced.len() {
            break;
        }
    }
    report.gray_transitions = fifo.gray_transitions();
    report.gray_violations = fifo.gray_violations();
    Ok(report)
}
