//! Central control unit: word framing, control registers and the
//! acquisition/interrupt state machine.
//!
//! # Frame layout
//!
//! Every FIFO and SPI word is 16 bits: a 2-bit tag in bits 15..14 and a
//! 14-bit payload.
//!
//! | tag | payload |
//! |-----|---------|
//! | `00` ECG | 12-bit ADC code in bits 13..2, bits 1..0 zero |
//! | `01` heart rate | bpm (8 bits) in 13..6, sequence (6 bits) in 5..0 |
//! | `10` R-R | interval below `0x3000`: the interval itself. Otherwise a pair: `0x3000 | rr >> 14`, then `rr & 0x3FFF` |
//! | `11` status | bit 13 clear: register readback, address in 12..10, value in 9..0. Bit 13 set: event, code in 12..10, detail in 9..0 |
//!
//! Event codes: 0 NAK (detail = register address), 1 no data, 2 R-R ready
//! (detail = R-R sequence number).
//!
//! # Register map
//!
//! Values are 10 bits wide.
//!
//! | addr | name | meaning |
//! |------|------|---------|
//! | 0 | CONTROL | write: bit 0 starts (1) or stops (0) acquisition. Read: bit 0 running, bits 4..1 full/nearly-full/empty/nearly-empty, bits 6..5 mode, bit 7 interrupt |
//! | 1 | GAIN | front-end gain code, mirrored only |
//! | 2 | SMOOTH_W | moving-average width, 1..=1023 |
//! | 3 | BETA | threshold ratio, numerator in 9..5, denominator in 4..0 |
//! | 4 | FLOOR | threshold floor in ADC codes |
//! | 5 | REFRACTORY_MS | refractory period in ms |
//! | 6 | MARGIN | FIFO nearly-full/nearly-empty margin in words |
//! | 7 | STATUS | read only: FIFO occupancy seen by the read side |

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::DetectorConfig;
use crate::fifo_cdc::{FifoConfig, FifoFlags};
use crate::signal_io::ADC_MAX_CODE;

pub const TAG_ECG: u16 = 0b00;
pub const TAG_HEART_RATE: u16 = 0b01;
pub const TAG_RR: u16 = 0b10;
pub const TAG_STATUS: u16 = 0b11;

const PAYLOAD_MASK: u16 = 0x3FFF;
const RR_PAIR_HEAD: u16 = 0x3000;

pub const EVENT_NAK: u16 = 0;
pub const EVENT_NO_DATA: u16 = 1;
pub const EVENT_RR_READY: u16 = 2;

pub const REG_CONTROL: u8 = 0;
pub const REG_GAIN: u8 = 1;
pub const REG_SMOOTH_W: u8 = 2;
pub const REG_BETA: u8 = 3;
pub const REG_FLOOR: u8 = 4;
pub const REG_REFRACTORY_MS: u8 = 5;
pub const REG_MARGIN: u8 = 6;
pub const REG_STATUS: u8 = 7;
pub const REGISTER_COUNT: usize = 8;
pub const REGISTER_MAX: u16 = 0x3FF;

/// A status-word event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatusEvent {
    Nak { addr: u16 },
    NoData,
    RrReady { seq: u16 },
}

/// One source record as carried by the FIFO and the data link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameRecord {
    Ecg(u16),
    HeartRate { bpm: u8, seq: u8 },
    RrInterval(u16),
    Readback { addr: u8, value: u16 },
    Status(StatusEvent),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("unknown status event code {code} in word {word:#06x}")]
    UnknownStatus { code: u16, word: u16 },
    #[error("malformed R-R pair head {0:#06x}")]
    BadRrHead(u16),
    #[error("R-R pair head followed by non R-R word {0:#06x}")]
    BrokenRrPair(u16),
    #[error("ECG word {0:#06x} has non-zero padding bits")]
    BadPadding(u16),
    #[error("record out of range for its frame: {0}")]
    OutOfRange(&'static str),
}

fn word(tag: u16, payload: u16) -> u16 {
    (tag << 14) | (payload & PAYLOAD_MASK)
}

pub fn tag_of(word: u16) -> u16 {
    word >> 14
}

pub fn frame_ecg(code: u16) -> u16 {
    debug_assert!(code <= ADC_MAX_CODE);
    word(TAG_ECG, (code & ADC_MAX_CODE) << 2)
}

/// Heart rate saturates at 255 bpm; the sequence number wraps at 64.
pub fn frame_heart_rate(bpm: u16, seq: u32) -> u16 {
    let bpm = bpm.min(255);
    word(TAG_HEART_RATE, (bpm << 6) | (seq % 64) as u16)
}

/// One word for intervals below `0x3000`, otherwise a head/tail pair.
pub fn frame_rr(rr: u16) -> Vec<u16> {
    if rr < RR_PAIR_HEAD {
        vec![word(TAG_RR, rr)]
    } else {
        vec![word(TAG_RR, RR_PAIR_HEAD | (rr >> 14)), word(TAG_RR, rr & PAYLOAD_MASK)]
    }
}

pub fn frame_readback(addr: u8, value: u16) -> u16 {
    word(TAG_STATUS, (u16::from(addr & 7) << 10) | (value & REGISTER_MAX))
}

pub fn frame_status(event: StatusEvent) -> u16 {
    let (code, detail) = match event {
        StatusEvent::Nak { addr } => (EVENT_NAK, addr),
        StatusEvent::NoData => (EVENT_NO_DATA, 0),
        StatusEvent::RrReady { seq } => (EVENT_RR_READY, seq),
    };
    word(TAG_STATUS, (1 << 13) | (code << 10) | (detail & REGISTER_MAX))
}

/// Frames any record into its one or two words.
pub fn frame(record: &FrameRecord) -> Result<Vec<u16>, FrameError> {
    Ok(match *record {
        FrameRecord::Ecg(code) => {
            if code > ADC_MAX_CODE {
                return Err(FrameError::OutOfRange("ECG code above 4095"));
            }
            vec![frame_ecg(code)]
        }
        FrameRecord::HeartRate { bpm, seq } => {
            if seq >= 64 {
                return Err(FrameError::OutOfRange("heart-rate sequence above 63"));
            }
            vec![frame_heart_rate(u16::from(bpm), u32::from(seq))]
        }
        FrameRecord::RrInterval(rr) => frame_rr(rr),
        FrameRecord::Readback { addr, value } => {
            if addr >= 8 || value > REGISTER_MAX {
                return Err(FrameError::OutOfRange("readback address or value"));
            }
            vec![frame_readback(addr, value)]
        }
        FrameRecord::Status(ev) => {
            if let StatusEvent::RrReady { seq: detail } | StatusEvent::Nak { addr: detail } = ev {
                if detail > REGISTER_MAX {
                    return Err(FrameError::OutOfRange("status detail above 1023"));
                }
            }
            vec![frame_status(ev)]
        }
    })
}

/// A single word decoded without context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameWord {
    Record(FrameRecord),
    /// First half of an R-R pair, holding bits 15..14 of the interval.
    RrHead(u16),
}

pub fn unframe(w: u16) -> Result<FrameWord, FrameError> {
    let payload = w & PAYLOAD_MASK;
    Ok(FrameWord::Record(match tag_of(w) {
        TAG_ECG => {
            if payload & 3 != 0 {
                return Err(FrameError::BadPadding(w));
            }
            FrameRecord::Ecg(payload >> 2)
        }
        TAG_HEART_RATE => FrameRecord::HeartRate {
            bpm: (payload >> 6) as u8,
            seq: (payload & 0x3F) as u8,
        },
        TAG_RR => {
            if payload >= RR_PAIR_HEAD {
                if payload > RR_PAIR_HEAD | 3 {
                    return Err(FrameError::BadRrHead(w));
                }
                return Ok(FrameWord::RrHead(payload & 3));
            }
            FrameRecord::RrInterval(payload)
        }
        _ => {
            let detail = payload & REGISTER_MAX;
            let field = (payload >> 10) & 7;
            if payload & (1 << 13) == 0 {
                FrameRecord::Readback {
                    addr: field as u8,
                    value: detail,
                }
            } else {
                FrameRecord::Status(match field {
                    EVENT_NAK => StatusEvent::Nak { addr: detail },
                    EVENT_NO_DATA if detail == 0 => StatusEvent::NoData,
                    EVENT_RR_READY => StatusEvent::RrReady { seq: detail },
                    code => return Err(FrameError::UnknownStatus { code, word: w }),
                })
            }
        }
    }))
}

/// Reassembles records from a word stream, joining R-R pairs.
#[derive(Debug, Clone, Default)]
pub struct Unframer {
    rr_high: Option<u16>,
}

impl Unframer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, w: u16) -> Result<Option<FrameRecord>, FrameError> {
        if let Some(high) = self.rr_high.take() {
            if tag_of(w) != TAG_RR {
                return Err(FrameError::BrokenRrPair(w));
            }
            return Ok(Some(FrameRecord::RrInterval((high << 14) | (w & PAYLOAD_MASK))));
        }
        match unframe(w)? {
            FrameWord::Record(r) => Ok(Some(r)),
            FrameWord::RrHead(high) => {
                self.rr_high = Some(high);
                Ok(None)
            }
        }
    }

    pub fn is_mid_pair(&self) -> bool {
        self.rr_high.is_some()
    }

    pub fn decode_all(words: &[u16]) -> Result<Vec<FrameRecord>, FrameError> {
        let mut u = Self::new();
        let mut out = Vec::new();
        for &w in words {
            out.extend(u.push(w)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Idle,
    Acquire,
    InterruptPending,
    Draining,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Idle, Mode::Acquire, Mode::InterruptPending, Mode::Draining];

    fn code(self) -> u16 {
        self as u16
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Idle => "IDLE",
            Mode::Acquire => "ACQUIRE",
            Mode::InterruptPending => "INTERRUPT_PENDING",
            Mode::Draining => "DRAINING",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterruptCause {
    FifoNearlyFull,
    FifoFull,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterruptLine {
    pub asserted: bool,
    pub cause: Option<InterruptCause>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcuEvent {
    Start,
    Stop,
    /// Rising edge of the write side's nearly-full flag.
    NearlyFull,
    /// The write side saw the FIFO full.
    Full,
    /// The host popped its first word since the interrupt.
    DrainStarted,
    /// The read side's nearly-empty flag after a pop.
    NearlyEmpty,
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    AssertInterrupt(InterruptCause),
    DeassertInterrupt,
    EnableAcquisition,
    DisableAcquisition,
    BeginDrain,
}

/// Detector/FIFO setting decoded from a register write, applied by the chip
/// at the next sample boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigChange {
    SmoothWidth(usize),
    Beta { num: u32, den: u32 },
    Floor(i32),
    RefractoryMs(u32),
    Margin(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterAck {
    Ack { value: u16 },
    Nak,
}

impl RegisterAck {
    /// The status word reporting this outcome to the host.
    pub fn word(self, addr: u8) -> u16 {
        match self {
            RegisterAck::Ack { value } => frame_readback(addr, value),
            RegisterAck::Nak => frame_status(StatusEvent::Nak { addr: u16::from(addr) }),
        }
    }
}

/// Live FIFO status the CCU folds into CONTROL/STATUS readbacks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FifoStatus {
    pub flags: FifoFlags,
    pub read_view_occupancy: u32,
    pub capacity: u32,
}

#[derive(Debug, Clone)]
pub struct CcuState {
    mode: Mode,
    registers: [u16; REGISTER_COUNT],
    interrupt: InterruptLine,
    pending: Vec<ConfigChange>,
    visited: [bool; 4],
    ignored_events: u64,
    interrupts_raised: u64,
    fifo_capacity: u32,
}

/// Power-on register contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegisterDefaults {
    pub smooth_width: u16,
    pub beta_num: u32,
    pub beta_den: u32,
    pub floor: u16,
    pub refractory_ms: u16,
    pub margin: u16,
    /// FIFO size, used to reject margins that could never be met.
    pub fifo_capacity: u32,
}

impl RegisterDefaults {
    pub fn from_config(detector: &DetectorConfig, fifo: &FifoConfig) -> Self {
        let clamp = |v: u64| v.min(u64::from(REGISTER_MAX)) as u16;
        Self {
            smooth_width: clamp(detector.smooth_width as u64),
            beta_num: detector.beta_num,
            beta_den: detector.beta_den,
            floor: clamp(detector.threshold_floor.max(0) as u64),
            refractory_ms: clamp(u64::from(detector.refractory_ms)),
            margin: clamp(u64::from(fifo.margin)),
            fifo_capacity: fifo.capacity(),
        }
    }
}

impl CcuState {
    pub fn new(defaults: RegisterDefaults) -> Self {
        let mut registers = [0u16; REGISTER_COUNT];
        registers[REG_SMOOTH_W as usize] = defaults.smooth_width & REGISTER_MAX;
        registers[REG_BETA as usize] = (((defaults.beta_num & 31) << 5) | (defaults.beta_den & 31)) as u16;
        registers[REG_FLOOR as usize] = defaults.floor & REGISTER_MAX;
        registers[REG_REFRACTORY_MS as usize] = defaults.refractory_ms & REGISTER_MAX;
        registers[REG_MARGIN as usize] = defaults.margin & REGISTER_MAX;
        let mut visited = [false; 4];
        visited[Mode::Idle as usize] = true;
        Self {
            mode: Mode::Idle,
            registers,
            interrupt: InterruptLine::default(),
            pending: Vec::new(),
            visited,
            ignored_events: 0,
            interrupts_raised: 0,
            fifo_capacity: defaults.fifo_capacity,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn interrupt(&self) -> InterruptLine {
        self.interrupt
    }

    pub fn acquiring(&self) -> bool {
        self.mode != Mode::Idle
    }

    pub fn visited(&self) -> Vec<Mode> {
        Mode::ALL.into_iter().filter(|m| self.visited[*m as usize]).collect()
    }

    pub fn ignored_events(&self) -> u64 {
        self.ignored_events
    }

    pub fn interrupts_raised(&self) -> u64 {
        self.interrupts_raised
    }

    pub fn register(&self, addr: u8) -> Option<u16> {
        self.registers.get(addr as usize).copied()
    }

    fn enter(&mut self, mode: Mode) {
        self.mode = mode;
        self.visited[mode as usize] = true;
    }

    fn raise(&mut self, cause: InterruptCause) -> Action {
        if !self.interrupt.asserted {
            self.interrupts_raised += 1;
        }
        self.interrupt = InterruptLine {
            asserted: true,
            cause: Some(cause),
        };
        Action::AssertInterrupt(cause)
    }

    /// Advances the state machine. Events with no edge from the current
    /// state are logged and ignored.
    pub fn step(&mut self, event: CcuEvent) -> Vec<Action> {
        use CcuEvent as E;
        use Mode as M;
        let mut actions = Vec::new();
        match (self.mode, event) {
            (_, E::Tick) => {}
            (M::Idle, E::Start) => {
                self.enter(M::Acquire);
                actions.push(Action::EnableAcquisition);
            }
            (M::Idle, E::Stop) => {}
            (_, E::Stop) => {
                self.enter(M::Idle);
                if self.interrupt.asserted {
                    self.interrupt = InterruptLine::default();
                    actions.push(Action::DeassertInterrupt);
                }
                actions.push(Action::DisableAcquisition);
            }
            (M::Acquire, E::NearlyFull) => {
                self.enter(M::InterruptPending);
                actions.push(self.raise(InterruptCause::FifoNearlyFull));
            }
            (M::Acquire, E::Full) => {
                self.enter(M::InterruptPending);
                actions.push(self.raise(InterruptCause::FifoFull));
            }
            (M::InterruptPending | M::Draining, E::Full) => {
                actions.push(self.raise(InterruptCause::FifoFull));
            }
            (M::InterruptPending, E::DrainStarted) => {
                self.enter(M::Draining);
                actions.push(Action::BeginDrain);
            }
            (M::Draining, E::NearlyEmpty) => {
                self.enter(M::Acquire);
                self.interrupt = InterruptLine::default();
                actions.push(Action::DeassertInterrupt);
            }
            (mode, ev) => {
                self.ignored_events += 1;
                log::debug!("ccu: ignoring {ev:?} in {mode}");
            }
        }
        actions
    }

    /// Validates and stores a register write. CONTROL acts on the state
    /// machine at once; detector and FIFO settings are queued for the next
    /// sample boundary.
    pub fn write_control_register(&mut self, addr: u8, value: u16) -> (RegisterAck, Vec<Action>) {
        let mut actions = Vec::new();
        if value > REGISTER_MAX {
            return (RegisterAck::Nak, actions);
        }
        let change = match addr {
            REG_CONTROL => {
                actions = self.step(if value & 1 == 1 { CcuEvent::Start } else { CcuEvent::Stop });
                None
            }
            REG_GAIN => None,
            REG_SMOOTH_W => {
                if value == 0 {
                    return (RegisterAck::Nak, actions);
                }
                Some(ConfigChange::SmoothWidth(usize::from(value)))
            }
            REG_BETA => {
                let (num, den) = (u32::from(value >> 5), u32::from(value & 31));
                if den == 0 || num == 0 || num > den {
                    return (RegisterAck::Nak, actions);
                }
                Some(ConfigChange::Beta { num, den })
            }
            REG_FLOOR => Some(ConfigChange::Floor(i32::from(value))),
            REG_REFRACTORY_MS => Some(ConfigChange::RefractoryMs(u32::from(value))),
            REG_MARGIN => {
                if u32::from(value) >= self.fifo_capacity {
                    return (RegisterAck::Nak, actions);
                }
                Some(ConfigChange::Margin(u32::from(value)))
            }
            _ => return (RegisterAck::Nak, actions),
        };
        if addr != REG_CONTROL {
            self.registers[addr as usize] = value;
        }
        self.pending.extend(change);
        (RegisterAck::Ack { value }, actions)
    }

    pub fn read_control_register(&self, addr: u8, fifo: FifoStatus) -> RegisterAck {
        let value = match addr {
            REG_CONTROL => {
                let f = fifo.flags;
                u16::from(self.acquiring())
                    | u16::from(f.full) << 1
                    | u16::from(f.nearly_full) << 2
                    | u16::from(f.empty) << 3
                    | u16::from(f.nearly_empty) << 4
                    | self.mode.code() << 5
                    | u16::from(self.interrupt.asserted) << 7
            }
            REG_STATUS => fifo.read_view_occupancy.min(u32::from(REGISTER_MAX)) as u16,
            a if (a as usize) < REGISTER_COUNT => self.registers[a as usize],
            _ => return RegisterAck::Nak,
        };
        RegisterAck::Ack { value }
    }

    /// Settings written since the last sample boundary, oldest first.
    pub fn take_pending(&mut self) -> Vec<ConfigChange> {
        std::mem::take(&mut self.pending)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ccu() -> CcuState {
        CcuState::new(RegisterDefaults::from_config(&DetectorConfig::default(), &FifoConfig::default()))
    }

    #[test]
    fn ecg_frame_examples() {
        assert_eq!(frame_ecg(0), 0x0000);
        assert_eq!(frame_ecg(4095), 0x3FFC);
        assert_eq!(unframe(0x0000), Ok(FrameWord::Record(FrameRecord::Ecg(0))));
    }

    #[test]
    fn every_ecg_code_round_trips() {
        for code in 0..=ADC_MAX_CODE {
            let w = frame(&FrameRecord::Ecg(code)).unwrap();
            assert_eq!(w.len(), 1);
            assert_eq!(tag_of(w[0]), TAG_ECG);
            assert_eq!(unframe(w[0]), Ok(FrameWord::Record(FrameRecord::Ecg(code))));
        }
    }

    #[test]
    fn heart_rate_word() {
        let w = frame_heart_rate(60, 0);
        assert_eq!(tag_of(w), TAG_HEART_RATE);
        assert_eq!((w & PAYLOAD_MASK) >> 6, 60);
        assert_eq!(
            unframe(w),
            Ok(FrameWord::Record(FrameRecord::HeartRate { bpm: 60, seq: 0 }))
        );
        assert_eq!(frame_heart_rate(400, 65), frame_heart_rate(255, 1));
    }

    #[test]
    fn rr_single_and_pair() {
        assert_eq!(frame_rr(256), vec![0x8100]);
        assert_eq!(frame_rr(0x2FFF).len(), 1);
        let pair = frame_rr(0xFFFF);
        assert_eq!(pair, vec![0x8000 | 0x3003, 0x8000 | 0x3FFF]);
        assert_eq!(Unframer::decode_all(&pair), Ok(vec![FrameRecord::RrInterval(0xFFFF)]));
        assert_eq!(
            Unframer::decode_all(&frame_rr(0x3000)),
            Ok(vec![FrameRecord::RrInterval(0x3000)])
        );
    }

    #[test]
    fn status_words() {
        let nak = frame_status(StatusEvent::Nak { addr: 7 });
        assert_eq!(tag_of(nak), TAG_STATUS);
        assert_eq!(unframe(nak), Ok(FrameWord::Record(FrameRecord::Status(StatusEvent::Nak { addr: 7 }))));
        let rb = frame_readback(3, 0x3FF);
        assert_eq!(unframe(rb), Ok(FrameWord::Record(FrameRecord::Readback { addr: 3, value: 0x3FF })));
        let unknown = 0xC000 | (1 << 13) | (5 << 10);
        assert_eq!(unframe(unknown), Err(FrameError::UnknownStatus { code: 5, word: unknown }));
    }

    #[test]
    fn malformed_words_are_diagnosed() {
        assert_eq!(unframe(0x0001), Err(FrameError::BadPadding(0x0001)));
        assert_eq!(unframe(0x8000 | 0x3004), Err(FrameError::BadRrHead(0xB004)));
        let mut u = Unframer::new();
        assert_eq!(u.push(0x8000 | 0x3001), Ok(None));
        assert!(u.is_mid_pair());
        assert_eq!(u.push(0x0004), Err(FrameError::BrokenRrPair(0x0004)));
        assert!(frame(&FrameRecord::Ecg(4096)).is_err());
    }

    #[test]
    fn start_edge() {
        let mut c = ccu();
        assert_eq!(c.step(CcuEvent::Start), vec![Action::EnableAcquisition]);
        assert_eq!(c.mode(), Mode::Acquire);
    }

    #[test]
    fn full_cycle_and_interrupt_line() {
        let mut c = ccu();
        c.step(CcuEvent::Start);
        assert_eq!(
            c.step(CcuEvent::NearlyFull),
            vec![Action::AssertInterrupt(InterruptCause::FifoNearlyFull)]
        );
        assert_eq!(c.mode(), Mode::InterruptPending);
        assert!(c.interrupt().asserted);
        c.step(CcuEvent::Full);
        assert_eq!(c.interrupt().cause, Some(InterruptCause::FifoFull));
        assert_eq!(c.step(CcuEvent::DrainStarted), vec![Action::BeginDrain]);
        assert_eq!(c.step(CcuEvent::NearlyEmpty), vec![Action::DeassertInterrupt]);
        assert_eq!(c.mode(), Mode::Acquire);
        assert!(!c.interrupt().asserted);
        assert_eq!(c.visited(), Mode::ALL.to_vec());
        assert_eq!(c.interrupts_raised(), 1);
    }

    #[test]
    fn illegal_events_are_ignored() {
        let mut c = ccu();
        for ev in [CcuEvent::NearlyFull, CcuEvent::Full, CcuEvent::DrainStarted, CcuEvent::NearlyEmpty] {
            assert!(c.step(ev).is_empty());
            assert_eq!(c.mode(), Mode::Idle);
        }
        assert_eq!(c.ignored_events(), 4);
        c.step(CcuEvent::Start);
        assert!(c.step(CcuEvent::Start).is_empty());
        assert!(c.step(CcuEvent::NearlyEmpty).is_empty());
        assert_eq!(c.mode(), Mode::Acquire);
    }

    #[test]
    fn stop_from_every_state() {
        let paths: [&[CcuEvent]; 4] = [
            &[],
            &[CcuEvent::Start],
            &[CcuEvent::Start, CcuEvent::NearlyFull],
            &[CcuEvent::Start, CcuEvent::NearlyFull, CcuEvent::DrainStarted],
        ];
        for (path, mode) in paths.iter().zip(Mode::ALL) {
            let mut c = ccu();
            for &ev in *path {
                c.step(ev);
            }
            assert_eq!(c.mode(), mode);
            c.step(CcuEvent::Stop);
            assert_eq!(c.mode(), Mode::Idle);
            assert!(!c.interrupt().asserted);
        }
    }

    #[test]
    fn register_round_trip_and_nak() {
        let mut c = ccu();
        assert_eq!(c.write_control_register(REG_GAIN, 0x155).0, RegisterAck::Ack { value: 0x155 });
        assert_eq!(
            c.read_control_register(REG_GAIN, FifoStatus::default()),
            RegisterAck::Ack { value: 0x155 }
        );
        assert_eq!(c.write_control_register(0xFF, 1).0, RegisterAck::Nak);
        assert_eq!(c.read_control_register(0xFF, FifoStatus::default()), RegisterAck::Nak);
        assert_eq!(c.write_control_register(REG_STATUS, 1).0, RegisterAck::Nak);
        assert_eq!(c.write_control_register(REG_BETA, (3 << 5) | 2).0, RegisterAck::Nak);
        assert_eq!(c.write_control_register(REG_SMOOTH_W, 0).0, RegisterAck::Nak);
        assert_eq!(c.write_control_register(REG_GAIN, 0x400).0, RegisterAck::Nak);
        assert_eq!(c.write_control_register(REG_MARGIN, 512).0, RegisterAck::Nak);
        assert_eq!(c.write_control_register(REG_MARGIN, 32).0, RegisterAck::Ack { value: 32 });
        assert_eq!(
            c.read_control_register(REG_BETA, FifoStatus::default()),
            RegisterAck::Ack { value: (1 << 5) | 2 }
        );
        assert_eq!(RegisterAck::Nak.word(7), frame_status(StatusEvent::Nak { addr: 7 }));
    }

    #[test]
    fn config_writes_are_deferred() {
        let mut c = ccu();
        c.write_control_register(REG_BETA, (3 << 5) | 4);
        c.write_control_register(REG_FLOOR, 80);
        assert_eq!(
            c.take_pending(),
            vec![ConfigChange::Beta { num: 3, den: 4 }, ConfigChange::Floor(80)]
        );
        assert!(c.take_pending().is_empty());
        let (ack, actions) = c.write_control_register(REG_CONTROL, 1);
        assert_eq!(ack, RegisterAck::Ack { value: 1 });
        assert_eq!(actions, vec![Action::EnableAcquisition]);
    }

    #[test]
    fn control_and_status_readback() {
        let mut c = ccu();
        c.step(CcuEvent::Start);
        c.step(CcuEvent::NearlyFull);
        let status = FifoStatus {
            flags: FifoFlags {
                full: false,
                nearly_full: true,
                empty: false,
                nearly_empty: false,
            },
            read_view_occupancy: 497,
            capacity: 512,
        };
        let RegisterAck::Ack { value } = c.read_control_register(REG_CONTROL, status) else {
            panic!("nak");
        };
        assert_eq!(value, 1 | 1 << 2 | 2 << 5 | 1 << 7);
        assert_eq!(c.read_control_register(REG_STATUS, status), RegisterAck::Ack { value: 497 });
    }

    fn any_record() -> impl Strategy<Value = FrameRecord> {
        prop_oneof![
            (0..=ADC_MAX_CODE).prop_map(FrameRecord::Ecg),
            (any::<u8>(), 0u8..64).prop_map(|(bpm, seq)| FrameRecord::HeartRate { bpm, seq }),
            any::<u16>().prop_map(FrameRecord::RrInterval),
            (0u8..8, 0..=REGISTER_MAX).prop_map(|(addr, value)| FrameRecord::Readback { addr, value }),
            (0..=REGISTER_MAX).prop_map(|addr| FrameRecord::Status(StatusEvent::Nak { addr })),
            Just(FrameRecord::Status(StatusEvent::NoData)),
            (0..=REGISTER_MAX).prop_map(|seq| FrameRecord::Status(StatusEvent::RrReady { seq })),
        ]
    }

    proptest! {
        #[test]
        fn record_streams_round_trip(records in proptest::collection::vec(any_record(), 0..64)) {
            let words: Vec<u16> = records.iter().flat_map(|r| frame(r).unwrap()).collect();
            prop_assert_eq!(Unframer::decode_all(&words).unwrap(), records);
        }

        #[test]
        fn decodable_words_reframe_identically(w in any::<u16>()) {
            if let Ok(FrameWord::Record(r)) = unframe(w) {
                prop_assert_eq!(frame(&r).unwrap(), vec![w]);
            }
        }

        #[test]
        fn state_machine_stays_on_legal_edges(events in proptest::collection::vec(0usize..7, 0..200)) {
            let alphabet = [
                CcuEvent::Start, CcuEvent::Stop, CcuEvent::NearlyFull, CcuEvent::Full,
                CcuEvent::DrainStarted, CcuEvent::NearlyEmpty, CcuEvent::Tick,
            ];
            let legal = |a: Mode, b: Mode| a == b || matches!(
                (a, b),
                (Mode::Idle, Mode::Acquire)
                    | (Mode::Acquire, Mode::InterruptPending)
                    | (Mode::InterruptPending, Mode::Draining)
                    | (Mode::Draining, Mode::Acquire)
                    | (_, Mode::Idle)
            );
            let mut c = ccu();
            for i in events {
                let before = c.mode();
                c.step(alphabet[i]);
                prop_assert!(legal(before, c.mode()), "{before} -> {}", c.mode());
                let irq = c.interrupt().asserted;
                prop_assert!(!irq || matches!(c.mode(), Mode::InterruptPending | Mode::Draining));
            }
        }
    }
}
