//! Bit-level SPI: bus lines, a slave shift-register engine, a host-side
//! master, and the command word carried on MOSI.
//!
//! The bus is sampled once per model tick, four ticks per SCLK period. A
//! master transfer holds `cs_n` low for all of its words; the slave frames
//! every 16 sampling edges. Words go MSB first.
//!
//! # Command word
//!
//! `opcode[15:14] | addr[13:11] | value[10:0]`
//!
//! | opcode | meaning | response |
//! |--------|---------|----------|
//! | `00` | value 0: no-op. value n > 0: grant n data-word credits | n FIFO words, one per following frame |
//! | `01` | register write | readback of the new value, or NAK, in the next frame |
//! | `10` | register read | readback, or NAK, in the next frame |
//! | `11` | reserved | NAK in the next frame |

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Word the slave shifts out when it has nothing queued.
pub const IDLE_WORD: u16 = 0x0000;
pub const FRAME_BITS: u32 = 16;
pub const TICKS_PER_SCLK: u64 = 4;
/// Largest value the 11-bit command field can carry.
pub const COMMAND_VALUE_MAX: u16 = 0x7FF;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpiMode {
    /// Idle level of SCLK.
    pub cpol: bool,
    /// Sample on the trailing edge instead of the leading one.
    pub cpha: bool,
}

impl SpiMode {
    pub const ALL: [SpiMode; 4] = [
        SpiMode { cpol: false, cpha: false },
        SpiMode { cpol: false, cpha: true },
        SpiMode { cpol: true, cpha: false },
        SpiMode { cpol: true, cpha: true },
    ];

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.get(n as usize).copied()
    }

    pub fn number(self) -> u8 {
        (u8::from(self.cpol) << 1) | u8::from(self.cpha)
    }
}

impl fmt::Display for SpiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mode {}", self.number())
    }
}

/// Line states for one bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpiBus {
    pub sclk: bool,
    pub mosi: bool,
    pub miso: bool,
    pub cs_n: bool,
    pub mode: SpiMode,
}

impl SpiBus {
    pub fn new(mode: SpiMode) -> Self {
        Self {
            sclk: mode.cpol,
            mosi: false,
            miso: false,
            cs_n: true,
            mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpiFrame {
    /// Word the master sent.
    pub mosi: u16,
    /// Word the slave sent.
    pub miso: u16,
}

/// Behaviour behind a slave shift register.
pub trait SlaveDevice {
    /// `cs_n` fell. Runs before the first word is loaded.
    fn select(&mut self, _tx_queue: &mut VecDeque<u16>) {}
    /// `cs_n` rose.
    fn deselect(&mut self, _tx_queue: &mut VecDeque<u16>) {}
    /// Extracted clock strobe for a sampling edge that did not end a frame.
    fn clock_edge(&mut self) {}
    /// A frame ended on this sampling edge. `sent` is the queue word that
    /// went out with it, already removed, or `None` if the idle word was
    /// sent. Words pushed here go out in later frames.
    fn frame_received(&mut self, rx: u16, sent: Option<u16>, tx_queue: &mut VecDeque<u16>);
}

/// What the slave reports from one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlaveEvent {
    Selected,
    Frame(SpiFrame),
    /// `cs_n` rose after this many bits of an unfinished frame.
    Discarded { bits: u32 },
    Deselected,
}

#[derive(Debug, Clone, Default)]
pub struct SlaveState {
    shift_in: u16,
    shift_out: u16,
    out_from_queue: bool,
    bit_count: u32,
    selected: bool,
    prev_sclk: bool,
    tx_queue: VecDeque<u16>,
    frames: u64,
    discarded: u64,
    strobes: u64,
}

impl SlaveState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tx_queue(&self) -> &VecDeque<u16> {
        &self.tx_queue
    }

    pub fn queue_tx(&mut self, word: u16) {
        self.tx_queue.push_back(word);
    }

    pub fn bit_count(&self) -> u32 {
        self.bit_count
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn discarded_frames(&self) -> u64 {
        self.discarded
    }

    /// Sampling edges seen while selected.
    pub fn extracted_clock_strobes(&self) -> u64 {
        self.strobes
    }

    fn load(&mut self) {
        match self.tx_queue.front() {
            Some(&w) => {
                self.shift_out = w;
                self.out_from_queue = true;
            }
            None => {
                self.shift_out = IDLE_WORD;
                self.out_from_queue = false;
            }
        }
    }

    fn out_bit(&self) -> bool {
        self.shift_out >> (FRAME_BITS - 1 - self.bit_count) & 1 == 1
    }

    /// Reacts to the current line states; drives `miso`.
    pub fn tick<D: SlaveDevice + ?Sized>(&mut self, bus: &mut SpiBus, dev: &mut D) -> Option<SlaveEvent> {
        let mode = bus.mode;
        let mut event = None;
        if bus.cs_n {
            let was = self.selected;
            self.selected = false;
            self.prev_sclk = bus.sclk;
            bus.miso = false;
            if was {
                let bits = self.bit_count;
                self.bit_count = 0;
                self.shift_in = 0;
                dev.deselect(&mut self.tx_queue);
                if bits != 0 {
                    self.discarded += 1;
                    log::debug!("spi: discarding partial frame of {bits} bits");
                    return Some(SlaveEvent::Discarded { bits });
                }
                return Some(SlaveEvent::Deselected);
            }
            return None;
        }
        if !self.selected {
            self.selected = true;
            self.bit_count = 0;
            self.shift_in = 0;
            self.prev_sclk = bus.sclk;
            dev.select(&mut self.tx_queue);
            self.load();
            if !mode.cpha {
                bus.miso = self.out_bit();
            }
            return Some(SlaveEvent::Selected);
        }
        if bus.sclk == self.prev_sclk {
            return None;
        }
        self.prev_sclk = bus.sclk;
        let leading = bus.sclk != mode.cpol;
        let sample_edge = leading != mode.cpha;
        if sample_edge {
            self.shift_in = (self.shift_in << 1) | u16::from(bus.mosi);
            self.bit_count += 1;
            self.strobes += 1;
            if self.bit_count == FRAME_BITS {
                let frame = SpiFrame {
                    mosi: self.shift_in,
                    miso: self.shift_out,
                };
                let sent = if self.out_from_queue {
                    self.tx_queue.pop_front()
                } else {
                    None
                };
                self.bit_count = 0;
                self.shift_in = 0;
                self.frames += 1;
                dev.frame_received(frame.mosi, sent, &mut self.tx_queue);
                self.load();
                event = Some(SlaveEvent::Frame(frame));
            } else {
                dev.clock_edge();
            }
        } else if self.bit_count < FRAME_BITS {
            bus.miso = self.out_bit();
        }
        event
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpiError {
    #[error("a transfer already holds chip select on this bus")]
    Busy,
}

/// One in-progress master transfer, stepped once per tick.
#[derive(Debug, Clone)]
pub struct MasterTransfer {
    tx: Vec<u16>,
    rx: Vec<u16>,
    bits: usize,
    tick: usize,
    shift_in: u16,
}

impl MasterTransfer {
    pub fn new(tx: Vec<u16>) -> Self {
        let bits = tx.len() * FRAME_BITS as usize;
        Self::with_bits(tx, bits)
    }

    /// Clocks only `bits` bits, so the last word may be cut short. Used to
    /// exercise partial-frame handling.
    pub fn with_bits(tx: Vec<u16>, bits: usize) -> Self {
        assert!(bits <= tx.len() * FRAME_BITS as usize);
        Self {
            rx: Vec::with_capacity(tx.len()),
            tx,
            bits,
            tick: 0,
            shift_in: 0,
        }
    }

    /// Ticks the whole transfer takes, including select and deselect.
    pub fn total_ticks(&self) -> usize {
        if self.bits == 0 {
            0
        } else {
            3 + 4 * self.bits
        }
    }

    pub fn is_done(&self) -> bool {
        self.tick >= self.total_ticks()
    }

    fn tx_bit(&self, i: usize) -> bool {
        let w = self.tx[i / FRAME_BITS as usize];
        w >> (FRAME_BITS as usize - 1 - i % FRAME_BITS as usize) & 1 == 1
    }

    fn sample(&mut self, bus: &SpiBus, i: usize) {
        self.shift_in = (self.shift_in << 1) | u16::from(bus.miso);
        if i % FRAME_BITS as usize == FRAME_BITS as usize - 1 {
            self.rx.push(self.shift_in);
            self.shift_in = 0;
        }
    }

    /// Drives the lines for the current tick. Call before the slave's tick.
    pub fn step(&mut self, bus: &mut SpiBus) {
        if self.is_done() {
            return;
        }
        let mode = bus.mode;
        let k = self.tick;
        self.tick += 1;
        if k == 0 {
            bus.cs_n = false;
            if !mode.cpha {
                bus.mosi = self.tx_bit(0);
            }
            return;
        }
        if k == self.total_ticks() - 1 {
            bus.cs_n = true;
            bus.mosi = false;
            return;
        }
        let Some(rel) = k.checked_sub(2) else {
            return;
        };
        let (i, phase) = (rel / 4, rel % 4);
        match phase {
            0 => {
                bus.sclk = !mode.cpol;
                if mode.cpha {
                    bus.mosi = self.tx_bit(i);
                } else {
                    self.sample(bus, i);
                }
            }
            2 => {
                bus.sclk = mode.cpol;
                if mode.cpha {
                    self.sample(bus, i);
                } else if i + 1 < self.bits {
                    bus.mosi = self.tx_bit(i + 1);
                }
            }
            _ => {}
        }
    }

    /// Complete words received so far.
    pub fn rx(&self) -> &[u16] {
        &self.rx
    }

    pub fn into_rx(self) -> Vec<u16> {
        self.rx
    }
}

/// A master port on one bus, refusing overlapping transfers.
#[derive(Debug, Clone)]
pub struct SpiMaster {
    pub bus: SpiBus,
    active: Option<MasterTransfer>,
}

impl SpiMaster {
    pub fn new(mode: SpiMode) -> Self {
        Self {
            bus: SpiBus::new(mode),
            active: None,
        }
    }

    pub fn is_busy(&self) -> bool {
        self.active.is_some()
    }

    pub fn begin(&mut self, transfer: MasterTransfer) -> Result<(), SpiError> {
        if self.active.is_some() {
            return Err(SpiError::Busy);
        }
        if !transfer.is_done() {
            self.active = Some(transfer);
        }
        Ok(())
    }

    /// Drives this tick's lines. Returns the received words when the
    /// transfer finished on this tick.
    pub fn step(&mut self) -> Option<Vec<u16>> {
        let t = self.active.as_mut()?;
        t.step(&mut self.bus);
        if t.is_done() {
            return self.active.take().map(MasterTransfer::into_rx);
        }
        None
    }
}

/// Runs one blocking transfer against a slave with no surrounding model.
pub fn run_transfer<D: SlaveDevice + ?Sized>(
    master: &mut SpiMaster,
    slave: &mut SlaveState,
    dev: &mut D,
    transfer: MasterTransfer,
) -> Result<(Vec<u16>, Vec<SlaveEvent>), SpiError> {
    master.begin(transfer)?;
    let mut events = Vec::new();
    let mut rx = Vec::new();
    while master.is_busy() {
        if let Some(done) = master.step() {
            rx = done;
        }
        events.extend(slave.tick(&mut master.bus, dev));
    }
    Ok((rx, events))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Nop,
    Read(u16),
    RegWrite { addr: u8, value: u16 },
    RegRead { addr: u8 },
    Reserved { addr: u8, value: u16 },
}

impl Command {
    pub fn encode(self) -> u16 {
        let (op, addr, value) = match self {
            Command::Nop => (0, 0, 0),
            Command::Read(n) => (0, 0, n),
            Command::RegWrite { addr, value } => (1, addr, value),
            Command::RegRead { addr } => (2, addr, 0),
            Command::Reserved { addr, value } => (3, addr, value),
        };
        debug_assert!(addr < 8 && value <= COMMAND_VALUE_MAX);
        (op << 14) | (u16::from(addr & 7) << 11) | (value & COMMAND_VALUE_MAX)
    }

    pub fn decode(w: u16) -> Self {
        let addr = ((w >> 11) & 7) as u8;
        let value = w & COMMAND_VALUE_MAX;
        match w >> 14 {
            0 if value == 0 => Command::Nop,
            0 => Command::Read(value),
            1 => Command::RegWrite { addr, value },
            2 => Command::RegRead { addr },
            _ => Command::Reserved { addr, value },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusId {
    Main,
    Rr,
}

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BusId::Main => "main",
            BusId::Rr => "rr",
        })
    }
}

/// One transcript row: `time,bus,event,detail`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpiTranscriptLine {
    pub time: u64,
    pub bus: BusId,
    pub event: SlaveEvent,
}

impl fmt::Display for SpiTranscriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},", self.time, self.bus)?;
        match self.event {
            SlaveEvent::Selected => f.write_str("select,"),
            SlaveEvent::Deselected => f.write_str("deselect,"),
            SlaveEvent::Discarded { bits } => write!(f, "discard,bits={bits}"),
            SlaveEvent::Frame(fr) => write!(f, "frame,mosi={:04x} miso={:04x}", fr.mosi, fr.miso),
        }
    }
}
