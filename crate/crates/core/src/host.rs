//! Host-side client: an SPI master on each chip bus plus the drain protocol.
//!
//! Drain sequence on the data link, with chip select held for each transfer:
//!
//! 1. `REG_READ(STATUS)`, `NOP`: the second reply is the FIFO occupancy `N`
//!    as the read side sees it.
//! 2. `READ(N)` followed by `N` no-ops: each no-op frame returns one FIFO
//!    word.
//!
//! The host sleeps until the interrupt line rises, wakes on the next SCLK
//! period boundary and drains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccu::{
    unframe, FrameError, FrameRecord, FrameWord, StatusEvent, Unframer, REG_CONTROL, REG_STATUS,
};
use crate::chip::ChipModel;
use crate::spi_link::{
    BusId, Command, MasterTransfer, SlaveEvent, SpiError, SpiMaster, SpiMode, SpiTranscriptLine,
    COMMAND_VALUE_MAX, TICKS_PER_SCLK,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HostError {
    #[error(transparent)]
    Spi(#[from] SpiError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("register {addr} access was refused")]
    Nak { addr: u8 },
    #[error("no R-R interval has been measured yet")]
    NoData,
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// What the host has reassembled from the data link.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStream {
    pub ecg: Vec<u16>,
    /// `(bpm, sequence)` pairs.
    pub heart_rates: Vec<(u8, u8)>,
    pub rr_intervals: Vec<u16>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStats {
    pub wakeups: u64,
    pub drains: u64,
    pub data_words: u64,
    pub transfers: u64,
    /// Host time spent with a transfer in flight, in picoseconds.
    pub busy_ps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RrReading {
    pub rr_clocks: u16,
    pub seq: u16,
    /// `(bpm, sequence)` from the latest heart-rate word, if one exists.
    pub heart_rate: Option<(u8, u8)>,
}

#[derive(Debug)]
pub struct HostClient {
    main: SpiMaster,
    rr: SpiMaster,
    now: u64,
    unframer: Unframer,
    stream: HostStream,
    stats: HostStats,
    transcript: Option<Vec<SpiTranscriptLine>>,
}

impl HostClient {
    pub fn new(mode: SpiMode, record_transcript: bool) -> Self {
        Self {
            main: SpiMaster::new(mode),
            rr: SpiMaster::new(mode),
            now: 0,
            unframer: Unframer::new(),
            stream: HostStream::default(),
            stats: HostStats::default(),
            transcript: record_transcript.then(Vec::new),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stream(&self) -> &HostStream {
        &self.stream
    }

    pub fn into_stream(self) -> HostStream {
        self.stream
    }

    pub fn stats(&self) -> HostStats {
        self.stats
    }

    pub fn transcript(&self) -> &[SpiTranscriptLine] {
        self.transcript.as_deref().unwrap_or(&[])
    }

    /// Queues a transfer on one bus without running it.
    pub fn begin(&mut self, bus: BusId, tx: Vec<u16>) -> Result<(), HostError> {
        let m = match bus {
            BusId::Main => &mut self.main,
            BusId::Rr => &mut self.rr,
        };
        m.begin(MasterTransfer::new(tx))?;
        self.stats.transfers += 1;
        Ok(())
    }

    pub fn is_busy(&self, bus: BusId) -> bool {
        match bus {
            BusId::Main => self.main.is_busy(),
            BusId::Rr => self.rr.is_busy(),
        }
    }

    fn record(&mut self, bus: BusId, ev: Option<SlaveEvent>) {
        if let (Some(log), Some(event)) = (&mut self.transcript, ev) {
            log.push(SpiTranscriptLine {
                time: self.now,
                bus,
                event,
            });
        }
    }

    /// One bus tick for both buses. Returns words of transfers that ended.
    pub fn tick(&mut self, chip: &mut ChipModel) -> (Option<Vec<u16>>, Option<Vec<u16>>) {
        let tick = chip.timing().spi_tick_ps();
        self.now += tick;
        if self.main.is_busy() || self.rr.is_busy() {
            self.stats.busy_ps += tick;
        }
        chip.advance_to(self.now);
        let m = self.main.step();
        let r = self.rr.step();
        let (me, re) = chip.spi_tick(&mut self.main.bus, &mut self.rr.bus);
        self.record(BusId::Main, me);
        self.record(BusId::Rr, re);
        (m, r)
    }

    /// Blocking duplex exchange on the data link: `rx[i]` is what the chip
    /// sent while `tx[i]` went out.
    pub fn master_transfer(&mut self, chip: &mut ChipModel, tx: Vec<u16>) -> Result<Vec<u16>, HostError> {
        self.begin(BusId::Main, tx)?;
        let mut rx = Vec::new();
        while self.main.is_busy() {
            if let (Some(done), _) = self.tick(chip) {
                rx = done;
            }
        }
        Ok(rx)
    }

    /// Runs a data-link and an R-R-link transfer side by side.
    pub fn transfer_both(
        &mut self,
        chip: &mut ChipModel,
        main_tx: Vec<u16>,
        rr_tx: Vec<u16>,
    ) -> Result<(Vec<u16>, Vec<u16>), HostError> {
        self.begin(BusId::Main, main_tx)?;
        self.begin(BusId::Rr, rr_tx)?;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        while self.main.is_busy() || self.rr.is_busy() {
            let (m, r) = self.tick(chip);
            if let Some(m) = m {
                a = m;
            }
            if let Some(r) = r {
                b = r;
            }
        }
        Ok((a, b))
    }

    fn readback(addr: u8, w: u16) -> Result<u16, HostError> {
        match unframe(w)? {
            FrameWord::Record(FrameRecord::Readback { addr: a, value }) if a == addr => Ok(value),
            FrameWord::Record(FrameRecord::Status(StatusEvent::Nak { .. })) => Err(HostError::Nak { addr }),
            other => Err(HostError::Protocol(format!(
                "expected readback of register {addr}, got {other:?}"
            ))),
        }
    }

    pub fn write_register(&mut self, chip: &mut ChipModel, addr: u8, value: u16) -> Result<u16, HostError> {
        let rx = self.master_transfer(chip, vec![Command::RegWrite { addr, value }.encode(), Command::Nop.encode()])?;
        Self::readback(addr, rx[1])
    }

    pub fn read_register(&mut self, chip: &mut ChipModel, addr: u8) -> Result<u16, HostError> {
        let rx = self.master_transfer(chip, vec![Command::RegRead { addr }.encode(), Command::Nop.encode()])?;
        Self::readback(addr, rx[1])
    }

    fn accept(&mut self, w: u16) -> Result<(), HostError> {
        match self.unframer.push(w)? {
            None => {}
            Some(FrameRecord::Ecg(c)) => self.stream.ecg.push(c),
            Some(FrameRecord::HeartRate { bpm, seq }) => self.stream.heart_rates.push((bpm, seq)),
            Some(FrameRecord::RrInterval(rr)) => self.stream.rr_intervals.push(rr),
            Some(other) => {
                return Err(HostError::Protocol(format!("unexpected {other:?} in the data stream")));
            }
        }
        Ok(())
    }

    /// Reads the occupancy and pulls that many words. Returns the count.
    pub fn drain(&mut self, chip: &mut ChipModel) -> Result<usize, HostError> {
        let n = self.read_register(chip, REG_STATUS)?.min(COMMAND_VALUE_MAX);
        if n == 0 {
            return Ok(0);
        }
        let mut tx = vec![Command::Read(n).encode()];
        tx.resize(1 + n as usize, Command::Nop.encode());
        let rx = self.master_transfer(chip, tx)?;
        for &w in &rx[1..] {
            self.accept(w)?;
        }
        self.stats.drains += 1;
        self.stats.data_words += u64::from(n);
        Ok(n as usize)
    }

    /// Sleeps until the interrupt rises or `deadline` passes, then aligns
    /// to the next SCLK period. Returns whether the interrupt woke it.
    pub fn sleep_until_interrupt(&mut self, chip: &mut ChipModel, deadline: u64) -> bool {
        let woke = chip.advance_until_interrupt(deadline.max(self.now));
        let period = chip.timing().spi_tick_ps() * TICKS_PER_SCLK;
        self.now = chip.now().max(self.now).div_ceil(period) * period;
        if woke {
            self.stats.wakeups += 1;
        }
        woke
    }

    /// Sleeps for a fixed span without waking on the interrupt.
    pub fn sleep_for(&mut self, chip: &mut ChipModel, span: u64) {
        self.now += span;
        chip.advance_to(self.now);
    }

    /// Reads the dedicated R-R link.
    pub fn rr_spi_read(&mut self, chip: &mut ChipModel) -> Result<RrReading, HostError> {
        self.begin(BusId::Rr, vec![Command::Nop.encode(); 3])?;
        let mut rx = Vec::new();
        while self.rr.is_busy() {
            if let (_, Some(done)) = self.tick(chip) {
                rx = done;
            }
        }
        Self::parse_rr(&rx)
    }

    pub fn parse_rr(rx: &[u16]) -> Result<RrReading, HostError> {
        let header = rx
            .first()
            .ok_or_else(|| HostError::Protocol("empty R-R reply".into()))?;
        let seq = match unframe(*header)? {
            FrameWord::Record(FrameRecord::Status(StatusEvent::NoData)) => return Err(HostError::NoData),
            FrameWord::Record(FrameRecord::Status(StatusEvent::RrReady { seq })) => seq,
            other => return Err(HostError::Protocol(format!("bad R-R header {other:?}"))),
        };
        if rx.len() < 3 {
            return Err(HostError::Protocol("short R-R reply".into()));
        }
        let heart_rate = match unframe(rx[2])? {
            FrameWord::Record(FrameRecord::HeartRate { bpm, seq }) => Some((bpm, seq)),
            FrameWord::Record(FrameRecord::Status(StatusEvent::NoData)) => None,
            other => return Err(HostError::Protocol(format!("bad heart-rate word {other:?}"))),
        };
        Ok(RrReading {
            rr_clocks: rx[1],
            seq,
            heart_rate,
        })
    }

    /// Starts acquisition, drains on every interrupt until `acquisition_end`,
    /// then stops the chip and drains until a drain after a quiet period
    /// comes back empty.
    pub fn run_closed_loop(&mut self, chip: &mut ChipModel, acquisition_end: u64) -> Result<(), HostError> {
        self.write_register(chip, REG_CONTROL, 1)?;
        while self.now < acquisition_end {
            if self.sleep_until_interrupt(chip, acquisition_end) {
                self.drain(chip)?;
            }
        }
        self.write_register(chip, REG_CONTROL, 0)?;
        let quiet = 10 * chip.timing().write_period_ps();
        loop {
            self.sleep_for(chip, quiet);
            if self.drain(chip)? == 0 {
                break;
            }
        }
        if self.unframer.is_mid_pair() {
            return Err(HostError::Protocol("stream ended inside an R-R pair".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccu::{frame_ecg, REG_BETA, REG_GAIN};
    use crate::chip::{ChipConfig, PS_PER_SECOND};

    fn chip(codes: Vec<u16>) -> ChipModel {
        ChipModel::new(&ChipConfig::default(), codes).unwrap()
    }

    #[test]
    fn empty_chip_answers_idle() {
        let mut c = chip(vec![]);
        let mut h = HostClient::new(SpiMode::default(), true);
        let rx = h.master_transfer(&mut c, vec![Command::Read(4).encode()]).unwrap();
        assert_eq!(rx, vec![0x0000]);
        assert_eq!(h.master_transfer(&mut c, vec![]).unwrap(), Vec::<u16>::new());
    }

    #[test]
    fn register_round_trip_and_nak() {
        let mut c = chip(vec![]);
        let mut h = HostClient::new(SpiMode::default(), false);
        assert_eq!(h.write_register(&mut c, REG_GAIN, 0x2A5).unwrap(), 0x2A5);
        assert_eq!(h.read_register(&mut c, REG_GAIN).unwrap(), 0x2A5);
        assert_eq!(h.write_register(&mut c, REG_STATUS, 3), Err(HostError::Nak { addr: REG_STATUS }));
        assert_eq!(h.write_register(&mut c, REG_BETA, 0), Err(HostError::Nak { addr: REG_BETA }));
    }

    #[test]
    fn nops_return_staged_words_in_order() {
        let mut c = chip((0..40).collect());
        let mut h = HostClient::new(SpiMode::default(), false);
        h.write_register(&mut c, REG_CONTROL, 1).unwrap();
        h.sleep_for(&mut c, PS_PER_SECOND / 16 + PS_PER_SECOND / 500);
        assert_eq!(h.read_register(&mut c, REG_STATUS).unwrap(), 16);
        let rx = h
            .master_transfer(&mut c, vec![Command::Read(2).encode(), 0, 0])
            .unwrap();
        assert_eq!(&rx[1..], &[frame_ecg(0), frame_ecg(1)]);
        assert_eq!(c.stats().fifo_pops, 2);
        assert_eq!(c.pop_imbalance(), 0);
    }

    #[test]
    fn rr_link_reports_no_data_before_peaks() {
        let mut c = chip(vec![]);
        let mut h = HostClient::new(SpiMode::default(), false);
        assert_eq!(h.rr_spi_read(&mut c), Err(HostError::NoData));
    }

    #[test]
    fn busy_bus_refuses() {
        let mut h = HostClient::new(SpiMode::default(), false);
        h.begin(BusId::Main, vec![0]).unwrap();
        assert_eq!(h.begin(BusId::Main, vec![0]), Err(HostError::Spi(SpiError::Busy)));
        assert!(h.begin(BusId::Rr, vec![0]).is_ok());
    }

    #[test]
    fn short_closed_loop_is_lossless() {
        let codes: Vec<u16> = (0..3000).map(|i| (i * 37 % 4096) as u16).collect();
        let mut c = chip(codes.clone());
        let mut h = HostClient::new(SpiMode::default(), false);
        let end = codes.len() as u64 * c.timing().sample_period_ps();
        h.run_closed_loop(&mut c, end).unwrap();
        assert_eq!(h.stream().ecg, codes);
        assert!(c.check_invariants().is_empty(), "{:?}", c.check_invariants());
        assert!(h.stats().wakeups >= 5);
    }
}
