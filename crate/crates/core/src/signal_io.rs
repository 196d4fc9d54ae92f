//! Record ingestion, resampling to the chip's 256 Hz time base, and the
//! behavioral 12-bit ADC.
//!
//! Two record formats are understood:
//!
//! * CSV, one sample per line as `index,millivolts` (UTF-8, LF). A single
//!   `index,millivolts` header line is tolerated. The source rate is not
//!   carried by the file and must be supplied with the format tag.
//! * Binary: magic `ECG1`, little-endian `u32` source rate in Hz,
//!   little-endian `u32` sample count, then `count` little-endian IEEE-754
//!   `f32` amplitudes in millivolts.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Chip sampling rate.
pub const SAMPLE_RATE_HZ: u32 = 256;
/// Number of ADC output codes.
pub const ADC_LEVELS: u32 = 4096;
/// Largest ADC output code.
pub const ADC_MAX_CODE: u16 = 4095;

const BINARY_MAGIC: &[u8; 4] = b"ECG1";
const BINARY_HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: non-finite amplitude")]
    NonFiniteLine { line: usize },
    #[error("byte offset {offset}: {message}")]
    Binary { offset: usize, message: String },
    #[error("byte offset {offset}: non-finite amplitude")]
    NonFiniteOffset { offset: usize },
    #[error("source rate must be positive")]
    InvalidRate,
    #[error("resampling needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid ADC model: {0}")]
    InvalidAdc(&'static str),
}

/// One input sample at the record's own rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    /// Sample index at the source rate.
    pub t: u64,
    /// Amplitude in millivolts; always finite.
    pub v: f64,
}

/// A 12-bit ADC output code stamped with its 256 Hz sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdcCode {
    code: u16,
    pub t: u64,
}

impl AdcCode {
    /// Returns `None` when `code` does not fit in 12 bits.
    pub fn new(code: u16, t: u64) -> Option<Self> {
        (code <= ADC_MAX_CODE).then_some(Self { code, t })
    }

    pub fn code(self) -> u16 {
        self.code
    }
}

/// Declared on-disk layout of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RecordFormat {
    /// CSV carries no rate of its own.
    Csv { rate_hz: u32 },
    Binary,
}

/// A single-channel record as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub source_rate_hz: u32,
    pub samples: Vec<RawSample>,
}

pub fn ingest_record(path: &Path, format: RecordFormat) -> Result<Record, SignalError> {
    let io_err = |source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    };
    match format {
        RecordFormat::Csv { rate_hz } => {
            if rate_hz == 0 {
                return Err(SignalError::InvalidRate);
            }
            let text = fs::read_to_string(path).map_err(io_err)?;
            Ok(Record {
                source_rate_hz: rate_hz,
                samples: parse_csv(&text)?,
            })
        }
        RecordFormat::Binary => {
            let bytes = fs::read(path).map_err(io_err)?;
            decode_binary(&bytes)
        }
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<RawSample>, SignalError> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || (line_no == 1 && line == "index,millivolts") {
            continue;
        }
        let parse_err = |message: String| SignalError::Parse {
            line: line_no,
            message,
        };
        let (idx, mv) = line
            .split_once(',')
            .ok_or_else(|| parse_err(format!("expected `index,millivolts`, got {line:?}")))?;
        let t: u64 = idx
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad sample index {:?}", idx.trim())))?;
        let v: f64 = mv
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad amplitude {:?}", mv.trim())))?;
        if !v.is_finite() {
            return Err(SignalError::NonFiniteLine { line: line_no });
        }
        if let Some(prev) = samples.last().map(|s: &RawSample| s.t) {
            if t <= prev {
                return Err(parse_err(format!("index {t} does not follow {prev}")));
            }
        }
        samples.push(RawSample { t, v });
    }
    Ok(samples)
}

pub fn write_csv<W: Write>(mut out: W, samples: &[RawSample]) -> io::Result<()> {
    for s in samples {
        writeln!(out, "{},{}", s.t, s.v)?;
    }
    Ok(())
}

pub fn decode_binary(bytes: &[u8]) -> Result<Record, SignalError> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(SignalError::Binary {
            offset: bytes.len(),
            message: "truncated header".into(),
        });
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(SignalError::Binary {
            offset: 0,
            message: "missing ECG1 magic".into(),
        });
    }
    let rate = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rate == 0 {
        return Err(SignalError::Binary {
            offset: 4,
            message: "source rate is zero".into(),
        });
    }
    let body = &bytes[BINARY_HEADER_LEN..];
    if body.len() != count * 4 {
        return Err(SignalError::Binary {
            offset: BINARY_HEADER_LEN + body.len().min(count * 4),
            message: format!("header declares {count} samples, body holds {} bytes", body.len()),
        });
    }
    let mut samples = Vec::with_capacity(count);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(SignalError::NonFiniteOffset {
                offset: BINARY_HEADER_LEN + 4 * i,
            });
        }
        samples.push(RawSample {
            t: i as u64,
            v: f64::from(v),
        });
    }
    Ok(Record {
        source_rate_hz: rate,
        samples,
    })
}

/// Amplitudes are narrowed to `f32`; indices are implied by position.
pub fn encode_binary(source_rate_hz: u32, samples: &[RawSample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 4 * samples.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&source_rate_hz.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.v as f32).to_le_bytes());
    }
    out
}

/// Brings a record to 256 Hz by linear interpolation.
///
/// Output sample `k` sits at source position `k * source_rate / 256`, computed
/// in exact integer arithmetic, so matching rates reproduce the input and
/// integer decimation ratios pick source samples verbatim. The last output
/// point never lies past the last input point.
pub fn resample_to_256(samples: &[RawSample], source_rate: u32) -> Result<Vec<RawSample>, SignalError> {
    if source_rate == 0 {
        return Err(SignalError::InvalidRate);
    }
    if samples.len() < 2 {
        return Err(SignalError::TooFewSamples(samples.len()));
    }
    let rate = u128::from(source_rate);
    let out_rate = u128::from(SAMPLE_RATE_HZ);
    let last = (samples.len() - 1) as u128;
    // largest k with k * rate / 256 <= last
    let n_out = (last * out_rate / rate) as u64 + 1;

    let mut out = Vec::with_capacity(n_out as usize);
    for k in 0..n_out {
        let pos = u128::from(k) * rate;
        let idx = (pos / out_rate) as usize;
        let rem = (pos % out_rate) as f64;
        let a = samples[idx].v;
        let v = if rem == 0.0 {
            a
        } else {
            let b = samples[idx + 1].v;
            a + (b - a) * (rem / out_rate as f64)
        };
        out.push(RawSample { t: k, v });
    }
    Ok(out)
}

/// Ideal mid-rise 12-bit quantizer with saturation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcModel {
    /// Input span mapped onto the 4096 codes.
    pub full_scale_mv: f64,
    /// Input that lands on midscale (code 2048).
    pub offset_mv: f64,
}

impl Default for AdcModel {
    fn default() -> Self {
        Self {
            full_scale_mv: 5.0,
            offset_mv: 0.0,
        }
    }
}

impl AdcModel {
    pub fn new(full_scale_mv: f64, offset_mv: f64) -> Result<Self, SignalError> {
        let model = Self {
            full_scale_mv,
            offset_mv,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.full_scale_mv.is_finite() && self.full_scale_mv > 0.0) {
            return Err(SignalError::InvalidAdc("full_scale_mv must be finite and positive"));
        }
        if !self.offset_mv.is_finite() {
            return Err(SignalError::InvalidAdc("offset_mv must be finite"));
        }
        Ok(())
    }

    /// Millivolts per code.
    pub fn lsb_mv(&self) -> f64 {
        self.full_scale_mv / f64::from(ADC_LEVELS)
    }

    pub fn quantize(&self, sample: RawSample) -> AdcCode {
        let scaled = (sample.v - self.offset_mv + self.full_scale_mv / 2.0) / self.full_scale_mv
            * f64::from(ADC_LEVELS);
        let code = scaled.round().clamp(0.0, f64::from(ADC_MAX_CODE)) as u16;
        AdcCode { code, t: sample.t }
    }

    pub fn quantize_all(&self, samples: &[RawSample]) -> Vec<AdcCode> {
        samples.iter().map(|&s| self.quantize(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(values: &[f64]) -> Vec<RawSample> {
        values
            .iter()
            .enumerate()
            .map(|(t, &v)| RawSample { t: t as u64, v })
            .collect()
    }

    #[test]
    fn csv_parses_two_samples() {
        let s = parse_csv("0,0.0\n1,1.0").unwrap();
        assert_eq!(s, ramp(&[0.0, 1.0]));
    }

    #[test]
    fn csv_error_names_the_line() {
        let err = parse_csv("0,0.0\n1,1.0\nabc\n").unwrap_err();
        match err {
            SignalError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_line(parse_csv("0,1\n1,NaN")) == Some(2));
        assert!(err_line(parse_csv("0,1\n1,inf")) == Some(2));
    }

    fn err_line(r: Result<Vec<RawSample>, SignalError>) -> Option<usize> {
        match r {
            Err(SignalError::NonFiniteLine { line }) => Some(line),
            _ => None,
        }
    }

    #[test]
    fn csv_accepts_header_and_rejects_unordered_indices() {
        assert_eq!(parse_csv("index,millivolts\n0,2.5\n").unwrap().len(), 1);
        assert!(parse_csv("1,0\n1,0\n").is_err());
    }

    #[test]
    fn binary_round_trip_512_samples_at_360hz() {
        let samples = ramp(&(0..512).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.bin");
        fs::write(&path, encode_binary(360, &samples)).unwrap();
        let rec = ingest_record(&path, RecordFormat::Binary).unwrap();
        assert_eq!(rec.source_rate_hz, 360);
        assert_eq!(rec.samples.len(), 512);
        for (a, b) in rec.samples.iter().zip(&samples) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.v, f64::from(b.v as f32));
        }
    }

    #[test]
    fn binary_rejects_bad_header_and_nan() {
        assert!(decode_binary(b"ECG").is_err());
        assert!(decode_binary(b"XXXX\0\0\0\0\0\0\0\0").is_err());
        let mut bytes = encode_binary(256, &ramp(&[1.0, 2.0]));
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_binary(&bytes) {
            Err(SignalError::NonFiniteOffset { offset }) => assert_eq!(offset, 16),
            other => panic!("unexpected {other:?}"),
        }
        bytes.pop();
        assert!(matches!(decode_binary(&bytes), Err(SignalError::Binary { .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = ingest_record(Path::new("/nonexistent/rec.csv"), RecordFormat::Csv { rate_hz: 256 });
        assert!(matches!(err, Err(SignalError::Io { .. })));
    }

    #[test]
    fn resample_identity_at_256() {
        let s = ramp(&[0.5, -1.0, 3.25, 7.0]);
        assert_eq!(resample_to_256(&s, 256).unwrap(), s);
    }

    #[test]
    fn resample_decimates_512hz_ramp() {
        let out = resample_to_256(&ramp(&[0.0, 2.0, 4.0, 6.0]), 512).unwrap();
        let v: Vec<f64> = out.iter().map(|s| s.v).collect();
        assert_eq!(v, vec![0.0, 4.0]);
    }

    #[test]
    fn resample_constant_360hz() {
        let out = resample_to_256(&ramp(&[1.0; 360]), 360).unwrap();
        assert_eq!(out.len(), 256);
        assert!(out.iter().all(|s| s.v == 1.0));
    }

    #[test]
    fn resample_rejects_degenerate_input() {
        assert!(matches!(resample_to_256(&[], 360), Err(SignalError::TooFewSamples(0))));
        assert!(matches!(resample_to_256(&ramp(&[1.0]), 360), Err(SignalError::TooFewSamples(1))));
        assert!(matches!(resample_to_256(&ramp(&[1.0, 2.0]), 0), Err(SignalError::InvalidRate)));
    }

    #[test]
    fn quantize_midscale_and_saturation() {
        let adc = AdcModel::default();
        let q = |v| adc.quantize(RawSample { t: 0, v }).code();
        assert_eq!(q(0.0), 2048);
        assert_eq!(q(2.5), 4095);
        assert_eq!(q(100.0), 4095);
        assert_eq!(q(-2.5), 0);
        assert_eq!(q(-100.0), 0);
        let shifted = AdcModel::new(2.0, 0.7).unwrap();
        assert_eq!(shifted.quantize(RawSample { t: 0, v: 0.7 }).code(), 2048);
    }

    #[test]
    fn quantize_sweep_hits_every_code() {
        let adc = AdcModel::new(5.0, 0.0).unwrap();
        let mut hit = vec![false; 4096];
        for k in 0..4096 {
            let v = -adc.full_scale_mv / 2.0 + k as f64 * adc.lsb_mv();
            hit[adc.quantize(RawSample { t: 0, v }).code() as usize] = true;
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn adc_model_validation() {
        assert!(AdcModel::new(0.0, 0.0).is_err());
        assert!(AdcModel::new(-1.0, 0.0).is_err());
        assert!(AdcModel::new(f64::NAN, 0.0).is_err());
        assert!(AdcModel::new(1.0, f64::INFINITY).is_err());
        assert!(AdcCode::new(4096, 0).is_none());
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, fs in 0.1f64..20.0, off in -2.0f64..2.0) {
            let adc = AdcModel::new(fs, off).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let lo_code = adc.quantize(RawSample { t: 0, v: lo }).code();
            let hi_code = adc.quantize(RawSample { t: 0, v: hi }).code();
            prop_assert!(lo_code <= hi_code);
        }

        #[test]
        fn resample_reproduces_affine_signals(
            slope in -5.0f64..5.0, icpt in -5.0f64..5.0,
            rate in 1u32..2000, n in 2usize..400,
        ) {
            let src: Vec<RawSample> = (0..n).map(|i| RawSample { t: i as u64, v: icpt + slope * i as f64 }).collect();
            let out = resample_to_256(&src, rate).unwrap();
            let in_duration = (n - 1) as f64 / f64::from(rate);
            let out_duration = (out.len() - 1) as f64 / 256.0;
            prop_assert!(out_duration <= in_duration + 1e-12);
            prop_assert!(in_duration - out_duration < 1.0 / 256.0 + 1e-12);
            for s in &out {
                let x = s.t as f64 * f64::from(rate) / 256.0;
                let want = icpt + slope * x;
                prop_assert!((s.v - want).abs() <= 1e-9 * (1.0 + want.abs() + slope.abs() * x));
            }
        }

        #[test]
        fn resample_constant_is_constant(c in -100.0f64..100.0, rate in 1u32..5000, n in 2usize..300) {
            let src: Vec<RawSample> = (0..n).map(|i| RawSample { t: i as u64, v: c }).collect();
            prop_assert!(resample_to_256(&src, rate).unwrap().iter().all(|s| s.v == c));
        }

        #[test]
        fn binary_round_trip_is_bit_identical(vals in proptest::collection::vec(-1.0e3f32..1.0e3, 0..300), rate in 1u32..100_000) {
            let samples: Vec<RawSample> = vals.iter().enumerate().map(|(i, &v)| RawSample { t: i as u64, v: f64::from(v) }).collect();
            let bytes = encode_binary(rate, &samples);
            let rec = decode_binary(&bytes).unwrap();
            prop_assert_eq!(rec.source_rate_hz, rate);
            prop_assert_eq!(&rec.samples, &samples);
            prop_assert_eq!(encode_binary(rec.source_rate_hz, &rec.samples), bytes);
        }
    }
}
