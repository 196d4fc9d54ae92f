//! Streaming integer morphology over ADC codes.
//!
//! Every operator keeps a shift register of the last `L` samples. Tap `s`
//! holds the sample that arrived `s` clocks ago, and is paired with element
//! `g[s]` of the structuring element, the way the add/subtract stage lines
//! up against the shift register in hardware. Until the register fills,
//! only the taps holding real samples take part ("valid prefix").
//!
//! [`Opening`] and [`Closing`] compose an erosion by the reflected element
//! with a dilation by `g` so that they are true algebraic openings and
//! closings for any integer element, and both report a group delay of
//! `L - 1` samples.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default structuring element length (one QRS width at 256 Hz).
pub const DEFAULT_SE_LEN: usize = 25;

/// Largest admissible |g(s)|; keeps every intermediate inside `i32`.
pub const MAX_SE_MAGNITUDE: i32 = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MorphError {
    #[error("structuring element must have odd length >= 1, got {0}")]
    BadLength(usize),
    #[error("structuring element value {0} exceeds +/-{MAX_SE_MAGNITUDE}")]
    ValueTooLarge(i32),
    #[error("operator state holds no samples")]
    EmptyState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i32>", into = "Vec<i32>")]
pub struct StructuringElement {
    values: Vec<i32>,
}

impl StructuringElement {
    pub fn new(values: Vec<i32>) -> Result<Self, MorphError> {
        if values.is_empty() || values.len().is_multiple_of(2) {
            return Err(MorphError::BadLength(values.len()));
        }
        if let Some(&v) = values.iter().find(|v| v.abs() > MAX_SE_MAGNITUDE) {
            return Err(MorphError::ValueTooLarge(v));
        }
        Ok(Self { values })
    }

    /// All-zero element; opening and closing become order-statistic filters.
    pub fn flat(len: usize) -> Result<Self, MorphError> {
        Self::new(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn reversed(&self) -> Self {
        let mut values = self.values.clone();
        values.reverse();
        Self { values }
    }

    pub fn max_abs(&self) -> i32 {
        self.values.iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// Delay from a raw sample to the opening/closing output centred on it.
    pub fn group_delay(&self) -> usize {
        self.values.len() - 1
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::flat(DEFAULT_SE_LEN).expect("default length is odd")
    }
}

impl TryFrom<Vec<i32>> for StructuringElement {
    type Error = MorphError;

    fn try_from(values: Vec<i32>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<StructuringElement> for Vec<i32> {
    fn from(se: StructuringElement) -> Self {
        se.values
    }
}

/// Shift register of the most recent `capacity` samples, newest at tap 0.
#[derive(Debug, Clone)]
pub struct MorphState {
    window: VecDeque<i32>,
    capacity: usize,
    fill: u64,
}

impl MorphState {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "shift register needs at least one tap");
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            fill: 0,
        }
    }

    pub fn push(&mut self, x: i32) {
        if self.window.len() == self.capacity {
            self.window.pop_back();
        }
        self.window.push_front(x);
        self.fill += 1;
    }

    /// Samples received so far.
    pub fn fill(&self) -> u64 {
        self.fill
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.capacity
    }

    /// Valid taps, newest first.
    pub fn taps(&self) -> impl Iterator<Item = i32> + '_ {
        self.window.iter().copied()
    }
}

/// Max-plus over the valid taps: `max_s window[s] + g[s]`.
pub fn dilate(state: &MorphState, g: &StructuringElement) -> Result<i32, MorphError> {
    state
        .taps()
        .zip(g.values())
        .map(|(x, &gs)| x + gs)
        .max()
        .ok_or(MorphError::EmptyState)
}

/// Min-minus over the valid taps: `min_s window[s] - g[s]`.
pub fn erode(state: &MorphState, g: &StructuringElement) -> Result<i32, MorphError> {
    state
        .taps()
        .zip(g.values())
        .map(|(x, &gs)| x - gs)
        .min()
        .ok_or(MorphError::EmptyState)
}

/// Streaming dilation by a fixed element.
#[derive(Debug, Clone)]
pub struct Dilation {
    state: MorphState,
    se: StructuringElement,
}

impl Dilation {
    pub fn new(se: StructuringElement) -> Self {
        Self {
            state: MorphState::new(se.len()),
            se,
        }
    }

    pub fn push(&mut self, x: i32) -> i32 {
        self.state.push(x);
        dilate(&self.state, &self.se).expect("state was just pushed")
    }
}

/// Streaming erosion by a fixed element.
#[derive(Debug, Clone)]
pub struct Erosion {
    state: MorphState,
    se: StructuringElement,
}

impl Erosion {
    pub fn new(se: StructuringElement) -> Self {
        Self {
            state: MorphState::new(se.len()),
            se,
        }
    }

    pub fn push(&mut self, x: i32) -> i32 {
        self.state.push(x);
        erode(&self.state, &self.se).expect("state was just pushed")
    }
}

/// One output of a two-stage operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MorphSample {
    pub value: i32,
    /// False while either stage still runs on a partial register.
    pub valid: bool,
}

/// Erosion by the reflected element, then dilation by `g`. Suppresses peaks
/// narrower than the element.
#[derive(Debug, Clone)]
pub struct Opening {
    erosion: Erosion,
    dilation: Dilation,
    seen: u64,
    settle: u64,
}

impl Opening {
    pub fn new(se: &StructuringElement) -> Self {
        Self {
            erosion: Erosion::new(se.reversed()),
            dilation: Dilation::new(se.clone()),
            seen: 0,
            settle: 2 * se.group_delay() as u64,
        }
    }

    pub fn push(&mut self, x: i32) -> MorphSample {
        let valid = self.seen >= self.settle;
        self.seen += 1;
        MorphSample {
            value: self.dilation.push(self.erosion.push(x)),
            valid,
        }
    }

    /// Runs a fresh opening over a whole vector; one output per input.
    pub fn apply(f: &[i32], se: &StructuringElement) -> Vec<i32> {
        let mut op = Self::new(se);
        f.iter().map(|&x| op.push(x).value).collect()
    }
}

/// Dilation by `g`, then erosion by the reflected element. Fills valleys
/// narrower than the element.
#[derive(Debug, Clone)]
pub struct Closing {
    dilation: Dilation,
    erosion: Erosion,
    seen: u64,
    settle: u64,
}

impl Closing {
    pub fn new(se: &StructuringElement) -> Self {
        Self {
            dilation: Dilation::new(se.clone()),
            erosion: Erosion::new(se.reversed()),
            seen: 0,
            settle: 2 * se.group_delay() as u64,
        }
    }

    pub fn push(&mut self, x: i32) -> MorphSample {
        let valid = self.seen >= self.settle;
        self.seen += 1;
        MorphSample {
            value: self.erosion.push(self.dilation.push(x)),
            valid,
        }
    }

    pub fn apply(f: &[i32], se: &StructuringElement) -> Vec<i32> {
        let mut op = Self::new(se);
        f.iter().map(|&x| op.push(x).value).collect()
    }
}

/// Baseline-corrected sample, aligned to the raw input index `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredSample {
    pub value: i32,
    pub t: u64,
    /// False until the opening and closing have full registers behind them.
    pub valid: bool,
}

/// `out(t) = f(t) - floor((opening + closing) / 2)`, with the raw input held
/// in a delay line so it lines up with the filter outputs.
#[derive(Debug, Clone)]
pub struct BaselineCorrector {
    opening: Opening,
    closing: Closing,
    raw: VecDeque<i32>,
    delay: usize,
    seen: u64,
    bound: i64,
}

impl BaselineCorrector {
    pub fn new(se: &StructuringElement) -> Self {
        let delay = se.group_delay();
        Self {
            opening: Opening::new(se),
            closing: Closing::new(se),
            raw: VecDeque::with_capacity(delay + 1),
            delay,
            seen: 0,
            bound: i64::from(ADC_MAX) + 2 * i64::from(se.max_abs()) + 1,
        }
    }

    pub fn group_delay(&self) -> usize {
        self.delay
    }

    /// Largest |output| possible for 12-bit input with this element.
    pub fn output_bound(&self) -> i64 {
        self.bound
    }

    /// Returns the corrected value for input index `seen - D`, once that
    /// many samples have arrived.
    pub fn push(&mut self, x: i32) -> Option<FilteredSample> {
        let n = self.seen;
        self.seen += 1;
        self.raw.push_back(x);
        let open = self.opening.push(x);
        let close = self.closing.push(x);
        if self.raw.len() <= self.delay {
            return None;
        }
        let centre = self.raw.pop_front().expect("delay line is non-empty");
        let baseline = (open.value + close.value).div_euclid(2);
        Some(FilteredSample {
            value: centre - baseline,
            t: n - self.delay as u64,
            valid: open.valid && close.valid,
        })
    }

    pub fn apply(f: &[i32], se: &StructuringElement) -> Vec<FilteredSample> {
        let mut bc = Self::new(se);
        f.iter().filter_map(|&x| bc.push(x)).collect()
    }
}

const ADC_MAX: i32 = crate::signal_io::ADC_MAX_CODE as i32;

/// Whole-vector reference implementations written directly from the
/// definitions with explicit index arithmetic. Output `n` of each function
/// equals what the streaming operator returns for input `n`.
pub mod reference {
    use super::StructuringElement;

    fn taps(n: usize, len: usize) -> std::ops::Range<usize> {
        0..len.min(n + 1)
    }

    pub fn dilate(f: &[i32], g: &[i32]) -> Vec<i32> {
        (0..f.len())
            .map(|n| taps(n, g.len()).map(|s| f[n - s] + g[s]).max().unwrap())
            .collect()
    }

    pub fn erode(f: &[i32], g: &[i32]) -> Vec<i32> {
        (0..f.len())
            .map(|n| taps(n, g.len()).map(|s| f[n - s] - g[s]).min().unwrap())
            .collect()
    }

    pub fn opening(f: &[i32], se: &StructuringElement) -> Vec<i32> {
        let rev = se.reversed();
        dilate(&erode(f, rev.values()), se.values())
    }

    pub fn closing(f: &[i32], se: &StructuringElement) -> Vec<i32> {
        let rev = se.reversed();
        erode(&dilate(f, se.values()), rev.values())
    }

    /// Corrected values for raw indices `0..f.len() - D`.
    pub fn baseline_correct(f: &[i32], se: &StructuringElement) -> Vec<i32> {
        let d = se.group_delay();
        let o = opening(f, se);
        let c = closing(f, se);
        (d..f.len())
            .map(|n| f[n - d] - (o[n] + c[n]).div_euclid(2))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state_of(oldest_first: &[i32]) -> MorphState {
        let mut st = MorphState::new(oldest_first.len());
        for &x in oldest_first {
            st.push(x);
        }
        st
    }

    fn se(v: &[i32]) -> StructuringElement {
        StructuringElement::new(v.to_vec()).unwrap()
    }

    /// Loads a register so that tap `s` holds `taps[s]`.
    fn taps_of(taps: &[i32]) -> MorphState {
        let mut oldest_first = taps.to_vec();
        oldest_first.reverse();
        state_of(&oldest_first)
    }

    #[test]
    fn element_validation() {
        assert_eq!(StructuringElement::new(vec![]), Err(MorphError::BadLength(0)));
        assert_eq!(StructuringElement::new(vec![0, 0]), Err(MorphError::BadLength(2)));
        assert!(StructuringElement::new(vec![MAX_SE_MAGNITUDE + 1]).is_err());
        assert_eq!(StructuringElement::default().len(), 25);
        assert_eq!(StructuringElement::default().group_delay(), 24);
        let parsed: StructuringElement = serde_json::from_str("[1,2,3]").unwrap();
        assert_eq!(parsed.values(), &[1, 2, 3]);
        assert!(serde_json::from_str::<StructuringElement>("[1,2]").is_err());
    }

    #[test]
    fn empty_state_is_an_error() {
        let st = MorphState::new(3);
        assert_eq!(dilate(&st, &se(&[0, 0, 0])), Err(MorphError::EmptyState));
        assert_eq!(erode(&st, &se(&[0, 0, 0])), Err(MorphError::EmptyState));
    }

    #[test]
    fn flat_dilation_and_erosion_are_window_extrema() {
        let st = taps_of(&[1, 5, 2]);
        assert_eq!(dilate(&st, &se(&[0, 0, 0])), Ok(5));
        assert_eq!(erode(&st, &se(&[0, 0, 0])), Ok(1));
        let c = taps_of(&[7, 7, 7]);
        assert_eq!(dilate(&c, &se(&[0, 0, 0])), Ok(7));
        assert_eq!(erode(&c, &se(&[0, 0, 0])), Ok(7));
    }

    #[test]
    fn shaped_element_examples() {
        let st = taps_of(&[3, 1, 4]);
        let g = se(&[1, 0, 2]);
        // max(3+1, 1+0, 4+2)
        assert_eq!(dilate(&st, &g), Ok(6));
        // min(3-1, 1-0, 4-2)
        assert_eq!(erode(&st, &g), Ok(1));
        // tap-wise duality
        let neg = taps_of(&[-3, -1, -4]);
        assert_eq!(erode(&neg, &g), Ok(-6));
        assert_eq!(-dilate(&st, &g).unwrap(), -6);
    }

    #[test]
    fn warm_up_uses_valid_prefix_only() {
        let mut st = MorphState::new(5);
        st.push(10);
        st.push(3);
        let g = se(&[0, 100, 0, 0, 0]);
        // taps: [3, 10]; paired with g[0], g[1]
        assert_eq!(dilate(&st, &g), Ok(110));
        assert_eq!(erode(&st, &g), Ok(-90));
        assert!(!st.is_full());
        assert_eq!(st.fill(), 2);
    }

    #[test]
    fn opening_of_constant_is_constant_after_warm_up() {
        let g = StructuringElement::default();
        let mut op = Opening::new(&g);
        let mut cl = Closing::new(&g);
        for i in 0..200 {
            let o = op.push(1234);
            let c = cl.push(1234);
            assert_eq!(o.value, 1234);
            assert_eq!(c.value, 1234);
            assert_eq!(o.valid, i >= 48);
        }
    }

    /// Opening as the supremum, over every flat window containing position
    /// `p`, of the window minimum. Windows are identified by their last
    /// index and clipped at the start of the record.
    fn flat_opening_by_windows(f: &[i32], len: usize) -> Vec<i32> {
        let d = len - 1;
        (0..f.len().saturating_sub(d))
            .map(|p| {
                (p..=p + d)
                    .map(|end| *f[end.saturating_sub(d)..=end].iter().min().unwrap())
                    .max()
                    .unwrap()
            })
            .collect()
    }

    fn flat_closing_by_windows(f: &[i32], len: usize) -> Vec<i32> {
        let neg: Vec<i32> = f.iter().map(|x| -x).collect();
        flat_opening_by_windows(&neg, len).into_iter().map(|x| -x).collect()
    }

    #[test]
    fn opening_removes_single_sample_spike() {
        let mut f = vec![500; 100];
        f[60] = 3000;
        let g = StructuringElement::default();
        let out = Opening::apply(&f, &g);
        assert!(out[48..].iter().all(|&x| x == 500));
        // window-fitting oracle agrees on the aligned region
        let oracle = flat_opening_by_windows(&f, 25);
        assert_eq!(&out[48..], &oracle[24..]);
    }

    #[test]
    fn closing_fills_single_sample_notch() {
        let mut f = vec![500; 100];
        f[60] = 20;
        let g = StructuringElement::default();
        let out = Closing::apply(&f, &g);
        assert!(out[48..].iter().all(|&x| x == 500));
        let oracle = flat_closing_by_windows(&f, 25);
        assert_eq!(&out[48..], &oracle[24..]);
    }

    #[test]
    fn baseline_of_constant_is_zero() {
        let g = StructuringElement::default();
        let out = BaselineCorrector::apply(&vec![2048; 300], &g);
        assert_eq!(out.len(), 300 - 24);
        assert_eq!(out[0].t, 0);
        assert!(out.iter().filter(|s| s.valid).all(|s| s.value == 0));
        assert_eq!(out.iter().position(|s| s.valid), Some(24));
    }

    #[test]
    fn baseline_of_slow_ramp_stays_near_zero() {
        // 0.25 codes/sample, quantized
        let f: Vec<i32> = (0..1000).map(|i| 1000 + i / 4).collect();
        let g = StructuringElement::default();
        let bound = 25 / 4 + 1;
        for s in BaselineCorrector::apply(&f, &g).iter().filter(|s| s.valid) {
            assert!(s.value.abs() <= bound, "t={} value={}", s.t, s.value);
        }
    }

    #[test]
    fn output_bound_holds_at_extremes() {
        let g = se(&[5, -40, 7]);
        let mut bc = BaselineCorrector::new(&g);
        let bound = bc.output_bound();
        for i in 0..500 {
            let x = if (i / 3) % 2 == 0 { 0 } else { 4095 };
            if let Some(s) = bc.push(x) {
                assert!(i64::from(s.value).abs() <= bound);
            }
        }
    }

    fn signal() -> impl Strategy<Value = Vec<i32>> {
        proptest::collection::vec(0i32..4096, 30..400)
    }

    proptest! {
        #[test]
        fn streaming_matches_reference(f in signal(), g in proptest::collection::vec(-50i32..50, 1..8)) {
            let mut g = g;
            if g.len() % 2 == 0 { g.push(0); }
            let g = StructuringElement::new(g).unwrap();
            let mut d = Dilation::new(g.clone());
            let mut e = Erosion::new(g.clone());
            let sd: Vec<i32> = f.iter().map(|&x| d.push(x)).collect();
            let se_: Vec<i32> = f.iter().map(|&x| e.push(x)).collect();
            prop_assert_eq!(sd, reference::dilate(&f, g.values()));
            prop_assert_eq!(se_, reference::erode(&f, g.values()));
            prop_assert_eq!(Opening::apply(&f, &g), reference::opening(&f, &g));
            prop_assert_eq!(Closing::apply(&f, &g), reference::closing(&f, &g));
            let bc: Vec<i32> = BaselineCorrector::apply(&f, &g).iter().map(|s| s.value).collect();
            prop_assert_eq!(bc, reference::baseline_correct(&f, &g));
        }

        #[test]
        fn flat_opening_matches_window_oracle(f in signal(), half in 0usize..6) {
            let len = 2 * half + 1;
            let g = StructuringElement::flat(len).unwrap();
            let d = len - 1;
            let out = Opening::apply(&f, &g);
            let oracle = flat_opening_by_windows(&f, len);
            // the streaming output lags by D; align positions p >= 0
            prop_assert_eq!(&out[d..], &oracle[..]);
        }
    }
}
