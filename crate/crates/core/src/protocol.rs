//! Pulse-width serial protocol: a 3T header, then every payload float as 32
//! high pulses (T for a zero bit, 2T for a one), MSB first, each followed by
//! a low gap. Only high-pulse durations carry information.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Payload length of a state message: a constant 1.0 followed by 28 channels.
pub const STATE_FRAME_LEN: usize = 29;
pub const BITS_PER_FLOAT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub level: Level,
    pub duration_us: f64,
}

/// Alternating low/high segments, starting and ending low.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PulseTrain {
    pub pulses: Vec<Pulse>,
}

impl PulseTrain {
    pub fn duration_us(&self) -> f64 {
        self.pulses.iter().map(|p| p.duration_us).sum()
    }

    pub fn highs(&self) -> impl Iterator<Item = f64> + '_ {
        self.pulses
            .iter()
            .filter(|p| p.level == Level::High)
            .map(|p| p.duration_us)
    }

    /// True when durations are positive, levels alternate and both ends are low.
    pub fn is_well_formed(&self) -> bool {
        let alternates = self.pulses.windows(2).all(|w| w[0].level != w[1].level);
        let ends_low = match (self.pulses.first(), self.pulses.last()) {
            (Some(a), Some(b)) => a.level == Level::Low && b.level == Level::Low,
            _ => true,
        };
        alternates && ends_low && self.pulses.iter().all(|p| p.duration_us > 0.0)
    }

    fn push(&mut self, level: Level, duration_us: f64) {
        match self.pulses.last_mut() {
            Some(last) if last.level == level => last.duration_us += duration_us,
            _ => self.pulses.push(Pulse { level, duration_us }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Frame {
    pub payload: Vec<f32>,
}

impl Frame {
    pub fn new(payload: Vec<f32>) -> Self {
        Self { payload }
    }

    /// The wire message for a cell state: leading bias 1.0 then the state.
    pub fn state_message(state: &[f32]) -> Self {
        let mut payload = Vec::with_capacity(state.len() + 1);
        payload.push(1.0);
        payload.extend_from_slice(state);
        Self { payload }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Base unit T in microseconds.
    pub unit_us: f64,
    /// Low gap after every high pulse, in units of T.
    pub gap_units: f64,
    /// Pulses shorter than this many T decode as a zero bit.
    pub zero_threshold: f64,
    /// Pulses at least this many T long decode as a header.
    pub header_threshold: f64,
    pub retransmissions: usize,
    pub window_ms: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            unit_us: 50.0,
            gap_units: 1.0,
            zero_threshold: 1.5,
            header_threshold: 2.5,
            retransmissions: 5,
            window_ms: 3000.0,
        }
    }
}

pub const ZERO_UNITS: f64 = 1.0;
pub const ONE_UNITS: f64 = 2.0;
pub const HEADER_UNITS: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("payload element {0} is NaN")]
    NaN(usize),
    #[error("invalid protocol configuration: {0}")]
    Config(String),
    #[error("invalid channel model: {0}")]
    Channel(String),
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if !(self.unit_us > 0.0 && self.gap_units > 0.0) {
            return bad("unit and gap must be positive".into());
        }
        if !(0.0 < self.zero_threshold && self.zero_threshold < self.header_threshold) {
            return bad(format!(
                "thresholds ({}, {}) must be strictly increasing",
                self.zero_threshold, self.header_threshold
            ));
        }
        if self.retransmissions < 1 {
            return bad("retransmissions must be at least 1".into());
        }
        if !(self.window_ms > 0.0) {
            return bad("window must be positive".into());
        }
        Ok(())
    }

    fn gap_us(&self) -> f64 {
        self.gap_units * self.unit_us
    }
}

/// Physical-channel impairments applied by [`transmit`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    /// Each high pulse is scaled by a uniform factor in `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    /// Independent per-high-pulse drop probability.
    pub drop_prob: f64,
    /// Probability that the train is cut at a uniform time.
    pub truncate_prob: f64,
}

impl ChannelModel {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn is_ideal(&self) -> bool {
        self.jitter == 0.0 && self.drop_prob == 0.0 && self.truncate_prob == 0.0
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(ProtocolError::Channel(format!("jitter {} not in [0, 1)", self.jitter)));
        }
        if !prob(self.drop_prob) || !prob(self.truncate_prob) {
            return Err(ProtocolError::Channel("probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn encode_frame(frame: &Frame, config: &ProtocolConfig) -> Result<PulseTrain, ProtocolError> {
    if let Some(i) = frame.payload.iter().position(|v| v.is_nan()) {
        return Err(ProtocolError::NaN(i));
    }
    let t = config.unit_us;
    let gap = config.gap_us();
    let mut train = PulseTrain {
        pulses: Vec::with_capacity(3 + 2 * BITS_PER_FLOAT * frame.payload.len()),
    };
    train.push(Level::Low, gap);
    train.push(Level::High, HEADER_UNITS * t);
    train.push(Level::Low, gap);
    for v in &frame.payload {
        let bits = v.to_bits();
        for k in (0..BITS_PER_FLOAT).rev() {
            let units = if (bits >> k) & 1 == 1 { ONE_UNITS } else { ZERO_UNITS };
            train.push(Level::High, units * t);
            train.push(Level::Low, gap);
        }
    }
    Ok(train)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reject {
    Empty,
    NoHeader,
    MidFrameHeader,
    /// Number of data bits after the header, not a multiple of 32.
    BitCount(usize),
    LengthMismatch { expected: usize, got: usize },
}

impl fmt::Display for Reject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reject::Empty => write!(f, "empty"),
            Reject::NoHeader => write!(f, "no-header"),
            Reject::MidFrameHeader => write!(f, "mid-frame-header"),
            Reject::BitCount(n) => write!(f, "bit-count ({n})"),
            Reject::LengthMismatch { expected, got } => {
                write!(f, "length-mismatch (expected {expected}, got {got})")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Symbol {
    Zero,
    One,
    Header,
}

fn classify(duration_us: f64, config: &ProtocolConfig) -> Symbol {
    let units = duration_us / config.unit_us;
    if units < config.zero_threshold {
        Symbol::Zero
    } else if units < config.header_threshold {
        Symbol::One
    } else {
        Symbol::Header
    }
}

pub fn decode_pulses(train: &PulseTrain, config: &ProtocolConfig) -> Result<Frame, Reject> {
    let mut symbols = train.highs().map(|d| classify(d, config));
    match symbols.next() {
        None => return Err(Reject::Empty),
        Some(Symbol::Header) => {}
        Some(_) => return Err(Reject::NoHeader),
    }
    let mut payload = Vec::new();
    let (mut word, mut nbits) = (0u32, 0usize);
    for s in symbols {
        let bit = match s {
            Symbol::Header => return Err(Reject::MidFrameHeader),
            Symbol::Zero => 0,
            Symbol::One => 1,
        };
        word = (word << 1) | bit;
        nbits += 1;
        if nbits % BITS_PER_FLOAT == 0 {
            payload.push(f32::from_bits(word));
            word = 0;
        }
    }
    if nbits % BITS_PER_FLOAT != 0 {
        return Err(Reject::BitCount(nbits));
    }
    Ok(Frame { payload })
}

/// Decodes and additionally requires exactly `expected` payload floats.
pub fn decode_expecting(train: &PulseTrain, config: &ProtocolConfig, expected: usize) -> Result<Frame, Reject> {
    let frame = decode_pulses(train, config)?;
    if frame.payload.len() != expected {
        return Err(Reject::LengthMismatch {
            expected,
            got: frame.payload.len(),
        });
    }
    Ok(frame)
}

/// Passes a train through the impaired channel. Jitter is applied to every
/// high pulse, dropped highs merge their neighbouring lows, and truncation
/// cuts at a uniform time before the end of the last high pulse, discarding
/// any partially received high.
pub fn transmit<R: Rng + ?Sized>(train: &PulseTrain, channel: &ChannelModel, rng: &mut R) -> PulseTrain {
    if channel.is_ideal() {
        return train.clone();
    }
    let mut out = PulseTrain {
        pulses: Vec::with_capacity(train.pulses.len()),
    };
    for p in &train.pulses {
        match p.level {
            Level::Low => out.push(Level::Low, p.duration_us),
            Level::High => {
                if channel.drop_prob > 0.0 && rng.random::<f64>() < channel.drop_prob {
                    continue;
                }
                let factor = if channel.jitter > 0.0 {
                    rng.random_range(1.0 - channel.jitter..=1.0 + channel.jitter)
                } else {
                    1.0
                };
                out.push(Level::High, p.duration_us * factor);
            }
        }
    }
    if channel.truncate_prob > 0.0 && rng.random::<f64>() < channel.truncate_prob {
        truncate(&mut out, rng);
    }
    out
}

fn truncate<R: Rng + ?Sized>(train: &mut PulseTrain, rng: &mut R) {
    let Some(last_high) = train.pulses.iter().rposition(|p| p.level == Level::High) else {
        return;
    };
    let end: f64 = train.pulses[..=last_high].iter().map(|p| p.duration_us).sum();
    let cut = rng.random::<f64>() * end;
    let mut elapsed = 0.0;
    let mut kept = Vec::new();
    for p in &train.pulses {
        if elapsed + p.duration_us <= cut {
            kept.push(*p);
            elapsed += p.duration_us;
            continue;
        }
        if p.level == Level::Low && cut > elapsed {
            kept.push(Pulse {
                level: Level::Low,
                duration_us: cut - elapsed,
            });
        }
        break;
    }
    // A cut exactly on a high/low boundary would leave a complete final high.
    if kept.last().is_some_and(|p| p.level == Level::High) {
        kept.pop();
    }
    train.pulses = kept;
}

/// Result of one retransmission-protected delivery.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub frame: Option<Frame>,
    pub attempts: usize,
    /// Simulated time spent on the wire across all attempts.
    pub elapsed_us: f64,
    pub rejects: Vec<Reject>,
}

/// Up to `retransmissions` independent transmit+decode attempts, stopping at
/// the first valid frame or when the next attempt would overrun the window.
pub fn exchange<R: Rng + ?Sized>(
    frame: &Frame,
    channel: &ChannelModel,
    config: &ProtocolConfig,
    rng: &mut R,
) -> Result<Exchange, ProtocolError> {
    let train = encode_frame(frame, config)?;
    let window_us = config.window_ms * 1000.0;
    let cost = train.duration_us();
    let mut out = Exchange {
        frame: None,
        attempts: 0,
        elapsed_us: 0.0,
        rejects: Vec::new(),
    };
    while out.attempts < config.retransmissions && out.elapsed_us + cost <= window_us {
        out.attempts += 1;
        out.elapsed_us += cost;
        let received = transmit(&train, channel, rng);
        match decode_expecting(&received, config, frame.payload.len()) {
            Ok(f) => {
                out.frame = Some(f);
                break;
            }
            Err(r) => out.rejects.push(r),
        }
    }
    Ok(out)
}

/// Worst-case (all ones) wire time of a frame of `floats` values.
pub fn frame_duration_us(floats: usize, config: &ProtocolConfig) -> f64 {
    let t = config.unit_us;
    let gap = config.gap_us();
    gap + HEADER_UNITS * t + gap + (floats * BITS_PER_FLOAT) as f64 * (ONE_UNITS * t + gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub unit_us: f64,
    pub floats: usize,
    pub frame_us: f64,
    pub attempts: usize,
    pub total_us: f64,
    pub window_us: f64,
    pub fits: bool,
}

pub fn timing_budget(floats: usize, config: &ProtocolConfig) -> Budget {
    let frame_us = frame_duration_us(floats, config);
    let total_us = frame_us * config.retransmissions as f64;
    let window_us = config.window_ms * 1000.0;
    Budget {
        unit_us: config.unit_us,
        floats,
        frame_us,
        attempts: config.retransmissions,
        total_us,
        window_us,
        fits: total_us <= window_us,
    }
}

/// Which symbols survive a multiplicative jitter of `jitter` without crossing
/// a decision threshold. Checked on the closed interval endpoints, which is
/// exhaustive because classification is monotone in duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JitterMargins {
    pub zero_safe: bool,
    pub one_safe: bool,
    pub header_safe: bool,
}

impl JitterMargins {
    pub fn bits_safe(&self) -> bool {
        self.zero_safe && self.one_safe
    }
}

pub fn jitter_margins(jitter: f64, config: &ProtocolConfig) -> JitterMargins {
    let t = config.unit_us;
    let holds = |units: f64, want: Symbol| {
        [1.0 - jitter, 1.0 + jitter]
            .iter()
            .all(|f| classify(units * t * f, config) == want)
    };
    JitterMargins {
        zero_safe: holds(ZERO_UNITS, Symbol::Zero),
        one_safe: holds(ONE_UNITS, Symbol::One),
        header_safe: holds(HEADER_UNITS, Symbol::Header),
    }
}

/// One `hex_bits,durations_us` conformance row: the float's bit pattern and
/// its 32 high-pulse durations separated by spaces.
pub fn test_vector_row(value: f32, config: &ProtocolConfig) -> String {
    let bits = value.to_bits();
    let durations: Vec<String> = (0..BITS_PER_FLOAT)
        .rev()
        .map(|k| {
            let units = if (bits >> k) & 1 == 1 { ONE_UNITS } else { ZERO_UNITS };
            format!("{}", units * config.unit_us)
        })
        .collect();
    format!("{bits:08X},{}", durations.join(" "))
}

/// Sign, zero, subnormal, normal-boundary, infinity and exponent-edge patterns.
pub fn boundary_floats() -> Vec<f32> {
    let mut v = vec![
        0.0,
        -0.0,
        1.0,
        -1.0,
        f32::from_bits(1),
        -f32::from_bits(1),
        f32::from_bits(0x007F_FFFF),
        f32::MIN_POSITIVE,
        -f32::MIN_POSITIVE,
        f32::MAX,
        f32::MIN,
        f32::EPSILON,
        f32::INFINITY,
        f32::NEG_INFINITY,
        0.5,
        2.0,
        1.5,
    ];
    for exp in 0u32..=254 {
        for mantissa in [0u32, 1, 0x007F_FFFF] {
            for sign in [0u32, 1] {
                v.push(f32::from_bits((sign << 31) | (exp << 23) | mantissa));
            }
        }
    }
    v
}
