//! Event data model, codecs, normalization and dataset utilities.

mod nmnist;
mod split;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use nmnist::{
    encode_nmnist_bin, load_class_dirs, load_nmnist_bin, read_manifest, read_nmnist_file, scan_class_dirs,
    write_manifest, ManifestEntry, NMNIST_SIZE,
};
pub use split::{train_test_split, Labeled};
pub use synth::{synth_dataset, synth_split, SYNTH_SIZE, SYNTH_WINDOW_US};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Neg,
    Pos,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Neg => -1.0,
            Polarity::Pos => 1.0,
        }
    }

    pub fn from_sign(v: f64) -> Self {
        if v > 0.0 {
            Polarity::Pos
        } else {
            Polarity::Neg
        }
    }
}

/// A single event: pixel column `x`, row `y`, timestamp `t` in microseconds
/// and the polarity of the brightness change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Event { x, y, t, p }
    }
}

/// Events ordered by nondecreasing timestamp on a `height × width` sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    height: u16,
    width: u16,
}

impl EventStream {
    /// Validates coordinates and stably sorts by timestamp.
    pub fn new(mut events: Vec<Event>, height: u16, width: u16) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(Error::Format(format!(
                "event at ({}, {}) outside {height}x{width} sensor",
                e.x, e.y
            )));
        }
        if events.windows(2).any(|w| w[0].t > w[1].t) {
            events.sort_by_key(|e| e.t);
        }
        Ok(EventStream { events, height, width })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    /// `t_max - t_min` in microseconds (0 for an empty stream).
    pub fn duration(&self) -> u64 {
        match (self.events.first(), self.events.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0,
        }
    }

    /// Adds a constant to every timestamp.
    pub fn shifted(&self, dt: u64) -> Self {
        let events = self.events.iter().map(|e| Event { t: e.t + dt, ..*e }).collect();
        EventStream { events, ..*self }
    }

    /// Keeps the events at `indices` (which must be ascending).
    pub fn select(&self, indices: &[usize]) -> Self {
        let events = indices.iter().map(|&i| self.events[i]).collect();
        EventStream { events, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub stream: EventStream,
    pub label: usize,
}

/// The `N × 4` model input: `(x / (W-1), y / (H-1), (t - t_min) / (t_max - t_min), p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedEvents {
    rows: Vec<[f64; 4]>,
    pixels: Vec<(u16, u16)>,
    height: u16,
    width: u16,
    t_min: u64,
    t_max: u64,
    source: Vec<usize>,
}

fn scale(v: u64, denom: u64) -> f64 {
    if denom == 0 {
        0.0
    } else {
        v as f64 / denom as f64
    }
}

pub fn normalize_events(stream: &EventStream) -> Result<NormalizedEvents> {
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        return Err(Error::EmptyStream);
    };
    let (t_min, t_max) = (first.t, last.t);
    let (wd, hd) = (stream.width as u64 - 1, stream.height as u64 - 1);
    let rows = stream
        .events
        .iter()
        .map(|e| {
            [
                scale(e.x as u64, wd),
                scale(e.y as u64, hd),
                scale(e.t - t_min, t_max - t_min),
                e.p.sign(),
            ]
        })
        .collect();
    Ok(NormalizedEvents {
        rows,
        pixels: stream.events.iter().map(|e| (e.y, e.x)).collect(),
        height: stream.height,
        width: stream.width,
        t_min,
        t_max,
        source: (0..stream.len()).collect(),
    })
}

impl NormalizedEvents {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[[f64; 4]] {
        &self.rows
    }

    /// Integer `(row, column)` pixel of each event.
    pub fn pixels(&self) -> &[(u16, u16)] {
        &self.pixels
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    /// Index of each row in the stream it was normalized from.
    pub fn source(&self) -> &[usize] {
        &self.source
    }

    /// Rows at `indices`, keeping provenance.
    pub fn select(&self, indices: &[usize]) -> Self {
        NormalizedEvents {
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
            pixels: indices.iter().map(|&i| self.pixels[i]).collect(),
            source: indices.iter().map(|&i| self.source[i]).collect(),
            ..*self
        }
    }

    /// Recovers the integer event behind row `i`.
    pub fn denormalize(&self, i: usize) -> Event {
        let r = self.rows[i];
        let (y, x) = self.pixels[i];
        let dt = (r[2] * (self.t_max - self.t_min) as f64).round() as u64;
        Event { x, y, t: self.t_min + dt, p: Polarity::from_sign(r[3]) }
    }

    /// Row-major `N × 4` tensor of the rows.
    pub fn to_tensor<T: crate::Real>(&self) -> crate::Tensor<T> {
        let data = self.rows.iter().flatten().map(|&v| T::from_f64(v)).collect();
        crate::Tensor::new(&[self.rows.len(), 4], data).unwrap()
    }
}

/// Uniform sample of `n` events without replacement, kept in temporal order.
/// Streams with at most `n` events are returned whole.
pub fn sample_events(stream: &EventStream, n: usize, seed: u64) -> EventStream {
    if stream.len() <= n {
        return stream.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, stream.len(), n).into_vec();
    idx.sort_unstable();
    stream.select(&idx)
}

/// Repeats events evenly until the stream has at least `min` events.
pub fn pad_events(stream: &EventStream, min: usize) -> EventStream {
    let n = stream.len();
    if n >= min || n == 0 {
        return stream.clone();
    }
    let idx: Vec<usize> = (0..min).map(|i| i * n / min).collect();
    stream.select(&idx)
}
