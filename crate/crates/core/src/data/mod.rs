//! Event and frame data model, time-window aggregation, dataset I/O and the
//! synthetic near-eye scene generator.

pub mod io;
pub mod synth;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{GazeError, Result};

pub use io::{load_manifest, save_manifest, DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, ContrastSimulator, SyntheticSceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_i8())
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn from_sign(delta: f64) -> Self {
        if delta >= 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, polarity: Polarity) -> Self {
        Self { x, y, t, polarity }
    }
}

/// Events from one sensor over the half-open window `[t_start, t_end)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: usize,
    pub height: usize,
    pub t_start: u64,
    pub t_end: u64,
}

impl EventStream {
    /// Builds a stream, checking bounds and timestamp order.
    pub fn new(
        events: Vec<Event>,
        width: usize,
        height: usize,
        t_start: u64,
        t_end: u64,
    ) -> Result<Self> {
        let stream = Self {
            events,
            width,
            height,
            t_start,
            t_end,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn empty(width: usize, height: usize, t_start: u64, t_end: u64) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
            t_start,
            t_end,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t <= w[1].t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_end < self.t_start {
            return Err(GazeError::DataIntegrity(format!(
                "window end {} precedes start {}",
                self.t_end, self.t_start
            )));
        }
        if !self.is_sorted() {
            return Err(GazeError::DataIntegrity(
                "event timestamps are not non-decreasing".into(),
            ));
        }
        for (k, e) in self.events.iter().enumerate() {
            if usize::from(e.x) >= self.width || usize::from(e.y) >= self.height {
                return Err(GazeError::DataIntegrity(format!(
                    "event {k} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.t < self.t_start || e.t >= self.t_end {
                return Err(GazeError::DataIntegrity(format!(
                    "event {k} at t={} outside window [{}, {})",
                    e.t, self.t_start, self.t_end
                )));
            }
        }
        Ok(())
    }

    /// Events with `t0 <= t < t0 + dt`, order preserved.
    pub fn aggregate_window(&self, t0: u64, dt: u64) -> Result<EventStream> {
        if dt == 0 {
            return Err(GazeError::Config("window length must be positive".into()));
        }
        if !self.is_sorted() {
            return Err(GazeError::DataIntegrity(
                "cannot aggregate an unsorted event stream".into(),
            ));
        }
        let t1 = t0.saturating_add(dt);
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = self.events.partition_point(|e| e.t < t1);
        Ok(EventStream {
            events: self.events[lo..hi].to_vec(),
            width: self.width,
            height: self.height,
            t_start: t0,
            t_end: t1,
        })
    }
}

/// Grayscale exposure with intensities in `[0, 1]`, indexed `[row, col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub intensity: Array2<f64>,
    pub t: u64,
}

impl Frame {
    pub fn new(intensity: Array2<f64>, t: u64) -> Result<Self> {
        if let Some(bad) = intensity
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(GazeError::DataIntegrity(format!(
                "frame intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self { intensity, t })
    }

    pub fn height(&self) -> usize {
        self.intensity.nrows()
    }

    pub fn width(&self) -> usize {
        self.intensity.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeLabel {
    pub row: usize,
    pub col: usize,
    pub screen_px: [f64; 2],
    /// Unit vector from the eye origin.
    pub direction: [f64; 3],
}

impl GazeLabel {
    pub fn cell_index(&self, grid: usize) -> usize {
        self.row * grid + self.col
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeSample {
    pub frame: Frame,
    pub events: EventStream,
    pub label: GazeLabel,
    pub subject_id: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stream(n: usize, seed: u64) -> EventStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts: Vec<u64> = (0..n).map(|_| rng.random_range(0..100_000)).collect();
        ts.sort_unstable();
        let events = ts
            .into_iter()
            .map(|t| {
                let p = if rng.random_bool(0.5) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                Event::new(rng.random_range(0..64), rng.random_range(0..48), t, p)
            })
            .collect();
        EventStream::new(events, 64, 48, 0, 100_000).unwrap()
    }

    #[test]
    fn empty_stream_gives_empty_window() {
        let s = EventStream::empty(10, 10, 0, 1000);
        let w = s.aggregate_window(100, 50).unwrap();
        assert!(w.is_empty());
        assert_eq!((w.t_start, w.t_end), (100, 150));
    }

    #[test]
    fn covering_window_is_identity() {
        let s = random_stream(500, 1);
        let w = s.aggregate_window(0, 100_000).unwrap();
        assert_eq!(w.events, s.events);
    }

    #[test]
    fn window_matches_linear_scan() {
        let s = random_stream(1000, 7);
        let (t0, dt) = (23_456, 31_000);
        let oracle: Vec<Event> = s
            .events
            .iter()
            .filter(|e| e.t >= t0 && e.t < t0 + dt)
            .copied()
            .collect();
        assert_eq!(s.aggregate_window(t0, dt).unwrap().events, oracle);
    }

    #[test]
    fn unsorted_stream_rejected() {
        let mut s = random_stream(10, 2);
        s.events.reverse();
        assert!(matches!(
            s.aggregate_window(0, 10),
            Err(GazeError::DataIntegrity(_))
        ));
    }

    #[test]
    fn zero_length_window_rejected() {
        let s = random_stream(10, 2);
        assert!(matches!(s.aggregate_window(0, 0), Err(GazeError::Config(_))));
    }

    #[test]
    fn constructor_checks_bounds() {
        let e = Event::new(10, 0, 5, Polarity::Positive);
        assert!(EventStream::new(vec![e], 10, 10, 0, 10).is_err());
        assert!(EventStream::new(vec![e], 11, 10, 0, 5).is_err());
        assert!(EventStream::new(vec![e], 11, 10, 0, 6).is_ok());
    }

    proptest! {
        #[test]
        fn window_output_is_sorted_and_bounded(seed in 0u64..1000, t0 in 0u64..120_000, dt in 1u64..50_000) {
            let s = random_stream(300, seed);
            let w = s.aggregate_window(t0, dt).unwrap();
            prop_assert!(w.is_sorted());
            prop_assert!(w.events.iter().all(|e| e.t >= t0 && e.t < t0 + dt));
        }
    }
}
