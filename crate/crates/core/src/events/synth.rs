//! Synthetic moving-bar recordings. Class `k` of `K` is a bar at angle
//! `k * pi / K` sweeping across a 34×34 sensor along its normal, always in
//! the same direction, during a 100 ms window. The leading edge fires positive events and the trailing
//! edge negative ones, so polarity encodes the direction of motion. 5% of
//! the events are uniform noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Event, EventStream, LabeledSample, Polarity};
use crate::seed::{derive_seed, rng_for, streams};

pub const SYNTH_SIZE: (u16, u16) = (34, 34);
pub const SYNTH_WINDOW_US: u64 = 100_000;

const NOISE_FRACTION: f64 = 0.05;
const BAR_WIDTH: f64 = 2.0;
const TRAVEL: f64 = 8.0;

pub fn synth_dataset(
    num_classes: usize,
    samples_per_class: usize,
    events_per_sample: usize,
    seed: u64,
) -> Vec<LabeledSample> {
    let mut out = Vec::with_capacity(num_classes * samples_per_class);
    for class in 0..num_classes {
        for s in 0..samples_per_class {
            let stream_id = derive_seed(streams::SYNTH, (class as u64) << 32 | s as u64);
            let mut rng = rng_for(seed, stream_id);
            let angle = class as f64 * PI / num_classes.max(1) as f64;
            let stream = moving_bar(&mut rng, angle, events_per_sample);
            out.push(LabeledSample { stream, label: class });
        }
    }
    out
}

/// Disjoint train and test sets drawn from independent seed streams.
pub fn synth_split(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    events_per_sample: usize,
    seed: u64,
) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    (
        synth_dataset(num_classes, train_per_class, events_per_sample, derive_seed(seed, 0)),
        synth_dataset(num_classes, test_per_class, events_per_sample, derive_seed(seed, 1)),
    )
}

fn moving_bar(rng: &mut ChaCha8Rng, angle: f64, n: usize) -> EventStream {
    let (h, w) = (SYNTH_SIZE.0 as f64, SYNTH_SIZE.1 as f64);
    let dir = (angle.cos(), angle.sin());
    let normal = (-dir.1, dir.0);
    let center = (w / 2.0 + rng.gen_range(-3.0..3.0), h / 2.0 + rng.gen_range(-3.0..3.0));
    let length = rng.gen_range(18.0..28.0);
    let speed = TRAVEL / SYNTH_WINDOW_US as f64;
    let start = -TRAVEL / 2.0;

    let n_noise = ((n as f64) * NOISE_FRACTION).round() as usize;
    let mut events = Vec::with_capacity(n);
    while events.len() < n - n_noise {
        let t = rng.gen_range(0..SYNTH_WINDOW_US);
        let along = rng.gen_range(-length / 2.0..length / 2.0);
        let leading = rng.gen_bool(0.5);
        let offset = start + speed * t as f64
            + if leading { BAR_WIDTH / 2.0 } else { -BAR_WIDTH / 2.0 };
        let x = center.0 + along * dir.0 + offset * normal.0;
        let y = center.1 + along * dir.1 + offset * normal.1;
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= w || yi >= h {
            continue;
        }
        let p = if leading { Polarity::Pos } else { Polarity::Neg };
        events.push(Event::new(xi as u16, yi as u16, t, p));
    }
    while events.len() < n {
        let p = if rng.gen_bool(0.5) { Polarity::Pos } else { Polarity::Neg };
        events.push(Event::new(
            rng.gen_range(0..SYNTH_SIZE.1),
            rng.gen_range(0..SYNTH_SIZE.0),
            rng.gen_range(0..SYNTH_WINDOW_US),
            p,
        ));
    }
    EventStream::new(events, SYNTH_SIZE.0, SYNTH_SIZE.1).expect("generated events are in bounds")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality_and_bounds() {
        let d = synth_dataset(2, 1, 512, 11);
        assert_eq!(d.len(), 2);
        for s in &d {
            assert_eq!(s.stream.len(), 512);
            assert!(s.stream.events().iter().all(|e| e.x < 34 && e.y < 34 && e.t < SYNTH_WINDOW_US));
        }
        assert_eq!(d[0].label, 0);
        assert_eq!(d[1].label, 1);
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(synth_dataset(3, 2, 128, 4), synth_dataset(3, 2, 128, 4));
        assert_ne!(synth_dataset(3, 2, 128, 4), synth_dataset(3, 2, 128, 5));
    }

    #[test]
    fn classes_differ_in_event_positions() {
        let d = synth_dataset(2, 1, 512, 11);
        let (a, b) = (d[0].stream.events(), d[1].stream.events());
        let differ = a.iter().zip(b).filter(|(p, q)| (p.x, p.y) != (q.x, q.y)).count();
        assert!(differ * 10 >= 512, "only {differ} positions differ");
    }

    #[test]
    fn both_polarities_present() {
        for s in synth_dataset(4, 3, 2000, 2) {
            let pos = s.stream.events().iter().filter(|e| e.p == Polarity::Pos).count();
            assert!(pos > 500 && pos < 1500, "{pos} positive events");
        }
    }
}
