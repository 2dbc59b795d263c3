//! Non-uniform space-time grid sampling.
//!
//! The `(x, y, t)` bounding box of a window is split recursively at the
//! midpoint of every non-degenerate axis until a cell holds at most
//! `k_max` events; one event is then drawn uniformly from each leaf.

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::event_io::{Event, EventStream};
use crate::seed;

pub const MAX_DEPTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_k_max() -> usize {
    8
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            k_max: 8,
            rng_seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(invalid!("k_max must be at least 1"));
        }
        Ok(())
    }
}

/// Samples the events of `stream` inside `[t_start, t_end)`.
pub fn non_uniform_sample(
    stream: &EventStream,
    t_start: f64,
    t_end: f64,
    params: &SamplingParams,
) -> Result<Vec<Event>> {
    params.validate()?;
    if !(t_start < t_end) {
        return Err(invalid!("empty or inverted window [{t_start}, {t_end})"));
    }
    Ok(sample_events(stream.window(t_start, t_end), params))
}

/// Samples an arbitrary event slice; output keeps input order.
pub fn sample_events(events: &[Event], params: &SamplingParams) -> Vec<Event> {
    if events.is_empty() {
        return Vec::new();
    }
    let mut rng = seed::rng(params.rng_seed, &[]);
    let mut chosen = Vec::new();
    let mut idx: Vec<usize> = (0..events.len()).collect();
    split(
        events,
        &mut idx,
        params.k_max.max(1),
        0,
        &mut rng,
        &mut chosen,
    );
    chosen.sort_unstable();
    chosen.into_iter().map(|i| events[i]).collect()
}

fn coords(e: &Event) -> [f64; 3] {
    [f64::from(e.x), f64::from(e.y), e.t as f64]
}

/// Depth-first over octants in index order (bit 0: upper x, bit 1: upper y,
/// bit 2: upper t), so the random draws happen in a fixed order.
fn split(
    events: &[Event],
    idx: &mut [usize],
    k_max: usize,
    depth: usize,
    rng: &mut seed::Rng,
    out: &mut Vec<usize>,
) {
    if idx.is_empty() {
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in idx.iter() {
        let c = coords(&events[i]);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let splittable = (0..3).any(|a| hi[a] > lo[a]);
    if idx.len() <= k_max || depth >= MAX_DEPTH || !splittable {
        out.push(idx[rng.gen_range(0..idx.len())]);
        return;
    }
    let mid: [Option<f64>; 3] =
        std::array::from_fn(|a| (hi[a] > lo[a]).then(|| 0.5 * (lo[a] + hi[a])));
    let octant = |i: usize| {
        let c = coords(&events[i]);
        (0..3).fold(0usize, |acc, a| match mid[a] {
            Some(m) if c[a] >= m => acc | (1 << a),
            _ => acc,
        })
    };
    idx.sort_by_key(|&i| (octant(i), i));
    let mut start = 0;
    while start < idx.len() {
        let o = octant(idx[start]);
        let mut end = start;
        while end < idx.len() && octant(idx[end]) == o {
            end += 1;
        }
        split(events, &mut idx[start..end], k_max, depth + 1, rng, out);
        start = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::Polarity;

    fn ev(x: u16, y: u16, t: u64) -> Event {
        Event::new(x, y, t, Polarity::On)
    }

    #[test]
    fn few_events_give_one_sample() {
        let events: Vec<_> = (0..5).map(|i| ev(i, i, i as u64 * 7)).collect();
        let out = sample_events(&events, &SamplingParams::default());
        assert_eq!(out.len(), 1);
        assert!(events.contains(&out[0]));
    }

    #[test]
    fn empty_window_is_empty() {
        let s = EventStream::empty(10, 10);
        assert!(
            non_uniform_sample(&s, 0.0, 10.0, &SamplingParams::default())
                .unwrap()
                .is_empty()
        );
        assert!(non_uniform_sample(&s, 10.0, 10.0, &SamplingParams::default()).is_err());
    }

    #[test]
    fn duplicates_terminate() {
        let events = vec![ev(3, 3, 3); 100];
        let out = sample_events(
            &events,
            &SamplingParams {
                k_max: 2,
                rng_seed: 5,
            },
        );
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn deterministic_under_seed() {
        let events: Vec<_> = (0..300u64)
            .map(|i| ev((i * 7 % 31) as u16, (i * 13 % 17) as u16, i * 11))
            .collect();
        let p = SamplingParams {
            k_max: 4,
            rng_seed: 9,
        };
        assert_eq!(sample_events(&events, &p), sample_events(&events, &p));
    }
}
