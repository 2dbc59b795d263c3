//! Synthetic labeled event datasets: parameterized shapes moving over a
//! virtual sensor, emitting an event wherever a pixel centre enters or
//! leaves the shape between two simulation steps.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Event, EventStream, Polarity};
use crate::error::{invalid, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub sensor_width: u16,
    pub sensor_height: u16,
    #[serde(default = "default_duration")]
    pub duration_us: u64,
    #[serde(default = "default_streams")]
    pub streams_per_class: usize,
    /// Simulation step; event timestamps are jittered uniformly inside a step.
    #[serde(default = "default_step")]
    pub time_step_us: u64,
    /// Probability that a pixel occupancy change emits an event.
    #[serde(default = "default_prob")]
    pub event_prob: f64,
    /// Background events per second over the whole sensor.
    #[serde(default)]
    pub noise_rate_hz: f64,
    #[serde(default)]
    pub polarity: PolarityMode,
    /// Toroidal sensor: shapes leaving one border re-enter at the opposite one.
    #[serde(default)]
    pub wrap: bool,
    pub classes: Vec<ClassSpec>,
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))
    }
}

fn default_duration() -> u64 {
    100_000
}
fn default_streams() -> usize {
    10
}
fn default_step() -> u64 {
    200
}
fn default_prob() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityMode {
    /// ON when a pixel becomes covered (leading edge), OFF when uncovered.
    #[default]
    Edge,
    /// Fair coin per event; removes the leading/trailing edge cue.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    #[serde(default)]
    pub name: String,
    pub shape: Shape,
    pub motion: Motion,
    /// Negate the motion with probability 1/2 per stream.
    #[serde(default)]
    pub random_sign: bool,
    /// Relative speed jitter, uniform in `[-j, j]` per stream.
    #[serde(default)]
    pub speed_jitter: f64,
    /// Fixed initial centre `[x, y]`; drawn uniformly when absent.
    #[serde(default)]
    pub start: Option<[f64; 2]>,
    /// Initial orientation in degrees.
    #[serde(default)]
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Bar { width: f64, height: f64 },
    Square { size: f64 },
    LShape { size: f64, thickness: f64 },
    Disk { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Static,
    /// Pixels per second along x and y.
    Translate {
        velocity: [f64; 2],
    },
    /// Degrees per second about the shape centre.
    Rotate {
        omega_deg: f64,
    },
    /// Growth of the characteristic size in pixels per second.
    Expand {
        rate: f64,
    },
    /// Jumps by `step` every `period_us`; while resting, toggles visibility
    /// every `flicker_us` (0 = always visible).
    Hop {
        step: [f64; 2],
        period_us: u64,
        flicker_us: u64,
    },
}

impl Shape {
    fn size(&self) -> f64 {
        match *self {
            Shape::Bar { width, height } => width.max(height),
            Shape::Square { size } | Shape::LShape { size, .. } => size,
            Shape::Disk { radius } => 2.0 * radius,
        }
    }

    fn circumradius(&self) -> f64 {
        match *self {
            Shape::Bar { width, height } => 0.5 * width.hypot(height),
            Shape::Square { size } | Shape::LShape { size, .. } => {
                0.5 * size * std::f64::consts::SQRT_2
            }
            Shape::Disk { radius } => radius,
        }
    }

    /// Membership of a point given in shape-local coordinates.
    fn contains(&self, lx: f64, ly: f64) -> bool {
        let half_open = |v: f64, lo: f64, hi: f64| v >= lo && v < hi;
        match *self {
            Shape::Bar { width, height } => {
                half_open(lx, -0.5 * width, 0.5 * width)
                    && half_open(ly, -0.5 * height, 0.5 * height)
            }
            Shape::Square { size } => {
                half_open(lx, -0.5 * size, 0.5 * size) && half_open(ly, -0.5 * size, 0.5 * size)
            }
            Shape::LShape { size, thickness } => {
                let h = 0.5 * size;
                let vertical = half_open(lx, -h, -h + thickness) && half_open(ly, -h, h);
                let horizontal = half_open(ly, h - thickness, h) && half_open(lx, -h, h);
                vertical || horizontal
            }
            Shape::Disk { radius } => lx * lx + ly * ly < radius * radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pose {
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
    visible: bool,
}

struct Actor {
    shape: Shape,
    motion: Motion,
    start: Pose,
}

impl Actor {
    fn pose(&self, t_us: u64) -> Pose {
        let secs = t_us as f64 * 1e-6;
        let mut p = self.start;
        match self.motion {
            Motion::Static => {}
            Motion::Translate { velocity } => {
                p.cx += velocity[0] * secs;
                p.cy += velocity[1] * secs;
            }
            Motion::Rotate { omega_deg } => p.angle += omega_deg.to_radians() * secs,
            Motion::Expand { rate } => p.scale = (1.0 + rate * secs / self.shape.size()).max(0.0),
            Motion::Hop {
                step,
                period_us,
                flicker_us,
            } => {
                let hops = if period_us == 0 { 0 } else { t_us / period_us } as f64;
                p.cx += step[0] * hops;
                p.cy += step[1] * hops;
                if flicker_us > 0 {
                    p.visible = (t_us / flicker_us) % 2 == 0;
                }
            }
        }
        p
    }
}

/// Generates `streams_per_class` labeled streams per class, class-major.
/// Each stream draws from its own generator derived from `(seed, class, index)`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<EventStream>> {
    if spec.classes.len() < 2 {
        return Err(invalid!(
            "synthetic spec needs at least 2 classes, got {}",
            spec.classes.len()
        ));
    }
    if spec.sensor_width == 0 || spec.sensor_height == 0 {
        return Err(invalid!("sensor dimensions must be positive"));
    }
    if spec.time_step_us == 0 {
        return Err(invalid!("time_step_us must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.event_prob) {
        return Err(invalid!("event_prob must lie in [0, 1]"));
    }
    if !(spec.noise_rate_hz >= 0.0) {
        return Err(invalid!("noise_rate_hz must be non-negative"));
    }
    let mut out = Vec::with_capacity(spec.classes.len() * spec.streams_per_class);
    for (label, class) in spec.classes.iter().enumerate() {
        for i in 0..spec.streams_per_class {
            let mut rng = seed::rng(seed, &[label as u64, i as u64]);
            let actor = draw_actor(spec, class, &mut rng);
            out.push(simulate(spec, &actor, label, &mut rng)?);
        }
    }
    Ok(out)
}

fn draw_actor(spec: &SynthSpec, class: &ClassSpec, rng: &mut seed::Rng) -> Actor {
    let sign = if class.random_sign && rng.gen_bool(0.5) {
        -1.0
    } else {
        1.0
    };
    let jitter = if class.speed_jitter > 0.0 {
        1.0 + rng.gen_range(-class.speed_jitter..=class.speed_jitter)
    } else {
        1.0
    };
    let k = sign * jitter;
    let motion = match class.motion {
        Motion::Static => Motion::Static,
        Motion::Translate { velocity } => Motion::Translate {
            velocity: [velocity[0] * k, velocity[1] * k],
        },
        Motion::Rotate { omega_deg } => Motion::Rotate {
            omega_deg: omega_deg * k,
        },
        Motion::Expand { rate } => Motion::Expand {
            rate: rate * jitter,
        },
        Motion::Hop {
            step,
            period_us,
            flicker_us,
        } => Motion::Hop {
            step: [step[0] * sign, step[1] * sign],
            period_us,
            flicker_us,
        },
    };
    let (w, h) = (f64::from(spec.sensor_width), f64::from(spec.sensor_height));
    let (cx, cy) = match class.start {
        Some([x, y]) => (x, y),
        None if spec.wrap => (rng.gen_range(0.0..w), rng.gen_range(0.0..h)),
        None => {
            let r = class.shape.circumradius();
            let pick = |rng: &mut seed::Rng, extent: f64| {
                if extent > 2.0 * r {
                    rng.gen_range(r..extent - r)
                } else {
                    0.5 * extent
                }
            };
            (pick(rng, w), pick(rng, h))
        }
    };
    let start = Pose {
        cx,
        cy,
        angle: class.angle_deg.to_radians(),
        scale: 1.0,
        visible: true,
    };
    Actor {
        shape: class.shape,
        motion,
        start,
    }
}

fn simulate(
    spec: &SynthSpec,
    actor: &Actor,
    label: usize,
    rng: &mut seed::Rng,
) -> Result<EventStream> {
    let (w, h) = (spec.sensor_width as usize, spec.sensor_height as usize);
    let dt = spec.time_step_us;
    let steps = spec.duration_us / dt;
    let noise = if spec.noise_rate_hz > 0.0 {
        Some(
            Poisson::new(spec.noise_rate_hz * dt as f64 * 1e-6)
                .map_err(|e| invalid!("noise rate: {e}"))?,
        )
    } else {
        None
    };
    let mut occupied = vec![false; w * h];
    let mut pose = actor.pose(0);
    rasterize(
        spec,
        actor,
        &pose,
        full_box(w, h),
        &mut occupied,
        |_, _, _| {},
    );
    let mut events = Vec::new();
    for k in 1..=steps {
        let t_prev = (k - 1) * dt;
        let next = actor.pose(k * dt);
        if next != pose {
            let region = if spec.wrap {
                full_box(w, h)
            } else {
                union(bbox(actor, &pose, w, h), bbox(actor, &next, w, h))
            };
            rasterize(spec, actor, &next, region, &mut occupied, |x, y, now| {
                if spec.event_prob >= 1.0 || rng.gen_bool(spec.event_prob) {
                    let p = match spec.polarity {
                        PolarityMode::Edge if now => Polarity::On,
                        PolarityMode::Edge => Polarity::Off,
                        PolarityMode::Random if rng.gen_bool(0.5) => Polarity::On,
                        PolarityMode::Random => Polarity::Off,
                    };
                    let t = t_prev + 1 + rng.gen_range(0..dt);
                    events.push(Event::new(x as u16, y as u16, t, p));
                }
            });
            pose = next;
        }
        if let Some(dist) = &noise {
            let n = dist.sample(rng) as usize;
            for _ in 0..n {
                let x = rng.gen_range(0..w) as u16;
                let y = rng.gen_range(0..h) as u16;
                let t = t_prev + 1 + rng.gen_range(0..dt);
                let p = if rng.gen_bool(0.5) {
                    Polarity::On
                } else {
                    Polarity::Off
                };
                events.push(Event::new(x, y, t, p));
            }
        }
    }
    EventStream::new(spec.sensor_width, spec.sensor_height, events, Some(label))
}

type PixelBox = (usize, usize, usize, usize);

fn full_box(w: usize, h: usize) -> PixelBox {
    (0, w, 0, h)
}

fn union(a: PixelBox, b: PixelBox) -> PixelBox {
    if a.0 >= a.1 || a.2 >= a.3 {
        return b;
    }
    if b.0 >= b.1 || b.2 >= b.3 {
        return a;
    }
    (a.0.min(b.0), a.1.max(b.1), a.2.min(b.2), a.3.max(b.3))
}

/// Pixel range that can contain covered pixel centres for `pose`.
fn bbox(actor: &Actor, pose: &Pose, w: usize, h: usize) -> PixelBox {
    if !pose.visible {
        return (0, 0, 0, 0);
    }
    let r = actor.shape.circumradius() * pose.scale + 1.0;
    let clip = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
    (
        clip((pose.cx - r).floor(), w),
        clip((pose.cx + r).ceil() + 1.0, w),
        clip((pose.cy - r).floor(), h),
        clip((pose.cy + r).ceil() + 1.0, h),
    )
}

/// Recomputes occupancy inside `region` and reports each pixel whose state
/// flipped as `(x, y, now_covered)`, in row-major order.
fn rasterize(
    spec: &SynthSpec,
    actor: &Actor,
    pose: &Pose,
    region: PixelBox,
    occupied: &mut [bool],
    mut changed: impl FnMut(usize, usize, bool),
) {
    let (w, h) = (spec.sensor_width as usize, spec.sensor_height as usize);
    let (sin, cos) = (-pose.angle).sin_cos();
    let (x0, x1, y0, y1) = region;
    for y in y0..y1 {
        for x in x0..x1 {
            let inside = pose.visible && pose.scale > 0.0 && {
                let mut dx = x as f64 + 0.5 - pose.cx;
                let mut dy = y as f64 + 0.5 - pose.cy;
                if spec.wrap {
                    dx = wrap_delta(dx, w as f64);
                    dy = wrap_delta(dy, h as f64);
                }
                let lx = (dx * cos - dy * sin) / pose.scale;
                let ly = (dx * sin + dy * cos) / pose.scale;
                actor.shape.contains(lx, ly)
            };
            let cell = &mut occupied[y * w + x];
            if *cell != inside {
                *cell = inside;
                changed(x, y, inside);
            }
        }
    }
}

fn wrap_delta(d: f64, extent: f64) -> f64 {
    (d + 0.5 * extent).rem_euclid(extent) - 0.5 * extent
}
