//! Synthetic 2D room: obstacles, an AP, cameras with a field of view, a
//! moving STA, top-down occlusion-aware rendering and log-distance RSSI.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Axis-aligned obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub const fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    /// Closed containment.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Whether the closed segment `a`–`b` touches the rectangle (Liang–Barsky).
    pub fn intersects_segment(&self, a: Point, b: Point) -> bool {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for (p, q) in [
            (-dx, a.x - self.x_min),
            (dx, self.x_max - a.x),
            (-dy, a.y - self.y_min),
            (dy, self.y_max - a.y),
        ] {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }

    /// Number of rectangle edges the open segment crosses transversally.
    pub fn edge_crossings(&self, a: Point, b: Point) -> usize {
        let mut n = 0;
        for x in [self.x_min, self.x_max] {
            if (a.x - x) * (b.x - x) < 0.0 {
                let y = a.y + (x - a.x) / (b.x - a.x) * (b.y - a.y);
                n += usize::from(y >= self.y_min && y <= self.y_max);
            }
        }
        for y in [self.y_min, self.y_max] {
            if (a.y - y) * (b.y - y) < 0.0 {
                let x = a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x);
                n += usize::from(x >= self.x_min && x <= self.x_max);
            }
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub x: f64,
    pub y: f64,
    /// Counter-clockwise from +x.
    pub heading_deg: f64,
    pub fov_deg: f64,
}

impl CameraPose {
    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn in_fov(&self, p: Point) -> bool {
        let (dx, dy) = (p.x - self.x, p.y - self.y);
        if dx == 0.0 && dy == 0.0 {
            return true;
        }
        let mut delta = dy.atan2(dx) - self.heading_deg.to_radians();
        delta = (delta + PI).rem_euclid(2.0 * PI) - PI;
        delta.abs() <= 0.5 * self.fov_deg.to_radians() + 1e-12
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Propagation {
    /// Received power at 1 m.
    pub p0_dbm: f64,
    pub exponent: f64,
    pub wall_loss_db: f64,
    pub shadowing_db: f64,
}

impl Default for Propagation {
    fn default() -> Self {
        Self {
            p0_dbm: -30.0,
            exponent: 2.2,
            wall_loss_db: 6.0,
            shadowing_db: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub speed_mps: f64,
    /// Standard deviation of the heading change per step.
    pub turn_std_deg: f64,
    pub seed: u64,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self {
            speed_mps: 1.5,
            turn_std_deg: 8.0,
            seed: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSize {
    pub width: usize,
    pub height: usize,
}

impl Default for RenderSize {
    fn default() -> Self {
        Self { width: 64, height: 48 }
    }
}

/// Impairments applied to the 40 Hz measurement stream written to disk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub dropout_prob: f64,
    pub spike_prob: f64,
    pub spike_db: f64,
    /// Round written values to whole dB.
    pub quantize: bool,
}

impl Default for Measurement {
    fn default() -> Self {
        Self {
            dropout_prob: 0.01,
            spike_prob: 0.01,
            spike_db: 20.0,
            quantize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub room: Room,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
    pub ap: Point,
    pub cameras: Vec<CameraPose>,
    #[serde(default)]
    pub propagation: Propagation,
    #[serde(default)]
    pub trajectory: Trajectory,
    #[serde(default)]
    pub render: RenderSize,
    #[serde(default)]
    pub measurement: Measurement,
}

impl Default for SceneSpec {
    /// 8 m × 6 m room with two walls placed point-symmetrically so that each
    /// corner camera has its own blind region and the two regions never
    /// overlap.
    fn default() -> Self {
        Self {
            room: Room { width: 8.0, height: 6.0 },
            obstacles: vec![Rect::new(5.0, 5.3, 0.0, 3.0), Rect::new(2.7, 3.0, 3.0, 6.0)],
            ap: Point::new(4.0, 3.0),
            cameras: vec![
                CameraPose {
                    x: 0.0,
                    y: 0.0,
                    heading_deg: 45.0,
                    fov_deg: 90.0,
                },
                CameraPose {
                    x: 8.0,
                    y: 6.0,
                    heading_deg: 225.0,
                    fov_deg: 90.0,
                },
            ],
            propagation: Propagation::default(),
            trajectory: Trajectory::default(),
            render: RenderSize::default(),
            measurement: Measurement::default(),
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Spec(m) => Error::Spec(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn in_room(&self, p: Point) -> bool {
        p.x >= 0.0 && p.x <= self.room.width && p.y >= 0.0 && p.y <= self.room.height
    }

    pub fn in_obstacle(&self, p: Point) -> bool {
        self.obstacles.iter().any(|o| o.contains(p))
    }

    pub fn is_free(&self, p: Point) -> bool {
        self.in_room(p) && !self.in_obstacle(p)
    }

    /// All problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(self.room.width > 0.0 && self.room.height > 0.0) {
            issues.push("room extents must be positive".to_string());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.x_min < o.x_max && o.y_min < o.y_max) {
                issues.push(format!("obstacle {i} is empty or inverted"));
            }
            if !(self.in_room(Point::new(o.x_min, o.y_min)) && self.in_room(Point::new(o.x_max, o.y_max))) {
                issues.push(format!("obstacle {i} extends outside the room"));
            }
        }
        if !self.is_free(self.ap) {
            issues.push("AP must be inside the room and outside obstacles".into());
        }
        if self.cameras.is_empty() {
            issues.push("at least one camera is required".into());
        }
        for (k, c) in self.cameras.iter().enumerate() {
            if !self.is_free(c.position()) {
                issues.push(format!("camera {k} must be inside the room and outside obstacles"));
            }
            if !(c.fov_deg > 0.0 && c.fov_deg <= 180.0) {
                issues.push(format!("camera {k}: fov_deg must be in (0, 180], got {}", c.fov_deg));
            }
        }
        let p = &self.propagation;
        if !(p.exponent > 0.0) || !(p.wall_loss_db >= 0.0) || !(p.shadowing_db >= 0.0) || !p.p0_dbm.is_finite() {
            issues.push("propagation: need finite p0, exponent > 0, wall loss >= 0, shadowing >= 0".into());
        }
        let t = &self.trajectory;
        if !(t.speed_mps >= 0.0) || !(t.turn_std_deg >= 0.0) {
            issues.push("trajectory speed and turn_std_deg must be >= 0".into());
        }
        if self.render.width == 0 || self.render.height == 0 {
            issues.push("render size must be nonzero".into());
        }
        let m = &self.measurement;
        for (name, v) in [("dropout_prob", m.dropout_prob), ("spike_prob", m.spike_prob)] {
            if !(0.0..1.0).contains(&v) {
                issues.push(format!("measurement.{name} must be in [0, 1)"));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(issues.join("; ")))
        }
    }

    /// Whether any obstacle blocks the segment `a`–`b`.
    pub fn occluded(&self, a: Point, b: Point) -> bool {
        self.obstacles.iter().any(|o| o.intersects_segment(a, b))
    }

    /// STA visible from camera `k`: inside the FoV and not occluded.
    pub fn visible(&self, k: usize, p: Point) -> bool {
        let c = &self.cameras[k];
        c.in_fov(p) && !self.occluded(c.position(), p)
    }

    /// Obstacle edges crossed by the AP–`p` segment.
    pub fn wall_count(&self, p: Point) -> usize {
        self.obstacles.iter().map(|o| o.edge_crossings(self.ap, p)).sum()
    }

    /// Path loss without shadowing.
    pub fn mean_rssi(&self, p: Point) -> f64 {
        let prop = &self.propagation;
        let d = self.ap.dist(p).max(1.0);
        prop.p0_dbm - 10.0 * prop.exponent * d.log10() - self.wall_count(p) as f64 * prop.wall_loss_db
    }
}

/// Log-distance RSSI with wall losses and Gaussian shadowing.
pub fn rssi_ground_truth<R: Rng + ?Sized>(spec: &SceneSpec, sta: Point, rng: &mut R) -> f64 {
    let mean = spec.mean_rssi(sta);
    let sigma = spec.propagation.shadowing_db;
    if sigma > 0.0 {
        mean + Normal::new(0.0, sigma).expect("sigma validated").sample(rng)
    } else {
        mean
    }
}

const MAX_RETRIES: usize = 32;

fn random_free_point<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<Point> {
    for _ in 0..10_000 {
        let p = Point::new(
            rng.random::<f64>() * spec.room.width,
            rng.random::<f64>() * spec.room.height,
        );
        if spec.is_free(p) {
            return Ok(p);
        }
    }
    Err(Error::Spec("no free space found in the room".into()))
}

fn reflect(v: f64, hi: f64) -> (f64, bool) {
    if v < 0.0 {
        ((-v).min(hi), true)
    } else if v > hi {
        ((2.0 * hi - v).max(0.0), true)
    } else {
        (v, false)
    }
}

/// Reflecting random walk of `steps` positions, `dt` seconds apart. Moves
/// that would enter an obstacle are retried with a fresh heading; after
/// repeated failures the STA stays put for that step.
pub fn simulate_trajectory(spec: &SceneSpec, steps: usize, dt: f64) -> Result<Vec<Point>> {
    use rand::SeedableRng;
    if steps == 0 {
        return Err(Error::Param("trajectory needs at least one step".into()));
    }
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.trajectory.seed);
    let turn = Normal::new(0.0, spec.trajectory.turn_std_deg.to_radians()).expect("validated");
    let stride = spec.trajectory.speed_mps * dt;
    let mut p = random_free_point(spec, &mut rng)?;
    let mut heading = rng.random::<f64>() * 2.0 * PI;
    let mut out = Vec::with_capacity(steps);
    out.push(p);
    while out.len() < steps {
        if stride > 0.0 {
            heading += turn.sample(&mut rng);
            let mut moved = false;
            for _ in 0..MAX_RETRIES {
                let (x, fx) = reflect(p.x + stride * heading.cos(), spec.room.width);
                let (y, fy) = reflect(p.y + stride * heading.sin(), spec.room.height);
                if fx {
                    heading = PI - heading;
                }
                if fy {
                    heading = -heading;
                }
                let q = Point::new(x, y);
                if spec.is_free(q) && !spec.occluded(p, q) {
                    p = q;
                    moved = true;
                    break;
                }
                heading = rng.random::<f64>() * 2.0 * PI;
            }
            if !moved {
                log::debug!("STA held at step {}", out.len());
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// Fixed palette, RGB in [0, 1].
pub mod palette {
    pub const UNSEEN: [f32; 3] = [0.0, 0.0, 0.0];
    pub const FLOOR: [f32; 3] = [0.8, 0.8, 0.75];
    pub const OBSTACLE: [f32; 3] = [0.45, 0.3, 0.15];
    pub const AP: [f32; 3] = [0.1, 0.4, 1.0];
    pub const STA: [f32; 3] = [1.0, 0.1, 0.1];
}

pub const AP_RADIUS_M: f64 = 0.2;
pub const STA_RADIUS_M: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    /// `[3, H, W]`, row 0 at the far (`y = height`) wall.
    pub image: Tensor<f32>,
    pub timestamp_us: i64,
    pub sta_visible: bool,
}

/// World coordinates of pixel `(row, col)`'s center.
pub fn pixel_center(spec: &SceneSpec, row: usize, col: usize) -> Point {
    let (w, h) = (spec.render.width as f64, spec.render.height as f64);
    Point::new(
        (col as f64 + 0.5) / w * spec.room.width,
        spec.room.height * (1.0 - (row as f64 + 0.5) / h),
    )
}

/// Top-down view of the whole room as seen by camera `k`: pixels outside the
/// FoV wedge or behind an obstacle are unseen; the STA disc is drawn only if
/// the STA itself is visible.
pub fn render_view(spec: &SceneSpec, k: usize, sta: Point, timestamp_us: i64) -> Result<RenderedFrame> {
    let cam = spec
        .cameras
        .get(k)
        .ok_or_else(|| Error::Param(format!("camera {k} out of range ({} cameras)", spec.cameras.len())))?;
    let (w, h) = (spec.render.width, spec.render.height);
    let origin = cam.position();
    let ap_visible = spec.visible(k, spec.ap);
    let sta_visible = spec.visible(k, sta);
    let mut data = vec![0.0f32; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let q = pixel_center(spec, r, c);
            let color = if !cam.in_fov(q) {
                palette::UNSEEN
            } else if sta_visible && q.dist(sta) <= STA_RADIUS_M {
                palette::STA
            } else if ap_visible && q.dist(spec.ap) <= AP_RADIUS_M {
                palette::AP
            } else if spec.in_obstacle(q) {
                palette::OBSTACLE
            } else if spec.occluded(origin, q) {
                palette::UNSEEN
            } else {
                palette::FLOOR
            };
            for ch in 0..3 {
                data[ch * h * w + r * w + c] = color[ch];
            }
        }
    }
    Ok(RenderedFrame {
        image: Tensor::new(vec![3, h, w], data)?,
        timestamp_us,
        sta_visible,
    })
}
