//! Procedural street-scene synthesizer with pixel-exact ground truth and
//! weather / time-of-day compositing.
//!
//! Scenes are painted back to front as flat 2D primitives. Every primitive
//! writes its class index into the mask as it paints the image, so the mask is
//! exact by construction. Weather and night effects run afterwards and only
//! ever read the mask.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    create_layout, write_manifest, write_sample_files, DatasetError, DatasetManifest, Image, LabeledSample, Mask,
    SCHEMA_VERSION,
};
use crate::schema::{DomainTag, SemanticClass, TimeOfDay, WeatherCondition, IGNORE_INDEX};

pub const MIN_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("invalid generation plan: {field}: {reason}")]
    InvalidPlan { field: &'static str, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn invalid_spec(field: &'static str, reason: impl Into<String>) -> SceneError {
    SceneError::InvalidSpec { field, reason: reason.into() }
}

fn invalid_plan(field: &'static str, reason: impl Into<String>) -> SceneError {
    SceneError::InvalidPlan { field, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectCounts {
    pub cars: u32,
    pub persons: u32,
    pub poles: u32,
    pub traffic_lights: u32,
    pub traffic_signs: u32,
    pub buildings: u32,
}

impl Default for ObjectCounts {
    fn default() -> Self {
        ObjectCounts { cars: 2, persons: 2, poles: 2, traffic_lights: 1, traffic_signs: 1, buildings: 3 }
    }
}

/// Vertical layout as fractions of the image height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneLayout {
    /// Horizon row, measured from the top.
    pub horizon: f32,
    /// Height of the road band at the bottom of the frame.
    pub road_band: f32,
}

impl Default for SceneLayout {
    fn default() -> Self {
        SceneLayout { horizon: 0.42, road_band: 0.3 }
    }
}

/// Tunable constants of the weather and night compositing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectParams {
    /// Rain at or above this severity also gets a haze pass.
    pub heavy_rain_threshold: f32,
    /// Fog severity of the heavy-rain haze pass.
    pub heavy_rain_haze: f32,
    /// Night luminance factor is drawn uniformly from this range.
    pub night_luma: [f32; 2],
    /// Probability that an individual light is off at night.
    pub light_off_prob: f32,
    pub haze_color: [f32; 3],
}

impl Default for EffectParams {
    fn default() -> Self {
        EffectParams {
            heavy_rain_threshold: 0.8,
            heavy_rain_haze: 0.2,
            night_luma: [0.15, 0.35],
            light_off_prob: 0.2,
            haze_color: [0.75, 0.75, 0.77],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub weather: WeatherCondition,
    pub time: TimeOfDay,
    pub severity: f32,
    #[serde(default)]
    pub counts: ObjectCounts,
    /// `[height, width]` in pixels.
    pub resolution: [usize; 2],
    #[serde(default)]
    pub layout: SceneLayout,
    #[serde(default)]
    pub effects: EffectParams,
}

impl SceneSpec {
    pub fn new(seed: u64, weather: WeatherCondition, time: TimeOfDay) -> Self {
        SceneSpec {
            seed,
            weather,
            time,
            severity: 0.5,
            counts: ObjectCounts::default(),
            resolution: [64, 64],
            layout: SceneLayout::default(),
            effects: EffectParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(invalid_spec("severity", format!("{} not in [0, 1]", self.severity)));
        }
        let [h, w] = self.resolution;
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(invalid_spec("resolution", format!("{h}x{w} below {MIN_SIDE}x{MIN_SIDE}")));
        }
        let SceneLayout { horizon, road_band } = self.layout;
        if !(horizon > 0.0 && horizon < 1.0) {
            return Err(invalid_spec("layout.horizon", format!("{horizon} not in (0, 1)")));
        }
        if !(road_band > 0.0 && road_band < 1.0) {
            return Err(invalid_spec("layout.road_band", format!("{road_band} not in (0, 1)")));
        }
        if horizon + road_band >= 1.0 {
            return Err(invalid_spec("layout", "horizon + road_band must be below 1"));
        }
        let [lo, hi] = self.effects.night_luma;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(invalid_spec("effects.night_luma", format!("bad range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.effects.light_off_prob) {
            return Err(invalid_spec("effects.light_off_prob", "not a probability"));
        }
        Ok(())
    }
}

/// A light source composited as a bloom disk at night.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightSource {
    pub row: f32,
    pub col: f32,
    pub radius: f32,
}

/// Rows that partition the frame into sky / backdrop / sidewalk / road.
#[derive(Debug, Clone, Copy)]
struct Bands {
    horizon: usize,
    sidewalk_top: usize,
    road_top: usize,
}

impl Bands {
    fn new(h: usize, layout: SceneLayout) -> Self {
        let horizon = ((layout.horizon * h as f32).round() as usize).clamp(1, h - 3);
        let road_top = (h - (layout.road_band * h as f32).round() as usize).clamp(horizon + 2, h - 1);
        let sidewalk = (((road_top - horizon) as f32) * 0.4).round().max(2.0) as usize;
        let sidewalk_top = road_top.saturating_sub(sidewalk).max(horizon + 1);
        Bands { horizon, sidewalk_top, road_top }
    }
}

struct Canvas {
    image: Image,
    mask: Mask,
}

impl Canvas {
    fn paint(&mut self, row: i64, col: i64, rgb: [f32; 3], class: SemanticClass) {
        if row < 0 || col < 0 || row >= self.image.height as i64 || col >= self.image.width as i64 {
            return;
        }
        let (r, c) = (row as usize, col as usize);
        self.image.set_pixel(r, c, rgb);
        self.mask.set(r, c, class.index());
    }

    fn rect(&mut self, top: i64, left: i64, bottom: i64, right: i64, rgb: [f32; 3], class: SemanticClass) {
        for r in top..bottom {
            for c in left..right {
                self.paint(r, c, rgb, class);
            }
        }
    }

    fn ellipse(&mut self, cy: f32, cx: f32, ry: f32, rx: f32, rgb: [f32; 3], class: SemanticClass) {
        let (r0, r1) = ((cy - ry).floor() as i64, (cy + ry).ceil() as i64);
        let (c0, c1) = ((cx - rx).floor() as i64, (cx + rx).ceil() as i64);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dy = (r as f32 + 0.5 - cy) / ry.max(0.5);
                let dx = (c as f32 + 0.5 - cx) / rx.max(0.5);
                if dx * dx + dy * dy <= 1.0 {
                    self.paint(r, c, rgb, class);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, rgb: [f32; 3], amount: f32) -> [f32; 3] {
    let shift = rng.random_range(-amount..=amount);
    rgb.map(|v| (v + shift + rng.random_range(-amount..=amount) * 0.5).clamp(0.0, 1.0))
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[T]) -> T {
    options[rng.random_range(0..options.len())]
}

/// Renders the clean scene and returns it with the positions of its traffic lights.
fn render(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Canvas, Vec<LightSource>) {
    let [h, w] = spec.resolution;
    let (hf, wf) = (h as f32, w as f32);
    let bands = Bands::new(h, spec.layout);
    let mut canvas = Canvas { image: Image::new(h, w), mask: Mask::filled(h, w, IGNORE_INDEX) };

    // Unlabeled backdrop between the horizon and the sidewalk.
    let terrain = jitter(rng, [0.42, 0.40, 0.33], 0.05);
    for r in bands.horizon..bands.sidewalk_top {
        for c in 0..w {
            canvas.image.set_pixel(r, c, terrain);
        }
    }

    let sky_top = jitter(rng, [0.30, 0.50, 0.85], 0.06);
    let sky_low = jitter(rng, [0.70, 0.80, 0.92], 0.04);
    for r in 0..bands.horizon {
        let t = r as f32 / bands.horizon as f32;
        let rgb = [0, 1, 2].map(|i| sky_top[i] * (1.0 - t) + sky_low[i] * t);
        for c in 0..w {
            canvas.paint(r as i64, c as i64, rgb, SemanticClass::Sky);
        }
    }

    let base = bands.sidewalk_top as i64;
    for _ in 0..spec.counts.buildings {
        let bw = rng.random_range(wf / 8.0..wf / 3.0);
        let left = rng.random_range(-bw / 4.0..wf - bw * 0.75) as i64;
        let top = rng.random_range(hf * 0.05..bands.horizon as f32 + 1.0) as i64;
        let right = left + bw as i64;
        let wall = pick(rng, &[[0.55, 0.52, 0.50], [0.60, 0.45, 0.35], [0.45, 0.45, 0.50], [0.72, 0.66, 0.55]]);
        let wall = jitter(rng, wall, 0.05);
        canvas.rect(top, left, base, right, wall, SemanticClass::Building);
        let window = if rng.random_bool(0.5) { [0.15, 0.18, 0.25] } else { [0.80, 0.82, 0.75] };
        let step = (wf / 16.0).max(3.0) as i64;
        let mut r = top + step / 2;
        while r + 1 < base - 1 {
            let mut c = left + step / 2;
            while c + 1 < right - 1 {
                canvas.rect(r, c, r + (step / 2).max(1), c + (step / 2).max(1), window, SemanticClass::Building);
                c += step;
            }
            r += step;
        }
    }

    let blobs = rng.random_range(1..=3);
    for _ in 0..blobs {
        let ry = rng.random_range(hf / 14.0..hf / 7.0);
        let rx = ry * rng.random_range(0.8..1.6);
        let cy = bands.sidewalk_top as f32 - ry * rng.random_range(0.4..1.0);
        let cx = rng.random_range(0.0..wf);
        let green = jitter(rng, [0.25, 0.50, 0.18], 0.06);
        canvas.ellipse(cy, cx, ry, rx, green, SemanticClass::Vegetation);
        let shade = green.map(|v| v * 0.7);
        canvas.ellipse(cy + ry * 0.3, cx + rx * 0.2, ry * 0.45, rx * 0.45, shade, SemanticClass::Vegetation);
    }

    let asphalt = jitter(rng, [0.30, 0.30, 0.32], 0.04);
    for r in bands.road_top..h {
        for c in 0..w {
            canvas.paint(r as i64, c as i64, asphalt, SemanticClass::Road);
        }
    }
    let lane_row = (bands.road_top + h) / 2;
    let dash = (wf / 10.0).max(3.0) as i64;
    let mut c = rng.random_range(0..dash);
    while c < w as i64 {
        canvas.rect(lane_row as i64, c, lane_row as i64 + 1, c + dash / 2, [0.85, 0.85, 0.80], SemanticClass::Road);
        c += dash;
    }

    let paving = jitter(rng, [0.62, 0.58, 0.54], 0.05);
    for r in bands.sidewalk_top..bands.road_top {
        for c in 0..w {
            let seam = c % 6 == 0;
            let rgb = if seam { paving.map(|v| v * 0.85) } else { paving };
            canvas.paint(r as i64, c as i64, rgb, SemanticClass::Sidewalk);
        }
    }
    let curb = (bands.road_top - 1) as i64;
    canvas.rect(curb, 0, curb + 1, w as i64, paving.map(|v| v * 1.2), SemanticClass::Sidewalk);

    let pole_w = (wf / 64.0).round().max(1.0) as i64;
    let sidewalk_rows = bands.sidewalk_top as f32..bands.road_top as f32;
    let pole_gray = [0.48, 0.48, 0.50];
    let draw_pole = |canvas: &mut Canvas, rng: &mut ChaCha8Rng, height: f32| -> (i64, i64, i64) {
        let col = rng.random_range(0.0..wf - pole_w as f32) as i64;
        let foot = rng.random_range(sidewalk_rows.clone()) as i64;
        let top = foot - height as i64;
        canvas.rect(top, col, foot, col + pole_w, jitter(rng, pole_gray, 0.04), SemanticClass::Pole);
        (top, col, foot)
    };

    for _ in 0..spec.counts.poles {
        let height = rng.random_range(hf * 0.3..hf * 0.5);
        draw_pole(&mut canvas, rng, height);
    }

    let mut lights = Vec::new();
    for _ in 0..spec.counts.traffic_lights {
        let height = rng.random_range(hf * 0.25..hf * 0.4);
        let (top, col, _) = draw_pole(&mut canvas, rng, height);
        let bw = (wf / 28.0).round().max(2.0) as i64;
        let bh = bw * 3;
        let left = col + pole_w / 2 - bw / 2;
        let box_top = top - bh;
        canvas.rect(box_top, left, top, left + bw, [0.10, 0.10, 0.10], SemanticClass::TrafficLight);
        let lamp = rng.random_range(0..3);
        let colors = [[0.95, 0.15, 0.10], [0.95, 0.75, 0.10], [0.20, 0.90, 0.35]];
        let lamp_top = box_top + lamp * bw;
        canvas.rect(lamp_top, left, lamp_top + bw, left + bw, colors[lamp as usize], SemanticClass::TrafficLight);
        lights.push(LightSource {
            row: lamp_top as f32 + bw as f32 / 2.0,
            col: left as f32 + bw as f32 / 2.0,
            radius: bw as f32,
        });
    }

    for _ in 0..spec.counts.traffic_signs {
        let height = rng.random_range(hf * 0.15..hf * 0.28);
        let (top, col, _) = draw_pole(&mut canvas, rng, height);
        let size = (wf / 18.0).max(3.0);
        let face = pick(rng, &[[0.85, 0.10, 0.10], [0.10, 0.25, 0.75], [0.95, 0.80, 0.10]]);
        let cy = top as f32 - size / 2.0;
        let cx = col as f32 + pole_w as f32 / 2.0;
        if rng.random_bool(0.5) {
            canvas.ellipse(cy, cx, size / 2.0, size / 2.0, face, SemanticClass::TrafficSign);
        } else {
            let half = (size / 2.0) as i64;
            canvas.rect(
                cy as i64 - half,
                cx as i64 - half,
                cy as i64 + half + 1,
                cx as i64 + half + 1,
                face,
                SemanticClass::TrafficSign,
            );
        }
        canvas.ellipse(cy, cx, size / 5.0, size / 5.0, [0.92, 0.92, 0.92], SemanticClass::TrafficSign);
    }

    for _ in 0..spec.counts.persons {
        let ph = rng.random_range(hf * 0.12..hf * 0.22);
        let pw = (ph / 3.0).max(2.0);
        let foot = rng.random_range(bands.sidewalk_top as f32..bands.road_top as f32 + 2.0);
        let cx = rng.random_range(pw..wf - pw);
        let skin = pick(rng, &[[0.85, 0.67, 0.55], [0.55, 0.38, 0.28], [0.95, 0.80, 0.70]]);
        let skin = jitter(rng, skin, 0.03);
        let shirt = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let trousers = jitter(rng, [0.15, 0.15, 0.25], 0.05);
        let left = (cx - pw / 2.0) as i64;
        let right = (cx + pw / 2.0).ceil() as i64;
        let hip = (foot - ph * 0.45) as i64;
        let shoulder = (foot - ph * 0.8) as i64;
        canvas.rect(hip, left, foot as i64, right, trousers, SemanticClass::Person);
        canvas.rect(shoulder, left, hip, right, shirt, SemanticClass::Person);
        let head = ph * 0.1;
        canvas.ellipse(shoulder as f32 - head, cx, head, head, skin, SemanticClass::Person);
    }

    // Cars further down the frame are nearer, larger, and painted last.
    let mut cars: Vec<(f32, f32)> = (0..spec.counts.cars)
        .map(|_| (rng.random_range(bands.road_top as f32 + 2.0..hf), rng.random_range(0.0..wf)))
        .collect();
    cars.sort_by(|a, b| a.0.total_cmp(&b.0));
    let span = (hf - bands.horizon as f32).max(1.0);
    for (bottom, cx) in cars {
        let scale = ((bottom - bands.horizon as f32) / span).clamp(0.3, 1.0);
        let cw = wf * rng.random_range(0.18..0.3) * scale;
        let ch = cw * 0.45;
        let body = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let left = (cx - cw / 2.0) as i64;
        let right = (cx + cw / 2.0) as i64;
        let top = (bottom - ch) as i64;
        let waist = (bottom - ch * 0.55) as i64;
        canvas.rect(waist, left, (bottom - ch * 0.12) as i64, right, body, SemanticClass::Car);
        let inset = (cw * 0.2) as i64;
        canvas.rect(top, left + inset, waist, right - inset, body, SemanticClass::Car);
        canvas.rect(top + 1, left + inset + 1, waist, right - inset - 1, [0.12, 0.15, 0.2], SemanticClass::Car);
        let wheel = (ch * 0.18).max(1.0);
        for wx in [left as f32 + cw * 0.22, right as f32 - cw * 0.22] {
            canvas.ellipse(bottom - wheel, wx, wheel, wheel, [0.05, 0.05, 0.05], SemanticClass::Car);
        }
    }

    let noise = Normal::new(0.0f32, 0.02).unwrap();
    for v in &mut canvas.image.data {
        *v += noise.sample(rng);
    }
    canvas.image.clamp();
    (canvas, lights)
}

fn road_top_row(height: usize, layout: SceneLayout) -> usize {
    Bands::new(height, layout).road_top
}

fn box_blur(image: &Image) -> Image {
    let (h, w) = (image.height, image.width);
    let mut out = Image::new(h, w);
    for r in 0..h {
        for c in 0..w {
            let mut acc = [0.0f32; 3];
            let mut n = 0.0;
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let p = image.pixel(rr, cc);
                    for k in 0..3 {
                        acc[k] += p[k];
                    }
                    n += 1.0;
                }
            }
            out.set_pixel(r, c, acc.map(|v| v / n));
        }
    }
    out
}

/// Depth-weighted haze plus a mild low-pass. Rows above the road band count
/// as far away; inside the band haze fades toward the bottom edge.
pub fn apply_fog(image: &mut Image, severity: f32, layout: SceneLayout, haze: [f32; 3]) {
    if severity <= 0.0 {
        return;
    }
    let (h, w) = (image.height, image.width);
    let road_top = road_top_row(h, layout);
    for r in 0..h {
        let depth = if r < road_top { 1.0 } else { (h - 1 - r) as f32 / (h - 1 - road_top).max(1) as f32 };
        let alpha = severity * 0.85 * (0.45 + 0.55 * depth);
        for c in 0..w {
            image.blend_pixel(r, c, haze, alpha);
        }
    }
    let blurred = box_blur(image);
    let mix = 0.6 * severity;
    for (v, b) in image.data.iter_mut().zip(&blurred.data) {
        *v = (1.0 - mix) * *v + mix * b;
    }
}

fn is_ground(class: u8) -> bool {
    class == SemanticClass::Road.index() || class == SemanticClass::Sidewalk.index()
}

/// Composites a weather condition onto `image`. The mask is consulted, never
/// written.
pub fn apply_weather(
    image: &mut Image,
    mask: &Mask,
    weather: WeatherCondition,
    severity: f32,
    layout: SceneLayout,
    params: &EffectParams,
    rng: &mut ChaCha8Rng,
) {
    let (h, w) = (image.height, image.width);
    let s = severity.clamp(0.0, 1.0);
    match weather {
        WeatherCondition::Normal => {}
        WeatherCondition::Fog => apply_fog(image, s, layout, params.haze_color),
        WeatherCondition::Rain => {
            let streaks = (s * (h * w) as f32 / 40.0).round() as usize;
            let len = (h / 10).max(3) as i64;
            let drop = [0.82, 0.84, 0.90];
            for _ in 0..streaks {
                let r0 = rng.random_range(-len..h as i64);
                let c0 = rng.random_range(0..w as i64 + len / 2);
                for k in 0..len {
                    let (r, c) = (r0 + k, c0 - k / 2);
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        image.blend_pixel(r as usize, c as usize, drop, 0.3);
                    }
                }
            }
            let splash = 0.08 * s as f64;
            for r in 0..h {
                for c in 0..w {
                    if is_ground(mask.get(r, c)) && rng.random_bool(splash) {
                        image.blend_pixel(r, c, [0.9, 0.9, 0.95], 0.55);
                    }
                }
            }
            if s >= params.heavy_rain_threshold {
                apply_fog(image, params.heavy_rain_haze, layout, params.haze_color);
            }
        }
        WeatherCondition::Snow => {
            for r in 0..h {
                for c in 0..w {
                    if is_ground(mask.get(r, c)) {
                        image.blend_pixel(r, c, [0.95, 0.95, 0.97], 0.6 * s);
                    }
                }
            }
            let flakes = (s * (h * w) as f32 / 25.0).round() as usize;
            for _ in 0..flakes {
                let r = rng.random_range(0..h);
                let c = rng.random_range(0..w);
                image.blend_pixel(r, c, [1.0, 1.0, 1.0], 0.85);
                if rng.random_bool(0.3) && r + 1 < h && c + 1 < w {
                    image.blend_pixel(r + 1, c, [1.0, 1.0, 1.0], 0.6);
                    image.blend_pixel(r, c + 1, [1.0, 1.0, 1.0], 0.6);
                }
            }
        }
    }
    image.clamp();
}

/// Night rendering: global dimming with a blue cast, then bloom around each
/// light that is not switched off.
pub fn apply_time(
    image: &mut Image,
    time: TimeOfDay,
    lights: &[LightSource],
    params: &EffectParams,
    rng: &mut ChaCha8Rng,
) {
    if time == TimeOfDay::Day {
        return;
    }
    let [lo, hi] = params.night_luma;
    let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let cast = [0.85, 0.95, 1.15];
    for px in image.data.chunks_exact_mut(3) {
        for k in 0..3 {
            px[k] *= factor * cast[k];
        }
    }
    let (h, w) = (image.height, image.width);
    for light in lights {
        let off = rng.random_bool(params.light_off_prob as f64);
        let intensity = rng.random_range(0.5f32..1.0);
        let reach = light.radius * rng.random_range(1.5f32..2.5);
        if off {
            continue;
        }
        let r0 = (light.row - reach).floor().max(0.0) as usize;
        let r1 = ((light.row + reach).ceil() as usize).min(h);
        let c0 = (light.col - reach).floor().max(0.0) as usize;
        let c1 = ((light.col + reach).ceil() as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                let d = ((r as f32 + 0.5 - light.row).powi(2) + (c as f32 + 0.5 - light.col).powi(2)).sqrt();
                if d < reach {
                    let glow = intensity * (1.0 - d / reach).powi(2);
                    let p = image.pixel(r, c);
                    let warm = [1.0, 0.9, 0.65];
                    image.set_pixel(r, c, [0, 1, 2].map(|k| p[k] + glow * warm[k]));
                }
            }
        }
    }
    image.clamp();
}

fn effect_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders one labeled scene. The result is tagged `AdverseSynthetic`;
/// callers building a standard set re-tag it.
pub fn generate_scene(spec: &SceneSpec) -> Result<LabeledSample, SceneError> {
    spec.validate()?;
    let mut rng = effect_rng(spec.seed, 0);
    let (mut canvas, lights) = render(spec, &mut rng);
    let mut weather_rng = effect_rng(spec.seed, 1);
    apply_weather(
        &mut canvas.image,
        &canvas.mask,
        spec.weather,
        spec.severity,
        spec.layout,
        &spec.effects,
        &mut weather_rng,
    );
    let mut time_rng = effect_rng(spec.seed, 2);
    apply_time(&mut canvas.image, spec.time, &lights, &spec.effects, &mut time_rng);
    canvas.image.quantize();
    Ok(LabeledSample {
        id: format!("scene_{:016x}", spec.seed),
        image: canvas.image,
        mask: canvas.mask,
        weather: spec.weather,
        time: spec.time,
        domain: DomainTag::AdverseSynthetic,
    })
}

/// Renders the clean (pre-effect) scene with its light positions. Useful for
/// inspecting effects in isolation.
pub fn render_clean(spec: &SceneSpec) -> Result<(Image, Mask, Vec<LightSource>), SceneError> {
    spec.validate()?;
    let mut rng = effect_rng(spec.seed, 0);
    let (canvas, lights) = render(spec, &mut rng);
    Ok((canvas.image, canvas.mask, lights))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherWeights {
    pub normal: f64,
    pub rain: f64,
    pub fog: f64,
    pub snow: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeWeights {
    pub day: f64,
    pub night: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributeWeights {
    pub weather: WeatherWeights,
    pub time: TimeWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityRange {
    pub lo: f32,
    pub hi: f32,
}

impl Default for SeverityRange {
    fn default() -> Self {
        SeverityRange { lo: 0.2, hi: 1.0 }
    }
}

/// Either a fixed object count or an inclusive `[lo, hi]` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CountRange {
    Fixed(u32),
    Range([u32; 2]),
}

impl CountRange {
    fn bounds(self) -> (u32, u32) {
        match self {
            CountRange::Fixed(n) => (n, n),
            CountRange::Range([lo, hi]) => (lo, hi),
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> u32 {
        let (lo, hi) = self.bounds();
        rng.random_range(lo..=hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanCounts {
    pub cars: CountRange,
    pub persons: CountRange,
    pub poles: CountRange,
    pub traffic_lights: CountRange,
    pub traffic_signs: CountRange,
    pub buildings: CountRange,
}

impl Default for PlanCounts {
    fn default() -> Self {
        PlanCounts {
            cars: CountRange::Range([1, 3]),
            persons: CountRange::Range([0, 3]),
            poles: CountRange::Range([1, 3]),
            traffic_lights: CountRange::Range([0, 2]),
            traffic_signs: CountRange::Range([0, 2]),
            buildings: CountRange::Range([2, 5]),
        }
    }
}

fn default_layout_jitter() -> f32 {
    0.04
}

fn default_domain() -> DomainTag {
    DomainTag::AdverseSynthetic
}

fn default_prefix() -> String {
    "s".to_string()
}

/// Recipe for a whole synthetic dataset. Each sample draws its attributes
/// from its own seed, derived from `master_seed` and the sample index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub count: usize,
    pub master_seed: u64,
    /// `[height, width]` in pixels.
    pub resolution: [usize; 2],
    pub weights: AttributeWeights,
    #[serde(default)]
    pub severity: SeverityRange,
    #[serde(default)]
    pub counts: PlanCounts,
    #[serde(default)]
    pub layout: SceneLayout,
    #[serde(default = "default_layout_jitter")]
    pub layout_jitter: f32,
    #[serde(default)]
    pub effects: EffectParams,
    #[serde(default = "default_domain")]
    pub domain: DomainTag,
    /// Redraw any sample whose attributes come out as (normal, day).
    #[serde(default)]
    pub adverse_only: bool,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

impl GenerationPlan {
    pub fn new(count: usize, master_seed: u64, resolution: [usize; 2], weights: AttributeWeights) -> Self {
        GenerationPlan {
            count,
            master_seed,
            resolution,
            weights,
            severity: SeverityRange::default(),
            counts: PlanCounts::default(),
            layout: SceneLayout::default(),
            layout_jitter: default_layout_jitter(),
            effects: EffectParams::default(),
            domain: default_domain(),
            adverse_only: false,
            id_prefix: default_prefix(),
        }
    }

    /// Normal/day scenes tagged as the standard real-domain stand-in.
    pub fn standard(count: usize, master_seed: u64, resolution: [usize; 2]) -> Self {
        let weights = AttributeWeights {
            weather: WeatherWeights { normal: 1.0, ..Default::default() },
            time: TimeWeights { day: 1.0, night: 0.0 },
        };
        GenerationPlan { domain: DomainTag::StandardReal, ..Self::new(count, master_seed, resolution, weights) }
    }

    /// Rain / fog / snow / night scenes; (normal, day) is excluded.
    pub fn adverse(count: usize, master_seed: u64, resolution: [usize; 2]) -> Self {
        let weights = AttributeWeights {
            weather: WeatherWeights { normal: 1.0, rain: 1.0, fog: 1.0, snow: 1.0 },
            time: TimeWeights { day: 3.0, night: 1.0 },
        };
        GenerationPlan { adverse_only: true, ..Self::new(count, master_seed, resolution, weights) }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let ww = self.weights.weather;
        let weather = [ww.normal, ww.rain, ww.fog, ww.snow];
        let time = [self.weights.time.day, self.weights.time.night];
        for (field, weights) in [("weights.weather", &weather[..]), ("weights.time", &time[..])] {
            if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(invalid_plan(field, "weights must be finite and non-negative"));
            }
            if weights.iter().sum::<f64>() <= 0.0 {
                return Err(invalid_plan(field, "weights are all zero"));
            }
        }
        if self.adverse_only && weather[1..].iter().all(|w| *w == 0.0) && time[1] == 0.0 {
            return Err(invalid_plan("adverse_only", "weights only allow (normal, day)"));
        }
        let SeverityRange { lo, hi } = self.severity;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid_plan("severity", format!("[{lo}, {hi}] is not a sub-range of [0, 1]")));
        }
        let c = self.counts;
        for (field, range) in [
            ("counts.cars", c.cars),
            ("counts.persons", c.persons),
            ("counts.poles", c.poles),
            ("counts.traffic_lights", c.traffic_lights),
            ("counts.traffic_signs", c.traffic_signs),
            ("counts.buildings", c.buildings),
        ] {
            let (lo, hi) = range.bounds();
            if lo > hi {
                return Err(invalid_plan(field, format!("empty range [{lo}, {hi}]")));
            }
        }
        if !(0.0..0.2).contains(&self.layout_jitter) {
            return Err(invalid_plan("layout_jitter", "must be in [0, 0.2)"));
        }
        if self.id_prefix.is_empty() || self.id_prefix.contains(['/', '\\']) {
            return Err(invalid_plan("id_prefix", "must be a non-empty file-name prefix"));
        }
        // A representative spec catches resolution / layout / effect problems up front.
        let spec = SceneSpec {
            seed: self.master_seed,
            weather: WeatherCondition::Normal,
            time: TimeOfDay::Day,
            severity: lo,
            counts: ObjectCounts::default(),
            resolution: self.resolution,
            layout: self.layout,
            effects: self.effects,
        };
        spec.validate().map_err(|e| match e {
            SceneError::InvalidSpec { field, reason } => SceneError::InvalidPlan { field, reason },
            other => other,
        })?;
        let j = self.layout_jitter;
        if self.layout.horizon - j <= 0.0
            || self.layout.road_band - j <= 0.0
            || self.layout.horizon + self.layout.road_band + 2.0 * j >= 1.0
        {
            return Err(invalid_plan("layout_jitter", "jittered layout may leave the valid range"));
        }
        Ok(())
    }

    pub fn sample_id(&self, index: usize) -> String {
        format!("{}{:05}", self.id_prefix, index)
    }

    /// Scene description of sample `index`, fully determined by the plan.
    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        let seed = sample_seed(self.master_seed, index as u64);
        let mut rng = effect_rng(seed, 3);
        let ww = self.weights.weather;
        let tw = self.weights.time;
        let (weather, time) = loop {
            let weather = weighted(&mut rng, &[ww.normal, ww.rain, ww.fog, ww.snow]);
            let time = weighted(&mut rng, &[tw.day, tw.night]);
            let (weather, time) = (WeatherCondition::ALL[weather], TimeOfDay::ALL[time]);
            if !(self.adverse_only && weather == WeatherCondition::Normal && time == TimeOfDay::Day) {
                break (weather, time);
            }
        };
        let SeverityRange { lo, hi } = self.severity;
        let severity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let c = self.counts;
        let counts = ObjectCounts {
            cars: c.cars.sample(&mut rng),
            persons: c.persons.sample(&mut rng),
            poles: c.poles.sample(&mut rng),
            traffic_lights: c.traffic_lights.sample(&mut rng),
            traffic_signs: c.traffic_signs.sample(&mut rng),
            buildings: c.buildings.sample(&mut rng),
        };
        let j = self.layout_jitter;
        let layout = if j > 0.0 {
            SceneLayout {
                horizon: self.layout.horizon + rng.random_range(-j..=j),
                road_band: self.layout.road_band + rng.random_range(-j..=j),
            }
        } else {
            self.layout
        };
        SceneSpec { seed, weather, time, severity, counts, resolution: self.resolution, layout, effects: self.effects }
    }

    pub fn generate_sample(&self, index: usize) -> Result<LabeledSample, SceneError> {
        let mut sample = generate_scene(&self.scene_spec(index))?;
        sample.id = self.sample_id(index);
        sample.domain = self.domain;
        Ok(sample)
    }
}

fn weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// SplitMix64 finalizer over (master seed, index).
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates every sample of `plan` in memory, in index order.
pub fn generate_samples(plan: &GenerationPlan) -> Result<Vec<LabeledSample>, SceneError> {
    plan.validate()?;
    (0..plan.count).map(|i| plan.generate_sample(i)).collect()
}

/// Generates the plan's samples and writes them in the dataset layout.
pub fn generate_dataset(plan: &GenerationPlan, out_root: &Path) -> Result<DatasetManifest, SceneError> {
    plan.validate()?;
    create_layout(out_root)?;
    let mut records = Vec::with_capacity(plan.count);
    for i in 0..plan.count {
        let sample = plan.generate_sample(i)?;
        records.push(write_sample_files(out_root, &sample)?);
    }
    let manifest = DatasetManifest { schema_version: SCHEMA_VERSION, samples: records };
    write_manifest(out_root, &manifest)?;
    Ok(manifest)
}

/// Sample counts per (weather, time) cell, in enumeration order.
pub fn attribute_histogram<'a>(cells: impl IntoIterator<Item = (WeatherCondition, TimeOfDay)> + 'a) -> [[usize; 2]; 4] {
    let mut hist = [[0; 2]; 4];
    for (weather, time) in cells {
        hist[weather.index()][time.index()] += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, weather: WeatherCondition, time: TimeOfDay) -> SceneSpec {
        SceneSpec::new(seed, weather, time)
    }

    #[test]
    fn scenes_are_seed_deterministic() {
        let a = generate_scene(&spec(7, WeatherCondition::Normal, TimeOfDay::Day)).unwrap();
        let b = generate_scene(&spec(7, WeatherCondition::Normal, TimeOfDay::Day)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec(8, WeatherCondition::Normal, TimeOfDay::Day)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn absent_primitive_leaves_no_pixels() {
        for seed in 0..20 {
            let mut s = spec(seed, WeatherCondition::Rain, TimeOfDay::Night);
            s.counts.persons = 0;
            let sample = generate_scene(&s).unwrap();
            assert!(!sample.mask.data.contains(&SemanticClass::Person.index()));
        }
    }

    #[test]
    fn structural_postconditions() {
        for seed in 0..10 {
            let mut s = spec(seed, WeatherCondition::Snow, TimeOfDay::Day);
            s.resolution = [40, 72];
            let sample = generate_scene(&s).unwrap();
            assert_eq!((sample.image.height, sample.image.width), (40, 72));
            assert_eq!((sample.mask.height, sample.mask.width), (40, 72));
            sample.validate().unwrap();
            assert!(sample.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = spec(1, WeatherCondition::Fog, TimeOfDay::Day);
        s.severity = 1.5;
        assert!(matches!(generate_scene(&s), Err(SceneError::InvalidSpec { field: "severity", .. })));
        let mut s = spec(1, WeatherCondition::Fog, TimeOfDay::Day);
        s.resolution = [16, 64];
        assert!(matches!(generate_scene(&s), Err(SceneError::InvalidSpec { field: "resolution", .. })));
        let mut s = spec(1, WeatherCondition::Fog, TimeOfDay::Day);
        s.layout = SceneLayout { horizon: 0.6, road_band: 0.5 };
        assert!(matches!(generate_scene(&s), Err(SceneError::InvalidSpec { field: "layout", .. })));
    }

    #[test]
    fn normal_weather_and_day_are_identity() {
        let (img, mask, lights) = render_clean(&spec(3, WeatherCondition::Normal, TimeOfDay::Day)).unwrap();
        let mut out = img.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        apply_weather(
            &mut out,
            &mask,
            WeatherCondition::Normal,
            0.5,
            SceneLayout::default(),
            &EffectParams::default(),
            &mut rng,
        );
        apply_time(&mut out, TimeOfDay::Day, &lights, &EffectParams::default(), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn heavy_rain_pulls_toward_haze() {
        // Same rain draws with and without the heavy-rain haze pass.
        let params = EffectParams::default();
        let no_haze = EffectParams { heavy_rain_threshold: 2.0, ..params };
        let haze = params.haze_color;
        let dist = |img: &Image| {
            let mut mean = [0.0f64; 3];
            for p in img.data.chunks_exact(3) {
                for k in 0..3 {
                    mean[k] += p[k] as f64;
                }
            }
            let n = (img.data.len() / 3) as f64;
            (0..3).map(|k| (mean[k] / n - haze[k] as f64).abs()).sum::<f64>()
        };
        for seed in 0..10 {
            let (img, mask, _) = render_clean(&spec(seed, WeatherCondition::Rain, TimeOfDay::Day)).unwrap();
            let run = |p: &EffectParams, s: f32| {
                let mut out = img.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                apply_weather(&mut out, &mask, WeatherCondition::Rain, s, SceneLayout::default(), p, &mut rng);
                out
            };
            assert!(dist(&run(&params, 0.9)) < dist(&run(&no_haze, 0.9)));
            let below = run(&params, 0.5);
            assert_eq!(below, run(&no_haze, 0.5));
        }
    }

    #[test]
    fn night_dims_and_is_deterministic() {
        let (img, _, lights) = render_clean(&spec(11, WeatherCondition::Normal, TimeOfDay::Night)).unwrap();
        let run = || {
            let mut out = img.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            apply_time(&mut out, TimeOfDay::Night, &lights, &EffectParams::default(), &mut rng);
            out
        };
        let a = run();
        assert_eq!(a, run());
        assert!(img.mean_luma() > 0.1);
        assert!(a.mean_luma() < img.mean_luma());
    }

    #[test]
    fn every_light_off_leaves_pure_dimming() {
        let params = EffectParams { light_off_prob: 1.0, night_luma: [0.2, 0.2], ..Default::default() };
        let img = Image::filled(32, 32, [0.5, 0.5, 0.5]);
        let mut out = img.clone();
        let lights = [LightSource { row: 10.0, col: 10.0, radius: 3.0 }];
        apply_time(&mut out, TimeOfDay::Night, &lights, &params, &mut ChaCha8Rng::seed_from_u64(1));
        let p = out.pixel(10, 10);
        assert!((p[0] - 0.5 * 0.2 * 0.85).abs() < 1e-6);
        assert!((p[2] - 0.5 * 0.2 * 1.15).abs() < 1e-6);
    }

    #[test]
    fn plan_json_keys() {
        let text = r#"{
            "count": 3, "master_seed": 5, "resolution": [48, 48],
            "weights": {"weather": {"snow": 1}, "time": {"night": 1}},
            "severity": {"lo": 0.3, "hi": 0.6},
            "counts": {"cars": 2, "persons": [0, 4]}
        }"#;
        let plan: GenerationPlan = serde_json::from_str(text).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.counts.cars, CountRange::Fixed(2));
        assert_eq!(plan.counts.persons, CountRange::Range([0, 4]));
        assert_eq!(plan.counts.buildings, PlanCounts::default().buildings);
        let samples = generate_samples(&plan).unwrap();
        assert!(samples.iter().all(|s| s.weather == WeatherCondition::Snow && s.time == TimeOfDay::Night));
        assert!(samples.iter().all(|s| (0.3..=0.6).contains(&plan.scene_spec(0).severity) && s.mask.height == 48));
    }

    #[test]
    fn plan_rejects_zero_weights() {
        let plan = GenerationPlan::new(1, 0, [32, 32], AttributeWeights::default());
        assert!(matches!(plan.validate(), Err(SceneError::InvalidPlan { field: "weights.weather", .. })));
    }

    #[test]
    fn adverse_plans_exclude_standard_cells() {
        let plan = GenerationPlan::adverse(60, 4, [32, 32]);
        for i in 0..plan.count {
            let s = plan.scene_spec(i);
            assert!(!(s.weather == WeatherCondition::Normal && s.time == TimeOfDay::Day));
        }
    }

    #[test]
    fn attribute_proportions_follow_weights() {
        let weights = AttributeWeights {
            weather: WeatherWeights { normal: 1.0, rain: 1.0, fog: 2.0, snow: 0.0 },
            time: TimeWeights { day: 3.0, night: 1.0 },
        };
        let plan = GenerationPlan::new(4000, 12, [32, 32], weights);
        let hist = attribute_histogram((0..plan.count).map(|i| {
            let s = plan.scene_spec(i);
            (s.weather, s.time)
        }));
        let weather: Vec<f64> = hist.iter().map(|r| (r[0] + r[1]) as f64 / 4000.0).collect();
        assert!((weather[0] - 0.25).abs() < 0.03);
        assert!((weather[2] - 0.5).abs() < 0.03);
        assert_eq!(weather[3], 0.0);
        let night: usize = hist.iter().map(|r| r[1]).sum();
        assert!((night as f64 / 4000.0 - 0.25).abs() < 0.03);
    }

    #[test]
    fn sample_seeds_differ_per_index() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| sample_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
