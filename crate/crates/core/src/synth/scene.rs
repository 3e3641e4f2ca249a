use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{iou, BoundingBox, GoldBox, GrayImage, ImageRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Generative parameters of one cell class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Poisson mean of the per-scene count.
    pub count_mean: f64,
    pub radius_mean: f64,
    pub radius_std: f64,
    pub intensity_mean: f64,
    pub intensity_std: f64,
    /// Range of the axis ratio `a / b`; `(1, 1)` gives circles.
    pub aspect_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassSpec>,
    pub background: f64,
    pub noise_std: f64,
    /// Largest IoU allowed between two cells of a scene.
    pub max_overlap: f64,
    pub seed: u64,
}

/// Radii below this are redrawn.
pub const MIN_RADIUS: f64 = 1.5;
const PLACEMENT_ATTEMPTS: usize = 50;

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            classes: vec![
                ClassSpec {
                    name: "iel".into(),
                    count_mean: 8.0,
                    radius_mean: 5.0,
                    radius_std: 1.0,
                    intensity_mean: 60.0,
                    intensity_std: 10.0,
                    aspect_range: (1.0, 1.2),
                },
                ClassSpec {
                    name: "en".into(),
                    count_mean: 6.0,
                    radius_mean: 9.0,
                    radius_std: 1.5,
                    intensity_mean: 170.0,
                    intensity_std: 10.0,
                    aspect_range: (1.3, 1.8),
                },
            ],
            background: 230.0,
            noise_std: 8.0,
            max_overlap: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.width == 0 || self.height == 0 {
            return bad("scene size must be positive".into());
        }
        if self.classes.is_empty() {
            return bad("scene needs at least one class".into());
        }
        if !(0.0..=255.0).contains(&self.background) || !(self.noise_std >= 0.0) {
            return bad("background must be in [0, 255] and noise_std >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must be in [0, 1]".into());
        }
        for c in &self.classes {
            let finite = [c.count_mean, c.radius_mean, c.radius_std, c.intensity_mean, c.intensity_std]
                .iter()
                .all(|v| v.is_finite());
            if !finite || c.count_mean < 0.0 || c.radius_std < 0.0 || c.intensity_std < 0.0 {
                return bad(format!("class {:?}: parameters must be finite and non-negative", c.name));
            }
            if c.radius_mean < MIN_RADIUS {
                return bad(format!("class {:?}: radius_mean below {MIN_RADIUS}", c.name));
            }
            if !(0.0..=255.0).contains(&c.intensity_mean) {
                return bad(format!("class {:?}: intensity_mean outside [0, 255]", c.name));
            }
            let (lo, hi) = c.aspect_range;
            if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
                return bad(format!("class {:?}: aspect_range must satisfy 1 <= lo <= hi", c.name));
            }
        }
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.radius_mean == b.radius_mean || a.intensity_mean == b.intensity_mean {
                    return bad(format!(
                        "classes {:?} and {:?} must differ in both radius and intensity means",
                        a.name, b.name
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Same spec with the seed replaced.
    pub fn with_seed(&self, seed: u64) -> SceneSpec {
        SceneSpec { seed, ..self.clone() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SceneSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A placed cell: axis-aligned ellipse with semi-axes `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub intensity: f64,
}

impl Cell {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            left: self.cx - self.a,
            top: self.cy - self.b,
            right: self.cx + self.a,
            bottom: self.cy + self.b,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.a;
        let v = (y - self.cy) / self.b;
        u * u + v * v <= 1.0
    }
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("validated std")
}

fn draw_cells(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<Cell> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut cells: Vec<Cell> = Vec::new();
    for (class_id, c) in spec.classes.iter().enumerate() {
        let count = if c.count_mean > 0.0 {
            Poisson::new(c.count_mean).expect("positive mean").sample(rng) as usize
        } else {
            0
        };
        let radius = normal(c.radius_mean, c.radius_std);
        let intensity = normal(c.intensity_mean, c.intensity_std);
        for _ in 0..count {
            let r = loop {
                let r = radius.sample(rng);
                if r >= MIN_RADIUS {
                    break r;
                }
            };
            let aspect = if c.aspect_range.1 > c.aspect_range.0 {
                rng.random_range(c.aspect_range.0..=c.aspect_range.1)
            } else {
                c.aspect_range.0
            };
            let (mut a, mut b) = (r * aspect.sqrt(), r / aspect.sqrt());
            if rng.random_bool(0.5) {
                std::mem::swap(&mut a, &mut b);
            }
            let value = intensity.sample(rng).clamp(0.0, 255.0);
            if 2.0 * a >= w || 2.0 * b >= h {
                continue;
            }
            for _ in 0..PLACEMENT_ATTEMPTS {
                let cell = Cell {
                    class_id,
                    cx: rng.random_range(a..w - a),
                    cy: rng.random_range(b..h - b),
                    a,
                    b,
                    intensity: value,
                };
                let bbox = cell.bbox();
                if cells.iter().all(|o| iou(&o.bbox(), &bbox) <= spec.max_overlap) {
                    cells.push(cell);
                    break;
                }
            }
        }
    }
    cells
}

/// Cells of the scene with seed `spec.seed`, before rasterization.
pub fn scene_cells(spec: &SceneSpec) -> Vec<Cell> {
    draw_cells(spec, &mut rng_from(spec.seed, &[0]))
}

/// Rasterize a scene: noisy background, then each cell filled with its own
/// intensity plus noise. Pixel `(x, y)` covers the point `(x, y)`, so a
/// cell's gold box is exactly its ellipse's bounding box.
pub fn render_scene(spec: &SceneSpec) -> Result<ImageRecord> {
    spec.validate()?;
    let cells = scene_cells(spec);
    let mut rng = rng_from(spec.seed, &[1]);
    let noise = normal(0.0, spec.noise_std);
    let (w, h) = (spec.width, spec.height);
    let mut pixels = vec![spec.background; w * h];
    for cell in &cells {
        let x0 = (cell.cx - cell.a).ceil().max(0.0) as usize;
        let x1 = ((cell.cx + cell.a).floor() as usize).min(w - 1);
        let y0 = (cell.cy - cell.b).ceil().max(0.0) as usize;
        let y1 = ((cell.cy + cell.b).floor() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if cell.contains(x as f64, y as f64) {
                    pixels[y * w + x] = cell.intensity;
                }
            }
        }
    }
    for p in pixels.iter_mut() {
        *p = (*p + noise.sample(&mut rng)).clamp(0.0, 255.0);
    }
    let gold = cells
        .iter()
        .map(|c| GoldBox {
            class_id: c.class_id,
            bbox: c.bbox(),
        })
        .collect();
    ImageRecord::new(GrayImage::new(w, h, pixels)?, gold)
}

/// `count` scenes with seeds derived from `spec.seed` and the scene index.
/// Scenes are independent, so they are rendered on up to `threads` threads;
/// the output does not depend on the thread count.
pub fn render_dataset(spec: &SceneSpec, count: usize, threads: usize) -> Result<Vec<ImageRecord>> {
    spec.validate()?;
    let seeds: Vec<u64> = (0..count).map(|i| derive_seed(spec.seed, &[i as u64])).collect();
    let threads = threads.max(1).min(count.max(1));
    if threads == 1 {
        return seeds.iter().map(|&s| render_scene(&spec.with_seed(s))).collect();
    }
    let chunk = count.div_ceil(threads);
    let parts: Vec<Result<Vec<ImageRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| render_scene(&spec.with_seed(s))).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("render thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(count);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_spec() -> SceneSpec {
        let mut spec = SceneSpec::default();
        for c in &mut spec.classes {
            c.count_mean = 0.0;
        }
        spec
    }

    #[test]
    fn zero_counts_give_background_only() {
        let mut spec = empty_spec();
        spec.noise_std = 0.0;
        let rec = render_scene(&spec).unwrap();
        assert!(rec.gold.is_empty());
        assert!(rec.image.pixels().iter().all(|&p| p == 230.0));
    }

    #[test]
    fn single_circle_geometry() {
        let cell = Cell { class_id: 0, cx: 50.0, cy: 50.0, a: 8.0, b: 8.0, intensity: 60.0 };
        let b = cell.bbox();
        assert_eq!((b.left, b.top, b.right, b.bottom), (42.0, 42.0, 58.0, 58.0));
        assert!(cell.contains(42.0, 50.0) && cell.contains(50.0, 58.0));
        assert!(!cell.contains(43.0, 43.0));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = SceneSpec::default();
        let a = render_scene(&spec).unwrap();
        let b = render_scene(&spec).unwrap();
        assert_eq!(a, b);
        let c = render_scene(&spec.with_seed(1)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn dataset_independent_of_threads() {
        let spec = SceneSpec::default();
        let one = render_dataset(&spec, 7, 1).unwrap();
        let many = render_dataset(&spec, 7, 3).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn mean_box_size_matches_generator() {
        // box area = 4 r^2, so E[area] = 4 (mu^2 + sigma^2) up to the
        // negligible radius truncation
        let spec = SceneSpec::default();
        let mut sums = vec![(0.0, 0usize); spec.num_classes()];
        for s in 0..200 {
            for cell in scene_cells(&spec.with_seed(s)) {
                let e = &mut sums[cell.class_id];
                e.0 += cell.bbox().area();
                e.1 += 1;
            }
        }
        for (c, (sum, n)) in sums.iter().enumerate() {
            let cs = &spec.classes[c];
            let expected = 4.0 * (cs.radius_mean.powi(2) + cs.radius_std.powi(2));
            let got = sum / *n as f64;
            assert!((got - expected).abs() / expected < 0.05, "class {c}: {got} vs {expected}");
        }
    }

    #[test]
    fn rendered_cells_carry_their_intensity() {
        let mut spec = SceneSpec::default();
        spec.noise_std = 0.0;
        let cells = scene_cells(&spec);
        let rec = render_scene(&spec).unwrap();
        assert_eq!(rec.gold.len(), cells.len());
        for c in &cells {
            let v = rec.image.get(c.cx.round() as usize, c.cy.round() as usize);
            // overlapping later cells may paint over the center
            assert!(cells.iter().any(|o| o.intensity == v));
        }
    }

    #[test]
    fn validation_rejects_identical_classes() {
        let mut spec = SceneSpec::default();
        spec.classes[1].radius_mean = spec.classes[0].radius_mean;
        assert!(spec.validate().is_err());
        let mut spec = SceneSpec::default();
        spec.classes[0].count_mean = -1.0;
        assert!(spec.validate().is_err());
    }
}
