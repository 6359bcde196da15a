//! A planted-object world that stands in for an image encoder.
//!
//! Each scene holds one object disc of a known class, a few distractor discs
//! whose signature mixes two other classes equally (so their prediction
//! margin is near zero), and background everywhere else. A view's feature is
//! the area-weighted mixture of those signatures plus seeded Gaussian noise:
//!
//! ```text
//! normalize( a_obj·P[c] + Σ_j a_j·(P[u_j] + P[v_j])/√2 + a_bg·b + noise·η )
//! ```
//!
//! where the `a` terms are exact overlap fractions of the crop, `b` is a unit
//! background direction orthogonal to every prototype and
//! `η ~ N(0, σ²I/d)` with `σ = (W·H / (w·h))^p` for a `w×h` crop of a
//! `W×H` image (see [`NOISE_AREA_EXPONENT`]).

use serde::{Deserialize, Serialize};

use super::{FeatureVector, TextClassifier};
use crate::error::{Result, VcrError};
use crate::geometry::{CropRect, View};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Disc {
    fn intersects(&self, width: u32, height: u32) -> bool {
        let nx = self.cx.clamp(0.0, f64::from(width));
        let ny = self.cy.clamp(0.0, f64::from(height));
        (self.cx - nx).powi(2) + (self.cy - ny).powi(2) < self.radius * self.radius
    }

    fn overlaps(&self, other: &Disc) -> bool {
        let d = ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt();
        d < self.radius + other.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub disc: Disc,
    /// Two distinct classes whose prototypes are mixed equally.
    pub classes: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub class_index: usize,
    pub object: Disc,
    pub distractors: Vec<Distractor>,
    pub noise_seed: u64,
}

impl SyntheticScene {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_index >= num_classes {
            return Err(VcrError::invalid(format!(
                "scene `{}` object class {} out of range for {num_classes} classes",
                self.image_id, self.class_index
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(VcrError::invalid(format!("scene `{}` is smaller than 2x2", self.image_id)));
        }
        let discs = std::iter::once(&self.object).chain(self.distractors.iter().map(|d| &d.disc));
        for disc in discs {
            if !(disc.radius > 0.0) || !disc.intersects(self.width, self.height) {
                return Err(VcrError::invalid(format!(
                    "scene `{}` has a disc outside the image",
                    self.image_id
                )));
            }
        }
        for d in &self.distractors {
            let (u, v) = d.classes;
            if u == v || u >= num_classes || v >= num_classes {
                return Err(VcrError::invalid(format!(
                    "scene `{}` distractor classes ({u}, {v}) invalid",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Ranges for random scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: u32,
    pub height: u32,
    /// Object radius as a fraction of the shorter side.
    pub object_radius: (f64, f64),
    /// Distractor radius as a fraction of the shorter side.
    pub distractor_radius: (f64, f64),
    pub distractors: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 224,
            height: 224,
            object_radius: (0.12, 0.18),
            distractor_radius: (0.05, 0.15),
            distractors: 3,
        }
    }
}

/// Prototypes plus the background direction orthogonal to all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    prototypes: TextClassifier,
    background: Vec<f64>,
}

/// Noise standard deviation grows as `(image area / crop area)^p`: a small
/// crop is upsampled from fewer pixels, so its embedding is less reliable.
pub const NOISE_AREA_EXPONENT: f64 = 1.4;

const BACKGROUND_SEED: u64 = 0x6261_636b_6772_6e64;

impl SyntheticWorld {
    pub fn new(prototypes: TextClassifier) -> Result<Self> {
        let dim = prototypes.dim();
        if dim <= prototypes.num_classes() {
            return Err(VcrError::invalid(format!(
                "dimension {dim} leaves no room for a background direction beside {} prototypes",
                prototypes.num_classes()
            )));
        }
        // Gram-Schmidt basis of the prototype span.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for p in prototypes.weights() {
            let mut v = p.to_f64();
            project_out(&mut v, &basis);
            let n = l2(&v);
            if n > 1e-9 {
                basis.push(v.iter().map(|x| x / n).collect());
            }
        }
        for attempt in 0..64u64 {
            let mut s = Stream::new(BACKGROUND_SEED, attempt);
            let mut v: Vec<f64> = (0..dim).map(|_| s.gaussian()).collect();
            project_out(&mut v, &basis);
            // second pass removes rounding residue
            project_out(&mut v, &basis);
            let n = l2(&v);
            if n > 1e-6 {
                let background = v.iter().map(|x| x / n).collect();
                return Ok(Self {
                    prototypes,
                    background,
                });
            }
        }
        Err(VcrError::invalid("could not construct a background direction"))
    }

    /// A world with `classes` random unit prototypes in `dim` dimensions.
    pub fn random(classes: usize, dim: usize, tau: f64, seed: u64) -> Result<Self> {
        let mut s = Stream::new(seed, 0x7072_6f74);
        let weights = (0..classes)
            .map(|_| (0..dim).map(|_| s.gaussian() as f32).collect())
            .collect();
        let names = (0..classes).map(|i| format!("class_{i}")).collect();
        Self::new(super::build_text_classifier(names, weights, tau)?)
    }

    pub fn prototypes(&self) -> &TextClassifier {
        &self.prototypes
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// Encodes one view of a scene.
    pub fn encode(&self, scene: &SyntheticScene, view: View, noise_amp: f64) -> Result<FeatureVector> {
        if !(noise_amp >= 0.0) {
            return Err(VcrError::invalid(format!("noise amplitude must be non-negative, got {noise_amp}")));
        }
        let (rect, flipped) = match view {
            View::Global => (CropRect::full(scene.width, scene.height), false),
            View::Crop(r) => (r, false),
            View::FlippedCrop(r) => (r, true),
        };
        if !rect.fits(scene.width, scene.height) {
            return Err(VcrError::invalid(format!(
                "crop {view} does not fit {}x{} image `{}`",
                scene.width, scene.height, scene.image_id
            )));
        }
        let dim = self.prototypes.dim();
        let area = rect.area() as f64;
        let protos = self.prototypes.weights();
        let mut acc = vec![0.0f64; dim];
        let mut covered = 0.0;

        let a_obj = disc_rect_overlap(&scene.object, &rect) / area;
        covered += a_obj;
        axpy(&mut acc, a_obj, &protos[scene.class_index].to_f64());
        for d in &scene.distractors {
            let a = disc_rect_overlap(&d.disc, &rect) / area;
            if a == 0.0 {
                continue;
            }
            covered += a;
            let w = a / std::f64::consts::SQRT_2;
            axpy(&mut acc, w, &protos[d.classes.0].to_f64());
            axpy(&mut acc, w, &protos[d.classes.1].to_f64());
        }
        let a_bg = (1.0 - covered).max(0.0);
        axpy(&mut acc, a_bg, &self.background);

        if noise_amp > 0.0 {
            // a mirrored crop sees the mirrored content, but its own noise draw
            let tags = [u64::from(flipped), rect.x.into(), rect.y.into(), rect.w.into(), rect.h.into()];
            let mut s = Stream::new(rng::derive(scene.noise_seed, &tags), 0);
            let frac = area / (f64::from(scene.width) * f64::from(scene.height));
            let scale = noise_amp / (dim as f64).sqrt() * frac.powf(-NOISE_AREA_EXPONENT);
            for a in acc.iter_mut() {
                *a += scale * s.gaussian();
            }
        }
        FeatureVector::from_f64(&acc)
    }

    /// Generates a random scene whose object has class `class_index`.
    ///
    /// Distractors avoid overlapping the object and each other when a free
    /// spot is found within a bounded number of attempts.
    pub fn random_scene(
        &self,
        image_id: &str,
        class_index: usize,
        params: &SceneParams,
        seed: u64,
    ) -> Result<SyntheticScene> {
        let classes = self.prototypes.num_classes();
        if class_index >= classes {
            return Err(VcrError::invalid(format!("class {class_index} out of range")));
        }
        let (w, h) = (f64::from(params.width), f64::from(params.height));
        let short = w.min(h);
        let mut s = Stream::new(seed, 0);
        let radius = |s: &mut Stream, (lo, hi): (f64, f64)| s.uniform(lo, hi) * short;
        let r = radius(&mut s, params.object_radius);
        let object = Disc {
            cx: s.uniform(r.min(w / 2.0), (w - r).max(w / 2.0)),
            cy: s.uniform(r.min(h / 2.0), (h - r).max(h / 2.0)),
            radius: r,
        };
        let mut placed = vec![object];
        let mut distractors = Vec::with_capacity(params.distractors);
        for _ in 0..params.distractors {
            let r = radius(&mut s, params.distractor_radius);
            let mut disc = Disc { cx: 0.0, cy: 0.0, radius: r };
            for _ in 0..200 {
                disc.cx = s.uniform(0.0, w);
                disc.cy = s.uniform(0.0, h);
                if !placed.iter().any(|p| p.overlaps(&disc)) {
                    break;
                }
            }
            placed.push(disc);
            let pair = if classes == 2 {
                (0, 1)
            } else {
                let others: Vec<usize> = (0..classes).filter(|&c| c != class_index).collect();
                let u = others[s.below(others.len() as u64) as usize];
                let rest: Vec<usize> = others.into_iter().filter(|&c| c != u).collect();
                (u, rest[s.below(rest.len() as u64) as usize])
            };
            distractors.push(Distractor { disc, classes: pair });
        }
        let scene = SyntheticScene {
            image_id: image_id.to_string(),
            width: params.width,
            height: params.height,
            class_index,
            object,
            distractors,
            noise_seed: rng::derive(seed, &[1]),
        };
        scene.validate(classes)?;
        Ok(scene)
    }
}

/// One-shot encoding of a crop against a prototype set.
pub fn synthetic_encode(
    scene: &SyntheticScene,
    crop: CropRect,
    prototypes: &TextClassifier,
    noise_amp: f64,
) -> Result<FeatureVector> {
    scene.validate(prototypes.num_classes())?;
    SyntheticWorld::new(prototypes.clone())?.encode(scene, View::Crop(crop), noise_amp)
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, &x) in acc.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let c: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
        axpy(v, -c, q);
    }
}

/// Exact area of `disc ∩ rect`.
///
/// The rectangle's x-extent is split at every abscissa where the circle
/// crosses one of the rectangle's horizontal edges. On each piece the upper
/// and lower bounds of the vertical chord are each either an edge or the
/// circle, so the piece integrates in closed form.
pub fn disc_rect_overlap(disc: &Disc, rect: &CropRect) -> f64 {
    let r = disc.radius;
    let x1 = f64::from(rect.x) - disc.cx;
    let x2 = f64::from(rect.x + rect.w) - disc.cx;
    let y1 = f64::from(rect.y) - disc.cy;
    let y2 = f64::from(rect.y + rect.h) - disc.cy;
    let (a, b) = (x1.max(-r), x2.min(r));
    if a >= b || y1 >= r || y2 <= -r {
        return 0.0;
    }
    let mut cuts = vec![a, b];
    for y in [y1, y2] {
        if y.abs() < r {
            let t = (r * r - y * y).sqrt();
            for c in [-t, t] {
                if c > a && c < b {
                    cuts.push(c);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);

    let half_chord = |t: f64| (r * r - t * t).max(0.0).sqrt();
    // antiderivative of the half chord √(r² − t²)
    let prim = |t: f64| 0.5 * (t * half_chord(t) + r * r * (t / r).clamp(-1.0, 1.0).asin());

    let mut area = 0.0;
    for pair in cuts.windows(2) {
        let (p, q) = (pair[0], pair[1]);
        if q <= p {
            continue;
        }
        let s = half_chord(0.5 * (p + q));
        let arc = prim(q) - prim(p);
        let top = if y2 < s { y2 * (q - p) } else { arc };
        let bottom = if y1 > -s { y1 * (q - p) } else { -arc };
        let top_mid = y2.min(s);
        let bottom_mid = y1.max(-s);
        if top_mid > bottom_mid {
            area += top - bottom;
        }
    }
    area.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::build_text_classifier;

    fn basis_world() -> SyntheticWorld {
        let mut weights = vec![vec![0.0f32; 6]; 3];
        for (i, w) in weights.iter_mut().enumerate() {
            w[i] = 1.0;
        }
        let names = vec!["a".into(), "b".into(), "c".into()];
        SyntheticWorld::new(build_text_classifier(names, weights, 0.01).unwrap()).unwrap()
    }

    fn scene(object: Disc, distractors: Vec<Distractor>) -> SyntheticScene {
        SyntheticScene {
            image_id: "s".into(),
            width: 100,
            height: 100,
            class_index: 2,
            object,
            distractors,
            noise_seed: 11,
        }
    }

    #[test]
    fn background_is_orthogonal_unit() {
        let world = SyntheticWorld::random(8, 32, 0.01, 3).unwrap();
        let b = world.background();
        assert!((l2(b) - 1.0).abs() < 1e-12);
        for p in world.prototypes().weights() {
            let c: f64 = p.to_f64().iter().zip(b).map(|(x, y)| x * y).sum();
            assert!(c.abs() < 1e-6, "{c}");
        }
    }

    #[test]
    fn background_only_crop_is_background() {
        let world = basis_world();
        let sc = scene(Disc { cx: 90.0, cy: 90.0, radius: 5.0 }, vec![]);
        let f = world.encode(&sc, View::Crop(CropRect::new(0, 0, 20, 20)), 0.0).unwrap();
        for (x, y) in f.to_f64().iter().zip(world.background()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn object_only_crop_is_prototype() {
        let world = basis_world();
        let sc = scene(Disc { cx: 50.0, cy: 50.0, radius: 30.0 }, vec![]);
        let f = world.encode(&sc, View::Crop(CropRect::new(40, 40, 20, 20)), 0.0).unwrap();
        assert_eq!(f.as_slice(), world.prototypes().weights()[2].as_slice());
    }

    #[test]
    fn half_object_half_background() {
        let world = basis_world();
        // disc fully inside the crop with exactly half its area
        let radius = (5000.0 / std::f64::consts::PI).sqrt();
        let sc = scene(Disc { cx: 50.0, cy: 50.0, radius }, vec![]);
        let rect = CropRect::new(0, 0, 100, 100);
        let frac = disc_rect_overlap(&sc.object, &rect) / rect.area() as f64;
        assert!((frac - 0.5).abs() < 1e-12);
        let f = world.encode(&sc, View::Crop(rect), 0.0).unwrap();
        let mut expected: Vec<f64> = world.background().iter().map(|b| 0.5 * b).collect();
        expected[2] += 0.5;
        let n = l2(&expected);
        for (x, y) in f.to_f64().iter().zip(&expected) {
            assert!((x - y / n).abs() < 1e-6);
        }
    }

    #[test]
    fn distractor_has_near_zero_margin() {
        let world = basis_world();
        let sc = scene(
            Disc { cx: 90.0, cy: 90.0, radius: 5.0 },
            vec![Distractor { disc: Disc { cx: 20.0, cy: 20.0, radius: 50.0 }, classes: (0, 1) }],
        );
        let f = world.encode(&sc, View::Crop(CropRect::new(10, 10, 20, 20)), 0.0).unwrap();
        let v = f.to_f64();
        assert!((v[0] - v[1]).abs() < 1e-6);
        assert!((v[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn noise_is_seeded_per_view() {
        let world = SyntheticWorld::random(4, 16, 0.01, 9).unwrap();
        let params = SceneParams::default();
        let sc = world.random_scene("x", 1, &params, 5).unwrap();
        let r = CropRect::new(10, 10, 50, 50);
        let a = world.encode(&sc, View::Crop(r), 0.3).unwrap();
        let b = world.encode(&sc, View::Crop(r), 0.3).unwrap();
        let c = world.encode(&sc, View::FlippedCrop(r), 0.3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(world.encode(&sc, View::Crop(r), -1.0).is_err());
        assert_eq!(
            world.encode(&sc, View::Global, 0.3).unwrap(),
            world.encode(&sc, View::Crop(CropRect::full(224, 224)), 0.3).unwrap()
        );
    }

    #[test]
    fn overlap_matches_monte_carlo() {
        let mut s = Stream::new(17, 0);
        for _ in 0..20 {
            let disc = Disc {
                cx: s.uniform(-20.0, 120.0),
                cy: s.uniform(-20.0, 120.0),
                radius: s.uniform(1.0, 60.0),
            };
            let x = s.below(90) as u32;
            let y = s.below(90) as u32;
            let rect = CropRect::new(x, y, 1 + s.below(100 - x as u64) as u32, 1 + s.below(100 - y as u64) as u32);
            let exact = disc_rect_overlap(&disc, &rect) / rect.area() as f64;
            let samples = 100_000;
            let mut hits = 0u32;
            for _ in 0..samples {
                let px = f64::from(rect.x) + s.unit() * f64::from(rect.w);
                let py = f64::from(rect.y) + s.unit() * f64::from(rect.h);
                if (px - disc.cx).powi(2) + (py - disc.cy).powi(2) <= disc.radius.powi(2) {
                    hits += 1;
                }
            }
            let mc = f64::from(hits) / f64::from(samples);
            assert!((exact - mc).abs() < 1e-2, "exact {exact} mc {mc} disc {disc:?} rect {rect:?}");
        }
    }

    #[test]
    fn overlap_closed_forms() {
        let disc = Disc { cx: 50.0, cy: 50.0, radius: 10.0 };
        let full = CropRect::new(0, 0, 100, 100);
        assert!((disc_rect_overlap(&disc, &full) - std::f64::consts::PI * 100.0).abs() < 1e-9);
        let half = CropRect::new(0, 0, 50, 100);
        assert!((disc_rect_overlap(&disc, &half) - std::f64::consts::PI * 50.0).abs() < 1e-9);
        let quarter = CropRect::new(50, 50, 50, 50);
        assert!((disc_rect_overlap(&disc, &quarter) - std::f64::consts::PI * 25.0).abs() < 1e-9);
        let inside = CropRect::new(48, 48, 4, 4);
        assert!((disc_rect_overlap(&disc, &inside) - 16.0).abs() < 1e-9);
        let away = CropRect::new(0, 0, 10, 10);
        assert_eq!(disc_rect_overlap(&disc, &away), 0.0);
    }

    #[test]
    fn scene_validation() {
        let world = basis_world();
        let mut sc = scene(Disc { cx: 50.0, cy: 50.0, radius: 5.0 }, vec![]);
        sc.class_index = 3;
        assert!(synthetic_encode(&sc, CropRect::full(100, 100), world.prototypes(), 0.0).is_err());
        sc.class_index = 0;
        sc.object.cx = 500.0;
        assert!(sc.validate(3).is_err());
    }
}
