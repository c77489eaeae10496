//! Synthetic apical echocardiography phantoms with exact ground truth.
//!
//! The LV cavity is a prolate ellipsoid with long semi-axis `a` and short
//! semi-axes `b2` (2CH plane) and `b4` (4CH plane), truncated by a base plane
//! at `z = -beta * a`. Each apical view is the central section of that solid
//! in its own plane, so the analytic volume
//!
//! ```text
//! V = pi * b2 * b4 * a * ((1 + beta) - (1 + beta^3) / 3)
//! ```
//!
//! is exactly what the biplane method of discs integrates. The epicardium is
//! the same truncated shape grown by the wall thickness. End systole scales
//! the cavity by the contraction factor about its apex.

mod dataset;
mod folds;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{tight_bbox, BoundingBox, ImageGrid, Instant, LabelMask, PixelSpacing, Structure, View};

pub use dataset::{frame_stem, read_dataset, write_dataset, Dataset, Manifest, ManifestEntry, PatientInfo};
pub use folds::{stratified_folds, stratified_folds_by, FoldAssignment};

/// Generator-side image quality label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Good,
    Medium,
    Poor,
}

/// Ejection-fraction band: at most 45%, between, at least 55%.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfCategory {
    Reduced,
    Intermediate,
    Preserved,
}

impl EfCategory {
    pub fn of(ef: f64) -> Self {
        if ef <= 45.0 {
            EfCategory::Reduced
        } else if ef < 55.0 {
            EfCategory::Intermediate
        } else {
            EfCategory::Preserved
        }
    }
}

/// Sampling ranges are `(min, max)` pairs; lengths are in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub image_size: usize,
    pub spacing_mm: f64,
    /// ED long semi-axis `a`.
    pub long_semi_axis_mm: (f64, f64),
    /// ED short semi-axes, drawn independently per view.
    pub short_semi_axis_mm: (f64, f64),
    /// Base plane position as a fraction of `a` below the ellipsoid center.
    pub base_cut: (f64, f64),
    /// End-systolic linear scale factor.
    pub contraction: (f64, f64),
    /// ED myocardial thickness.
    pub myocardium_mm: (f64, f64),
    /// Depth of the epicardial apex below the transducer.
    pub apex_depth_mm: (f64, f64),
    /// Maximum lateral shift of the apex from the image midline.
    pub translation_mm: f64,
    /// Maximum tilt of the long axis from vertical, degrees.
    pub rotation_deg: f64,
    /// Log-normal speckle sigma.
    pub speckle: (f64, f64),
    /// Tissue contrast scale.
    pub contrast: (f64, f64),
    pub noise_sd: f64,
    pub sector_half_angle_deg: f64,
    /// Quality score `contrast * (1 - speckle)`: poor below the first value,
    /// good at or above the second.
    pub quality_thresholds: (f64, f64),
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            image_size: 128,
            spacing_mm: 1.25,
            long_semi_axis_mm: (44.0, 54.0),
            short_semi_axis_mm: (19.0, 25.0),
            base_cut: (0.4, 0.6),
            contraction: (0.70, 0.88),
            myocardium_mm: (7.0, 11.0),
            apex_depth_mm: (16.0, 28.0),
            translation_mm: 8.0,
            rotation_deg: 15.0,
            speckle: (0.2, 0.7),
            contrast: (0.5, 1.0),
            noise_sd: 0.02,
            sector_half_angle_deg: 40.0,
            quality_thresholds: (0.33, 0.47),
        }
    }
}

impl PhantomParams {
    /// Training resolution: 128x128 over a 160 mm field.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Same field at 256x256, for volumetric checks.
    pub fn high_resolution() -> Self {
        Self {
            image_size: 256,
            spacing_mm: 0.625,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        let ranges = [
            ("long_semi_axis_mm", self.long_semi_axis_mm),
            ("short_semi_axis_mm", self.short_semi_axis_mm),
            ("base_cut", self.base_cut),
            ("contraction", self.contraction),
            ("myocardium_mm", self.myocardium_mm),
            ("apex_depth_mm", self.apex_depth_mm),
            ("speckle", self.speckle),
            ("contrast", self.contrast),
            ("quality_thresholds", self.quality_thresholds),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return bad(&format!("{name} must be a positive nonempty range, got ({lo}, {hi})"));
            }
        }
        if self.image_size < 16 || self.spacing_mm.is_nan() || self.spacing_mm <= 0.0 {
            return bad("image size must be >= 16 and spacing positive");
        }
        if self.contraction.1 >= 1.0 {
            return bad("contraction factor must lie in (0, 1)");
        }
        if self.base_cut.1 >= 1.0 {
            return bad("base cut must lie in (0, 1)");
        }
        if self.short_semi_axis_mm.1 >= self.long_semi_axis_mm.0 {
            return bad("short semi-axes must be smaller than the long semi-axis");
        }
        if !(self.translation_mm >= 0.0 && self.rotation_deg >= 0.0 && self.noise_sd >= 0.0) {
            return bad("translation, rotation and noise must be non-negative");
        }
        if !(self.sector_half_angle_deg > 0.0 && self.sector_half_angle_deg < 90.0) {
            return bad("sector half angle must lie in (0, 90) degrees");
        }
        Ok(())
    }
}

/// Drawn shape parameters of one patient, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientGeometry {
    pub a: f64,
    pub b2: f64,
    pub b4: f64,
    pub beta: f64,
    pub contraction: f64,
    pub thickness: f64,
    pub speckle: f64,
    pub contrast: f64,
}

impl PatientGeometry {
    /// Analytic ED cavity volume in ml.
    pub fn edv(&self) -> f64 {
        truncated_ellipsoid_ml(self.a, self.b2, self.b4, self.beta)
    }

    /// Analytic ES cavity volume in ml.
    pub fn esv(&self) -> f64 {
        let c = self.contraction;
        truncated_ellipsoid_ml(c * self.a, c * self.b2, c * self.b4, self.beta)
    }
}

/// Volume of `{(z/a)^2 + (u/b2)^2 + (v/b4)^2 <= 1, z >= -beta * a}` in ml.
pub fn truncated_ellipsoid_ml(a: f64, b2: f64, b4: f64, beta: f64) -> f64 {
    std::f64::consts::PI * b2 * b4 * a * ((1.0 + beta) - (1.0 + beta.powi(3)) / 3.0) / 1000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub view: View,
    pub instant: Instant,
    pub image: ImageGrid,
    pub mask: LabelMask,
    /// Tight epicardial box, without margin.
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Ordered 2CH-ED, 2CH-ES, 4CH-ED, 4CH-ES.
    pub frames: Vec<Frame>,
    pub edv: f64,
    pub esv: f64,
    pub ef: f64,
    pub quality: Quality,
    pub ef_category: EfCategory,
}

/// Position of `(view, instant)` in [`PatientRecord::frames`].
pub fn frame_index(view: View, instant: Instant) -> usize {
    2 * (view as usize) + instant as usize
}

impl PatientRecord {
    pub fn frame(&self, view: View, instant: Instant) -> &Frame {
        &self.frames[frame_index(view, instant)]
    }

    pub fn spacing(&self) -> PixelSpacing {
        self.frames[0].image.spacing()
    }
}

/// Identifier of the patient at `index` (1-based in the name).
pub fn patient_id(index: usize) -> String {
    format!("patient{:04}", index + 1)
}

/// Random stream of patient `index` under `master_seed`.
pub fn patient_rng(master_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index as u64);
    rng
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn symmetric(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.random_range(-half..half)
    }
}

/// Placement of one view: long-axis tilt and epicardial apex position (mm).
#[derive(Debug, Clone, Copy)]
struct Pose {
    theta: f64,
    apex: [f64; 2],
}

/// Cavity and wall of one frame in image mm coordinates.
struct Section {
    center: [f64; 2],
    /// Unit vector from the center toward the apex.
    up: [f64; 2],
    a: f64,
    b: f64,
    z_base: f64,
    t: f64,
}

impl Section {
    fn local(&self, p: [f64; 2]) -> (f64, f64) {
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let z = d[0] * self.up[0] + d[1] * self.up[1];
        let s = -d[0] * self.up[1] + d[1] * self.up[0];
        (z, s)
    }

    fn label(&self, p: [f64; 2]) -> u8 {
        let (z, s) = self.local(p);
        if z < self.z_base {
            return LabelMask::BACKGROUND;
        }
        if (z / self.a).powi(2) + (s / self.b).powi(2) <= 1.0 {
            LabelMask::CAVITY
        } else if (z / (self.a + self.t)).powi(2) + (s / (self.b + self.t)).powi(2) <= 1.0 {
            LabelMask::MYOCARDIUM
        } else {
            LabelMask::BACKGROUND
        }
    }
}

fn section(g: &PatientGeometry, b: f64, pose: &Pose, instant: Instant) -> Section {
    let up = [-pose.theta.cos(), pose.theta.sin()];
    // ED cavity apex sits one wall thickness inside the epicardial apex.
    let cavity_apex = [pose.apex[0] - g.thickness * up[0], pose.apex[1] - g.thickness * up[1]];
    let (scale, t) = match instant {
        Instant::ED => (1.0, g.thickness),
        Instant::ES => (g.contraction, g.thickness / g.contraction.sqrt()),
    };
    let a = scale * g.a;
    Section {
        center: [cavity_apex[0] - a * up[0], cavity_apex[1] - a * up[1]],
        up,
        a,
        b: scale * b,
        z_base: -g.beta * a,
        t,
    }
}

fn render_mask(sec: &Section, n: usize, sp: f64) -> LabelMask {
    let mut m = LabelMask::zeros(n, n, PixelSpacing::isotropic(sp));
    for r in 0..n {
        for c in 0..n {
            let p = [(r as f64 + 0.5) * sp, (c as f64 + 0.5) * sp];
            m.set(r, c, sec.label(p));
        }
    }
    m
}

fn blur3(src: &[f64], n: usize) -> Vec<f64> {
    let k = [1.0, 2.0, 1.0];
    let at = |v: &[f64], r: isize, c: isize| {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        v[r * n + c]
    };
    let mut tmp = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            tmp[r * n + c] = (0..3)
                .map(|i| k[i] * at(src, r as isize, c as isize + i as isize - 1))
                .sum::<f64>()
                / 4.0;
        }
    }
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = (0..3)
                .map(|i| k[i] * at(&tmp, r as isize + i as isize - 1, c as isize))
                .sum::<f64>()
                / 4.0;
        }
    }
    out
}

fn render_image(
    mask: &LabelMask,
    g: &PatientGeometry,
    params: &PhantomParams,
    texture: &[f64; 4],
    rng: &mut ChaCha8Rng,
) -> Result<ImageGrid> {
    let n = params.image_size;
    let sp = params.spacing_mm;
    let tissue = 0.32;
    let myo = tissue + 0.40 * g.contrast;
    let cavity = tissue - 0.24 * g.contrast;
    let mut v = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (r as f64 * sp, c as f64 * sp);
            let base = match mask.get(r, c) {
                LabelMask::CAVITY => cavity,
                LabelMask::MYOCARDIUM => myo,
                _ => tissue * (1.0 + 0.25 * (x / texture[0] + texture[1]).sin() * (y / texture[2] + texture[3]).cos()),
            };
            let z: f64 = StandardNormal.sample(rng);
            v[r * n + c] = base * (g.speckle * z - 0.5 * g.speckle * g.speckle).exp().min(4.0);
        }
    }
    let mut v = blur3(&v, n);
    let half = params.sector_half_angle_deg.to_radians();
    let apex_c = n as f64 / 2.0;
    for r in 0..n {
        for c in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            let (dr, dc) = (r as f64 + 0.5, c as f64 + 0.5 - apex_c);
            let inside = dc.atan2(dr).abs() <= half;
            let val = if inside {
                v[r * n + c] + params.noise_sd * z
            } else {
                0.0
            };
            v[r * n + c] = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    ImageGrid::new(n, n, v, PixelSpacing::isotropic(sp))
}

/// Generates patient `index` of a dataset with master seed `seed`.
pub fn generate_patient(params: &PhantomParams, seed: u64, index: usize) -> Result<PatientRecord> {
    params.validate()?;
    let mut rng = patient_rng(seed, index);
    let g = PatientGeometry {
        a: draw(&mut rng, params.long_semi_axis_mm),
        b2: draw(&mut rng, params.short_semi_axis_mm),
        b4: draw(&mut rng, params.short_semi_axis_mm),
        beta: draw(&mut rng, params.base_cut),
        contraction: draw(&mut rng, params.contraction),
        thickness: draw(&mut rng, params.myocardium_mm),
        speckle: draw(&mut rng, params.speckle),
        contrast: draw(&mut rng, params.contrast),
    };
    let n = params.image_size;
    let sp = params.spacing_mm;
    let field = n as f64 * sp;
    let mut frames = Vec::with_capacity(4);
    for view in View::ALL {
        let b = match view {
            View::TwoChamber => g.b2,
            View::FourChamber => g.b4,
        };
        let pose = Pose {
            theta: symmetric(&mut rng, params.rotation_deg).to_radians(),
            apex: [
                draw(&mut rng, params.apex_depth_mm),
                field / 2.0 + symmetric(&mut rng, params.translation_mm),
            ],
        };
        let texture = [
            rng.random_range(6.0..14.0),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(6.0..14.0),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        for instant in Instant::ALL {
            let sec = section(&g, b, &pose, instant);
            let mask = render_mask(&sec, n, sp);
            let bbox = tight_bbox(&mask, Structure::Epi)?;
            if bbox.x_min <= 0.0 || bbox.y_min <= 0.0 || bbox.x_max >= n as f64 || bbox.y_max >= n as f64 {
                return Err(Error::InvalidParams(format!(
                    "heart of patient {index} touches the image border; enlarge the field"
                )));
            }
            let image = render_image(&mask, &g, params, &texture, &mut rng)?;
            frames.push(Frame {
                view,
                instant,
                image,
                mask,
                bbox,
            });
        }
    }
    let edv = g.edv();
    let esv = g.esv();
    let ef = 100.0 * (edv - esv) / edv;
    let score = g.contrast * (1.0 - g.speckle);
    let quality = if score < params.quality_thresholds.0 {
        Quality::Poor
    } else if score < params.quality_thresholds.1 {
        Quality::Medium
    } else {
        Quality::Good
    };
    Ok(PatientRecord {
        patient_id: patient_id(index),
        frames,
        edv,
        esv,
        ef,
        quality,
        ef_category: EfCategory::of(ef),
    })
}

/// Generates `n` patients in parallel; identical output for any thread count.
pub fn generate_dataset(params: &PhantomParams, n: usize, seed: u64) -> Result<Vec<PatientRecord>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| generate_patient(params, seed, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clinical::{simpson_biplane, DEFAULT_DISCS};

    #[test]
    fn same_seed_same_record() {
        let p = PhantomParams::default();
        let a = generate_patient(&p, 7, 3).unwrap();
        let b = generate_patient(&p, 7, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_patient(&p, 7, 4).unwrap();
        assert_ne!(a.frames[0].image, c.frames[0].image);
        assert_eq!(a.patient_id, "patient0004");
    }

    #[test]
    fn ef_is_consistent() {
        let r = generate_patient(&PhantomParams::default(), 1, 0).unwrap();
        assert_eq!(r.ef, 100.0 * (r.edv - r.esv) / r.edv);
        assert!(r.esv < r.edv);
        assert_eq!(r.ef_category, EfCategory::of(r.ef));
    }

    #[test]
    fn masks_are_nested_and_boxes_tight() {
        for i in 0..20 {
            let r = generate_patient(&PhantomParams::default(), 11, i).unwrap();
            for f in &r.frames {
                assert_eq!(f.bbox, tight_bbox(&f.mask, Structure::Epi).unwrap());
                assert!(f.mask.structure_area_px(Structure::Endo) > 0);
                assert!(f.image.pixels().iter().all(|v| (v * 255.0).round() / 255.0 == *v));
            }
            let ed = r.frame(View::TwoChamber, Instant::ED);
            let es = r.frame(View::TwoChamber, Instant::ES);
            assert!(ed.mask.structure_area_px(Structure::Endo) > es.mask.structure_area_px(Structure::Endo));
        }
    }

    #[test]
    fn cavity_is_darker_than_wall() {
        let r = generate_patient(&PhantomParams::default(), 5, 2).unwrap();
        let f = r.frame(View::FourChamber, Instant::ED);
        let mean = |label: u8| {
            let v: Vec<f64> = f
                .mask
                .labels()
                .iter()
                .zip(f.image.pixels())
                .filter(|(l, _)| **l == label)
                .map(|(_, v)| *v)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(LabelMask::CAVITY) + 0.15 < mean(LabelMask::MYOCARDIUM));
    }

    #[test]
    fn simpson_recovers_analytic_volumes() {
        let p = PhantomParams::high_resolution();
        for i in 0..5 {
            let r = generate_patient(&p, 21, i).unwrap();
            let endo = |v, t| r.frame(v, t).mask.clone();
            let edv = simpson_biplane(
                &endo(View::TwoChamber, Instant::ED),
                &endo(View::FourChamber, Instant::ED),
                DEFAULT_DISCS,
            )
            .unwrap();
            let esv = simpson_biplane(
                &endo(View::TwoChamber, Instant::ES),
                &endo(View::FourChamber, Instant::ES),
                DEFAULT_DISCS,
            )
            .unwrap();
            assert!((edv - r.edv).abs() / r.edv <= 0.05, "edv {edv} vs {}", r.edv);
            assert!((esv - r.esv).abs() / r.esv <= 0.05, "esv {esv} vs {}", r.esv);
        }
    }

    #[test]
    fn analytic_volume_of_full_half_ellipsoid() {
        // beta = 1 is the whole ellipsoid: 4/3 pi a b c.
        let v = truncated_ellipsoid_ml(40.0, 20.0, 15.0, 1.0);
        assert!((v - 4.0 / 3.0 * std::f64::consts::PI * 40.0 * 20.0 * 15.0 / 1000.0).abs() < 1e-12);
        // beta = 0 is half of it.
        let h = truncated_ellipsoid_ml(40.0, 20.0, 15.0, 0.0);
        assert!((2.0 * h - v).abs() < 1e-12);
    }

    #[test]
    fn categories_cover_defaults() {
        let recs = generate_dataset(&PhantomParams::default(), 100, 3).unwrap();
        for cat in [EfCategory::Reduced, EfCategory::Intermediate, EfCategory::Preserved] {
            assert!(recs.iter().any(|r| r.ef_category == cat), "{cat:?} missing");
        }
        for q in [Quality::Good, Quality::Medium, Quality::Poor] {
            assert!(recs.iter().any(|r| r.quality == q), "{q:?} missing");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = PhantomParams {
            contraction: (0.7, 1.2),
            ..PhantomParams::default()
        };
        assert!(matches!(generate_patient(&p, 0, 0), Err(Error::InvalidParams(_))));
        let p = PhantomParams {
            image_size: 64,
            ..PhantomParams::default()
        };
        assert!(matches!(generate_patient(&p, 0, 0), Err(Error::InvalidParams(_))));
    }
}
