//! Synthetic dissected-aorta phantoms with exact ground-truth labels.
//!
//! Each phantom is a curved tube (arc followed by a straight segment) split
//! by a planar septum into a smaller true lumen and a larger false lumen.
//! When FLT is present, a crescent of the false-lumen cross-section hugging
//! the outer wall is relabeled as thrombus at a lower intensity. Labels are
//! noise-free; intensities carry Gaussian noise.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{CaseRecord, CohortManifest, MANIFEST_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{LabelMap, Volume, FL, FLT, TL};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    /// Isotropic voxel spacing in mm.
    pub spacing: f64,
    pub vessel_radius_mm: f64,
    /// Lateral displacement of the arc segment, mm.
    pub arc_amplitude_mm: f64,
    /// Fraction of the z extent covered by the arc before the straight part.
    pub arc_fraction: f64,
    /// Rotation of the septum plane about the vessel axis, radians.
    pub septum_angle: f64,
    /// Septum offset toward the TL side as a fraction of the radius;
    /// positive values make the TL the smaller lumen.
    pub septum_offset: f64,
    pub flt_present: bool,
    /// Fraction of the false-lumen cross-section relabeled as FLT.
    pub flt_arc_fraction: f64,
    pub lumen_intensity: f64,
    pub flt_intensity: f64,
    pub background_intensity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 64],
            spacing: 1.5,
            vessel_radius_mm: 14.0,
            arc_amplitude_mm: 10.0,
            arc_fraction: 0.6,
            septum_angle: 0.0,
            septum_offset: 0.15,
            flt_present: true,
            flt_arc_fraction: 0.3,
            lumen_intensity: 0.77,
            flt_intensity: 0.40,
            background_intensity: 0.27,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < 8) {
            return Err(Error::PhantomSpec("shape axes must be at least 8 voxels".into()));
        }
        if self.spacing <= 0.0 {
            return Err(Error::PhantomSpec("spacing must be positive".into()));
        }
        if self.flt_present && !(self.flt_arc_fraction > 0.0 && self.flt_arc_fraction < 1.0) {
            return Err(Error::PhantomSpec("flt_arc_fraction must be in (0,1)".into()));
        }
        let half_x = self.shape[0] as f64 * self.spacing / 2.0;
        let margin = 2.0 * self.spacing;
        let reach = self.arc_amplitude_mm + self.vessel_radius_mm + margin;
        if reach >= half_x {
            return Err(Error::PhantomSpec(format!(
                "vessel (radius {} + arc {} mm) exceeds the volume bounds",
                self.vessel_radius_mm, self.arc_amplitude_mm
            )));
        }
        if self.vessel_radius_mm + margin >= self.shape[1] as f64 * self.spacing / 2.0 {
            return Err(Error::PhantomSpec("vessel radius exceeds the y extent".into()));
        }
        Ok(())
    }

    /// Centerline x-offset (mm) at normalized axial position t in [0,1]:
    /// half-cosine arc up to `arc_fraction`, then a straight segment
    /// continuing at the arc's end slope.
    fn centerline_offset(&self, t: f64) -> f64 {
        let split = self.arc_fraction.clamp(0.05, 0.95);
        if t < split {
            let theta = t / split * std::f64::consts::FRAC_PI_2;
            self.arc_amplitude_mm * (1.0 - theta.cos())
        } else {
            // slope of the arc at theta = pi/2
            let slope = self.arc_amplitude_mm * std::f64::consts::FRAC_PI_2 / split;
            self.arc_amplitude_mm + slope * 0.15 * (t - split)
        }
    }
}

/// Generate one phantom volume with its exact label map.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap, CaseRecord)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.shape;
    let sp = spec.spacing;
    let mut labels = Array3::<u8>::zeros((nx, ny, nz));

    let radius_vox = spec.vessel_radius_mm / sp;
    let (cx0, cy) = (nx as f64 / 2.0 - spec.arc_amplitude_mm / sp / 2.0, ny as f64 / 2.0);
    let (sin_a, cos_a) = spec.septum_angle.sin_cos();
    let offset = spec.septum_offset * radius_vox;

    for z in 0..nz {
        let t = z as f64 / (nz - 1).max(1) as f64;
        let cx = cx0 + spec.centerline_offset(t) / sp;
        // collect false-lumen voxels of this slice with their angle from the
        // anti-TL direction so a fixed-count crescent can be carved exactly
        let mut fl_voxels: Vec<(f64, usize, usize)> = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy > radius_vox * radius_vox {
                    continue;
                }
                // signed distance to the septum plane along the TL direction
                let s = dx * cos_a + dy * sin_a;
                if s >= offset {
                    labels[[x, y, z]] = TL;
                } else {
                    labels[[x, y, z]] = FL;
                    // angle relative to the anti-TL axis
                    let along = -(dx * cos_a + dy * sin_a);
                    let across = -dx * sin_a + dy * cos_a;
                    fl_voxels.push((across.atan2(along).abs(), x, y));
                }
            }
        }
        if spec.flt_present && !fl_voxels.is_empty() {
            fl_voxels.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let take = (spec.flt_arc_fraction * fl_voxels.len() as f64).round() as usize;
            for &(_, x, y) in fl_voxels.iter().take(take) {
                labels[[x, y, z]] = FLT;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Array3::<f32>::zeros((nx, ny, nz));
    for (out, &lab) in data.iter_mut().zip(labels.iter()) {
        let mean = match lab {
            0 => spec.background_intensity,
            FLT => spec.flt_intensity,
            _ => spec.lumen_intensity,
        };
        let noise = standard_normal(&mut rng) * spec.noise_sigma;
        *out = (mean + noise).clamp(0.0, 1.0) as f32;
    }

    let id = format!("phantom_{:08x}", spec.seed);
    let spacing = [sp, sp, sp];
    let volume = Volume::with_spacing(data, spacing, id.clone())?;
    let label = LabelMap::with_spacing(labels, spacing, id.clone())?;
    let record = CaseRecord {
        id,
        image_path: Default::default(),
        label_path: None,
        has_flt: label.has_flt(),
        shape: spec.shape,
        spacing,
    };
    Ok((volume, label, record))
}

// Box-Muller
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Randomized spec for one cohort member.
fn randomized_spec(base: &PhantomSpec, rng: &mut ChaCha8Rng, flt: bool, seed: u64) -> PhantomSpec {
    let mut spec = base.clone();
    spec.vessel_radius_mm = base.vessel_radius_mm * rng.random_range(0.8..1.1);
    spec.arc_amplitude_mm = base.arc_amplitude_mm * rng.random_range(0.5..1.2);
    spec.arc_fraction = rng.random_range(0.45..0.75);
    spec.septum_angle = rng.random_range(-0.5..0.5);
    spec.septum_offset = rng.random_range(0.10..0.25);
    spec.flt_present = flt;
    spec.flt_arc_fraction = rng.random_range(0.2..0.45);
    spec.noise_sigma = rng.random_range(0.03..0.06);
    spec.seed = seed;
    spec
}

/// Generate `n` phantoms under `dir` (images/ + labels/) and write a manifest.
///
/// Exactly `round(n * flt_fraction)` cases carry FLT.
pub fn generate_cohort(
    n: usize,
    flt_fraction: f64,
    seed: u64,
    dir: &Path,
    base: &PhantomSpec,
) -> Result<CohortManifest> {
    if n == 0 {
        return Err(Error::PhantomSpec("cohort size must be at least 1".into()));
    }
    let n_flt = (n as f64 * flt_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flt_flags = vec![false; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_flt) {
        flt_flags[i] = true;
    }

    let mut cases = Vec::with_capacity(n);
    for (i, &flt) in flt_flags.iter().enumerate() {
        let case_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
        let spec = randomized_spec(base, &mut rng, flt, case_seed);
        let (mut volume, mut label, _) = generate_phantom(&spec)?;
        let id = format!("phantom_{i:03}");
        volume.id = id.clone();
        label.id = id.clone();
        let saved = nifti::save_case(&volume, Some(&label), dir)?;
        cases.push(CaseRecord {
            id,
            image_path: saved.image_path,
            label_path: saved.label_path,
            has_flt: label.has_flt(),
            shape: volume.shape(),
            spacing: volume.spacing,
        });
    }
    let manifest = CohortManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        cases,
        unlabeled: vec![],
        warnings: vec![],
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::BACKGROUND;

    #[test]
    fn no_flt_means_three_classes() {
        let spec = PhantomSpec { flt_present: false, ..Default::default() };
        let (_, label, record) = generate_phantom(&spec).unwrap();
        let counts = label.class_counts();
        assert!(counts[TL as usize] > 0 && counts[FL as usize] > 0);
        assert_eq!(counts[FLT as usize], 0);
        assert!(!record.has_flt);
    }

    #[test]
    fn flt_fraction_of_false_lumen_side() {
        let spec = PhantomSpec { flt_present: true, flt_arc_fraction: 0.3, ..Default::default() };
        let (_, label, _) = generate_phantom(&spec).unwrap();
        let counts = label.class_counts();
        let fl_side = counts[FL as usize] + counts[FLT as usize];
        let ratio = counts[FLT as usize] as f64 / fl_side as f64;
        assert!((ratio - 0.3).abs() < 0.045, "FLT/FL-side ratio {ratio}");
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = PhantomSpec::default();
        let (va, la, _) = generate_phantom(&spec).unwrap();
        let (vb, lb, _) = generate_phantom(&spec).unwrap();
        assert_eq!(va.data, vb.data);
        assert_eq!(la.data, lb.data);
    }

    #[test]
    fn class_regions_disjoint_and_ordered_intensities() {
        let spec = PhantomSpec::default();
        let (volume, label, _) = generate_phantom(&spec).unwrap();
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        for (&v, &l) in volume.data.iter().zip(label.data.iter()) {
            sums[l as usize] += v as f64;
            counts[l as usize] += 1;
        }
        let mean = |c: u8| sums[c as usize] / counts[c as usize].max(1) as f64;
        assert!(mean(TL) > mean(FLT), "lumen must outshine FLT");
        assert!(mean(FLT) > mean(BACKGROUND), "FLT must outshine background");
        // sample means within 3 sigma / sqrt(n) of the spec means
        for (class, expect) in [(TL, 0.77), (FL, 0.77), (FLT, 0.40)] {
            let n = counts[class as usize] as f64;
            let tol = 3.0 * spec.noise_sigma / n.sqrt() + 1e-3;
            assert!((mean(class) - expect).abs() < tol.max(5e-3), "class {class} mean {}", mean(class));
        }
    }

    #[test]
    fn oversized_vessel_rejected() {
        let spec = PhantomSpec { vessel_radius_mm: 80.0, ..Default::default() };
        assert!(matches!(generate_phantom(&spec), Err(Error::PhantomSpec(_))));
    }

    #[test]
    fn cohort_flt_counts_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = PhantomSpec { shape: [24, 24, 24], vessel_radius_mm: 7.0, arc_amplitude_mm: 3.0, ..Default::default() };
        let manifest = generate_cohort(10, 0.7, 5, dir.path(), &base).unwrap();
        assert_eq!(manifest.cases.len(), 10);
        assert_eq!(manifest.flt_positive_count(), 7);
        // zero-FLT cohort has no class 3 anywhere
        let dir2 = tempfile::tempdir().unwrap();
        let m2 = generate_cohort(3, 0.0, 5, dir2.path(), &base).unwrap();
        assert_eq!(m2.flt_positive_count(), 0);
    }

    #[test]
    fn cohort_is_deterministic() {
        let base = PhantomSpec { shape: [20, 20, 20], vessel_radius_mm: 6.0, arc_amplitude_mm: 2.0, ..Default::default() };
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let ma = generate_cohort(4, 0.5, 9, da.path(), &base).unwrap();
        let mb = generate_cohort(4, 0.5, 9, db.path(), &base).unwrap();
        let flags = |m: &CohortManifest| m.cases.iter().map(|c| c.has_flt).collect::<Vec<_>>();
        assert_eq!(flags(&ma), flags(&mb));
        let (va, _) = nifti::load_case(&ma.cases[0].image_path, None).unwrap();
        let (vb, _) = nifti::load_case(&mb.cases[0].image_path, None).unwrap();
        assert_eq!(va.data, vb.data);
    }
}
