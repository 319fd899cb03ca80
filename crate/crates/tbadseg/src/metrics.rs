//! Evaluation metrics: per-class Dice, True-FLT Dice, Hausdorff distance in
//! millimetres, and classifier precision/recall/F1.
//!
//! Hausdorff distances are computed between 6-neighbor boundary voxel sets
//! via an exact Euclidean distance transform, so they stay fast on full
//! volumes while matching the brute-force all-pairs definition.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMap;

/// Segmentation classes reported in the tables, in order.
pub const REPORTED_CLASSES: [(u8, &str); 3] = [(1, "TL"), (2, "FL"), (3, "FLT")];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// Dice for TL, FL, FLT in that order.
    pub dice: [f64; 3],
    /// Hausdorff in mm; `None` when either mask is empty for that class.
    pub hd_mm: [Option<f64>; 3],
    pub gt_has_flt: bool,
    pub pred_has_flt: bool,
}

/// Mean ± std with the number of contributing cases.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

fn stats(values: &[f64]) -> Option<Stats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Stats { mean, std: var.sqrt(), count: values.len() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub cases: Vec<CaseMetrics>,
    /// Per-class Dice stats over all evaluated cases (TL, FL, FLT).
    pub dice: [Option<Stats>; 3],
    /// FLT Dice restricted to cases where the ground truth has FLT.
    pub true_flt_dice: Option<Stats>,
    /// Per-class HD stats over eligible cases only.
    pub hd_mm: [Option<Stats>; 3],
    pub classifier: ClassifierMetrics,
    /// Ground-truth ids with no matching prediction, excluded from stats.
    pub failed_cases: Vec<String>,
}

fn check_aligned(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    for i in 0..3 {
        if (pred.spacing[i] - gt.spacing[i]).abs() > 1e-6 {
            return Err(Error::Contract("prediction/ground-truth spacing mismatch".into()));
        }
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; both empty → 1.0, exactly one empty → 0.0.
pub fn dice_coefficient(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    check_aligned(pred, gt)?;
    let mut p = 0usize;
    let mut g = 0usize;
    let mut both = 0usize;
    for (&a, &b) in pred.data.iter().zip(gt.data.iter()) {
        let ia = a == class_id;
        let ib = b == class_id;
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if p == 0 && g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// Class voxels with at least one 6-neighbor outside the class (including
/// the volume border).
fn boundary_voxels(mask: &Array3<bool>) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                if !mask[[i, j, k]] {
                    continue;
                }
                let interior = i > 0
                    && i + 1 < d
                    && j > 0
                    && j + 1 < h
                    && k > 0
                    && k + 1 < w
                    && mask[[i - 1, j, k]]
                    && mask[[i + 1, j, k]]
                    && mask[[i, j - 1, k]]
                    && mask[[i, j + 1, k]]
                    && mask[[i, j, k - 1]]
                    && mask[[i, j, k + 1]];
                if !interior {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Felzenszwalb–Huttenlocher 1D squared distance transform with sample
/// positions `i * step`.
fn edt_1d(f: &[f64], step: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let x = |i: usize| i as f64 * step;
    for q in 1..n {
        if !f[q].is_finite() && f[q] > 0.0 {
            continue;
        }
        loop {
            let p = v[k];
            if !f[p].is_finite() && f[p] > 0.0 {
                // previous parabola at +inf never wins
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * x(q) - 2.0 * x(p));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < x(q) {
            k += 1;
        }
        let p = v[k];
        d[q] = if f[p].is_finite() { (x(q) - x(p)).powi(2) + f[p] } else { f64::INFINITY };
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed voxel, for anisotropic spacing.
fn edt_3d(shape: (usize, usize, usize), seeds: &[[usize; 3]], spacing: [f64; 3]) -> Array3<f64> {
    let (d0, d1, d2) = shape;
    let mut dist = Array3::<f64>::from_elem(shape, f64::INFINITY);
    for s in seeds {
        dist[[s[0], s[1], s[2]]] = 0.0;
    }
    let max_len = d0.max(d1).max(d2);
    let mut f = vec![0.0f64; max_len];
    let mut d = vec![0.0f64; max_len];
    let mut v = vec![0usize; max_len];
    let mut z = vec![0.0f64; max_len + 1];

    // axis 2
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                f[k] = dist[[i, j, k]];
            }
            edt_1d(&f[..d2], spacing[2], &mut d[..d2], &mut v, &mut z);
            for k in 0..d2 {
                dist[[i, j, k]] = d[k];
            }
        }
    }
    // axis 1
    for i in 0..d0 {
        for k in 0..d2 {
            for j in 0..d1 {
                f[j] = dist[[i, j, k]];
            }
            edt_1d(&f[..d1], spacing[1], &mut d[..d1], &mut v, &mut z);
            for j in 0..d1 {
                dist[[i, j, k]] = d[j];
            }
        }
    }
    // axis 0
    for j in 0..d1 {
        for k in 0..d2 {
            for i in 0..d0 {
                f[i] = dist[[i, j, k]];
            }
            edt_1d(&f[..d0], spacing[0], &mut d[..d0], &mut v, &mut z);
            for i in 0..d0 {
                dist[[i, j, k]] = d[i];
            }
        }
    }
    dist
}

fn class_mask(lm: &LabelMap, class_id: u8) -> Array3<bool> {
    lm.data.mapv(|v| v == class_id)
}

/// Directed distances (mm) from each boundary voxel of `from` to the
/// nearest boundary voxel of `to`.
fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], shape: (usize, usize, usize), spacing: [f64; 3]) -> Vec<f64> {
    let edt = edt_3d(shape, to, spacing);
    from.iter().map(|p| edt[[p[0], p[1], p[2]]].sqrt()).collect()
}

/// Symmetric Hausdorff distance in mm between the 6-neighbor boundaries of
/// the two class masks; `None` when either mask is empty.
pub fn hausdorff_mm(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<Option<f64>> {
    hausdorff_mm_percentile(pred, gt, class_id, None)
}

/// Hausdorff with an optional percentile (e.g. `Some(95.0)`) applied to the
/// directed boundary distances instead of the exact maximum.
pub fn hausdorff_mm_percentile(
    pred: &LabelMap,
    gt: &LabelMap,
    class_id: u8,
    percentile: Option<f64>,
) -> Result<Option<f64>> {
    check_aligned(pred, gt)?;
    let pm = class_mask(pred, class_id);
    let gm = class_mask(gt, class_id);
    let pb = boundary_voxels(&pm);
    let gb = boundary_voxels(&gm);
    if pb.is_empty() || gb.is_empty() {
        return Ok(None);
    }
    let shape = pred.data.dim();
    let spacing = pred.spacing;
    let reduce = |mut d: Vec<f64>| -> f64 {
        match percentile {
            None => d.iter().cloned().fold(0.0, f64::max),
            Some(p) => {
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let idx = ((p / 100.0) * (d.len() - 1) as f64).round() as usize;
                d[idx.min(d.len() - 1)]
            }
        }
    };
    let fwd = reduce(directed_distances(&pb, &gb, shape, spacing));
    let bwd = reduce(directed_distances(&gb, &pb, shape, spacing));
    Ok(Some(fwd.max(bwd)))
}

/// Mean ± std of FLT Dice over ground-truth FLT-positive cases; `None`
/// (never 0) when the cohort has no such cases.
pub fn true_flt_dice(cases: &[CaseMetrics]) -> Option<Stats> {
    let values: Vec<f64> = cases.iter().filter(|c| c.gt_has_flt).map(|c| c.dice[2]).collect();
    stats(&values)
}

/// Precision/recall/F1 with FLT-present as the positive class.
pub fn classifier_metrics(pred_flags: &[bool], gt_flags: &[bool]) -> Result<ClassifierMetrics> {
    if pred_flags.len() != gt_flags.len() {
        return Err(Error::Contract(format!(
            "classifier flag lengths differ: {} vs {}",
            pred_flags.len(),
            gt_flags.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred_flags.iter().zip(gt_flags) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(ClassifierMetrics { precision, recall, f1, tp, fp, fn_, tn })
}

/// Per-case metrics for one prediction/ground-truth pair.
pub fn case_metrics(pred: &LabelMap, gt: &LabelMap) -> Result<CaseMetrics> {
    let mut dice = [0.0f64; 3];
    let mut hd_mm = [None; 3];
    for (slot, &(class_id, _)) in REPORTED_CLASSES.iter().enumerate() {
        dice[slot] = dice_coefficient(pred, gt, class_id)?;
        hd_mm[slot] = hausdorff_mm(pred, gt, class_id)?;
    }
    Ok(CaseMetrics {
        case_id: gt.id.clone(),
        dice,
        hd_mm,
        gt_has_flt: gt.has_flt(),
        pred_has_flt: pred.has_flt(),
    })
}

/// Table-1/Table-2 style aggregation over a cohort. Predictions are keyed
/// by case id; ground truths without one are reported as failed cases.
pub fn evaluate_cohort(
    predictions: &BTreeMap<String, LabelMap>,
    ground_truths: &[LabelMap],
) -> Result<AggregateReport> {
    let mut cases = Vec::new();
    let mut failed = Vec::new();
    for gt in ground_truths {
        match predictions.get(&gt.id) {
            Some(pred) => cases.push(case_metrics(pred, gt)?),
            None => failed.push(gt.id.clone()),
        }
    }
    let mut dice = [None; 3];
    let mut hd = [None; 3];
    for slot in 0..3 {
        let dv: Vec<f64> = cases.iter().map(|c| c.dice[slot]).collect();
        dice[slot] = stats(&dv);
        let hv: Vec<f64> = cases.iter().filter_map(|c| c.hd_mm[slot]).collect();
        hd[slot] = stats(&hv);
    }
    let pred_flags: Vec<bool> = cases.iter().map(|c| c.pred_has_flt).collect();
    let gt_flags: Vec<bool> = cases.iter().map(|c| c.gt_has_flt).collect();
    let classifier = classifier_metrics(&pred_flags, &gt_flags)?;
    let true_flt = true_flt_dice(&cases);
    Ok(AggregateReport {
        cases,
        dice,
        true_flt_dice: true_flt,
        hd_mm: hd,
        classifier,
        failed_cases: failed,
    })
}

impl AggregateReport {
    /// Writes `metrics.json` plus a `metrics.csv` mirroring the Table 1
    /// (DC) and Table 2 (HD) column layout.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("metrics.json"), json)?;

        let mut w = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_err)?;
        w.write_record(["metric", "TL", "FL", "FLT", "True FLT"]).map_err(csv_err)?;
        let fmt = |s: &Option<Stats>| match s {
            Some(st) => format!("{:.4} ± {:.4} (n={})", st.mean, st.std, st.count),
            None => "-".to_string(),
        };
        w.write_record([
            "DC".to_string(),
            fmt(&self.dice[0]),
            fmt(&self.dice[1]),
            fmt(&self.dice[2]),
            fmt(&self.true_flt_dice),
        ])
        .map_err(csv_err)?;
        w.write_record([
            "HD (mm)".to_string(),
            fmt(&self.hd_mm[0]),
            fmt(&self.hd_mm[1]),
            fmt(&self.hd_mm[2]),
            "-".to_string(),
        ])
        .map_err(csv_err)?;
        let fmt_opt = |v: &Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        w.write_record([
            "classifier P/R/F1".to_string(),
            fmt_opt(&self.classifier.precision),
            fmt_opt(&self.classifier.recall),
            fmt_opt(&self.classifier.f1),
            "-".to_string(),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Contract(format!("csv write failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lm(data: Array3<u8>, spacing: [f64; 3], id: &str) -> LabelMap {
        LabelMap::with_spacing(data, spacing, id).unwrap()
    }

    fn brute_force_hd(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Option<f64> {
        let pb = boundary_voxels(&class_mask(pred, class_id));
        let gb = boundary_voxels(&class_mask(gt, class_id));
        if pb.is_empty() || gb.is_empty() {
            return None;
        }
        let sp = pred.spacing;
        let dist = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
            (0..3)
                .map(|i| ((a[i] as f64 - b[i] as f64) * sp[i]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
            from.iter()
                .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        Some(directed(&pb, &gb).max(directed(&gb, &pb)))
    }

    #[test]
    fn dice_identity_and_empties() {
        let mut a = Array3::<u8>::zeros((6, 6, 6));
        a.slice_mut(ndarray::s![1..3, 1..3, 1..3]).fill(1);
        let x = lm(a.clone(), [1.0; 3], "a");
        assert_eq!(dice_coefficient(&x, &x, 1).unwrap(), 1.0);
        // exactly one empty
        let empty = lm(Array3::zeros((6, 6, 6)), [1.0; 3], "b");
        assert_eq!(dice_coefficient(&empty, &x, 1).unwrap(), 0.0);
        assert_eq!(dice_coefficient(&x, &empty, 1).unwrap(), 0.0);
        // both empty
        assert_eq!(dice_coefficient(&empty, &empty, 1).unwrap(), 1.0);
    }

    #[test]
    fn dice_half_overlap_cube() {
        // 2x2x2 cubes overlapping in 4 voxels: 2*4/(8+8) = 0.5
        let mut p = Array3::<u8>::zeros((6, 6, 6));
        p.slice_mut(ndarray::s![1..3, 1..3, 1..3]).fill(1);
        let mut g = Array3::<u8>::zeros((6, 6, 6));
        g.slice_mut(ndarray::s![1..3, 1..3, 2..4]).fill(1);
        let d = dice_coefficient(&lm(p, [1.0; 3], "p"), &lm(g, [1.0; 3], "g"), 1).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(0..2u8));
        let g = Array3::from_shape_fn((8, 8, 8), |_| rng.random_range(0..2u8));
        let (p, g) = (lm(p, [1.0; 3], "p"), lm(g, [1.0; 3], "g"));
        assert_eq!(
            dice_coefficient(&p, &g, 1).unwrap(),
            dice_coefficient(&g, &p, 1).unwrap()
        );
    }

    #[test]
    fn hausdorff_trivial_cases() {
        let mut a = Array3::<u8>::zeros((8, 8, 8));
        a.slice_mut(ndarray::s![2..5, 2..5, 2..5]).fill(1);
        let x = lm(a, [1.5; 3], "a");
        assert_eq!(hausdorff_mm(&x, &x, 1).unwrap(), Some(0.0));

        // single voxels 4 apart along one axis at 1.5 mm spacing
        let mut p = Array3::<u8>::zeros((8, 8, 8));
        p[[1, 3, 3]] = 1;
        let mut g = Array3::<u8>::zeros((8, 8, 8));
        g[[5, 3, 3]] = 1;
        let hd = hausdorff_mm(&lm(p, [1.5; 3], "p"), &lm(g, [1.5; 3], "g"), 1).unwrap().unwrap();
        assert!((hd - 6.0).abs() < 1e-9);
    }

    #[test]
    fn hausdorff_empty_mask_is_ineligible() {
        let mut p = Array3::<u8>::zeros((4, 4, 4));
        p[[1, 1, 1]] = 1;
        let p = lm(p, [1.0; 3], "p");
        let empty = lm(Array3::zeros((4, 4, 4)), [1.0; 3], "e");
        assert_eq!(hausdorff_mm(&p, &empty, 1).unwrap(), None);
        assert_eq!(hausdorff_mm(&empty, &p, 1).unwrap(), None);
    }

    #[test]
    fn hausdorff_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let spacing = [
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            ];
            let p = Array3::from_shape_fn((12, 12, 12), |_| (rng.random::<f64>() < 0.1) as u8);
            let g = Array3::from_shape_fn((12, 12, 12), |_| (rng.random::<f64>() < 0.1) as u8);
            let (p, g) = (lm(p, spacing, "p"), lm(g, spacing, "g"));
            let fast = hausdorff_mm(&p, &g, 1).unwrap();
            let slow = brute_force_hd(&p, &g, 1);
            match (fast, slow) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}"),
                (a, b) => assert_eq!(a, b, "trial {trial}"),
            }
        }
    }

    #[test]
    fn hausdorff_scales_with_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Array3::from_shape_fn((10, 10, 10), |_| (rng.random::<f64>() < 0.15) as u8);
        let g = Array3::from_shape_fn((10, 10, 10), |_| (rng.random::<f64>() < 0.15) as u8);
        let h1 = hausdorff_mm(&lm(p.clone(), [1.0; 3], "p"), &lm(g.clone(), [1.0; 3], "g"), 1)
            .unwrap()
            .unwrap();
        let h3 = hausdorff_mm(&lm(p, [3.0; 3], "p"), &lm(g, [3.0; 3], "g"), 1).unwrap().unwrap();
        assert!((h3 - 3.0 * h1).abs() < 1e-9);
    }

    #[test]
    fn true_flt_dice_examples() {
        let case = |id: &str, flt_dice: f64, gt_flt: bool| CaseMetrics {
            case_id: id.into(),
            dice: [1.0, 1.0, flt_dice],
            hd_mm: [None; 3],
            gt_has_flt: gt_flt,
            pred_has_flt: false,
        };
        let cohort = vec![case("a", 0.6, true), case("b", 0.8, true), case("c", 0.0, false)];
        let t = true_flt_dice(&cohort).unwrap();
        assert!((t.mean - 0.7).abs() < 1e-12);
        assert_eq!(t.count, 2);
        // plain FLT mean over all three cases
        let plain = cohort.iter().map(|c| c.dice[2]).sum::<f64>() / 3.0;
        assert!((plain - 0.466_666_7).abs() < 1e-6);
        assert!(plain <= t.mean);
        // no FLT-positive cases -> absent, never zero
        assert!(true_flt_dice(&[case("d", 0.5, false)]).is_none());
    }

    #[test]
    fn classifier_metric_examples() {
        let m = classifier_metrics(&[true, true], &[true, true]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (Some(1.0), Some(1.0), Some(1.0)));

        let m = classifier_metrics(&[false, false, false], &[true, true, false]).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));

        // TP=3, FP=1, FN=2
        let pred = [true, true, true, true, false, false, false];
        let gt = [true, true, true, false, true, true, false];
        let m = classifier_metrics(&pred, &gt).unwrap();
        assert!((m.precision.unwrap() - 0.75).abs() < 1e-12);
        assert!((m.recall.unwrap() - 0.6).abs() < 1e-12);
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn cohort_identity_and_all_background() {
        let mut data = Array3::<u8>::zeros((8, 8, 8));
        data.slice_mut(ndarray::s![1..4, 1..4, 1..4]).fill(1);
        data.slice_mut(ndarray::s![4..6, 4..6, 4..6]).fill(2);
        data[[6, 6, 6]] = 3;
        let gt = lm(data.clone(), [1.0; 3], "case1");
        let mut preds = BTreeMap::new();
        preds.insert("case1".to_string(), gt.clone());
        let report = evaluate_cohort(&preds, std::slice::from_ref(&gt)).unwrap();
        for slot in 0..3 {
            assert_eq!(report.dice[slot].unwrap().mean, 1.0);
            assert_eq!(report.hd_mm[slot].unwrap().mean, 0.0);
        }
        assert_eq!(report.true_flt_dice.unwrap().mean, 1.0);

        let mut bg_preds = BTreeMap::new();
        bg_preds.insert("case1".to_string(), lm(Array3::zeros((8, 8, 8)), [1.0; 3], "case1"));
        let report = evaluate_cohort(&bg_preds, std::slice::from_ref(&gt)).unwrap();
        for slot in 0..3 {
            assert_eq!(report.dice[slot].unwrap().mean, 0.0);
            assert!(report.hd_mm[slot].is_none());
        }
    }

    #[test]
    fn missing_prediction_reported_as_failed() {
        let gt = lm(Array3::zeros((4, 4, 4)), [1.0; 3], "orphan");
        let report = evaluate_cohort(&BTreeMap::new(), std::slice::from_ref(&gt)).unwrap();
        assert_eq!(report.failed_cases, vec!["orphan".to_string()]);
        assert!(report.cases.is_empty());
    }

    #[test]
    fn ten_case_cohort_matches_hand_aggregates() {
        // gt: fixed TL cube; pred for case i: the cube shifted by i voxels
        let side = 10usize;
        let mut gts = Vec::new();
        let mut preds = BTreeMap::new();
        let mut expected_dice = Vec::new();
        for i in 0..5usize {
            let mut g = Array3::<u8>::zeros((side, side, side));
            g.slice_mut(ndarray::s![2..6, 2..6, 2..6]).fill(1);
            let mut p = Array3::<u8>::zeros((side, side, side));
            p.slice_mut(ndarray::s![2 + i..6 + i, 2..6, 2..6]).fill(1);
            let id = format!("c{i}");
            // overlap along the shifted axis: (4 − i) planes of 16 voxels
            let inter = (4 - i) * 16;
            expected_dice.push(2.0 * inter as f64 / (64 + 64) as f64);
            gts.push(lm(g, [1.0; 3], &id));
            preds.insert(id.clone(), lm(p, [1.0; 3], &id));
        }
        let report = evaluate_cohort(&preds, &gts).unwrap();
        let got = report.dice[0].unwrap();
        let mean = expected_dice.iter().sum::<f64>() / 5.0;
        let var = expected_dice.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((got.mean - mean).abs() < 1e-12);
        assert!((got.std - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_save_writes_json_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let gt = lm(Array3::zeros((4, 4, 4)), [1.0; 3], "a");
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), gt.clone());
        let report = evaluate_cohort(&preds, std::slice::from_ref(&gt)).unwrap();
        report.save(dir.path()).unwrap();
        assert!(dir.path().join("metrics.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.contains("True FLT"));
        assert!(csv.contains("HD (mm)"));
    }
}
