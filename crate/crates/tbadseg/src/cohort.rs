//! Case inventory, FLT-presence bookkeeping, and stratified splits.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One image/label pair plus the metadata the splitter needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub has_flt: bool,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub schema_version: u32,
    pub cases: Vec<CaseRecord>,
    /// Image files without a label; excluded from supervised splits.
    pub unlabeled: Vec<String>,
    pub warnings: Vec<String>,
}

impl CohortManifest {
    pub fn flt_positive_count(&self) -> usize {
        self.cases.iter().filter(|c| c.has_flt).count()
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// Train/validation/test assignment for one fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl FoldSplit {
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Contract(format!("case {id} assigned to multiple roles")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub schema_version: u32,
    pub seed: u64,
    pub folds: Vec<FoldSplit>,
}

impl SplitFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Scan `dir/images` and `dir/labels` for `.nii`/`.nii.gz` pairs.
///
/// `has_flt` is computed by scanning each label map for class 3.
pub fn build_manifest(data_dir: &Path) -> Result<CohortManifest> {
    let image_dir = data_dir.join("images");
    let label_dir = data_dir.join("labels");
    let mut warnings = Vec::new();
    let mut unlabeled = Vec::new();
    let mut cases = Vec::new();

    let mut image_files: Vec<PathBuf> = Vec::new();
    if image_dir.is_dir() {
        for entry in std::fs::read_dir(&image_dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
            if name.ends_with(".nii") || name.ends_with(".nii.gz") {
                image_files.push(path);
            }
        }
    } else {
        warnings.push(format!("no images directory under {}", data_dir.display()));
    }
    image_files.sort();
    if image_files.is_empty() {
        warnings.push("no image files found".into());
    }

    for image_path in image_files {
        let name = image_path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        let id = name.trim_end_matches(".gz").trim_end_matches(".nii").to_string();
        let label_path = [format!("{id}.nii.gz"), format!("{id}.nii")]
            .iter()
            .map(|n| label_dir.join(n))
            .find(|p| p.exists());
        match label_path {
            None => {
                warnings.push(format!("case {id} has no label; excluded from supervised splits"));
                unlabeled.push(id);
            }
            Some(lp) => {
                let (volume, label) = nifti::load_case(&image_path, Some(&lp))?;
                let label = label.expect("label path was given");
                cases.push(CaseRecord {
                    id,
                    image_path,
                    label_path: Some(lp),
                    has_flt: label.has_flt(),
                    shape: volume.shape(),
                    spacing: volume.spacing,
                });
            }
        }
    }

    Ok(CohortManifest { schema_version: MANIFEST_SCHEMA_VERSION, cases, unlabeled, warnings })
}

fn strata(manifest: &CohortManifest, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut pos: Vec<String> = manifest.cases.iter().filter(|c| c.has_flt).map(|c| c.id.clone()).collect();
    let mut neg: Vec<String> = manifest.cases.iter().filter(|c| !c.has_flt).map(|c| c.id.clone()).collect();
    pos.sort();
    neg.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    (pos, neg)
}

/// k-fold cross-validation with a constant FLT ratio per fold.
///
/// FLT-positive and FLT-negative cases are shuffled independently and dealt
/// round-robin into k test buckets; fold i uses bucket i as test, bucket
/// (i+1) mod k as validation, and the rest as training.
pub fn stratified_folds(manifest: &CohortManifest, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InfeasibleSplit(format!("k = {k} must be at least 2")));
    }
    let n = manifest.cases.len();
    if n < k {
        return Err(Error::InfeasibleSplit(format!("cohort of {n} cases cannot fill {k} folds")));
    }
    let (pos, neg) = strata(manifest, seed);
    let mut buckets: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in pos.into_iter().enumerate() {
        buckets[i % k].push(id);
    }
    for (i, id) in neg.into_iter().enumerate() {
        buckets[i % k].push(id);
    }

    let mut folds = Vec::with_capacity(k);
    for fold_index in 0..k {
        let test = buckets[fold_index].clone();
        let validation = buckets[(fold_index + 1) % k].clone();
        let train: Vec<String> = (0..k)
            .filter(|&b| b != fold_index && b != (fold_index + 1) % k)
            .flat_map(|b| buckets[b].iter().cloned())
            .collect();
        let split = FoldSplit { fold_index, train, validation, test };
        split.check_disjoint()?;
        folds.push(split);
    }
    Ok(folds)
}

/// Single stratified holdout split with fixed role sizes.
pub fn holdout_split(
    manifest: &CohortManifest,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<FoldSplit> {
    let n = manifest.cases.len();
    if n_train + n_val + n_test != n {
        return Err(Error::InfeasibleSplit(format!(
            "role sizes {n_train}+{n_val}+{n_test} do not sum to cohort size {n}"
        )));
    }
    let (pos, neg) = strata(manifest, seed);
    let targets = [n_train, n_val, n_test];

    // largest-remainder apportionment of the positive stratum across roles
    let mut pos_quota = [0usize; 3];
    let mut rema: Vec<(f64, usize)> = Vec::new();
    for i in 0..3 {
        let exact = pos.len() as f64 * targets[i] as f64 / n as f64;
        pos_quota[i] = exact.floor() as usize;
        rema.push((exact - exact.floor(), i));
    }
    let mut assigned: usize = pos_quota.iter().sum();
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in rema.iter() {
        if assigned == pos.len() {
            break;
        }
        pos_quota[i] += 1;
        assigned += 1;
    }
    for i in 0..3 {
        if pos_quota[i] > targets[i] {
            return Err(Error::InfeasibleSplit("stratum larger than role".into()));
        }
    }

    let mut roles: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut pos_iter = pos.into_iter();
    for i in 0..3 {
        roles[i].extend(pos_iter.by_ref().take(pos_quota[i]));
    }
    let mut neg_iter = neg.into_iter();
    for i in 0..3 {
        let need = targets[i] - roles[i].len();
        roles[i].extend(neg_iter.by_ref().take(need));
        if roles[i].len() != targets[i] {
            return Err(Error::InfeasibleSplit("not enough cases to fill roles".into()));
        }
    }
    let [train, validation, test] = roles;
    let split = FoldSplit { fold_index: 0, train, validation, test };
    split.check_disjoint()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_manifest(n_pos: usize, n_neg: usize) -> CohortManifest {
        let mut cases = Vec::new();
        for i in 0..(n_pos + n_neg) {
            cases.push(CaseRecord {
                id: format!("case_{i:03}"),
                image_path: PathBuf::from(format!("images/case_{i:03}.nii.gz")),
                label_path: Some(PathBuf::from(format!("labels/case_{i:03}.nii.gz"))),
                has_flt: i < n_pos,
                shape: [64, 64, 64],
                spacing: [1.5; 3],
            });
        }
        CohortManifest { schema_version: MANIFEST_SCHEMA_VERSION, cases, unlabeled: vec![], warnings: vec![] }
    }

    #[test]
    fn five_folds_keep_flt_ratio() {
        let manifest = synthetic_manifest(68, 32);
        let folds = stratified_folds(&manifest, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all_test: Vec<String> = Vec::new();
        for fold in &folds {
            let pos = fold.test.iter().filter(|id| manifest.case(id).unwrap().has_flt).count();
            let neg = fold.test.len() - pos;
            assert!(pos == 13 || pos == 14, "fold test FLT count {pos}");
            assert!(neg == 6 || neg == 7, "fold test non-FLT count {neg}");
            all_test.extend(fold.test.iter().cloned());
        }
        all_test.sort();
        let mut ids: Vec<String> = manifest.cases.iter().map(|c| c.id.clone()).collect();
        ids.sort();
        assert_eq!(all_test, ids, "test sets must partition the cohort");
    }

    #[test]
    fn two_folds_on_four_cases() {
        let manifest = synthetic_manifest(2, 2);
        let folds = stratified_folds(&manifest, 2, 0).unwrap();
        for fold in &folds {
            let pos = fold.test.iter().filter(|id| manifest.case(id).unwrap().has_flt).count();
            assert_eq!(pos, 1);
        }
    }

    #[test]
    fn folds_are_deterministic() {
        let manifest = synthetic_manifest(10, 5);
        let a = stratified_folds(&manifest, 5, 42).unwrap();
        let b = stratified_folds(&manifest, 5, 42).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.train, fb.train);
            assert_eq!(fa.test, fb.test);
        }
    }

    #[test]
    fn oversized_k_rejected() {
        let manifest = synthetic_manifest(2, 1);
        assert!(matches!(stratified_folds(&manifest, 5, 0), Err(Error::InfeasibleSplit(_))));
    }

    #[test]
    fn holdout_preserves_flt_ratio() {
        let manifest = synthetic_manifest(68, 32);
        let split = holdout_split(&manifest, 80, 10, 10, 3).unwrap();
        assert_eq!(split.train.len(), 80);
        assert_eq!(split.validation.len(), 10);
        assert_eq!(split.test.len(), 10);
        let pos_test = split.test.iter().filter(|id| manifest.case(id).unwrap().has_flt).count();
        assert!((6..=7).contains(&pos_test), "test FLT count {pos_test}");
        // within 1/|role| of the cohort fraction, per role
        for (role, ids) in [("train", &split.train), ("val", &split.validation), ("test", &split.test)] {
            let pos = ids.iter().filter(|id| manifest.case(id).unwrap().has_flt).count();
            let frac = pos as f64 / ids.len() as f64;
            assert!(
                (frac - 0.68).abs() <= 1.0 / ids.len() as f64 + 1e-12,
                "{role} FLT fraction {frac}"
            );
        }
    }

    #[test]
    fn holdout_count_mismatch_rejected() {
        let manifest = synthetic_manifest(68, 32);
        assert!(matches!(
            holdout_split(&manifest, 90, 10, 10, 0),
            Err(Error::InfeasibleSplit(_))
        ));
    }
}
