//! End-to-end orchestration: preprocess a cohort, train whichever networks
//! the configured pipeline needs, and run inference on held-out cases.
//!
//! Stage wiring per pipeline:
//! - single_step: one 4-class segmenter.
//! - sequential: binary aorta stage, then a 4-class refiner whose second
//!   input channel is the frozen stage-1 aorta probability.
//! - multitask: binary FLT branch + 3-class TL/FL branch trained in
//!   parallel, then a 3-channel fusion stage; the optional FLT-presence
//!   classifier trains on the same split.
//! - ensemble: the primary segmenter plus a partner, averaged at inference.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};

use crate::augment::AugmentConfig;
use crate::cohort::{CaseRecord, CohortManifest, FoldSplit, MANIFEST_SCHEMA_VERSION};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::networks::{bce_with_logit, scalar_seed, Classifier, Segmenter, SegmenterConfig};
use crate::nifti;
use crate::pipelines::{
    derive_aorta_label, image_stack, run_ensemble, run_multitask, run_sequential,
    run_single_step, segmenter_probs, PipelineConfig, PipelineKind, ProbabilityMap,
};
use crate::preprocess::{
    clip_and_normalize, crop_foreground, resample_image, resample_label,
    PreprocessConfig,
};
use crate::tensor::{AdamConfig, Graph};
use crate::training::{
    load_checkpoint, save_checkpoint, stage_dir, train_stage, BestPointer, TrainCase, TrainConfig,
    TrainingHistory,
};
use crate::volume::{LabelMap, Volume, FL, FLT, TL};

/// A preprocessed image/label pair ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub id: String,
    pub volume: Volume,
    pub label: LabelMap,
}

/// Run the full preprocessing chain on one raw case.
pub fn preprocess_case(
    volume: &Volume,
    label: Option<&LabelMap>,
    cfg: &PreprocessConfig,
) -> Result<(Volume, Option<LabelMap>)> {
    let volume = clip_and_normalize(volume, cfg)?;
    let volume = resample_image(&volume, cfg)?;
    let label = label.map(|l| resample_label(l, cfg)).transpose()?;
    let (volume, label, _crop) = crop_foreground(&volume, label.as_ref(), cfg)?;
    Ok((volume, label))
}

/// Preprocess every case in `manifest` into `out_dir` (cohort layout) and
/// write the new manifest there.
pub fn preprocess_cohort(
    manifest: &CohortManifest,
    cfg: &PreprocessConfig,
    out_dir: &Path,
) -> Result<CohortManifest> {
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for record in &manifest.cases {
        let (volume, label) = nifti::load_case(&record.image_path, record.label_path.as_deref())?;
        let (volume, label) = preprocess_case(&volume, label.as_ref(), cfg)?;
        let saved = nifti::save_case(&volume, label.as_ref(), out_dir)?;
        cases.push(CaseRecord {
            id: record.id.clone(),
            image_path: saved.image_path,
            label_path: saved.label_path,
            has_flt: label.as_ref().map(|l| l.has_flt()).unwrap_or(false),
            shape: volume.shape(),
            spacing: volume.spacing,
        });
    }
    let out = CohortManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        cases,
        unlabeled: manifest.unlabeled.clone(),
        warnings: manifest.warnings.clone(),
    };
    out.save(&out_dir.join("manifest.json"))?;
    Ok(out)
}

/// Load the named cases from disk, in the order given by `ids`.
pub fn load_cases(manifest: &CohortManifest, ids: &[String]) -> Result<Vec<PreparedCase>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let record = manifest
            .case(id)
            .ok_or_else(|| Error::Contract(format!("case {id} missing from manifest")))?;
        let label_path = record
            .label_path
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("case {id} has no label")))?;
        let (volume, label) = nifti::load_case(&record.image_path, Some(label_path))?;
        out.push(PreparedCase { id: id.clone(), volume, label: label.unwrap() });
    }
    Ok(out)
}

/// Binary FLT-branch target: FLT voxels -> 1, everything else -> 0.
pub fn flt_binary_label(label: &LabelMap) -> LabelMap {
    let data = label.data.mapv(|v| if v == FLT { 1 } else { 0 });
    LabelMap::new(data, label.spacing, label.affine, &label.id).expect("binary label valid")
}

/// TL/FL-branch target: TL -> 1, FL and FLT -> 2 (thrombus lines the false
/// lumen, so it belongs to the FL region for this branch).
pub fn tlfl_label(label: &LabelMap) -> LabelMap {
    let data = label.data.mapv(|v| match v {
        TL => 1,
        FL | FLT => 2,
        _ => 0,
    });
    LabelMap::new(data, label.spacing, label.affine, &label.id).expect("tlfl label valid")
}

fn derive_seg(base: &SegmenterConfig, in_channels: usize, out_classes: usize, seed_salt: u64) -> SegmenterConfig {
    SegmenterConfig {
        in_channels,
        out_classes,
        seed: base.seed.wrapping_add(seed_salt),
        ..base.clone()
    }
}

fn to_train_cases(cases: &[PreparedCase], relabel: Option<fn(&LabelMap) -> LabelMap>) -> Vec<TrainCase> {
    cases
        .iter()
        .map(|c| {
            let label = match relabel {
                Some(f) => f(&c.label),
                None => c.label.clone(),
            };
            TrainCase::new(c.volume.clone(), label)
        })
        .collect()
}

/// Frozen-upstream probability channels for every case, computed with the
/// inference-time sliding window.
fn upstream_channels(
    cases: &mut [TrainCase],
    extract: impl Fn(&Volume) -> Result<Vec<Array3<f32>>>,
) -> Result<()> {
    for case in cases.iter_mut() {
        case.extra_channels = extract(&case.volume)?;
    }
    Ok(())
}

/// After training, rewind the model to the best-scoring epoch recorded in
/// `best.json` (no-op when the stage ran without a run directory).
fn restore_best(model: &mut Segmenter, run_dir: Option<&Path>, stage: &str) -> Result<()> {
    let Some(base) = run_dir else { return Ok(()) };
    let dir = stage_dir(base, stage);
    let pointer: BestPointer =
        serde_json::from_str(&std::fs::read_to_string(dir.join("best.json"))?)?;
    load_checkpoint(&dir.join(&pointer.checkpoint))?.apply_to(&mut model.params)
}

fn trained_stage(
    seg_cfg: SegmenterConfig,
    stage: &str,
    train: &[TrainCase],
    val: &[TrainCase],
    epochs: usize,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    run_dir: Option<&Path>,
) -> Result<(Segmenter, TrainingHistory)> {
    let mut model = Segmenter::new(seg_cfg)?;
    let history = train_stage(&mut model, stage, train, val, epochs, cfg, aug, run_dir)?;
    restore_best(&mut model, run_dir, stage)?;
    Ok((model, history))
}

/// One gradient step of the FLT-presence classifier on a whole padded
/// volume with a binary cross-entropy objective.
pub fn classifier_train_step(
    model: &mut Classifier,
    image: &Volume,
    target: bool,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let div = model.spatial_divisor();
    let (d, h, w) = image.data.dim();
    let pad = |x: usize| x.div_ceil(div) * div;
    let mut input = Array4::<f32>::zeros((1, pad(d), pad(h), pad(w)));
    input.slice_mut(ndarray::s![0, ..d, ..h, ..w]).assign(&image.data);

    let mut g = Graph::new();
    let x = g.leaf(input.into_dyn());
    let out = model.forward(&mut g, x)?;
    let logit = g.value(out)[0];
    let (loss, grad) = bce_with_logit(logit, target);
    model.params.zero_grads();
    g.backward(out, scalar_seed(grad), &mut model.params);
    let adam = AdamConfig { weight_decay: cfg.weight_decay as f32, ..AdamConfig::default() };
    model.params.adam_step(lr as f32, &adam);
    Ok(loss)
}

/// Train the FLT-presence classifier; returns per-epoch mean losses.
pub fn train_classifier(
    model: &mut Classifier,
    cases: &[PreparedCase],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if cases.is_empty() {
        return Err(Error::Contract("classifier training split is empty".into()));
    }
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = crate::training::lr_at(epoch, cfg);
        let mut total = 0.0;
        for case in cases {
            total += classifier_train_step(model, &case.volume, case.label.has_flt(), lr, cfg)?;
        }
        losses.push(total / cases.len() as f64);
    }
    Ok(losses)
}

/// Every network a pipeline needs at inference time.
pub enum TrainedPipeline {
    SingleStep { seg: Segmenter },
    Sequential { aorta: Segmenter, refine: Segmenter },
    Multitask { classifier: Option<Classifier>, flt: Segmenter, tlfl: Segmenter, fusion: Segmenter },
    Ensemble { members: Vec<Segmenter> },
}

impl TrainedPipeline {
    pub fn predict(&self, image: &Volume, cfg: &PipelineConfig) -> Result<(LabelMap, ProbabilityMap)> {
        match self {
            TrainedPipeline::SingleStep { seg } => run_single_step(image, seg, cfg),
            TrainedPipeline::Sequential { aorta, refine } => {
                run_sequential(image, aorta, refine, cfg)
            }
            TrainedPipeline::Multitask { classifier, flt, tlfl, fusion } => {
                run_multitask(image, classifier.as_ref(), flt, tlfl, fusion, cfg)
            }
            TrainedPipeline::Ensemble { members } => {
                let refs: Vec<&Segmenter> = members.iter().collect();
                run_ensemble(image, &refs, cfg)
            }
        }
    }
}

/// Train every stage of the configured pipeline.
///
/// Histories are keyed by stage name (`seg`, `aorta`, `refine`, `flt`,
/// `tlfl`, `fusion`, `member0`, `member1`). With a `run_dir`, each stage
/// leaves checkpoints + `history.json` + `best.json` behind and the
/// returned models carry their best-epoch weights.
pub fn train_pipeline(
    cfg: &RunConfig,
    train: &[PreparedCase],
    val: &[PreparedCase],
    run_dir: Option<&Path>,
) -> Result<(TrainedPipeline, BTreeMap<String, TrainingHistory>)> {
    cfg.validate()?;
    let tc = &cfg.train;
    let aug = &cfg.augment;
    let pc = &cfg.pipeline;
    let mut histories = BTreeMap::new();

    let pipeline = match pc.kind {
        PipelineKind::SingleStep => {
            let seg_cfg = derive_seg(&cfg.segmenter, 1, 4, 0);
            let train_cases = to_train_cases(train, None);
            let val_cases = to_train_cases(val, None);
            let (seg, h) = trained_stage(
                seg_cfg, "seg", &train_cases, &val_cases, tc.epochs_primary, tc, aug, run_dir,
            )?;
            histories.insert("seg".into(), h);
            TrainedPipeline::SingleStep { seg }
        }
        PipelineKind::Sequential => {
            let train_aorta = to_train_cases(train, Some(derive_aorta_label));
            let val_aorta = to_train_cases(val, Some(derive_aorta_label));
            let (aorta, h1) = trained_stage(
                derive_seg(&cfg.segmenter, 1, 2, 0),
                "aorta",
                &train_aorta,
                &val_aorta,
                tc.epochs_primary,
                tc,
                aug,
                run_dir,
            )?;
            histories.insert("aorta".into(), h1);

            let mut train_refine = to_train_cases(train, None);
            let mut val_refine = to_train_cases(val, None);
            let aorta_channel = |volume: &Volume| -> Result<Vec<Array3<f32>>> {
                let probs = segmenter_probs(&image_stack(volume), &aorta, pc)?;
                Ok(vec![probs.index_axis(Axis(0), 1).to_owned()])
            };
            upstream_channels(&mut train_refine, &aorta_channel)?;
            upstream_channels(&mut val_refine, &aorta_channel)?;
            let (refine, h2) = trained_stage(
                derive_seg(&cfg.segmenter, 2, 4, 1),
                "refine",
                &train_refine,
                &val_refine,
                tc.epochs_cascade,
                tc,
                aug,
                run_dir,
            )?;
            histories.insert("refine".into(), h2);
            TrainedPipeline::Sequential { aorta, refine }
        }
        PipelineKind::Multitask => {
            let train_flt = to_train_cases(train, Some(flt_binary_label));
            let val_flt = to_train_cases(val, Some(flt_binary_label));
            let (flt, h1) = trained_stage(
                derive_seg(&cfg.segmenter, 1, 2, 0),
                "flt",
                &train_flt,
                &val_flt,
                tc.epochs_primary,
                tc,
                aug,
                run_dir,
            )?;
            histories.insert("flt".into(), h1);

            let train_tlfl = to_train_cases(train, Some(tlfl_label));
            let val_tlfl = to_train_cases(val, Some(tlfl_label));
            let (tlfl, h2) = trained_stage(
                derive_seg(&cfg.segmenter, 1, 3, 1),
                "tlfl",
                &train_tlfl,
                &val_tlfl,
                tc.epochs_primary,
                tc,
                aug,
                run_dir,
            )?;
            histories.insert("tlfl".into(), h2);

            let mut train_fusion = to_train_cases(train, None);
            let mut val_fusion = to_train_cases(val, None);
            let branch_channels = |volume: &Volume| -> Result<Vec<Array3<f32>>> {
                let fp = segmenter_probs(&image_stack(volume), &flt, pc)?;
                let tp = segmenter_probs(&image_stack(volume), &tlfl, pc)?;
                Ok(vec![
                    fp.index_axis(Axis(0), 1).to_owned(),
                    tp.index_axis(Axis(0), 0).mapv(|p| 1.0 - p),
                ])
            };
            upstream_channels(&mut train_fusion, &branch_channels)?;
            upstream_channels(&mut val_fusion, &branch_channels)?;
            let (fusion, h3) = trained_stage(
                derive_seg(&cfg.segmenter, 3, 4, 2),
                "fusion",
                &train_fusion,
                &val_fusion,
                tc.epochs_cascade,
                tc,
                aug,
                run_dir,
            )?;
            histories.insert("fusion".into(), h3);

            let classifier = match (&cfg.classifier, pc.bypass_classifier) {
                (Some(cls_cfg), false) => {
                    let mut cls = Classifier::new(cls_cfg.clone())?;
                    train_classifier(&mut cls, train, tc.epochs_cascade, tc)?;
                    if let Some(base) = run_dir {
                        let dir = stage_dir(base, "classifier");
                        std::fs::create_dir_all(&dir)?;
                        save_checkpoint(&dir.join("final.ckpt"), &cls.params, tc.epochs_cascade)?;
                    }
                    Some(cls)
                }
                _ => None,
            };
            TrainedPipeline::Multitask { classifier, flt, tlfl, fusion }
        }
        PipelineKind::Ensemble => {
            let partner = cfg
                .ensemble_partner
                .as_ref()
                .ok_or_else(|| Error::Config("ensemble pipeline requires a partner".into()))?;
            let train_cases = to_train_cases(train, None);
            let val_cases = to_train_cases(val, None);
            let mut members = Vec::new();
            for (i, base) in [&cfg.segmenter, partner].into_iter().enumerate() {
                let stage = format!("member{i}");
                let (seg, h) = trained_stage(
                    derive_seg(base, 1, 4, i as u64),
                    &stage,
                    &train_cases,
                    &val_cases,
                    tc.epochs_primary,
                    tc,
                    aug,
                    run_dir,
                )?;
                histories.insert(stage, h);
                members.push(seg);
            }
            TrainedPipeline::Ensemble { members }
        }
    };
    Ok((pipeline, histories))
}

/// Rebuild the configured pipeline from a training run directory, loading
/// each stage's best-epoch checkpoint.
pub fn load_pipeline(cfg: &RunConfig, run_dir: &Path) -> Result<TrainedPipeline> {
    cfg.validate()?;
    let load_stage = |seg_cfg: SegmenterConfig, stage: &str| -> Result<Segmenter> {
        let mut model = Segmenter::new(seg_cfg)?;
        restore_best(&mut model, Some(run_dir), stage)?;
        Ok(model)
    };
    Ok(match cfg.pipeline.kind {
        PipelineKind::SingleStep => {
            TrainedPipeline::SingleStep { seg: load_stage(derive_seg(&cfg.segmenter, 1, 4, 0), "seg")? }
        }
        PipelineKind::Sequential => TrainedPipeline::Sequential {
            aorta: load_stage(derive_seg(&cfg.segmenter, 1, 2, 0), "aorta")?,
            refine: load_stage(derive_seg(&cfg.segmenter, 2, 4, 1), "refine")?,
        },
        PipelineKind::Multitask => {
            let classifier = match (&cfg.classifier, cfg.pipeline.bypass_classifier) {
                (Some(cls_cfg), false) => {
                    let mut cls = Classifier::new(cls_cfg.clone())?;
                    let path = stage_dir(run_dir, "classifier").join("final.ckpt");
                    load_checkpoint(&path)?.apply_to(&mut cls.params)?;
                    Some(cls)
                }
                _ => None,
            };
            TrainedPipeline::Multitask {
                classifier,
                flt: load_stage(derive_seg(&cfg.segmenter, 1, 2, 0), "flt")?,
                tlfl: load_stage(derive_seg(&cfg.segmenter, 1, 3, 1), "tlfl")?,
                fusion: load_stage(derive_seg(&cfg.segmenter, 3, 4, 2), "fusion")?,
            }
        }
        PipelineKind::Ensemble => {
            let partner = cfg
                .ensemble_partner
                .as_ref()
                .ok_or_else(|| Error::Config("ensemble pipeline requires a partner".into()))?;
            let mut members = Vec::new();
            for (i, base) in [&cfg.segmenter, partner].into_iter().enumerate() {
                members.push(load_stage(derive_seg(base, 1, 4, i as u64), &format!("member{i}"))?);
            }
            TrainedPipeline::Ensemble { members }
        }
    })
}

/// Predict every case; returns id-keyed label maps for [`crate::metrics::evaluate_cohort`].
pub fn predict_cohort(
    pipeline: &TrainedPipeline,
    cases: &[PreparedCase],
    cfg: &PipelineConfig,
) -> Result<BTreeMap<String, LabelMap>> {
    let mut out = BTreeMap::new();
    for case in cases {
        let (label, _) = pipeline.predict(&case.volume, cfg)?;
        out.insert(case.id.clone(), label);
    }
    Ok(out)
}

/// The split fold a command was pointed at.
pub fn select_fold(folds: &[FoldSplit], index: usize) -> Result<&FoldSplit> {
    folds
        .iter()
        .find(|f| f.fold_index == index)
        .ok_or_else(|| Error::Contract(format!("fold {index} not present in splits file")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate_cohort;
    use crate::phantom::{generate_cohort, PhantomSpec};

    fn tiny_spec() -> PhantomSpec {
        PhantomSpec {
            shape: [32, 32, 32],
            vessel_radius_mm: 8.0,
            arc_amplitude_mm: 4.0,
            ..PhantomSpec::default()
        }
    }

    fn tiny_config(dir: &Path, kind: PipelineKind) -> RunConfig {
        let mut cfg = RunConfig::phantom_template("tiny", 11);
        cfg.output_dir = dir.join("out");
        cfg.data = crate::config::DataConfig::Phantom {
            dir: dir.join("data"),
            count: 4,
            flt_fraction: 0.5,
            spec: tiny_spec(),
        };
        cfg.split = crate::config::SplitConfig::Holdout { train: 2, validation: 1, test: 1 };
        cfg.segmenter.base_width = 2;
        cfg.segmenter.depth = 2;
        cfg.train.epochs_primary = 1;
        cfg.train.epochs_cascade = 1;
        cfg.augment.patch_size = [16, 16, 16];
        cfg.pipeline = PipelineConfig::new(kind);
        cfg.pipeline.patch_size = [16, 16, 16];
        if kind == PipelineKind::Ensemble {
            let mut partner = cfg.segmenter.clone();
            partner.seed = 99;
            cfg.ensemble_partner = Some(partner);
        }
        cfg
    }

    fn tiny_cases(dir: &Path, cfg: &RunConfig) -> Vec<PreparedCase> {
        let crate::config::DataConfig::Phantom { dir: data_dir, count, flt_fraction, spec } =
            &cfg.data
        else {
            unreachable!()
        };
        let manifest = generate_cohort(*count, *flt_fraction, cfg.seed, data_dir, spec).unwrap();
        let prep = preprocess_cohort(&manifest, &cfg.preprocess, &dir.join("prep")).unwrap();
        let ids: Vec<String> = prep.cases.iter().map(|c| c.id.clone()).collect();
        load_cases(&prep, &ids).unwrap()
    }

    // [DERIVED] stage targets: FLT binary keeps only class 3; TL/FL folds
    // thrombus into the false lumen.
    #[test]
    fn stage_targets() {
        let data = ndarray::Array3::from_shape_vec((1, 1, 4), vec![0u8, 1, 2, 3]).unwrap();
        let label = LabelMap::with_spacing(data, [1.0; 3], "t").unwrap();
        let flt = flt_binary_label(&label);
        assert_eq!(flt.data.as_slice().unwrap(), &[0, 0, 0, 1]);
        let tlfl = tlfl_label(&label);
        assert_eq!(tlfl.data.as_slice().unwrap(), &[0, 1, 2, 2]);
    }

    // [DERIVED] preprocessing keeps image and label aligned and preserves
    // FLT presence on a phantom.
    #[test]
    fn preprocess_cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let manifest = generate_cohort(2, 1.0, 3, &dir.path().join("data"), &spec).unwrap();
        let prep =
            preprocess_cohort(&manifest, &PreprocessConfig::default(), &dir.path().join("prep"))
                .unwrap();
        assert_eq!(prep.cases.len(), 2);
        assert!(prep.cases.iter().all(|c| c.has_flt));
        let cases = load_cases(&prep, &[prep.cases[0].id.clone()]).unwrap();
        cases[0].label.check_aligned(&cases[0].volume).unwrap();
    }

    // [TRIVIAL] each pipeline kind trains its expected stages and predicts
    // a full cohort end to end at toy scale.
    #[test]
    fn all_pipelines_train_and_predict() {
        let dir = tempfile::tempdir().unwrap();
        for (kind, stages) in [
            (PipelineKind::SingleStep, vec!["seg"]),
            (PipelineKind::Sequential, vec!["aorta", "refine"]),
            (PipelineKind::Multitask, vec!["flt", "fusion", "tlfl"]),
            (PipelineKind::Ensemble, vec!["member0", "member1"]),
        ] {
            let sub = dir.path().join(format!("{kind:?}"));
            let cfg = tiny_config(&sub, kind);
            let cases = tiny_cases(&sub, &cfg);
            let (train, rest) = cases.split_at(2);
            let (val, test) = rest.split_at(1);
            let (pipeline, histories) = train_pipeline(&cfg, train, val, None).unwrap();
            let got: Vec<&String> = histories.keys().collect();
            assert_eq!(got, stages.iter().collect::<Vec<_>>(), "{kind:?}");
            let preds = predict_cohort(&pipeline, test, &cfg.pipeline).unwrap();
            let gts: Vec<LabelMap> = test.iter().map(|c| c.label.clone()).collect();
            let report = evaluate_cohort(&preds, &gts).unwrap();
            assert_eq!(report.cases.len(), 1);
            assert!(report.failed_cases.is_empty());
        }
    }

    // [DERIVED] with a run_dir every stage leaves checkpoints, history and a
    // best pointer, and the returned model carries the best epoch's weights.
    #[test]
    fn run_dir_artifacts_and_best_restore() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), PipelineKind::SingleStep);
        cfg.train.epochs_primary = 2;
        let cases = tiny_cases(dir.path(), &cfg);
        let (train, rest) = cases.split_at(2);
        let (val, _) = rest.split_at(1);
        let run_dir = dir.path().join("run");
        let (pipeline, _) = train_pipeline(&cfg, train, val, Some(&run_dir)).unwrap();
        let stage = run_dir.join("seg");
        assert!(stage.join("epoch_0.ckpt").exists());
        assert!(stage.join("epoch_1.ckpt").exists());
        assert!(stage.join("history.json").exists());
        let pointer: BestPointer =
            serde_json::from_str(&std::fs::read_to_string(stage.join("best.json")).unwrap())
                .unwrap();
        let ckpt = load_checkpoint(&stage.join(&pointer.checkpoint)).unwrap();
        let TrainedPipeline::SingleStep { seg } = &pipeline else { unreachable!() };
        let (name, value, _, _) = &ckpt.entries[0];
        assert_eq!(seg.params.value(name), value);
    }

    // [DERIVED] classifier training reduces BCE on a separable toy task.
    #[test]
    fn classifier_learns_presence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), PipelineKind::SingleStep);
        let cases = tiny_cases(dir.path(), &cfg);
        let mut cls =
            Classifier::new(crate::networks::ClassifierConfig::small(1, 5)).unwrap();
        let mut tc = cfg.train.clone();
        tc.initial_lr = 1e-3;
        let losses = train_classifier(&mut cls, &cases, 4, &tc).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    }
}
