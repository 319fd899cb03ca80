//! The four segmentation pipelines: single-step, sequential (coarse to
//! fine), multi-task with FLT gating, and probability-averaging ensemble.
//!
//! Networks emit logits; this module owns the single softmax normalization
//! point, the sliding-window blending used for whole-volume inference, and
//! the channel plumbing between cascade stages.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Classifier, Segmenter};
use crate::volume::{Affine, LabelMap, Volume, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    SingleStep,
    Sequential,
    Multitask,
    Ensemble,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    /// Skip the FLT-presence classifier entirely (the paper's final setup).
    pub bypass_classifier: bool,
    /// Sigmoid threshold above which the FLT branch participates.
    pub flt_probability_threshold: f64,
    pub patch_size: [usize; 3],
    pub overlap: f64,
}

impl PipelineConfig {
    pub fn new(kind: PipelineKind) -> Self {
        PipelineConfig {
            kind,
            bypass_classifier: true,
            flt_probability_threshold: 0.5,
            patch_size: [96, 96, 96],
            overlap: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&p| p == 0) {
            return Err(Error::Config("pipeline patch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("pipeline overlap must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.flt_probability_threshold) {
            return Err(Error::Config("flt probability threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-voxel class probabilities on a [`Volume`] grid.
#[derive(Debug, Clone)]
pub struct ProbabilityMap {
    pub probs: Array4<f32>,
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub id: String,
}

impl ProbabilityMap {
    pub fn new(probs: Array4<f32>, template: &Volume) -> Result<Self> {
        let map = ProbabilityMap {
            probs,
            spacing: template.spacing,
            affine: template.affine,
            id: template.id.clone(),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| !(0.0..=1.0 + 1e-5).contains(&p)) {
            return Err(Error::Contract("probabilities outside [0, 1]".into()));
        }
        let sums = self.probs.sum_axis(Axis(0));
        if let Some(&s) = sums.iter().find(|&&s| (s - 1.0).abs() > 1e-5) {
            return Err(Error::Contract(format!("voxel probability sum {s} differs from 1")));
        }
        Ok(())
    }

    /// Per-voxel argmax; ties break toward the lower class index.
    pub fn argmax_label(&self) -> LabelMap {
        let (k, d, h, w) = self.probs.dim();
        let mut out = Array3::<u8>::zeros((d, h, w));
        for i in 0..d {
            for j in 0..h {
                for l in 0..w {
                    let mut best = 0usize;
                    let mut best_p = self.probs[[0, i, j, l]];
                    for c in 1..k {
                        let p = self.probs[[c, i, j, l]];
                        if p > best_p {
                            best_p = p;
                            best = c;
                        }
                    }
                    out[[i, j, l]] = best as u8;
                }
            }
        }
        LabelMap { data: out, spacing: self.spacing, affine: self.affine, id: self.id.clone() }
    }
}

/// Per-voxel softmax over the class axis of `(K, D, H, W)` logits.
pub fn softmax_probs(logits: &Array4<f32>) -> Array4<f32> {
    let (k, d, h, w) = logits.dim();
    let mut out = Array4::<f32>::zeros((k, d, h, w));
    for i in 0..d {
        for j in 0..h {
            for l in 0..w {
                let mut max = f32::NEG_INFINITY;
                for c in 0..k {
                    max = max.max(logits[[c, i, j, l]]);
                }
                let mut denom = 0.0f64;
                for c in 0..k {
                    let e = ((logits[[c, i, j, l]] - max) as f64).exp();
                    out[[c, i, j, l]] = e as f32;
                    denom += e;
                }
                for c in 0..k {
                    out[[c, i, j, l]] = (out[[c, i, j, l]] as f64 / denom) as f32;
                }
            }
        }
    }
    out
}

/// Binary aorta mask used to train the sequential stage-1 network:
/// TL/FL/FLT collapse to 1, background stays 0.
pub fn derive_aorta_label(label: &LabelMap) -> LabelMap {
    LabelMap {
        data: label.data.mapv(|v| (v != BACKGROUND) as u8),
        spacing: label.spacing,
        affine: label.affine,
        id: label.id.clone(),
    }
}

/// Whole-volume probabilities from patch-based inference: overlapping
/// patches are blended by per-voxel averaging of softmax outputs. The input
/// is padded with zeros when smaller than the patch (or to satisfy the
/// divisor) and the padding is removed afterwards.
pub fn sliding_window_probs(
    input: &Array4<f32>,
    patch: [usize; 3],
    overlap: f64,
    infer: impl Fn(&Array4<f32>) -> Result<Array4<f32>>,
) -> Result<Array4<f32>> {
    let (c, d, h, w) = input.dim();
    let padded_dims = [d.max(patch[0]), h.max(patch[1]), w.max(patch[2])];
    let mut padded = Array4::<f32>::zeros((c, padded_dims[0], padded_dims[1], padded_dims[2]));
    padded.slice_mut(ndarray::s![.., ..d, ..h, ..w]).assign(input);

    let positions = |dim: usize, p: usize| -> Vec<usize> {
        let stride = ((p as f64) * (1.0 - overlap)).max(1.0) as usize;
        let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + p < dim).collect();
        v.push(dim - p);
        v
    };
    let pos0 = positions(padded_dims[0], patch[0]);
    let pos1 = positions(padded_dims[1], patch[1]);
    let pos2 = positions(padded_dims[2], patch[2]);

    let mut acc: Option<Array4<f64>> = None;
    let mut weight =
        Array3::<f64>::zeros((padded_dims[0], padded_dims[1], padded_dims[2]));
    for &i in &pos0 {
        for &j in &pos1 {
            for &l in &pos2 {
                let tile = padded
                    .slice(ndarray::s![.., i..i + patch[0], j..j + patch[1], l..l + patch[2]])
                    .to_owned();
                let logits = infer(&tile)?;
                let probs = softmax_probs(&logits);
                let k = probs.dim().0;
                let acc = acc.get_or_insert_with(|| {
                    Array4::<f64>::zeros((k, padded_dims[0], padded_dims[1], padded_dims[2]))
                });
                let mut region = acc.slice_mut(ndarray::s![
                    ..,
                    i..i + patch[0],
                    j..j + patch[1],
                    l..l + patch[2]
                ]);
                region.zip_mut_with(&probs.mapv(|v| v as f64), |a, &b| *a += b);
                weight
                    .slice_mut(ndarray::s![i..i + patch[0], j..j + patch[1], l..l + patch[2]])
                    .mapv_inplace(|v| v + 1.0);
            }
        }
    }
    let acc = acc.expect("at least one patch position");
    let k = acc.dim().0;
    let mut out = Array4::<f32>::zeros((k, d, h, w));
    for ci in 0..k {
        for i in 0..d {
            for j in 0..h {
                for l in 0..w {
                    out[[ci, i, j, l]] = (acc[[ci, i, j, l]] / weight[[i, j, l]]) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// [`sliding_window_probs`] for a segmenter on a (possibly multi-channel)
/// input stack.
pub fn segmenter_probs(
    input: &Array4<f32>,
    segmenter: &Segmenter,
    cfg: &PipelineConfig,
) -> Result<Array4<f32>> {
    if input.dim().0 != segmenter.cfg.in_channels {
        return Err(Error::Contract(format!(
            "segmenter expects {} input channels, got {}",
            segmenter.cfg.in_channels,
            input.dim().0
        )));
    }
    let div = segmenter.spatial_divisor();
    let mut patch = cfg.patch_size;
    for p in patch.iter_mut() {
        if *p % div != 0 {
            return Err(Error::Contract(format!(
                "patch size {:?} not divisible by segmenter stride {div}",
                cfg.patch_size
            )));
        }
    }
    sliding_window_probs(input, patch, cfg.overlap, |tile| segmenter.infer(tile))
}

pub fn image_stack(image: &Volume) -> Array4<f32> {
    image.data.clone().insert_axis(Axis(0))
}

fn stack_channels(image: &Volume, extra: &[ArrayView3<f32>]) -> Array4<f32> {
    let (d, h, w) = image.data.dim();
    let mut out = Array4::<f32>::zeros((1 + extra.len(), d, h, w));
    out.slice_mut(ndarray::s![0, .., .., ..]).assign(&image.data);
    for (i, ch) in extra.iter().enumerate() {
        out.slice_mut(ndarray::s![1 + i, .., .., ..]).assign(ch);
    }
    out
}

/// Method 1: one 4-class network over the whole volume.
pub fn run_single_step(
    image: &Volume,
    segmenter: &Segmenter,
    cfg: &PipelineConfig,
) -> Result<(LabelMap, ProbabilityMap)> {
    let probs = segmenter_probs(&image_stack(image), segmenter, cfg)?;
    let map = ProbabilityMap::new(probs, image)?;
    Ok((map.argmax_label(), map))
}

/// Method 2: binary aorta network, then a 4-class refiner that sees the
/// image plus the stage-1 aorta probability as a second channel.
pub fn run_sequential(
    image: &Volume,
    aorta_segmenter: &Segmenter,
    refine_segmenter: &Segmenter,
    cfg: &PipelineConfig,
) -> Result<(LabelMap, ProbabilityMap)> {
    if aorta_segmenter.cfg.out_classes != 2 {
        return Err(Error::Contract("sequential stage 1 must output 2 classes".into()));
    }
    if refine_segmenter.cfg.in_channels != 2 {
        return Err(Error::Contract("sequential stage 2 must accept 2 input channels".into()));
    }
    let stage1 = segmenter_probs(&image_stack(image), aorta_segmenter, cfg)?;
    let aorta = stage1.index_axis(Axis(0), 1);
    let fused_input = stack_channels(image, &[aorta]);
    let probs = segmenter_probs(&fused_input, refine_segmenter, cfg)?;
    let map = ProbabilityMap::new(probs, image)?;
    Ok((map.argmax_label(), map))
}

/// Method 3 core with an injectable classifier call so tests can count
/// invocations. `classify` is only called when the classifier is not
/// bypassed.
pub fn run_multitask_with(
    image: &Volume,
    mut classify: impl FnMut(&Volume) -> Result<f32>,
    flt_segmenter: &Segmenter,
    tlfl_segmenter: &Segmenter,
    fusion_segmenter: &Segmenter,
    cfg: &PipelineConfig,
) -> Result<(LabelMap, ProbabilityMap)> {
    if flt_segmenter.cfg.out_classes != 2 {
        return Err(Error::Contract("FLT branch must output 2 classes".into()));
    }
    if tlfl_segmenter.cfg.out_classes != 3 {
        return Err(Error::Contract("TL/FL branch must output 3 classes".into()));
    }
    if fusion_segmenter.cfg.in_channels != 3 || fusion_segmenter.cfg.out_classes != 4 {
        return Err(Error::Contract("fusion stage must map 3 channels to 4 classes".into()));
    }

    let flt_active = if cfg.bypass_classifier {
        true
    } else {
        let logit = classify(image)? as f64;
        1.0 / (1.0 + (-logit).exp()) >= cfg.flt_probability_threshold
    };

    let (d, h, w) = image.data.dim();
    let flt_channel = if flt_active {
        let probs = segmenter_probs(&image_stack(image), flt_segmenter, cfg)?;
        probs.index_axis(Axis(0), 1).to_owned()
    } else {
        Array3::<f32>::zeros((d, h, w))
    };

    let tlfl = segmenter_probs(&image_stack(image), tlfl_segmenter, cfg)?;
    // TL∪FL foreground probability = 1 − background
    let foreground = tlfl.index_axis(Axis(0), 0).mapv(|p| 1.0 - p);

    let fused_input = stack_channels(image, &[flt_channel.view(), foreground.view()]);
    let probs = segmenter_probs(&fused_input, fusion_segmenter, cfg)?;
    let map = ProbabilityMap::new(probs, image)?;
    Ok((map.argmax_label(), map))
}

/// Method 3: optional FLT-presence gating, parallel FLT and TL/FL branches,
/// and a 3-channel fusion network.
pub fn run_multitask(
    image: &Volume,
    classifier: Option<&Classifier>,
    flt_segmenter: &Segmenter,
    tlfl_segmenter: &Segmenter,
    fusion_segmenter: &Segmenter,
    cfg: &PipelineConfig,
) -> Result<(LabelMap, ProbabilityMap)> {
    run_multitask_with(
        image,
        |img| {
            let cls = classifier.ok_or_else(|| {
                Error::Contract("multitask pipeline without bypass requires a classifier".into())
            })?;
            classifier_logit(img, cls)
        },
        flt_segmenter,
        tlfl_segmenter,
        fusion_segmenter,
        cfg,
    )
}

/// Classifier forward on the whole volume, zero-padded up to the network's
/// spatial divisor.
pub fn classifier_logit(image: &Volume, classifier: &Classifier) -> Result<f32> {
    let div = classifier.spatial_divisor();
    let (d, h, w) = image.data.dim();
    let pad = |x: usize| x.div_ceil(div) * div;
    let mut input = Array4::<f32>::zeros((1, pad(d), pad(h), pad(w)));
    input.slice_mut(ndarray::s![0, ..d, ..h, ..w]).assign(&image.data);
    classifier.infer(&input)
}

/// Arithmetic mean of probability stacks, accumulated in f64.
pub fn average_probs(members: &[Array4<f32>]) -> Result<Array4<f32>> {
    let first = members.first().ok_or_else(|| Error::Contract("empty ensemble".into()))?;
    let dim = first.dim();
    if members.iter().any(|m| m.dim() != dim) {
        return Err(Error::Contract("ensemble member class counts differ".into()));
    }
    let mut acc = first.mapv(|v| v as f64);
    for m in &members[1..] {
        acc.zip_mut_with(&m.mapv(|v| v as f64), |a, &b| *a += b);
    }
    let n = members.len() as f64;
    Ok(acc.mapv(|v| (v / n) as f32))
}

/// Method 4: average the softmax probabilities of several single-step
/// members and take the argmax.
pub fn run_ensemble(
    image: &Volume,
    members: &[&Segmenter],
    cfg: &PipelineConfig,
) -> Result<(LabelMap, ProbabilityMap)> {
    if members.is_empty() {
        return Err(Error::Contract("ensemble needs at least one member".into()));
    }
    let classes = members[0].cfg.out_classes;
    if members.iter().any(|m| m.cfg.out_classes != classes) {
        return Err(Error::Contract("ensemble member class counts differ".into()));
    }
    let stacks: Vec<Array4<f32>> = members
        .iter()
        .map(|m| segmenter_probs(&image_stack(image), m, cfg))
        .collect::<Result<_>>()?;
    let probs = average_probs(&stacks)?;
    let map = ProbabilityMap::new(probs, image)?;
    Ok((map.argmax_label(), map))
}
