//! Optimization loop, step learning-rate schedule, checkpointing, and
//! model selection.
//!
//! Each epoch walks the training cases in a fixed serial order (one case =
//! one batch), then scores the validation split with whole-volume
//! sliding-window inference. Checkpoints carry the Adam moments so a
//! resumed run reproduces an uninterrupted one.

use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, replay_spatial, AugmentConfig};
use crate::error::{Error, Result};
use crate::losses::{LossInputs, LossKind};
use crate::metrics::dice_coefficient;
use crate::networks::Segmenter;
use crate::pipelines::sliding_window_probs;
use crate::tensor::{AdamConfig, Graph, ParamStore};
use crate::volume::{LabelMap, Volume, FLT};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_step_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_primary: usize,
    pub epochs_cascade: usize,
    pub loss: LossKind,
    pub loss_epsilon: f64,
    pub gdl_include_background: bool,
    /// Sliding-window overlap for the per-epoch validation pass.
    pub validation_overlap: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_step_epochs: 30,
            weight_decay: 1e-5,
            batch_size: 1,
            epochs_primary: 50,
            epochs_cascade: 20,
            loss: LossKind::Dcel,
            loss_epsilon: 1e-5,
            gdl_include_background: true,
            validation_overlap: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0
            || self.lr_decay_factor <= 0.0
            || self.lr_step_epochs == 0
            || self.weight_decay < 0.0
            || self.batch_size == 0
            || self.loss_epsilon <= 0.0
        {
            return Err(Error::Config("training hyperparameters must be positive".into()));
        }
        Ok(())
    }
}

/// `initial_lr · decay^⌊epoch / step⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.initial_lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_step_epochs) as i32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean over foreground classes and validation cases.
    pub val_mean_dice: f64,
    /// FLT Dice over FLT-positive validation cases; absent when there are
    /// none or the stage does not predict FLT.
    pub val_true_flt_dice: Option<f64>,
    pub learning_rate: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn push(&mut self, record: EpochRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.epoch > last.epoch, "epoch indices must be monotone");
        }
        self.records.push(record);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn selection_score(r: &EpochRecord) -> f64 {
    match r.val_true_flt_dice {
        Some(t) => (r.val_mean_dice + t) / 2.0,
        None => r.val_mean_dice,
    }
}

/// Epoch with the best `(mean DC + True-FLT DC)/2`; ties break earliest.
pub fn select_best(history: &TrainingHistory) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in &history.records {
        let s = selection_score(r);
        if best.map(|(_, bs)| s > bs).unwrap_or(true) {
            best = Some((r.epoch, s));
        }
    }
    best.map(|(e, _)| e).ok_or_else(|| Error::Contract("cannot select from an empty history".into()))
}

/// One training case for a stage: the preprocessed image, the stage target
/// label, and any frozen upstream channels aligned with the image grid.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub volume: Volume,
    pub label: LabelMap,
    pub extra_channels: Vec<Array3<f32>>,
}

impl TrainCase {
    pub fn new(volume: Volume, label: LabelMap) -> Self {
        TrainCase { volume, label, extra_channels: Vec::new() }
    }

    fn input_stack(&self) -> Array4<f32> {
        let (d, h, w) = self.volume.data.dim();
        let mut out = Array4::<f32>::zeros((1 + self.extra_channels.len(), d, h, w));
        out.slice_mut(ndarray::s![0, .., .., ..]).assign(&self.volume.data);
        for (i, ch) in self.extra_channels.iter().enumerate() {
            out.slice_mut(ndarray::s![1 + i, .., .., ..]).assign(ch);
        }
        out
    }
}

/// Whole-volume validation: mean foreground Dice over cases plus the
/// True-FLT mean when the stage predicts FLT.
fn validate_stage(
    model: &Segmenter,
    cases: &[TrainCase],
    patch: [usize; 3],
    overlap: f64,
) -> Result<(f64, Option<f64>)> {
    let mut dice_sum = 0.0f64;
    let mut dice_n = 0usize;
    let mut flt_scores = Vec::new();
    for case in cases {
        let probs = sliding_window_probs(&case.input_stack(), patch, overlap, |tile| model.infer(tile))?;
        let pred = argmax_u8(&probs);
        let pred = LabelMap {
            data: pred,
            spacing: case.label.spacing,
            affine: case.label.affine,
            id: case.label.id.clone(),
        };
        let mut case_dice = 0.0;
        let classes = model.cfg.out_classes as u8;
        for class_id in 1..classes {
            case_dice += dice_coefficient(&pred, &case.label, class_id)?;
        }
        dice_sum += case_dice / (classes - 1) as f64;
        dice_n += 1;
        if classes > FLT && case.label.has_flt() {
            flt_scores.push(dice_coefficient(&pred, &case.label, FLT)?);
        }
    }
    let mean = if dice_n > 0 { dice_sum / dice_n as f64 } else { 0.0 };
    let flt = if flt_scores.is_empty() {
        None
    } else {
        Some(flt_scores.iter().sum::<f64>() / flt_scores.len() as f64)
    };
    Ok((mean, flt))
}

fn argmax_u8(probs: &Array4<f32>) -> Array3<u8> {
    let (k, d, h, w) = probs.dim();
    let mut out = Array3::<u8>::zeros((d, h, w));
    for i in 0..d {
        for j in 0..h {
            for l in 0..w {
                let mut best = 0usize;
                let mut best_p = probs[[0, i, j, l]];
                for c in 1..k {
                    if probs[[c, i, j, l]] > best_p {
                        best_p = probs[[c, i, j, l]];
                        best = c;
                    }
                }
                out[[i, j, l]] = best as u8;
            }
        }
    }
    out
}

/// One optimizer step on a single sample; returns the loss.
pub fn train_step(
    model: &mut Segmenter,
    input: &Array4<f32>,
    target: &LabelMap,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone().into_dyn());
    let logits_id = model.forward(&mut g, x)?;
    let logits = g
        .value(logits_id)
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("segmenter logits 4D")
        .to_owned();
    let mut inputs = LossInputs::new(logits.view(), target);
    inputs.epsilon = cfg.loss_epsilon;
    inputs.include_background = cfg.gdl_include_background;
    let (loss, grad) = cfg.loss.with_grad(&inputs)?;
    if !loss.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {loss}")));
    }
    model.params.zero_grads();
    g.backward(logits_id, grad.into_dyn(), &mut model.params);
    if model.params.grad_abs_max().is_nan() {
        return Err(Error::Contract("NaN gradient".into()));
    }
    let adam = AdamConfig { weight_decay: cfg.weight_decay as f32, ..AdamConfig::default() };
    model.params.adam_step(lr as f32, &adam);
    Ok(loss)
}

/// Where a stage writes its artifacts: `<run_dir>/<stage>/epoch_<n>.ckpt`,
/// `best.json`, `history.json`.
pub fn stage_dir(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join(stage)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BestPointer {
    pub epoch: usize,
    pub score: f64,
    pub checkpoint: String,
}

/// Train one stage of any pipeline.
///
/// `epochs` is `cfg.epochs_primary` for first-stage models and
/// `cfg.epochs_cascade` for cascaded ones (whose frozen upstream outputs
/// arrive via [`TrainCase::extra_channels`]).
pub fn train_stage(
    model: &mut Segmenter,
    stage: &str,
    train: &[TrainCase],
    val: &[TrainCase],
    epochs: usize,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    run_dir: Option<&Path>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    aug.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let out_dir = match run_dir {
        Some(base) => {
            let d = stage_dir(base, stage);
            std::fs::create_dir_all(&d)?;
            Some(d)
        }
        None => None,
    };

    let mut history = TrainingHistory::default();
    for epoch in 0..epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut loss_sum = 0.0f64;
        for case in train {
            let mut rng = aug.rng_for(&case.volume.id, epoch);
            let (pv, pl, applied) = augment_sample(&case.volume, &case.label, aug, &mut rng)?;
            let (d, h, w) = pv.data.dim();
            let mut input = Array4::<f32>::zeros((1 + case.extra_channels.len(), d, h, w));
            input.slice_mut(ndarray::s![0, .., .., ..]).assign(&pv.data);
            for (i, ch) in case.extra_channels.iter().enumerate() {
                let aligned = replay_spatial(ch, &applied, aug.patch_size);
                input.slice_mut(ndarray::s![1 + i, .., .., ..]).assign(&aligned);
            }
            let loss = train_step(model, &input, &pl, lr, cfg).map_err(|e| match e {
                Error::Contract(reason) => Error::DivergedTraining { epoch, reason },
                other => other,
            })?;
            loss_sum += loss;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::DivergedTraining { epoch, reason: format!("epoch loss {train_loss}") });
        }

        let (val_mean_dice, val_true_flt_dice) =
            validate_stage(model, val, aug.patch_size, cfg.validation_overlap)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_mean_dice,
            val_true_flt_dice,
            learning_rate: lr,
            wall_secs: start.elapsed().as_secs_f64(),
        });

        if let Some(dir) = &out_dir {
            let ckpt = dir.join(format!("epoch_{epoch}.ckpt"));
            save_checkpoint(&ckpt, &model.params, epoch)?;
            history.save(&dir.join("history.json"))?;
            let best_epoch = select_best(&history)?;
            let best_record = history.records.iter().find(|r| r.epoch == best_epoch).unwrap();
            let pointer = BestPointer {
                epoch: best_epoch,
                score: selection_score(best_record),
                checkpoint: format!("epoch_{best_epoch}.ckpt"),
            };
            std::fs::write(dir.join("best.json"), serde_json::to_string_pretty(&pointer)?)?;
        }
    }
    Ok(history)
}

const CKPT_MAGIC: &[u8; 4] = b"TBCK";
const CKPT_VERSION: u32 = 1;

/// Serialize parameters, Adam moments, and the epoch to a versioned binary
/// file.
pub fn save_checkpoint(path: &Path, store: &ParamStore, epoch: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    w.write_u64::<LittleEndian>(epoch as u64)?;
    w.write_u64::<LittleEndian>(store.step_count())?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for name in store.names() {
        let value = store.value(name);
        let (m, v) = store.adam_state(name);
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(value.ndim() as u8)?;
        for &d in value.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for arr in [value, m, v] {
            for &x in arr.iter() {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub epoch: usize,
    pub step: u64,
    pub entries: Vec<(String, ArrayD<f32>, ArrayD<f32>, ArrayD<f32>)>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|_| Error::NotFound(path.to_path_buf()))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let epoch = r.read_u64::<LittleEndian>()? as usize;
    let step = r.read_u64::<LittleEndian>()?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let read_array = |r: &mut dyn std::io::Read| -> Result<ArrayD<f32>> {
            let mut data = vec![0.0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("checkpoint shape"))
        };
        let value = read_array(&mut r)?;
        let m = read_array(&mut r)?;
        let v = read_array(&mut r)?;
        entries.push((name, value, m, v));
    }
    Ok(Checkpoint { epoch, step, entries })
}

impl Checkpoint {
    /// Load the saved state into an already-constructed parameter store.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (name, value, m, v) in &self.entries {
            store.set_value(name, value.clone())?;
            store.set_adam_state(name, m.clone(), v.clone())?;
        }
        store.set_step_count(self.step);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use crate::networks::SegmenterConfig;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn tiny_model(seed: u64) -> Segmenter {
        let mut cfg = SegmenterConfig::unet3d(1, 4, seed);
        cfg.base_width = 2;
        cfg.depth = 2;
        Segmenter::new(cfg).unwrap()
    }

    fn phantom_cases(n: usize, seed: u64) -> Vec<TrainCase> {
        (0..n)
            .map(|i| {
                let mut spec = PhantomSpec::default();
                spec.shape = [24, 24, 24];
                spec.vessel_radius_mm = 7.0;
                spec.arc_amplitude_mm = 2.0;
                spec.seed = seed + i as u64;
                let (v, l, _) = generate_phantom(&spec).unwrap();
                TrainCase::new(v, l)
            })
            .collect()
    }

    fn tiny_aug() -> AugmentConfig {
        AugmentConfig { patch_size: [16, 16, 16], probability: 0.2, seed: 3, ..Default::default() }
    }

    #[test]
    fn lr_schedule_matches_paper_rule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(29, &cfg), 1e-4);
        assert!((lr_at(30, &cfg) - 1e-5).abs() < 1e-18);
        assert!((lr_at(60, &cfg) - 1e-6).abs() < 1e-19);
        // non-increasing, piecewise constant with breaks at multiples of 30
        for e in 1..100usize {
            assert!(lr_at(e, &cfg) <= lr_at(e - 1, &cfg));
            if e % 30 != 0 {
                assert_eq!(lr_at(e, &cfg), lr_at(e - 1, &cfg));
            }
        }
    }

    #[test]
    fn select_best_examples() {
        let rec = |epoch, dice, flt: Option<f64>| EpochRecord {
            epoch,
            train_loss: 0.0,
            val_mean_dice: dice,
            val_true_flt_dice: flt,
            learning_rate: 1e-4,
            wall_secs: 0.0,
        };
        let mut h = TrainingHistory::default();
        assert!(select_best(&h).is_err());
        h.push(rec(0, 0.5, Some(0.2)));
        assert_eq!(select_best(&h).unwrap(), 0);
        // A (0.8, 0.4) vs B (0.7, 0.6): B wins 0.65 > 0.60
        let mut h = TrainingHistory::default();
        h.push(rec(0, 0.8, Some(0.4)));
        h.push(rec(1, 0.7, Some(0.6)));
        assert_eq!(select_best(&h).unwrap(), 1);
        // tie goes to the earliest epoch
        let mut h = TrainingHistory::default();
        h.push(rec(3, 0.6, Some(0.6)));
        h.push(rec(7, 0.6, Some(0.6)));
        assert_eq!(select_best(&h).unwrap(), 3);
    }

    #[test]
    fn one_step_descends_on_fixed_batch() {
        let mut model = tiny_model(1);
        let cases = phantom_cases(1, 10);
        let input = cases[0].input_stack();
        let target = &cases[0].label;
        let cfg = TrainConfig::default();
        let eval = |m: &Segmenter| -> f64 {
            let logits = m.infer(&input).unwrap();
            let mut li = LossInputs::new(logits.view(), target);
            li.epsilon = cfg.loss_epsilon;
            crate::losses::dcel(&li).unwrap()
        };
        let before = eval(&model);
        train_step(&mut model, &input, target, 1e-3, &cfg).unwrap();
        let after = eval(&model);
        assert!(after < before, "loss did not descend: {before} -> {after}");
    }

    #[test]
    fn two_epoch_history_bookkeeping() {
        let mut model = tiny_model(2);
        let cases = phantom_cases(4, 20);
        let cfg = TrainConfig::default();
        let history =
            train_stage(&mut model, "stage", &cases, &cases[..1], 2, &cfg, &tiny_aug(), None).unwrap();
        assert_eq!(history.records.len(), 2);
        for (i, r) in history.records.iter().enumerate() {
            assert_eq!(r.epoch, i);
            assert_eq!(r.learning_rate, lr_at(i, &cfg));
            assert!(r.train_loss.is_finite());
        }
    }

    #[test]
    fn same_seed_is_deterministic() {
        let run = || {
            let mut model = tiny_model(5);
            let cases = phantom_cases(3, 30);
            let cfg = TrainConfig::default();
            train_stage(&mut model, "s", &cases, &cases[..1], 2, &cfg, &tiny_aug(), None).unwrap()
        };
        let a = run();
        let b = run();
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert!((ra.train_loss - rb.train_loss).abs() < 1e-6);
            assert!((ra.val_mean_dice - rb.val_mean_dice).abs() < 1e-6);
        }
    }

    #[test]
    fn poisoned_input_diverges() {
        let mut model = tiny_model(6);
        let mut cases = phantom_cases(1, 40);
        cases[0].volume.data[[0, 0, 0]] = f32::NAN;
        let cfg = TrainConfig::default();
        // patch covering the whole volume so the NaN is always sampled
        let aug = AugmentConfig { patch_size: [24, 24, 24], probability: 0.0, ..Default::default() };
        let err = train_stage(&mut model, "s", &cases, &[], 1, &cfg, &aug, None).unwrap_err();
        assert!(matches!(err, Error::DivergedTraining { epoch: 0, .. }), "got {err:?}");
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cases = phantom_cases(2, 50);
        let cfg = TrainConfig::default();
        let aug = tiny_aug();

        // uninterrupted: two epochs straight
        let mut full = tiny_model(7);
        let h_full =
            train_stage(&mut full, "s", &cases, &cases[..1], 2, &cfg, &aug, None).unwrap();

        // interrupted: one epoch, checkpoint, reload into a fresh model, resume
        let mut first = tiny_model(7);
        train_stage(&mut first, "s", &cases, &cases[..1], 1, &cfg, &aug, None).unwrap();
        let ckpt_path = dir.path().join("e0.ckpt");
        save_checkpoint(&ckpt_path, &first.params, 0).unwrap();

        let mut resumed = tiny_model(999); // different init, fully overwritten
        let ckpt = load_checkpoint(&ckpt_path).unwrap();
        assert_eq!(ckpt.epoch, 0);
        ckpt.apply_to(&mut resumed.params).unwrap();
        assert_eq!(resumed.params.checksum(), first.params.checksum());

        // epoch 1 of the resumed run must match epoch 1 of the full run
        let mut resumed_loss = None;
        for case in &cases {
            let mut rng = aug.rng_for(&case.volume.id, 1);
            let (pv, pl, _) = augment_sample(&case.volume, &case.label, &aug, &mut rng).unwrap();
            let input = pv.data.clone().insert_axis(Axis(0));
            let loss = train_step(&mut resumed, &input, &pl, lr_at(1, &cfg), &cfg).unwrap();
            resumed_loss = Some(resumed_loss.unwrap_or(0.0) + loss);
        }
        let resumed_loss = resumed_loss.unwrap() / cases.len() as f64;
        assert!(
            (resumed_loss - h_full.records[1].train_loss).abs() < 1e-5,
            "resumed {resumed_loss} vs full {}",
            h_full.records[1].train_loss
        );
    }

    #[test]
    fn run_dir_layout_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(8);
        let cases = phantom_cases(2, 60);
        let cfg = TrainConfig::default();
        train_stage(&mut model, "single", &cases, &cases[..1], 2, &cfg, &tiny_aug(), Some(dir.path()))
            .unwrap();
        let stage = dir.path().join("single");
        assert!(stage.join("epoch_0.ckpt").exists());
        assert!(stage.join("epoch_1.ckpt").exists());
        assert!(stage.join("history.json").exists());
        let best: BestPointer =
            serde_json::from_str(&std::fs::read_to_string(stage.join("best.json")).unwrap()).unwrap();
        assert!(stage.join(&best.checkpoint).exists());
        let history = TrainingHistory::load(&stage.join("history.json")).unwrap();
        assert_eq!(history.records.len(), 2);
    }
}
