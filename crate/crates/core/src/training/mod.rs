//! Mini-batch training with validation, early stopping and checkpoints.

pub mod adam;
pub mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{blocks_to_tensor, BlockTensor, FrameBlock};
use crate::error::{Error, Result};
use crate::labelspace::Label;
use crate::losses::LossConfig;
use crate::metrics::{self, ConfusionCounts};
use crate::model::Network;
use crate::nn::Tensor;
use crate::postprocess::{threshold, ProbabilityMotionMask};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{checkpoint, restore, restore_for, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(flatten)]
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mini_batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub validation_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mini_batch_size: 2,
            learning_rate: 1e-4,
            max_epochs: 30,
            patience: 3,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            validation_threshold: 0.4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mini_batch_size == 0 {
            return Err(Error::Config("mini_batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.validation_threshold) {
            return Err(Error::Config(format!(
                "validation_threshold must lie in [0, 1], got {}",
                self.validation_threshold
            )));
        }
        let a = &self.optimizer.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid Adam coefficients {a:?}")));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f_measure: Option<f64>,
    /// Seconds spent in the epoch, validation included.
    pub wall_time: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_f_measure,wall_time";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let f = r
            .val_f_measure
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "undefined".into());
        s.push_str(&format!(
            "{},{:.8},{:.8},{},{:.3}\n",
            r.epoch, r.train_loss, r.val_loss, f, r.wall_time
        ));
    }
    s
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(history_csv(history).as_bytes())?;
    Ok(())
}

/// Anything that maps blocks to motion probabilities.
pub trait MotionPredictor {
    /// Window length the predictor expects.
    fn window(&self) -> usize;

    /// One probability mask per block, in order.
    fn predict_blocks(&self, blocks: &[&FrameBlock]) -> Result<Vec<ProbabilityMotionMask>>;
}

fn split_output(out: &Tensor) -> Result<Vec<ProbabilityMotionMask>> {
    let s = out.shape();
    (0..s.b)
        .map(|b| ProbabilityMotionMask::new(s.h, s.w, out.image(b, 0).to_vec()))
        .collect()
}

impl MotionPredictor for Network {
    fn window(&self) -> usize {
        self.config().n
    }

    fn predict_blocks(&self, blocks: &[&FrameBlock]) -> Result<Vec<ProbabilityMotionMask>> {
        if blocks.is_empty() {
            return Ok(Vec::new());
        }
        split_output(&self.predict(&blocks_to_tensor(blocks)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationResult {
    pub loss: f64,
    pub f_measure: Option<f64>,
    pub counts: ConfusionCounts,
}

/// Forward passes only: pooled ignore-filtered loss and the F-measure of
/// the predictions thresholded at `threshold`.
pub fn validate(
    model: &impl MotionPredictor,
    val: &BlockTensor,
    loss: &LossConfig,
    threshold_value: f64,
    batch_size: usize,
) -> Result<ValidationResult> {
    if val.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }
    let mut sum = 0.0;
    let mut pixels = 0usize;
    let mut counts = ConfusionCounts::default();
    for chunk in val.blocks.chunks(batch_size.max(1)) {
        let refs: Vec<&FrameBlock> = chunk.iter().collect();
        let preds = model.predict_blocks(&refs)?;
        for (p, b) in preds.iter().zip(chunk) {
            for pair in crate::losses::filter_ignore(p, &b.target_gt)? {
                sum += loss.pixel_loss(pair.p1, pair.label);
                pixels += 1;
            }
            counts += metrics::count(&threshold(p, threshold_value), &b.target_gt)?;
        }
    }
    let loss_value = if pixels == 0 {
        log::warn!("validation masks are entirely IGNORE; loss reported as zero");
        0.0
    } else {
        sum / pixels as f64
    };
    Ok(ValidationResult {
        loss: loss_value,
        f_measure: metrics::derive(&counts).f_measure,
        counts,
    })
}

/// Where and how often to write checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    /// Run directory; `None` disables checkpointing.
    pub run_dir: Option<PathBuf>,
}

impl CheckpointPolicy {
    pub fn epoch_path(run: &Path, epoch: usize) -> PathBuf {
        run.join("checkpoints").join(format!("epoch_{epoch:03}"))
    }

    pub fn best_path(run: &Path) -> PathBuf {
        run.join("best")
    }
}

/// State carried over when resuming an interrupted run.
#[derive(Debug, Clone, Default)]
pub struct ResumeState {
    pub history: Vec<EpochRecord>,
    pub optimizer: Option<AdamState>,
    /// Weights of the best epoch so far, if they differ from the model's.
    pub best_weights: Option<Vec<Vec<f32>>>,
}

impl ResumeState {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            history: ck.history.clone(),
            optimizer: ck.optimizer.clone(),
            best_weights: None,
        }
    }
}

fn snapshot(net: &Network) -> Vec<Vec<f32>> {
    net.params().iter().map(|p| p.data.clone()).collect()
}

fn load_snapshot(net: &mut Network, snap: Vec<Vec<f32>>) {
    for (p, d) in net.params_mut().iter_mut().zip(snap) {
        p.data = d;
    }
}

/// Early-stopping bookkeeping: strict improvement, fixed patience.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    /// Record an epoch's validation loss; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.wait >= self.patience
    }
}

/// Loss and output gradient of one batch. Returns (sum of pixel losses,
/// retained pixel count, dL/dy for the mean over retained pixels).
fn batch_loss(out: &Tensor, blocks: &[&FrameBlock], loss: &LossConfig) -> (f64, usize, Tensor) {
    let s = out.shape();
    let mut dy = Tensor::zeros(s);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (b, block) in blocks.iter().enumerate() {
        let labels = block.target_gt.labels();
        let p = out.image(b, 0);
        let g = dy.image_mut(b, 0);
        for i in 0..labels.len() {
            if labels[i] == Label::Ignore {
                continue;
            }
            sum += loss.pixel_loss(p[i] as f64, labels[i]);
            g[i] = loss.pixel_grad(p[i] as f64, labels[i]) as f32;
            count += 1;
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f32;
        dy.data_mut().iter_mut().for_each(|v| *v *= inv);
    } else {
        log::warn!("training batch is entirely IGNORE; it contributes no gradient");
    }
    (sum, count, dy)
}

/// Run one epoch over `order`; returns the pooled training loss.
fn train_epoch(
    net: &mut Network,
    train: &BlockTensor,
    order: &[usize],
    cfg: &TrainConfig,
    adam: &mut AdamState,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut pixels = 0usize;
    let l2_layers: Vec<String> = net.graph().l2_layers().iter().map(|s| s.to_string()).collect();
    for chunk in order.chunks(cfg.mini_batch_size) {
        let blocks: Vec<&FrameBlock> = chunk.iter().map(|&i| &train.blocks[i]).collect();
        let x = blocks_to_tensor(&blocks)?;
        let tape = net.forward_train(&x, dropout_rng)?;
        let (s, c, dy) = batch_loss(tape.output(), &blocks, &cfg.loss);
        sum += s;
        pixels += c;
        let mut grads = net.backward(&tape, dy);
        drop(tape);
        // gradient of factor * sum(w^2)
        let f = (2.0 * cfg.loss.l2_factor) as f32;
        if f > 0.0 {
            for (i, p) in net.params().iter().enumerate() {
                if p.role == crate::model::ParamRole::Kernel
                    && !grads.tensors[i].is_empty()
                    && l2_layers.iter().any(|l| *l == p.layer)
                {
                    for (g, w) in grads.tensors[i].iter_mut().zip(&p.data) {
                        *g += f * w;
                    }
                }
            }
        }
        if !grads.tensors.iter().flatten().all(|g| g.is_finite()) {
            return Err(Error::Training("non-finite gradient".into()));
        }
        adam.apply(net, &grads, cfg.learning_rate, &cfg.optimizer.adam);
    }
    Ok(if pixels == 0 { 0.0 } else { sum / pixels as f64 })
}

/// Train with an arbitrary validation function (called once per epoch
/// after the weight updates). The model ends up with the weights of the
/// epoch with the lowest validation loss.
pub fn train_with<V>(
    net: &mut Network,
    train: &BlockTensor,
    cfg: &TrainConfig,
    mut validator: V,
    policy: &CheckpointPolicy,
    resume: Option<ResumeState>,
) -> Result<Vec<EpochRecord>>
where
    V: FnMut(&Network) -> Result<ValidationResult>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let n = net.config().n;
    if let Some(b) = train.blocks.iter().find(|b| b.n != n) {
        return Err(Error::Shape(format!(
            "model window is {n}, training block has {}",
            b.n
        )));
    }
    let resume = resume.unwrap_or_default();
    let mut history = resume.history;
    let mut adam = resume.optimizer.unwrap_or_else(|| AdamState::new(net));
    let mut stopper = EarlyStopping::new(cfg.patience);
    for r in &history {
        stopper.observe(r.epoch, r.val_loss);
    }
    let mut best_weights = match (stopper.best_epoch, resume.best_weights) {
        (Some(_), Some(w)) => Some(w),
        (Some(e), None) if history.last().map(|r| r.epoch) == Some(e) => Some(snapshot(net)),
        (Some(e), None) => {
            log::warn!("resumed without the weights of best epoch {e}; keeping the current ones as best");
            Some(snapshot(net))
        }
        (None, _) => None,
    };
    let start = history.last().map(|r| r.epoch).unwrap_or(0);
    if stopper.should_stop() {
        log::info!("resumed run had already stopped early after epoch {start}");
    }
    let mut epoch = start;
    while epoch < cfg.max_epochs && !stopper.should_stop() {
        epoch += 1;
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d70f);
        dropout_rng.set_stream(epoch as u64);
        let train_loss = train_epoch(net, train, &order, cfg, &mut adam, &mut dropout_rng)?;
        let v = validator(net)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: v.loss,
            val_f_measure: v.f_measure,
            wall_time: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_loss {:.6} val_F {}",
            record.train_loss,
            record.val_loss,
            record
                .val_f_measure
                .map(|f| format!("{f:.4}"))
                .unwrap_or_else(|| "undefined".into())
        );
        history.push(record);
        let improved = stopper.observe(epoch, v.loss);
        if improved {
            best_weights = Some(snapshot(net));
        }
        if let Some(run) = &policy.run_dir {
            save_checkpoint(&CheckpointPolicy::epoch_path(run, epoch), net, Some(epoch), Some(&adam), &history)?;
            if improved {
                save_checkpoint(&CheckpointPolicy::best_path(run), net, Some(epoch), None, &history)?;
            }
            write_history(&run.join("history.csv"), &history)?;
        }
    }
    if let Some(w) = best_weights {
        load_snapshot(net, w);
    }
    Ok(history)
}

/// Train on `train`, validating on `val` after every epoch.
pub fn train(
    net: &mut Network,
    train: &BlockTensor,
    val: &BlockTensor,
    cfg: &TrainConfig,
    policy: &CheckpointPolicy,
) -> Result<Vec<EpochRecord>> {
    if val.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }
    let loss = cfg.loss;
    let (t, bs) = (cfg.validation_threshold, cfg.mini_batch_size);
    train_with(net, train, cfg, |m: &Network| validate(m, val, &loss, t, bs), policy, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic_scene, make_training_blocks, SyntheticConfig};
    use crate::labelspace::LabelMask;
    use crate::model::ModelConfig;
    use std::sync::Arc;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n: 3,
            input_hw: (16, 16),
            base_filters_scale: 0.05,
            freeze_vgg: false,
            seed: 1,
            ..Default::default()
        }
    }

    fn tiny_blocks(seed: u64) -> BlockTensor {
        let s = generate_synthetic_scene(&SyntheticConfig {
            height: 16,
            width: 16,
            frames: 12,
            min_object_size: 4,
            max_object_size: 6,
            seed,
            ..Default::default()
        })
        .unwrap();
        make_training_blocks(&s.scene, 3).unwrap()
    }

    struct Constant(f32);

    impl MotionPredictor for Constant {
        fn window(&self) -> usize {
            3
        }
        fn predict_blocks(&self, blocks: &[&FrameBlock]) -> Result<Vec<ProbabilityMotionMask>> {
            Ok(blocks
                .iter()
                .map(|b| ProbabilityMotionMask::filled(b.target_gt.height(), b.target_gt.width(), self.0))
                .collect())
        }
    }

    struct Oracle;

    impl MotionPredictor for Oracle {
        fn window(&self) -> usize {
            3
        }
        fn predict_blocks(&self, blocks: &[&FrameBlock]) -> Result<Vec<ProbabilityMotionMask>> {
            blocks
                .iter()
                .map(|b| {
                    let g = &b.target_gt;
                    let v = g.labels().iter().map(|l| if *l == Label::Motion { 1.0 } else { 0.0 }).collect();
                    ProbabilityMotionMask::new(g.height(), g.width(), v)
                })
                .collect()
        }
    }

    #[test]
    fn validation_examples() {
        let val = tiny_blocks(2);
        let r = validate(&Oracle, &val, &LossConfig::default(), 0.4, 2).unwrap();
        assert!(r.loss.abs() < 1e-9);
        assert_eq!(r.f_measure, Some(1.0));
        let r = validate(&Constant(0.5), &val, &LossConfig::default(), 0.4, 2).unwrap();
        assert!((r.loss - 0.0625).abs() < 1e-12);
        let mut ignored = val.clone();
        for b in &mut ignored.blocks {
            b.target_gt = Arc::new(LabelMask::filled(16, 16, Label::Ignore));
        }
        let r = validate(&Constant(0.5), &ignored, &LossConfig::default(), 0.4, 2).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.f_measure, None);
        assert!(validate(&Oracle, &BlockTensor::default(), &LossConfig::default(), 0.4, 2).is_err());
    }

    #[test]
    fn early_stopping_counting_rule() {
        let mut s = EarlyStopping::new(3);
        let seq = [1.0, 0.9, 0.95, 0.96, 0.97, 0.5];
        let mut stopped_after = None;
        for (i, v) in seq.iter().enumerate() {
            s.observe(i + 1, *v);
            if s.should_stop() {
                stopped_after = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_after, Some(5));
        assert_eq!(s.best_epoch, Some(2));
    }

    #[test]
    fn scripted_losses_restore_best_epoch() {
        let train_set = tiny_blocks(1);
        let mut net = Network::new(&tiny_model()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..Default::default()
        };
        let script = [1.0, 0.9, 0.95, 0.96, 0.97, 0.1];
        let mut k = 0;
        let mut at_epoch = Vec::new();
        let hist = train_with(
            &mut net,
            &train_set,
            &cfg,
            |m: &Network| {
                at_epoch.push(snapshot(m));
                let loss = script[k];
                k += 1;
                Ok(ValidationResult {
                    loss,
                    f_measure: None,
                    counts: ConfusionCounts::default(),
                })
            },
            &CheckpointPolicy::default(),
            None,
        )
        .unwrap();
        assert_eq!(hist.len(), 5);
        assert_eq!(snapshot(&net), at_epoch[1]);
        assert_ne!(at_epoch[1], at_epoch[4]);
    }

    #[test]
    fn runs_are_reproducible() {
        let train_set = tiny_blocks(1);
        let val = tiny_blocks(5);
        let cfg = TrainConfig {
            max_epochs: 2,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let run = || {
            let mut net = Network::new(&tiny_model()).unwrap();
            train(&mut net, &train_set, &val, &cfg, &CheckpointPolicy::default()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert!((x.train_loss - y.train_loss).abs() < 1e-6);
            assert!((x.val_loss - y.val_loss).abs() < 1e-6);
        }
    }

    #[test]
    fn validation_does_not_touch_weights() {
        let net = Network::new(&tiny_model()).unwrap();
        let before = snapshot(&net);
        validate(&net, &tiny_blocks(3), &LossConfig::default(), 0.4, 2).unwrap();
        assert_eq!(before, snapshot(&net));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let mut net = Network::new(&tiny_model()).unwrap();
        let r = train(
            &mut net,
            &BlockTensor::default(),
            &tiny_blocks(1),
            &TrainConfig::default(),
            &CheckpointPolicy::default(),
        );
        assert!(matches!(r, Err(Error::Training(_))));
    }

    #[test]
    fn history_csv_marks_undefined() {
        let csv = history_csv(&[EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            val_f_measure: None,
            wall_time: 1.0,
        }]);
        assert!(csv.starts_with(HISTORY_HEADER));
        assert!(csv.contains(",undefined,"));
    }
}
