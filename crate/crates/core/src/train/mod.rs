//! Two-phase training loop: reconstruction pretraining with the segmentation
//! tail frozen, then joint segmentation + reconstruction + KL optimization.
//!
//! Every step is a pure function of (parameters, dataset, RNG position), and
//! the RNG is consumed in a fixed order — batch indices, modality subset,
//! then latent noise — so a run is reproducible from its seed and resumable
//! bit-exactly from a checkpoint.

pub mod adam;
pub mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_intensities, ChannelRole, Volume};
use crate::dtype::Real;
use crate::error::XhvedError;
use crate::modality::ModalitySubset;
use crate::model::{LatentMode, ModelConfig, XhvedModel};
use crate::rng::substream;
use crate::tensor::{Tape, TensorId};

/// Numerator/denominator smoothing for the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Architectural switches, applied onto the model config by [`Trainer::new`]
/// so ablations are expressed entirely in the train config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleToggles {
    pub save_attention: bool,
    pub vila: bool,
    pub sfeca: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        ModuleToggles {
            save_attention: true,
            vila: true,
            sfeca: true,
        }
    }
}

/// How the per-step modality subset is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetStrategy {
    /// One of the 15 non-empty subsets, uniformly at random.
    Uniform15,
    /// Always all four modalities.
    FullOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the reconstruction term in the joint phase.
    pub lambda_rec: f64,
    /// Weight of the KL term in both phases.
    pub lambda_kl: f64,
    pub pretrain_steps: usize,
    pub train_steps: usize,
    pub seed: u64,
    pub subset_strategy: SubsetStrategy,
    pub module_toggles: ModuleToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-4,
            lambda_rec: 0.1,
            lambda_kl: 0.01,
            pretrain_steps: 0,
            train_steps: 0,
            seed: 42,
            subset_strategy: SubsetStrategy::Uniform15,
            module_toggles: ModuleToggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), XhvedError> {
        if self.batch_size == 0 {
            return Err(XhvedError::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(XhvedError::config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("lambda_rec", self.lambda_rec), ("lambda_kl", self.lambda_kl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(XhvedError::config(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Joint,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Joint => "joint",
        })
    }
}

/// Parameters kept fixed during reconstruction pretraining: the two finest
/// segmentation decoder stages, the segmentation output head, and the
/// feature-exchange blocks. The coarsest segmentation stage stays trainable
/// because exchange feeds its activations into the reconstruction branch.
pub fn pretrain_frozen(name: &str) -> bool {
    ["dec.seg.s1.", "dec.seg.s0.", "dec.seg.head.", "dusfe."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Draw the modality subset shown to the model this step.
pub fn sample_subset(rng: &mut impl Rng, strategy: SubsetStrategy) -> ModalitySubset {
    match strategy {
        SubsetStrategy::Uniform15 => ModalitySubset::from_bits(rng.gen_range(1..=15u8)),
        SubsetStrategy::FullOnly => ModalitySubset::full(),
    }
}

/// Soft Dice loss averaged over the three tumor regions. Both inputs are
/// [B, 3, D, H, W]; the region sums pool the batch with the voxels, and a
/// perfect prediction yields exactly zero.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, pred: TensorId, target: TensorId) -> TensorId {
    let ps = tape.shape(pred).to_vec();
    assert!(
        ps.len() == 5 && ps[1] == 3,
        "contract violation: dice_loss expects [B,3,D,H,W], got {ps:?}"
    );
    assert!(
        tape.shape(target) == ps,
        "contract violation: dice_loss shapes differ: {ps:?} vs {:?}",
        tape.shape(target)
    );
    let b = ps[0];
    let inter = tape.mul(pred, target);
    // [B,3] region sums, reshaped to [B,3,1] so a region is one token.
    let sums = [inter, pred, target].map(|x| {
        let s = tape.spatial_sum(x);
        tape.reshape(s, &[b, 3, 1])
    });
    let mut acc: Option<TensorId> = None;
    for r in 0..3 {
        let [s_pt, s_p, s_t] = sums.map(|s| {
            let col = tape.select_token(s, r);
            tape.sum_all(col)
        });
        let two_pt = tape.mul_scalar(s_pt, 2.0);
        let num = tape.add_scalar(two_pt, DICE_EPS);
        let p_plus_t = tape.add(s_p, s_t);
        let den = tape.add_scalar(p_plus_t, DICE_EPS);
        let frac = tape.div(num, den);
        let neg = tape.neg(frac);
        let one_minus = tape.add_scalar(neg, 1.0);
        acc = Some(match acc {
            None => one_minus,
            Some(a) => tape.add(a, one_minus),
        });
    }
    tape.mul_scalar(acc.expect("three regions"), 1.0 / 3.0)
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: TensorId, target: TensorId) -> TensorId {
    assert!(
        tape.shape(pred) == tape.shape(target),
        "contract violation: mse_loss shapes differ: {:?} vs {:?}",
        tape.shape(pred),
        tape.shape(target)
    );
    let d = tape.sub(pred, target);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// The assembled step loss and its components, all scalar nodes.
pub struct LossParts {
    pub total: TensorId,
    pub dice: TensorId,
    pub rec: TensorId,
    pub kl: TensorId,
}

/// Pretraining optimizes reconstruction (+ weighted KL); the joint phase
/// optimizes Dice (+ weighted reconstruction + weighted KL). A weight of
/// zero skips its term entirely, so the total *is* the remaining node.
#[allow(clippy::too_many_arguments)]
pub fn loss_parts<T: Real>(
    tape: &mut Tape<T>,
    phase: Phase,
    cfg: &TrainConfig,
    seg: TensorId,
    seg_target: TensorId,
    recon: TensorId,
    rec_target: TensorId,
    kl_terms: &[TensorId],
) -> LossParts {
    assert!(!kl_terms.is_empty(), "contract violation: at least one KL term expected");
    let dice = dice_loss(tape, seg, seg_target);
    let rec = mse_loss(tape, recon, rec_target);
    let mut kl = kl_terms[0];
    for term in &kl_terms[1..] {
        kl = tape.add(kl, *term);
    }
    let mut total = match phase {
        Phase::Pretrain => rec,
        Phase::Joint => dice,
    };
    if phase == Phase::Joint && cfg.lambda_rec > 0.0 {
        let w = tape.mul_scalar(rec, cfg.lambda_rec);
        total = tape.add(total, w);
    }
    if cfg.lambda_kl > 0.0 {
        let w = tape.mul_scalar(kl, cfg.lambda_kl);
        total = tape.add(total, w);
    }
    LossParts { total, dice, rec, kl }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub dice: f64,
    pub rec: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step,phase,loss,dice_loss,rec_loss,kl,grad_norm";

/// Render step records as CSV, one row per step under [`LOG_HEADER`].
pub fn log_csv(records: &[StepRecord]) -> String {
    let mut out = String::with_capacity(32 * (records.len() + 1));
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.phase, r.loss, r.dice, r.rec, r.kl, r.grad_norm
        ));
    }
    out
}

pub struct Trainer<T: Real> {
    pub model: XhvedModel<T>,
    pub train_config: TrainConfig,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub log: Vec<StepRecord>,
}

impl<T: Real> Trainer<T> {
    /// The module toggles are applied onto the model config, so one train
    /// config fully describes an ablation.
    pub fn new(mut model_config: ModelConfig, train_config: TrainConfig) -> Self {
        train_config
            .validate()
            .unwrap_or_else(|e| panic!("contract violation: {e}"));
        model_config.use_save_attention = train_config.module_toggles.save_attention;
        model_config.use_vila = train_config.module_toggles.vila;
        model_config.use_sfeca = train_config.module_toggles.sfeca;
        let opt = Adam::new(train_config.learning_rate);
        let rng = substream(train_config.seed, "train");
        Trainer {
            model: XhvedModel::new(model_config),
            train_config,
            opt,
            rng,
            step: 0,
            log: Vec::new(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.train_config.pretrain_steps + self.train_config.train_steps
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.train_config.pretrain_steps {
            Phase::Pretrain
        } else {
            Phase::Joint
        }
    }

    fn validate_dataset(&self, dataset: &[Volume<T>]) {
        assert!(!dataset.is_empty(), "contract violation: dataset is empty");
        for v in dataset {
            let s = v.shape();
            assert!(
                s[0] == 1 && s[2..] == self.model.config.extent,
                "contract violation: dataset item shape {s:?} does not fit extent {:?}",
                self.model.config.extent
            );
            for role in ChannelRole::MODALITIES.iter().chain(&ChannelRole::LABELS) {
                assert!(
                    v.channel_of(*role).is_some(),
                    "contract violation: dataset item lacks a {role} channel"
                );
            }
        }
    }

    /// Run one optimization step. On a non-finite loss the parameters are
    /// left untouched and the step is not counted.
    pub fn step_once(&mut self, dataset: &[Volume<T>]) -> Result<StepRecord, XhvedError> {
        self.validate_dataset(dataset);
        let phase = self.phase();
        match phase {
            Phase::Pretrain => self.model.params.set_frozen_where(pretrain_frozen),
            Phase::Joint => self.model.params.thaw_all(),
        }

        // Fixed RNG consumption order: batch indices, subset, latent noise.
        let items: Vec<Volume<T>> = (0..self.train_config.batch_size)
            .map(|_| dataset[self.rng.gen_range(0..dataset.len())].clone())
            .collect();
        let batch = Volume::stack(&items);
        let subset = sample_subset(&mut self.rng, self.train_config.subset_strategy);
        let norm = normalize_intensities(&batch, ModalitySubset::full());

        let mut tape: Tape<T> = Tape::new();
        let mut binder = self.model.binder();
        let images = self.model.push_images(&mut tape, &norm, subset);
        let eps = self
            .model
            .push_eps(&mut tape, &mut self.rng, self.train_config.batch_size);
        let fwd = self.model.forward(
            &mut tape,
            &mut binder,
            subset,
            &images,
            Some(&eps),
            LatentMode::Sample,
        );
        let seg_target = self.model.push_channels(&mut tape, &norm, &ChannelRole::LABELS);
        let rec_target = self.model.push_channels(&mut tape, &norm, &ChannelRole::MODALITIES);
        let parts = loss_parts(
            &mut tape,
            phase,
            &self.train_config,
            fwd.seg,
            seg_target,
            fwd.recon,
            rec_target,
            &fwd.kl_terms,
        );

        let loss = tape.scalar_value(parts.total).to_f64();
        if let Some(p) = tape.poison() {
            return Err(XhvedError::numeric(format!(
                "step {} ({} phase, subset {:#06b}): non-finite value produced by {} — parameters unchanged",
                self.step,
                phase,
                subset.bits(),
                p.op
            )));
        }
        if !loss.is_finite() {
            return Err(XhvedError::numeric(format!(
                "step {} ({} phase): loss is {loss} — parameters unchanged",
                self.step, phase
            )));
        }

        tape.backward(parts.total);
        let grads = binder.grads(&tape);
        let grad_norm = self.opt.step(&mut self.model.params, &grads);

        let record = StepRecord {
            step: self.step,
            phase,
            loss,
            dice: tape.scalar_value(parts.dice).to_f64(),
            rec: tape.scalar_value(parts.rec).to_f64(),
            kl: tape.scalar_value(parts.kl).to_f64(),
            grad_norm,
        };
        self.step += 1;
        self.log.push(record.clone());
        Ok(record)
    }

    /// Advance to the end of the schedule, appending to the log.
    pub fn run(&mut self, dataset: &[Volume<T>]) -> Result<(), XhvedError> {
        while self.step < self.total_steps() {
            self.step_once(dataset)?;
        }
        Ok(())
    }
}
