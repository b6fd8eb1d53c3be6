//! Per-modality variational encoders with Gaussian-product fusion.
//!
//! Each available modality runs through four convolutional levels (spatial
//! attention after every level), and a 1³ Gaussian head emits a per-level
//! (μ, log σ²) pair. [`pog_fuse`] multiplies the available experts — plus an
//! optional N(0, I) prior — in precision space, so missing modalities simply
//! never enter the product. The fused latents are reparameterized into skip
//! features; the deepest one is channel-halved by the dimension-reduction
//! block before the bottleneck.

use super::{conv_bias, conv_unit, gn_groups, LatentMode, ModelConfig, GN_EPS};
use crate::dtype::Real;
use crate::modality::{Modality, ModalitySubset};
use crate::params::Binder;
use crate::tensor::{Tape, TensorId};

/// Hard clamp on log-variances, keeping precisions within [e⁻¹⁰, e¹⁰].
pub const LOGVAR_CLAMP: f64 = 10.0;

/// A diagonal Gaussian over one feature level.
#[derive(Debug, Clone, Copy)]
pub struct LevelLatent {
    pub mu: TensorId,
    pub logvar: TensorId,
}

/// One encoder level: two 3³ conv + group-norm + leaky-relu units, then
/// spatial attention when enabled.
fn encoder_level<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: TensorId,
) -> TensorId {
    let mut y = conv_unit(tape, binder, &format!("{prefix}.conv1"), &format!("{prefix}.gn1"), x, 1);
    y = conv_unit(tape, binder, &format!("{prefix}.conv2"), &format!("{prefix}.gn2"), y, 1);
    if cfg.use_save_attention {
        y = spatial_attention(tape, binder, &format!("{prefix}.sa"), y);
    }
    y
}

/// Gate a feature map by a 7³ convolution over its channel mean and max.
pub fn spatial_attention<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    f: TensorId,
) -> TensorId {
    let mean = tape.channel_mean(f);
    let mx = tape.channel_max(f);
    let pooled = tape.concat_c(mean, mx);
    let pre = conv_bias(tape, binder, prefix, pooled, 3);
    let gate = tape.sigmoid(pre);
    tape.mul_gate_spatial(f, gate)
}

/// 1³-conv Gaussian head with clamped log-variance.
fn gaussian_head<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    f: TensorId,
) -> LevelLatent {
    let mu = conv_bias(tape, binder, &format!("{prefix}.mu"), f, 0);
    let lv_raw = conv_bias(tape, binder, &format!("{prefix}.lv"), f, 0);
    let logvar = tape.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    LevelLatent { mu, logvar }
}

/// Encode one modality image into its four per-level Gaussians.
pub fn encode_modality<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    cfg: &ModelConfig,
    m: Modality,
    image: TensorId,
) -> [LevelLatent; 4] {
    let shape = tape.shape(image).to_vec();
    assert!(
        shape.len() == 5 && shape[1] == 1 && shape[2..] == cfg.extent,
        "contract violation: modality image must be [B,1,{:?}], got {shape:?}",
        cfg.extent
    );
    let mut cur = image;
    let mut out = Vec::with_capacity(4);
    for l in 0..4 {
        if l > 0 {
            cur = tape.down2(cur);
        }
        let prefix = format!("enc.{}.l{l}", m.name());
        cur = encoder_level(tape, binder, cfg, &prefix, cur);
        out.push(gaussian_head(tape, binder, &prefix, cur));
    }
    out.try_into().expect("four levels")
}

/// Product of Gaussians over the given experts, optionally including the
/// standard-normal prior. Experts are summed in sorted-modality order, so
/// the result is bit-exact under any caller-side permutation.
pub fn pog_fuse<T: Real>(
    tape: &mut Tape<T>,
    experts: &[(Modality, LevelLatent)],
    include_prior: bool,
) -> LevelLatent {
    assert!(
        !experts.is_empty(),
        "contract violation: product of Gaussians needs at least one expert"
    );
    let mut sorted: Vec<&(Modality, LevelLatent)> = experts.iter().collect();
    sorted.sort_by_key(|(m, _)| m.index());

    let mut lam_sum: Option<TensorId> = None;
    let mut num_sum: Option<TensorId> = None;
    for (_, e) in sorted {
        let neg_lv = tape.neg(e.logvar);
        let lam = tape.exp(neg_lv);
        let weighted = tape.mul(lam, e.mu);
        lam_sum = Some(match lam_sum {
            None => lam,
            Some(s) => tape.add(s, lam),
        });
        num_sum = Some(match num_sum {
            None => weighted,
            Some(s) => tape.add(s, weighted),
        });
    }
    let mut lam = lam_sum.expect("nonempty");
    if include_prior {
        // The prior contributes precision 1 and nothing to the numerator.
        lam = tape.add_scalar(lam, 1.0);
    }
    let mu = tape.div(num_sum.expect("nonempty"), lam);
    let ln_lam = tape.ln(lam);
    let logvar = tape.neg(ln_lam);
    LevelLatent { mu, logvar }
}

/// z = μ + exp(½·logvar)·ε in sample mode, z = μ in mean mode. ε is a
/// constant leaf, so gradients reach μ and logvar only.
pub fn reparameterize<T: Real>(
    tape: &mut Tape<T>,
    g: &LevelLatent,
    eps: Option<TensorId>,
    mode: LatentMode,
) -> TensorId {
    match mode {
        LatentMode::Mean => g.mu,
        LatentMode::Sample => {
            let eps = eps.expect("contract violation: sample mode needs a noise tensor");
            let half_lv = tape.mul_scalar(g.logvar, 0.5);
            let std = tape.exp(half_lv);
            let scaled = tape.mul(std, eps);
            tape.add(g.mu, scaled)
        }
    }
}

/// Mean over the batch of Σ ½(μ² + e^logvar − 1 − logvar).
pub fn kl_standard_normal<T: Real>(tape: &mut Tape<T>, g: &LevelLatent) -> TensorId {
    let batch = tape.shape(g.mu)[0];
    let sq = tape.mul(g.mu, g.mu);
    let var = tape.exp(g.logvar);
    let s = tape.add(sq, var);
    let s = tape.add_scalar(s, -1.0);
    let s = tape.sub(s, g.logvar);
    let s = tape.mul_scalar(s, 0.5);
    let total = tape.sum_all(s);
    tape.mul_scalar(total, 1.0 / batch as f64)
}

/// Dimension-reduction block: 1³ conv halving the channels, then group norm
/// and leaky-relu.
pub fn drb_reduce<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    f: TensorId,
) -> TensorId {
    let c = tape.shape(f)[1];
    assert!(c % 2 == 0, "contract violation: dimension reduction needs an even channel count, got {c}");
    let y = conv_bias(tape, binder, "drb.conv", f, 0);
    let g = binder.bind(tape, "drb.gn.g");
    let b = binder.bind(tape, "drb.gn.b");
    let y = tape.group_norm(y, g, b, gn_groups(c / 2), GN_EPS);
    tape.leaky_relu(y, super::LEAKY_SLOPE)
}

pub struct EncodeOutput {
    /// Reparameterized latents at levels 0..2, used as decoder skips.
    pub skips: [TensorId; 3],
    /// Channel-halved level-3 latent, ready for the token mixer.
    pub bottleneck: TensorId,
    /// KL of the fused posterior at each level.
    pub kl_terms: Vec<TensorId>,
}

/// Encode every available modality, fuse per level, sample, and reduce the
/// deepest latent.
pub fn encode_subset<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    cfg: &ModelConfig,
    subset: ModalitySubset,
    images: &[Option<TensorId>; 4],
    eps: Option<&[TensorId; 4]>,
    mode: LatentMode,
) -> EncodeOutput {
    assert!(subset.count() >= 1, "contract violation: empty modality subset");
    let mut per_level: [Vec<(Modality, LevelLatent)>; 4] = Default::default();
    for m in subset.available() {
        let image = images[m.index()].expect("checked by forward");
        let latents = encode_modality(tape, binder, cfg, m, image);
        for (l, lat) in latents.into_iter().enumerate() {
            per_level[l].push((m, lat));
        }
    }

    let mut kl_terms = Vec::with_capacity(4);
    let mut zs = Vec::with_capacity(4);
    for (l, experts) in per_level.iter().enumerate() {
        let fused = pog_fuse(tape, experts, cfg.include_prior);
        kl_terms.push(kl_standard_normal(tape, &fused));
        zs.push(reparameterize(tape, &fused, eps.map(|a| a[l]), mode));
    }

    let bottleneck = drb_reduce(tape, binder, zs[3]);
    EncodeOutput {
        skips: [zs[0], zs[1], zs[2]],
        bottleneck,
        kl_terms,
    }
}
