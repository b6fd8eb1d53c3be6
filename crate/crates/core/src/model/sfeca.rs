//! Mirrored segmentation/reconstruction decoders with feature exchange.
//!
//! Both branches climb the same three skip levels (up2 → concat skip → two
//! conv units). After the two shallowest stages, a DuSFE block lets the
//! branches recalibrate each other: a channel squeeze over both global-
//! average-pooled feature vectors gates each branch per channel, a spatial
//! fusion of both maps gates each branch per voxel, and the result is added
//! back residually. The segmentation head ends in a sigmoid over three
//! nested tumor regions; the reconstruction head is linear over the four
//! modalities.

use super::{conv_bias, conv_unit, linear_bias, ModelConfig, LEAKY_SLOPE};
use crate::dtype::Real;
use crate::params::Binder;
use crate::tensor::{Tape, TensorId};

/// Channel recalibration: gate each branch by a sigmoid FC head over the
/// concatenated global-average-pooled descriptors of both branches.
pub fn csfe<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    f_seg: TensorId,
    f_rec: TensorId,
) -> (TensorId, TensorId) {
    let shape = tape.shape(f_seg).to_vec();
    let vox: usize = shape[2..].iter().product();
    let sum_seg = tape.spatial_sum(f_seg);
    let gap_seg = tape.mul_scalar(sum_seg, 1.0 / vox as f64);
    let sum_rec = tape.spatial_sum(f_rec);
    let gap_rec = tape.mul_scalar(sum_rec, 1.0 / vox as f64);
    let cat = tape.concat_c(gap_seg, gap_rec);
    let squeezed = linear_bias(tape, binder, &format!("{prefix}.fc"), cat);
    let squeezed = tape.leaky_relu(squeezed, LEAKY_SLOPE);
    let r_seg = linear_bias(tape, binder, &format!("{prefix}.r1"), squeezed);
    let g_seg = tape.sigmoid(r_seg);
    let r_rec = linear_bias(tape, binder, &format!("{prefix}.r2"), squeezed);
    let g_rec = tape.sigmoid(r_rec);
    (
        tape.mul_gate_channel(f_seg, g_seg),
        tape.mul_gate_channel(f_rec, g_rec),
    )
}

/// Spatial recalibration: fuse both branches into a single-channel map and
/// gate each branch by its own sigmoid 1³ head over that map.
pub fn ssfe<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    f_seg: TensorId,
    f_rec: TensorId,
) -> (TensorId, TensorId) {
    let a = conv_bias(tape, binder, &format!("{prefix}.c1"), f_seg, 1);
    let b = conv_bias(tape, binder, &format!("{prefix}.c2"), f_rec, 1);
    let cat = tape.concat_c(a, b);
    let fused = conv_bias(tape, binder, &format!("{prefix}.fuse"), cat, 1);
    let p_seg = conv_bias(tape, binder, &format!("{prefix}.g1"), fused, 0);
    let g_seg = tape.sigmoid(p_seg);
    let p_rec = conv_bias(tape, binder, &format!("{prefix}.g2"), fused, 0);
    let g_rec = tape.sigmoid(p_rec);
    (
        tape.mul_gate_spatial(f_seg, g_seg),
        tape.mul_gate_spatial(f_rec, g_rec),
    )
}

/// Channel then spatial recalibration with a residual connection per branch.
pub fn dusfe_block<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    f_seg: TensorId,
    f_rec: TensorId,
) -> (TensorId, TensorId) {
    let (c_seg, c_rec) = csfe(tape, binder, &format!("{prefix}.csfe"), f_seg, f_rec);
    let (s_seg, s_rec) = ssfe(tape, binder, &format!("{prefix}.ssfe"), c_seg, c_rec);
    (tape.add(s_seg, f_seg), tape.add(s_rec, f_rec))
}

/// One decoder stage: double the extent, concatenate the skip, and run two
/// conv units.
fn decoder_stage<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    f: TensorId,
    skip: TensorId,
) -> TensorId {
    let up = tape.up2(f);
    let cat = tape.concat_c(up, skip);
    let y = conv_unit(tape, binder, &format!("{prefix}.conv1"), &format!("{prefix}.gn1"), cat, 1);
    conv_unit(tape, binder, &format!("{prefix}.conv2"), &format!("{prefix}.gn2"), y, 1)
}

/// Run both decoder branches from the bottleneck to full extent.
///
/// Returns (segmentation probabilities [B,3,D,H,W], reconstruction [B,4,D,H,W]).
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    cfg: &ModelConfig,
    bottleneck: TensorId,
    skips: [TensorId; 3],
) -> (TensorId, TensorId) {
    let mut f_seg = bottleneck;
    let mut f_rec = bottleneck;
    for l in (0..3).rev() {
        f_seg = decoder_stage(tape, binder, &format!("dec.seg.s{l}"), f_seg, skips[l]);
        f_rec = decoder_stage(tape, binder, &format!("dec.rec.s{l}"), f_rec, skips[l]);
        if cfg.use_sfeca && l <= 1 {
            (f_seg, f_rec) = dusfe_block(tape, binder, &format!("dusfe.s{l}"), f_seg, f_rec);
        }
    }
    let seg_pre = conv_bias(tape, binder, "dec.seg.head", f_seg, 0);
    let seg = tape.sigmoid(seg_pre);
    let recon = conv_bias(tape, binder, "dec.rec.head", f_rec, 0);
    (seg, recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, XhvedModel};
    use crate::params::ParamStore;
    use crate::rng::substream;
    use rand::Rng;

    /// Store holding just the parameters one DuSFE block needs, zero-filled.
    fn zero_dusfe_store(prefix: &str, c: usize) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let z = |n: usize| vec![0.0; n];
        store.insert(&format!("{prefix}.csfe.fc.w"), &[c / 2, 2 * c], z(c / 2 * 2 * c));
        store.insert(&format!("{prefix}.csfe.fc.b"), &[c / 2], z(c / 2));
        for r in ["r1", "r2"] {
            store.insert(&format!("{prefix}.csfe.{r}.w"), &[c, c / 2], z(c * c / 2));
            store.insert(&format!("{prefix}.csfe.{r}.b"), &[c], z(c));
        }
        for cv in ["c1", "c2"] {
            store.insert(&format!("{prefix}.ssfe.{cv}.w"), &[c, c, 3, 3, 3], z(c * c * 27));
            store.insert(&format!("{prefix}.ssfe.{cv}.b"), &[c], z(c));
        }
        store.insert(&format!("{prefix}.ssfe.fuse.w"), &[1, 2 * c, 3, 3, 3], z(2 * c * 27));
        store.insert(&format!("{prefix}.ssfe.fuse.b"), &[1], z(1));
        for g in ["g1", "g2"] {
            store.insert(&format!("{prefix}.ssfe.{g}.w"), &[1, 1, 1, 1, 1], z(1));
            store.insert(&format!("{prefix}.ssfe.{g}.b"), &[1], z(1));
        }
        store
    }

    fn random_features(seed: u64, c: usize, e: usize) -> Vec<f64> {
        let mut rng = substream(seed, "dusfe-f");
        (0..c * e * e * e).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weight_channel_recalibration_halves_both_branches() {
        let store = zero_dusfe_store("x", 4);
        let mut binder = crate::params::Binder::new(&store);
        let mut tape: Tape<f64> = Tape::new();
        let fs = tape.leaf(random_features(1, 4, 2), &[1, 4, 2, 2, 2]);
        let fr = tape.leaf(random_features(2, 4, 2), &[1, 4, 2, 2, 2]);
        let (gs, gr) = csfe(&mut tape, &mut binder, "x.csfe", fs, fr);
        for (g, f) in [(gs, fs), (gr, fr)] {
            assert!(
                tape.data(g).iter().zip(tape.data(f)).all(|(a, b)| *a == 0.5 * b),
                "zero weights mean σ(0) gates: exactly half the input"
            );
        }
    }

    #[test]
    fn zero_weight_spatial_recalibration_halves_both_branches() {
        let store = zero_dusfe_store("x", 4);
        let mut binder = crate::params::Binder::new(&store);
        let mut tape: Tape<f64> = Tape::new();
        let fs = tape.leaf(random_features(3, 4, 2), &[1, 4, 2, 2, 2]);
        let fr = tape.leaf(random_features(4, 4, 2), &[1, 4, 2, 2, 2]);
        let (gs, gr) = ssfe(&mut tape, &mut binder, "x.ssfe", fs, fr);
        for (g, f) in [(gs, fs), (gr, fr)] {
            assert!(
                tape.data(g).iter().zip(tape.data(f)).all(|(a, b)| *a == 0.5 * b),
                "zero weights mean σ(0) gates: exactly half the input"
            );
        }
    }

    #[test]
    fn zero_weight_exchange_blocks_scale_by_five_quarters_bit_exactly() {
        // Gates collapse to ½ and ½·½ = ¼, so the residual output is
        // 0.25·f + f — which rounds identically to 1.25·f.
        let store = zero_dusfe_store("x", 4);
        let mut binder = crate::params::Binder::new(&store);
        let mut tape: Tape<f64> = Tape::new();
        let vals = random_features(5, 4, 2);
        let fs = tape.leaf(vals.clone(), &[1, 4, 2, 2, 2]);
        let fr = tape.leaf(vals.iter().map(|v| -v).collect(), &[1, 4, 2, 2, 2]);
        let (os, or) = dusfe_block(&mut tape, &mut binder, "x", fs, fr);
        assert!(
            tape.data(os).iter().zip(&vals).all(|(o, v)| o.to_bits() == (1.25 * v).to_bits()),
            "segmentation branch must come out at exactly 1.25×"
        );
        assert!(
            tape.data(or).iter().zip(&vals).all(|(o, v)| o.to_bits() == (1.25 * -v).to_bits()),
            "reconstruction branch must come out at exactly 1.25×"
        );
    }

    /// Plain-arithmetic reimplementation of the channel gate path.
    fn csfe_oracle(
        fs: &[f64],
        fr: &[f64],
        c: usize,
        vox: usize,
        fc_w: &[f64],
        fc_b: &[f64],
        r1_w: &[f64],
        r1_b: &[f64],
        r2_w: &[f64],
        r2_b: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let gap = |f: &[f64]| -> Vec<f64> {
            (0..c).map(|ch| f[ch * vox..(ch + 1) * vox].iter().sum::<f64>() / vox as f64).collect()
        };
        let mut cat = gap(fs);
        cat.extend(gap(fr));
        let h = c / 2;
        let mut sq = vec![0.0; h];
        for o in 0..h {
            let mut acc = fc_b[o];
            for i in 0..2 * c {
                acc += fc_w[o * 2 * c + i] * cat[i];
            }
            sq[o] = if acc >= 0.0 { acc } else { 0.01 * acc };
        }
        let head = |w: &[f64], b: &[f64]| -> Vec<f64> {
            (0..c)
                .map(|o| {
                    let mut acc = b[o];
                    for i in 0..h {
                        acc += w[o * h + i] * sq[i];
                    }
                    1.0 / (1.0 + (-acc).exp())
                })
                .collect()
        };
        let (g1, g2) = (head(r1_w, r1_b), head(r2_w, r2_b));
        let gate = |f: &[f64], g: &[f64]| -> Vec<f64> {
            (0..c * vox).map(|i| f[i] * g[i / vox]).collect()
        };
        (gate(fs, &g1), gate(fr, &g2))
    }

    #[test]
    fn channel_recalibration_matches_a_scalar_oracle_on_random_weights() {
        let c = 4usize;
        let mut store = zero_dusfe_store("x", c);
        let mut rng = substream(6, "csfe-w");
        for name in [
            "x.csfe.fc.w",
            "x.csfe.fc.b",
            "x.csfe.r1.w",
            "x.csfe.r1.b",
            "x.csfe.r2.w",
            "x.csfe.r2.b",
        ] {
            for v in &mut store.get_mut(name).data {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let fs_v = random_features(7, c, 2);
        let fr_v = random_features(8, c, 2);
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = crate::params::Binder::new(&store);
        let fs = tape.leaf(fs_v.clone(), &[1, c, 2, 2, 2]);
        let fr = tape.leaf(fr_v.clone(), &[1, c, 2, 2, 2]);
        let (gs, gr) = csfe(&mut tape, &mut binder, "x.csfe", fs, fr);
        let (os, or) = csfe_oracle(
            &fs_v,
            &fr_v,
            c,
            8,
            &store.get("x.csfe.fc.w").data,
            &store.get("x.csfe.fc.b").data,
            &store.get("x.csfe.r1.w").data,
            &store.get("x.csfe.r1.b").data,
            &store.get("x.csfe.r2.w").data,
            &store.get("x.csfe.r2.b").data,
        );
        for (i, (a, b)) in tape.data(gs).iter().zip(&os).enumerate() {
            assert!((a - b).abs() < 1e-12, "seg branch diverged from the oracle at {i}");
        }
        for (i, (a, b)) in tape.data(gr).iter().zip(&or).enumerate() {
            assert!((a - b).abs() < 1e-12, "rec branch diverged from the oracle at {i}");
        }
    }

    #[test]
    fn recalibration_gates_only_shrink_and_never_flip_sign() {
        let model: XhvedModel<f64> = XhvedModel::new(ModelConfig::tiny([8, 8, 8], 13));
        let c = model.config.channels[1];
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = model.binder();
        let fs_v = random_features(9, c, 4);
        let fr_v = random_features(10, c, 4);
        let fs = tape.leaf(fs_v.clone(), &[1, c, 4, 4, 4]);
        let fr = tape.leaf(fr_v.clone(), &[1, c, 4, 4, 4]);
        let (cs, cr) = csfe(&mut tape, &mut binder, "dusfe.s1.csfe", fs, fr);
        let (ss, sr) = ssfe(&mut tape, &mut binder, "dusfe.s1.ssfe", cs, cr);
        for (out, inp) in [(cs, &fs_v), (cr, &fr_v)] {
            for (i, (o, f)) in tape.data(out).iter().zip(inp).enumerate() {
                if *f != 0.0 {
                    let ratio = o / f;
                    assert!(
                        ratio > 0.0 && ratio < 1.0,
                        "element {i}: a sigmoid gate must scale by (0,1), got {ratio}"
                    );
                }
            }
        }
        for id in [ss, sr] {
            assert!(tape.data(id).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn decoding_returns_both_heads_at_full_extent() {
        let model: XhvedModel<f64> = XhvedModel::new(ModelConfig::tiny([8, 8, 8], 14));
        let cfg = &model.config;
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = model.binder();
        let mut rng = substream(11, "dec-in");
        let mut leaf = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            tape.leaf(data, shape)
        };
        let bottleneck = leaf(&[1, cfg.token_dim(), 1, 1, 1]);
        let skips = [
            leaf(&[1, cfg.channels[0], 8, 8, 8]),
            leaf(&[1, cfg.channels[1], 4, 4, 4]),
            leaf(&[1, cfg.channels[2], 2, 2, 2]),
        ];
        let (seg, recon) = decode(&mut tape, &mut binder, cfg, bottleneck, skips);
        assert_eq!(tape.shape(seg), &[1, 3, 8, 8, 8], "seg head at input extent");
        assert_eq!(tape.shape(recon), &[1, 4, 8, 8, 8], "recon head at input extent");
        assert!(
            tape.data(seg).iter().all(|p| (0.0..=1.0).contains(p)),
            "region probabilities must lie in [0,1]"
        );
        assert!(tape.poison().is_none());
    }
}
