//! Bottleneck token mixing with a matrix-memory LSTM scan.
//!
//! The bottleneck feature map is flattened into tokens, projected, position-
//! embedded, and passed through residual blocks that scan the tokens with an
//! mLSTM — alternating direction per block. Each step keeps a matrix memory
//! C, a normalizer n, and a log-space stabilizer m; the stabilizer shift
//! keeps both exponentials at or below one, so arbitrarily long scans cannot
//! overflow. The mixed tokens become a channel-softmax gate on the original
//! features.

use super::{linear_bias, ModelConfig, GN_EPS};
use crate::dtype::Real;
use crate::params::Binder;
use crate::tensor::{Tape, TensorId};

/// Recurrent state of one mLSTM scan: matrix memory C [B,d,d], normalizer
/// n [B,d], and log-space stabilizer m [B].
#[derive(Debug, Clone, Copy)]
pub struct MlstmState {
    pub c: TensorId,
    pub n: TensorId,
    pub m: TensorId,
}

impl MlstmState {
    pub fn zeros<T: Real>(tape: &mut Tape<T>, batch: usize, d: usize) -> Self {
        MlstmState {
            c: tape.leaf(vec![T::zero(); batch * d * d], &[batch, d, d]),
            n: tape.leaf(vec![T::zero(); batch * d], &[batch, d]),
            m: tape.leaf(vec![T::zero(); batch], &[batch]),
        }
    }
}

/// One stabilized mLSTM step.
///
/// q, k, v are [B,d]; the three gate pre-activations are [B]. The input and
/// forget factors are shifted by m' = max(log σ(f̃) + m, ĩ), so both stay in
/// (0, 1] regardless of gate magnitude.
pub fn mlstm_step<T: Real>(
    tape: &mut Tape<T>,
    state: &MlstmState,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    i_pre: TensorId,
    f_pre: TensorId,
    o_pre: TensorId,
) -> (TensorId, MlstmState) {
    let d = *tape.shape(q).last().expect("q is [B,d]");
    let k_scaled = tape.mul_scalar(k, 1.0 / (d as f64).sqrt());
    let logf = tape.logsigmoid(f_pre);
    let f_shift = tape.add(logf, state.m);
    let m_next = tape.max_pair(f_shift, i_pre);
    let i_arg = tape.sub(i_pre, m_next);
    let i_gate = tape.exp(i_arg);
    let f_arg = tape.sub(f_shift, m_next);
    let f_gate = tape.exp(f_arg);

    let vk = tape.bouter(v, k_scaled);
    let c_keep = tape.mul_bcast_b(state.c, f_gate);
    let c_add = tape.mul_bcast_b(vk, i_gate);
    let c_next = tape.add(c_keep, c_add);
    let n_keep = tape.mul_bcast_b(state.n, f_gate);
    let n_add = tape.mul_bcast_b(k_scaled, i_gate);
    let n_next = tape.add(n_keep, n_add);

    // h̃ = (C'q) / max(|n'·q|, 1): the floor keeps early, near-empty memory
    // from amplifying the readout.
    let num = tape.bmatvec(c_next, q);
    let nq = tape.bdot(n_next, q);
    let nq_abs = tape.abs(nq);
    let denom = tape.max_const(nq_abs, 1.0);
    let inv = tape.recip(denom);
    let h_tilde = tape.mul_bcast_b(num, inv);
    let o_gate = tape.sigmoid(o_pre);
    let h = tape.mul_bcast_b(h_tilde, o_gate);
    (
        h,
        MlstmState {
            c: c_next,
            n: n_next,
            m: m_next,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
}

impl ScanDirection {
    fn positions(self, n: usize) -> Vec<usize> {
        match self {
            ScanDirection::Forward => (0..n).collect(),
            ScanDirection::Backward => (0..n).rev().collect(),
        }
    }
}

/// One residual mLSTM block over tokens [B,N,d]: per-token norm, q/k/v and
/// gate projections, a directional scan, and an output projection added back
/// to the input.
pub fn vil_block<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    tokens: TensorId,
    direction: ScanDirection,
) -> TensorId {
    let shape = tape.shape(tokens).to_vec();
    assert!(shape.len() == 3, "contract violation: tokens must be [B,N,d], got {shape:?}");
    let (b, n, d) = (shape[0], shape[1], shape[2]);

    let flat = tape.reshape(tokens, &[b * n, d]);
    let g = binder.bind(tape, &format!("{prefix}.norm.g"));
    let beta = binder.bind(tape, &format!("{prefix}.norm.b"));
    let normed_flat = tape.group_norm(flat, g, beta, 1, GN_EPS);
    let normed = tape.reshape(normed_flat, &[b, n, d]);

    let qs = linear_bias(tape, binder, &format!("{prefix}.q"), normed);
    let ks = linear_bias(tape, binder, &format!("{prefix}.k"), normed);
    let vs = linear_bias(tape, binder, &format!("{prefix}.v"), normed);
    let gi = linear_bias(tape, binder, &format!("{prefix}.gi"), normed);
    let gf = linear_bias(tape, binder, &format!("{prefix}.gf"), normed);
    let go = linear_bias(tape, binder, &format!("{prefix}.go"), normed);

    let mut state = MlstmState::zeros(tape, b, d);
    let mut hs: Vec<Option<TensorId>> = vec![None; n];
    for t in direction.positions(n) {
        let q = tape.select_token(qs, t);
        let k = tape.select_token(ks, t);
        let v = tape.select_token(vs, t);
        let i_sel = tape.select_token(gi, t);
        let i_pre = tape.reshape(i_sel, &[b]);
        let f_sel = tape.select_token(gf, t);
        let f_pre = tape.reshape(f_sel, &[b]);
        let o_sel = tape.select_token(go, t);
        let o_pre = tape.reshape(o_sel, &[b]);
        let (h, next) = mlstm_step(tape, &state, q, k, v, i_pre, f_pre, o_pre);
        state = next;
        hs[t] = Some(h);
    }
    let placed: Vec<TensorId> = hs.into_iter().map(|h| h.expect("every position scanned")).collect();
    let stacked = tape.stack_tokens(&placed);
    let out = linear_bias(tape, binder, &format!("{prefix}.out"), stacked);
    tape.add(tokens, out)
}

/// Token-mix the bottleneck and gate it with a channel softmax of the mixed
/// features: out = x ⊙ softmax_C(mix(x)) + x.
pub fn vila_gate<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    cfg: &ModelConfig,
    x: TensorId,
) -> TensorId {
    let shape = tape.shape(x).to_vec();
    let d = cfg.token_dim();
    assert!(
        shape.len() == 5 && shape[1] == d && shape[2..] == cfg.bottleneck_extent(),
        "contract violation: token mixer expects [B,{d},{:?}], got {shape:?}",
        cfg.bottleneck_extent()
    );

    let tokens = tape.tokenize(x);
    let mut t = linear_bias(tape, binder, "vila.proj", tokens);
    let pos = binder.bind(tape, "vila.pos");
    t = tape.add_bcast_outer(t, pos);
    for bix in 0..cfg.vil_blocks {
        let dir = if bix % 2 == 0 { ScanDirection::Forward } else { ScanDirection::Backward };
        t = vil_block(tape, binder, &format!("vila.b{bix}"), t, dir);
    }
    let mixed = tape.detokenize(t, cfg.bottleneck_extent());
    let gate = tape.softmax_axis(mixed, 1);
    let gated = tape.mul(x, gate);
    tape.add(gated, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, XhvedModel};
    use crate::rng::substream;
    use rand::Rng;

    fn leafv(tape: &mut Tape<f64>, v: &[f64], shape: &[usize]) -> TensorId {
        tape.leaf(v.to_vec(), shape)
    }

    #[test]
    fn first_step_with_unit_inputs_and_zero_gates_emits_exactly_half() {
        // From zero state: m' = max(ln σ(0), 0) = 0, i' = 1, f' = ½,
        // C' = v·kᵀ = 1, n' = 1, h̃ = 1/max(1,1) = 1, h = σ(0)·1 = ½ exactly.
        let mut tape: Tape<f64> = Tape::new();
        let state = MlstmState::zeros(&mut tape, 1, 1);
        let q = leafv(&mut tape, &[1.0], &[1, 1]);
        let k = leafv(&mut tape, &[1.0], &[1, 1]);
        let v = leafv(&mut tape, &[1.0], &[1, 1]);
        let z = leafv(&mut tape, &[0.0], &[1]);
        let (h, _) = mlstm_step(&mut tape, &state, q, k, v, z, z, z);
        assert_eq!(tape.data(h), &[0.5], "first-step readout must be exactly one half");
    }

    #[test]
    fn a_stored_key_value_pair_is_retrieved_by_its_key_one_step_later() {
        let d = 4usize;
        let val = [0.3, -0.7, 0.9, 0.1];
        let mut tape: Tape<f64> = Tape::new();
        let state = MlstmState::zeros(&mut tape, 1, d);
        // Store: key e₂ (pre-scaled by √d so k_scaled = e₂), write gate wide open.
        let k1 = leafv(&mut tape, &[0.0, 0.0, 2.0, 0.0], &[1, d]);
        let v1 = leafv(&mut tape, &val, &[1, d]);
        let q1 = leafv(&mut tape, &[0.0; 4], &[1, d]);
        let i1 = leafv(&mut tape, &[40.0], &[1]);
        let z = leafv(&mut tape, &[0.0], &[1]);
        let (_, state) = mlstm_step(&mut tape, &state, q1, k1, v1, i1, z, z);
        // Retrieve: query the same key, write gate shut, forget gate open.
        let q2 = leafv(&mut tape, &[0.0, 0.0, 2.0, 0.0], &[1, d]);
        let zero_kv = leafv(&mut tape, &[0.0; 4], &[1, d]);
        let i2 = leafv(&mut tape, &[-40.0], &[1]);
        let f2 = leafv(&mut tape, &[40.0], &[1]);
        let o2 = leafv(&mut tape, &[40.0], &[1]);
        let (h, _) = mlstm_step(&mut tape, &state, q2, zero_kv, zero_kv, i2, f2, o2);
        for (i, (got, want)) in tape.data(h).iter().zip(&val).enumerate() {
            assert!(
                (got - want).abs() < 1e-12,
                "slot {i}: retrieved {got}, stored {want}"
            );
        }
    }

    /// Run `steps` scan steps from a zero state, restarting the tape every
    /// `segment` steps by re-pushing the state values as fresh leaves.
    /// Returns every h value in order.
    fn run_segmented(steps: usize, segment: usize, seed: u64, gate_range: f64) -> Vec<Vec<f64>> {
        let d = 4usize;
        let mut rng = substream(seed, "mlstm-stream");
        let mut out = Vec::with_capacity(steps);
        let mut carried: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;
        let mut done = 0;
        while done < steps {
            let mut tape: Tape<f64> = Tape::new();
            let mut state = match &carried {
                None => MlstmState::zeros(&mut tape, 1, d),
                Some((c, n, m)) => MlstmState {
                    c: tape.leaf(c.clone(), &[1, d, d]),
                    n: tape.leaf(n.clone(), &[1, d]),
                    m: tape.leaf(m.clone(), &[1]),
                },
            };
            for _ in 0..segment.min(steps - done) {
                let qv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let kv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let vv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let gates: Vec<f64> = (0..3).map(|_| rng.gen_range(-gate_range..gate_range)).collect();
                let q = tape.leaf(qv, &[1, d]);
                let k = tape.leaf(kv, &[1, d]);
                let v = tape.leaf(vv, &[1, d]);
                let i = tape.leaf(vec![gates[0]], &[1]);
                let f = tape.leaf(vec![gates[1]], &[1]);
                let o = tape.leaf(vec![gates[2]], &[1]);
                let (h, next) = mlstm_step(&mut tape, &state, q, k, v, i, f, o);
                out.push(tape.data(h).to_vec());
                state = next;
                done += 1;
            }
            assert!(tape.poison().is_none(), "scan segment went non-finite");
            carried = Some((
                tape.data(state.c).to_vec(),
                tape.data(state.n).to_vec(),
                tape.data(state.m).to_vec(),
            ));
        }
        out
    }

    #[test]
    fn restarting_the_scan_from_carried_state_values_changes_no_bits() {
        let whole = run_segmented(128, 128, 21, 3.0);
        let pieces = run_segmented(128, 32, 21, 3.0);
        for (t, (a, b)) in whole.iter().zip(&pieces).enumerate() {
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "step {t} diverged between one-shot and segmented scans"
            );
        }
    }

    #[test]
    fn ten_thousand_steps_with_extreme_gates_stay_finite_and_bounded() {
        let hs = run_segmented(10_000, 500, 22, 50.0);
        for (t, h) in hs.iter().enumerate() {
            for v in h {
                assert!(v.is_finite(), "step {t} produced a non-finite readout");
                assert!(v.abs() < 1e6, "step {t} readout {v} left the stable range");
            }
        }
    }

    #[test]
    fn gradients_of_one_step_match_finite_differences() {
        let rep = crate::tensor::check_builder(
            |t: &mut Tape<f64>, ids: &[TensorId]| {
                let state = MlstmState::zeros(t, 2, 3);
                let (h, next) = mlstm_step(t, &state, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
                let hsum = t.sum_all(h);
                let csum = t.sum_all(next.c);
                t.add(hsum, csum)
            },
            &[
                (vec![2, 3], vec![0.4, -0.2, 0.8, -0.5, 0.3, 0.9]),
                (vec![2, 3], vec![0.1, 0.7, -0.3, 0.6, -0.8, 0.2]),
                (vec![2, 3], vec![-0.6, 0.5, 0.2, -0.1, 0.4, -0.9]),
                (vec![2], vec![0.3, -0.4]),
                (vec![2], vec![-0.2, 0.6]),
                (vec![2], vec![0.5, -0.7]),
            ],
            2e-5,
            1e-6,
            64,
            31,
        )
        .expect("finite probes");
        assert!(rep.pass, "mLSTM step gradient check failed: {rep:?}");
    }

    #[test]
    fn zero_weight_blocks_pass_tokens_through_bit_exactly() {
        let mut model: XhvedModel<f64> = XhvedModel::new(ModelConfig::tiny([16, 16, 16], 5));
        let zero_names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("vila.b0."))
            .map(String::from)
            .collect();
        for name in zero_names {
            model.params.get_mut(&name).data.fill(0.0);
        }
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = model.binder();
        let mut rng = substream(6, "tokens");
        let d = model.config.token_dim();
        let n = model.config.n_tokens();
        let vals: Vec<f64> = (0..n * d).map(|_| rng.gen_range(0.1..1.0)).collect();
        let tokens = tape.leaf(vals.clone(), &[1, n, d]);
        let out = vil_block(&mut tape, &mut binder, "vila.b0", tokens, ScanDirection::Forward);
        assert!(
            tape.data(out).iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()),
            "an all-zero block must reduce to the residual path exactly"
        );
    }

    #[test]
    fn palindromic_tokens_make_the_backward_scan_a_bit_exact_reversal() {
        let model: XhvedModel<f64> = XhvedModel::new(ModelConfig::tiny([16, 16, 16], 7));
        let d = model.config.token_dim();
        let n = 6usize;
        let mut rng = substream(8, "palindrome");
        let half: Vec<Vec<f64>> = (0..n / 2)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut vals = Vec::with_capacity(n * d);
        for t in 0..n {
            let src = if t < n / 2 { &half[t] } else { &half[n - 1 - t] };
            vals.extend_from_slice(src);
        }
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = model.binder();
        let tokens = tape.leaf(vals, &[1, n, d]);
        let fwd = vil_block(&mut tape, &mut binder, "vila.b0", tokens, ScanDirection::Forward);
        let bwd = vil_block(&mut tape, &mut binder, "vila.b0", tokens, ScanDirection::Backward);
        let (fd, bd) = (tape.data(fwd).to_vec(), tape.data(bwd).to_vec());
        for t in 0..n {
            let f = &fd[t * d..(t + 1) * d];
            let b = &bd[(n - 1 - t) * d..(n - t) * d];
            assert!(
                f.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "position {t}: backward scan of a palindrome must mirror forward bits"
            );
        }
    }

    #[test]
    fn the_softmax_gate_sums_to_one_over_channels_everywhere() {
        let model: XhvedModel<f64> = XhvedModel::new(ModelConfig::tiny([16, 16, 16], 9));
        let cfg = &model.config;
        let (d, [bd, bh, bw]) = (cfg.token_dim(), cfg.bottleneck_extent());
        let vox = bd * bh * bw;
        let mut rng = substream(10, "gate-x");
        let vals: Vec<f64> = (0..d * vox).map(|_| rng.gen_range(0.5..1.5)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = model.binder();
        let x = tape.leaf(vals.clone(), &[1, d, bd, bh, bw]);
        let out = vila_gate(&mut tape, &mut binder, cfg, x);
        // out = x·g + x, so Σ_c g = Σ_c (out/x − 1) must be 1 at every voxel.
        let od = tape.data(out).to_vec();
        for s in 0..vox {
            let sum: f64 = (0..d).map(|c| od[c * vox + s] / vals[c * vox + s] - 1.0).sum();
            assert!((sum - 1.0).abs() < 1e-6, "voxel {s}: gate channels sum to {sum}");
        }
    }

    #[test]
    fn zero_parameters_scale_the_input_by_exactly_one_plus_a_channel_fraction() {
        let mut model: XhvedModel<f64> = XhvedModel::new(ModelConfig::tiny([16, 16, 16], 11));
        let names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("vila."))
            .map(String::from)
            .collect();
        for name in names {
            model.params.get_mut(&name).data.fill(0.0);
        }
        let cfg = model.config.clone();
        let (d, [bd, bh, bw]) = (cfg.token_dim(), cfg.bottleneck_extent());
        let mut rng = substream(12, "zero-vila");
        let vals: Vec<f64> = (0..d * bd * bh * bw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = model.binder();
        let x = tape.leaf(vals.clone(), &[1, d, bd, bh, bw]);
        let out = vila_gate(&mut tape, &mut binder, &cfg, x);
        let factor = 1.0 + 1.0 / d as f64;
        assert!(
            tape.data(out).iter().zip(&vals).all(|(o, v)| o.to_bits() == (factor * v).to_bits()),
            "a uniform gate must scale by exactly {factor}"
        );
    }
}
