use std::time::Instant;
use xhved_core::{Tape, TensorId};

fn leaf(t: &mut Tape<f32>, shape: &[usize], v: f32) -> TensorId {
    t.leaf(vec![v; shape.iter().product()], shape)
}

fn timed(label: &str, mut build: impl FnMut(&mut Tape<f32>) -> TensorId) {
    // forward cost
    let reps = 10;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape: Tape<f32> = Tape::new();
        let _ = build(&mut tape);
    }
    let fwd = t0.elapsed() / reps;
    // forward + backward cost
    let t1 = Instant::now();
    for _ in 0..reps {
        let mut tape: Tape<f32> = Tape::new();
        let y = build(&mut tape);
        let s = tape.sum_all(y);
        tape.backward(s);
    }
    let both = t1.elapsed() / reps;
    println!("{label:<34} fwd {fwd:>9.2?}   bwd {:>9.2?}", both.saturating_sub(fwd));
}

#[test]
#[ignore]
fn profile_ops() {
    timed("conv3d k3 8->8 @32^3", |t| {
        let x = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        let w = leaf(t, &[8, 8, 3, 3, 3], 0.1);
        t.conv3d(x, w, 1, 1)
    });
    timed("conv3d k3 1->8 @32^3", |t| {
        let x = leaf(t, &[1, 1, 32, 32, 32], 0.5);
        let w = leaf(t, &[8, 1, 3, 3, 3], 0.1);
        t.conv3d(x, w, 1, 1)
    });
    timed("conv3d k3 12->8 @32^3", |t| {
        let x = leaf(t, &[1, 12, 32, 32, 32], 0.5);
        let w = leaf(t, &[8, 12, 3, 3, 3], 0.1);
        t.conv3d(x, w, 1, 1)
    });
    timed("conv3d k3 16->16 @16^3", |t| {
        let x = leaf(t, &[1, 16, 16, 16, 16], 0.5);
        let w = leaf(t, &[16, 16, 3, 3, 3], 0.1);
        t.conv3d(x, w, 1, 1)
    });
    timed("group_norm 8ch @32^3", |t| {
        let x = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        let g = leaf(t, &[8], 1.0);
        let b = leaf(t, &[8], 0.0);
        t.group_norm(x, g, b, 8, 1e-5)
    });
    timed("leaky_relu 8ch @32^3", |t| {
        let x = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        t.leaky_relu(x, 0.01)
    });
    timed("sigmoid 8ch @32^3", |t| {
        let x = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        t.sigmoid(x)
    });
    timed("up2 8ch 16->32", |t| {
        let x = leaf(t, &[1, 8, 16, 16, 16], 0.5);
        t.up2(x)
    });
    timed("down2 8ch 32->16", |t| {
        let x = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        t.down2(x)
    });
    timed("concat_c 8+4 @32^3", |t| {
        let a = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        let b = leaf(t, &[1, 4, 32, 32, 32], 0.5);
        t.concat_c(a, b)
    });
    timed("channel_mean/max+cat @32^3 (attn)", |t| {
        let x = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        let m = t.channel_mean(x);
        let mx = t.channel_max(x);
        let c = t.concat_c(m, mx);
        t.mul_gate_spatial(x, c)
    });
    timed("add 8ch @32^3", |t| {
        let a = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        let b = leaf(t, &[1, 8, 32, 32, 32], 0.5);
        t.add(a, b)
    });
}
