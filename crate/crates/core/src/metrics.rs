//! Segmentation and reconstruction quality metrics.
//!
//! Dice overlap (percent), 95th-percentile surface distance (pooled over
//! both directions, millimeters, exact via a separable squared-distance
//! transform), peak signal-to-noise ratio, nested-region post-processing,
//! and the 15-row modality-subset evaluation grid with its CSV rendering.

use crate::data::{normalize_intensities, ChannelRole, Volume};
use crate::dtype::Real;
use crate::modality::{Modality, ModalitySubset};
use crate::model::{LatentMode, XhvedModel};
use crate::tensor::Tape;

/// Binary masks of the three nested tumor regions over one volume.
#[derive(Debug, Clone)]
pub struct RegionMasks {
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
    pub extent: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl RegionMasks {
    pub fn region(&self, r: usize) -> &[bool] {
        match r {
            0 => &self.wt,
            1 => &self.tc,
            2 => &self.et,
            _ => panic!("contract violation: region index {r} out of range"),
        }
    }
}

/// Threshold region probabilities at ½ and re-impose ET ⊆ TC ⊆ WT.
pub fn enforce_nesting<T: Real>(
    seg: &[T],
    extent: [usize; 3],
    spacing_mm: [f64; 3],
) -> RegionMasks {
    let vox = extent.iter().product::<usize>();
    assert!(
        seg.len() == 3 * vox,
        "contract violation: expected 3 region channels of {vox} voxels, got {} values",
        seg.len()
    );
    let bin = |r: usize| -> Vec<bool> { seg[r * vox..(r + 1) * vox].iter().map(|p| p.to_f64() > 0.5).collect() };
    let wt = bin(0);
    let tc: Vec<bool> = bin(1).iter().zip(&wt).map(|(t, w)| *t && *w).collect();
    let et: Vec<bool> = bin(2).iter().zip(&tc).map(|(e, t)| *e && *t).collect();
    RegionMasks { wt, tc, et, extent, spacing_mm }
}

/// Overlap as a percentage: 100·2|a∧b| / (|a|+|b|). Two empty masks agree
/// perfectly (100); one empty mask cannot overlap (0).
pub fn dice_score(a: &[bool], b: &[bool]) -> f64 {
    assert!(a.len() == b.len(), "contract violation: mask sizes {} vs {}", a.len(), b.len());
    let na = a.iter().filter(|v| **v).count();
    let nb = b.iter().filter(|v| **v).count();
    if na + nb == 0 {
        return 100.0;
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    100.0 * 2.0 * inter as f64 / (na + nb) as f64
}

/// Squared distances larger than any reachable one; keeps the envelope
/// arithmetic finite. Holds for volumes up to ~10⁵ mm across.
const UNREACHED: f64 = 1.099511627776e12; // 2^40

/// One pass of the exact lower-envelope squared-distance transform along a
/// line of samples spaced `step` apart.
fn edt_line(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let xq = q as f64 * step;
        loop {
            let xv = v[k] as f64 * step;
            let s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if k > 0 && s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        let xq = q as f64 * step;
        while z[k + 1] < xq {
            k += 1;
        }
        let d = xq - v[k] as f64 * step;
        out[q] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed voxel, by separable 1D envelope passes over the three axes.
fn edt_squared(seeds: &[bool], extent: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = extent;
    let mut g: Vec<f64> = seeds.iter().map(|s| if *s { 0.0 } else { UNREACHED }).collect();
    let mut line = vec![0.0f64; d.max(h).max(w)];
    let mut out = vec![0.0f64; d.max(h).max(w)];

    // Along x.
    for zy in 0..d * h {
        let row = &mut g[zy * w..(zy + 1) * w];
        line[..w].copy_from_slice(row);
        edt_line(&line[..w], spacing[2], &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    // Along y.
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = g[(z * h + y) * w + x];
            }
            edt_line(&line[..h], spacing[1], &mut out[..h]);
            for y in 0..h {
                g[(z * h + y) * w + x] = out[y];
            }
        }
    }
    // Along z.
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = g[(z * h + y) * w + x];
            }
            edt_line(&line[..d], spacing[0], &mut out[..d]);
            for z in 0..d {
                g[(z * h + y) * w + x] = out[z];
            }
        }
    }
    g
}

/// Mask voxels with at least one of their six face-neighbors outside the
/// mask, counting beyond-the-border as outside.
fn surface(mask: &[bool], extent: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = extent;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut s = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask[idx(z, y, x)] {
                    continue;
                }
                let exposed = z == 0
                    || z == d - 1
                    || y == 0
                    || y == h - 1
                    || x == 0
                    || x == w - 1
                    || !mask[idx(z - 1, y, x)]
                    || !mask[idx(z + 1, y, x)]
                    || !mask[idx(z, y - 1, x)]
                    || !mask[idx(z, y + 1, x)]
                    || !mask[idx(z, y, x - 1)]
                    || !mask[idx(z, y, x + 1)];
                s[idx(z, y, x)] = exposed;
            }
        }
    }
    s
}

/// Corner-to-corner voxel-center distance, the defined penalty when either
/// mask is empty.
fn volume_diagonal_mm(extent: [usize; 3], spacing: [f64; 3]) -> f64 {
    extent
        .iter()
        .zip(&spacing)
        .map(|(e, s)| {
            let span = (e.saturating_sub(1)) as f64 * s;
            span * span
        })
        .sum::<f64>()
        .sqrt()
}

/// 95th-percentile of the pooled surface-to-surface distances between two
/// masks, in millimeters (nearest-rank percentile over both directions).
pub fn hd95(a: &[bool], b: &[bool], extent: [usize; 3], spacing_mm: [f64; 3]) -> f64 {
    let vox: usize = extent.iter().product();
    assert!(
        a.len() == vox && b.len() == vox,
        "contract violation: masks must match extent {extent:?} ({vox} voxels)"
    );
    for s in spacing_mm {
        assert!(s > 0.0, "contract violation: non-positive spacing {s}");
    }
    if !a.iter().any(|v| *v) || !b.iter().any(|v| *v) {
        return volume_diagonal_mm(extent, spacing_mm);
    }
    let sa = surface(a, extent);
    let sb = surface(b, extent);
    let da = edt_squared(&sa, extent, spacing_mm);
    let db = edt_squared(&sb, extent, spacing_mm);
    let mut pooled: Vec<f64> = Vec::new();
    for i in 0..vox {
        if sa[i] {
            pooled.push(db[i].sqrt());
        }
        if sb[i] {
            pooled.push(da[i].sqrt());
        }
    }
    pooled.sort_by(|x, y| x.partial_cmp(y).expect("distances are finite"));
    let rank = ((0.95 * pooled.len() as f64).ceil() as usize).max(1);
    pooled[rank - 1]
}

/// 10·log₁₀(range²/MSE) in dB, capped at 99.
pub fn psnr<T: Real>(recon: &[T], reference: &[T], data_range: f64) -> f64 {
    assert!(
        recon.len() == reference.len(),
        "contract violation: PSNR inputs differ in length: {} vs {}",
        recon.len(),
        reference.len()
    );
    assert!(data_range > 0.0, "contract violation: data range must be positive, got {data_range}");
    let mse = recon
        .iter()
        .zip(reference)
        .map(|(r, g)| {
            let d = r.to_f64() - g.to_f64();
            d * d
        })
        .sum::<f64>()
        / recon.len() as f64;
    if mse == 0.0 {
        return 99.0;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(99.0)
}

/// One model output on one volume: region probabilities [3·vox] and
/// reconstructed modalities [4·vox].
pub struct Prediction<T> {
    pub seg: Vec<T>,
    pub recon: Vec<T>,
}

/// Metrics of one grid row: Dice and HD95 per region (WT, TC, ET) and PSNR
/// per modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMetrics {
    pub dice: [f64; 3],
    pub hd95: [f64; 3],
    pub psnr: [f64; 4],
}

impl RowMetrics {
    fn zero() -> Self {
        RowMetrics { dice: [0.0; 3], hd95: [0.0; 3], psnr: [0.0; 4] }
    }

    fn add(&mut self, other: &RowMetrics) {
        for r in 0..3 {
            self.dice[r] += other.dice[r];
            self.hd95[r] += other.hd95[r];
        }
        for m in 0..4 {
            self.psnr[m] += other.psnr[m];
        }
    }

    fn scale(&mut self, f: f64) {
        for r in 0..3 {
            self.dice[r] *= f;
            self.hd95[r] *= f;
        }
        for m in 0..4 {
            self.psnr[m] *= f;
        }
    }

    fn values(&self) -> [f64; 10] {
        [
            self.dice[0], self.dice[1], self.dice[2],
            self.hd95[0], self.hd95[1], self.hd95[2],
            self.psnr[0], self.psnr[1], self.psnr[2], self.psnr[3],
        ]
    }
}

/// The 15-subset evaluation grid plus its average row.
#[derive(Debug, Clone)]
pub struct SubsetResultGrid {
    pub rows: Vec<(ModalitySubset, RowMetrics)>,
    pub average: RowMetrics,
}

impl SubsetResultGrid {
    pub const CSV_HEADER: &'static str =
        "fl,t1,t1c,t2,dice_wt,dice_tc,dice_et,hd95_wt,hd95_tc,hd95_et,psnr_fl,psnr_t1,psnr_t1c,psnr_t2";

    pub fn row(&self, subset: ModalitySubset) -> &RowMetrics {
        &self
            .rows
            .iter()
            .find(|(s, _)| *s == subset)
            .unwrap_or_else(|| panic!("contract violation: grid lacks subset {subset}"))
            .1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let fmt = |m: &RowMetrics| -> String {
            m.values().map(|v| format!("{v:.4}")).join(",")
        };
        for (subset, m) in &self.rows {
            let bits: Vec<String> = Modality::ALL
                .iter()
                .map(|md| if subset.has(*md) { "1".into() } else { "0".into() })
                .collect();
            out.push_str(&format!("{},{}\n", bits.join(","), fmt(m)));
        }
        out.push_str(&format!("avg,,,,{}\n", fmt(&self.average)));
        out
    }
}

/// Ground-truth region masks of a dataset volume.
pub fn label_masks<T: Real>(vol: &Volume<T>) -> RegionMasks {
    let mut regions: Vec<Vec<bool>> = Vec::with_capacity(3);
    for role in ChannelRole::LABELS {
        let c = vol
            .channel_of(role)
            .unwrap_or_else(|| panic!("contract violation: dataset volume lacks a {role} label channel"));
        regions.push(vol.channel(0, c).iter().map(|v| v.to_f64() > 0.5).collect());
    }
    let et = regions.pop().expect("three regions");
    let tc = regions.pop().expect("three regions");
    let wt = regions.pop().expect("three regions");
    RegionMasks { wt, tc, et, extent: vol.extent(), spacing_mm: vol.spacing_mm }
}

/// Evaluate one prediction against a volume's labels and normalized
/// intensities.
fn eval_one<T: Real>(vol: &Volume<T>, reference: &Volume<T>, pred: &Prediction<T>) -> RowMetrics {
    let extent = vol.extent();
    let vox = vol.voxels();
    let gt = label_masks(vol);
    let masks = enforce_nesting(&pred.seg, extent, vol.spacing_mm);
    let mut m = RowMetrics::zero();
    for r in 0..3 {
        m.dice[r] = dice_score(masks.region(r), gt.region(r));
        m.hd95[r] = hd95(masks.region(r), gt.region(r), extent, vol.spacing_mm);
    }
    for (mi, modality) in Modality::ALL.iter().enumerate() {
        let c = reference
            .channel_of(ChannelRole::of_modality(*modality))
            .expect("reference carries all modalities");
        let ref_ch = reference.channel(0, c);
        let lo = ref_ch.iter().map(|v| v.to_f64()).fold(f64::INFINITY, f64::min);
        let hi = ref_ch.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        assert!(range > 0.0, "contract violation: reference channel {modality:?} is constant");
        m.psnr[mi] = psnr(&pred.recon[mi * vox..(mi + 1) * vox], ref_ch, range);
    }
    m
}

/// Run a predictor over every subset × dataset item and average per subset.
///
/// Rows are ordered by ascending 4-bit mask (FL, T1, T1c, T2 from the most
/// significant bit); the average row is the arithmetic mean of the rows.
pub fn subset_eval_grid<T: Real, F>(mut predict: F, dataset: &[Volume<T>]) -> SubsetResultGrid
where
    F: FnMut(&Volume<T>, ModalitySubset) -> Prediction<T>,
{
    assert!(!dataset.is_empty(), "contract violation: empty evaluation dataset");
    let references: Vec<Volume<T>> = dataset
        .iter()
        .map(|v| {
            assert!(v.shape()[0] == 1, "contract violation: evaluation volumes are single-subject");
            normalize_intensities(v, ModalitySubset::full())
        })
        .collect();
    let mut rows = Vec::with_capacity(15);
    let mut average = RowMetrics::zero();
    for subset in ModalitySubset::all() {
        let mut acc = RowMetrics::zero();
        for (vol, reference) in dataset.iter().zip(&references) {
            let pred = predict(vol, subset);
            let vox = vol.voxels();
            assert!(
                pred.seg.len() == 3 * vox && pred.recon.len() == 4 * vox,
                "contract violation: prediction shapes do not match the volume"
            );
            acc.add(&eval_one(vol, reference, &pred));
        }
        acc.scale(1.0 / dataset.len() as f64);
        average.add(&acc);
        rows.push((subset, acc));
    }
    average.scale(1.0 / 15.0);
    SubsetResultGrid { rows, average }
}

/// Deterministic mean-latent predictor backed by a trained model.
pub fn model_predictor<T: Real>(
    model: &XhvedModel<T>,
) -> impl FnMut(&Volume<T>, ModalitySubset) -> Prediction<T> + '_ {
    move |vol, subset| {
        let normalized = normalize_intensities(vol, ModalitySubset::full());
        let mut tape: Tape<T> = Tape::new();
        let mut binder = model.binder();
        let images = model.push_images(&mut tape, &normalized, subset);
        let out = model.forward(&mut tape, &mut binder, subset, &images, None, LatentMode::Mean);
        assert!(tape.poison().is_none(), "evaluation forward went non-finite");
        Prediction {
            seg: tape.data(out.seg).to_vec(),
            recon: tape.data(out.recon).to_vec(),
        }
    }
}
