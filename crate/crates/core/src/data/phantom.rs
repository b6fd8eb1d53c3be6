//! Synthetic brain phantoms with exact nested tumor labels.
//!
//! A phantom is a pure function of its [`PhantomSpec`]: background "tissue"
//! is a min-max-normalized sum of seeded Gaussian blobs, the tumor is three
//! nested ellipsoids (whole tumor ⊇ core ⊇ enhancing), and each of the four
//! pseudo-modalities sees the regions through its own contrast row, so a
//! region is only discriminable from the modality combination that lights it
//! up. Label channels are exact, which gives evaluation a known ground
//! truth.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ChannelRole, Volume};
use crate::dtype::Real;
use crate::rng::substream;

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    /// Volume extent (D, H, W) in voxels.
    pub extent: [usize; 3],
    pub seed: u64,
    pub n_tissue_blobs: usize,
    /// Tumor center in voxel coordinates.
    pub tumor_center: [f64; 3],
    /// Ellipsoid radii in mm: (whole tumor, core, enhancing).
    pub radii_mm: [f64; 3],
    pub noise_sigma: f64,
    /// Per-modality gain on the tissue background, ordered (fl, t1, t1c, t2).
    pub base_gains: [f64; 4],
    /// Additive region contrast per modality (rows fl, t1, t1c, t2) and
    /// region (columns WT, TC, ET). Nested regions accumulate their rows.
    pub contrast_table: [[f64; 3]; 4],
}

impl PhantomSpec {
    /// Default 64³ phantom; only the seed varies between dataset items.
    pub fn with_seed(seed: u64) -> Self {
        Self::sized(64, seed)
    }

    /// Cubic phantom with tumor radii scaled to the extent, so toy volumes
    /// keep the same relative geometry as the 64³ default.
    pub fn sized(extent: usize, seed: u64) -> Self {
        let e = extent as f64;
        PhantomSpec {
            extent: [extent; 3],
            seed,
            n_tissue_blobs: 6,
            tumor_center: [e / 2.0; 3],
            radii_mm: [e * 0.1875, e * 0.125, e * 0.0625],
            noise_sigma: 0.03,
            base_gains: [1.0, 0.9, 0.8, 1.1],
            // Edema (WT rim) is bright in FLAIR/T2, the core darkens T1, and
            // enhancing tumor lights up only in T1c.
            contrast_table: [
                [0.8, 0.0, 0.0],
                [-0.2, -0.3, 0.0],
                [0.0, 0.1, 0.9],
                [0.6, 0.2, 0.0],
            ],
        }
    }
}

/// Generate one phantom: channels (FLAIR, T1, T1c, T2, WT, TC, ET) at 1 mm
/// isotropic spacing, batch size 1. Bit-identical for equal specs.
pub fn generate_phantom<T: Real>(spec: &PhantomSpec) -> Volume<T> {
    let [d, h, w] = spec.extent;
    let vox = d * h * w;
    assert!(
        spec.radii_mm[0] > spec.radii_mm[1] && spec.radii_mm[1] > spec.radii_mm[2] && spec.radii_mm[2] > 0.0,
        "contract violation: tumor radii must be strictly nested, got {:?}",
        spec.radii_mm
    );
    assert!(spec.noise_sigma >= 0.0, "contract violation: negative noise sigma");
    for axis in 0..3 {
        let c = spec.tumor_center[axis];
        let r = spec.radii_mm[0];
        assert!(
            c - r >= 0.0 && c + r <= (spec.extent[axis] - 1) as f64,
            "contract violation: tumor ellipsoid exceeds the volume extent on axis {axis}"
        );
    }

    // Background tissue: sum of Gaussian blobs, then min-max to [0, 1].
    let mut rng = substream(spec.seed, "phantom-tissue");
    let min_extent = *spec.extent.iter().min().expect("three axes") as f64;
    let mut tissue = vec![0.0f64; vox];
    for _ in 0..spec.n_tissue_blobs {
        let center = [
            rng.gen_range(0.0..d as f64),
            rng.gen_range(0.0..h as f64),
            rng.gen_range(0.0..w as f64),
        ];
        let sigma = rng.gen_range(min_extent / 8.0..min_extent / 3.0);
        let amp = rng.gen_range(0.5..1.0);
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut i = 0;
        for z in 0..d {
            let dz = z as f64 - center[0];
            for y in 0..h {
                let dy = y as f64 - center[1];
                for x in 0..w {
                    let dx = x as f64 - center[2];
                    tissue[i] += amp * (-(dz * dz + dy * dy + dx * dx) * inv2s2).exp();
                    i += 1;
                }
            }
        }
    }
    let lo = tissue.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tissue.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    for t in tissue.iter_mut() {
        *t = (*t - lo) / span;
    }

    // Nested label masks; spacing is 1 mm so radii apply in voxel units.
    let mut labels = vec![vec![0.0f64; vox]; 3];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = z as f64 - spec.tumor_center[0];
                let dy = y as f64 - spec.tumor_center[1];
                let dx = x as f64 - spec.tumor_center[2];
                let rr = dz * dz + dy * dy + dx * dx;
                for (region, lab) in labels.iter_mut().enumerate() {
                    let r = spec.radii_mm[region];
                    if rr <= r * r {
                        lab[i] = 1.0;
                    }
                }
                i += 1;
            }
        }
    }

    // Modalities: gain · tissue + contrast contributions + seeded noise.
    let mut noise_rng = substream(spec.seed, "phantom-noise");
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data: Vec<T> = Vec::with_capacity(7 * vox);
    for m in 0..4 {
        for i in 0..vox {
            let mut v = spec.base_gains[m] * tissue[i];
            for region in 0..3 {
                v += spec.contrast_table[m][region] * labels[region][i];
            }
            if spec.noise_sigma > 0.0 {
                v += normal.sample(&mut noise_rng);
            }
            data.push(T::from_f64(v));
        }
    }
    for lab in &labels {
        data.extend(lab.iter().map(|v| T::from_f64(*v)));
    }

    Volume::new(
        data,
        [1, 7, d, h, w],
        [1.0, 1.0, 1.0],
        vec![
            ChannelRole::Flair,
            ChannelRole::T1,
            ChannelRole::T1c,
            ChannelRole::T2,
            ChannelRole::Wt,
            ChannelRole::Tc,
            ChannelRole::Et,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_regions_are_nested_voxelwise() {
        let vol: Volume<f32> = generate_phantom(&PhantomSpec::with_seed(7));
        let wt = vol.channel(0, 4);
        let tc = vol.channel(0, 5);
        let et = vol.channel(0, 6);
        for i in 0..vol.voxels() {
            assert!(et[i] <= tc[i], "ET voxel {i} outside TC");
            assert!(tc[i] <= wt[i], "TC voxel {i} outside WT");
        }
    }

    #[test]
    fn equal_specs_generate_bit_identical_volumes() {
        let spec = PhantomSpec::with_seed(123);
        let a: Volume<f64> = generate_phantom(&spec);
        let b: Volume<f64> = generate_phantom(&spec);
        assert!(
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "generation must be a pure function of the spec"
        );
        let c: Volume<f64> = generate_phantom(&PhantomSpec::with_seed(124));
        assert!(a.data() != c.data(), "different seeds must differ");
    }

    #[test]
    fn default_regions_are_nonempty_and_wt_matches_the_analytic_volume() {
        let vol: Volume<f64> = generate_phantom(&PhantomSpec::with_seed(99));
        let counts: Vec<f64> = (4..7).map(|c| vol.channel(0, c).iter().sum()).collect();
        assert!(counts.iter().all(|n| *n > 0.0), "all regions nonempty: {counts:?}");
        let r = PhantomSpec::with_seed(99).radii_mm[0];
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        let rel = (counts[0] - analytic).abs() / analytic;
        assert!(
            rel <= 0.10,
            "WT voxel count {} vs analytic sphere volume {analytic} (rel {rel})",
            counts[0]
        );
    }

    #[test]
    #[should_panic(expected = "exceeds the volume extent")]
    fn out_of_bounds_tumor_is_rejected() {
        let mut spec = PhantomSpec::with_seed(1);
        spec.tumor_center = [2.0, 32.0, 32.0];
        let _: Volume<f64> = generate_phantom(&spec);
    }

    #[test]
    fn toy_extents_scale_the_tumor_down_with_the_volume() {
        let vol: Volume<f32> = generate_phantom(&PhantomSpec::sized(16, 5));
        assert_eq!(vol.extent(), [16, 16, 16]);
        let et_count: f32 = vol.channel(0, 6).iter().sum();
        assert!(et_count > 0.0, "enhancing region must survive downscaling");
    }
}
