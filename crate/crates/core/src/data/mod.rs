//! Volumes, synthetic phantoms and NIfTI-1 I/O.
//!
//! A [`Volume`] is a batch of multi-channel 3-D images with per-channel role
//! tags and physical voxel spacing. Phantoms come out of
//! [`phantom::generate_phantom`] with four pseudo-modalities plus exact
//! nested tumor labels; [`nifti`] reads and writes single-channel volumes and
//! the multi-channel manifest exchange format used between CLI stages.

pub mod nifti;
pub mod phantom;

pub use nifti::{load_volume, read_nifti1, save_volume, write_nifti1};
pub use phantom::{generate_phantom, PhantomSpec};

use crate::dtype::Real;
use crate::modality::{Modality, ModalitySubset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelRole {
    Flair,
    T1,
    T1c,
    T2,
    Wt,
    Tc,
    Et,
    Generic,
}

impl ChannelRole {
    pub const MODALITIES: [ChannelRole; 4] = [
        ChannelRole::Flair,
        ChannelRole::T1,
        ChannelRole::T1c,
        ChannelRole::T2,
    ];
    pub const LABELS: [ChannelRole; 3] = [ChannelRole::Wt, ChannelRole::Tc, ChannelRole::Et];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelRole::Flair => "FLAIR",
            ChannelRole::T1 => "T1",
            ChannelRole::T1c => "T1c",
            ChannelRole::T2 => "T2",
            ChannelRole::Wt => "WT",
            ChannelRole::Tc => "TC",
            ChannelRole::Et => "ET",
            ChannelRole::Generic => "generic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "FLAIR" => ChannelRole::Flair,
            "T1" => ChannelRole::T1,
            "T1c" => ChannelRole::T1c,
            "T2" => ChannelRole::T2,
            "WT" => ChannelRole::Wt,
            "TC" => ChannelRole::Tc,
            "ET" => ChannelRole::Et,
            "generic" => ChannelRole::Generic,
            _ => return None,
        })
    }

    pub fn is_label(self) -> bool {
        matches!(self, ChannelRole::Wt | ChannelRole::Tc | ChannelRole::Et)
    }

    pub fn modality(self) -> Option<Modality> {
        Some(match self {
            ChannelRole::Flair => Modality::Flair,
            ChannelRole::T1 => Modality::T1,
            ChannelRole::T1c => Modality::T1c,
            ChannelRole::T2 => Modality::T2,
            _ => return None,
        })
    }

    pub fn of_modality(m: Modality) -> Self {
        Self::MODALITIES[m.index()]
    }
}

impl std::fmt::Display for ChannelRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

/// A batch of multi-channel volumes, laid out `[B, C, D, H, W]` row-major.
///
/// `spacing_mm` is `(sd, sh, sw)`. Label channels must be exactly binary;
/// this is checked at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    data: Vec<T>,
    shape: [usize; 5],
    pub spacing_mm: [f64; 3],
    pub roles: Vec<ChannelRole>,
}

impl<T: Real> Volume<T> {
    pub fn new(data: Vec<T>, shape: [usize; 5], spacing_mm: [f64; 3], roles: Vec<ChannelRole>) -> Self {
        assert!(
            shape.iter().product::<usize>() == data.len(),
            "contract violation: volume data has {} values for shape {shape:?}",
            data.len()
        );
        assert!(
            spacing_mm.iter().all(|s| *s > 0.0),
            "contract violation: voxel spacing must be positive, got {spacing_mm:?}"
        );
        assert!(
            roles.len() == shape[1],
            "contract violation: {} roles for {} channels",
            roles.len(),
            shape[1]
        );
        let vol = Volume {
            data,
            shape,
            spacing_mm,
            roles,
        };
        for (c, role) in vol.roles.iter().enumerate() {
            if role.is_label() {
                for b in 0..shape[0] {
                    assert!(
                        vol.channel(b, c).iter().all(|v| {
                            let x = v.to_f64();
                            x == 0.0 || x == 1.0
                        }),
                        "contract violation: label channel {c} ({role}) is not binary"
                    );
                }
            }
        }
        vol
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let start = (b * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let start = (b * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    /// First channel carrying the given role, if any.
    pub fn channel_of(&self, role: ChannelRole) -> Option<usize> {
        self.roles.iter().position(|r| *r == role)
    }

    /// Extract one channel of one batch item as a standalone volume.
    pub fn single_channel(&self, b: usize, c: usize) -> Volume<T> {
        Volume {
            data: self.channel(b, c).to_vec(),
            shape: [1, 1, self.shape[2], self.shape[3], self.shape[4]],
            spacing_mm: self.spacing_mm,
            roles: vec![self.roles[c]],
        }
    }

    /// Stack single-item volumes with identical channels into one batch.
    pub fn stack(items: &[Volume<T>]) -> Volume<T> {
        assert!(!items.is_empty(), "contract violation: cannot stack zero volumes");
        let first = &items[0];
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for v in items {
            assert!(
                v.shape == first.shape && v.shape[0] == 1,
                "contract violation: stack needs single-item volumes of one shape"
            );
            assert!(
                v.roles == first.roles,
                "contract violation: stack needs identical channel roles"
            );
            data.extend_from_slice(&v.data);
        }
        Volume {
            data,
            shape: [
                items.len(),
                first.shape[1],
                first.shape[2],
                first.shape[3],
                first.shape[4],
            ],
            spacing_mm: first.spacing_mm,
            roles: first.roles.clone(),
        }
    }
}

/// Z-score each available modality channel over its nonzero-voxel support
/// and zero out the missing ones. Labels and generic channels pass through.
/// A channel with empty support or zero variance comes back all-zero rather
/// than erroring.
pub fn normalize_intensities<T: Real>(vol: &Volume<T>, subset: ModalitySubset) -> Volume<T> {
    let mut out = vol.clone();
    for c in 0..vol.shape()[1] {
        let Some(m) = vol.roles[c].modality() else {
            continue;
        };
        for b in 0..vol.shape()[0] {
            let ch = out.channel_mut(b, c);
            if !subset.has(m) {
                ch.fill(T::zero());
                continue;
            }
            let support: Vec<f64> = ch
                .iter()
                .map(|v| v.to_f64())
                .filter(|v| *v != 0.0)
                .collect();
            if support.is_empty() {
                continue;
            }
            let n = support.len() as f64;
            let mean = support.iter().sum::<f64>() / n;
            let var = support.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var == 0.0 {
                ch.fill(T::zero());
                continue;
            }
            let inv_std = 1.0 / var.sqrt();
            for v in ch.iter_mut() {
                let x = v.to_f64();
                if x != 0.0 {
                    *v = T::from_f64((x - mean) * inv_std);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn modality_volume(values: Vec<f64>) -> Volume<f64> {
        let n = values.len();
        Volume::new(values, [1, 1, 1, 1, n], [1.0, 1.0, 1.0], vec![ChannelRole::T2])
    }

    #[test]
    fn normalization_zscores_the_nonzero_support() {
        let vol = modality_volume(vec![0.0, 2.0, 4.0, 6.0, 0.0, 8.0]);
        let out = normalize_intensities(&vol, ModalitySubset::full());
        let ch = out.channel(0, 0);
        assert_eq!(ch[0], 0.0, "off-support voxels stay zero");
        assert_eq!(ch[4], 0.0);
        let support: Vec<f64> = ch.iter().copied().filter(|v| *v != 0.0).collect();
        let n = support.len() as f64;
        let mean = support.iter().sum::<f64>() / n;
        let var = support.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4, "support mean {mean} should be ~0");
        assert!((var - 1.0).abs() < 1e-3, "support variance {var} should be ~1");
    }

    #[test]
    fn missing_modalities_are_zeroed_and_constants_collapse() {
        let vol = modality_volume(vec![3.0; 6]);
        let missing = normalize_intensities(&vol, ModalitySubset::parse("1110").unwrap());
        assert!(missing.channel(0, 0).iter().all(|v| *v == 0.0), "t2 dropped");
        let kept = normalize_intensities(&vol, ModalitySubset::full());
        assert!(
            kept.channel(0, 0).iter().all(|v| *v == 0.0),
            "zero-variance support normalizes to zeros"
        );
    }

    #[test]
    fn normalization_is_idempotent_within_tolerance() {
        let vol = modality_volume(vec![0.5, 2.0, 4.0, 6.5, 1.0, 8.0]);
        let once = normalize_intensities(&vol, ModalitySubset::full());
        let twice = normalize_intensities(&once, ModalitySubset::full());
        for (a, b) in once.channel(0, 0).iter().zip(twice.channel(0, 0)) {
            assert!((a - b).abs() < 1e-3, "second pass moved {a} to {b}");
        }
    }

    #[test]
    fn labels_pass_through_normalization_untouched() {
        let vol = Volume::new(
            vec![5.0, 7.0, 1.0, 0.0],
            [1, 2, 1, 1, 2],
            [1.0, 1.0, 1.0],
            vec![ChannelRole::Flair, ChannelRole::Wt],
        );
        let out = normalize_intensities(&vol, ModalitySubset::full());
        assert_eq!(out.channel(0, 1), &[1.0, 0.0], "label channel unchanged");
    }

    #[test]
    #[should_panic(expected = "not binary")]
    fn non_binary_label_channels_are_rejected() {
        let _ = Volume::new(
            vec![0.5, 1.0],
            [1, 1, 1, 1, 2],
            [1.0, 1.0, 1.0],
            vec![ChannelRole::Wt],
        );
    }

    #[test]
    fn stacking_concatenates_along_the_batch_axis() {
        let a = modality_volume(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = modality_volume(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let s = Volume::stack(&[a, b]);
        assert_eq!(s.shape(), [2, 1, 1, 1, 6]);
        assert_eq!(s.channel(1, 0)[0], 7.0);
    }
}
