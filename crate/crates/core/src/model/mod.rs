//! The full encoder–bottleneck–dual-decoder model.
//!
//! [`ModelConfig`] fixes the architecture (extent, channel pyramid, module
//! toggles); [`XhvedModel`] owns the parameters and composes the three
//! stages: [`save`] encodes each available modality and fuses per-level
//! Gaussians into sampled skip features, [`vila`] mixes the bottleneck
//! tokens with an mLSTM scan and gates the feature map, and [`sfeca`] runs
//! the mirrored segmentation/reconstruction decoders with channel/spatial
//! recalibration exchange. All parameters are initialized from per-name
//! seeded substreams, so construction is a pure function of the config.

pub mod save;
pub mod sfeca;
pub mod vila;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ChannelRole, Volume};
use crate::dtype::Real;
use crate::modality::{Modality, ModalitySubset};
use crate::params::{Binder, ParamStore};
use crate::rng::substream;
use crate::tensor::{Tape, TensorId};

pub(crate) const GN_EPS: f64 = 1e-5;
pub(crate) const LEAKY_SLOPE: f64 = 0.01;

/// Group count for group norm: up to 8 groups, never more than channels.
pub(crate) fn gn_groups(c: usize) -> usize {
    let g = c.min(8);
    assert!(c % g == 0, "contract violation: {c} channels not divisible into {g} groups");
    g
}

/// Stride-1 3D convolution with a channel bias, binding `{prefix}.w/.b`.
pub(crate) fn conv_bias<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    x: TensorId,
    pad: usize,
) -> TensorId {
    let w = binder.bind(tape, &format!("{prefix}.w"));
    let b = binder.bind(tape, &format!("{prefix}.b"));
    let y = tape.conv3d(x, w, 1, pad);
    tape.add_channel_bias(y, b)
}

/// Conv → group norm → leaky-relu, the basic unit of every stage.
pub(crate) fn conv_unit<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    conv_prefix: &str,
    gn_prefix: &str,
    x: TensorId,
    pad: usize,
) -> TensorId {
    let y = conv_bias(tape, binder, conv_prefix, x, pad);
    let g = binder.bind(tape, &format!("{gn_prefix}.g"));
    let b = binder.bind(tape, &format!("{gn_prefix}.b"));
    let c = tape.shape(y)[1];
    let y = tape.group_norm(y, g, b, gn_groups(c), GN_EPS);
    tape.leaky_relu(y, LEAKY_SLOPE)
}

/// Affine map over the trailing axis, binding `{prefix}.w/.b`.
pub(crate) fn linear_bias<T: Real>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    prefix: &str,
    x: TensorId,
) -> TensorId {
    let w = binder.bind(tape, &format!("{prefix}.w"));
    let b = binder.bind(tape, &format!("{prefix}.b"));
    tape.linear(x, w, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentMode {
    Sample,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input extent (D, H, W); each axis must be divisible by 8.
    pub extent: [usize; 3],
    /// Encoder channel pyramid at levels /1, /2, /4, /8.
    pub channels: [usize; 4],
    /// Apply spatial attention after each encoder level.
    pub use_save_attention: bool,
    /// Run the mLSTM token mixer on the bottleneck.
    pub use_vila: bool,
    /// Exchange decoder features through DuSFE blocks.
    pub use_sfeca: bool,
    /// Include the N(0, I) expert in every Gaussian product.
    pub include_prior: bool,
    /// Number of alternating-direction mLSTM blocks.
    pub vil_blocks: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(extent: [usize; 3], init_seed: u64) -> Self {
        let cfg = ModelConfig {
            extent,
            channels: [8, 16, 32, 64],
            use_save_attention: true,
            use_vila: true,
            use_sfeca: true,
            include_prior: true,
            vil_blocks: 2,
            init_seed,
        };
        cfg.validate();
        cfg
    }

    /// Minimal channel pyramid for gradient-check-sized volumes.
    pub fn tiny(extent: [usize; 3], init_seed: u64) -> Self {
        let mut cfg = Self::new(extent, init_seed);
        cfg.channels = [2, 4, 6, 8];
        cfg.validate();
        cfg
    }

    pub fn validate(&self) {
        for (axis, e) in self.extent.iter().enumerate() {
            assert!(
                *e >= 8 && e % 8 == 0,
                "contract violation: extent axis {axis} = {e} must be a positive multiple of 8"
            );
        }
        for c in self.channels {
            assert!(c >= 2 && c % 2 == 0, "contract violation: channel width {c} must be even and ≥ 2");
        }
        assert!(self.vil_blocks >= 1, "contract violation: at least one mLSTM block");
    }

    /// Bottleneck token dimension: DRB halves the deepest channel width.
    pub fn token_dim(&self) -> usize {
        self.channels[3] / 2
    }

    /// Bottleneck extent (input extent / 8).
    pub fn bottleneck_extent(&self) -> [usize; 3] {
        [self.extent[0] / 8, self.extent[1] / 8, self.extent[2] / 8]
    }

    pub fn n_tokens(&self) -> usize {
        let [d, h, w] = self.bottleneck_extent();
        d * h * w
    }

    /// Shape of the level-ℓ latent for the given batch size.
    pub fn latent_shape(&self, level: usize, batch: usize) -> [usize; 5] {
        let s = 1 << level;
        [
            batch,
            self.channels[level],
            self.extent[0] / s,
            self.extent[1] / s,
            self.extent[2] / s,
        ]
    }
}

enum Init {
    Zero,
    One,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

impl Init {
    fn he(fan_in: usize) -> Init {
        Init::Normal((2.0 / fan_in as f64).sqrt())
    }
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![cout, cin, k, k, k],
        init: Init::he(cin * k * k * k),
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

fn gn_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.g"),
        shape: vec![c],
        init: Init::One,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![c],
        init: Init::Zero,
    });
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.w"),
        shape: vec![cout, cin],
        init: Init::he(cin),
    });
    out.push(ParamSpec {
        name: format!("{prefix}.b"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let ch = cfg.channels;
    let mut v = Vec::new();

    for m in Modality::ALL {
        for l in 0..4 {
            let p = format!("enc.{}.l{l}", m.name());
            let cin = if l == 0 { 1 } else { ch[l - 1] };
            conv_specs(&mut v, &format!("{p}.conv1"), cin, ch[l], 3);
            gn_specs(&mut v, &format!("{p}.gn1"), ch[l]);
            conv_specs(&mut v, &format!("{p}.conv2"), ch[l], ch[l], 3);
            gn_specs(&mut v, &format!("{p}.gn2"), ch[l]);
            conv_specs(&mut v, &format!("{p}.sa"), 2, 1, 7);
            conv_specs(&mut v, &format!("{p}.mu"), ch[l], ch[l], 1);
            conv_specs(&mut v, &format!("{p}.lv"), ch[l], ch[l], 1);
        }
    }

    let d = cfg.token_dim();
    conv_specs(&mut v, "drb.conv", ch[3], d, 1);
    gn_specs(&mut v, "drb.gn", d);

    linear_specs(&mut v, "vila.proj", d, d);
    v.push(ParamSpec {
        name: "vila.pos".into(),
        shape: vec![cfg.n_tokens(), d],
        init: Init::Normal(0.02),
    });
    for b in 0..cfg.vil_blocks {
        let p = format!("vila.b{b}");
        gn_specs(&mut v, &format!("{p}.norm"), d);
        for proj in ["q", "k", "v", "out"] {
            linear_specs(&mut v, &format!("{p}.{proj}"), d, d);
        }
        for gate in ["gi", "gf", "go"] {
            linear_specs(&mut v, &format!("{p}.{gate}"), d, 1);
        }
    }

    for br in ["seg", "rec"] {
        for l in (0..3).rev() {
            let p = format!("dec.{br}.s{l}");
            let cin = if l == 2 { d } else { ch[l + 1] } + ch[l];
            conv_specs(&mut v, &format!("{p}.conv1"), cin, ch[l], 3);
            gn_specs(&mut v, &format!("{p}.gn1"), ch[l]);
            conv_specs(&mut v, &format!("{p}.conv2"), ch[l], ch[l], 3);
            gn_specs(&mut v, &format!("{p}.gn2"), ch[l]);
        }
    }
    conv_specs(&mut v, "dec.seg.head", ch[0], 3, 1);
    conv_specs(&mut v, "dec.rec.head", ch[0], 4, 1);

    for l in [1usize, 0] {
        let c = ch[l];
        let p = format!("dusfe.s{l}");
        linear_specs(&mut v, &format!("{p}.csfe.fc"), 2 * c, c / 2);
        linear_specs(&mut v, &format!("{p}.csfe.r1"), c / 2, c);
        linear_specs(&mut v, &format!("{p}.csfe.r2"), c / 2, c);
        conv_specs(&mut v, &format!("{p}.ssfe.c1"), c, c, 3);
        conv_specs(&mut v, &format!("{p}.ssfe.c2"), c, c, 3);
        conv_specs(&mut v, &format!("{p}.ssfe.fuse"), 2 * c, 1, 3);
        conv_specs(&mut v, &format!("{p}.ssfe.g1"), 1, 1, 1);
        conv_specs(&mut v, &format!("{p}.ssfe.g2"), 1, 1, 1);
    }

    v
}

fn materialize<T: Real>(seed: u64, spec: &ParamSpec) -> Vec<T> {
    let n: usize = spec.shape.iter().product();
    match spec.init {
        Init::Zero => vec![T::zero(); n],
        Init::One => vec![T::one(); n],
        Init::Normal(std) => {
            let mut rng = substream(seed, &spec.name);
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
        }
    }
}

pub struct ForwardOutput {
    /// Segmentation probabilities [B, 3, D, H, W] with channels (WT, TC, ET).
    pub seg: TensorId,
    /// Reconstructed modalities [B, 4, D, H, W] in (fl, t1, t1c, t2) order.
    pub recon: TensorId,
    /// One KL-to-standard-normal scalar per fusion level.
    pub kl_terms: Vec<TensorId>,
}

pub struct XhvedModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> XhvedModel<T> {
    /// Build a model with freshly initialized parameters; a pure function of
    /// the config, including its seed.
    pub fn new(config: ModelConfig) -> Self {
        config.validate();
        let mut params = ParamStore::new();
        for spec in param_specs(&config) {
            let data = materialize::<T>(config.init_seed, &spec);
            params.insert(&spec.name, &spec.shape, data);
        }
        XhvedModel { config, params }
    }

    pub fn binder(&self) -> Binder<'_, T> {
        Binder::new(&self.params)
    }

    /// One full forward pass. `images[m]` must be `Some` exactly for the
    /// modalities in `subset`; `eps` must be `Some` in sample mode, with one
    /// noise leaf per level shaped like that level's latent.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        subset: ModalitySubset,
        images: &[Option<TensorId>; 4],
        eps: Option<&[TensorId; 4]>,
        mode: LatentMode,
    ) -> ForwardOutput {
        for m in Modality::ALL {
            assert!(
                subset.has(m) == images[m.index()].is_some(),
                "contract violation: image presence for {} does not match subset {subset}",
                m.name()
            );
        }
        let enc = save::encode_subset(tape, binder, &self.config, subset, images, eps, mode);
        let bottleneck = if self.config.use_vila {
            vila::vila_gate(tape, binder, &self.config, enc.bottleneck)
        } else {
            enc.bottleneck
        };
        let (seg, recon) = sfeca::decode(tape, binder, &self.config, bottleneck, enc.skips);
        ForwardOutput {
            seg,
            recon,
            kl_terms: enc.kl_terms,
        }
    }

    /// Push the available modality channels of a batched volume as leaves,
    /// one [B, 1, D, H, W] tensor per available modality.
    pub fn push_images(
        &self,
        tape: &mut Tape<T>,
        vol: &Volume<T>,
        subset: ModalitySubset,
    ) -> [Option<TensorId>; 4] {
        let [b, _, d, h, w] = vol.shape();
        let mut out = [None; 4];
        for m in subset.available() {
            let c = vol
                .channel_of(ChannelRole::of_modality(m))
                .unwrap_or_else(|| panic!("contract violation: volume lacks a {} channel", m.name()));
            let mut data = Vec::with_capacity(b * d * h * w);
            for bi in 0..b {
                data.extend_from_slice(vol.channel(bi, c));
            }
            out[m.index()] = Some(tape.leaf(data, &[b, 1, d, h, w]));
        }
        out
    }

    /// Push a set of role-tagged channels as one stacked leaf [B, n, D, H, W].
    pub fn push_channels(&self, tape: &mut Tape<T>, vol: &Volume<T>, roles: &[ChannelRole]) -> TensorId {
        let [b, _, d, h, w] = vol.shape();
        let mut data = Vec::with_capacity(b * roles.len() * d * h * w);
        for bi in 0..b {
            for role in roles {
                let c = vol
                    .channel_of(*role)
                    .unwrap_or_else(|| panic!("contract violation: volume lacks a {role} channel"));
                data.extend_from_slice(vol.channel(bi, c));
            }
        }
        tape.leaf(data, &[b, roles.len(), d, h, w])
    }

    /// Push one standard-normal noise leaf per level, shaped like the
    /// latents, drawing from the given stream.
    pub fn push_eps(
        &self,
        tape: &mut Tape<T>,
        rng: &mut impl rand::Rng,
        batch: usize,
    ) -> [TensorId; 4] {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        std::array::from_fn(|l| {
            let shape = self.config.latent_shape(l, batch);
            let n: usize = shape.iter().product();
            let data: Vec<T> = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
            tape.leaf(data, &shape)
        })
    }
}
