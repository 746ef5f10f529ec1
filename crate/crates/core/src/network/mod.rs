//! The two-in-one model: shared encoder, dual-path decoder with switchable aggregation branches,
//! matching modules between the two sub-networks, and separate monocular / stereo output heads.

mod forward;

pub use forward::{MfmOutput, StereoOutput};

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disparity::DisparityLevels;
use crate::error::{Error, Result};
use crate::tensor::io::Archive;
use crate::tensor::{Tape, Tensor, Var};
use crate::Scalar;

/// Parameter groups that the training steps freeze and unfreeze as a whole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    AggBlocks,
    DecoderBlock,
    Mfm,
    OutMono,
    OutStereo,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Encoder,
        Group::AggBlocks,
        Group::DecoderBlock,
        Group::Mfm,
        Group::OutMono,
        Group::OutStereo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::AggBlocks => "agg_blocks",
            Group::DecoderBlock => "decoder_block",
            Group::Mfm => "mfm",
            Group::OutMono => "out_mono",
            Group::OutStereo => "out_stereo",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Finer classification used for per-parameter learning rates: the aggregation blocks mix a
/// shared fusion convolution with the two switchable branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Encoder,
    AggShared,
    AggAuxiliary,
    AggFinal,
    DecoderBlock,
    Mfm,
    OutMono,
    OutStereo,
}

impl Role {
    pub fn group(self) -> Group {
        match self {
            Role::Encoder => Group::Encoder,
            Role::AggShared | Role::AggAuxiliary | Role::AggFinal => Group::AggBlocks,
            Role::DecoderBlock => Group::DecoderBlock,
            Role::Mfm => Group::Mfm,
            Role::OutMono => Group::OutMono,
            Role::OutStereo => Group::OutStereo,
        }
    }
}

/// Which parameter set the aggregation blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Auxiliary,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub encoder_widths: [usize; 4],
    /// Output widths of the aggregation blocks at strides 8, 4, 2.
    pub agg_widths: [usize; 3],
    pub decoder_width: usize,
    pub se_reduction: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [16, 32, 64, 128],
            agg_widths: [64, 32, 16],
            decoder_width: 8,
            se_reduction: 4,
        }
    }
}

impl NetworkConfig {
    fn to_meta(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "encoder_widths={}\nagg_widths={}\ndecoder_width={}\nse_reduction={}\n",
            join(&self.encoder_widths),
            join(&self.agg_widths),
            self.decoder_width,
            self.se_reduction
        )
    }

    fn from_archive<T: Scalar>(a: &Archive<T>) -> Result<Self> {
        fn list<const N: usize>(a: &str) -> Result<[usize; N]> {
            let v: Vec<usize> = a
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("bad width list {a:?}: {e}")))?;
            v.try_into()
                .map_err(|_| Error::Format(format!("expected {N} widths in {a:?}")))
        }
        let get = |k: &str| {
            a.meta_value(k)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|e| Error::Format(format!("bad {k}: {e}")))
        };
        Ok(Self {
            encoder_widths: list(get("encoder_widths")?)?,
            agg_widths: list(get("agg_widths")?)?,
            decoder_width: num("decoder_width")?,
            se_reduction: num("se_reduction")?,
        })
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub role: Role,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct AggIdx {
    pub shared: ConvIdx,
    pub aux: ConvIdx,
    pub fin: ConvIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct MfmIdx {
    pub q: ConvIdx,
    pub k: ConvIdx,
    pub fuse: ConvIdx,
    pub se1: ConvIdx,
    pub se2: ConvIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub encoder: Vec<[ConvIdx; 2]>,
    pub agg: Vec<AggIdx>,
    pub mfm: Vec<MfmIdx>,
    pub dec: [ConvIdx; 2],
    pub out_mono: ConvIdx,
    pub out_stereo: ConvIdx,
}

struct Builder<'a, T> {
    params: Vec<Parameter<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: String, role: Role, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> ConvIdx {
        let bound = gain * (6.0 / (cin * k * k) as f64).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(vec![cout, cin, k, k], |_| T::lit(rng.gen_range(-bound..bound)));
        let idx = self.params.len();
        self.params.push(Parameter { name: format!("{name}/weight"), role, value: w });
        self.params.push(Parameter {
            name: format!("{name}/bias"),
            role,
            value: Tensor::zeros(vec![1, cout, 1, 1]),
        });
        ConvIdx { w: idx, b: idx + 1, stride, pad: k / 2 }
    }
}

/// Parameters plus the fixed structure that interprets them.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    levels: DisparityLevels,
    params: Vec<Parameter<T>>,
    pub(crate) layout: Layout,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: NetworkConfig, levels: DisparityLevels, seed: u64) -> Result<Self> {
        if config.encoder_widths.contains(&0) || config.agg_widths.contains(&0) || config.decoder_width == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if config.se_reduction == 0 || config.agg_widths.iter().any(|&c| c < config.se_reduction) {
            return Err(Error::Config("SE reduction must be positive and at most every decoder width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: Vec::new(), rng: &mut rng };
        let ew = config.encoder_widths;
        let aw = config.agg_widths;
        let nl = levels.len();

        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &c) in ew.iter().enumerate() {
            let a = b.conv(format!("encoder/stage{}_a", i + 1), Role::Encoder, cin, c, 3, 2, 1.0);
            let bb = b.conv(format!("encoder/stage{}_b", i + 1), Role::Encoder, c, c, 3, 1, 1.0);
            encoder.push([a, bb]);
            cin = c;
        }

        // Aggregation block i fuses the upsampled feature with encoder level 3 - i.
        let mut agg = Vec::new();
        let mut fin = ew[3];
        for i in 0..3 {
            let skip = ew[2 - i];
            let c = aw[i];
            let blk = format!("agg_blocks/agg{}", i + 1);
            agg.push(AggIdx {
                shared: b.conv(format!("{blk}_shared"), Role::AggShared, fin + skip, c, 3, 1, 1.0),
                aux: b.conv(format!("{blk}_aux"), Role::AggAuxiliary, c, c, 3, 1, 1.0),
                fin: b.conv(format!("{blk}_final"), Role::AggFinal, c, c, 3, 1, 1.0),
            });
            fin = c;
        }

        let mut mfm = Vec::new();
        for (i, &c) in aw.iter().enumerate() {
            let blk = format!("mfm/mfm{}", i + 1);
            let r = c / config.se_reduction;
            mfm.push(MfmIdx {
                q: b.conv(format!("{blk}_query"), Role::Mfm, c, c, 1, 1, 1.0),
                k: b.conv(format!("{blk}_key"), Role::Mfm, c, c, 1, 1, 1.0),
                fuse: b.conv(format!("{blk}_fuse"), Role::Mfm, c + nl, c, 3, 1, 1.0),
                se1: b.conv(format!("{blk}_se_reduce"), Role::Mfm, c, r, 1, 1, 1.0),
                se2: b.conv(format!("{blk}_se_expand"), Role::Mfm, r, c, 1, 1, 1.0),
            });
        }

        let dw = config.decoder_width;
        let dec = [
            b.conv("decoder_block/conv1".into(), Role::DecoderBlock, aw[2], aw[2], 3, 1, 1.0),
            b.conv("decoder_block/conv2".into(), Role::DecoderBlock, aw[2], dw, 3, 1, 1.0),
        ];
        let out_mono = b.conv("out_mono/head".into(), Role::OutMono, dw, nl, 3, 1, 0.1);
        let out_stereo = b.conv("out_stereo/head".into(), Role::OutStereo, dw, nl, 3, 1, 0.1);
        let params = b.params;
        Ok(Self {
            config,
            levels,
            params,
            layout: Layout { encoder, agg, mfm, dec, out_mono, out_stereo },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn levels(&self) -> &DisparityLevels {
        &self.levels
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Snapshot of every parameter in one group, in layout order.
    pub fn group_values(&self, group: Group) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .filter(|p| p.role.group() == group)
            .map(|p| p.value.clone())
            .collect()
    }

    /// Copies the auxiliary branch weights into the final branch of every aggregation block.
    pub fn copy_auxiliary_to_final(&mut self) {
        for a in self.layout.agg.clone() {
            self.params[a.fin.w].value = self.params[a.aux.w].value.clone();
            self.params[a.fin.b].value = self.params[a.aux.b].value.clone();
        }
    }

    /// Places every parameter on `tape`, as a tracked leaf when `trainable(role)` holds and as a
    /// constant otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(Role) -> bool) -> Bound<'t, T> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p.role) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn to_archive(&self, extra_meta: &str) -> Archive<T> {
        let mut meta = self.config.to_meta();
        // exact text copy: the tensor entry is stored at the network's precision
        let lv: Vec<String> = self.levels.values().iter().map(|v| format!("{v:?}")).collect();
        meta.push_str(&format!("levels={}\n", lv.join(",")));
        meta.push_str(extra_meta);
        let mut a = Archive::new(meta);
        for p in &self.params {
            a.push(p.name.clone(), p.value.clone());
        }
        a.push("levels", self.levels.to_tensor());
        a
    }

    pub fn from_archive(a: &Archive<T>) -> Result<Self> {
        let config = NetworkConfig::from_archive(a)?;
        let levels = match a.meta_value("levels") {
            Some(text) => DisparityLevels::from_values(
                text.split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(format!("bad levels: {e}")))?,
            )?,
            None => DisparityLevels::from_tensor(
                a.get("levels")
                    .ok_or_else(|| Error::Format("checkpoint lacks levels".into()))?,
            )?,
        };
        let mut net = Self::new(config, levels, 0)?;
        for p in &mut net.params {
            let t = a
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load checkpoint",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra_meta: &str) -> Result<()> {
        self.to_archive(extra_meta).save(path)
    }

    /// Loads a checkpoint and returns the network with the archive's metadata record.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Archive<T>)> {
        let a = Archive::load(path)?;
        Ok((Self::from_archive(&a)?, a))
    }
}

/// Network parameters placed on one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, i: usize) -> Var<'t, T> {
        self.vars[i]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Gradient of every parameter, `None` for constants and untouched leaves.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}
