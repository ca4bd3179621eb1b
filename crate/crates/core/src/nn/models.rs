//! The VAE, generator and classifier networks.
//!
//! Parameter names carry the model prefix (`vae.encoder.`, `vae.decoder.`,
//! `gen.`, `cls.`) so stores from different models never collide.

use std::fmt;
use std::str::FromStr;

use avic_tensor::{global_avg_pool, max_pool2d, Scalar, Var};
use serde::{Deserialize, Serialize};

use super::layers::{conv, conv_t, init_store, linear, LayerSpec};
use super::store::{Bound, ParameterStore};
use crate::data::DatasetId;
use crate::error::{Error, Result};

/// Spatial size after two stride-2, kernel-4, padding-1 convolutions.
fn quarter(side: usize) -> usize {
    side / 4
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VaeNet {
    pub dataset: DatasetId,
    pub latent_dim: usize,
    pub widths: [usize; 2],
}

impl VaeNet {
    pub const DEFAULT_WIDTHS: [usize; 2] = [32, 64];

    pub fn new(dataset: DatasetId, latent_dim: usize) -> Result<Self> {
        Self::with_widths(dataset, latent_dim, Self::DEFAULT_WIDTHS)
    }

    pub fn with_widths(dataset: DatasetId, latent_dim: usize, widths: [usize; 2]) -> Result<Self> {
        if latent_dim == 0 || widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "VAE latent size and widths must be positive".into(),
            ));
        }
        Ok(Self {
            dataset,
            latent_dim,
            widths,
        })
    }

    fn feature_side(&self) -> usize {
        quarter(self.dataset.image_shape().1)
    }

    fn features(&self) -> usize {
        self.widths[1] * self.feature_side().pow(2)
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let (c, _, _) = self.dataset.image_shape();
        let [w1, w2] = self.widths;
        let (f, l) = (self.features(), self.latent_dim);
        vec![
            LayerSpec::conv("vae.encoder.conv1", c, w1, 4),
            LayerSpec::conv("vae.encoder.conv2", w1, w2, 4),
            LayerSpec::dense("vae.encoder.mu", f, l),
            LayerSpec::dense("vae.encoder.logvar", f, l),
            LayerSpec::dense("vae.decoder.fc", l, f),
            LayerSpec::conv_t("vae.decoder.deconv1", w2, w1, 4),
            LayerSpec::conv_t("vae.decoder.deconv2", w1, c, 4),
        ]
    }

    pub fn init<T: Scalar>(&self, key: u64) -> Result<ParameterStore<T>> {
        init_store("vae", &self.layers(), key)
    }

    /// `(mu, logvar)`, each `[N, latent_dim]`. `logvar` is unclamped.
    pub fn encode<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let h = conv(p, "vae.encoder.conv1", x, 2, 1)?.relu()?;
        let h = conv(p, "vae.encoder.conv2", &h, 2, 1)?.relu()?.flatten()?;
        Ok((linear(p, "vae.encoder.mu", &h)?, linear(p, "vae.encoder.logvar", &h)?))
    }

    /// `[N, C, H, W]` reconstruction in `(0, 1)`.
    pub fn decode<'t, T: Scalar>(&self, p: &Bound<'t, T>, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        let n = z.shape()[0];
        let s = self.feature_side();
        let h = linear(p, "vae.decoder.fc", z)?
            .relu()?
            .reshape(&[n, self.widths[1], s, s])?;
        let h = conv_t(p, "vae.decoder.deconv1", &h, 2, 1)?.relu()?;
        Ok(conv_t(p, "vae.decoder.deconv2", &h, 2, 1)?.sigmoid()?)
    }
}

/// Encoder, two residual blocks, decoder; raw output in `(-1, 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorNet {
    pub dataset: DatasetId,
    pub widths: [usize; 2],
}

impl GeneratorNet {
    pub const DEFAULT_WIDTHS: [usize; 2] = [16, 32];
    pub const RESIDUAL_BLOCKS: usize = 2;

    pub fn new(dataset: DatasetId) -> Self {
        Self {
            dataset,
            widths: Self::DEFAULT_WIDTHS,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let (c, _, _) = self.dataset.image_shape();
        let [w1, w2] = self.widths;
        let mut layers = vec![
            LayerSpec::conv("gen.enc1", c, w1, 4),
            LayerSpec::conv("gen.enc2", w1, w2, 4),
        ];
        for i in 1..=Self::RESIDUAL_BLOCKS {
            layers.push(LayerSpec::conv(format!("gen.res{i}.a"), w2, w2, 3));
            layers.push(LayerSpec::conv(format!("gen.res{i}.b"), w2, w2, 3));
        }
        layers.push(LayerSpec::conv_t("gen.dec1", w2, w1, 4));
        layers.push(LayerSpec::conv_t("gen.dec2", w1, c, 4).zeroed());
        layers
    }

    pub fn init<T: Scalar>(&self, key: u64) -> Result<ParameterStore<T>> {
        init_store("gen", &self.layers(), key)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = conv(p, "gen.enc1", x, 2, 1)?.relu()?;
        h = conv(p, "gen.enc2", &h, 2, 1)?.relu()?;
        for i in 1..=Self::RESIDUAL_BLOCKS {
            let r = conv(p, &format!("gen.res{i}.a"), &h, 1, 1)?.relu()?;
            h = h.add(&conv(p, &format!("gen.res{i}.b"), &r, 1, 1)?)?;
        }
        let h = conv_t(p, "gen.dec1", &h, 2, 1)?.relu()?;
        Ok(conv_t(p, "gen.dec2", &h, 2, 1)?.tanh()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    ResnetSmall,
    PlainCnn,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::ResnetSmall => "resnet_small",
            Arch::PlainCnn => "plain_cnn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet_small" => Ok(Arch::ResnetSmall),
            "plain_cnn" => Ok(Arch::PlainCnn),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierNet {
    pub arch: Arch,
    pub dataset: DatasetId,
}

impl ClassifierNet {
    pub const PLAIN_WIDTHS: [usize; 3] = [16, 32, 64];
    pub const PLAIN_HIDDEN: usize = 128;
    pub const RESNET_WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(arch: Arch, dataset: DatasetId) -> Self {
        Self { arch, dataset }
    }

    pub fn classes(&self) -> usize {
        self.dataset.classes()
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let (c, h, _) = self.dataset.image_shape();
        let k = self.classes();
        match self.arch {
            Arch::PlainCnn => {
                let [a, b, d] = Self::PLAIN_WIDTHS;
                let side = h / 8;
                vec![
                    LayerSpec::conv("cls.conv1", c, a, 3),
                    LayerSpec::conv("cls.conv2", a, b, 3),
                    LayerSpec::conv("cls.conv3", b, d, 3),
                    LayerSpec::dense("cls.fc1", d * side * side, Self::PLAIN_HIDDEN),
                    LayerSpec::dense("cls.fc2", Self::PLAIN_HIDDEN, k),
                ]
            }
            Arch::ResnetSmall => {
                let [a, b, d] = Self::RESNET_WIDTHS;
                vec![
                    LayerSpec::conv("cls.stem", c, a, 3),
                    LayerSpec::conv("cls.block1.a", a, a, 3),
                    LayerSpec::conv("cls.block1.b", a, a, 3),
                    LayerSpec::conv("cls.block2.a", a, b, 4),
                    LayerSpec::conv("cls.block2.b", b, b, 3),
                    LayerSpec::conv("cls.block2.skip", a, b, 2),
                    LayerSpec::conv("cls.block3.a", b, d, 4),
                    LayerSpec::conv("cls.block3.b", d, d, 3),
                    LayerSpec::conv("cls.block3.skip", b, d, 2),
                    LayerSpec::dense("cls.fc", d, k),
                ]
            }
        }
    }

    pub fn init<T: Scalar>(&self, key: u64) -> Result<ParameterStore<T>> {
        init_store("cls", &self.layers(), key)
    }

    /// Logits `[N, K]`.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        match self.arch {
            Arch::PlainCnn => {
                let mut h = *x;
                for name in ["cls.conv1", "cls.conv2", "cls.conv3"] {
                    h = max_pool2d(&conv(p, name, &h, 1, 1)?.relu()?, 2)?;
                }
                let h = linear(p, "cls.fc1", &h.flatten()?)?.relu()?;
                linear(p, "cls.fc2", &h)
            }
            Arch::ResnetSmall => {
                let h = conv(p, "cls.stem", x, 1, 1)?.relu()?;
                let h = residual_block(p, "cls.block1", &h, false)?;
                let h = residual_block(p, "cls.block2", &h, true)?;
                let h = residual_block(p, "cls.block3", &h, true)?;
                linear(p, "cls.fc", &global_avg_pool(&h)?)
            }
        }
    }
}

/// `relu(shortcut(x) + b(relu(a(x))))`. Downsampling blocks halve the
/// resolution with a stride-2 `a` and a 2×2 stride-2 projection shortcut;
/// other blocks use the identity shortcut.
pub fn residual_block<'t, T: Scalar>(
    p: &Bound<'t, T>,
    name: &str,
    x: &Var<'t, T>,
    downsample: bool,
) -> Result<Var<'t, T>> {
    let stride = if downsample { 2 } else { 1 };
    let r = conv(p, &format!("{name}.a"), x, stride, 1)?.relu()?;
    let r = conv(p, &format!("{name}.b"), &r, 1, 1)?;
    let skip = if downsample {
        conv(p, &format!("{name}.skip"), x, 2, 0)?
    } else {
        *x
    };
    Ok(skip.add(&r)?.relu()?)
}
