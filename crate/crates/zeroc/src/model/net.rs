use candle_core::{DType, Tensor, Var, D};
use candle_nn::ops::leaky_relu;
use serde::{Deserialize, Serialize};

use crate::{Result, ZcError};

use super::params::ParamStore;

/// Architecture of a conditional energy network: convolutional stem,
/// spectral-normalized residual blocks with per-block label conditioning,
/// global average pooling and an affine head.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EnergyNetConfig {
    /// Image channels: 10 for the one-hot grid domain, 3 for the rendered one.
    pub in_channels: usize,
    /// Mask channels concatenated to the image: 1 for concepts, 2 for relations.
    pub mask_channels: usize,
    pub base_width: usize,
    /// Dimension of the label embedding.
    pub c_dim: usize,
    /// Input spatial side (square inputs); must survive the downsamples.
    pub input_hw: usize,
    /// Output width of each residual block.
    pub widths: Vec<usize>,
    /// Whether each block halves the spatial resolution.
    pub downsample: Vec<bool>,
    /// LeakyReLU slope inside the label-conditioning subnetwork.
    pub cond_slope: f64,
    /// LeakyReLU slope everywhere else.
    pub act_slope: f64,
}

impl EnergyNetConfig {
    pub fn new(in_channels: usize, mask_channels: usize, input_hw: usize, base_width: usize) -> Self {
        let w = base_width;
        EnergyNetConfig {
            in_channels,
            mask_channels,
            base_width: w,
            c_dim: 16,
            input_hw,
            widths: vec![w, w, 2 * w, 2 * w, 2 * w, 2 * w],
            downsample: vec![true, false, true, false, true, false],
            cond_slope: 0.2,
            act_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.downsample.len() || self.widths.is_empty() {
            return Err(ZcError::Contract(
                "widths and downsample schedules must be nonempty and equal length".into(),
            ));
        }
        let n_down = self.downsample.iter().filter(|d| **d).count();
        if self.input_hw % (1 << n_down) != 0 {
            return Err(ZcError::Contract(format!(
                "input side {} not divisible by 2^{n_down}",
                self.input_hw
            )));
        }
        Ok(())
    }
}

fn l2_normalize(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_all()?.sqrt()?;
    let eps = Tensor::new(1e-12, t.device())?.to_dtype(t.dtype())?;
    Ok(t.broadcast_div(&norm.broadcast_add(&eps)?)?)
}

/// 3x3 convolution whose weight is divided by its spectral norm, estimated
/// by one power-iteration step per training forward.
pub struct SnConv2d {
    weight: Var,
    bias: Var,
    u: Var,
}

impl SnConv2d {
    fn new(ps: &ParamStore, prefix: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(SnConv2d {
            weight: ps.get(&format!("{prefix}.weight"), &[out_c, in_c, 3, 3])?,
            bias: ps.get(&format!("{prefix}.bias"), &[out_c])?,
            u: ps.get(&format!("{prefix}.sn_u"), &[out_c])?,
        })
    }

    /// Estimated spectral norm as a graph node (u, v detached), so gradients
    /// flow through the normalization as well.
    fn sigma(&self, train: bool) -> Result<Tensor> {
        let w = self.weight.as_tensor();
        let (o, i, k1, k2) = w.dims4()?;
        let w_mat = w.reshape((o, i * k1 * k2))?;
        let w_det = w_mat.detach();
        let u = self.u.as_tensor().detach();
        let v = l2_normalize(&w_det.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
        let u_new = l2_normalize(&w_det.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
        if train {
            self.u.set(&u_new)?;
        }
        let sigma = u_new
            .unsqueeze(0)?
            .matmul(&w_mat)?
            .matmul(&v.unsqueeze(1)?)?
            .reshape(())?;
        Ok(sigma)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let sigma = self.sigma(train)?;
        let w_sn = self.weight.as_tensor().broadcast_div(&sigma)?;
        let y = x.conv2d(&w_sn, 1, 1, 1, 1)?;
        let b = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    /// Advance the stored power-iteration vector. One step happens per
    /// training forward; this warms `u` up without running the network.
    pub fn power_iterate(&self, iters: usize) -> Result<()> {
        for _ in 0..iters {
            self.sigma(true)?;
        }
        Ok(())
    }

    /// Largest singular value of the *normalized* kernel, by long power
    /// iteration on a detached copy. Diagnostic for the SN invariant.
    pub fn normalized_spectral_norm(&self, iters: usize) -> Result<f64> {
        let sigma = self.sigma(false)?.detach();
        let w = self
            .weight
            .as_tensor()
            .detach()
            .broadcast_div(&sigma)?
            .to_dtype(DType::F64)?;
        let (o, i, k1, k2) = w.dims4()?;
        let w_mat = w.reshape((o, i * k1 * k2))?;
        let mut u = Tensor::ones(o, DType::F64, w_mat.device())?;
        u = l2_normalize(&u)?;
        let mut s = 0f64;
        for _ in 0..iters {
            let v = l2_normalize(&w_mat.t()?.matmul(&u.unsqueeze(1)?)?.squeeze(1)?)?;
            u = l2_normalize(&w_mat.matmul(&v.unsqueeze(1)?)?.squeeze(1)?)?;
            s = u
                .unsqueeze(0)?
                .matmul(&w_mat)?
                .matmul(&v.unsqueeze(1)?)?
                .reshape(())?
                .to_scalar::<f64>()?;
        }
        Ok(s)
    }
}

struct Dense {
    weight: Var,
    bias: Var,
}

impl Dense {
    fn new(ps: &ParamStore, prefix: &str, in_d: usize, out_d: usize) -> Result<Self> {
        Ok(Dense {
            weight: ps.get(&format!("{prefix}.weight"), &[out_d, in_d])?,
            bias: ps.get(&format!("{prefix}.bias"), &[out_d])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Label subnetwork: Dense(c_dim, 4c) / Dense(4c, 4c) / Dense(4c, 4), its
/// 4-dim output split in half and broadcast as two conditioning channel maps.
struct CondNet {
    l1: Dense,
    l2: Dense,
    l3: Dense,
    slope: f64,
}

impl CondNet {
    fn new(ps: &ParamStore, prefix: &str, c_dim: usize, slope: f64) -> Result<Self> {
        Ok(CondNet {
            l1: Dense::new(ps, &format!("{prefix}.l1"), c_dim, 4 * c_dim)?,
            l2: Dense::new(ps, &format!("{prefix}.l2"), 4 * c_dim, 4 * c_dim)?,
            l3: Dense::new(ps, &format!("{prefix}.l3"), 4 * c_dim, 4)?,
            slope,
        })
    }

    fn forward(&self, c: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.l1.forward(c)?, self.slope)?;
        let h = leaky_relu(&self.l2.forward(&h)?, self.slope)?;
        self.l3.forward(&h)
    }
}

struct ResBlock {
    conv1: SnConv2d,
    conv2: SnConv2d,
    cond: CondNet,
    /// Present on downsampling blocks: two dense layers on the flattened
    /// input form the residual.
    down: Option<(Dense, Dense)>,
    in_c: usize,
    out_c: usize,
    in_hw: usize,
    slope: f64,
}

impl ResBlock {
    fn new(
        ps: &ParamStore,
        prefix: &str,
        cfg: &EnergyNetConfig,
        in_c: usize,
        out_c: usize,
        in_hw: usize,
        downsample: bool,
    ) -> Result<Self> {
        let down = if downsample {
            let out_hw = in_hw / 2;
            Some((
                Dense::new(ps, &format!("{prefix}.skip1"), in_c * in_hw * in_hw, out_c)?,
                Dense::new(ps, &format!("{prefix}.skip2"), out_c, out_c * out_hw * out_hw)?,
            ))
        } else {
            if in_c != out_c {
                return Err(ZcError::Contract(
                    "non-downsampling block must keep its width".into(),
                ));
            }
            None
        };
        Ok(ResBlock {
            conv1: SnConv2d::new(ps, &format!("{prefix}.conv1"), in_c + 2, out_c)?,
            conv2: SnConv2d::new(ps, &format!("{prefix}.conv2"), out_c + 2, out_c)?,
            cond: CondNet::new(ps, &format!("{prefix}.cond"), cfg.c_dim, cfg.cond_slope)?,
            down,
            in_c,
            out_c,
            in_hw,
            slope: cfg.act_slope,
        })
    }

    fn forward(&self, x: &Tensor, c: &Tensor, train: bool) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let ce = self.cond.forward(c)?; // (N, 4)
        let half = |t: &Tensor, off: usize| -> Result<Tensor> {
            Ok(t.narrow(1, off, 2)?
                .unsqueeze(2)?
                .unsqueeze(3)?
                .broadcast_as((n, 2, h, w))?)
        };
        let h1 = Tensor::cat(&[x, &half(&ce, 0)?], 1)?;
        let h1 = leaky_relu(&self.conv1.forward(&h1, train)?, self.slope)?;
        let h2 = Tensor::cat(&[&h1, &half(&ce, 2)?], 1)?;
        let h2 = leaky_relu(&self.conv2.forward(&h2, train)?, self.slope)?;
        match &self.down {
            Some((skip1, skip2)) => {
                let main = h2.avg_pool2d(2)?;
                let flat = x.reshape((n, self.in_c * self.in_hw * self.in_hw))?;
                let res = leaky_relu(&skip1.forward(&flat)?, self.slope)?;
                let res = skip2.forward(&res)?;
                let out_hw = self.in_hw / 2;
                Ok((main + res.reshape((n, self.out_c, out_hw, out_hw))?)?)
            }
            None => Ok((h2 + x)?),
        }
    }
}

/// The conditional energy network E(x, masks, label-embedding) -> scalar.
pub struct EnergyNet {
    stem: SnConv2d,
    blocks: Vec<ResBlock>,
    head: Dense,
    cfg: EnergyNetConfig,
}

impl EnergyNet {
    pub fn new(ps: &ParamStore, cfg: &EnergyNetConfig) -> Result<Self> {
        cfg.validate()?;
        let in_total = cfg.in_channels + cfg.mask_channels;
        let stem = SnConv2d::new(ps, "stem", in_total, cfg.widths[0])?;
        let mut blocks = Vec::new();
        let mut cur_c = cfg.widths[0];
        let mut cur_hw = cfg.input_hw;
        for (i, (&wd, &down)) in cfg.widths.iter().zip(cfg.downsample.iter()).enumerate() {
            blocks.push(ResBlock::new(
                ps,
                &format!("block{i}"),
                cfg,
                cur_c,
                wd,
                cur_hw,
                down,
            )?);
            cur_c = wd;
            if down {
                cur_hw /= 2;
            }
        }
        let head = Dense::new(ps, "head", cur_c, 1)?;
        Ok(EnergyNet {
            stem,
            blocks,
            head,
            cfg: cfg.clone(),
        })
    }

    /// `x`: (N, in_channels, H, W); `masks`: mask_channels tensors of
    /// (N, 1, H, W); `c`: (N, c_dim). Returns per-element energies (N,).
    pub fn forward(&self, x: &Tensor, masks: &[Tensor], c: &Tensor, train: bool) -> Result<Tensor> {
        let (n, ch, h, w) = x.dims4()?;
        if ch != self.cfg.in_channels || h != self.cfg.input_hw || w != self.cfg.input_hw {
            return Err(ZcError::Contract(format!(
                "image shape (N,{ch},{h},{w}) does not match config ({}, {}, {})",
                self.cfg.in_channels, self.cfg.input_hw, self.cfg.input_hw
            )));
        }
        if masks.len() != self.cfg.mask_channels {
            return Err(ZcError::Contract(format!(
                "expected {} mask(s), got {}",
                self.cfg.mask_channels,
                masks.len()
            )));
        }
        for m in masks {
            if m.dims() != [n, 1, h, w] {
                return Err(ZcError::Contract(format!(
                    "mask shape {:?} does not align with image (N,1,{h},{w})",
                    m.dims()
                )));
            }
        }
        if c.dims() != [n, self.cfg.c_dim] {
            return Err(ZcError::Contract(format!(
                "embedding shape {:?}, expected (N,{})",
                c.dims(),
                self.cfg.c_dim
            )));
        }
        let mut parts: Vec<&Tensor> = vec![x];
        parts.extend(masks.iter());
        let mut hidden = Tensor::cat(&parts, 1)?;
        hidden = leaky_relu(&self.stem.forward(&hidden, train)?, self.cfg.act_slope)?;
        for block in &self.blocks {
            hidden = block.forward(&hidden, c, train)?;
        }
        let pooled = hidden.flatten_from(2)?.mean(D::Minus1)?; // (N, C)
        Ok(self.head.forward(&pooled)?.squeeze(1)?)
    }

    pub fn config(&self) -> &EnergyNetConfig {
        &self.cfg
    }

    pub fn spectral_convs(&self) -> Vec<&SnConv2d> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.push(&b.conv1);
            out.push(&b.conv2);
        }
        out
    }
}
