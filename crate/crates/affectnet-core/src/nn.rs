//! Layers and attention blocks.
//!
//! Layers own only [`ParamId`] handles plus their hyperparameters; values
//! live in the model's [`ParamStore`]. Every forward takes the active tape
//! and the store, so one layer definition serves f32 training and f64
//! gradient checking alike.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init_weight, Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Fully connected layer, weight stored (out, in).
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        scope: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            &format!("{scope}.weight"),
            init_weight(vec![out_dim, in_dim], in_dim, out_dim, init, rng),
        );
        let bias = store.add(&format!("{scope}.bias"), Tensor::zeros(vec![out_dim]));
        DenseLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// (N, in) -> (N, out)
    pub fn forward<E: Element>(
        &self,
        t: &Tape<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let w = t.param(store, self.weight);
        let b = t.param(store, self.bias);
        let wt = t.transpose2d(w)?;
        let y = t.matmul(x, wt)?;
        t.add(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// 2-d convolution layer (odd square kernels).
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        scope: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let weight = store.add(
            &format!("{scope}.weight"),
            init_weight(
                vec![out_ch, in_ch, kernel, kernel],
                fan_in,
                fan_out,
                init,
                rng,
            ),
        );
        let bias = store.add(&format!("{scope}.bias"), Tensor::zeros(vec![out_ch]));
        Conv2dLayer {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<E: Element>(
        &self,
        t: &Tape<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let w = t.param(store, self.weight);
        let b = t.param(store, self.bias);
        t.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

/// Squeeze-and-excitation channel gate: global average descriptor through a
/// bottleneck MLP, sigmoid, rescale channels.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub channels: usize,
    pub ratio: usize,
}

impl SeBlock {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        scope: &str,
        channels: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::InvalidArgument(format!(
                "se ratio {ratio} must divide channels {channels}"
            )));
        }
        let hidden = channels / ratio;
        let fc1 = DenseLayer::new(store, &format!("{scope}.fc1"), channels, hidden, Init::FanIn, rng);
        let fc2 = DenseLayer::new(
            store,
            &format!("{scope}.fc2"),
            hidden,
            channels,
            Init::FanInOut,
            rng,
        );
        Ok(SeBlock {
            fc1,
            fc2,
            channels,
            ratio,
        })
    }

    /// Per-sample channel gate in (0,1)^C, shape (N,C).
    pub fn gate<E: Element>(&self, t: &Tape<E>, store: &ParamStore<E>, x: Var) -> Result<Var> {
        let shape = t.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::InvalidShape {
                op: "se_forward",
                message: format!("expected (N,{},H,W), got {shape:?}", self.channels),
            });
        }
        let pooled = t.global_avg_pool(x)?;
        let h = t.relu(self.fc1.forward(t, store, pooled)?);
        Ok(t.sigmoid(self.fc2.forward(t, store, h)?))
    }

    /// (N,C,H,W) -> (N,C,H,W), channels rescaled by the learned gate.
    pub fn forward<E: Element>(
        &self,
        t: &Tape<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let shape = t.shape(x);
        let gate = self.gate(t, store, x)?;
        let gate = t.reshape(gate, vec![shape[0], self.channels, 1, 1])?;
        t.mul(x, gate)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    /// Drive the gate to ~1 everywhere: zero the MLP weights and set the
    /// output bias strongly positive. Turns the block into the identity.
    pub fn saturate_open<E: Element>(&self, store: &mut ParamStore<E>) {
        for id in [self.fc1.weight, self.fc1.bias, self.fc2.weight] {
            store.get_mut(id).value.data_mut().fill(E::ZERO);
        }
        store
            .get_mut(self.fc2.bias)
            .value
            .data_mut()
            .fill(E::from_f64(40.0));
    }
}

/// Convolutional block attention: a channel gate from shared-MLP avg/max
/// descriptors, then a spatial gate from a k x k convolution over pooled
/// channel statistics. Applied sequentially, channel first.
#[derive(Clone, Debug)]
pub struct CbamBlock {
    pub mlp1: DenseLayer,
    pub mlp2: DenseLayer,
    pub spatial: Conv2dLayer,
    pub channels: usize,
    pub ratio: usize,
    pub kernel: usize,
}

impl CbamBlock {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        scope: &str,
        channels: usize,
        ratio: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::InvalidArgument(format!(
                "cbam ratio {ratio} must divide channels {channels}"
            )));
        }
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "cbam spatial kernel must be odd, got {kernel}"
            )));
        }
        let hidden = channels / ratio;
        let mlp1 = DenseLayer::new(store, &format!("{scope}.mlp1"), channels, hidden, Init::FanIn, rng);
        let mlp2 = DenseLayer::new(
            store,
            &format!("{scope}.mlp2"),
            hidden,
            channels,
            Init::FanInOut,
            rng,
        );
        let spatial = Conv2dLayer::new(
            store,
            &format!("{scope}.spatial"),
            2,
            1,
            kernel,
            1,
            (kernel - 1) / 2,
            Init::FanInOut,
            rng,
        );
        Ok(CbamBlock {
            mlp1,
            mlp2,
            spatial,
            channels,
            ratio,
            kernel,
        })
    }

    pub fn forward<E: Element>(
        &self,
        t: &Tape<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let shape = t.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::InvalidShape {
                op: "cbam_forward",
                message: format!("expected (N,{},H,W), got {shape:?}", self.channels),
            });
        }
        let n = shape[0];

        // Channel stage: shared MLP over both pooled descriptors.
        let mlp = |t: &Tape<E>, d: Var| -> Result<Var> {
            let h = t.relu(self.mlp1.forward(t, store, d)?);
            self.mlp2.forward(t, store, h)
        };
        let avg_d = mlp(t, t.global_avg_pool(x)?)?;
        let max_d = mlp(t, t.global_max_pool(x)?)?;
        let channel_gate = t.sigmoid(t.add(avg_d, max_d)?);
        let channel_gate = t.reshape(channel_gate, vec![n, self.channels, 1, 1])?;
        let refined = t.mul(x, channel_gate)?;

        // Spatial stage over per-pixel channel statistics.
        let stats = t.channel_pool(refined)?;
        let spatial_gate = t.sigmoid(self.spatial.forward(t, store, stats)?);
        t.mul(refined, spatial_gate)
    }

    pub fn param_count(&self) -> usize {
        self.mlp1.param_count() + self.mlp2.param_count() + self.spatial.param_count()
    }

    pub fn saturate_open<E: Element>(&self, store: &mut ParamStore<E>) {
        for id in [
            self.mlp1.weight,
            self.mlp1.bias,
            self.mlp2.weight,
            self.spatial.weight,
        ] {
            store.get_mut(id).value.data_mut().fill(E::ZERO);
        }
        for id in [self.mlp2.bias, self.spatial.bias] {
            store.get_mut(id).value.data_mut().fill(E::from_f64(40.0));
        }
    }
}

/// Which attention, if any, sits on the residual branch.
#[derive(Clone, Debug)]
pub enum Attention {
    None,
    Se(SeBlock),
    Cbam(CbamBlock),
}

/// Selector used by model configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    None,
    Se,
    Cbam,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "se" => Ok(AttentionMode::Se),
            "cbam" => Ok(AttentionMode::Cbam),
            other => Err(Error::InvalidArgument(format!(
                "unknown attention mode '{other}' (expected none|se|cbam)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Se => "se",
            AttentionMode::Cbam => "cbam",
        }
    }
}

/// Smallest padding that keeps `(h + 2p - k) / stride` integral. Output
/// sizes must divide exactly (no flooring), so strided convolutions solve
/// their padding instead of assuming (k-1)/2.
pub fn solve_conv_padding(h: usize, kernel: usize, stride: usize) -> Option<usize> {
    (0..=kernel).find(|p| {
        let span = h + 2 * p;
        span >= kernel && (span - kernel) % stride == 0
    })
}

/// Output spatial size of a solved convolution.
pub fn conv_out_size(h: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (h + 2 * padding - kernel) / stride + 1
}

/// Residual block: two 3x3 convolutions, optional attention on the branch,
/// strided 1x1 projection shortcut when the shape changes. Spatial geometry
/// is solved from the input size so strided blocks stay integral; stride 2
/// cannot satisfy that on even inputs with odd kernels, so downsampling
/// blocks use stride 3.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
    pub projection: Option<Conv2dLayer>,
    pub attention: Attention,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub in_hw: usize,
    pub out_hw: usize,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        scope: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        in_hw: usize,
        mode: AttentionMode,
        se_ratio: usize,
        cbam_kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // The 1x1 shortcut of a reshaping block must produce the same output
        // size as the 3x3 branch, which pins its padding to p1 - 1; search
        // p1 >= 1 so both stay non-negative.
        let p1 = (1..=stride.max(1) + 1)
            .find(|p| {
                let span = in_hw + 2 * p;
                span >= 3 && (span - 3) % stride == 0
            })
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no integral conv geometry for size {in_hw}, kernel 3, stride {stride}"
                ))
            })?;
        let out_hw = conv_out_size(in_hw, 3, stride, p1);
        let conv1 = Conv2dLayer::new(
            store,
            &format!("{scope}.conv1"),
            in_ch,
            out_ch,
            3,
            stride,
            p1,
            Init::FanIn,
            rng,
        );
        let conv2 = Conv2dLayer::new(
            store,
            &format!("{scope}.conv2"),
            out_ch,
            out_ch,
            3,
            1,
            1,
            Init::FanIn,
            rng,
        );
        let projection = if stride != 1 || in_ch != out_ch {
            let pp = p1 - 1;
            debug_assert_eq!(conv_out_size(in_hw, 1, stride, pp), out_hw);
            Some(Conv2dLayer::new(
                store,
                &format!("{scope}.proj"),
                in_ch,
                out_ch,
                1,
                stride,
                pp,
                Init::FanInOut,
                rng,
            ))
        } else {
            None
        };
        let attention = match mode {
            AttentionMode::None => Attention::None,
            AttentionMode::Se => {
                Attention::Se(SeBlock::new(store, &format!("{scope}.se"), out_ch, se_ratio, rng)?)
            }
            AttentionMode::Cbam => Attention::Cbam(CbamBlock::new(
                store,
                &format!("{scope}.cbam"),
                out_ch,
                se_ratio,
                cbam_kernel,
                rng,
            )?),
        };
        Ok(ResidualBlock {
            conv1,
            conv2,
            projection,
            attention,
            in_ch,
            out_ch,
            stride,
            in_hw,
            out_hw,
        })
    }

    /// relu(shortcut(x) + attention(branch(x)))
    pub fn forward<E: Element>(
        &self,
        t: &Tape<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Result<Var> {
        let branch = t.relu(self.conv1.forward(t, store, x)?);
        let branch = self.conv2.forward(t, store, branch)?;
        let branch = match &self.attention {
            Attention::None => branch,
            Attention::Se(se) => se.forward(t, store, branch)?,
            Attention::Cbam(cbam) => cbam.forward(t, store, branch)?,
        };
        let shortcut = match &self.projection {
            Some(proj) => proj.forward(t, store, x)?,
            None => x,
        };
        Ok(t.relu(t.add(shortcut, branch)?))
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.conv1.param_count() + self.conv2.param_count();
        if let Some(p) = &self.projection {
            n += p.param_count();
        }
        n += match &self.attention {
            Attention::None => 0,
            Attention::Se(se) => se.param_count(),
            Attention::Cbam(cb) => cb.param_count(),
        };
        n
    }

    pub fn saturate_attention_open<E: Element>(&self, store: &mut ParamStore<E>) {
        match &self.attention {
            Attention::None => {}
            Attention::Se(se) => se.saturate_open(store),
            Attention::Cbam(cb) => cb.saturate_open(store),
        }
    }
}
