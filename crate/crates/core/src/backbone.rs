//! Four-stage convolutional backbone with pre-pool taps.
//!
//! Each stage is `conv(p×p, pad p/2) → relu → max_pool(window)`. The taps
//! used by the transformer stages are the post-relu, pre-pool maps of
//! stages 3 and 4.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;
/// Stages whose pre-pool maps are exposed.
pub const TAP_STAGES: [usize; 2] = [3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub kernel_size: usize,
    pub pool_window: usize,
    /// (channels, height, width)
    pub input_size: (usize, usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            kernel_size: 3,
            pool_window: 2,
            input_size: (3, 64, 64),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_size;
        if c == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "backbone.kernel_size must be odd to preserve spatial size, got {}",
                self.kernel_size
            )));
        }
        if self.pool_window < 2 {
            return Err(Error::Config("backbone.pool_window must be at least 2".into()));
        }
        let div = self.pool_window.pow(NUM_STAGES as u32);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} must be divisible by pool_window^4 = {div}"
            )));
        }
        Ok(())
    }

    /// (channels, height, width) of the pre-pool map of `stage` (1-based).
    pub fn tap_shape(&self, stage: usize) -> (usize, usize, usize) {
        let down = self.pool_window.pow(stage as u32 - 1);
        (
            self.stage_channels[stage - 1],
            self.input_size.1 / down,
            self.input_size.2 / down,
        )
    }
}

/// Pre-pool taps keyed by 1-based stage index plus the final pooled output.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub taps: BTreeMap<usize, Var>,
    pub final_map: Var,
}

impl FeaturePyramid {
    pub fn tap(&self, stage: usize) -> Result<Var> {
        self.taps
            .get(&stage)
            .copied()
            .ok_or_else(|| Error::Config(format!("no backbone tap at stage {stage}")))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    kernels: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Backbone {
    pub fn new<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.kernel_size;
        let mut in_ch = cfg.input_size.0;
        let mut kernels = Vec::with_capacity(NUM_STAGES);
        let mut biases = Vec::with_capacity(NUM_STAGES);
        for (i, &out_ch) in cfg.stage_channels.iter().enumerate() {
            let k = Tensor::xavier_uniform(&[out_ch, in_ch, p, p], in_ch * p * p, out_ch * p * p, rng);
            kernels.push(store.add(format!("{prefix}.stage{}.kernel", i + 1), k));
            biases.push(store.add(
                format!("{prefix}.stage{}.bias", i + 1),
                Tensor::zeros(&[out_ch, 1, 1]),
            ));
            in_ch = out_ch;
        }
        Ok(Self {
            cfg: cfg.clone(),
            kernels,
            biases,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward(&self, g: &mut Graph, params: &Bound, image: Var) -> Result<FeaturePyramid> {
        let (c, h, w) = self.cfg.input_size;
        if g.shape(image) != [c, h, w] {
            return Err(Error::dim(format!(
                "backbone expects input [{c}, {h}, {w}], got {:?}",
                g.shape(image)
            )));
        }
        let pad = self.cfg.kernel_size / 2;
        let mut x = image;
        let mut taps = BTreeMap::new();
        for stage in 0..NUM_STAGES {
            let conv = g.conv2d(x, params.var(self.kernels[stage]), 1, pad)?;
            let conv = g.add(conv, params.var(self.biases[stage]))?;
            let act = g.relu(conv);
            if TAP_STAGES.contains(&(stage + 1)) {
                taps.insert(stage + 1, act);
            }
            x = g.max_pool2d(act, self.cfg.pool_window)?;
        }
        Ok(FeaturePyramid { taps, final_map: x })
    }
}
