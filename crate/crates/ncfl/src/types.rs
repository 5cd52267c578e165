//! Shared domain types for clips, flow fields, features, latents and
//! prior parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered frames `[T, 3, H, W]` with values in [0, 1].
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Tensor,
    pub frame_rate: Option<f32>,
    pub id: String,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, frames: Tensor) -> Result<VideoClip> {
        let clip = VideoClip { frames, frame_rate: None, id: id.into() };
        clip.check()?;
        Ok(clip)
    }

    pub fn check(&self) -> Result<()> {
        if self.frames.shape().len() != 4 {
            return Err(Error::shape(format!(
                "clip {}: frames must be [T,C,H,W], got {:?}",
                self.id,
                self.frames.shape()
            )));
        }
        let (t, c, h, w) = self.frames.dims4();
        if t < 1 {
            return Err(Error::shape(format!("clip {}: T must be >= 1", self.id)));
        }
        if c != 3 {
            return Err(Error::shape(format!("clip {}: expected 3 channels, got {c}", self.id)));
        }
        if h < 8 || w < 8 {
            return Err(Error::shape(format!("clip {}: frames must be >= 8x8, got {h}x{w}", self.id)));
        }
        if !self.frames.is_finite() {
            return Err(Error::Data(format!("clip {}: non-finite frame values", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.frames.dims4();
        (h, w)
    }

    /// Frame t as `[3, H, W]`.
    pub fn frame(&self, t: usize) -> Tensor {
        self.frames.index_axis0(t)
    }
}

/// Per-pixel displacement field `[2, H, W]`, channel 0 = dx, 1 = dy.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub flow: Tensor,
}

impl FlowField {
    pub fn new(flow: Tensor) -> Result<FlowField> {
        if flow.shape().len() != 3 || flow.shape()[0] != 2 {
            return Err(Error::shape(format!("flow must be [2,H,W], got {:?}", flow.shape())));
        }
        if !flow.is_finite() {
            return Err(Error::Data("non-finite flow values".into()));
        }
        Ok(FlowField { flow })
    }

    pub fn zeros(h: usize, w: usize) -> FlowField {
        FlowField { flow: Tensor::zeros(&[2, h, w]) }
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.flow.dims3();
        (h, w)
    }
}

/// Which pipeline stage a feature map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStage {
    /// c_t, produced by the restoration trunk for the next step.
    Propagated,
    /// c-hat, flow-warped onto the current frame.
    Warped,
    /// c-check, after the attention gate.
    Attended,
    /// c-tilde, after the compression bottleneck.
    Refined,
}

#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stage: FeatureStage,
}

impl FeatureMap {
    pub fn new(data: Tensor, stage: FeatureStage) -> Result<FeatureMap> {
        if data.shape().len() != 3 {
            return Err(Error::shape(format!("features must be [C,H,W], got {:?}", data.shape())));
        }
        if !data.is_finite() {
            return Err(Error::Data("non-finite feature values".into()));
        }
        Ok(FeatureMap { data, stage })
    }
}

/// Latent code `[C_e, H/4, W/4]` produced by the compression encoder.
#[derive(Clone, Debug)]
pub struct LatentCode {
    pub data: Tensor,
    pub quantized: bool,
}

/// Per-element prior parameters over a latent grid.
#[derive(Clone, Debug)]
pub struct PriorParams {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub q: Tensor,
}

impl PriorParams {
    pub fn check(&self) -> Result<()> {
        if self.mu.shape() != self.sigma.shape() || self.mu.shape() != self.q.shape() {
            return Err(Error::shape(format!(
                "prior shapes differ: mu {:?} sigma {:?} q {:?}",
                self.mu.shape(),
                self.sigma.shape(),
                self.q.shape()
            )));
        }
        if self.sigma.data().iter().any(|&v| v < 1e-6) {
            return Err(Error::Data("sigma below 1e-6 floor".into()));
        }
        if self.q.data().iter().any(|&v| v < 1e-6) {
            return Err(Error::Data("q below 1e-6 floor".into()));
        }
        Ok(())
    }
}
