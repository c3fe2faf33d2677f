//! Output-size arithmetic for convolution and pooling, and the adapter
//! solver that picks a convolution mapping one feature-map shape onto another.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

/// Largest adapter kernel the solver will emit.
pub const MAX_ADAPTER_KERNEL: usize = 7;

/// Height × width × channels of a single feature map (batch excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        FeatureShape { height, width, channels }
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn same_spatial(&self, other: &FeatureShape) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Shape with a leading batch dimension.
    pub fn with_batch(&self, batch: usize) -> [usize; 4] {
        [batch, self.height, self.width, self.channels]
    }
}

impl std::fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}×{}×{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(
        kernel_size: usize,
        padding: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let g = ConvGeometry { kernel_size, padding, stride, in_channels, out_channels };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel, stride and channel counts must be positive: {self:?}"),
            ));
        }
        Ok(())
    }

    /// `⌊(n − F + 2P)/S⌋ + 1`; rejects `n − F + 2P < 0`.
    pub fn output_dim(&self, n: usize) -> Result<usize> {
        conv_output_dim(n, self.kernel_size, self.padding, self.stride)
    }

    /// Whether the stride divides `n − F + 2P` exactly.
    pub fn divides_exactly(&self, n: usize) -> bool {
        (n + 2 * self.padding).checked_sub(self.kernel_size).is_some_and(|r| r % self.stride == 0)
    }

    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        if input.channels != self.in_channels {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", input.channels, self.in_channels),
            ));
        }
        Ok(FeatureShape::new(self.output_dim(input.height)?, self.output_dim(input.width)?, self.out_channels))
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel_size, self.kernel_size, self.in_channels, self.out_channels]
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_size * self.kernel_size * self.in_channels * self.out_channels
    }
}

pub fn conv_output_dim(n: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(TensorError::invalid("conv2d", "kernel size and stride must be positive"));
    }
    let padded = n + 2 * padding;
    if padded < kernel {
        return Err(TensorError::shape("conv2d", format!("kernel {kernel} exceeds padded input {n}+2·{padding}")));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(TensorError::invalid("maxpool2d", "window and stride must be positive"));
        }
        Ok(PoolGeometry { window, stride })
    }

    /// `⌊(n − F)/S⌋ + 1`; rejects windows larger than the input.
    pub fn output_dim(&self, n: usize) -> Result<usize> {
        pool_output_dim(n, self.window, self.stride)
    }

    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        Ok(FeatureShape::new(self.output_dim(input.height)?, self.output_dim(input.width)?, input.channels))
    }
}

pub fn pool_output_dim(n: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(TensorError::invalid("maxpool2d", "window and stride must be positive"));
    }
    if n < window {
        return Err(TensorError::shape("maxpool2d", format!("window {window} larger than input {n}")));
    }
    Ok((n - window) / stride + 1)
}

/// Convolution block that maps a source feature map onto a target shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// False when source and target already agree and the link is a plain add.
    pub needed: bool,
}

impl AdapterSpec {
    pub fn geometry(&self) -> Option<ConvGeometry> {
        self.needed.then_some(ConvGeometry {
            kernel_size: self.kernel_size,
            padding: self.padding,
            stride: self.stride,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        })
    }

    pub fn output_shape(&self, src: FeatureShape) -> Result<FeatureShape> {
        match self.geometry() {
            Some(g) => g.output_shape(src),
            None => Ok(src),
        }
    }

    pub fn param_count(&self) -> usize {
        self.geometry().map_or(0, |g| g.weight_count() + g.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unadaptable shapes: {src} → {dst} ({reason})")]
pub struct UnadaptableShapes {
    pub src: FeatureShape,
    pub dst: FeatureShape,
    pub reason: String,
}

fn solve_axis(src: usize, dst: usize) -> Option<(usize, usize)> {
    if dst == 0 || src < dst {
        return None;
    }
    let stride = src / dst;
    let kernel = src - stride * (dst - 1);
    (1..=MAX_ADAPTER_KERNEL).contains(&kernel).then_some((kernel, stride))
}

/// Picks the adapter convolution taking `src` to `dst`.
///
/// Identical shapes need no adapter. A channel-only mismatch gets a 1×1
/// stride-1 convolution. A spatial mismatch solves the convolution size law
/// exactly with zero padding: `S = ⌊src/dst⌋`, `F = src − S·(dst − 1)`, and
/// `F` must land in `1..=7`. Only downsampling is possible.
pub fn make_adapter(src: FeatureShape, dst: FeatureShape) -> std::result::Result<AdapterSpec, UnadaptableShapes> {
    let fail = |reason: &str| UnadaptableShapes { src, dst, reason: reason.to_string() };
    if src == dst {
        return Ok(AdapterSpec {
            kernel_size: 1,
            stride: 1,
            padding: 0,
            in_channels: src.channels,
            out_channels: dst.channels,
            needed: false,
        });
    }
    if src.same_spatial(&dst) {
        return Ok(AdapterSpec {
            kernel_size: 1,
            stride: 1,
            padding: 0,
            in_channels: src.channels,
            out_channels: dst.channels,
            needed: true,
        });
    }
    if src.height < dst.height || src.width < dst.width {
        return Err(fail("adapters only downsample"));
    }
    let h = solve_axis(src.height, dst.height).ok_or_else(|| fail("no kernel in 1..=7 solves the height"))?;
    let w = solve_axis(src.width, dst.width).ok_or_else(|| fail("no kernel in 1..=7 solves the width"))?;
    if h != w {
        return Err(fail("height and width need different square kernels"));
    }
    let spec = AdapterSpec {
        kernel_size: h.0,
        stride: h.1,
        padding: 0,
        in_channels: src.channels,
        out_channels: dst.channels,
        needed: true,
    };
    debug_assert_eq!(spec.output_shape(src).ok(), Some(dst));
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_keeps_size() {
        let g = ConvGeometry::new(3, 1, 1, 3, 8).unwrap();
        assert_eq!(g.output_dim(100).unwrap(), 100);
    }

    #[test]
    fn pooling_halves_mnist() {
        assert_eq!(pool_output_dim(28, 2, 2).unwrap(), 14);
        assert!(pool_output_dim(1, 2, 2).is_err());
    }

    #[test]
    fn negative_extent_is_rejected() {
        assert!(conv_output_dim(2, 5, 1, 1).is_err());
        assert_eq!(conv_output_dim(3, 5, 1, 1).unwrap(), 1);
    }

    #[test]
    fn floor_semantics() {
        let g = ConvGeometry::new(3, 0, 2, 1, 1).unwrap();
        assert_eq!(g.output_dim(8).unwrap(), 3);
        assert!(!g.divides_exactly(8));
        assert!(g.divides_exactly(9));
    }

    #[test]
    fn adapter_channels_only() {
        let a = make_adapter(FeatureShape::new(28, 28, 8), FeatureShape::new(28, 28, 4)).unwrap();
        assert!(a.needed);
        assert_eq!((a.kernel_size, a.stride, a.padding, a.in_channels, a.out_channels), (1, 1, 0, 8, 4));
    }

    #[test]
    fn adapter_spatial_downsample() {
        let src = FeatureShape::new(100, 100, 8);
        let dst = FeatureShape::new(25, 25, 8);
        let a = make_adapter(src, dst).unwrap();
        assert_eq!((a.kernel_size, a.stride, a.padding), (4, 4, 0));
        assert_eq!((100 - 4) / 4 + 1, 25);
        assert_eq!(a.output_shape(src).unwrap(), dst);
    }

    #[test]
    fn adapter_identity() {
        let s = FeatureShape::new(14, 14, 16);
        let a = make_adapter(s, s).unwrap();
        assert!(!a.needed);
        assert_eq!(a.param_count(), 0);
    }

    #[test]
    fn adapter_rejects_upsampling_and_large_kernels() {
        assert!(make_adapter(FeatureShape::new(25, 25, 8), FeatureShape::new(100, 100, 8)).is_err());
        // S = 14, F = 100 − 14·6 = 16 > 7
        assert!(make_adapter(FeatureShape::new(100, 100, 8), FeatureShape::new(7, 7, 8)).is_err());
    }
}
