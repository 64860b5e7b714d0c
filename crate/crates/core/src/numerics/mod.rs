//! Emulation of limited-precision number formats as value-to-value maps on
//! 32-bit reals.

mod formats;
mod rounding;

pub use formats::{
    DynamicFixedPointFormat, FixedPointFormat, MinifloatFormat, NumberFormat, Pow2Code,
    PowerOfTwoFormat,
};
pub use rounding::{
    derive_stream_seed, round_nearest_even, round_stochastic, Rounder, RoundingMode,
};

use crate::error::Result;
use crate::tensor::Tensor;

pub fn quantize_fixed(x: f32, fmt: &FixedPointFormat, rounder: &mut Rounder) -> Result<f32> {
    fmt.validate()?;
    Ok(fmt.quantize(x, rounder))
}

pub fn quantize_dynamic_fixed(
    x: f32,
    fmt: &DynamicFixedPointFormat,
    rounder: &mut Rounder,
) -> Result<f32> {
    fmt.validate()?;
    Ok(fmt.quantize(x, rounder))
}

pub fn quantize_minifloat(x: f32, fmt: &MinifloatFormat) -> Result<f32> {
    fmt.validate()?;
    Ok(fmt.quantize(x, &mut Rounder::nearest()))
}

pub fn quantize_pow2(w: f32, fmt: &PowerOfTwoFormat) -> Result<Pow2Code> {
    fmt.validate()?;
    Ok(fmt.encode(w, &mut Rounder::nearest()))
}

/// Element-wise quantization. Stochastic mode draws from stream 0 of the
/// mode's seed; use [`quantize_tensor_stream`] to give each tensor its own.
pub fn quantize_tensor(t: &Tensor, fmt: &NumberFormat, mode: RoundingMode) -> Result<Tensor> {
    quantize_tensor_stream(t, fmt, mode, 0)
}

pub fn quantize_tensor_stream(
    t: &Tensor,
    fmt: &NumberFormat,
    mode: RoundingMode,
    stream: u64,
) -> Result<Tensor> {
    fmt.validate()?;
    let mut rounder = Rounder::for_stream(mode, stream);
    Ok(t.map(|v| fmt.quantize(v, &mut rounder)))
}

/// In-place variant for hot paths; the format must already be valid.
pub(crate) fn quantize_slice(values: &mut [f32], fmt: &NumberFormat, rounder: &mut Rounder) {
    for v in values {
        *v = fmt.quantize(*v, rounder);
    }
}
