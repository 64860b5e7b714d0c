//! The four limited-precision number formats.
//!
//! Every format is emulated on 32-bit reals: quantizing a value returns the
//! representable value the hardware would hold, not its bit encoding.

use serde::{Deserialize, Serialize};

use super::rounding::Rounder;
use crate::error::{Error, Result};

/// Widest format we emulate; beyond this the grid is no longer exact in f64
/// intermediate arithmetic.
const MAX_BIT_WIDTH: u32 = 32;

#[inline]
fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Two's-complement fixed point `Q[IL.FL]`. `IL` counts the sign bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPointFormat {
    pub bit_width: u32,
    pub integer_length: i32,
    pub fractional_length: i32,
    /// Permits `FL < 0` (and hence `IL > bit_width`).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub extended_range: bool,
}

impl FixedPointFormat {
    pub fn new(integer_length: i32, fractional_length: i32) -> Result<Self> {
        let fmt = FixedPointFormat {
            bit_width: (integer_length + fractional_length).max(0) as u32,
            integer_length,
            fractional_length,
            extended_range: false,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    /// Like [`FixedPointFormat::new`] but accepts a negative fractional length.
    pub fn with_extended_range(integer_length: i32, fractional_length: i32) -> Result<Self> {
        let fmt = FixedPointFormat {
            bit_width: (integer_length + fractional_length).max(0) as u32,
            integer_length,
            fractional_length,
            extended_range: true,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn validate(&self) -> Result<()> {
        let bw = self.bit_width as i64;
        if bw != self.integer_length as i64 + self.fractional_length as i64 {
            return Err(Error::InvalidFormat(format!(
                "fixed point: bit width {} != IL {} + FL {}",
                self.bit_width, self.integer_length, self.fractional_length
            )));
        }
        if !(2..=MAX_BIT_WIDTH as i64).contains(&bw) {
            return Err(Error::InvalidFormat(format!(
                "fixed point: bit width {bw} outside [2, {MAX_BIT_WIDTH}]"
            )));
        }
        if !self.extended_range && (self.fractional_length < 0 || self.integer_length < 1) {
            return Err(Error::InvalidFormat(format!(
                "fixed point: Q{}.{} needs IL >= 1 and FL >= 0",
                self.integer_length, self.fractional_length
            )));
        }
        if self.fractional_length.abs() > 120 {
            return Err(Error::InvalidFormat("fixed point: |FL| > 120".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        pow2(-self.fractional_length)
    }

    /// `2^(IL-1) - 2^(-FL)`
    pub fn max_value(&self) -> f64 {
        pow2(self.integer_length - 1) - self.step()
    }

    /// `-2^(IL-1)`
    pub fn min_value(&self) -> f64 {
        -pow2(self.integer_length - 1)
    }

    pub fn quantize(&self, x: f32, rounder: &mut Rounder) -> f32 {
        let step = self.step();
        let half = pow2(self.bit_width as i32 - 1);
        let units = rounder.round_units(x as f64 / step).clamp(-half, half - 1.0);
        (units * step) as f32
    }
}

/// Sign-magnitude fixed point with a per-group fractional length. The
/// mantissa has `bit_width - 1` bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicFixedPointFormat {
    pub bit_width: u32,
    pub fractional_length: i32,
}

impl DynamicFixedPointFormat {
    pub fn new(bit_width: u32, fractional_length: i32) -> Result<Self> {
        let fmt = DynamicFixedPointFormat {
            bit_width,
            fractional_length,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    /// Format whose integer part, sign bit included, is `il` bits wide:
    /// `FL = bit_width - il`, magnitudes below `2^(il-1)`.
    pub fn from_integer_length(bit_width: u32, il: i32) -> Result<Self> {
        Self::new(bit_width, bit_width as i32 - il)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_BIT_WIDTH).contains(&self.bit_width) {
            return Err(Error::InvalidFormat(format!(
                "dynamic fixed point: bit width {} outside [2, {MAX_BIT_WIDTH}]",
                self.bit_width
            )));
        }
        if self.fractional_length.abs() > 120 {
            return Err(Error::InvalidFormat("dynamic fixed point: |FL| > 120".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        pow2(-self.fractional_length)
    }

    pub fn max_mantissa(&self) -> f64 {
        pow2(self.bit_width as i32 - 1) - 1.0
    }

    pub fn max_value(&self) -> f64 {
        self.max_mantissa() * self.step()
    }

    pub fn quantize(&self, x: f32, rounder: &mut Rounder) -> f32 {
        let step = self.step();
        let mag = rounder
            .round_units((x as f64).abs() / step)
            .min(self.max_mantissa());
        let v = (mag * step) as f32;
        if x.is_sign_negative() && v != 0.0 {
            -v
        } else {
            v
        }
    }
}

/// Narrow floating point without INF/NaN or denormals. The all-ones exponent
/// is an ordinary magnitude; a stored exponent of zero only encodes `0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinifloatFormat {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
}

impl MinifloatFormat {
    pub fn new(exponent_bits: u32, mantissa_bits: u32) -> Result<Self> {
        let fmt = MinifloatFormat {
            exponent_bits,
            mantissa_bits,
        };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=7).contains(&self.exponent_bits) {
            return Err(Error::InvalidFormat(format!(
                "minifloat: exponent bits {} outside [1, 7]",
                self.exponent_bits
            )));
        }
        if self.mantissa_bits > 23 {
            return Err(Error::InvalidFormat(format!(
                "minifloat: mantissa bits {} > 23",
                self.mantissa_bits
            )));
        }
        Ok(())
    }

    pub fn bit_width(&self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    /// `2^(exponent_bits - 1) - 1`
    pub fn bias(&self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    fn max_stored_exponent(&self) -> i32 {
        (1 << self.exponent_bits) - 1
    }

    pub fn min_normal(&self) -> f64 {
        pow2(1 - self.bias())
    }

    pub fn max_value(&self) -> f64 {
        pow2(self.max_stored_exponent() - self.bias()) * (2.0 - pow2(-(self.mantissa_bits as i32)))
    }

    /// Value of the positive encoding `code = stored_exponent << mantissa_bits | mantissa`.
    fn decode(&self, code: u64) -> f64 {
        let stored = (code >> self.mantissa_bits) as i32;
        let mant = code & ((1u64 << self.mantissa_bits) - 1);
        pow2(stored - self.bias()) * (1.0 + mant as f64 * pow2(-(self.mantissa_bits as i32)))
    }

    pub fn quantize(&self, x: f32, rounder: &mut Rounder) -> f32 {
        let a = (x as f64).abs();
        if a.is_nan() {
            return x;
        }
        if a < self.min_normal() {
            return 0.0;
        }
        let max = self.max_value();
        let mag = if a >= max {
            max
        } else {
            // Positive encodings are monotone in value and linear within a
            // binade, so rounding the fractional code rounds the value. Ties
            // land on the even code, i.e. the even mantissa.
            let exp = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
            let sig = a / pow2(exp);
            let scale = pow2(self.mantissa_bits as i32);
            let code_real = (exp + self.bias()) as f64 * scale + (sig - 1.0) * scale;
            let max_code = ((self.max_stored_exponent() as f64 + 1.0) * scale) - 1.0;
            let code = rounder.round_units(code_real).clamp(scale, max_code);
            self.decode(code as u64)
        };
        let v = mag as f32;
        if x.is_sign_negative() {
            -v
        } else {
            v
        }
    }
}

/// Integer power-of-two parameters `±2^e`, stored as a shift amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowerOfTwoFormat {
    pub exponent_bits: u32,
    pub exponent_min: i32,
    pub exponent_max: i32,
    pub signed: bool,
}

impl Default for PowerOfTwoFormat {
    fn default() -> Self {
        PowerOfTwoFormat {
            exponent_bits: 4,
            exponent_min: -8,
            exponent_max: -1,
            signed: true,
        }
    }
}

/// Sign and exponent of a power-of-two parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pow2Code {
    pub sign: i8,
    pub exponent: i32,
}

impl Pow2Code {
    pub fn decode(&self) -> f32 {
        self.sign as f32 * (2f32).powi(self.exponent)
    }
}

impl PowerOfTwoFormat {
    pub fn validate(&self) -> Result<()> {
        if self.exponent_min > self.exponent_max {
            return Err(Error::InvalidFormat(format!(
                "power of two: exponent range [{}, {}] is empty",
                self.exponent_min, self.exponent_max
            )));
        }
        if !(1..=16).contains(&self.exponent_bits) {
            return Err(Error::InvalidFormat(format!(
                "power of two: exponent bits {} outside [1, 16]",
                self.exponent_bits
            )));
        }
        let card = (self.exponent_max as i64 - self.exponent_min as i64) + 1;
        if card > 1i64 << self.exponent_bits {
            return Err(Error::InvalidFormat(format!(
                "power of two: {card} exponents do not fit in {} bits",
                self.exponent_bits
            )));
        }
        if self.exponent_min < -126 || self.exponent_max > 127 {
            return Err(Error::InvalidFormat("power of two: exponent outside f32 range".into()));
        }
        Ok(())
    }

    pub fn max_value(&self) -> f64 {
        pow2(self.exponent_max)
    }

    /// Nearest power of two on the log scale, with the exponent clamped to
    /// the format's range. Zero has no encoding and maps to the smallest
    /// positive magnitude.
    pub fn encode(&self, w: f32, rounder: &mut Rounder) -> Pow2Code {
        let a = (w as f64).abs();
        let negative = w < 0.0;
        if (negative && !self.signed) || a == 0.0 || a.is_nan() {
            return Pow2Code {
                sign: 1,
                exponent: self.exponent_min,
            };
        }
        let exponent = if rounder.is_stochastic() {
            // Choose between the bracketing powers with probability
            // proportional to linear distance.
            let lo = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
            let lo_v = pow2(lo);
            let p_up = (a - lo_v) / lo_v;
            lo + rounder.choose_upper(p_up) as i32
        } else {
            a.log2().round_ties_even() as i32
        };
        Pow2Code {
            sign: if negative { -1 } else { 1 },
            exponent: exponent.clamp(self.exponent_min, self.exponent_max),
        }
    }

    pub fn quantize(&self, x: f32, rounder: &mut Rounder) -> f32 {
        self.encode(x, rounder).decode()
    }
}

/// Any of the supported reduced-precision formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NumberFormat {
    FixedPoint(FixedPointFormat),
    DynamicFixedPoint(DynamicFixedPointFormat),
    Minifloat(MinifloatFormat),
    PowerOfTwo(PowerOfTwoFormat),
}

impl NumberFormat {
    pub fn validate(&self) -> Result<()> {
        match self {
            NumberFormat::FixedPoint(f) => f.validate(),
            NumberFormat::DynamicFixedPoint(f) => f.validate(),
            NumberFormat::Minifloat(f) => f.validate(),
            NumberFormat::PowerOfTwo(f) => f.validate(),
        }
    }

    /// Storage bits per value.
    pub fn bit_width(&self) -> u32 {
        match self {
            NumberFormat::FixedPoint(f) => f.bit_width,
            NumberFormat::DynamicFixedPoint(f) => f.bit_width,
            NumberFormat::Minifloat(f) => f.bit_width(),
            NumberFormat::PowerOfTwo(f) => f.exponent_bits,
        }
    }

    /// Largest representable magnitude.
    pub fn grid_max(&self) -> f64 {
        match self {
            NumberFormat::FixedPoint(f) => f.max_value(),
            NumberFormat::DynamicFixedPoint(f) => f.max_value(),
            NumberFormat::Minifloat(f) => f.max_value(),
            NumberFormat::PowerOfTwo(f) => f.max_value(),
        }
    }

    #[inline]
    pub fn quantize(&self, x: f32, rounder: &mut Rounder) -> f32 {
        match self {
            NumberFormat::FixedPoint(f) => f.quantize(x, rounder),
            NumberFormat::DynamicFixedPoint(f) => f.quantize(x, rounder),
            NumberFormat::Minifloat(f) => f.quantize(x, rounder),
            NumberFormat::PowerOfTwo(f) => f.quantize(x, rounder),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            NumberFormat::FixedPoint(f) => {
                format!("fixed Q{}.{}", f.integer_length, f.fractional_length)
            }
            NumberFormat::DynamicFixedPoint(f) => {
                format!("dynamic_fixed {}-bit FL={}", f.bit_width, f.fractional_length)
            }
            NumberFormat::Minifloat(f) => format!(
                "minifloat {}-bit (exp {}, mant {})",
                f.bit_width(),
                f.exponent_bits,
                f.mantissa_bits
            ),
            NumberFormat::PowerOfTwo(f) => {
                format!("pow2 2^[{}..{}]", f.exponent_min, f.exponent_max)
            }
        }
    }
}

impl From<FixedPointFormat> for NumberFormat {
    fn from(f: FixedPointFormat) -> Self {
        NumberFormat::FixedPoint(f)
    }
}

impl From<DynamicFixedPointFormat> for NumberFormat {
    fn from(f: DynamicFixedPointFormat) -> Self {
        NumberFormat::DynamicFixedPoint(f)
    }
}

impl From<MinifloatFormat> for NumberFormat {
    fn from(f: MinifloatFormat) -> Self {
        NumberFormat::Minifloat(f)
    }
}

impl From<PowerOfTwoFormat> for NumberFormat {
    fn from(f: PowerOfTwoFormat) -> Self {
        NumberFormat::PowerOfTwo(f)
    }
}
