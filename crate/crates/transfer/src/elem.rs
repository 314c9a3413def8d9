use std::fmt::Debug;
use std::str::FromStr;

use num_traits::{PrimInt, WrappingAdd, WrappingSub, Zero};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I8,
    I16,
    I32,
    I64,
    U16,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::I16 | DType::U16 => 2,
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I8 => "i8",
            DType::I16 => "i16",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::U16 => "u16",
        }
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "f32" => DType::F32,
            "f64" => DType::F64,
            "i8" => DType::I8,
            "i16" => DType::I16,
            "i32" => DType::I32,
            "i64" => DType::I64,
            "u16" => DType::U16,
            _ => return Err(format!("unknown dtype {s:?}")),
        })
    }
}

/// A fixed-width weight element.
///
/// Deltas are taken on the bit pattern with wrapping arithmetic, so
/// `apply(old, delta(new, old))` is bitwise `new` for every value,
/// including NaNs and signed zeros.
pub trait WeightElem: Copy + Send + Sync + Debug + 'static {
    type Bits: PrimInt + WrappingAdd + WrappingSub + Send + Sync + Debug;
    const DTYPE: DType;
    const WIDTH: usize;

    fn to_bits(self) -> Self::Bits;
    fn from_bits(b: Self::Bits) -> Self;
    fn put_le(self, out: &mut Vec<u8>);
    /// Reads one element from the first `WIDTH` bytes of `b`.
    fn get_le(b: &[u8]) -> Self;

    fn delta(new: Self, old: Self) -> Self {
        Self::from_bits(new.to_bits().wrapping_sub(&old.to_bits()))
    }

    fn apply(old: Self, d: Self) -> Self {
        Self::from_bits(old.to_bits().wrapping_add(&d.to_bits()))
    }

    fn is_zero_delta(self) -> bool {
        self.to_bits().is_zero()
    }

    fn bit_eq(self, other: Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

macro_rules! int_elem {
    ($t:ty, $d:ident) => {
        impl WeightElem for $t {
            type Bits = $t;
            const DTYPE: DType = DType::$d;
            const WIDTH: usize = std::mem::size_of::<$t>();

            fn to_bits(self) -> $t {
                self
            }
            fn from_bits(b: $t) -> $t {
                b
            }
            fn put_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get_le(b: &[u8]) -> $t {
                <$t>::from_le_bytes(b[..Self::WIDTH].try_into().expect("width"))
            }
        }
    };
}

macro_rules! float_elem {
    ($t:ty, $bits:ty, $d:ident) => {
        impl WeightElem for $t {
            type Bits = $bits;
            const DTYPE: DType = DType::$d;
            const WIDTH: usize = std::mem::size_of::<$t>();

            fn to_bits(self) -> $bits {
                <$t>::to_bits(self)
            }
            fn from_bits(b: $bits) -> $t {
                <$t>::from_bits(b)
            }
            fn put_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn get_le(b: &[u8]) -> $t {
                <$t>::from_le_bytes(b[..Self::WIDTH].try_into().expect("width"))
            }
        }
    };
}

int_elem!(i8, I8);
int_elem!(i16, I16);
int_elem!(i32, I32);
int_elem!(i64, I64);
// raw 16-bit patterns, e.g. bf16 weights carried opaquely
int_elem!(u16, U16);
float_elem!(f32, u32, F32);
float_elem!(f64, u64, F64);

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<E: WeightElem>(new: E, old: E) {
        let d = E::delta(new, old);
        assert!(E::apply(old, d).bit_eq(new), "{new:?} {old:?}");
        let mut buf = Vec::new();
        d.put_le(&mut buf);
        assert_eq!(buf.len(), E::WIDTH);
        assert!(E::get_le(&buf).bit_eq(d));
    }

    #[test]
    fn float_deltas_are_exact_for_special_values() {
        let vals = [0.0f32, -0.0, 1.0, f32::MIN_POSITIVE, f32::MAX, f32::INFINITY, f32::NAN, 1e-30, -3.5];
        for &a in &vals {
            for &b in &vals {
                roundtrip(a, b);
            }
        }
        // arithmetic subtraction would lose this one
        roundtrip(1.0f64 + f64::EPSILON, 1e20);
        assert!(!f32::delta(-0.0, 0.0).is_zero_delta());
        assert!(f32::delta(2.5, 2.5).is_zero_delta());
    }

    #[test]
    fn int_deltas_wrap() {
        roundtrip(i8::MIN, i8::MAX);
        roundtrip(i64::MAX, -1i64);
        roundtrip(u16::MAX, 0u16);
        assert_eq!(i32::delta(5, 3), 2);
    }

    #[test]
    fn dtype_names_round_trip() {
        for d in [DType::F32, DType::F64, DType::I8, DType::I16, DType::I32, DType::I64, DType::U16] {
            assert_eq!(d.as_str().parse::<DType>().unwrap(), d);
        }
        assert!("bf17".parse::<DType>().is_err());
    }
}
