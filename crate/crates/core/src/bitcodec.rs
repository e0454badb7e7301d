//! Bit-exact codecs for the two attackable weight encodings: BF16 and
//! per-tensor-scaled INT8.
//!
//! Patterns travel as a `u16` carrier (INT8 uses the low byte). All decoded
//! values and perturbations are held in `f64`, where both encodings decode
//! exactly: BF16 is a truncated `f32`, and an INT8 weight is an `f32` scale
//! times an 8-bit integer, whose product fits in a 53-bit significand.

use serde::{Deserialize, Serialize};

/// BF16 layout: 1 sign bit, 8 exponent bits, 7 mantissa bits.
pub const BF16_BITS: u8 = 16;
/// INT8 layout: 8 bits, two's complement.
pub const INT8_BITS: u8 = 8;

/// Numeric encoding of a stored weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QuantFormat {
    /// bfloat16 bit pattern.
    Bf16,
    /// Signed 8-bit code; dequantized value = `scale * code`.
    /// The scale is kept in `f32` so that `scale * code` is exact in `f64`.
    Int8 { scale: f32 },
}

/// Format family without the per-tensor scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantKind {
    Bf16,
    Int8,
}

impl QuantFormat {
    pub fn kind(&self) -> QuantKind {
        match self {
            QuantFormat::Bf16 => QuantKind::Bf16,
            QuantFormat::Int8 { .. } => QuantKind::Int8,
        }
    }

    /// Number of flippable bit positions per weight.
    pub fn bit_width(&self) -> u8 {
        match self {
            QuantFormat::Bf16 => BF16_BITS,
            QuantFormat::Int8 { .. } => INT8_BITS,
        }
    }

    /// Validity check used at construction and checkpoint-load time.
    pub fn is_valid(&self) -> bool {
        match self {
            QuantFormat::Bf16 => true,
            QuantFormat::Int8 { scale } => scale.is_finite() && *scale > 0.0,
        }
    }
}

/// Which way a stored bit moves when flipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlipDirection {
    ZeroToOne,
    OneToZero,
}

/// One candidate single-bit perturbation of a stored pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitFlip {
    /// Bit index, 0 = least significant.
    pub bit_position: u8,
    /// Determined by the pre-flip pattern at `bit_position`.
    pub direction: FlipDirection,
    /// Value change in dequantized units: `decode(flipped) - decode(original)`.
    pub delta_w: f64,
    /// Dequantized value after the flip.
    pub value_after: f64,
}

impl BitFlip {
    /// Non-finite flips (BF16 Inf/NaN) are kept in enumeration output but
    /// rejected by range filtering.
    pub fn is_finite(&self) -> bool {
        self.value_after.is_finite()
    }
}

/// Dequantize one pattern. Total over valid-width patterns; BF16 Inf/NaN
/// decode to the corresponding non-finite `f64`.
pub fn decode(pattern: u16, format: QuantFormat) -> f64 {
    match format {
        QuantFormat::Bf16 => f32::from_bits((pattern as u32) << 16) as f64,
        QuantFormat::Int8 { scale } => {
            let code = (pattern & 0xFF) as u8 as i8;
            scale as f64 * code as f64
        }
    }
}

/// Round-to-nearest-even encode of an `f64` into a BF16 pattern.
/// NaN inputs collapse onto the canonical quiet NaN of their sign.
pub fn encode_bf16(value: f64) -> u16 {
    let f = value as f32;
    let bits = f.to_bits();
    if f.is_nan() {
        let sign = (bits >> 16) & 0x8000;
        return (sign | 0x7FC0) as u16;
    }
    let round = bits.wrapping_add(0x7FFF + ((bits >> 16) & 1));
    (round >> 16) as u16
}

/// Quantize an `f64` into the given format's pattern.
/// INT8 uses symmetric rounding onto [-127, 127].
pub fn quantize(value: f64, format: QuantFormat) -> u16 {
    match format {
        QuantFormat::Bf16 => encode_bf16(value),
        QuantFormat::Int8 { scale } => {
            let code = (value / scale as f64).round().clamp(-127.0, 127.0) as i8;
            (code as u8) as u16
        }
    }
}

/// XOR the selected bit within the format's width.
pub fn flip_pattern(pattern: u16, bit_position: u8, format: QuantFormat) -> u16 {
    debug_assert!(bit_position < format.bit_width());
    let flipped = pattern ^ (1u16 << bit_position);
    match format {
        QuantFormat::Bf16 => flipped,
        QuantFormat::Int8 { .. } => flipped & 0xFF,
    }
}

fn flip_at(pattern: u16, bit_position: u8, format: QuantFormat) -> BitFlip {
    let direction = if pattern & (1 << bit_position) == 0 {
        FlipDirection::ZeroToOne
    } else {
        FlipDirection::OneToZero
    };
    let value_before = decode(pattern, format);
    let value_after = decode(flip_pattern(pattern, bit_position, format), format);
    BitFlip {
        bit_position,
        direction,
        delta_w: value_after - value_before,
        value_after,
    }
}

/// One `BitFlip` per bit position, in ascending bit order.
pub fn enumerate_flips(pattern: u16, format: QuantFormat) -> Vec<BitFlip> {
    (0..format.bit_width())
        .map(|b| flip_at(pattern, b, format))
        .collect()
}

/// Eq.-style layer-distribution constraint: the perturbed value must stay
/// finite and inside the layer's closed value range.
pub fn in_range(value_after: f64, layer_min: f64, layer_max: f64) -> bool {
    value_after.is_finite() && layer_min <= value_after && value_after <= layer_max
}

/// Maximum |delta_w| over the flips that pass `in_range`; 0 when none do.
pub fn max_valid_delta(pattern: u16, format: QuantFormat, layer_min: f64, layer_max: f64) -> f64 {
    best_valid_flip(pattern, format, layer_min, layer_max)
        .map(|f| f.delta_w.abs())
        .unwrap_or(0.0)
}

/// The argmax-|delta| in-range flip, ties broken toward the lowest bit
/// position. `None` when no flip stays in range.
pub fn best_valid_flip(
    pattern: u16,
    format: QuantFormat,
    layer_min: f64,
    layer_max: f64,
) -> Option<BitFlip> {
    let mut best: Option<BitFlip> = None;
    for b in 0..format.bit_width() {
        let flip = flip_at(pattern, b, format);
        // A non-finite delta means the pre-flip value was already
        // non-finite; such a weight offers no usable perturbation.
        if !flip.delta_w.is_finite() || !in_range(flip.value_after, layer_min, layer_max) {
            continue;
        }
        // Strict > keeps the lowest-bit winner among equal magnitudes.
        if best.map_or(true, |cur| flip.delta_w.abs() > cur.delta_w.abs()) {
            best = Some(flip);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: QuantFormat = QuantFormat::Int8 { scale: 1.0 };

    #[test]
    fn decode_reference_patterns() {
        // IEEE-754 reference conversion: 0x3F80 is 1.0 in both f32 (<<16) and bf16.
        assert_eq!(decode(0x3F80, QuantFormat::Bf16), 1.0);
        assert_eq!(decode(0x0000, QuantFormat::Bf16), 0.0);
        assert_eq!(decode(0b0000_0101, UNIT), 5.0);
        assert_eq!(decode(0xBF80, QuantFormat::Bf16), -1.0);
        assert!(decode(0x7F80, QuantFormat::Bf16).is_infinite());
        assert!(decode(0x7FC1, QuantFormat::Bf16).is_nan());
    }

    #[test]
    fn decode_bf16_denormals() {
        // Smallest positive denormal: mantissa 1, exponent 0.
        let tiny = decode(0x0001, QuantFormat::Bf16);
        assert!(tiny > 0.0 && tiny < f32::MIN_POSITIVE as f64);
        assert_eq!(tiny, 2f64.powi(-133));
    }

    #[test]
    fn int8_decode_is_negative_for_high_codes() {
        assert_eq!(decode(0x80, UNIT), -128.0);
        assert_eq!(decode(0xFF, UNIT), -1.0);
        assert_eq!(decode(0x7F, QuantFormat::Int8 { scale: 0.5 }), 63.5);
    }

    #[test]
    fn sign_flip_negates() {
        let flips = enumerate_flips(0x3F80, QuantFormat::Bf16);
        let sign = flips[15];
        assert_eq!(sign.delta_w, -2.0);
        assert_eq!(sign.value_after, -1.0);
        assert_eq!(sign.direction, FlipDirection::ZeroToOne);
    }

    #[test]
    fn exponent_msb_flip_of_one_is_infinite() {
        // Exponent field occupies pattern bits 7..=14; its MSB is bit 14.
        let flips = enumerate_flips(0x3F80, QuantFormat::Bf16);
        let exp_msb = flips[14];
        assert!(exp_msb.value_after.is_infinite());
        assert!(!exp_msb.is_finite());
    }

    #[test]
    fn int8_top_bit_flip_from_five() {
        let flips = enumerate_flips(5, UNIT);
        let top = flips[7];
        assert_eq!(top.delta_w, -128.0);
        assert_eq!(top.value_after, -123.0);
    }

    #[test]
    fn range_check_edges() {
        assert!(in_range(0.5, -1.0, 1.0));
        assert!(!in_range(f64::INFINITY, -1e30, 1e30));
        assert!(!in_range(f64::NAN, -1.0, 1.0));
        // Non-strict at both ends.
        assert!(in_range(1.0, -1.0, 1.0));
        assert!(in_range(-1.0, -1.0, 1.0));
    }

    #[test]
    fn max_delta_int8_zero_code() {
        // Bit 7 takes code 0 to -128, which the [-128, 127] range admits.
        assert_eq!(max_valid_delta(0, UNIT, -128.0, 127.0), 128.0);
    }

    #[test]
    fn max_delta_degenerate_range_is_zero() {
        assert_eq!(max_valid_delta(0x3F80, QuantFormat::Bf16, 1.0, 1.0), 0.0);
        assert_eq!(max_valid_delta(5, UNIT, 5.0, 5.0), 0.0);
    }

    #[test]
    fn max_delta_bf16_one_in_pm2() {
        // Exhaustive over all 16 flips: the sign flip to -1.0 stays in
        // [-2, 2] and |delta| = 2 beats every exponent/mantissa move.
        assert_eq!(max_valid_delta(0x3F80, QuantFormat::Bf16, -2.0, 2.0), 2.0);
        let best = best_valid_flip(0x3F80, QuantFormat::Bf16, -2.0, 2.0).unwrap();
        assert_eq!(best.bit_position, 15);
    }

    #[test]
    fn best_flip_matches_enumeration_filter() {
        // Cross-check against the enumeration route on a spread of patterns.
        for pattern in (0..=u16::MAX).step_by(97) {
            for (lo, hi) in [(-2.0, 2.0), (-0.1, 0.3), (0.0, 1e30)] {
                let brute = enumerate_flips(pattern, QuantFormat::Bf16)
                    .into_iter()
                    .filter(|f| f.delta_w.is_finite() && in_range(f.value_after, lo, hi))
                    .fold(0.0f64, |m, f| m.max(f.delta_w.abs()));
                assert_eq!(
                    max_valid_delta(pattern, QuantFormat::Bf16, lo, hi),
                    brute,
                    "pattern {pattern:#06x} range [{lo}, {hi}]"
                );
            }
        }
    }

    #[test]
    fn involution_restores_pattern() {
        for pattern in [0u16, 0x3F80, 0xFFFF, 0x8000, 0x7F80, 0x1234] {
            for b in 0..16 {
                let once = flip_pattern(pattern, b, QuantFormat::Bf16);
                assert_eq!(flip_pattern(once, b, QuantFormat::Bf16), pattern);
            }
        }
        for pattern in 0..=0xFFu16 {
            for b in 0..8 {
                let once = flip_pattern(pattern, b, UNIT);
                assert_eq!(flip_pattern(once, b, UNIT), pattern);
            }
        }
    }

    #[test]
    fn int8_delta_is_exact() {
        // f32 scale times an 8-bit code uses at most 32 significand bits,
        // so decode is exact and delta arithmetic closes with no tolerance.
        let format = QuantFormat::Int8 { scale: 0.007_812_5 + f32::EPSILON };
        for pattern in 0..=0xFFu16 {
            let before = decode(pattern, format);
            for flip in enumerate_flips(pattern, format) {
                assert_eq!(before + flip.delta_w, flip.value_after);
            }
        }
    }

    #[test]
    fn nan_encode_is_canonical() {
        assert_eq!(encode_bf16(f64::NAN) & 0x7FFF, 0x7FC0);
    }

    #[test]
    fn exhaustive_bf16_round_trip_and_involution() {
        for pattern in 0..=u16::MAX {
            let value = decode(pattern, QuantFormat::Bf16);
            if value.is_nan() {
                // NaN patterns re-encode within the NaN class.
                assert!(decode(encode_bf16(value), QuantFormat::Bf16).is_nan());
            } else {
                assert_eq!(encode_bf16(value), pattern, "pattern {pattern:#06x}");
            }
            for b in 0..16 {
                let once = flip_pattern(pattern, b, QuantFormat::Bf16);
                assert_eq!(flip_pattern(once, b, QuantFormat::Bf16), pattern);
            }
        }
    }

    /// Knuth two-sum: s = fl(x + y) and the exact residue e with x + y = s + e.
    fn two_sum(x: f64, y: f64) -> (f64, f64) {
        let s = x + y;
        let bp = s - x;
        let e = (x - (s - bp)) + (y - bp);
        (s, e)
    }

    #[test]
    fn exhaustive_delta_add_back() {
        // Whenever the exact difference of the two decoded values is
        // representable in the f64 working precision, add-back closes with
        // zero tolerance. Single-bit exponent flips can span more dynamic
        // range than any fixed significand holds; those pairs stay within
        // one ulp. INT8 never hits the carve-out (f32 scale times an 8-bit
        // code is exact in f64).
        let mut exact_pairs = 0u32;
        let mut carved = 0u32;
        for pattern in 0..=u16::MAX {
            let before = decode(pattern, QuantFormat::Bf16);
            if !before.is_finite() {
                continue;
            }
            for flip in enumerate_flips(pattern, QuantFormat::Bf16) {
                if !flip.is_finite() {
                    continue;
                }
                let (diff, residue) = two_sum(flip.value_after, -before);
                assert_eq!(diff, flip.delta_w);
                if residue == 0.0 {
                    exact_pairs += 1;
                    assert_eq!(before + flip.delta_w, flip.value_after);
                } else {
                    carved += 1;
                    // The discrepancy is the rounding residue of the
                    // subtraction, sub-ulp relative to the larger endpoint.
                    let err = (before + flip.delta_w) - flip.value_after;
                    let scale = before.abs().max(flip.value_after.abs());
                    assert!(err.abs() <= scale * f64::EPSILON, "pattern for {before} -> {}", flip.value_after);
                }
            }
        }
        assert!(exact_pairs > 880_000, "exact pairs {exact_pairs}");
        assert!(carved < 165_000, "carved pairs {carved}");

        for scale in [1.0f32, 0.5, 0.0123, 3.7e-3, 127.0] {
            let format = QuantFormat::Int8 { scale };
            for pattern in 0..=0xFFu16 {
                let before = decode(pattern, format);
                for flip in enumerate_flips(pattern, format) {
                    let (diff, residue) = two_sum(flip.value_after, -before);
                    assert_eq!(residue, 0.0);
                    assert_eq!(diff, flip.delta_w);
                    assert_eq!(before + flip.delta_w, flip.value_after);
                }
            }
        }
    }

    #[test]
    fn quantize_int8_clamps_and_rounds() {
        let f = QuantFormat::Int8 { scale: 0.5 };
        assert_eq!(quantize(1.0, f), 2);
        assert_eq!(quantize(1e9, f), 127);
        assert_eq!(quantize(-1e9, f), (-127i8 as u8) as u16);
    }
}
