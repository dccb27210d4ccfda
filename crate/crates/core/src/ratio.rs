//! Serde helpers for reals written either as numbers or as `"p/q"` strings.

use serde::de::{self, Deserializer, Visitor};
use serde::Serializer;
use std::fmt;

/// Parses `"8/255"`, `"0.5"` or `"3"`.
pub fn parse_ratio(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let value = match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let den: f64 = den.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            if den == 0.0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            num / den
        }
        None => s.parse().map_err(|_| format!("not a number: {s:?}"))?,
    };
    if !value.is_finite() {
        return Err(format!("non-finite value {s:?}"));
    }
    Ok(value)
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(*v)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    struct RatioVisitor;

    impl Visitor<'_> for RatioVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number or a \"p/q\" string")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            parse_ratio(v).map_err(E::custom)
        }
    }

    d.deserialize_any(RatioVisitor)
}
