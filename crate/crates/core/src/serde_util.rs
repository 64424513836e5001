//! Serde adapters for non-finite floating-point values.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// `f64` where JSON `null` stands for positive infinity (a disabled noise
/// source, for instance).
pub mod inf_as_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DbRepr {
    Finite(f64),
    Sentinel(String),
}

/// Decibel values: finite numbers as JSON numbers, infinities as the strings
/// `"inf"` / `"-inf"` and NaN as `"nan"`.
pub mod db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        let repr = if v.is_finite() {
            DbRepr::Finite(*v)
        } else if v.is_nan() {
            DbRepr::Sentinel("nan".into())
        } else if *v > 0.0 {
            DbRepr::Sentinel("inf".into())
        } else {
            DbRepr::Sentinel("-inf".into())
        };
        repr.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match DbRepr::deserialize(d)? {
            DbRepr::Finite(v) => Ok(v),
            DbRepr::Sentinel(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!(
                    "expected a number or inf sentinel, got {other:?}"
                ))),
            },
        }
    }
}
