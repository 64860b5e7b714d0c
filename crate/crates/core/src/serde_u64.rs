//! TOML integers are signed 64-bit, so seeds above `i64::MAX` are written as
//! decimal strings. Both forms are accepted on input.

use serde::{de, Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
    match i64::try_from(*v) {
        Ok(i) => s.serialize_i64(i),
        Err(_) => s.serialize_str(&v.to_string()),
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(u64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Int(v) => Ok(v),
        Repr::Text(t) => t.parse().map_err(de::Error::custom),
    }
}
