//! Serde adapter for optional values whose default is `Some`: `None` is
//! stored as the string `"none"` so it survives formats without a null.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => x.serialize(s),
        None => s.serialize_str("none"),
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr<T> {
    Value(T),
    Word(String),
    Null(()),
}

pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Option<T>, D::Error> {
    match Repr::<T>::deserialize(d)? {
        Repr::Value(v) => Ok(Some(v)),
        Repr::Word(w) if w == "none" => Ok(None),
        Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a value or \"none\", got {w:?}"))),
        Repr::Null(()) => Ok(None),
    }
}
