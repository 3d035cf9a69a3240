//! Serde helpers for extended reals: JSON has no infinity, so `±inf` is
//! written as the strings `"inf"` / `"-inf"` and finite values as numbers.

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Str(String),
}

fn to_repr(v: f64) -> Repr {
    if v == f64::INFINITY {
        Repr::Str("inf".into())
    } else if v == f64::NEG_INFINITY {
        Repr::Str("-inf".into())
    } else {
        Repr::Num(v)
    }
}

fn from_repr<E: de::Error>(r: Repr) -> Result<f64, E> {
    match r {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) => match s.as_str() {
            "inf" | "+inf" | "Infinity" => Ok(f64::INFINITY),
            "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
            other => Err(E::custom(format!("invalid extended real {other:?}"))),
        },
    }
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    to_repr(*v).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    from_repr(Repr::deserialize(d)?)
}

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|x| to_repr(*x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(from_repr)
            .collect()
    }
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(to_repr).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Wrap {
        #[serde(with = "super")]
        x: f64,
        #[serde(with = "super::vec")]
        xs: Vec<f64>,
        #[serde(with = "super::option")]
        o: Option<f64>,
    }

    #[test]
    fn infinity_survives_json() {
        let w = Wrap {
            x: f64::INFINITY,
            xs: vec![1.5, f64::INFINITY, -2.0],
            o: Some(f64::NEG_INFINITY),
        };
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, r#"{"x":"inf","xs":[1.5,"inf",-2.0],"o":"-inf"}"#);
        assert_eq!(serde_json::from_str::<Wrap>(&s).unwrap(), w);
    }
}
