//! Duration and size values with unit suffixes for scenario files.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A duration in seconds. Parses `10us`, `1ms`, `2.5s`, `5min` or a bare
/// number of seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Seconds(pub f64);

impl FromStr for Seconds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let split = s.find(|c: char| c.is_ascii_alphabetic() || c == 'µ').unwrap_or(s.len());
        let (num, unit) = s.split_at(split);
        let value: f64 = num.trim().parse().map_err(|_| format!("invalid duration `{s}`"))?;
        // Sub-second units divide so that `100us` equals the literal `100e-6`.
        let (mul, div) = match unit.trim() {
            "" | "s" => (1.0, 1.0),
            "ms" => (1.0, 1e3),
            "us" | "µs" => (1.0, 1e6),
            "ns" => (1.0, 1e9),
            "min" => (60.0, 1.0),
            "h" => (3600.0, 1.0),
            other => return Err(format!("unknown duration unit `{other}` in `{s}`")),
        };
        if !value.is_finite() {
            return Err(format!("invalid duration `{s}`"));
        }
        Ok(Seconds(value * mul / div))
    }
}

impl fmt::Display for Seconds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.0)
    }
}

impl Seconds {
    /// Compact label such as `10ms` or `100us`, used in scheduler names.
    pub fn label(&self) -> String {
        let v = self.0;
        for (scale, unit) in [(60.0, "min"), (1.0, "s"), (1e-3, "ms"), (1e-6, "us"), (1e-9, "ns")] {
            let scaled = v / scale;
            if scaled >= 1.0 || unit == "ns" {
                let rounded = (scaled * 1e6).round() / 1e6;
                return format!("{rounded}{unit}");
            }
        }
        unreachable!()
    }
}

impl Serialize for Seconds {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

struct SecondsVisitor;

impl Visitor<'_> for SecondsVisitor {
    type Value = Seconds;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a duration such as \"500ms\" or a number of seconds")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Seconds, E> {
        Ok(Seconds(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Seconds, E> {
        Ok(Seconds(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Seconds, E> {
        Ok(Seconds(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Seconds, E> {
        v.parse().map_err(E::custom)
    }
}

impl<'de> Deserialize<'de> for Seconds {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(SecondsVisitor)
    }
}

/// A size in bytes (or bytes per second for speeds). Decimal units: `KB`,
/// `MB`, `GB`, `TB`; binary units `KiB`, `MiB`, `GiB`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Bytes(pub f64);

impl FromStr for Bytes {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let trimmed = s.strip_suffix("/s").unwrap_or(s);
        let split = trimmed.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(trimmed.len());
        let (num, unit) = trimmed.split_at(split);
        let value: f64 = num.trim().parse().map_err(|_| format!("invalid size `{s}`"))?;
        let scale = match unit.trim() {
            "" | "B" => 1.0,
            "KB" => 1e3,
            "MB" => 1e6,
            "GB" => 1e9,
            "TB" => 1e12,
            "KiB" => 1024.0,
            "MiB" => 1024.0 * 1024.0,
            "GiB" => 1024.0 * 1024.0 * 1024.0,
            other => return Err(format!("unknown size unit `{other}` in `{s}`")),
        };
        Ok(Bytes(value * scale))
    }
}

impl fmt::Display for Bytes {
    /// Uses the largest unit that represents the value exactly.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const UNITS: [(f64, &str); 7] = [
            (1e12, "TB"),
            (1024.0 * 1024.0 * 1024.0, "GiB"),
            (1e9, "GB"),
            (1024.0 * 1024.0, "MiB"),
            (1e6, "MB"),
            (1024.0, "KiB"),
            (1e3, "KB"),
        ];
        let v = self.0;
        if v != 0.0 {
            for (scale, unit) in UNITS {
                let q = v / scale;
                if q.abs() >= 1.0 && q.fract() == 0.0 && q * scale == v {
                    return write!(f, "{q}{unit}");
                }
            }
        }
        write!(f, "{v}B")
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

struct BytesVisitor;

impl Visitor<'_> for BytesVisitor {
    type Value = Bytes;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a size such as \"711MB\" or a number of bytes")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Bytes, E> {
        Ok(Bytes(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Bytes, E> {
        Ok(Bytes(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Bytes, E> {
        Ok(Bytes(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Bytes, E> {
        v.parse().map_err(E::custom)
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(BytesVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

/// A named-data access performed at the start of an execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataOp {
    pub item: String,
    #[serde(default = "default_access")]
    pub kind: AccessKind,
}

fn default_access() -> AccessKind {
    AccessKind::Read
}
