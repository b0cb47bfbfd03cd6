use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use splitwire::codec::CodecId;
use splitwire::ModelGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    MobileOnly,
    CloudOnly,
    Shared,
}

impl SessionMode {
    pub const ALL: [SessionMode; 3] = [SessionMode::MobileOnly, SessionMode::CloudOnly, SessionMode::Shared];

    pub fn name(self) -> &'static str {
        match self {
            SessionMode::MobileOnly => "mobile_only",
            SessionMode::CloudOnly => "cloud_only",
            SessionMode::Shared => "shared",
        }
    }
}

impl fmt::Display for SessionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SessionMode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSource {
    /// Cycles through `count` synthetic frames.
    Synthetic { seed: u64, count: usize },
    /// Cycles through the PGM/PPM files of a directory in name order.
    ImageDir { path: PathBuf },
}

/// Upload link of a simulated session.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub rate_kbps: f64,
    pub rtt_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub split_layer: String,
    #[serde(with = "codec_name")]
    pub codec: CodecId,
    pub mode: SessionMode,
    pub source: InputSource,
    /// Present only when the link is simulated.
    pub link: Option<LinkParams>,
}

/// Body of `POST /config`; absent fields keep their current value.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigUpdate {
    pub split_layer: Option<String>,
    pub codec: Option<String>,
    pub mode: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfigError {
    pub error: String,
    pub field: String,
    pub valid: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (valid: {})", self.error, self.valid.join(", "))
    }
}

impl std::error::Error for ConfigError {}

pub fn split_names(model: &ModelGraph) -> Vec<String> {
    model.split_points().iter().map(|&k| model.layers()[k].name.clone()).collect()
}

fn reject(field: &str, value: &str, valid: Vec<String>) -> ConfigError {
    ConfigError {
        error: format!("unknown {field} '{value}'"),
        field: field.into(),
        valid,
    }
}

impl SessionConfig {
    pub fn check_split(model: &ModelGraph, name: &str) -> Result<(), ConfigError> {
        let valid = split_names(model);
        if valid.iter().any(|v| v == name) {
            Ok(())
        } else {
            Err(reject("split_layer", name, valid))
        }
    }

    /// Applies `update` to a copy of `self`; nothing changes unless every
    /// field is valid.
    pub fn updated(&self, model: &ModelGraph, update: &ConfigUpdate) -> Result<SessionConfig, ConfigError> {
        let mut next = self.clone();
        if let Some(split) = &update.split_layer {
            Self::check_split(model, split)?;
            next.split_layer = split.clone();
        }
        if let Some(codec) = &update.codec {
            next.codec = codec
                .parse()
                .map_err(|_| reject("codec", codec, CodecId::ALL.iter().map(|c| c.name().to_string()).collect()))?;
        }
        if let Some(mode) = &update.mode {
            next.mode = mode
                .parse()
                .map_err(|_| reject("mode", mode, SessionMode::ALL.iter().map(|m| m.name().to_string()).collect()))?;
        }
        Ok(next)
    }
}

mod codec_name {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use splitwire::codec::CodecId;

    pub fn serialize<S: Serializer>(c: &CodecId, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(c.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CodecId, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| D::Error::custom(format!("unknown codec '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use splitwire::zoo::build_microresnet;

    fn base() -> SessionConfig {
        SessionConfig {
            split_layer: "b1_relu".into(),
            codec: CodecId::Float32Raw,
            mode: SessionMode::Shared,
            source: InputSource::Synthetic { seed: 1, count: 8 },
            link: None,
        }
    }

    #[test]
    fn serializes_with_wire_names() {
        let v = serde_json::to_value(base()).unwrap();
        assert_eq!(v["codec"], "f32");
        assert_eq!(v["mode"], "shared");
        assert_eq!(v["source"]["kind"], "synthetic");
        let back: SessionConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, base());
    }

    #[test]
    fn update_is_all_or_nothing() {
        let model = build_microresnet(42);
        let bad = ConfigUpdate {
            codec: Some("u8h".into()),
            mode: Some("hybrid".into()),
            ..Default::default()
        };
        let err = base().updated(&model, &bad).unwrap_err();
        assert_eq!(err.field, "mode");
        assert_eq!(err.valid, ["mobile_only", "cloud_only", "shared"]);

        let ok = ConfigUpdate {
            codec: Some("u8h".into()),
            split_layer: Some("b2_relu".into()),
            ..Default::default()
        };
        let next = base().updated(&model, &ok).unwrap();
        assert_eq!((next.codec, next.split_layer.as_str()), (CodecId::U8QuantHuffman, "b2_relu"));
    }

    #[test]
    fn unknown_split_lists_the_valid_ones() {
        let model = build_microresnet(42);
        let err = SessionConfig::check_split(&model, "b2_conv2").unwrap_err();
        assert_eq!(err.valid, split_names(&model));
        assert!(err.valid.contains(&"b3_relu".to_string()));
    }
}
