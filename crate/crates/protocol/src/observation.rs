use std::collections::BTreeSet;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Tensor,
    Text,
    TextImage,
    Image,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Tensor => "tensor",
            Modality::Text => "text",
            Modality::TextImage => "text_image",
            Modality::Image => "image",
        }
    }
}

/// Row-major RGB frame, `data.len() == height * width * 3`. Base64 on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: u32,
    pub width: u32,
    #[serde(with = "b64")]
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn is_consistent(&self) -> bool {
        self.data.len() == self.height as usize * self.width as usize * 3
    }

    pub fn pixel(&self, row: u32, col: u32) -> [u8; 3] {
        let i = (row as usize * self.width as usize + col as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// A paradigm-tagged observation. Only the fields implied by `modality` are
/// populated: `tensor` for tensor, `text` for text, `text` plus `images` for
/// text_image, a single entry in `images` for image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPayload {
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<RgbImage>>,
}

impl ObservationPayload {
    pub fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Self {
        ObservationPayload {
            modality: Modality::Tensor,
            shape: Some(shape),
            tensor: Some(data),
            text: None,
            images: None,
        }
    }

    pub fn text(text: impl Into<String>) -> Self {
        ObservationPayload {
            modality: Modality::Text,
            shape: None,
            tensor: None,
            text: Some(text.into()),
            images: None,
        }
    }

    pub fn text_image(text: impl Into<String>, images: Vec<RgbImage>) -> Self {
        ObservationPayload {
            modality: Modality::TextImage,
            shape: None,
            tensor: None,
            text: Some(text.into()),
            images: Some(images),
        }
    }

    pub fn image(frame: RgbImage) -> Self {
        ObservationPayload {
            modality: Modality::Image,
            shape: None,
            tensor: None,
            text: None,
            images: Some(vec![frame]),
        }
    }

    /// Checks that exactly the fields implied by the modality are present.
    pub fn validate(&self) -> Result<(), String> {
        let has_tensor = self.tensor.is_some() || self.shape.is_some();
        let has_text = self.text.is_some();
        let has_images = self.images.is_some();
        let expect = match self.modality {
            Modality::Tensor => (true, false, false),
            Modality::Text => (false, true, false),
            Modality::TextImage => (false, true, true),
            Modality::Image => (false, false, true),
        };
        if (has_tensor, has_text, has_images) != expect {
            return Err(format!(
                "modality {} requires tensor={} text={} images={}",
                self.modality.as_str(),
                expect.0,
                expect.1,
                expect.2
            ));
        }
        if let (Some(shape), Some(data)) = (&self.shape, &self.tensor) {
            let volume: usize = shape.iter().product();
            if volume != data.len() {
                return Err(format!("tensor has {} values but shape {shape:?}", data.len()));
            }
        } else if has_tensor {
            return Err("tensor requires both shape and values".into());
        }
        if let Some(images) = &self.images {
            if images.is_empty() {
                return Err("images must not be empty".into());
            }
            if self.modality == Modality::Image && images.len() != 1 {
                return Err("image modality carries exactly one frame".into());
            }
            if images.iter().any(|img| !img.is_consistent()) {
                return Err("image data length does not match its dimensions".into());
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("observation serializes");
        let text = canonical::to_string(&value);
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn frame_count(&self) -> usize {
        self.images.as_ref().map_or(0, Vec::len)
    }
}

/// Discrete action space `{0, .., n-1}` with optional labels and the index
/// the environment treats as "do nothing".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub n: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub null_action: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActionSpaceError {
    #[error("action space must have at least one action")]
    Empty,
    #[error("{labels} labels given for {n} actions")]
    LabelCount { n: u32, labels: usize },
    #[error("duplicate action label `{0}`")]
    DuplicateLabel(String),
    #[error("null action {null} outside 0..{n}")]
    NullOutOfRange { null: u32, n: u32 },
}

impl ActionSpace {
    pub fn new(n: u32, null_action: u32) -> Result<Self, ActionSpaceError> {
        let space = ActionSpace { n, labels: None, null_action };
        space.validate()?;
        Ok(space)
    }

    pub fn labeled<S: Into<String>>(
        labels: impl IntoIterator<Item = S>,
        null_action: u32,
    ) -> Result<Self, ActionSpaceError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let space = ActionSpace { n: labels.len() as u32, labels: Some(labels), null_action };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), ActionSpaceError> {
        if self.n == 0 {
            return Err(ActionSpaceError::Empty);
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.n as usize {
                return Err(ActionSpaceError::LabelCount { n: self.n, labels: labels.len() });
            }
            let mut seen = BTreeSet::new();
            for label in labels {
                if !seen.insert(label.to_ascii_lowercase()) {
                    return Err(ActionSpaceError::DuplicateLabel(label.clone()));
                }
            }
        }
        if self.null_action >= self.n {
            return Err(ActionSpaceError::NullOutOfRange { null: self.null_action, n: self.n });
        }
        Ok(())
    }

    pub fn contains(&self, action: u32) -> bool {
        action < self.n
    }

    /// Case-insensitive label lookup.
    pub fn index_of(&self, label: &str) -> Option<u32> {
        self.labels.as_ref()?.iter().position(|l| l.eq_ignore_ascii_case(label)).map(|i| i as u32)
    }

    pub fn label(&self, action: u32) -> Option<&str> {
        self.labels.as_ref()?.get(action as usize).map(String::as_str)
    }
}

pub(crate) fn encode_b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub(crate) fn decode_b64(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    base64::engine::general_purpose::STANDARD.decode(text.as_bytes())
}
