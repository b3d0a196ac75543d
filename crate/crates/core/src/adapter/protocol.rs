//! Newline-delimited JSON messages exchanged with an external model process.
//!
//! Tensors travel as `{"shape":[...],"dtype":"f32"|"u8","data":<base64 of
//! little-endian values>}`. Images are sent as `u8` rasters of shape
//! `[H, W, 3]` and masks come back as `u8` rasters of shape `[H, W]`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataio::{Mask, RgbImage};
use crate::error::{Error, Result};
use crate::prompting::{PromptJson, PromptSet};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    EncodeImage,
    EncodeText,
    FeatureGradients,
    Segment,
}

impl Op {
    const NAMES: [&'static str; 4] = ["encode_image", "encode_text", "feature_gradients", "segment"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(&self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: String,
}

impl WireTensor {
    fn element_count(shape: &[usize]) -> usize {
        shape.iter().product()
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        if Self::element_count(&shape) != values.len() {
            return Err(Error::dim(format!("shape {shape:?} does not hold {} values", values.len())));
        }
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Ok(Self { shape, dtype: DType::F32, data: STANDARD.encode(bytes) })
    }

    pub fn from_u8(shape: Vec<usize>, values: &[u8]) -> Result<Self> {
        if Self::element_count(&shape) != values.len() {
            return Err(Error::dim(format!("shape {shape:?} does not hold {} values", values.len())));
        }
        Ok(Self { shape, dtype: DType::U8, data: STANDARD.encode(values) })
    }

    pub fn from_image(image: &RgbImage) -> Self {
        Self {
            shape: vec![image.height(), image.width(), 3],
            dtype: DType::U8,
            data: STANDARD.encode(image.data()),
        }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            shape: vec![mask.height(), mask.width()],
            dtype: DType::U8,
            data: STANDARD.encode(mask.to_bytes()),
        }
    }

    /// Decoded payload, checked against shape and dtype.
    pub fn bytes(&self) -> Result<Vec<u8>> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| Error::Base64(e.to_string()))?;
        let expected = Self::element_count(&self.shape) * self.dtype.size();
        if bytes.len() != expected {
            return Err(Error::PayloadLength { expected, got: bytes.len() });
        }
        Ok(bytes)
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        if self.dtype != DType::F32 {
            return Err(Error::Protocol(format!("expected an f32 tensor, got {:?}", self.dtype)));
        }
        Ok(self
            .bytes()?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn to_u8(&self) -> Result<Vec<u8>> {
        if self.dtype != DType::U8 {
            return Err(Error::Protocol(format!("expected a u8 tensor, got {:?}", self.dtype)));
        }
        self.bytes()
    }

    pub fn to_image(&self) -> Result<RgbImage> {
        match self.shape.as_slice() {
            &[h, w, 3] => RgbImage::new(w, h, self.to_u8()?),
            s => Err(Error::Protocol(format!("image tensor must be [H, W, 3], got {s:?}"))),
        }
    }

    /// Mask of the expected size; any other shape is a dimension mismatch.
    pub fn to_mask(&self, width: usize, height: usize) -> Result<Mask> {
        match self.shape.as_slice() {
            &[h, w] if h == height && w == width => Mask::from_bytes(width, height, &self.to_u8()?),
            &[h, w] => Err(Error::DimMismatch { want_w: width, want_h: height, got_w: w, got_h: h }),
            s => Err(Error::Protocol(format!("mask tensor must be [H, W], got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub v: u64,
    pub op: Op,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<WireTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PromptJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Response {
    pub v: u64,
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<WireTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<WireTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradients: Option<WireTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<WireTensor>,
}

impl Request {
    pub fn segment(id: impl Into<String>, image: &RgbImage, prompts: &PromptSet) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            op: Op::Segment,
            id: id.into(),
            image: Some(WireTensor::from_image(image)),
            caption: None,
            prompts: Some(prompts.to_json()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v != PROTOCOL_VERSION {
            return Err(Error::ProtocolVersion(self.v));
        }
        let need = |present: bool, field: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::Protocol(format!("{:?} request without `{field}`", self.op)))
            }
        };
        match self.op {
            Op::EncodeImage => need(self.image.is_some(), "image")?,
            Op::EncodeText => need(self.caption.is_some(), "caption")?,
            Op::FeatureGradients => {
                need(self.image.is_some(), "image")?;
                need(self.caption.is_some(), "caption")?;
            }
            Op::Segment => {
                need(self.image.is_some(), "image")?;
                need(self.prompts.is_some(), "prompts")?;
            }
        }
        if let Some(t) = &self.image {
            t.bytes()?;
        }
        if let Some(p) = &self.prompts {
            PromptSet::from_json(p)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string(self)?)
    }

    pub fn decode(line: &str) -> Result<Self> {
        let value = parse_versioned(line)?;
        if let Some(op) = value.get("op") {
            let name = op.as_str().unwrap_or_default();
            if !Op::NAMES.contains(&name) {
                return Err(Error::UnknownOp(op.to_string().trim_matches('"').to_string()));
            }
        }
        let req: Request = serde_json::from_value(value).map_err(|e| Error::Protocol(e.to_string()))?;
        req.validate()?;
        Ok(req)
    }
}

impl Response {
    pub fn success(id: impl Into<String>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id: id.into(),
            ok: true,
            error: None,
            embedding: None,
            features: None,
            gradients: None,
            mask: None,
        }
    }

    pub fn failure(id: impl Into<String>, error: impl Into<String>) -> Self {
        Self { ok: false, error: Some(error.into()), ..Self::success(id) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v != PROTOCOL_VERSION {
            return Err(Error::ProtocolVersion(self.v));
        }
        if self.ok == self.error.is_some() {
            return Err(Error::Protocol("`error` must be present exactly when ok is false".into()));
        }
        for t in [&self.embedding, &self.features, &self.gradients, &self.mask].into_iter().flatten() {
            t.bytes()?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string(self)?)
    }

    pub fn decode(line: &str) -> Result<Self> {
        let resp: Response =
            serde_json::from_value(parse_versioned(line)?).map_err(|e| Error::Protocol(e.to_string()))?;
        resp.validate()?;
        Ok(resp)
    }
}

/// Parses one JSON object and checks its `v` field before anything else.
fn parse_versioned(line: &str) -> Result<Value> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Protocol(e.to_string()))?;
    match value.get("v").map(Value::as_u64) {
        Some(Some(PROTOCOL_VERSION)) => Ok(value),
        Some(Some(v)) => Err(Error::ProtocolVersion(v)),
        _ => Err(Error::Protocol("missing or non-integer `v`".into())),
    }
}

/// Best-effort id of a request line, used to answer requests that failed to decode.
pub fn peek_id(line: &str) -> String {
    serde_json::from_str::<Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_default()
}
