//! The TVD1 activation-dump container and the in-memory activation model.
//!
//! Layout, little-endian throughout:
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 0..4         | magic `TVD1`                             |
//! | 4..8         | format version, `u32` = 1                |
//! | 8..16        | header length `H`, `u64`                 |
//! | 16..16+H     | UTF-8 JSON header                        |
//! | 16+H..       | raw `f32` payload, row-major             |
//!
//! Activation payloads are indexed `[condition][statement][layer][dim]`.
//! Unembedding payloads (header `role: "unembedding"`) are `[vocab][dim]`.
//!
//! Layers are 0-based in this API; report files number them from 1.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TVD1";
pub const FORMAT_VERSION: u32 = 1;
/// Magic + version + header length.
pub const PREAMBLE_LEN: usize = 16;

const ROLE_UNEMBEDDING: &str = "unembedding";

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"TVD1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (expected 1)")]
    UnsupportedVersion(u32),
    #[error("size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype {0:?} (only \"f32\")")]
    Dtype(String),
    #[error("wrong container role: expected {expected}, found {found}")]
    WrongRole { expected: String, found: String },
    #[error("non-finite value {value} at flat index {index} (condition {condition}, statement {statement}, layer {layer}, dim {dim})")]
    NonFinite {
        value: f32,
        index: usize,
        condition: usize,
        statement: usize,
        layer: usize,
        dim: usize,
    },
    #[error("non-finite value {value} in unembedding matrix at row {row}, dim {dim}")]
    NonFiniteUnembedding { value: f32, row: usize, dim: usize },
    #[error("duplicate statement id {0:?}")]
    DuplicateStatementId(String),
    #[error("duplicate condition {0}")]
    DuplicateCondition(ConditionLabel),
    #[error("missing condition {0}")]
    MissingCondition(ConditionLabel),
    #[error("invalid shape: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, DumpError>;

/// Which completion the model was instructed to produce, after mapping the
/// selected choice through the ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TruthSide {
    True,
    False,
}

/// What, if anything, was placed in the prompt's context slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContextKind {
    None,
    Relevant,
    RandChar,
    RandWord,
    RandSalad,
    RandWiki,
    RandShuffle,
}

impl ContextKind {
    pub const RANDOM: [ContextKind; 5] = [
        ContextKind::RandChar,
        ContextKind::RandWord,
        ContextKind::RandSalad,
        ContextKind::RandWiki,
        ContextKind::RandShuffle,
    ];

    /// Short column name used in comparison tables.
    pub fn short_name(self) -> &'static str {
        match self {
            ContextKind::None => "none",
            ContextKind::Relevant => "relevant",
            ContextKind::RandChar => "char",
            ContextKind::RandWord => "word",
            ContextKind::RandSalad => "salad",
            ContextKind::RandWiki => "wiki",
            ContextKind::RandShuffle => "shuffle",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        [ContextKind::None, ContextKind::Relevant]
            .into_iter()
            .chain(ContextKind::RANDOM)
            .find(|k| k.short_name() == s)
    }
}

impl std::fmt::Display for ContextKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub truth_side: TruthSide,
    pub context_kind: ContextKind,
}

impl ConditionLabel {
    pub const fn new(truth_side: TruthSide, context_kind: ContextKind) -> Self {
        Self { truth_side, context_kind }
    }

    /// True/False × None/Relevant, in canonical order.
    pub const BASE: [ConditionLabel; 4] = [
        ConditionLabel::new(TruthSide::True, ContextKind::None),
        ConditionLabel::new(TruthSide::False, ContextKind::None),
        ConditionLabel::new(TruthSide::True, ContextKind::Relevant),
        ConditionLabel::new(TruthSide::False, ContextKind::Relevant),
    ];

    pub fn is_base(&self) -> bool {
        matches!(self.context_kind, ContextKind::None | ContextKind::Relevant)
    }
}

impl std::fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let side = match self.truth_side {
            TruthSide::True => "true",
            TruthSide::False => "false",
        };
        write!(f, "{side}/{}", self.context_kind)
    }
}

/// Every residual-stream activation for one dataset × model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    model_name: String,
    n_layers: usize,
    hidden_dim: usize,
    statement_ids: Vec<String>,
    conditions: Vec<ConditionLabel>,
    tensor: Vec<f32>,
    /// `[condition][statement]`
    instruction_ok: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct ActivationHeader {
    model_name: String,
    n_layers: usize,
    hidden_dim: usize,
    statement_ids: Vec<String>,
    conditions: Vec<ConditionLabel>,
    dtype: String,
    instruction_ok: Vec<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<String>,
}

impl ActivationSet {
    pub fn new(
        model_name: impl Into<String>,
        n_layers: usize,
        hidden_dim: usize,
        statement_ids: Vec<String>,
        conditions: Vec<ConditionLabel>,
        tensor: Vec<f32>,
        instruction_ok: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let set = Self {
            model_name: model_name.into(),
            n_layers,
            hidden_dim,
            statement_ids,
            conditions,
            tensor,
            instruction_ok,
        };
        set.validate()?;
        Ok(set)
    }

    /// Same as [`ActivationSet::new`] with every instruction-following flag set.
    pub fn with_all_ok(
        model_name: impl Into<String>,
        n_layers: usize,
        hidden_dim: usize,
        statement_ids: Vec<String>,
        conditions: Vec<ConditionLabel>,
        tensor: Vec<f32>,
    ) -> Result<Self> {
        let mask = vec![vec![true; statement_ids.len()]; conditions.len()];
        Self::new(model_name, n_layers, hidden_dim, statement_ids, conditions, tensor, mask)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_dim == 0 {
            return Err(DumpError::Shape(format!(
                "n_layers and hidden_dim must be positive (got {} and {})",
                self.n_layers, self.hidden_dim
            )));
        }
        let mut seen = HashSet::new();
        for id in &self.statement_ids {
            if !seen.insert(id.as_str()) {
                return Err(DumpError::DuplicateStatementId(id.clone()));
            }
        }
        let mut seen = HashSet::new();
        for c in &self.conditions {
            if !seen.insert(*c) {
                return Err(DumpError::DuplicateCondition(*c));
            }
        }
        for base in ConditionLabel::BASE {
            if !seen.contains(&base) {
                return Err(DumpError::MissingCondition(base));
            }
        }
        let expected = self.expected_len().ok_or_else(|| {
            DumpError::Shape("tensor element count overflows".to_string())
        })?;
        if self.tensor.len() != expected {
            return Err(DumpError::Shape(format!(
                "tensor has {} elements, expected {} = {} conditions x {} statements x {} layers x {} dims",
                self.tensor.len(),
                expected,
                self.conditions.len(),
                self.statement_ids.len(),
                self.n_layers,
                self.hidden_dim
            )));
        }
        if self.instruction_ok.len() != self.conditions.len()
            || self.instruction_ok.iter().any(|row| row.len() != self.statement_ids.len())
        {
            return Err(DumpError::Shape(format!(
                "instruction_ok must be {} x {}",
                self.conditions.len(),
                self.statement_ids.len()
            )));
        }
        if let Some(index) = self.tensor.iter().position(|v| !v.is_finite()) {
            let d = self.hidden_dim;
            let l = self.n_layers;
            let k = self.statement_ids.len();
            return Err(DumpError::NonFinite {
                value: self.tensor[index],
                index,
                condition: index / (k * l * d),
                statement: (index / (l * d)) % k,
                layer: (index / d) % l,
                dim: index % d,
            });
        }
        Ok(())
    }

    fn expected_len(&self) -> Option<usize> {
        self.conditions
            .len()
            .checked_mul(self.statement_ids.len())?
            .checked_mul(self.n_layers)?
            .checked_mul(self.hidden_dim)
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn n_statements(&self) -> usize {
        self.statement_ids.len()
    }

    pub fn statement_ids(&self) -> &[String] {
        &self.statement_ids
    }

    pub fn conditions(&self) -> &[ConditionLabel] {
        &self.conditions
    }

    pub fn tensor(&self) -> &[f32] {
        &self.tensor
    }

    pub fn instruction_ok(&self) -> &[Vec<bool>] {
        &self.instruction_ok
    }

    pub fn condition_index(&self, label: ConditionLabel) -> Option<usize> {
        self.conditions.iter().position(|c| *c == label)
    }

    pub fn require_condition(&self, label: ConditionLabel) -> Result<usize> {
        self.condition_index(label).ok_or(DumpError::MissingCondition(label))
    }

    /// True when both truth sides are present for `kind`.
    pub fn has_context(&self, kind: ContextKind) -> bool {
        [TruthSide::True, TruthSide::False]
            .into_iter()
            .all(|side| self.condition_index(ConditionLabel::new(side, kind)).is_some())
    }

    /// Flat element offset of `(condition, statement, layer, 0)`.
    pub fn offset(&self, condition: usize, statement: usize, layer: usize) -> usize {
        ((condition * self.statement_ids.len() + statement) * self.n_layers + layer) * self.hidden_dim
    }

    /// The `hidden_dim` activation vector. Panics on out-of-range indices.
    pub fn vector(&self, condition: usize, statement: usize, layer: usize) -> &[f32] {
        assert!(condition < self.conditions.len(), "condition {condition} out of range");
        assert!(statement < self.statement_ids.len(), "statement {statement} out of range");
        assert!(layer < self.n_layers, "layer {layer} out of range");
        let start = self.offset(condition, statement, layer);
        &self.tensor[start..start + self.hidden_dim]
    }

    /// Keep exactly the statements that followed instructions in all four
    /// base prompts, in their original order.
    pub fn filter_instruction_following(&self) -> ActivationSet {
        let base_rows: Vec<usize> = ConditionLabel::BASE
            .iter()
            .filter_map(|b| self.condition_index(*b))
            .collect();
        let keep: Vec<usize> = (0..self.n_statements())
            .filter(|&k| base_rows.iter().all(|&c| self.instruction_ok[c][k]))
            .collect();
        self.select_statements(&keep)
    }

    /// Sub-set restricted to the given statement indices, in the given order.
    pub fn select_statements(&self, keep: &[usize]) -> ActivationSet {
        let block = self.n_layers * self.hidden_dim;
        let mut tensor = Vec::with_capacity(self.conditions.len() * keep.len() * block);
        for c in 0..self.conditions.len() {
            for &k in keep {
                let start = self.offset(c, k, 0);
                tensor.extend_from_slice(&self.tensor[start..start + block]);
            }
        }
        ActivationSet {
            model_name: self.model_name.clone(),
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            statement_ids: keep.iter().map(|&k| self.statement_ids[k].clone()).collect(),
            conditions: self.conditions.clone(),
            tensor,
            instruction_ok: self
                .instruction_ok
                .iter()
                .map(|row| keep.iter().map(|&k| row[k]).collect())
                .collect(),
        }
    }

    fn header(&self) -> ActivationHeader {
        ActivationHeader {
            model_name: self.model_name.clone(),
            n_layers: self.n_layers,
            hidden_dim: self.hidden_dim,
            statement_ids: self.statement_ids.clone(),
            conditions: self.conditions.clone(),
            dtype: "f32".to_string(),
            instruction_ok: self.instruction_ok.clone(),
            role: None,
        }
    }

    /// Serialize to TVD1 bytes. Refuses sets that violate their invariants.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header()).map_err(|e| DumpError::Header(e.to_string()))?;
        Ok(encode_container(&header, &self.tensor))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header_bytes, payload) = split_container(bytes)?;
        let value: serde_json::Value =
            serde_json::from_slice(header_bytes).map_err(|e| DumpError::Header(e.to_string()))?;
        if let Some(role) = value.get("role").and_then(|r| r.as_str()) {
            if role != "activations" {
                return Err(DumpError::WrongRole { expected: "activations".into(), found: role.into() });
            }
        }
        let header: ActivationHeader =
            serde_json::from_value(value).map_err(|e| DumpError::Header(e.to_string()))?;
        check_dtype(&header.dtype)?;
        let elements = header
            .conditions
            .len()
            .checked_mul(header.statement_ids.len())
            .and_then(|n| n.checked_mul(header.n_layers))
            .and_then(|n| n.checked_mul(header.hidden_dim))
            .ok_or_else(|| DumpError::Header("declared sizes overflow".into()))?;
        let tensor = decode_payload(payload, elements)?;
        Self::new(
            header.model_name,
            header.n_layers,
            header.hidden_dim,
            header.statement_ids,
            header.conditions,
            tensor,
            header.instruction_ok,
        )
    }
}

/// Write `set` to `path` in TVD1 format.
pub fn write_dump(set: &ActivationSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = set.to_bytes()?;
    write_file(path.as_ref(), &bytes)
}

/// Read and validate a TVD1 activation dump.
pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationSet> {
    ActivationSet::from_bytes(&fs::read(path)?)
}

/// Optional normalization applied to an activation before projecting it
/// through the unembedding matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalNorm {
    /// `x / sqrt(mean(x²) + eps) * weight`
    Rms { eps: f64, weight: Vec<f32> },
    /// `(x − mean) / sqrt(var + eps) * weight + bias`
    Layer { eps: f64, weight: Vec<f32>, bias: Vec<f32> },
}

impl FinalNorm {
    pub fn dim(&self) -> usize {
        match self {
            FinalNorm::Rms { weight, .. } | FinalNorm::Layer { weight, .. } => weight.len(),
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f64> {
        let n = x.len() as f64;
        match self {
            FinalNorm::Rms { eps, weight } => {
                let ms = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / n;
                let inv = 1.0 / (ms + eps).sqrt();
                x.iter().zip(weight).map(|(&v, &w)| f64::from(v) * inv * f64::from(w)).collect()
            }
            FinalNorm::Layer { eps, weight, bias } => {
                let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
                let var = x.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                x.iter()
                    .zip(weight)
                    .zip(bias)
                    .map(|((&v, &w), &b)| (f64::from(v) - mean) * inv * f64::from(w) + f64::from(b))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceTokens {
    #[serde(rename = "true")]
    pub true_token: usize,
    #[serde(rename = "false")]
    pub false_token: usize,
}

/// Output unembedding matrix plus the vocabulary ids of the two choice tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingBundle {
    vocab_size: usize,
    hidden_dim: usize,
    /// `[vocab][hidden]`
    matrix: Vec<f32>,
    token_ids: ChoiceTokens,
    final_norm: Option<FinalNorm>,
}

#[derive(Serialize, Deserialize)]
struct UnembeddingHeader {
    role: String,
    vocab_size: usize,
    hidden_dim: usize,
    dtype: String,
    token_ids: ChoiceTokens,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    final_norm: Option<FinalNorm>,
}

impl UnembeddingBundle {
    pub fn new(
        vocab_size: usize,
        hidden_dim: usize,
        matrix: Vec<f32>,
        token_ids: ChoiceTokens,
    ) -> Result<Self> {
        let bundle = Self { vocab_size, hidden_dim, matrix, token_ids, final_norm: None };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn with_final_norm(mut self, norm: FinalNorm) -> Result<Self> {
        self.final_norm = Some(norm);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_dim == 0 {
            return Err(DumpError::Shape("vocab_size and hidden_dim must be positive".into()));
        }
        if self.matrix.len() != self.vocab_size * self.hidden_dim {
            return Err(DumpError::Shape(format!(
                "unembedding has {} elements, expected {} x {}",
                self.matrix.len(),
                self.vocab_size,
                self.hidden_dim
            )));
        }
        for (name, id) in [("true", self.token_ids.true_token), ("false", self.token_ids.false_token)] {
            if id >= self.vocab_size {
                return Err(DumpError::Shape(format!(
                    "{name} token id {id} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        if let Some(norm) = &self.final_norm {
            let ok = match norm {
                FinalNorm::Rms { weight, .. } => weight.len() == self.hidden_dim,
                FinalNorm::Layer { weight, bias, .. } => {
                    weight.len() == self.hidden_dim && bias.len() == self.hidden_dim
                }
            };
            if !ok {
                return Err(DumpError::Shape("final_norm parameters must have hidden_dim entries".into()));
            }
        }
        if let Some(i) = self.matrix.iter().position(|v| !v.is_finite()) {
            return Err(DumpError::NonFiniteUnembedding {
                value: self.matrix[i],
                row: i / self.hidden_dim,
                dim: i % self.hidden_dim,
            });
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.matrix[token * self.hidden_dim..(token + 1) * self.hidden_dim]
    }

    pub fn token_ids(&self) -> ChoiceTokens {
        self.token_ids
    }

    pub fn final_norm(&self) -> Option<&FinalNorm> {
        self.final_norm.as_ref()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = UnembeddingHeader {
            role: ROLE_UNEMBEDDING.to_string(),
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            dtype: "f32".to_string(),
            token_ids: self.token_ids,
            final_norm: self.final_norm.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| DumpError::Header(e.to_string()))?;
        Ok(encode_container(&header, &self.matrix))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header_bytes, payload) = split_container(bytes)?;
        let value: serde_json::Value =
            serde_json::from_slice(header_bytes).map_err(|e| DumpError::Header(e.to_string()))?;
        let role = value.get("role").and_then(|r| r.as_str()).unwrap_or("activations");
        if role != ROLE_UNEMBEDDING {
            return Err(DumpError::WrongRole { expected: ROLE_UNEMBEDDING.into(), found: role.into() });
        }
        let header: UnembeddingHeader =
            serde_json::from_value(value).map_err(|e| DumpError::Header(e.to_string()))?;
        check_dtype(&header.dtype)?;
        let elements = header
            .vocab_size
            .checked_mul(header.hidden_dim)
            .ok_or_else(|| DumpError::Header("declared sizes overflow".into()))?;
        let matrix = decode_payload(payload, elements)?;
        let bundle = Self {
            vocab_size: header.vocab_size,
            hidden_dim: header.hidden_dim,
            matrix,
            token_ids: header.token_ids,
            final_norm: header.final_norm,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn write_unembedding(bundle: &UnembeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    write_file(path.as_ref(), &bytes)
}

pub fn read_unembedding(path: impl AsRef<Path>) -> Result<UnembeddingBundle> {
    UnembeddingBundle::from_bytes(&fs::read(path)?)
}

fn check_dtype(dtype: &str) -> Result<()> {
    if dtype == "f32" {
        Ok(())
    } else {
        Err(DumpError::Dtype(dtype.to_string()))
    }
}

fn encode_container(header: &[u8], payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn split_container(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    if bytes.len() < PREAMBLE_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(DumpError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(DumpError::SizeMismatch {
            expected: PREAMBLE_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(DumpError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DumpError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - PREAMBLE_LEN) as u64;
    if header_len > available {
        return Err(DumpError::SizeMismatch {
            expected: (PREAMBLE_LEN as u64).saturating_add(header_len),
            actual: bytes.len() as u64,
        });
    }
    let header_end = PREAMBLE_LEN + header_len as usize;
    Ok((&bytes[PREAMBLE_LEN..header_end], &bytes[header_end..]))
}

fn decode_payload(payload: &[u8], elements: usize) -> Result<Vec<f32>> {
    let expected = elements as u64 * 4;
    if payload.len() as u64 != expected {
        return Err(DumpError::SizeMismatch { expected, actual: payload.len() as u64 });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn small_set(k: usize, l: usize, d: usize) -> ActivationSet {
        let conds = ConditionLabel::BASE.to_vec();
        let n = conds.len() * k * l * d;
        let tensor = (0..n).map(|i| i as f32 * 0.25 - 3.0).collect();
        ActivationSet::with_all_ok("toy", l, d, ids(k), conds, tensor).unwrap()
    }

    #[test]
    fn round_trip_bytes_identical() {
        let set = small_set(2, 2, 3);
        let bytes = set.to_bytes().unwrap();
        let back = ActivationSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn duplicate_statement_ids_refused() {
        let conds = ConditionLabel::BASE.to_vec();
        let err = ActivationSet::with_all_ok(
            "toy",
            1,
            1,
            vec!["a".into(), "a".into()],
            conds,
            vec![0.0; 8],
        )
        .unwrap_err();
        assert!(matches!(err, DumpError::DuplicateStatementId(id) if id == "a"));
    }

    #[test]
    fn minimal_container_layout() {
        // One condition is below the base-condition invariant, so hand-build
        // the container to check the byte arithmetic of the format itself.
        let header = br#"{"k":1}"#;
        let bytes = encode_container(header, &[0.5]);
        assert_eq!(bytes.len(), PREAMBLE_LEN + header.len() + 4);
        assert_eq!(&bytes[0..4], b"TVD1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &(header.len() as u64).to_le_bytes());
        assert_eq!(&bytes[16..16 + header.len()], header);
        // 0.5f32 = 0x3F000000
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x00, 0x3F]);
    }

    #[test]
    fn smallest_valid_set_file_size() {
        // 4 base conditions x 1 statement x 1 layer x dim 1.
        let set = ActivationSet::with_all_ok(
            "m",
            1,
            1,
            vec!["s".into()],
            ConditionLabel::BASE.to_vec(),
            vec![0.5; 4],
        )
        .unwrap();
        let header = serde_json::to_vec(&set.header()).unwrap();
        let bytes = set.to_bytes().unwrap();
        assert_eq!(bytes.len(), 16 + header.len() + 4 * 4);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = small_set(1, 1, 1).to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(ActivationSet::from_bytes(&bytes), Err(DumpError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn truncated_payload_names_counts() {
        let bytes = small_set(2, 2, 3).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match ActivationSet::from_bytes(cut) {
            Err(DumpError::SizeMismatch { expected, actual }) => {
                assert_eq!(expected, 4 * 2 * 2 * 3 * 4);
                assert_eq!(actual, expected - 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = small_set(1, 1, 1).to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(ActivationSet::from_bytes(&bytes), Err(DumpError::UnsupportedVersion(2))));
    }

    #[test]
    fn non_finite_reported_with_index() {
        let set = small_set(2, 2, 3);
        let mut bytes = set.to_bytes().unwrap();
        // element (condition 1, statement 1, layer 0, dim 2)
        let index = set.offset(1, 1, 0) + 2;
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let at = PREAMBLE_LEN + header_len + index * 4;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        match ActivationSet::from_bytes(&bytes) {
            Err(DumpError::NonFinite { index: i, condition, statement, layer, dim, .. }) => {
                assert_eq!((i, condition, statement, layer, dim), (index, 1, 1, 0, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn filter_keeps_passing_statements_in_order() {
        let mut set = small_set(5, 1, 2);
        // statements 1 and 3 fail in one base condition each
        set.instruction_ok[2][1] = false;
        set.instruction_ok[1][3] = false;
        let f = set.filter_instruction_following();
        assert_eq!(f.statement_ids(), &["s0", "s2", "s4"]);
        assert_eq!(f.vector(0, 1, 0), set.vector(0, 2, 0));
        assert_eq!(f.vector(3, 2, 0), set.vector(3, 4, 0));
        assert_eq!(f.filter_instruction_following(), f);
    }

    #[test]
    fn filter_all_pass_is_identity() {
        let set = small_set(3, 2, 2);
        assert_eq!(set.filter_instruction_following(), set);
    }

    #[test]
    fn filter_ignores_random_context_rows() {
        let mut conds = ConditionLabel::BASE.to_vec();
        conds.push(ConditionLabel::new(TruthSide::True, ContextKind::RandChar));
        conds.push(ConditionLabel::new(TruthSide::False, ContextKind::RandChar));
        let mut set =
            ActivationSet::with_all_ok("m", 1, 1, ids(2), conds, vec![1.0; 12]).unwrap();
        set.instruction_ok[4][0] = false;
        assert_eq!(set.filter_instruction_following().n_statements(), 2);
    }

    #[test]
    fn unembedding_round_trip_and_role_check() {
        let bundle = UnembeddingBundle::new(
            3,
            2,
            vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5],
            ChoiceTokens { true_token: 0, false_token: 2 },
        )
        .unwrap()
        .with_final_norm(FinalNorm::Rms { eps: 1e-5, weight: vec![1.0, 2.0] })
        .unwrap();
        let bytes = bundle.to_bytes().unwrap();
        assert_eq!(UnembeddingBundle::from_bytes(&bytes).unwrap(), bundle);
        assert!(matches!(ActivationSet::from_bytes(&bytes), Err(DumpError::WrongRole { .. })));
        let act = small_set(1, 1, 2).to_bytes().unwrap();
        assert!(matches!(UnembeddingBundle::from_bytes(&act), Err(DumpError::WrongRole { .. })));
    }

    #[test]
    fn unembedding_token_out_of_range() {
        let err = UnembeddingBundle::new(2, 1, vec![0.0, 1.0], ChoiceTokens { true_token: 0, false_token: 2 })
            .unwrap_err();
        assert!(matches!(err, DumpError::Shape(_)));
    }
}
