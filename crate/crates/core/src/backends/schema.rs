//! Registry of agent output schemas.
//!
//! Each schema is enforced by deserializing into the owning module's typed
//! struct and then running that type's invariant checks.

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::evaluator::EvaluationReport;
use crate::guidance::{GuidancePacket, JudgeScore, TrajectoryAnalysis};
use crate::memory::StoreId;
use crate::orchestrator::{CreativityAssessment, NegativePrompt, RefinedPrompt, SemanticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    Creativity,
    Intent,
    Refine,
    Negative,
    Evaluation,
    TrajectoryAnalysis,
    GuidanceGen,
    GuidanceEdit,
    Judge,
}

impl SchemaId {
    pub const ALL: [SchemaId; 9] = [
        SchemaId::Creativity,
        SchemaId::Intent,
        SchemaId::Refine,
        SchemaId::Negative,
        SchemaId::Evaluation,
        SchemaId::TrajectoryAnalysis,
        SchemaId::GuidanceGen,
        SchemaId::GuidanceEdit,
        SchemaId::Judge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemaId::Creativity => "creativity",
            SchemaId::Intent => "intent",
            SchemaId::Refine => "refine",
            SchemaId::Negative => "negative",
            SchemaId::Evaluation => "evaluation",
            SchemaId::TrajectoryAnalysis => "trajectory_analysis",
            SchemaId::GuidanceGen => "guidance_gen",
            SchemaId::GuidanceEdit => "guidance_edit",
            SchemaId::Judge => "judge",
        }
    }
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemaId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemaId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| format!("unknown schema id {s:?}"))
    }
}

/// Implemented by every typed agent output.
pub(crate) trait Checked: DeserializeOwned {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

pub(crate) fn parse_checked<T: Checked>(v: &Value) -> Result<T, String> {
    let parsed: T = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
    parsed.check()?;
    Ok(parsed)
}

/// Returns `Ok` iff `v` satisfies the named schema.
pub fn validate_schema(id: SchemaId, v: &Value) -> Result<(), String> {
    match id {
        SchemaId::Creativity => parse_checked::<CreativityAssessment>(v).map(drop),
        SchemaId::Intent => parse_checked::<SemanticSpec>(v).map(drop),
        SchemaId::Refine => parse_checked::<RefinedPrompt>(v).map(drop),
        SchemaId::Negative => parse_checked::<NegativePrompt>(v).map(drop),
        SchemaId::Evaluation => parse_checked::<EvaluationReport>(v).map(drop),
        SchemaId::TrajectoryAnalysis => parse_checked::<TrajectoryAnalysis>(v).map(drop),
        SchemaId::GuidanceGen => {
            parse_checked::<GuidancePacket>(v).and_then(|p| p.check_kind(StoreId::Gen))
        }
        SchemaId::GuidanceEdit => {
            parse_checked::<GuidancePacket>(v).and_then(|p| p.check_kind(StoreId::Edit))
        }
        SchemaId::Judge => parse_checked::<JudgeScore>(v).map(drop),
    }
}

// Lenient scalar readers. Models routinely emit `"8"` for 8, `null` for "",
// or a list where a sentence was asked for.

pub(crate) fn lenient_string<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    Ok(value_to_text(&Value::deserialize(d)?))
}

pub(crate) fn value_to_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::Array(items) => items
            .iter()
            .map(value_to_text)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("; "),
        Value::Object(_) => v.to_string(),
    }
}

pub(crate) fn lenient_f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = Value::deserialize(d)?;
    value_to_f64(&v).ok_or_else(|| serde::de::Error::custom(format!("expected a number, got {v}")))
}

pub(crate) fn value_to_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => {
            let t = s.trim();
            let t = t.split('/').next().unwrap_or(t).trim();
            t.parse::<f64>().ok()
        }
        _ => None,
    }
    .filter(|x| x.is_finite())
}

pub(crate) fn lenient_string_list<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    let v = Value::deserialize(d)?;
    Ok(match v {
        Value::Null => Vec::new(),
        Value::Array(items) => items
            .iter()
            .map(value_to_text)
            .filter(|s| !s.is_empty())
            .collect(),
        other => {
            let s = value_to_text(&other);
            if s.is_empty() {
                Vec::new()
            } else {
                vec![s]
            }
        }
    })
}
