//! Execution trace of a single workflow run.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::backends::ImageArtifact;
use crate::error::Error;
use crate::evaluator::{EvaluationReport, ScoreSummary};
use crate::guidance::GuidancePacket;
use crate::orchestrator::PromptBundle;

/// A point in the workflow where an agent takes a recorded action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecisionNode {
    Creativity,
    Intent,
    Refine,
    Negative,
    Generate,
    Edit,
    Evaluate,
    EditDecision,
}

impl DecisionNode {
    pub const ALL: [DecisionNode; 8] = [
        DecisionNode::Creativity,
        DecisionNode::Intent,
        DecisionNode::Refine,
        DecisionNode::Negative,
        DecisionNode::Generate,
        DecisionNode::Edit,
        DecisionNode::Evaluate,
        DecisionNode::EditDecision,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DecisionNode::Creativity => "s_cre",
            DecisionNode::Intent => "s_int",
            DecisionNode::Refine => "s_ref",
            DecisionNode::Negative => "s_neg",
            DecisionNode::Generate => "s_gen.generate",
            DecisionNode::Edit => "s_gen.edit",
            DecisionNode::Evaluate => "a_eval",
            DecisionNode::EditDecision => "engine.edit_decision",
        }
    }
}

impl fmt::Display for DecisionNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecisionNode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        DecisionNode::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownNode(s.to_string()))
    }
}

impl Serialize for DecisionNode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for DecisionNode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: usize,
    pub node: DecisionNode,
    /// 0 for the initial pass, n for the n-th edit cycle.
    pub cycle: u32,
    pub inputs: Value,
    pub outputs: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub file: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub guidance_scale: f64,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRef {
    pub id: i64,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub active: bool,
    pub gen_hits: Vec<HitRef>,
    pub edit_hits: Vec<HitRef>,
    pub gen_packet: Option<GuidancePacket>,
    pub edit_packet: Option<GuidancePacket>,
}

/// Append-only record of everything a run did, in execution order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FullRunTrace {
    pub run_id: String,
    pub prompt: String,
    pub seed: u64,
    pub config: Value,
    pub guidance: GuidanceRecord,
    pub events: Vec<TraceEvent>,
    pub images: Vec<ImageRecord>,
    pub bundle: Option<PromptBundle>,
    pub reports: Vec<EvaluationReport>,
    pub summaries: Vec<ScoreSummary>,
    pub edits_used: u32,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub artifacts: Vec<Arc<ImageArtifact>>,
}

impl FullRunTrace {
    pub fn new(run_id: &str, prompt: &str, seed: u64, config: Value) -> Self {
        Self {
            run_id: run_id.to_string(),
            prompt: prompt.to_string(),
            seed,
            config,
            ..Default::default()
        }
    }

    pub fn record(
        &mut self,
        node: DecisionNode,
        cycle: u32,
        inputs: Value,
        outputs: Value,
        score: Option<f64>,
    ) {
        let seq = self.events.len();
        self.events.push(TraceEvent {
            seq,
            node,
            cycle,
            inputs,
            outputs,
            score,
        });
    }

    /// Registers an image and returns its index.
    pub fn push_image(&mut self, img: Arc<ImageArtifact>) -> usize {
        let index = self.images.len();
        let parent = img.parent.as_ref().and_then(|p| {
            self.artifacts
                .iter()
                .position(|a| Arc::ptr_eq(a, p))
        });
        self.images.push(ImageRecord {
            index,
            file: format!("intermediate_{index}.png"),
            sha256: img.sha256_hex(),
            width: img.width,
            height: img.height,
            seed: img.seed,
            positive_prompt: img.positive_prompt.clone(),
            negative_prompt: img.negative_prompt.clone(),
            guidance_scale: img.guidance_scale,
            parent,
        });
        self.artifacts.push(img);
        index
    }

    pub fn count(&self, node: DecisionNode) -> usize {
        self.events.iter().filter(|e| e.node == node).count()
    }

    pub fn last_summary(&self) -> Option<&ScoreSummary> {
        self.summaries.last()
    }

    pub fn last_report(&self) -> Option<&EvaluationReport> {
        self.reports.last()
    }
}
