//! Multimodal image evaluation and score aggregation.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::agent::AgentContext;
use crate::backends::schema::{lenient_f64, lenient_string, lenient_string_list, Checked};
use crate::backends::{ImageArtifact, SchemaId};
use crate::error::{Error, Result};
use crate::guidance::NodeGuidance;
use crate::prompts::{SlotMap, TemplateId};

pub const AESTHETIC_KEYS: [&str; 6] = [
    "Composition",
    "Color Harmony",
    "Lighting & Exposure",
    "Focus & Sharpness",
    "Emotional Impact",
    "Uniqueness & Creativity",
];

pub const ALIGNMENT_KEYS: [&str; 4] = [
    "Presence of Main Subjects",
    "Accuracy of Spatial Relationships",
    "Adherence to Style Requirements",
    "Background Representation",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AestheticScores {
    #[serde(rename = "Composition", deserialize_with = "lenient_f64")]
    pub composition: f64,
    #[serde(rename = "Color Harmony", deserialize_with = "lenient_f64")]
    pub color_harmony: f64,
    #[serde(rename = "Lighting & Exposure", deserialize_with = "lenient_f64")]
    pub lighting_exposure: f64,
    #[serde(rename = "Focus & Sharpness", deserialize_with = "lenient_f64")]
    pub focus_sharpness: f64,
    #[serde(rename = "Emotional Impact", deserialize_with = "lenient_f64")]
    pub emotional_impact: f64,
    #[serde(rename = "Uniqueness & Creativity", deserialize_with = "lenient_f64")]
    pub uniqueness_creativity: f64,
}

impl AestheticScores {
    pub fn uniform(v: f64) -> Self {
        Self::from_array([v; 6])
    }

    /// Values in [`AESTHETIC_KEYS`] order.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.composition,
            self.color_harmony,
            self.lighting_exposure,
            self.focus_sharpness,
            self.emotional_impact,
            self.uniqueness_creativity,
        ]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            composition: v[0],
            color_harmony: v[1],
            lighting_exposure: v[2],
            focus_sharpness: v[3],
            emotional_impact: v[4],
            uniqueness_creativity: v[5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentScores {
    #[serde(rename = "Presence of Main Subjects", deserialize_with = "lenient_f64")]
    pub main_subjects: f64,
    #[serde(rename = "Accuracy of Spatial Relationships", deserialize_with = "lenient_f64")]
    pub spatial_relationships: f64,
    #[serde(rename = "Adherence to Style Requirements", deserialize_with = "lenient_f64")]
    pub style: f64,
    #[serde(rename = "Background Representation", deserialize_with = "lenient_f64")]
    pub background: f64,
}

impl AlignmentScores {
    pub fn uniform(v: f64) -> Self {
        Self::from_array([v; 4])
    }

    /// Values in [`ALIGNMENT_KEYS`] order.
    pub fn to_array(&self) -> [f64; 4] {
        [
            self.main_subjects,
            self.spatial_relationships,
            self.style,
            self.background,
        ]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            main_subjects: v[0],
            spatial_relationships: v[1],
            style: v[2],
            background: v[3],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    #[serde(default, deserialize_with = "lenient_string_list")]
    pub detected_artifacts: Vec<String>,
    #[serde(default, deserialize_with = "lenient_string")]
    pub artifact_reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(default, deserialize_with = "lenient_string")]
    pub aesthetic_reasoning: String,
    pub aesthetic_score: AestheticScores,
    #[serde(default, deserialize_with = "lenient_string")]
    pub alignment_reasoning: String,
    pub alignment_score: AlignmentScores,
    #[serde(default)]
    pub artifacts: Artifacts,
    pub main_subjects_present: bool,
    #[serde(default, deserialize_with = "lenient_string_list")]
    pub missing_elements: Vec<String>,
    #[serde(default, deserialize_with = "lenient_string")]
    pub improvement_suggestions: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub overall_reasoning: String,
}

impl Checked for EvaluationReport {
    fn check(&self) -> std::result::Result<(), String> {
        let named = AESTHETIC_KEYS
            .iter()
            .zip(self.aesthetic_score.to_array())
            .chain(ALIGNMENT_KEYS.iter().zip(self.alignment_score.to_array()));
        for (key, v) in named {
            if !(0.0..=10.0).contains(&v) {
                return Err(format!("score {key:?} = {v} is outside [0, 10]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub aesthetic_mean: f64,
    pub alignment_mean: f64,
    pub overall: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unweighted mean per dimension, then the mean of the two dimensions.
pub fn summarize(report: &EvaluationReport) -> ScoreSummary {
    let aesthetic_mean = mean(&report.aesthetic_score.to_array());
    let alignment_mean = mean(&report.alignment_score.to_array());
    ScoreSummary {
        aesthetic_mean,
        alignment_mean,
        overall: (aesthetic_mean + alignment_mean) / 2.0,
    }
}

/// True iff the image scores strictly below the threshold.
pub fn needs_edit(s: &ScoreSummary, tau: f64) -> bool {
    s.overall < tau
}

/// Scores `img` against the original prompt (interpolated into the
/// template) and the refined prompt (sent with the image).
pub fn evaluate_image(
    ctx: &AgentContext,
    img: &ImageArtifact,
    original: &str,
    refined: &str,
    g: &NodeGuidance,
) -> Result<EvaluationReport> {
    img.validate()?;
    if original.trim().is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let slots: SlotMap = [
        ("original_prompt".to_string(), original.to_string()),
        ("user_clarification".to_string(), String::new()),
    ]
    .into_iter()
    .collect();
    ctx.call(
        TemplateId::Eval,
        SchemaId::Evaluation,
        &slots,
        &json!({ "original_prompt": original, "refined_prompt": refined }),
        Some(g),
        &[&img.bytes],
    )
}
