//! Prompt preprocessing: creativity analysis, intention analysis, prompt
//! refinement and adaptive negative prompting, plus the edit-instruction
//! rewrite used inside the evaluate/edit loop.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::agent::AgentContext;
use crate::backends::schema::{lenient_string, lenient_string_list, Checked};
use crate::backends::{ChatMessage, ChatRequest, SchemaId};
use crate::error::{Error, Result};
use crate::evaluator::EvaluationReport;
use crate::guidance::NodeGuidance;
use crate::prompts::{render, SlotMap, TemplateId, Templates};
use crate::trace::DecisionNode;

/// Terms always present in the negative prompt.
pub const UNIVERSAL_SAFEGUARDS: [&str; 4] = ["low quality", "blurry", "distorted", "watermark"];

/// User-message text sent when a template has no task payload.
pub const EMPTY_PAYLOAD_TEXT: &str = "Return the JSON response for the task described above.";

const EDIT_TASK: &str = "The image generated from previous_refined_prompt was judged below the \
quality threshold. Rewrite it as the instruction for an image-editing model that corrects the \
current image: address every improvement suggestion and missing element, keep everything that is \
already correct, and keep all original subjects.";

macro_rules! lenient_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }, $ser:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl TryFrom<String> for $name {
            type Error = String;

            fn try_from(s: String) -> std::result::Result<Self, String> {
                let t = s.trim();
                $(if t.eq_ignore_ascii_case($text) {
                    return Ok($name::$variant);
                })+
                Err(format!("{t:?} is not one of {}", $ser))
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.as_str().to_string()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

lenient_enum!(CreativityLevel { Low => "LOW", Medium => "MEDIUM", High => "HIGH" }, "LOW|MEDIUM|HIGH");
lenient_enum!(DetailLevel { Low => "low", Medium => "medium", High => "high" }, "low|medium|high");
lenient_enum!(Specificity { Vague => "vague", Moderate => "moderate", Precise => "precise" }, "vague|moderate|precise");
lenient_enum!(ArtisticFreedom { Constrained => "constrained", Balanced => "balanced", Open => "open" }, "constrained|balanced|open");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCharacteristics {
    pub detail_level: DetailLevel,
    pub specificity: Specificity,
    pub artistic_freedom: ArtisticFreedom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreativityAssessment {
    #[serde(rename = "creativity_level")]
    pub level: CreativityLevel,
    #[serde(deserialize_with = "lenient_string")]
    pub reasoning: String,
    #[serde(rename = "prompt_characteristics")]
    pub characteristics: PromptCharacteristics,
}

impl Checked for CreativityAssessment {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct References {
    #[serde(default)]
    pub content: Vec<Map<String, Value>>,
    #[serde(default, deserialize_with = "lenient_string")]
    pub style: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedElements {
    /// Entity → attribute maps, optionally with a `spatial_relationships` entry.
    #[serde(default)]
    pub main_subjects: Vec<Map<String, Value>>,
    #[serde(default, deserialize_with = "lenient_string")]
    pub background: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub composition: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub color_harmony: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub lighting: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub focus_sharpness: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub emotional_impact: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub uniqueness_creativity: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub visual_style: String,
    #[serde(default)]
    pub references: References,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ambiguity {
    #[serde(deserialize_with = "lenient_string")]
    pub element: String,
    #[serde(deserialize_with = "lenient_string")]
    pub reason: String,
    #[serde(default, deserialize_with = "lenient_string_list")]
    pub suggested_questions: Vec<String>,
    #[serde(default, deserialize_with = "lenient_string")]
    pub creative_fill: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticSpec {
    pub identified_elements: IdentifiedElements,
    #[serde(default)]
    pub ambiguous_elements: Vec<Ambiguity>,
}

impl Checked for SemanticSpec {
    fn check(&self) -> std::result::Result<(), String> {
        for (i, a) in self.ambiguous_elements.iter().enumerate() {
            if a.element.trim().is_empty() || a.reason.trim().is_empty() {
                return Err(format!(
                    "ambiguous_elements[{i}] must have a non-empty element and reason"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedPrompt {
    #[serde(rename = "refined_prompt", deserialize_with = "lenient_string")]
    pub text: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub reasoning: String,
}

impl Checked for RefinedPrompt {
    fn check(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("refined_prompt must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativePrompt {
    #[serde(rename = "negative_prompt", deserialize_with = "lenient_string")]
    pub text: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub reasoning: String,
}

impl Checked for NegativePrompt {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub original: String,
    pub creativity: CreativityAssessment,
    pub spec: SemanticSpec,
    pub positive: RefinedPrompt,
    pub negative: NegativePrompt,
}

/// Builds the request for one agent call.
///
/// The system message is the static workflow guidance, then the corrective
/// guidance when non-empty, then the template with its slots substituted,
/// separated by blank lines. The user message carries `payload` as pretty
/// JSON (or [`EMPTY_PAYLOAD_TEXT`] when there is none). Without `guidance`
/// the system message is the rendered template alone.
pub fn assemble_agent_prompt(
    templates: &Templates,
    template: TemplateId,
    slots: &SlotMap,
    payload: &Value,
    guidance: Option<&NodeGuidance>,
) -> Result<ChatRequest> {
    if template == TemplateId::WorkflowGuidance {
        return Err(Error::UnknownTemplate(format!(
            "{template} is a guidance asset, not an agent template"
        )));
    }
    let body = render(templates.get(template), slots)?;
    let mut sections: Vec<&str> = Vec::with_capacity(3);
    if let Some(g) = guidance {
        sections.push(g.workflow_text.trim_end());
        if !g.corrective_text.trim().is_empty() {
            sections.push(g.corrective_text.trim_end());
        }
    }
    sections.push(body.trim_end());
    let system = format!("{}\n", sections.join("\n\n"));

    let user = match payload {
        Value::Null => EMPTY_PAYLOAD_TEXT.to_string(),
        Value::Object(m) if m.is_empty() => EMPTY_PAYLOAD_TEXT.to_string(),
        other => serde_json::to_string_pretty(other).expect("JSON value serializes"),
    };
    let mut req = ChatRequest::new(vec![ChatMessage::system(system), ChatMessage::user(user)]);
    req.tag = Some(template.stem().to_string());
    Ok(req)
}

/// Splits a comma-separated negative prompt into normalized terms.
pub fn negative_terms(text: &str) -> Vec<String> {
    text.split([',', '\n', ';'])
        .map(|t| t.trim().trim_end_matches('.').trim())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// `safeguards ∪ terms(llm_text)`: safeguards first, then the model's terms,
/// deduplicated case-insensitively with first occurrence kept.
pub fn merge_negative(safeguards: &[String], llm_text: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let candidates = safeguards
        .iter()
        .map(|s| s.trim().to_string())
        .chain(negative_terms(llm_text));
    for term in candidates {
        if !term.is_empty() && seen.insert(term.to_lowercase()) {
            out.push(term);
        }
    }
    out.join(", ")
}

/// The four preprocessing sub-agents.
#[derive(Clone)]
pub struct Orchestrator {
    ctx: AgentContext,
    safeguards: Vec<String>,
}

impl Orchestrator {
    pub fn new(ctx: AgentContext) -> Self {
        Self {
            ctx,
            safeguards: UNIVERSAL_SAFEGUARDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_safeguards(mut self, safeguards: Vec<String>) -> Self {
        self.safeguards = safeguards;
        self
    }

    pub fn safeguards(&self) -> &[String] {
        &self.safeguards
    }

    pub fn context(&self) -> &AgentContext {
        &self.ctx
    }

    pub fn assess_creativity(&self, prompt: &str, g: &NodeGuidance) -> Result<CreativityAssessment> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        self.ctx.call(
            TemplateId::SCre,
            SchemaId::Creativity,
            &SlotMap::new(),
            &json!({ "prompt": prompt }),
            Some(g),
            &[],
        )
    }

    pub fn analyze_intent(
        &self,
        prompt: &str,
        c: &CreativityAssessment,
        g: &NodeGuidance,
    ) -> Result<SemanticSpec> {
        self.ctx.call(
            TemplateId::SInt,
            SchemaId::Intent,
            &SlotMap::new(),
            &json!({ "prompt": prompt, "creativity_level": c.level }),
            Some(g),
            &[],
        )
    }

    pub fn refine_prompt(
        &self,
        prompt: &str,
        level: CreativityLevel,
        spec: &SemanticSpec,
        g: &NodeGuidance,
    ) -> Result<RefinedPrompt> {
        self.ctx.call(
            TemplateId::SRef,
            SchemaId::Refine,
            &SlotMap::new(),
            &json!({
                "prompt": prompt,
                "creativity_level": level,
                "semantic_analysis": spec,
            }),
            Some(g),
            &[],
        )
    }

    /// Calls the negative-prompt agent and enforces the universal safeguards.
    pub fn build_negative_prompt(
        &self,
        prompt: &str,
        refined: &RefinedPrompt,
        g: &NodeGuidance,
    ) -> Result<NegativePrompt> {
        let raw: NegativePrompt = self.ctx.call(
            TemplateId::SNeg,
            SchemaId::Negative,
            &SlotMap::new(),
            &json!({ "prompt": prompt, "refined_prompt": refined.text }),
            Some(g),
            &[],
        )?;
        Ok(NegativePrompt {
            text: merge_negative(&self.safeguards, &raw.text),
            reasoning: raw.reasoning,
        })
    }

    /// Runs the four sub-agents in order. `guidance` supplies the injected
    /// guidance for each node.
    pub fn preprocess(
        &self,
        prompt: &str,
        guidance: &dyn Fn(DecisionNode) -> NodeGuidance,
    ) -> Result<PromptBundle> {
        let creativity = self.assess_creativity(prompt, &guidance(DecisionNode::Creativity))?;
        let spec = self.analyze_intent(prompt, &creativity, &guidance(DecisionNode::Intent))?;
        let positive =
            self.refine_prompt(prompt, creativity.level, &spec, &guidance(DecisionNode::Refine))?;
        let negative = self.build_negative_prompt(prompt, &positive, &guidance(DecisionNode::Negative))?;
        Ok(PromptBundle {
            original: prompt.to_string(),
            creativity,
            spec,
            positive,
            negative,
        })
    }

    /// Re-runs refinement and negative prompting with the evaluator's
    /// feedback, producing the instruction for the edit model. `bundle`
    /// carries the prompts used for the image being corrected. When the report
    /// has no suggestions, missing elements or artifacts, the prior prompts
    /// are returned unchanged without calling the model.
    pub fn synthesize_edit_instruction(
        &self,
        bundle: &PromptBundle,
        report: &EvaluationReport,
        g_ref: &NodeGuidance,
        g_neg: &NodeGuidance,
    ) -> Result<(RefinedPrompt, NegativePrompt)> {
        let artifacts = &report.artifacts.detected_artifacts;
        if report.improvement_suggestions.trim().is_empty()
            && report.missing_elements.is_empty()
            && artifacts.is_empty()
        {
            return Ok((bundle.positive.clone(), bundle.negative.clone()));
        }
        let positive: RefinedPrompt = self.ctx.call(
            TemplateId::SRef,
            SchemaId::Refine,
            &SlotMap::new(),
            &json!({
                "prompt": bundle.original,
                "creativity_level": bundle.creativity.level,
                "semantic_analysis": bundle.spec,
                "previous_refined_prompt": bundle.positive.text,
                "improvement_suggestions": report.improvement_suggestions,
                "missing_elements": report.missing_elements,
                "detected_artifacts": artifacts,
                "task": EDIT_TASK,
            }),
            Some(g_ref),
            &[],
        )?;
        let raw: NegativePrompt = self.ctx.call(
            TemplateId::SNeg,
            SchemaId::Negative,
            &SlotMap::new(),
            &json!({
                "prompt": bundle.original,
                "refined_prompt": positive.text,
                "previous_negative_prompt": bundle.negative.text,
                "detected_artifacts": artifacts,
            }),
            Some(g_neg),
            &[],
        )?;
        let negative = NegativePrompt {
            text: merge_negative(&self.safeguards, &raw.text),
            reasoning: raw.reasoning,
        };
        Ok((positive, negative))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{eval_reply, MockChat};
    use crate::backends::{validate_schema, Role};
    use std::sync::Arc;

    fn orchestrator(chat: Arc<MockChat>) -> Orchestrator {
        Orchestrator::new(AgentContext::new(
            chat,
            Arc::new(Templates::builtin()),
            Default::default(),
        ))
    }

    fn guidance() -> NodeGuidance {
        NodeGuidance::static_only(Templates::builtin().workflow_guidance())
    }

    fn safeguards() -> Vec<String> {
        UNIVERSAL_SAFEGUARDS.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn system_message_order_without_corrective_guidance() {
        let t = Templates::builtin();
        let g = guidance();
        let req = assemble_agent_prompt(&t, TemplateId::SCre, &SlotMap::new(), &json!({"prompt": "a cat"}), Some(&g)).unwrap();
        let sys = req.system_text();
        let expected = format!(
            "{}\n\n{}\n",
            t.workflow_guidance().trim_end(),
            t.get(TemplateId::SCre).trim_end()
        );
        assert_eq!(sys, expected);
        assert_eq!(req.messages[1].role, Role::User);
        assert!(req.user_text().contains("\"prompt\": \"a cat\""));
        assert_eq!(req.tag.as_deref(), Some("s_cre"));
    }

    #[test]
    fn corrective_guidance_precedes_template() {
        let t = Templates::builtin();
        let g = NodeGuidance {
            workflow_text: t.workflow_guidance().to_string(),
            corrective_text: "PREVENT: avoid clocks not at 10:10".into(),
        };
        let req = assemble_agent_prompt(&t, TemplateId::SCre, &SlotMap::new(), &Value::Null, Some(&g)).unwrap();
        let sys = req.system_text();
        let wf = sys.find("WORKFLOW GUIDANCE").unwrap();
        let corr = sys.find("PREVENT: avoid clocks").unwrap();
        let body = sys.find("You are an expert at analyzing image generation prompts").unwrap();
        assert!(wf < corr && corr < body);
        assert_eq!(req.user_text(), EMPTY_PAYLOAD_TEXT);
    }

    #[test]
    fn unbound_placeholder_is_missing_slot() {
        let t = Templates::builtin();
        let err = assemble_agent_prompt(&t, TemplateId::JudgeGroup, &SlotMap::new(), &Value::Null, None).unwrap_err();
        assert!(matches!(err, Error::MissingSlot(ref s) if s == "query"));
        let err = assemble_agent_prompt(&t, TemplateId::WorkflowGuidance, &SlotMap::new(), &Value::Null, None).unwrap_err();
        assert!(matches!(err, Error::UnknownTemplate(_)));
    }

    // Replies copied from the creativity template's own examples.
    const CRE_CAT: &str = r#"{
    "creativity_level": "HIGH",
    "reasoning": "Extremely brief prompt with no details about breed, color, pose, setting, lighting, or style. System must autonomously determine all visual elements and composition.",
    "prompt_characteristics": {"detail_level": "low", "specificity": "vague", "artistic_freedom": "open"}
}"#;
    const CRE_MARKET: &str = r#"{
    "creativity_level": "MEDIUM",
    "reasoning": "Prompt has clear subject and basic activity but leaves many specifics undefined (architecture style, time of day, types of goods, clothing styles, weather, atmosphere). Contains 11 words with moderate detail level.",
    "prompt_characteristics": {"detail_level": "medium", "specificity": "moderate", "artistic_freedom": "balanced"}
}"#;
    const CRE_HEADSHOT: &str = r#"{
    "creativity_level": "LOW",
    "reasoning": "Extremely detailed prompt (24 words) with explicit specifications for subject, age, hair length, hair color, clothing, background color, lighting setup and direction. Almost all creative decisions have been predetermined.",
    "prompt_characteristics": {"detail_level": "high", "specificity": "precise", "artistic_freedom": "constrained"}
}"#;
    const HEADSHOT: &str = "Professional headshot of a 30-year-old woman with shoulder-length brown hair, wearing a navy blue blazer, neutral beige background, studio lighting with soft key light from left side";
    const MARKET: &str = "A medieval marketplace with people shopping and vendors selling goods";

    #[test]
    fn creativity_examples_parse() {
        let chat = Arc::new(MockChat::new());
        chat.script("s_cre", [CRE_CAT, CRE_MARKET, CRE_HEADSHOT]);
        let o = orchestrator(chat.clone());
        let g = guidance();
        assert_eq!(o.assess_creativity("a cat", &g).unwrap().level, CreativityLevel::High);
        assert_eq!(o.assess_creativity(MARKET, &g).unwrap().level, CreativityLevel::Medium);
        let low = o.assess_creativity(HEADSHOT, &g).unwrap();
        assert_eq!(low.level, CreativityLevel::Low);
        assert_eq!(low.characteristics.artistic_freedom, ArtisticFreedom::Constrained);
        // the prompt travels verbatim in the user payload
        assert!(chat.requests()[2].user_text().contains(HEADSHOT));
    }

    #[test]
    fn default_mock_rubric_agrees_with_examples() {
        let o = orchestrator(Arc::new(MockChat::new()));
        let g = guidance();
        assert_eq!(o.assess_creativity("a cat", &g).unwrap().level, CreativityLevel::High);
        assert_eq!(o.assess_creativity(MARKET, &g).unwrap().level, CreativityLevel::Medium);
        assert_eq!(o.assess_creativity(HEADSHOT, &g).unwrap().level, CreativityLevel::Low);
        assert!(matches!(o.assess_creativity("  ", &g), Err(Error::EmptyPrompt)));
    }

    const INT_DRESS: &str = r#"{
    "identified_elements": {
        "main_subjects": [
            {
                "person": "red dress",
            }
        ],
        "background": "",
        "composition": "",
        "color_harmony": "",
        "lighting": "",
        "focus_sharpness": "",
        "emotional_impact": "",
        "uniqueness_creativity": "",
        "visual_style": "",
        "references": {
            "content": [],
            "style": ""
        }
    },
    "ambiguous_elements": [
        {
            "element": "person",
            "reason": "Unspecified details such as gender, age, or pose",
            "suggested_questions": [
                "What is the gender of the person?",
                "What age group does the person belong to?",
                "What pose is the person in?"
            ],
            "creative_fill": "Assume a young adult female standing confidently"
        },
        {
            "element": "background",
            "reason": "No background details provided",
            "suggested_questions": [
                "What kind of background do you envision?",
                "Is there a specific setting or location for the photo?"
            ],
            "creative_fill": "A simple, neutral background to highlight the subject"
        }
    ]
}"#;

    const INT_APPLE_AMBIGUITY: &str = r#"{
    "identified_elements": {
        "main_subjects": [{"apple": "shiny object", "keyboard": "computer keyboard", "spatial_relationships": "apple positioned next to keyboard on desk surface"}],
        "background": "desk environment",
        "visual_style": "contemporary photography",
        "references": {"content": [], "style": ""}
    },
    "ambiguous_elements": [
        {
            "element": "apple",
            "reason": "Could refer to either the fruit or an Apple product (like an Apple mouse or AirPods)",
            "suggested_questions": ["Is this referring to the fruit apple or an Apple technology product?"],
            "creative_fill": "Red fruit apple - while the desk/keyboard setting might suggest tech, without specific tech-related context, assume the natural fruit"
        }
    ]
}"#;

    #[test]
    fn intent_examples_parse() {
        let chat = Arc::new(MockChat::new());
        chat.script("s_int", [INT_DRESS, INT_APPLE_AMBIGUITY]);
        let o = orchestrator(chat.clone());
        let g = guidance();
        let medium: CreativityAssessment = serde_json::from_str(CRE_MARKET).unwrap();
        let spec = o.analyze_intent("A photo of a person in a red dress", &medium, &g).unwrap();
        let person = &spec.ambiguous_elements[0];
        assert_eq!(person.element, "person");
        assert_eq!(person.creative_fill, "Assume a young adult female standing confidently");
        assert_eq!(spec.identified_elements.main_subjects[0]["person"], "red dress");

        let spec = o.analyze_intent("A shiny apple sitting on a desk next to a keyboard", &medium, &g).unwrap();
        assert_eq!(spec.ambiguous_elements[0].element, "apple");
        assert!(spec.ambiguous_elements[0].creative_fill.starts_with("Red fruit apple"));
        assert!(chat.requests()[0].user_text().contains("\"creativity_level\": \"MEDIUM\""));
    }

    #[test]
    fn intent_allows_empty_ambiguities_but_not_blank_elements() {
        let ok = json!({"identified_elements": {"main_subjects": []}, "ambiguous_elements": []});
        assert!(validate_schema(SchemaId::Intent, &ok).is_ok());
        let bad = json!({"identified_elements": {}, "ambiguous_elements": [{"element": "", "reason": "x"}]});
        assert!(validate_schema(SchemaId::Intent, &bad).is_err());
    }

    #[test]
    fn refined_prompt_preserves_reference_directory() {
        let chat = Arc::new(MockChat::new());
        chat.script("s_ref", [r#"{"refined_prompt": "A corgi in the style of ./refs/style_01.png, sitting on grass", "reasoning": "kept the reference directory"}"#]);
        let o = orchestrator(chat.clone());
        let spec: SemanticSpec = serde_json::from_value(json!({
            "identified_elements": {"references": {"content": [], "style": "./refs/style_01.png"}},
            "ambiguous_elements": []
        }))
        .unwrap();
        let r = o.refine_prompt("a corgi", CreativityLevel::Medium, &spec, &guidance()).unwrap();
        assert!(r.text.contains("./refs/style_01.png"));
        assert!(chat.requests()[0].user_text().contains("./refs/style_01.png"));
    }

    #[test]
    fn identical_refinement_is_legal_and_empty_is_not() {
        let chat = Arc::new(MockChat::new());
        chat.script("s_ref", [r#"{"refined_prompt": "a red cube", "reasoning": "already precise"}"#]);
        chat.script("s_ref", [r#"{"refined_prompt": "", "reasoning": ""}"#; 3]);
        let o = orchestrator(chat.clone());
        let spec: SemanticSpec = serde_json::from_value(json!({"identified_elements": {}})).unwrap();
        let same = o.refine_prompt("a red cube", CreativityLevel::Low, &spec, &guidance()).unwrap();
        assert_eq!(same.text, "a red cube");
        let err = o.refine_prompt("a red cube", CreativityLevel::Low, &spec, &guidance()).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { schema: SchemaId::Refine, .. }));
    }

    #[test]
    fn portrait_negative_example_keeps_all_terms_and_safeguards() {
        let chat = Arc::new(MockChat::new());
        chat.script("s_neg", [r#"{"negative_prompt": "blurry, low quality, distorted face, multiple heads, extra limbs, watermark, text", "reasoning": "portrait"}"#]);
        let o = orchestrator(chat);
        let refined = RefinedPrompt { text: "portrait of an old sailor".into(), reasoning: String::new() };
        let neg = o.build_negative_prompt("portrait of a sailor", &refined, &guidance()).unwrap();
        let terms = negative_terms(&neg.text);
        for t in ["blurry", "low quality", "distorted face", "multiple heads", "extra limbs", "watermark", "text", "distorted"] {
            assert_eq!(terms.iter().filter(|x| x.as_str() == t).count(), 1, "{t}");
        }
        assert_eq!(&terms[..4], &UNIVERSAL_SAFEGUARDS);
    }

    #[test]
    fn clear_sky_adds_cloud_negations() {
        let o = orchestrator(Arc::new(MockChat::new()));
        let refined = RefinedPrompt { text: "a lighthouse under a clear blue sky".into(), reasoning: String::new() };
        let neg = o.build_negative_prompt("a lighthouse, clear blue sky", &refined, &guidance()).unwrap();
        let terms = negative_terms(&neg.text);
        assert!(terms.contains(&"clouds".to_string()));
        assert!(terms.contains(&"dark clouds".to_string()));
    }

    #[test]
    fn safeguards_reappended_when_model_omits_them() {
        assert_eq!(
            merge_negative(&safeguards(), "people, Blurry, people, text."),
            "low quality, blurry, distorted, watermark, people, text"
        );
        assert_eq!(merge_negative(&safeguards(), ""), "low quality, blurry, distorted, watermark");
    }

    fn bundle() -> PromptBundle {
        PromptBundle {
            original: "A cozy living room with a vintage leather armchair, a sleeping cat on a Persian rug".into(),
            creativity: serde_json::from_str(CRE_MARKET).unwrap(),
            spec: serde_json::from_value(json!({"identified_elements": {}})).unwrap(),
            positive: RefinedPrompt { text: "cozy living room, vintage leather armchair".into(), reasoning: String::new() },
            negative: NegativePrompt { text: merge_negative(&safeguards(), "people"), reasoning: String::new() },
        }
    }

    fn report(v: Value) -> EvaluationReport {
        serde_json::from_value(v).unwrap()
    }

    #[test]
    fn edit_instruction_carries_missing_elements() {
        let chat = Arc::new(MockChat::new());
        let o = orchestrator(chat.clone());
        let mut r = eval_reply(6.0);
        r["missing_elements"] = json!(["No cat", "No Persian rug"]);
        r["improvement_suggestions"] = json!("Add cat on Persian rug and adjust armchair to appear vintage.");
        let (pos, neg) = o.synthesize_edit_instruction(&bundle(), &report(r), &guidance(), &guidance()).unwrap();
        assert!(pos.text.contains("Add cat on Persian rug"));
        assert!(pos.text.contains("No cat"));
        let reqs = chat.requests();
        let ref_payload = reqs[0].user_text();
        assert!(ref_payload.contains("No Persian rug"));
        assert!(ref_payload.contains(&bundle().original));
        assert!(reqs[1].user_text().contains(&bundle().original));
        for s in UNIVERSAL_SAFEGUARDS {
            assert!(negative_terms(&neg.text).contains(&s.to_string()));
        }
    }

    #[test]
    fn empty_feedback_reuses_prior_prompts() {
        let chat = Arc::new(MockChat::new());
        let o = orchestrator(chat.clone());
        let r = report(eval_reply(9.0));
        let b = bundle();
        let (pos, neg) = o.synthesize_edit_instruction(&b, &r, &guidance(), &guidance()).unwrap();
        assert_eq!(pos, b.positive);
        assert_eq!(neg, b.negative);
        assert_eq!(chat.total_calls(), 0);
    }

    #[test]
    fn new_artifact_class_becomes_negation() {
        let chat = Arc::new(MockChat::new());
        let o = orchestrator(chat.clone());
        let mut r = eval_reply(6.0);
        r["artifacts"]["detected_artifacts"] = json!(["Texture tiling on bookshelf"]);
        let (_, neg) = o.synthesize_edit_instruction(&bundle(), &report(r), &guidance(), &guidance()).unwrap();
        assert!(negative_terms(&neg.text).contains(&"texture tiling on bookshelf".to_string()));
        assert!(chat.requests()[1].user_text().contains("Texture tiling on bookshelf"));
    }

    #[test]
    fn preprocess_is_deterministic_under_mocks() {
        let run = || {
            let o = orchestrator(Arc::new(MockChat::new()));
            o.preprocess("a lighthouse alone under a clear blue sky", &|_| guidance()).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.original, "a lighthouse alone under a clear blue sky");
    }

    #[test]
    fn preprocess_runs_nodes_in_order_with_prompt_everywhere() {
        let chat = Arc::new(MockChat::new());
        let o = orchestrator(chat.clone());
        o.preprocess("a cat", &|_| guidance()).unwrap();
        let reqs = chat.requests();
        let tags: Vec<_> = reqs.iter().map(|r| r.tag.clone().unwrap()).collect();
        assert_eq!(tags, ["s_cre", "s_int", "s_ref", "s_neg"]);
        for r in &reqs {
            assert!(r.user_text().contains("\"prompt\": \"a cat\""));
        }
    }
}
