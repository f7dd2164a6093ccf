//! Agent prompt templates.
//!
//! Templates are UTF-8 text assets under `prompts/`, one file per
//! [`TemplateId`]. Placeholders are `{name}` with `name` matching
//! `[A-Za-z_][A-Za-z0-9_]*`; `{{` and `}}` render as literal braces. Any other
//! brace is literal, so JSON examples inside templates need no escaping.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type SlotMap = BTreeMap<String, String>;

/// Negative prompt used as a fixed baseline instead of the adaptive one.
pub const CONSTANT_NEGATIVE_PROMPT: &str = include_str!("../prompts/constant_negative.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    SCre,
    SInt,
    SRef,
    SNeg,
    Eval,
    TrajGen,
    TrajEdit,
    GuideGen,
    GuideEdit,
    JudgeGroup,
    JudgeIndividual,
    WorkflowGuidance,
}

impl TemplateId {
    pub const ALL: [TemplateId; 12] = [
        TemplateId::SCre,
        TemplateId::SInt,
        TemplateId::SRef,
        TemplateId::SNeg,
        TemplateId::Eval,
        TemplateId::TrajGen,
        TemplateId::TrajEdit,
        TemplateId::GuideGen,
        TemplateId::GuideEdit,
        TemplateId::JudgeGroup,
        TemplateId::JudgeIndividual,
        TemplateId::WorkflowGuidance,
    ];

    /// File stem under the asset directory; also used as the request tag.
    pub fn stem(&self) -> &'static str {
        match self {
            TemplateId::SCre => "s_cre",
            TemplateId::SInt => "s_int",
            TemplateId::SRef => "s_ref",
            TemplateId::SNeg => "s_neg",
            TemplateId::Eval => "eval",
            TemplateId::TrajGen => "traj_gen",
            TemplateId::TrajEdit => "traj_edit",
            TemplateId::GuideGen => "guide_gen",
            TemplateId::GuideEdit => "guide_edit",
            TemplateId::JudgeGroup => "judge_group",
            TemplateId::JudgeIndividual => "judge_individual",
            TemplateId::WorkflowGuidance => "workflow_guidance",
        }
    }

    fn builtin_text(&self) -> &'static str {
        match self {
            TemplateId::SCre => include_str!("../prompts/s_cre.txt"),
            TemplateId::SInt => include_str!("../prompts/s_int.txt"),
            TemplateId::SRef => include_str!("../prompts/s_ref.txt"),
            TemplateId::SNeg => include_str!("../prompts/s_neg.txt"),
            TemplateId::Eval => include_str!("../prompts/eval.txt"),
            TemplateId::TrajGen => include_str!("../prompts/traj_gen.txt"),
            TemplateId::TrajEdit => include_str!("../prompts/traj_edit.txt"),
            TemplateId::GuideGen => include_str!("../prompts/guide_gen.txt"),
            TemplateId::GuideEdit => include_str!("../prompts/guide_edit.txt"),
            TemplateId::JudgeGroup => include_str!("../prompts/judge_group.txt"),
            TemplateId::JudgeIndividual => include_str!("../prompts/judge_individual.txt"),
            TemplateId::WorkflowGuidance => include_str!("../prompts/workflow_guidance.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.stem())
    }
}

impl FromStr for TemplateId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.stem() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

/// The set of template texts in use.
#[derive(Debug, Clone)]
pub struct Templates {
    texts: HashMap<TemplateId, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    /// Templates compiled into the binary.
    pub fn builtin() -> Self {
        Self {
            texts: TemplateId::ALL
                .into_iter()
                .map(|t| (t, t.builtin_text().to_string()))
                .collect(),
        }
    }

    /// Builtins overridden by any `{stem}.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut out = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.stem()));
            if path.exists() {
                out.texts.insert(id, std::fs::read_to_string(&path)?);
            }
        }
        Ok(out)
    }

    pub fn get(&self, id: TemplateId) -> &str {
        self.texts
            .get(&id)
            .map(String::as_str)
            .unwrap_or_else(|| id.builtin_text())
    }

    pub fn workflow_guidance(&self) -> &str {
        self.get(TemplateId::WorkflowGuidance)
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

fn parse(text: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let bytes = text.as_bytes();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                pieces.push(Piece::Literal(&text[lit_start..i + 1]));
                i += 2;
                lit_start = i;
            }
            b'{' => {
                let close = text[i + 1..].find(['}', '{', '\n']).map(|j| i + 1 + j);
                match close {
                    Some(end) if bytes[end] == b'}' && is_ident(&text[i + 1..end]) => {
                        pieces.push(Piece::Literal(&text[lit_start..i]));
                        pieces.push(Piece::Slot(&text[i + 1..end]));
                        i = end + 1;
                        lit_start = i;
                    }
                    _ => i += 1,
                }
            }
            _ => i += 1,
        }
    }
    pieces.push(Piece::Literal(&text[lit_start..]));
    pieces
}

/// Placeholder names in order of first appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut seen = Vec::<String>::new();
    for p in parse(text) {
        if let Piece::Slot(name) = p {
            if !seen.iter().any(|s| s == name) {
                seen.push(name.to_string());
            }
        }
    }
    seen
}

/// Substitutes every placeholder. Slots not referenced by the template are
/// ignored here.
pub fn render(text: &str, slots: &SlotMap) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    for p in parse(text) {
        match p {
            Piece::Literal(s) => out.push_str(s),
            Piece::Slot(name) => out.push_str(
                slots
                    .get(name)
                    .ok_or_else(|| Error::MissingSlot(name.to_string()))?,
            ),
        }
    }
    Ok(out)
}
