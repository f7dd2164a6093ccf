//! Structured (JSON) completions with a validate-and-repair loop.

use serde_json::Value;

use super::{chat_complete, validate_schema, ChatBackend, ChatMessage, ChatRequest, SchemaId};
use crate::error::{Error, Result};

pub const DEFAULT_REPAIR_ATTEMPTS: u32 = 3;

/// Follow-up sent after a reply fails validation. `{error}` is replaced by
/// the validation message.
pub const REPAIR_TEMPLATE: &str = "Your previous reply could not be accepted: {error}\n\
Return only the corrected JSON object with exactly the structure requested above, \
without code fences or commentary.";

pub fn repair_message(error: &str) -> String {
    REPAIR_TEMPLATE.replace("{error}", error)
}

/// Requests a completion whose JSON body satisfies `schema`.
///
/// A reply that cannot be parsed or fails validation is answered with
/// [`REPAIR_TEMPLATE`] and the backend is asked again, for at most
/// `max_attempts` calls in total. Transport and protocol errors are not
/// retried here.
pub fn chat_complete_structured(
    chat: &dyn ChatBackend,
    req: &ChatRequest,
    schema: SchemaId,
    max_attempts: u32,
) -> Result<Value> {
    let max_attempts = max_attempts.max(1);
    let mut req = req.clone();
    let mut last_error = String::new();
    for attempt in 1..=max_attempts {
        let raw = chat_complete(chat, &req)?;
        let outcome = extract_json(&raw).and_then(|v| validate_schema(schema, &v).map(|()| v));
        match outcome {
            Ok(v) => return Ok(v),
            Err(e) => {
                last_error = e;
                if attempt < max_attempts {
                    req.messages.push(ChatMessage::assistant(raw));
                    req.messages.push(ChatMessage::user(repair_message(&last_error)));
                }
            }
        }
    }
    Err(Error::SchemaViolation {
        schema,
        attempts: max_attempts,
        message: last_error,
    })
}

/// Pulls a JSON value out of a model reply: strips Markdown code fences and
/// surrounding prose, and drops trailing commas before closing brackets.
pub fn extract_json(raw: &str) -> std::result::Result<Value, String> {
    let body = strip_fences(raw.trim());
    if let Ok(v) = serde_json::from_str::<Value>(body) {
        return Ok(v);
    }
    let candidate = first_balanced(body).unwrap_or(body);
    if let Ok(v) = serde_json::from_str::<Value>(candidate) {
        return Ok(v);
    }
    let cleaned = drop_trailing_commas(candidate);
    serde_json::from_str::<Value>(&cleaned).map_err(|e| {
        if first_balanced(body).is_none() {
            "reply contains no JSON object".to_string()
        } else {
            format!("reply is not valid JSON: {e}")
        }
    })
}

fn strip_fences(s: &str) -> &str {
    let Some(open) = s.find("```") else {
        return s;
    };
    let after = &s[open + 3..];
    // Skip the info string (e.g. "json") up to the end of the fence line.
    let content_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let content = &after[content_start..];
    match content.find("```") {
        Some(close) => content[..close].trim(),
        None => content.trim(),
    }
}

fn first_balanced(s: &str) -> Option<&str> {
    let mut in_str = false;
    let mut esc = false;
    let mut depth = 0usize;
    let mut start = None;
    for (i, ch) in s.char_indices() {
        if in_str {
            if esc {
                esc = false;
            } else if ch == '\\' {
                esc = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' if start.is_some() => in_str = true,
            '{' | '[' => {
                if start.is_none() {
                    start = Some(i);
                }
                depth += 1;
            }
            '}' | ']' if start.is_some() => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start.unwrap()..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn drop_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut esc = false;
    for (i, &ch) in chars.iter().enumerate() {
        if in_str {
            out.push(ch);
            if esc {
                esc = false;
            } else if ch == '\\' {
                esc = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        if ch == '"' {
            in_str = true;
        } else if ch == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(ch);
    }
    out
}
