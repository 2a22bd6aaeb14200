//! Environment prompt rendering and delimiter parsing.
//!
//! Entity text carries three delimited segments. Markers are bit-exact ASCII.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EnvError, Entity};

pub const BEGIN_PLOT: &str = "#BEGIN_PLOT";
pub const END_PLOT: &str = "#END_PLOT";
pub const BEGIN_LIKE: &str = "#BEGIN_REASONS_TO_LIKE";
pub const END_LIKE: &str = "#END_REASONS_TO_LIKE";
pub const BEGIN_DISLIKE: &str = "#BEGIN_REASONS_TO_DISLIKE";
pub const END_DISLIKE: &str = "#END_REASONS_TO_DISLIKE";

/// The environment prompt, with `{{ action }}`, `{{ plot }}`,
/// `{{ reasons_to_like }}` and `{{ reasons_to_dislike }}` placeholders.
pub const ENV_PROMPT_TEMPLATE: &str = include_str!("../../assets/env_prompt.txt");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("missing delimiter {0}")]
    MissingDelimiter(&'static str),
    #[error("delimiter {0} encloses another block")]
    NestedDelimiter(&'static str),
}

/// The three segments of an entity description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub plot: String,
    pub reasons_to_like: String,
    pub reasons_to_dislike: String,
}

impl Description {
    /// Canonical delimited text; `parse_delimited` inverts it exactly.
    pub fn to_text(&self) -> String {
        format!(
            "{BEGIN_PLOT}\n{}\n{END_PLOT}\n{BEGIN_LIKE}\n{}\n{END_LIKE}\n{BEGIN_DISLIKE}\n{}\n{END_DISLIKE}\n",
            self.plot, self.reasons_to_like, self.reasons_to_dislike
        )
    }
}

impl fmt::Display for Description {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn trim_one_newline(s: &str) -> &str {
    let s = s
        .strip_prefix("\r\n")
        .or_else(|| s.strip_prefix('\n'))
        .unwrap_or(s);
    s.strip_suffix("\r\n")
        .or_else(|| s.strip_suffix('\n'))
        .unwrap_or(s)
}

fn extract<'a>(text: &'a str, begin: &'static str, end: &'static str) -> Result<&'a str, ParseError> {
    let start = text.find(begin).ok_or(ParseError::MissingDelimiter(begin))? + begin.len();
    let rest = &text[start..];
    let stop = rest.find(end).ok_or(ParseError::MissingDelimiter(end))?;
    let body = &rest[..stop];
    if body.contains("#BEGIN_") {
        return Err(ParseError::NestedDelimiter(begin));
    }
    Ok(trim_one_newline(body))
}

/// Extracts the text strictly between each begin/end marker pair, trimming
/// one leading and one trailing newline.
pub fn parse_delimited(response: &str) -> Result<Description, ParseError> {
    Ok(Description {
        plot: extract(response, BEGIN_PLOT, END_PLOT)?.to_string(),
        reasons_to_like: extract(response, BEGIN_LIKE, END_LIKE)?.to_string(),
        reasons_to_dislike: extract(response, BEGIN_DISLIKE, END_DISLIKE)?.to_string(),
    })
}

/// Single-pass `{{ name }}` substitution; substituted text is never rescanned.
fn render_template<'a>(template: &str, lookup: impl Fn(&str) -> Option<&'a str>) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let key = after[..close].trim();
                match lookup(key) {
                    Some(value) => out.push_str(value),
                    None => out.push_str(&rest[open..open + 2 + close + 2]),
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Fills the environment prompt from the state's description and the action.
pub fn render_env_prompt(state: &Entity, action_text: &str) -> Result<String, EnvError> {
    if action_text.trim().is_empty() {
        return Err(EnvError::EmptyAction);
    }
    let desc = parse_delimited(&state.text).map_err(EnvError::MissingSegment)?;
    Ok(render_template(ENV_PROMPT_TEMPLATE, |key| match key {
        "action" => Some(action_text),
        "plot" => Some(&desc.plot),
        "reasons_to_like" => Some(&desc.reasons_to_like),
        "reasons_to_dislike" => Some(&desc.reasons_to_dislike),
        _ => None,
    }))
}
