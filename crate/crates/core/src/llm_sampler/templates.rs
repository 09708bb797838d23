//! Prompt text assets and `{placeholder}` substitution.

use thiserror::Error;

pub const SYSTEM_PLAIN: &str = include_str!("../../prompts/system_plain.txt");
pub const SYSTEM_REASONING: &str = include_str!("../../prompts/system_reasoning.txt");
pub const SYSTEM_BUFFERED: &str = include_str!("../../prompts/system_buffered.txt");
pub const SYSTEM_TPE: &str = include_str!("../../prompts/system_tpe.txt");
pub const INIT_PLAIN: &str = include_str!("../../prompts/init_plain.txt");
pub const INIT_TPE_RELATIVE: &str = include_str!("../../prompts/init_tpe_relative.txt");
pub const INIT_TPE_INDEPENDENT: &str = include_str!("../../prompts/init_tpe_independent.txt");
pub const OPT_PLAIN: &str = include_str!("../../prompts/opt_plain.txt");
pub const OPT_REASONING: &str = include_str!("../../prompts/opt_reasoning.txt");
pub const OPT_BUFFERED: &str = include_str!("../../prompts/opt_buffered.txt");
pub const OPT_TPE_RELATIVE: &str = include_str!("../../prompts/opt_tpe_relative.txt");
pub const OPT_TPE_INDEPENDENT: &str = include_str!("../../prompts/opt_tpe_independent.txt");
pub const SUMMARIZE: &str = include_str!("../../prompts/summarize.txt");

/// Every template asset with its file stem.
pub const ALL: [(&str, &str); 13] = [
    ("system_plain", SYSTEM_PLAIN),
    ("system_reasoning", SYSTEM_REASONING),
    ("system_buffered", SYSTEM_BUFFERED),
    ("system_tpe", SYSTEM_TPE),
    ("init_plain", INIT_PLAIN),
    ("init_tpe_relative", INIT_TPE_RELATIVE),
    ("init_tpe_independent", INIT_TPE_INDEPENDENT),
    ("opt_plain", OPT_PLAIN),
    ("opt_reasoning", OPT_REASONING),
    ("opt_buffered", OPT_BUFFERED),
    ("opt_tpe_relative", OPT_TPE_RELATIVE),
    ("opt_tpe_independent", OPT_TPE_INDEPENDENT),
    ("summarize", SUMMARIZE),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("no value for placeholder `{{{0}}}`")]
    Missing(String),
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let bytes = template.as_bytes();
    let mut text_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let name_len = bytes[i + 1..].iter().take_while(|b| b.is_ascii_lowercase() || **b == b'_').count();
            let close = i + 1 + name_len;
            if name_len > 0 && bytes.get(close) == Some(&b'}') {
                if text_start < i {
                    out.push(Piece::Text(&template[text_start..i]));
                }
                out.push(Piece::Slot(&template[i + 1..close]));
                i = close + 1;
                text_start = i;
                continue;
            }
        }
        i += 1;
    }
    if text_start < template.len() {
        out.push(Piece::Text(&template[text_start..]));
    }
    out
}

/// Placeholder names in order of appearance (repeats included).
pub fn placeholders(template: &str) -> Vec<&str> {
    pieces(template)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s),
            Piece::Text(_) => None,
        })
        .collect()
}

/// Substitutes every placeholder in one pass; substituted values are never
/// rescanned.
pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + 64);
    for piece in pieces(template) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => {
                let v = values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::Missing(name.to_string()))?;
                out.push_str(v);
            }
        }
    }
    Ok(out)
}
