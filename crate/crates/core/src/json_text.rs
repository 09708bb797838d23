//! Helpers for pulling structured objects out of free-form text and for
//! rendering values into prompt text.

use serde_json::{Map, Value};

/// Returns the first balanced `{...}` block in `text` that parses as a JSON
/// object. Surrounding prose and code fences are ignored.
pub fn extract_first_object(text: &str) -> Option<Map<String, Value>> {
    extract_first(text, '{', '}').and_then(|v| match v {
        Value::Object(m) => Some(m),
        _ => None,
    })
}

/// Returns the first balanced `[...]` block in `text` that parses as a JSON
/// array.
pub fn extract_first_array(text: &str) -> Option<Vec<Value>> {
    extract_first(text, '[', ']').and_then(|v| match v {
        Value::Array(a) => Some(a),
        _ => None,
    })
}

fn extract_first(text: &str, open: char, close: char) -> Option<Value> {
    let starts = text.char_indices().filter(|&(_, c)| c == open).map(|(i, _)| i);
    for start in starts {
        let Some(end) = balanced_end(&text[start..], open, close) else {
            continue;
        };
        let candidate = &text[start..start + end];
        if let Ok(v) = serde_json::from_str::<Value>(candidate) {
            return Some(v);
        }
        if let Ok(v) = serde_json::from_str::<Value>(&pythonish_to_json(candidate)) {
            return Some(v);
        }
    }
    None
}

/// Byte length of the balanced block starting at the beginning of `s`.
fn balanced_end(s: &str, open: char, close: char) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str: Option<char> = None;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if let Some(q) = in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                in_str = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => in_str = Some(c),
            c if c == open => depth += 1,
            c if c == close => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + c.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

/// Python dict literals (`{'x': True}`) show up in replies often enough to be
/// worth a second parse attempt.
fn pythonish_to_json(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_str: Option<char> = None;
    let mut escaped = false;
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        match word.as_str() {
            "True" => out.push_str("true"),
            "False" => out.push_str("false"),
            "None" => out.push_str("null"),
            w => out.push_str(w),
        }
        word.clear();
    };
    for c in s.chars() {
        if let Some(q) = in_str {
            if escaped {
                escaped = false;
                out.push(c);
            } else if c == '\\' {
                escaped = true;
                out.push(c);
            } else if c == q {
                in_str = None;
                out.push('"');
            } else if c == '"' {
                out.push_str("\\\"");
            } else {
                out.push(c);
            }
            continue;
        }
        if c.is_ascii_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        flush(&mut word, &mut out);
        if c == '\'' || c == '"' {
            in_str = Some(c);
            out.push('"');
        } else {
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Formats a number the way prompts show it: whole values without a
/// fractional part, everything else in shortest round-trip form.
pub fn format_number(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Renders a JSON value with `", "` and `": "` separators, as embedded in
/// prompt text.
pub fn to_prompt_string(v: &Value) -> String {
    let mut out = String::new();
    write_prompt(v, &mut out);
    out
}

fn write_prompt(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => out.push_str(&i.to_string()),
            (None, Some(f)) => out.push_str(&format_number(f)),
            _ => out.push_str(&n.to_string()),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_prompt(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_prompt(item, out);
            }
            out.push('}');
        }
    }
}

/// Replaces string values that parse as finite numbers with numbers.
pub fn coerce_numeric_strings(map: &mut Map<String, Value>) {
    for v in map.values_mut() {
        if let Value::String(s) = v {
            let t = s.trim();
            if let Ok(i) = t.parse::<i64>() {
                *v = Value::from(i);
            } else if let Ok(f) = t.parse::<f64>() {
                if let Some(n) = serde_json::Number::from_f64(f) {
                    *v = Value::Number(n);
                }
            }
        }
    }
}
