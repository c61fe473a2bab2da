//! Lenient JSON extraction from free-form model output.
//!
//! Models wrap JSON in code fences or surround it with prose. The extractor
//! scans for the first `{` or `[` that opens a balanced, parseable JSON value.

use serde_json::Value;

/// First balanced JSON object or array in `text` that parses.
pub fn first_json_value(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while start < bytes.len() {
        let offset = bytes[start..].iter().position(|b| *b == b'{' || *b == b'[')?;
        let open = start + offset;
        if let Some(end) = balanced_end(&bytes[open..]) {
            if let Ok(value) = serde_json::from_str::<Value>(&text[open..open + end]) {
                return Some(value);
            }
        }
        start = open + 1;
    }
    None
}

/// Length of the balanced bracket run starting at `bytes[0]`, honoring strings.
fn balanced_end(bytes: &[u8]) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => stack.push(b'}'),
            b'[' => stack.push(b']'),
            b'}' | b']' => {
                if stack.pop() != Some(b) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}
