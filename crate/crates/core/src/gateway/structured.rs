//! Extraction of the fenced JSON block every agent prompt asks for.

use serde_json::Value;

/// Returns the JSON payload of a model reply.
///
/// Preference order: a ```` ```json ```` fence, any other fence, then the
/// outermost `{...}` span of the raw text.
pub fn extract_json(text: &str) -> Result<Value, String> {
    let mut candidates = Vec::new();
    if let Some(block) = fenced(text, "```json") {
        candidates.push(block);
    }
    if let Some(block) = fenced(text, "```") {
        candidates.push(block);
    }
    if let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) {
        if start < end {
            candidates.push(&text[start..=end]);
        }
    }
    let mut last_err = "no structured block found".to_string();
    for candidate in candidates {
        match serde_json::from_str::<Value>(candidate.trim()) {
            Ok(v) => return Ok(v),
            Err(e) => last_err = format!("invalid JSON block: {e}"),
        }
    }
    Err(last_err)
}

fn fenced<'a>(text: &'a str, opener: &str) -> Option<&'a str> {
    let start = text.find(opener)? + opener.len();
    let body = &text[start..];
    // skip the remainder of the opening line (e.g. a language tag)
    let body = match body.find('\n') {
        Some(nl) => &body[nl + 1..],
        None => body,
    };
    let end = body.find("```")?;
    Some(&body[..end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn json_fence_preferred() {
        let text = "Sure.\n```json\n{\"verdict\": \"no\"}\n```\nthanks {not json}";
        assert_eq!(extract_json(text).unwrap(), json!({"verdict": "no"}));
    }

    #[test]
    fn bare_fence_and_bare_object() {
        assert_eq!(
            extract_json("```\n{\"a\": 1}\n```").unwrap(),
            json!({"a": 1})
        );
        assert_eq!(extract_json("answer: {\"a\": [1]} done").unwrap(), json!({"a": [1]}));
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(extract_json("I cannot comply").is_err());
        assert!(extract_json("```json\n{broken\n```").is_err());
    }
}
