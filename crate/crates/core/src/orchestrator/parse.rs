//! Parsing of agent completions: JSON payload extraction tolerant of prose
//! wrappers, and header-based report section splitting.

use serde::de::DeserializeOwned;

/// Pull the first JSON value out of a completion. Tries the whole trimmed
/// text, then a ```json fence, then the first balanced object or array.
pub fn extract_json<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let trimmed = text.trim();
    if let Ok(value) = serde_json::from_str::<T>(trimmed) {
        return Ok(value);
    }
    if let Some(block) = fenced_block(trimmed) {
        if let Ok(value) = serde_json::from_str::<T>(block) {
            return Ok(value);
        }
    }
    if let Some(block) = balanced_block(trimmed) {
        return serde_json::from_str::<T>(block).map_err(|e| e.to_string());
    }
    Err(match serde_json::from_str::<T>(trimmed) {
        Err(e) => e.to_string(),
        Ok(_) => unreachable!("first parse attempt already succeeded"),
    })
}

fn fenced_block(text: &str) -> Option<&str> {
    for marker in ["```json", "```"] {
        if let Some(start) = text.find(marker) {
            let after = &text[start + marker.len()..];
            if let Some(end) = after.find("```") {
                let block = after[..end].trim();
                if block.starts_with('{') || block.starts_with('[') {
                    return Some(block);
                }
            }
        }
    }
    None
}

/// First balanced `{...}` or `[...]` span, string-literal aware.
fn balanced_block(text: &str) -> Option<&str> {
    let open = text.find(['{', '['])?;
    let bytes = text.as_bytes();
    let (open_ch, close_ch) = if bytes[open] == b'{' {
        (b'{', b'}')
    } else {
        (b'[', b']')
    };
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if *b == b'\\' {
                escaped = true;
            } else if *b == b'"' {
                in_string = false;
            }
            continue;
        }
        match *b {
            b'"' => in_string = true,
            b if b == open_ch => depth += 1,
            b if b == close_ch => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[open..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Report sections as found by header detection. A missing header leaves
/// its section `None`; the caller decides how strict to be.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSections {
    pub findings: Option<String>,
    pub impression: Option<String>,
}

/// Split a completion by detecting the "Findings:" and "Impression:"
/// headers, case-insensitively, in either order. Errors only when neither
/// header is present.
pub fn split_report_sections(text: &str) -> Result<ReportSections, String> {
    let lower = text.to_lowercase();
    let find_header = |name: &str| -> Option<(usize, usize)> {
        let mut search = 0;
        while let Some(rel) = lower[search..].find(name) {
            let start = search + rel;
            let before_ok = start == 0
                || !lower.as_bytes()[start - 1].is_ascii_alphanumeric();
            let mut body = start + name.len();
            while body < lower.len() && lower.as_bytes()[body] == b' ' {
                body += 1;
            }
            let colon = body < lower.len() && lower.as_bytes()[body] == b':';
            if before_ok && colon {
                return Some((start, body + 1));
            }
            search = start + name.len();
        }
        None
    };

    let findings = find_header("findings");
    let impression = find_header("impression");
    if findings.is_none() && impression.is_none() {
        return Err("no Findings or Impression header found".into());
    }

    let section = |own: Option<(usize, usize)>, other: Option<(usize, usize)>| -> Option<String> {
        let own = own?;
        let end = match other {
            Some(o) if o.0 > own.0 => o.0,
            _ => text.len(),
        };
        Some(text[own.1..end].trim().to_string())
    };

    Ok(ReportSections {
        findings: section(findings, impression),
        impression: section(impression, findings),
    })
}
