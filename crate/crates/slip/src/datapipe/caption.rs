//! Caption cleaning and sampling.
//!
//! Raw web captions arrive HTML-escaped and full of markup. Cleaning
//! unescapes entities, strips `<...>` tags and http/https/www URLs,
//! and collapses whitespace. The passes iterate to a fixed point so
//! `clean(clean(x)) == clean(x)` holds for every input, including
//! adversarial double-escapes.

use rand::Rng;

fn unescape_entities(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'&' {
            if let Some(semi) = s[i..].find(';').map(|p| i + p) {
                let body = &s[i + 1..semi];
                if body.len() <= 10 {
                    let replacement = match body {
                        "amp" => Some('&'),
                        "lt" => Some('<'),
                        "gt" => Some('>'),
                        "quot" => Some('"'),
                        "apos" | "#39" => Some('\''),
                        "nbsp" => Some(' '),
                        _ => {
                            if let Some(num) = body.strip_prefix("#x").or(body.strip_prefix("#X")) {
                                u32::from_str_radix(num, 16).ok().and_then(char::from_u32)
                            } else if let Some(num) = body.strip_prefix('#') {
                                num.parse::<u32>().ok().and_then(char::from_u32)
                            } else {
                                None
                            }
                        }
                    };
                    if let Some(c) = replacement {
                        out.push(c);
                        i = semi + 1;
                        continue;
                    }
                }
            }
        }
        let ch = s[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

fn strip_tags(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '<' {
            if let Some(close) = s[i..].find('>') {
                // skip to past the '>'
                let end = i + close;
                while let Some(&(j, _)) = chars.peek() {
                    if j > end {
                        break;
                    }
                    chars.next();
                }
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn strip_urls(s: &str) -> String {
    s.split_whitespace()
        .filter(|tok| {
            let lower = tok.to_lowercase();
            !(lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www."))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn clean_pass(s: &str) -> String {
    collapse_whitespace(&strip_urls(&strip_tags(&unescape_entities(s))))
}

/// Cleans one raw caption. Total: never fails, returns possibly-empty text.
pub fn clean_caption(raw: &str) -> String {
    let mut cur = clean_pass(raw);
    for _ in 0..8 {
        let next = clean_pass(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Uniform choice among pre-cleaned captions.
pub fn sample_caption<'a, R: Rng>(captions: &'a [String], rng: &mut R) -> Option<&'a str> {
    if captions.is_empty() {
        return None;
    }
    let i = rng.random_range(0..captions.len());
    Some(&captions[i])
}
