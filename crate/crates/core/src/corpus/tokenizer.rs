/// Lowercases `text` and splits it on every maximal run of non-alphanumeric
/// characters. Empty tokens are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// First `max_tokens` tokens of `text`, rejoined with single spaces.
pub fn snippet(text: &str, max_tokens: usize) -> String {
    let tokens = tokenize(text);
    let end = tokens.len().min(max_tokens);
    tokens[..end].join(" ")
}
