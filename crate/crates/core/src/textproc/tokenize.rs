/// Characters that always form a token of their own.
const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '(', ')', '[', ']', '"', '/'];

pub fn is_punct_token(token: &str) -> bool {
    let mut chars = token.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCT.contains(&c))
}

/// Lowercases and splits on whitespace and punctuation. Hyphens stay inside
/// words and a period between two digits stays inside a number.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut word = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
            continue;
        }
        let decimal_point = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if PUNCT.contains(&c) && !decimal_point {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        } else {
            word.extend(c.to_lowercase());
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

/// Splits on `.`, `?` or `!` followed by whitespace or the end of the text.
/// Returned sentences are trimmed and keep their terminal punctuation.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if matches!(c, '.' | '?' | '!') {
            let boundary = iter.peek().map_or(true, |(_, n)| n.is_whitespace());
            if boundary {
                let end = i + c.len_utf8();
                push_trimmed(&text[start..end], &mut out);
                start = end;
            }
        }
    }
    push_trimmed(&text[start..], &mut out);
    out
}

fn push_trimmed<'a>(s: &'a str, out: &mut Vec<&'a str>) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t);
    }
}

/// Joins tokens with single spaces, attaching closing punctuation to the
/// preceding token and opening brackets to the following one.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    for t in tokens {
        let t = t.as_ref();
        let closing = matches!(t, "." | "," | ";" | ":" | "!" | "?" | ")" | "]");
        if !out.is_empty() && !closing && !glue_next {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = matches!(t, "(" | "[");
    }
    out
}
