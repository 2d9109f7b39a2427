//! Byte-level tokenizer: one token per UTF-8 byte, shifted past the special
//! tokens, with a beginning-of-sequence marker in front.

use std::borrow::Cow;

pub const BOS: u32 = 0;
pub const N_SPECIAL: u32 = 1;
pub const BYTE_VOCAB: u32 = 256 + N_SPECIAL;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenStream(pub Vec<u32>);

impl TokenStream {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize(text: &str) -> TokenStream {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.bytes().map(|b| u32::from(b) + N_SPECIAL));
    TokenStream(ids)
}

/// Drops special tokens and decodes the remaining bytes (lossily, should a
/// cut have split a multi-byte character).
pub fn detokenize(stream: &TokenStream) -> String {
    let bytes: Vec<u8> = stream
        .0
        .iter()
        .filter(|&&id| (N_SPECIAL..N_SPECIAL + 256).contains(&id))
        .map(|&id| (id - N_SPECIAL) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Shortens `text` to at most `max_bytes`: the first line is kept and the
/// oldest following lines are dropped; if the first line alone is too long
/// it is cut at a character boundary.
pub fn fit_document(text: &str, max_bytes: usize) -> Cow<'_, str> {
    if text.len() <= max_bytes {
        return Cow::Borrowed(text);
    }
    let Some(first_nl) = text.find('\n') else {
        return Cow::Borrowed(floor_char(text, max_bytes));
    };
    let header = &text[..first_nl];
    if header.len() + 1 < max_bytes {
        let budget = max_bytes - header.len() - 1;
        let body = &text[first_nl + 1..];
        let mut start = body.len().saturating_sub(budget);
        // advance to the next line start
        if start > 0 && body.as_bytes()[start - 1] != b'\n' {
            start = body[start..].find('\n').map_or(body.len(), |i| start + i + 1);
        }
        if start < body.len() {
            return Cow::Owned(format!("{header}\n{}", &body[start..]));
        }
    }
    Cow::Borrowed(floor_char(text, max_bytes.min(header.len())))
}

fn floor_char(text: &str, max_bytes: usize) -> &str {
    let mut end = max_bytes.min(text.len());
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    &text[..end]
}

/// Tokenizes after fitting the text into a context of `context_len` tokens.
pub fn tokenize_fit(text: &str, context_len: usize) -> TokenStream {
    tokenize(&fit_document(text, context_len.saturating_sub(1)))
}
