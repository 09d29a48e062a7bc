//! Byte-level vocabulary with atomic format tokens.
//!
//! Ids `0..256` are raw bytes. The format markers used by skeleton
//! generation are single tokens so that a step boundary can never straddle
//! two tokens.

use std::fmt;

pub type TokenId = u32;

pub const MARK: TokenId = 256;
pub const TERM: TokenId = 257;
pub const ELLIPSIS: TokenId = 258;
pub const COLON: TokenId = 259;
pub const PAD: TokenId = 260;
pub const EOS: TokenId = 261;

/// Number of ids the vocabulary defines. Engines may have a larger
/// output layer; the extra ids decode to nothing.
pub const VOCAB_SIZE: usize = 262;

pub const MARK_STR: &str = "####";
pub const TERM_STR: &str = "%%%%";
pub const ELLIPSIS_STR: &str = "......";
pub const COLON_STR: &str = ":";

/// Special strings in match priority order (longest first).
const SPECIALS: [(&[u8], TokenId); 4] = [
    (ELLIPSIS_STR.as_bytes(), ELLIPSIS),
    (MARK_STR.as_bytes(), MARK),
    (TERM_STR.as_bytes(), TERM),
    (COLON_STR.as_bytes(), COLON),
];

pub fn is_special(token: TokenId) -> bool {
    token >= 256
}

/// Tokens that may never appear inside a branch title or body.
pub fn is_format_token(token: TokenId) -> bool {
    matches!(token, MARK | TERM | ELLIPSIS)
}

/// Encodes text, matching special strings before falling back to bytes.
pub fn encode(text: &str) -> Vec<TokenId> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    'outer: while i < bytes.len() {
        for (pat, id) in SPECIALS {
            if bytes[i..].starts_with(pat) {
                out.push(id);
                i += pat.len();
                continue 'outer;
            }
        }
        out.push(bytes[i] as TokenId);
        i += 1;
    }
    out
}

/// Decodes tokens to bytes. `PAD`, `EOS` and out-of-vocabulary ids have
/// no textual form.
pub fn decode_bytes(tokens: &[TokenId]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=255 => out.push(t as u8),
            MARK => out.extend_from_slice(MARK_STR.as_bytes()),
            TERM => out.extend_from_slice(TERM_STR.as_bytes()),
            ELLIPSIS => out.extend_from_slice(ELLIPSIS_STR.as_bytes()),
            COLON => out.extend_from_slice(COLON_STR.as_bytes()),
            _ => {}
        }
    }
    out
}

pub fn decode(tokens: &[TokenId]) -> String {
    String::from_utf8_lossy(&decode_bytes(tokens)).into_owned()
}

/// Human-readable rendering of a single token, for debug output.
pub struct TokenDisplay(pub TokenId);

impl fmt::Display for TokenDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            MARK => f.write_str("<MARK>"),
            TERM => f.write_str("<TERM>"),
            ELLIPSIS => f.write_str("<ELLIPSIS>"),
            COLON => f.write_str("<COLON>"),
            PAD => f.write_str("<PAD>"),
            EOS => f.write_str("<EOS>"),
            b @ 0..=255 => write!(f, "{:?}", b as u8 as char),
            other => write!(f, "<{other}>"),
        }
    }
}
