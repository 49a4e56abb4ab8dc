//! Whitespace/punctuation piece tokenizer.
//!
//! Text is split into pieces: chat markers (`<|name|>`), single newlines,
//! word runs and punctuation runs (each optionally carrying one leading
//! space), and leftover whitespace runs. Each piece hashes into the
//! non-reserved part of the vocabulary, so tokenization is deterministic and
//! prefix-stable at piece boundaries.

use std::collections::HashMap;
use std::sync::Arc;

use crate::fnv::fnv1a64;
use crate::Token;

/// Ids at the top of the vocabulary reserved for chat markers.
pub const RESERVED_IDS: u32 = 8;

/// Chat markers with reserved ids, in reservation order (`vocab - 1`, `vocab - 2`, ...).
pub const MARKERS: [&str; 7] = [
    "<|end|>",
    "<|tool_call|>",
    "<|system|>",
    "<|user|>",
    "<|assistant|>",
    "<|tool|>",
    "<|tools|>",
];

const MAX_MARKER_NAME: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub end: Token,
    pub tool_call: Token,
    pub system: Token,
    pub user: Token,
    pub assistant: Token,
    pub tool: Token,
    pub tools: Token,
}

/// Output of tokenization: the source text, its token ids, and the byte
/// offset at which each piece ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub text: Arc<str>,
    pub tokens: Vec<Token>,
    pub piece_ends: Vec<u32>,
}

impl Tokenized {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn piece(&self, i: usize) -> &str {
        let start = if i == 0 { 0 } else { self.piece_ends[i - 1] as usize };
        &self.text[start..self.piece_ends[i] as usize]
    }

    pub fn pieces(&self) -> impl Iterator<Item = &str> {
        (0..self.tokens.len()).map(move |i| self.piece(i))
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: u32,
    specials: SpecialTokens,
}

impl Tokenizer {
    pub fn new(vocab: u32) -> Self {
        assert!(vocab > RESERVED_IDS, "vocabulary too small for reserved ids");
        let id = |i: u32| Token(vocab - 1 - i);
        Self {
            vocab,
            specials: SpecialTokens {
                end: id(0),
                tool_call: id(1),
                system: id(2),
                user: id(3),
                assistant: id(4),
                tool: id(5),
                tools: id(6),
            },
        }
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        lex(text, 0, |s, e| out.push(self.piece_id(&text[s..e])));
        out
    }

    pub fn tokenize_full(&self, text: impl Into<Arc<str>>) -> Tokenized {
        let text: Arc<str> = text.into();
        let mut tokens = Vec::new();
        let mut piece_ends = Vec::new();
        lex(&text, 0, |s, e| {
            tokens.push(self.piece_id(&text[s..e]));
            piece_ends.push(e as u32);
        });
        Tokenized {
            text,
            tokens,
            piece_ends,
        }
    }

    /// Tokenizes `text` reusing `prefix`, which must tokenize a prefix of
    /// `text` ending at a piece boundary (see [`Tokenizer::boundary_ok`]).
    /// Returns the combined result and the number of pieces lexed.
    pub fn tokenize_extending(&self, prefix: &Tokenized, text: Arc<str>) -> (Tokenized, usize) {
        debug_assert!(text.starts_with(&*prefix.text));
        let start = prefix.text.len();
        let mut tokens = prefix.tokens.clone();
        let mut piece_ends = prefix.piece_ends.clone();
        lex(&text, start, |s, e| {
            tokens.push(self.piece_id(&text[s..e]));
            piece_ends.push(e as u32);
        });
        let lexed = tokens.len() - prefix.tokens.len();
        (
            Tokenized {
                text,
                tokens,
                piece_ends,
            },
            lexed,
        )
    }

    /// True if the last piece of `prefix` still ends at the same offset when
    /// lexed as part of `text`, i.e. `prefix` ends at a piece boundary of
    /// `text`.
    pub fn boundary_ok(&self, prefix: &Tokenized, text: &str) -> bool {
        if !text.starts_with(&*prefix.text) {
            return false;
        }
        let Some(&last_end) = prefix.piece_ends.last() else {
            return true;
        };
        let last_start = if prefix.piece_ends.len() >= 2 {
            prefix.piece_ends[prefix.piece_ends.len() - 2] as usize
        } else {
            0
        };
        next_piece_end(text, last_start) == Some(last_end as usize)
    }

    pub fn piece_id(&self, piece: &str) -> Token {
        if let Some(i) = MARKERS.iter().position(|m| *m == piece) {
            return Token(self.vocab - 1 - i as u32);
        }
        Token((fnv1a64(piece.as_bytes()) % u64::from(self.vocab - RESERVED_IDS)) as u32)
    }

    pub fn marker_text(&self, token: Token) -> Option<&'static str> {
        let top = self.vocab - 1;
        if token.0 > top || token.0 < self.vocab - RESERVED_IDS {
            return None;
        }
        MARKERS.get((top - token.0) as usize).copied()
    }

    /// Builds the per-request decode table from the prompt's own pieces.
    pub fn decode_table(&self, prompt: &Tokenized) -> DecodeTable {
        let mut pieces = HashMap::with_capacity(prompt.len());
        for (i, &t) in prompt.tokens.iter().enumerate() {
            pieces.insert(t, i);
        }
        DecodeTable {
            tokenizer: self.clone(),
            prompt: prompt.clone(),
            pieces,
        }
    }
}

/// Maps generated token ids back to text. Ids seen in the prompt decode to
/// their most recent prompt piece, which is the right one for spans copied
/// from late in the prompt when two pieces share an id. Other ids decode to
/// a synthetic word, so decoding is a pure function of (prompt, id).
#[derive(Debug, Clone)]
pub struct DecodeTable {
    tokenizer: Tokenizer,
    prompt: Tokenized,
    pieces: HashMap<Token, usize>,
}

const SYLLABLES: [&str; 32] = [
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu", "na", "pe", "qui", "ro", "su",
    "ta", "ve", "wi", "xo", "yu", "za", "bre", "cla", "dro", "fle", "gri", "plo", "sta", "tre",
    "vin", "mar", "sol",
];

impl DecodeTable {
    pub fn decode(&self, token: Token) -> String {
        if let Some(m) = self.tokenizer.marker_text(token) {
            return m.to_string();
        }
        if let Some(&i) = self.pieces.get(&token) {
            return self.prompt.piece(i).to_string();
        }
        let id = token.0 as usize;
        format!(
            " {}{}{}",
            SYLLABLES[(id >> 10) & 31],
            SYLLABLES[(id >> 5) & 31],
            SYLLABLES[id & 31]
        )
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Newline,
    Space,
    OtherWs,
    Word,
    Punct,
}

fn class(c: char) -> Class {
    match c {
        '\n' => Class::Newline,
        ' ' => Class::Space,
        c if c.is_whitespace() => Class::OtherWs,
        c if c.is_alphanumeric() || c == '_' => Class::Word,
        _ => Class::Punct,
    }
}

/// Length of a `<|name|>` marker starting at byte `i`, if any.
fn marker_len(text: &str, i: usize) -> Option<usize> {
    let rest = &text.as_bytes()[i..];
    if rest.len() < 5 || rest[0] != b'<' || rest[1] != b'|' {
        return None;
    }
    let name_end = rest[2..]
        .iter()
        .take(MAX_MARKER_NAME + 1)
        .position(|&b| !(b.is_ascii_lowercase() || b == b'_'))?
        + 2;
    if name_end == 2 || rest.len() < name_end + 2 {
        return None;
    }
    (rest[name_end] == b'|' && rest[name_end + 1] == b'>').then_some(name_end + 2)
}

fn run_end(text: &str, mut i: usize, want: Class) -> usize {
    while let Some(c) = text[i..].chars().next() {
        if class(c) != want || (want == Class::Punct && marker_len(text, i).is_some()) {
            break;
        }
        i += c.len_utf8();
    }
    i
}

fn next_piece_end(text: &str, i: usize) -> Option<usize> {
    let c = text[i..].chars().next()?;
    if let Some(n) = marker_len(text, i) {
        return Some(i + n);
    }
    let end = match class(c) {
        Class::Newline => i + 1,
        Class::Word => run_end(text, i, Class::Word),
        Class::Punct => run_end(text, i, Class::Punct),
        Class::Space => {
            let after = i + 1;
            match text[after..].chars().next() {
                Some(n) if class(n) == Class::Word => run_end(text, after, Class::Word),
                Some(n) if class(n) == Class::Punct && marker_len(text, after).is_none() => {
                    run_end(text, after, Class::Punct)
                }
                _ => ws_run_end(text, i),
            }
        }
        Class::OtherWs => ws_run_end(text, i),
    };
    Some(end)
}

fn ws_run_end(text: &str, mut i: usize) -> usize {
    while let Some(c) = text[i..].chars().next() {
        if !matches!(class(c), Class::Space | Class::OtherWs) {
            break;
        }
        i += c.len_utf8();
    }
    i
}

fn lex(text: &str, mut i: usize, mut emit: impl FnMut(usize, usize)) {
    while let Some(end) = next_piece_end(text, i) {
        emit(i, end);
        i = end;
    }
}
