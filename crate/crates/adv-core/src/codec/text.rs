//! Text rendering of token ids and the stand-in character-level tokenizer.
//!
//! Token ids render as base-10 integers separated by single spaces and
//! terminated by a newline. The tokenizer maps each character of that text to
//! a fixed id: newline to 198, digits '0'..'9' to 14..23, then '-', ' ' and
//! '|' to 24, 25 and 26. Ids 0, 1 and 2 are reserved for BOS, EOS and PAD.

use alloc::string::String;
use alloc::vec::Vec;

use super::CodecError;
use crate::TokenSeq;

/// Renders token ids as decimal text: `[12, 407, 3]` becomes `"12 407 3\n"`.
pub fn render_text(tokens: &[u32]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        push_decimal(&mut out, *tok);
    }
    out.push('\n');
    out
}

fn push_decimal(out: &mut String, mut v: u32) {
    let mut digits = [0u8; 10];
    let mut n = 0;
    loop {
        digits[n] = b'0' + (v % 10) as u8;
        v /= 10;
        n += 1;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(digits[i] as char);
    }
}

/// Exact inverse of [`render_text`]; rejects anything the renderer cannot
/// emit (double spaces, leading zeros, missing terminator, trailing bytes).
pub fn parse_text(s: &str) -> Result<TokenSeq, CodecError> {
    let bytes = s.as_bytes();
    let Some(&last) = bytes.last() else {
        return Err(parse_err(0, "empty input, expected newline-terminated text"));
    };
    if last != b'\n' {
        return Err(parse_err(bytes.len(), "missing trailing newline"));
    }
    let body = &bytes[..bytes.len() - 1];
    if body.len() + 1 != bytes.len() || body.contains(&b'\n') {
        return Err(parse_err(
            body.iter().position(|&b| b == b'\n').unwrap_or(0),
            "newline before end of text",
        ));
    }
    let mut tokens = Vec::new();
    if body.is_empty() {
        return Ok(tokens);
    }
    let mut pos = 0;
    loop {
        let start = pos;
        while pos < body.len() && body[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(parse_err(start, "expected digit"));
        }
        if body[start] == b'0' && pos - start > 1 {
            return Err(parse_err(start, "leading zero"));
        }
        let mut value: u64 = 0;
        for &b in &body[start..pos] {
            value = value * 10 + u64::from(b - b'0');
            if value > u64::from(u32::MAX) {
                return Err(parse_err(start, "token id overflows u32"));
            }
        }
        tokens.push(value as u32);
        if pos == body.len() {
            return Ok(tokens);
        }
        if body[pos] != b' ' {
            return Err(parse_err(pos, "expected single space"));
        }
        pos += 1;
        if pos == body.len() {
            return Err(parse_err(pos, "trailing space before newline"));
        }
    }
}

fn parse_err(offset: usize, reason: &'static str) -> CodecError {
    CodecError::Parse { offset, reason }
}

/// Character-level stand-in for a pretrained text tokenizer.
///
/// The map is a bijection on its alphabet, so tokenize∘detokenize and
/// detokenize∘tokenize are identities. BOS/EOS/PAD have no character; they
/// exist only for sequence models downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokenizer {
    alphabet: [(char, u32); 14],
}

impl TextTokenizer {
    pub const BOS: u32 = 0;
    pub const EOS: u32 = 1;
    pub const PAD: u32 = 2;

    pub fn standard() -> Self {
        let mut alphabet = [('\0', 0u32); 14];
        alphabet[0] = ('\n', 198);
        for i in 0..10u32 {
            alphabet[1 + i as usize] = ((b'0' + i as u8) as char, 14 + i);
        }
        alphabet[11] = ('-', 24);
        alphabet[12] = (' ', 25);
        alphabet[13] = ('|', 26);
        TextTokenizer { alphabet }
    }

    /// Number of ids addressable by this tokenizer (highest id + 1).
    pub fn vocab_size(&self) -> usize {
        199
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == Self::BOS || id == Self::EOS || id == Self::PAD
    }

    pub fn char_to_id(&self, c: char) -> Result<u32, CodecError> {
        self.alphabet
            .iter()
            .find(|(ch, _)| *ch == c)
            .map(|&(_, id)| id)
            .ok_or(CodecError::UnknownCharacter(c))
    }

    pub fn id_to_char(&self, id: u32) -> Result<char, CodecError> {
        self.alphabet
            .iter()
            .find(|(_, i)| *i == id)
            .map(|&(c, _)| c)
            .ok_or(CodecError::UnknownTokenId(id))
    }

    pub fn tokenize(&self, s: &str) -> Result<TokenSeq, CodecError> {
        s.chars().map(|c| self.char_to_id(c)).collect()
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<String, CodecError> {
        tokens.iter().map(|&id| self.id_to_char(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn renders_stated_format() {
        assert_eq!(render_text(&[12, 407, 3]), "12 407 3\n");
        assert_eq!(render_text(&[]), "\n");
        assert_eq!(render_text(&[0]), "0\n");
    }

    #[test]
    fn parse_inverts_render() {
        for tokens in [vec![], vec![0], vec![12, 407, 3], vec![u32::MAX, 0, 1]] {
            assert_eq!(parse_text(&render_text(&tokens)).unwrap(), tokens);
        }
    }

    #[test]
    fn parse_rejects_malformed_text() {
        for (input, offset) in [
            ("12  407\n", 3),        // double space
            ("12 407", 6),           // missing newline
            ("", 0),                 // empty
            ("012\n", 0),            // leading zero
            (" 12\n", 0),            // leading space
            ("12 \n", 3),            // trailing space
            ("12\n3\n", 2),          // newline before end
            ("4294967296\n", 0),     // overflow
            ("1a\n", 1),             // stray character
        ] {
            match parse_text(input) {
                Err(CodecError::Parse { offset: got, .. }) => {
                    assert_eq!(got, offset, "input {input:?}")
                }
                other => panic!("input {input:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn figure_consistent_character_ids() {
        let tk = TextTokenizer::standard();
        assert_eq!(tk.tokenize("0").unwrap(), vec![14]);
        assert_eq!(tk.tokenize("\n").unwrap(), vec![198]);
        assert_eq!(tk.tokenize("1").unwrap(), vec![15]);
        assert_eq!(tk.tokenize("2").unwrap(), vec![16]);
        assert_eq!(tk.tokenize("9").unwrap(), vec![23]);
        assert_eq!(tk.tokenize("-").unwrap(), vec![24]);
        assert_eq!(tk.tokenize(" ").unwrap(), vec![25]);
        assert_eq!(tk.tokenize("|").unwrap(), vec![26]);
    }

    #[test]
    fn tokenizer_round_trips() {
        let tk = TextTokenizer::standard();
        let s = "12 407 3\n";
        let ids = tk.tokenize(s).unwrap();
        assert_eq!(tk.detokenize(&ids).unwrap(), s);
        let back = tk.tokenize(&tk.detokenize(&ids).unwrap()).unwrap();
        assert_eq!(back, ids);
    }

    #[test]
    fn tokenizer_rejects_out_of_alphabet_input() {
        let tk = TextTokenizer::standard();
        assert_eq!(tk.tokenize("a"), Err(CodecError::UnknownCharacter('a')));
        assert_eq!(tk.detokenize(&[3]), Err(CodecError::UnknownTokenId(3)));
        // Specials have no character form.
        assert!(tk.detokenize(&[TextTokenizer::BOS]).is_err());
    }
}
