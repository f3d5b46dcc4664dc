use crate::error::{ParseError, ParseErrorKind};

/// Maximal-munch lexing of a SMILES string.
///
/// Bracket atoms, `Cl`, `Br` and `%nn` ring labels are single tokens; every
/// other character stands alone. Joining the tokens gives back `s`.
pub fn tokenize(s: &str) -> Result<Vec<String>, ParseError> {
    if s.is_empty() {
        return Err(ParseError {
            offset: 0,
            kind: ParseErrorKind::Empty,
        });
    }
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let len = match bytes[i] {
            b'[' => match s[i..].find(']') {
                Some(close) => close + 1,
                None => {
                    return Err(ParseError {
                        offset: i,
                        kind: ParseErrorKind::UnterminatedBracket,
                    })
                }
            },
            b'C' if bytes.get(i + 1) == Some(&b'l') => 2,
            b'B' if bytes.get(i + 1) == Some(&b'r') => 2,
            b'%' if bytes.len() >= i + 3 && bytes[i + 1].is_ascii_digit() && bytes[i + 2].is_ascii_digit() => 3,
            _ => s[i..].chars().next().map_or(1, char::len_utf8),
        };
        out.push(s[i..i + len].to_string());
        i += len;
    }
    Ok(out)
}
