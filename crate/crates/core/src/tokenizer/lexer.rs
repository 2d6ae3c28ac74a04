//! Character-level scanner for the Java-like grammar.

use crate::error::{Error, Result};

/// Operator and punctuation symbols, longest first so that greedy matching works.
pub const SYMBOLS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<", ">>", "+", "-", "*", "/", "%", "&", "|",
    "^", "!", "~", "?", ":", "=", "<", ">", "(", ")", "{", "}", "[", "]", ";", ",", ".", "@",
];

pub const KEYWORDS: &[&str] = &[
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const",
    "continue", "default", "do", "double", "else", "enum", "extends", "final", "finally", "float",
    "for", "goto", "if", "implements", "import", "instanceof", "int", "interface", "long",
    "native", "new", "package", "private", "protected", "public", "return", "short", "static",
    "strictfp", "super", "switch", "synchronized", "this", "throw", "throws", "transient", "try",
    "void", "volatile", "while",
];

pub const PRIMITIVES: &[&str] = &[
    "boolean", "byte", "char", "short", "int", "long", "float", "double", "void",
];

/// Whether a token text is one of the grammar's atomic symbols.
pub fn is_symbol(text: &str) -> bool {
    SYMBOLS.contains(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawClass {
    Ident,
    Keyword,
    Literal,
    Symbol,
}

#[derive(Debug, Clone)]
pub struct RawToken {
    pub text: String,
    pub class: RawClass,
    pub offset: usize,
}

pub(crate) fn parse_error(source: &str, offset: usize, message: impl Into<String>) -> Error {
    let prefix = &source[..offset.min(source.len())];
    let line = prefix.matches('\n').count() + 1;
    let column = prefix.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    Error::Parse {
        offset,
        line,
        column,
        message: message.into(),
    }
}

pub fn lex(source: &str) -> Result<Vec<RawToken>> {
    let bytes = source.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if source[i..].starts_with("//") {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if source[i..].starts_with("/*") {
            match source[i + 2..].find("*/") {
                Some(end) => i += end + 4,
                None => return Err(parse_error(source, i, "unterminated block comment")),
            }
            continue;
        }
        let start = i;
        let ch = source[i..].chars().next().unwrap();
        if ch.is_alphabetic() || ch == '_' || ch == '$' {
            while i < bytes.len() {
                let ch = source[i..].chars().next().unwrap();
                if ch.is_alphanumeric() || ch == '_' || ch == '$' {
                    i += ch.len_utf8();
                } else {
                    break;
                }
            }
            let text = &source[start..i];
            let class = if matches!(text, "true" | "false" | "null") {
                RawClass::Literal
            } else if KEYWORDS.contains(&text) {
                RawClass::Keyword
            } else {
                RawClass::Ident
            };
            out.push(RawToken {
                text: text.to_string(),
                class,
                offset: start,
            });
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            i = scan_number(bytes, i);
            out.push(RawToken {
                text: source[start..i].to_string(),
                class: RawClass::Literal,
                offset: start,
            });
            continue;
        }
        if c == b'"' || c == b'\'' {
            i += 1;
            loop {
                match bytes.get(i) {
                    None | Some(b'\n') => {
                        return Err(parse_error(source, start, "unterminated literal"))
                    }
                    Some(b'\\') => i += 2,
                    Some(&b) if b == c => {
                        i += 1;
                        break;
                    }
                    Some(_) => i += 1,
                }
            }
            out.push(RawToken {
                text: source[start..i].to_string(),
                class: RawClass::Literal,
                offset: start,
            });
            continue;
        }
        match SYMBOLS.iter().find(|s| source[i..].starts_with(**s)) {
            Some(sym) => {
                i += sym.len();
                out.push(RawToken {
                    text: sym.to_string(),
                    class: RawClass::Symbol,
                    offset: start,
                });
            }
            None => return Err(parse_error(source, i, format!("unexpected character {ch:?}"))),
        }
    }
    Ok(out)
}

fn scan_number(bytes: &[u8], mut i: usize) -> usize {
    if bytes[i] == b'0' && matches!(bytes.get(i + 1), Some(b'x' | b'X' | b'b' | b'B')) {
        i += 2;
        while i < bytes.len() && (bytes[i].is_ascii_hexdigit() || bytes[i] == b'_') {
            i += 1;
        }
    } else {
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'_') {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)
        {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < bytes.len() && matches!(bytes[i], b'e' | b'E') {
            let mut j = i + 1;
            if matches!(bytes.get(j), Some(b'+' | b'-')) {
                j += 1;
            }
            if bytes.get(j).is_some_and(u8::is_ascii_digit) {
                i = j;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
        }
    }
    if i < bytes.len() && matches!(bytes[i], b'l' | b'L' | b'f' | b'F' | b'd' | b'D') {
        i += 1;
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(src: &str) -> Vec<String> {
        lex(src).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn greedy_operators() {
        assert_eq!(texts("a>>=b<=c"), ["a", ">>=", "b", "<=", "c"]);
        assert_eq!(texts("x>>>y"), ["x", ">>>", "y"]);
    }

    #[test]
    fn comments_and_literals() {
        assert_eq!(
            texts("s = \"a \\\" b\"; // tail\n/* block */ c = 'x' + 1.5e3f;"),
            ["s", "=", "\"a \\\" b\"", ";", "c", "=", "'x'", "+", "1.5e3f", ";"]
        );
    }

    #[test]
    fn unterminated_string_reports_position() {
        match lex("a = \"oops\n") {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (1, 5)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
