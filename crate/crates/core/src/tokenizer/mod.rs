//! Grammar-driven tokenization and byte-pair subtoken encoding.

mod bpe;
pub mod lexer;
mod parser;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bpe::{train_bpe, BpeReport, SpecialIds, SubtokenEncoding, SubtokenModel, UNK_GLYPH};
pub use parser::BINARY_OPERATORS;

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[M]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Identifier,
    BinaryOperator,
    CallName,
    Keyword,
    Literal,
    Punctuation,
    Other,
}

/// Variable role of an identifier within its function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    #[default]
    None,
    Declaration,
    Use,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    pub index: usize,
    #[serde(default)]
    pub binding: Binding,
}

/// `[CLS] t1 .. tn [EOS]`, with token indices equal to positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    /// Wraps grammar tokens with the sentinels and renumbers them.
    pub fn from_body(body: impl IntoIterator<Item = Token>) -> Self {
        let mut tokens = vec![sentinel(CLS)];
        tokens.extend(body);
        tokens.push(sentinel(EOS));
        for (i, t) in tokens.iter_mut().enumerate() {
            t.index = i;
        }
        TokenSequence { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Token> {
        self.tokens.get(index)
    }

    pub fn texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    pub fn is_sentinel(&self, index: usize) -> bool {
        index == 0 || index + 1 == self.tokens.len()
    }

    /// Copy of the sequence with the token at `index` replaced by `text`.
    /// Kind and binding are kept: replacements stay within a syntactic class.
    pub fn with_replacement(&self, index: usize, text: &str) -> Self {
        let mut out = self.clone();
        out.tokens[index].text = text.to_string();
        out
    }
}

fn sentinel(text: &str) -> Token {
    Token {
        text: text.to_string(),
        kind: TokenKind::Other,
        index: 0,
        binding: Binding::None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grammar {
    /// Java-like method declarations: statements, expressions, calls, generics.
    #[default]
    Java,
}

impl Grammar {
    pub fn tokenize(self, source: &str) -> Result<TokenSequence> {
        match self {
            Grammar::Java => {
                let raw = lexer::lex(source)?;
                if raw.is_empty() {
                    return Err(lexer::parse_error(source, 0, "empty source"));
                }
                let annotated = parser::parse_function(source, &raw)?;
                Ok(TokenSequence::from_body(raw.into_iter().zip(annotated).map(
                    |(raw, ann)| Token {
                        text: raw.text,
                        kind: ann.kind,
                        index: 0,
                        binding: ann.binding,
                    },
                )))
            }
        }
    }
}

impl FromStr for Grammar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "java" | "" => Ok(Grammar::Java),
            other => Err(Error::InvalidArgument(format!("unsupported grammar {other:?}"))),
        }
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grammar::Java => f.write_str("java"),
        }
    }
}

pub fn tokenize(source: &str, grammar: Grammar) -> Result<TokenSequence> {
    grammar.tokenize(source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenKind::*;

    fn kinds(src: &str) -> Vec<(String, TokenKind)> {
        tokenize(src, Grammar::Java)
            .unwrap()
            .tokens()
            .iter()
            .map(|t| (t.text.clone(), t.kind))
            .collect()
    }

    fn find<'a>(seq: &'a TokenSequence, text: &str) -> Vec<&'a Token> {
        seq.tokens().iter().filter(|t| t.text == text).collect()
    }

    #[test]
    fn if_condition_kinds() {
        let seq = tokenize("void f(int x, int n) { if (x <= n) return; }", Grammar::Java).unwrap();
        let slice: Vec<_> = seq.tokens()[11..18]
            .iter()
            .map(|t| (t.text.as_str(), t.kind))
            .collect();
        assert_eq!(
            slice,
            [
                ("if", Keyword),
                ("(", Punctuation),
                ("x", Identifier),
                ("<=", BinaryOperator),
                ("n", Identifier),
                (")", Punctuation),
                ("return", Keyword),
            ]
        );
        assert_eq!(seq.tokens()[0].text, CLS);
        assert_eq!(seq.tokens().last().unwrap().text, EOS);
        assert!(seq.tokens().iter().enumerate().all(|(i, t)| t.index == i));
    }

    #[test]
    fn empty_body() {
        let k = kinds("public void run() {}");
        let texts: Vec<_> = k.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(texts, [CLS, "public", "void", "run", "(", ")", "{", "}", EOS]);
    }

    #[test]
    fn call_name_vs_receiver() {
        let seq =
            tokenize("boolean f(Graph graph) { return graph.hasNodes(); }", Grammar::Java).unwrap();
        let call = find(&seq, "hasNodes");
        assert_eq!(call[0].kind, CallName);
        let recv = find(&seq, "graph");
        assert_eq!(recv[0].binding, Binding::Declaration);
        assert_eq!(recv[1].kind, Identifier);
        assert_eq!(recv[1].binding, Binding::Use);
    }

    #[test]
    fn generics_and_shift() {
        let seq = tokenize(
            "int f(Map<String, List<Integer>> m, int a) { int b = a >> 2; return b < a ? 1 : 0; }",
            Grammar::Java,
        )
        .unwrap();
        assert_eq!(find(&seq, ">>")[0].kind, Punctuation);
        assert_eq!(find(&seq, ">>")[1].kind, BinaryOperator);
        assert_eq!(find(&seq, "<")[0].kind, Punctuation);
        assert_eq!(find(&seq, "<")[2].kind, BinaryOperator);
        assert_eq!(find(&seq, "?")[0].kind, Other);
    }

    #[test]
    fn casts_unary_and_fields() {
        let seq = tokenize(
            "double f(int[] xs, Point p) { double d = (double) xs.length - -p.x; d += 1; return d; }",
            Grammar::Java,
        )
        .unwrap();
        let minus = find(&seq, "-");
        assert_eq!(minus[0].kind, BinaryOperator);
        assert_eq!(minus[1].kind, Other);
        assert_eq!(find(&seq, "length")[0].binding, Binding::None);
        assert_eq!(find(&seq, "+=")[0].kind, Other);
        let d: Vec<_> = find(&seq, "d").iter().map(|t| t.binding).collect();
        assert_eq!(d, [Binding::Declaration, Binding::Use, Binding::Use]);
    }

    #[test]
    fn statements_cover_control_flow() {
        let src = r#"
            @Override
            public static <T extends Comparable<T>> int count(List<T> items, T pivot) throws IOException {
                int n = 0;
                for (T item : items) { if (item.compareTo(pivot) > 0) n++; }
                for (int i = 0, j = 10; i < j; i++, j--) { continue; }
                while (n > 100) { n /= 2; }
                do { n--; } while (n % 2 != 0 && n > 1);
                try (Reader r = open()) { r.read(); } catch (IOException | RuntimeException e) { throw e; } finally { close(); }
                switch (n) { case 1: case 2: n = 3; break; default: n = 4; }
                String[] names = new String[] {"a", "b"};
                int[][] grid = new int[3][n];
                Runnable task = new Runnable() { public void run() { } };
                synchronized (this) { n = names.length + grid.length; }
                return n instanceof Integer ? n : -1;
            }
        "#;
        let seq = tokenize(src, Grammar::Java).unwrap();
        let decls: Vec<_> = seq
            .tokens()
            .iter()
            .filter(|t| t.binding == Binding::Declaration)
            .map(|t| t.text.as_str())
            .collect();
        assert_eq!(decls, ["items", "pivot", "n", "item", "i", "j", "r", "e", "names", "grid", "task"]);
    }

    #[test]
    fn parse_error_carries_position() {
        match tokenize("void f() {\n  int x = ;\n}", Grammar::Java) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(tokenize("", Grammar::Java).is_err());
    }

    #[test]
    fn single_token_edit_is_local() {
        let a = tokenize("int f(int a, int b) { return a < b ? a : b; }", Grammar::Java).unwrap();
        let b = tokenize("int f(int a, int b) { return a > b ? a : b; }", Grammar::Java).unwrap();
        assert_eq!(a.len(), b.len());
        let diffs: Vec<_> = a
            .tokens()
            .iter()
            .zip(b.tokens())
            .filter(|(x, y)| x != y)
            .collect();
        assert_eq!(diffs.len(), 1);
    }
}
