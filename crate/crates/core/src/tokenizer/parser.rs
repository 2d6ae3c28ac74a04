//! Recursive-descent parser for a Java-like method subset.
//!
//! The parser does not build a tree. It walks the grammar and records, for
//! every leaf it consumes, the syntactic role that decides the leaf's
//! [`TokenKind`] and variable [`Binding`]. Speculative parses (declaration vs
//! expression statement, casts) rewind both the cursor and the role log.

use std::collections::HashSet;

use super::lexer::{parse_error, RawClass, RawToken, PRIMITIVES};
use super::{Binding, TokenKind};
use crate::error::{Error, Result};

/// The binary operators that participate in operator replacement.
pub const BINARY_OPERATORS: &[&str] = &[
    "==", "!=", "<", ">", "<=", ">=", "+", "-", "*", "/", "%", "&&", "||", "&", "|", "^", "<<", ">>",
];

const ASSIGN_OPS: &[&str] = &[
    "=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>=", ">>>=",
];

const MODIFIERS: &[&str] = &[
    "public", "private", "protected", "static", "final", "abstract", "synchronized", "native",
    "strictfp", "default", "transient", "volatile",
];

fn precedence(op: &str) -> Option<u8> {
    Some(match op {
        "||" => 1,
        "&&" => 2,
        "|" => 3,
        "^" => 4,
        "&" => 5,
        "==" | "!=" => 6,
        "<" | ">" | "<=" | ">=" | "instanceof" => 7,
        "<<" | ">>" | ">>>" => 8,
        "+" | "-" => 9,
        "*" | "/" | "%" => 10,
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    BinaryOp,
    Call,
    VarDecl,
    /// Bare name in expression position; becomes a variable use if the name is
    /// declared anywhere in the function.
    Name,
    TypeName,
    Member,
    Punct,
    Operator,
}

#[derive(Clone, Copy)]
struct Save {
    pos: usize,
    log: usize,
    pending_gt: usize,
}

pub(super) struct Annotated {
    pub kind: TokenKind,
    pub binding: Binding,
}

struct Parser<'a> {
    src: &'a str,
    toks: &'a [RawToken],
    pos: usize,
    log: Vec<(usize, Role)>,
    /// Closing angle brackets still owed by a `>>`/`>>>` token in a type.
    pending_gt: usize,
}

pub(super) fn parse_function(src: &str, toks: &[RawToken]) -> Result<Vec<Annotated>> {
    let mut p = Parser {
        src,
        toks,
        pos: 0,
        log: Vec::new(),
        pending_gt: 0,
    };
    p.function()?;
    if p.pos != toks.len() {
        return Err(p.error("trailing tokens after function body"));
    }
    Ok(p.finish())
}

impl<'a> Parser<'a> {
    fn finish(self) -> Vec<Annotated> {
        let mut roles: Vec<Option<Role>> = vec![None; self.toks.len()];
        for &(idx, role) in &self.log {
            roles[idx] = Some(role);
        }
        let declared: HashSet<&str> = roles
            .iter()
            .zip(self.toks)
            .filter(|(r, _)| **r == Some(Role::VarDecl))
            .map(|(_, t)| t.text.as_str())
            .collect();
        self.toks
            .iter()
            .zip(roles)
            .map(|(tok, role)| {
                let default = match tok.class {
                    RawClass::Ident => TokenKind::Identifier,
                    RawClass::Keyword => TokenKind::Keyword,
                    RawClass::Literal => TokenKind::Literal,
                    RawClass::Symbol => {
                        if is_punctuation(&tok.text) {
                            TokenKind::Punctuation
                        } else {
                            TokenKind::Other
                        }
                    }
                };
                match role {
                    Some(Role::BinaryOp) => Annotated {
                        kind: TokenKind::BinaryOperator,
                        binding: Binding::None,
                    },
                    Some(Role::Call) => Annotated {
                        kind: TokenKind::CallName,
                        binding: Binding::None,
                    },
                    Some(Role::VarDecl) => Annotated {
                        kind: TokenKind::Identifier,
                        binding: Binding::Declaration,
                    },
                    Some(Role::Name) if declared.contains(tok.text.as_str()) => Annotated {
                        kind: TokenKind::Identifier,
                        binding: Binding::Use,
                    },
                    Some(Role::Punct) => Annotated {
                        kind: TokenKind::Punctuation,
                        binding: Binding::None,
                    },
                    Some(Role::Operator) => Annotated {
                        kind: TokenKind::Other,
                        binding: Binding::None,
                    },
                    _ => Annotated {
                        kind: default,
                        binding: Binding::None,
                    },
                }
            })
            .collect()
    }

    fn error(&self, message: &str) -> Error {
        let offset = self
            .toks
            .get(self.pos)
            .map_or(self.src.len(), |t| t.offset);
        let found = self
            .toks
            .get(self.pos)
            .map_or("end of input".to_string(), |t| format!("{:?}", t.text));
        parse_error(self.src, offset, format!("{message} (found {found})"))
    }

    fn save(&self) -> Save {
        Save {
            pos: self.pos,
            log: self.log.len(),
            pending_gt: self.pending_gt,
        }
    }

    fn restore(&mut self, s: Save) {
        self.pos = s.pos;
        self.log.truncate(s.log);
        self.pending_gt = s.pending_gt;
    }

    fn peek(&self) -> Option<&'a RawToken> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, k: usize) -> Option<&'a RawToken> {
        self.toks.get(self.pos + k)
    }

    fn at(&self, text: &str) -> bool {
        self.peek().is_some_and(|t| t.text == text && t.class != RawClass::Literal)
    }

    fn at_ident(&self) -> bool {
        self.peek().is_some_and(|t| t.class == RawClass::Ident)
    }

    fn mark(&mut self, role: Role) {
        self.log.push((self.pos, role));
    }

    fn bump(&mut self) {
        self.pos += 1;
    }

    fn eat(&mut self, text: &str) -> bool {
        if self.at(text) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, text: &str) -> Result<()> {
        if self.eat(text) {
            Ok(())
        } else {
            Err(self.error(&format!("expected {text:?}")))
        }
    }

    fn expect_ident(&mut self, role: Option<Role>) -> Result<()> {
        if !self.at_ident() {
            return Err(self.error("expected identifier"));
        }
        if let Some(role) = role {
            self.mark(role);
        }
        self.bump();
        Ok(())
    }

    fn skip_annotation(&mut self) -> Result<()> {
        self.expect("@")?;
        self.expect_ident(Some(Role::TypeName))?;
        while self.at(".") {
            self.bump();
            self.expect_ident(Some(Role::TypeName))?;
        }
        if self.at("(") {
            self.bump();
            if !self.at(")") {
                self.expression()?;
                while self.eat(",") {
                    self.expression()?;
                }
            }
            self.expect(")")?;
        }
        Ok(())
    }

    fn modifiers(&mut self) -> Result<()> {
        loop {
            if self.at("@") && !self.peek_at(1).is_some_and(|t| t.text == "interface") {
                self.skip_annotation()?;
            } else if self.peek().is_some_and(|t| MODIFIERS.contains(&t.text.as_str())) {
                self.bump();
            } else {
                return Ok(());
            }
        }
    }

    fn function(&mut self) -> Result<()> {
        self.modifiers()?;
        if self.at("<") {
            self.type_parameters()?;
        }
        let constructor = self.at_ident() && self.peek_at(1).is_some_and(|t| t.text == "(");
        if !constructor {
            self.ty()?;
        }
        self.expect_ident(None)?;
        self.expect("(")?;
        if !self.at(")") {
            self.parameter()?;
            while self.eat(",") {
                self.parameter()?;
            }
        }
        self.expect(")")?;
        while self.at("[") {
            self.bump();
            self.expect("]")?;
        }
        if self.eat("throws") {
            self.ty()?;
            while self.eat(",") {
                self.ty()?;
            }
        }
        if self.eat(";") {
            return Ok(());
        }
        self.block()
    }

    fn type_parameters(&mut self) -> Result<()> {
        self.mark(Role::Punct);
        self.expect("<")?;
        loop {
            self.expect_ident(Some(Role::TypeName))?;
            if self.eat("extends") {
                self.ty()?;
                while self.at("&") {
                    self.mark(Role::Punct);
                    self.bump();
                    self.ty()?;
                }
            }
            if !self.eat(",") {
                break;
            }
        }
        self.close_angle()
    }

    fn parameter(&mut self) -> Result<()> {
        self.modifiers()?;
        self.ty()?;
        self.eat("...");
        self.expect_ident(Some(Role::VarDecl))?;
        while self.at("[") {
            self.bump();
            self.expect("]")?;
        }
        Ok(())
    }

    fn ty(&mut self) -> Result<()> {
        match self.peek() {
            Some(t) if t.class == RawClass::Keyword && PRIMITIVES.contains(&t.text.as_str()) => {
                self.bump()
            }
            Some(t) if t.class == RawClass::Ident => {
                self.mark(Role::TypeName);
                self.bump();
                if self.at("<") {
                    self.type_arguments()?;
                }
                while self.at(".") && self.peek_at(1).is_some_and(|t| t.class == RawClass::Ident) {
                    self.bump();
                    self.mark(Role::TypeName);
                    self.bump();
                    if self.at("<") {
                        self.type_arguments()?;
                    }
                }
            }
            _ => return Err(self.error("expected type")),
        }
        while self.at("[") && self.peek_at(1).is_some_and(|t| t.text == "]") {
            self.bump();
            self.bump();
        }
        Ok(())
    }

    fn type_arguments(&mut self) -> Result<()> {
        self.mark(Role::Punct);
        self.expect("<")?;
        if self.at(">") {
            self.mark(Role::Punct);
            self.bump();
            return Ok(());
        }
        loop {
            if self.at("?") {
                self.mark(Role::Punct);
                self.bump();
                if self.eat("extends") || self.eat("super") {
                    self.ty()?;
                }
            } else {
                self.ty()?;
            }
            if self.pending_gt > 0 || !self.eat(",") {
                break;
            }
        }
        self.close_angle()
    }

    fn close_angle(&mut self) -> Result<()> {
        if self.pending_gt > 0 {
            self.pending_gt -= 1;
            return Ok(());
        }
        let extra = match self.peek().map(|t| t.text.as_str()) {
            Some(">") => 0,
            Some(">>") => 1,
            Some(">>>") => 2,
            _ => return Err(self.error("expected '>'")),
        };
        self.mark(Role::Punct);
        self.bump();
        self.pending_gt = extra;
        Ok(())
    }

    fn block(&mut self) -> Result<()> {
        self.expect("{")?;
        while !self.at("}") {
            if self.peek().is_none() {
                return Err(self.error("unterminated block"));
            }
            self.statement()?;
        }
        self.bump();
        Ok(())
    }

    fn par_expression(&mut self) -> Result<()> {
        self.expect("(")?;
        self.expression()?;
        self.expect(")")
    }

    fn statement(&mut self) -> Result<()> {
        let Some(tok) = self.peek() else {
            return Err(self.error("expected statement"));
        };
        if tok.class == RawClass::Keyword {
            match tok.text.as_str() {
                "if" => {
                    self.bump();
                    self.par_expression()?;
                    self.statement()?;
                    if self.eat("else") {
                        self.statement()?;
                    }
                    return Ok(());
                }
                "while" => {
                    self.bump();
                    self.par_expression()?;
                    return self.statement();
                }
                "do" => {
                    self.bump();
                    self.statement()?;
                    self.expect("while")?;
                    self.par_expression()?;
                    return self.expect(";");
                }
                "for" => return self.for_statement(),
                "return" | "throw" => {
                    self.bump();
                    if !self.at(";") {
                        self.expression()?;
                    }
                    return self.expect(";");
                }
                "break" | "continue" => {
                    self.bump();
                    if self.at_ident() {
                        self.bump();
                    }
                    return self.expect(";");
                }
                "try" => return self.try_statement(),
                "switch" => return self.switch_statement(),
                "synchronized" => {
                    self.bump();
                    self.par_expression()?;
                    return self.block();
                }
                "assert" => {
                    self.bump();
                    self.expression()?;
                    if self.at(":") {
                        self.mark(Role::Punct);
                        self.bump();
                        self.expression()?;
                    }
                    return self.expect(";");
                }
                _ => {}
            }
        }
        if self.at("{") {
            return self.block();
        }
        if self.eat(";") {
            return Ok(());
        }
        if self.at_ident() && self.peek_at(1).is_some_and(|t| t.text == ":") {
            self.bump();
            self.bump();
            return self.statement();
        }
        if self.local_declaration()? {
            return self.expect(";");
        }
        self.expression()?;
        self.expect(";")
    }

    fn for_statement(&mut self) -> Result<()> {
        self.expect("for")?;
        self.expect("(")?;
        // enhanced for: [final] Type name ':'
        let s = self.save();
        let enhanced = self.modifiers().is_ok()
            && self.ty().is_ok()
            && self.at_ident()
            && self.peek_at(1).is_some_and(|t| t.text == ":");
        if enhanced {
            self.expect_ident(Some(Role::VarDecl))?;
            self.bump();
            self.expression()?;
            self.expect(")")?;
            return self.statement();
        }
        self.restore(s);
        if !self.at(";") && !self.local_declaration()? {
            self.expression()?;
            while self.eat(",") {
                self.expression()?;
            }
        }
        self.expect(";")?;
        if !self.at(";") {
            self.expression()?;
        }
        self.expect(";")?;
        if !self.at(")") {
            self.expression()?;
            while self.eat(",") {
                self.expression()?;
            }
        }
        self.expect(")")?;
        self.statement()
    }

    fn try_statement(&mut self) -> Result<()> {
        self.expect("try")?;
        if self.eat("(") {
            loop {
                if !self.local_declaration()? {
                    self.expression()?;
                }
                if !self.eat(";") || self.at(")") {
                    break;
                }
            }
            self.expect(")")?;
        }
        self.block()?;
        let mut handlers = 0;
        while self.eat("catch") {
            self.expect("(")?;
            self.modifiers()?;
            self.ty()?;
            while self.at("|") {
                self.mark(Role::Punct);
                self.bump();
                self.ty()?;
            }
            self.expect_ident(Some(Role::VarDecl))?;
            self.expect(")")?;
            self.block()?;
            handlers += 1;
        }
        if self.eat("finally") {
            self.block()?;
            handlers += 1;
        }
        if handlers == 0 {
            return Err(self.error("try without catch or finally"));
        }
        Ok(())
    }

    fn switch_statement(&mut self) -> Result<()> {
        self.expect("switch")?;
        self.par_expression()?;
        self.expect("{")?;
        while !self.at("}") {
            if self.eat("case") {
                self.ternary()?;
                while self.eat(",") {
                    self.ternary()?;
                }
                self.expect(":")?;
            } else if self.eat("default") {
                self.expect(":")?;
            } else if self.peek().is_none() {
                return Err(self.error("unterminated switch"));
            } else {
                self.statement()?;
            }
        }
        self.bump();
        Ok(())
    }

    /// Speculatively parses `[final] Type name [= init] {, name [= init]}`.
    fn local_declaration(&mut self) -> Result<bool> {
        let s = self.save();
        let looks_like = self.modifiers().is_ok()
            && self.ty().is_ok()
            && self.at_ident()
            && self
                .peek_at(1)
                .is_some_and(|t| matches!(t.text.as_str(), "=" | ";" | "," | "[" | ":" | ")"));
        if !looks_like {
            self.restore(s);
            return Ok(false);
        }
        loop {
            self.expect_ident(Some(Role::VarDecl))?;
            while self.at("[") {
                self.bump();
                self.expect("]")?;
            }
            if self.at("=") {
                self.mark(Role::Operator);
                self.bump();
                self.variable_initializer()?;
            }
            if !self.eat(",") {
                break;
            }
        }
        Ok(true)
    }

    fn variable_initializer(&mut self) -> Result<()> {
        if self.at("{") {
            self.bump();
            while !self.at("}") {
                self.variable_initializer()?;
                if !self.eat(",") {
                    break;
                }
            }
            self.expect("}")
        } else {
            self.expression()
        }
    }

    fn expression(&mut self) -> Result<()> {
        self.ternary()?;
        if self.peek().is_some_and(|t| {
            t.class == RawClass::Symbol && ASSIGN_OPS.contains(&t.text.as_str())
        }) {
            self.mark(Role::Operator);
            self.bump();
            self.expression()?;
        }
        Ok(())
    }

    fn ternary(&mut self) -> Result<()> {
        self.binary(1)?;
        if self.at("?") {
            self.mark(Role::Operator);
            self.bump();
            self.expression()?;
            self.mark(Role::Operator);
            self.expect(":")?;
            self.ternary()?;
        }
        Ok(())
    }

    fn binary(&mut self, min_prec: u8) -> Result<()> {
        self.unary()?;
        loop {
            let Some(tok) = self.peek() else {
                return Ok(());
            };
            if tok.class == RawClass::Literal {
                return Ok(());
            }
            let Some(prec) = precedence(&tok.text) else {
                return Ok(());
            };
            if prec < min_prec {
                return Ok(());
            }
            if tok.text == "instanceof" {
                self.bump();
                self.ty()?;
                continue;
            }
            if BINARY_OPERATORS.contains(&tok.text.as_str()) {
                self.mark(Role::BinaryOp);
            } else {
                self.mark(Role::Operator);
            }
            self.bump();
            self.binary(prec + 1)?;
        }
    }

    fn unary(&mut self) -> Result<()> {
        if let Some(tok) = self.peek() {
            if tok.class == RawClass::Symbol
                && matches!(tok.text.as_str(), "+" | "-" | "!" | "~" | "++" | "--")
            {
                self.mark(Role::Operator);
                self.bump();
                return self.unary();
            }
        }
        if self.at("(") && self.is_cast() {
            self.bump();
            self.ty()?;
            self.expect(")")?;
            return self.unary();
        }
        self.postfix()
    }

    fn is_cast(&mut self) -> bool {
        let s = self.save();
        self.bump();
        let primitive = self
            .peek()
            .is_some_and(|t| t.class == RawClass::Keyword && PRIMITIVES.contains(&t.text.as_str()));
        let ok = self.ty().is_ok() && self.at(")") && {
            let next = self.peek_at(1);
            primitive
                || next.is_some_and(|t| match t.class {
                    RawClass::Ident | RawClass::Literal => true,
                    RawClass::Keyword => matches!(t.text.as_str(), "this" | "new" | "super"),
                    RawClass::Symbol => matches!(t.text.as_str(), "(" | "!" | "~"),
                })
        };
        self.restore(s);
        ok
    }

    fn arguments(&mut self) -> Result<()> {
        self.expect("(")?;
        if !self.at(")") {
            self.expression()?;
            while self.eat(",") {
                self.expression()?;
            }
        }
        self.expect(")")
    }

    fn postfix(&mut self) -> Result<()> {
        self.primary()?;
        loop {
            if self.at(".") {
                self.bump();
                match self.peek() {
                    Some(t) if t.class == RawClass::Ident => {
                        if self.peek_at(1).is_some_and(|t| t.text == "(") {
                            self.mark(Role::Call);
                            self.bump();
                            self.arguments()?;
                        } else {
                            self.mark(Role::Member);
                            self.bump();
                        }
                    }
                    Some(t) if matches!(t.text.as_str(), "this" | "class" | "super") => self.bump(),
                    Some(t) if t.text == "new" => self.creator()?,
                    _ => return Err(self.error("expected member name")),
                }
            } else if self.at("[") {
                self.bump();
                self.expression()?;
                self.expect("]")?;
            } else if self.at("++") || self.at("--") {
                self.mark(Role::Operator);
                self.bump();
            } else if self.at("::") {
                self.bump();
                if !self.eat("new") {
                    self.expect_ident(Some(Role::Member))?;
                }
            } else {
                return Ok(());
            }
        }
    }

    fn primary(&mut self) -> Result<()> {
        let Some(tok) = self.peek() else {
            return Err(self.error("expected expression"));
        };
        match tok.class {
            RawClass::Literal => {
                self.bump();
                Ok(())
            }
            RawClass::Ident => {
                if self.peek_at(1).is_some_and(|t| t.text == "(") {
                    self.mark(Role::Call);
                    self.bump();
                    self.arguments()
                } else {
                    self.mark(Role::Name);
                    self.bump();
                    Ok(())
                }
            }
            RawClass::Keyword => match tok.text.as_str() {
                "this" | "super" => {
                    self.bump();
                    if self.at("(") {
                        self.arguments()?;
                    }
                    Ok(())
                }
                "new" => self.creator(),
                t if PRIMITIVES.contains(&t) => {
                    self.ty()?;
                    self.expect(".")?;
                    self.expect("class")
                }
                _ => Err(self.error("unexpected keyword in expression")),
            },
            RawClass::Symbol => {
                if tok.text == "(" {
                    self.par_expression()
                } else {
                    Err(self.error("expected expression"))
                }
            }
        }
    }

    fn creator(&mut self) -> Result<()> {
        self.expect("new")?;
        self.ty_no_dims()?;
        if self.at("[") {
            let mut sized = false;
            while self.at("[") {
                self.bump();
                if self.at("]") {
                    self.bump();
                } else {
                    self.expression()?;
                    self.expect("]")?;
                    sized = true;
                }
            }
            if !sized {
                self.variable_initializer()?;
            }
            return Ok(());
        }
        self.arguments()?;
        if self.at("{") {
            // anonymous class body: skipped with default token kinds
            let mut depth = 0usize;
            loop {
                match self.peek().map(|t| t.text.as_str()) {
                    Some("{") => depth += 1,
                    Some("}") => {
                        depth -= 1;
                        if depth == 0 {
                            self.bump();
                            break;
                        }
                    }
                    None => return Err(self.error("unterminated class body")),
                    _ => {}
                }
                self.bump();
            }
        }
        Ok(())
    }

    /// Like [`Parser::ty`] but leaves `[` for array creation expressions.
    fn ty_no_dims(&mut self) -> Result<()> {
        match self.peek() {
            Some(t) if t.class == RawClass::Keyword && PRIMITIVES.contains(&t.text.as_str()) => {
                self.bump();
                Ok(())
            }
            Some(t) if t.class == RawClass::Ident => {
                self.mark(Role::TypeName);
                self.bump();
                if self.at("<") {
                    self.type_arguments()?;
                }
                while self.at(".") {
                    self.bump();
                    self.expect_ident(Some(Role::TypeName))?;
                    if self.at("<") {
                        self.type_arguments()?;
                    }
                }
                Ok(())
            }
            _ => Err(self.error("expected type")),
        }
    }
}

fn is_punctuation(text: &str) -> bool {
    matches!(
        text,
        "(" | ")" | "{" | "}" | "[" | "]" | ";" | "," | "." | "@" | "..." | "::" | "->" | ":"
    )
}
