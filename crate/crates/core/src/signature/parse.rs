//! Parser for the restricted detection-pattern syntax and for spell globs.
//!
//! Supported pattern constructs: literal bytes, `|` alternation, `(...)`
//! grouping, character classes with ranges and POSIX names (e.g.
//! `[[:space:]]`), `*` repetition, and `\` escapes. Matching is anchored at
//! the stream start; a leading `^` may be written but is implied. Anything
//! else is rejected with the offending construct named.
//!
//! Spell globs are literal byte strings where `*` means "any bytes, possibly
//! none".

use super::nfa::{Ast, ByteClass};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PatternError {
    #[error("unsupported construct {construct} at byte {pos}")]
    Unsupported { construct: String, pos: usize },
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { msg: String, pos: usize },
    #[error("empty pattern")]
    Empty,
}

pub(crate) fn parse_pattern(text: &str) -> Result<Ast, PatternError> {
    let bytes = text.as_bytes();
    if bytes.is_empty() {
        return Err(PatternError::Empty);
    }
    let mut parser = Parser { bytes, pos: 0 };
    if parser.peek() == Some(b'^') {
        parser.pos += 1;
    }
    if parser.pos == bytes.len() {
        return Err(PatternError::Empty);
    }
    let ast = parser.parse_alternation()?;
    if let Some(b) = parser.peek() {
        return Err(PatternError::Syntax {
            msg: format!("unexpected {:?}", b as char),
            pos: parser.pos,
        });
    }
    Ok(ast)
}

pub(crate) fn parse_glob(text: &str) -> Result<Ast, PatternError> {
    if text.is_empty() {
        return Err(PatternError::Empty);
    }
    let mut items = Vec::new();
    for &b in text.as_bytes() {
        if b == b'*' {
            items.push(Ast::Star(Box::new(Ast::Class(ByteClass::any()))));
        } else {
            items.push(Ast::Literal(b));
        }
    }
    Ok(Ast::Concat(items))
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn unsupported(&self, construct: &str, pos: usize) -> PatternError {
        PatternError::Unsupported {
            construct: construct.to_string(),
            pos,
        }
    }

    fn syntax(&self, msg: impl Into<String>, pos: usize) -> PatternError {
        PatternError::Syntax {
            msg: msg.into(),
            pos,
        }
    }

    fn parse_alternation(&mut self) -> Result<Ast, PatternError> {
        let mut branches = vec![self.parse_concat()?];
        while self.peek() == Some(b'|') {
            self.pos += 1;
            branches.push(self.parse_concat()?);
        }
        if branches.len() == 1 {
            Ok(branches.pop().unwrap())
        } else {
            Ok(Ast::Alternate(branches))
        }
    }

    fn parse_concat(&mut self) -> Result<Ast, PatternError> {
        let start = self.pos;
        let mut items = Vec::new();
        while let Some(b) = self.peek() {
            if b == b'|' || b == b')' {
                break;
            }
            let atom = self.parse_atom()?;
            if self.peek() == Some(b'*') {
                self.pos += 1;
                items.push(Ast::Star(Box::new(atom)));
            } else {
                items.push(atom);
            }
        }
        if items.is_empty() {
            return Err(self.syntax("empty alternation branch", start));
        }
        if items.len() == 1 {
            Ok(items.pop().unwrap())
        } else {
            Ok(Ast::Concat(items))
        }
    }

    fn parse_atom(&mut self) -> Result<Ast, PatternError> {
        let pos = self.pos;
        let b = self.peek().expect("caller checked");
        match b {
            b'(' => {
                self.pos += 1;
                let inner = self.parse_alternation()?;
                if self.peek() != Some(b')') {
                    return Err(self.syntax("unclosed group", pos));
                }
                self.pos += 1;
                Ok(inner)
            }
            b'[' => self.parse_class(),
            b'\\' => {
                self.pos += 1;
                let escaped = self
                    .peek()
                    .ok_or_else(|| self.syntax("trailing backslash", pos))?;
                self.pos += 1;
                Ok(Ast::Literal(unescape(escaped)))
            }
            b'*' => Err(self.syntax("nothing to repeat", pos)),
            b'+' => Err(self.unsupported("'+' repetition", pos)),
            b'?' => Err(self.unsupported("'?' repetition", pos)),
            b'{' | b'}' => Err(self.unsupported("'{}' counted repetition", pos)),
            b'.' => Err(self.unsupported("'.' wildcard", pos)),
            b'$' => Err(self.unsupported("'$' anchor", pos)),
            b'^' => Err(self.unsupported("'^' anchor (implied at pattern start)", pos)),
            b']' => Err(self.syntax("unmatched ]", pos)),
            _ => {
                self.pos += 1;
                Ok(Ast::Literal(b))
            }
        }
    }

    fn parse_class(&mut self) -> Result<Ast, PatternError> {
        let open = self.pos;
        self.pos += 1; // consume '['
        if self.peek() == Some(b'^') {
            return Err(self.unsupported("negated character class", self.pos));
        }
        let mut class = ByteClass::empty();
        loop {
            let pos = self.pos;
            let b = self
                .peek()
                .ok_or_else(|| self.syntax("unclosed character class", open))?;
            match b {
                b']' => {
                    self.pos += 1;
                    break;
                }
                b'[' if self.bytes.get(self.pos + 1) == Some(&b':') => {
                    self.parse_posix_class(&mut class)?;
                }
                b'\\' => {
                    self.pos += 1;
                    let escaped = self
                        .peek()
                        .ok_or_else(|| self.syntax("trailing backslash", pos))?;
                    self.pos += 1;
                    self.maybe_range(unescape(escaped), &mut class)?;
                }
                _ => {
                    self.pos += 1;
                    self.maybe_range(b, &mut class)?;
                }
            }
        }
        if class.is_empty() {
            return Err(self.syntax("empty character class", open));
        }
        Ok(Ast::Class(class))
    }

    /// Inserts `lo`, or the range `lo-hi` if a `-` follows and the class is
    /// not ending (a trailing `-` stays literal).
    fn maybe_range(&mut self, lo: u8, class: &mut ByteClass) -> Result<(), PatternError> {
        if self.peek() == Some(b'-') && self.bytes.get(self.pos + 1).is_some_and(|b| *b != b']') {
            let dash = self.pos;
            self.pos += 1;
            let mut hi = self.peek().expect("checked above");
            self.pos += 1;
            if hi == b'\\' {
                hi = unescape(
                    self.peek()
                        .ok_or_else(|| self.syntax("trailing backslash", dash))?,
                );
                self.pos += 1;
            }
            if lo > hi {
                return Err(self.syntax("reversed character range", dash));
            }
            class.insert_range(lo, hi);
        } else {
            class.insert(lo);
        }
        Ok(())
    }

    fn parse_posix_class(&mut self, class: &mut ByteClass) -> Result<(), PatternError> {
        let start = self.pos;
        self.pos += 2; // consume "[:"
        let name_start = self.pos;
        while self.peek().is_some_and(|b| b != b':') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[name_start..self.pos]).unwrap_or("");
        if self.peek() != Some(b':') || self.bytes.get(self.pos + 1) != Some(&b']') {
            return Err(self.syntax("malformed POSIX class", start));
        }
        self.pos += 2; // consume ":]"
        match name {
            "space" => {
                for b in [b' ', b'\t', b'\n', 0x0B, 0x0C, b'\r'] {
                    class.insert(b);
                }
            }
            "digit" => class.insert_range(b'0', b'9'),
            "upper" => class.insert_range(b'A', b'Z'),
            "lower" => class.insert_range(b'a', b'z'),
            "alpha" => {
                class.insert_range(b'A', b'Z');
                class.insert_range(b'a', b'z');
            }
            "alnum" => {
                class.insert_range(b'0', b'9');
                class.insert_range(b'A', b'Z');
                class.insert_range(b'a', b'z');
            }
            other => {
                return Err(self.unsupported(&format!("POSIX class [:{other}:]"), start));
            }
        }
        Ok(())
    }
}

fn unescape(b: u8) -> u8 {
    match b {
        b'r' => b'\r',
        b'n' => b'\n',
        b't' => b'\t',
        other => other,
    }
}
