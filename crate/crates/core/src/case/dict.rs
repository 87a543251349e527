//! OpenFOAM dictionary text: a lossless tree model, a parser and a printer.
//!
//! The parser never expands `#include` directives or `$macro` references; they
//! are kept as tokens. Anything it cannot classify is captured as a
//! [`DictNode::Raw`] node holding the exact source text, so that
//! `parse(serialize(parse(text))) == parse(text)` holds for every input the
//! parser accepts.

use std::fmt::Write as _;

use thiserror::Error;

/// Column at which entry values start when printing `keyword value;`.
const KEYWORD_WIDTH: usize = 16;
const INDENT: &str = "    ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DictNode {
    Dictionary(Dict),
    List(Vec<DictNode>),
    Scalar(String),
    /// `[0 2 -1 0 0 0 0] 0.01`, optionally prefixed by the legacy name token
    /// (`nu [0 2 -1 0 0 0 0] 0.01`). A bare dimension set has an empty value.
    Dimensioned {
        name: Option<String>,
        dims: [i32; 7],
        value: String,
    },
    /// Verbatim text the parser could not classify, or a comment inside a list.
    Raw {
        verbatim: String,
        reason: String,
    },
    /// Space-separated value sequence such as `uniform (0 0 0)`.
    Compound(Vec<DictNode>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dict {
    pub entries: Vec<Entry>,
    /// Comments after the last entry, before the closing brace or EOF.
    pub trailing_comments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub keyword: String,
    pub value: DictNode,
    /// Comments that precede the entry in the source.
    pub comments: Vec<String>,
}

impl Entry {
    pub fn new(keyword: impl Into<String>, value: DictNode) -> Self {
        Self {
            keyword: keyword.into(),
            value,
            comments: Vec::new(),
        }
    }

    pub fn is_directive(&self) -> bool {
        self.keyword.starts_with('#')
    }
}

impl Dict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, keyword: impl Into<String>, value: DictNode) -> Self {
        self.entries.push(Entry::new(keyword, value));
        self
    }

    /// Last entry with this keyword (OpenFOAM semantics: later entries win).
    pub fn get(&self, keyword: &str) -> Option<&DictNode> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.keyword == keyword)
            .map(|e| &e.value)
    }

    /// Replaces the value of an existing entry or appends a new one.
    pub fn set(&mut self, keyword: impl Into<String>, value: DictNode) {
        let keyword = keyword.into();
        match self.entries.iter_mut().rev().find(|e| e.keyword == keyword) {
            Some(entry) => entry.value = value,
            None => self.entries.push(Entry::new(keyword, value)),
        }
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.keyword.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.trailing_comments.is_empty()
    }
}

impl DictNode {
    pub fn scalar(token: impl Into<String>) -> Self {
        DictNode::Scalar(token.into())
    }

    pub fn empty() -> Self {
        DictNode::Dictionary(Dict::new())
    }

    pub fn as_dict(&self) -> Option<&Dict> {
        match self {
            DictNode::Dictionary(d) => Some(d),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<&str> {
        match self {
            DictNode::Scalar(s) => Some(s),
            _ => None,
        }
    }

    pub fn get(&self, keyword: &str) -> Option<&DictNode> {
        self.as_dict().and_then(|d| d.get(keyword))
    }

    /// Looks up a `/`-separated keyword path, e.g. `boundaryField/inlet/type`.
    pub fn lookup(&self, path: &str) -> Option<&DictNode> {
        path.split('/')
            .filter(|s| !s.is_empty())
            .try_fold(self, |node, key| node.get(key))
    }

    /// Scalar token with surrounding double quotes removed.
    pub fn as_word(&self) -> Option<&str> {
        self.as_scalar().map(|s| s.trim_matches('"'))
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Verbatim(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Semi,
    Comment(String),
    Eof,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    start: usize,
    end: usize,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn bytes(&self) -> &'a [u8] {
        self.src.as_bytes()
    }

    fn error_at(&self, offset: usize, message: impl Into<String>) -> ParseError {
        let (line, column) = line_col(self.src, offset);
        ParseError {
            line,
            column,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(&b) = self.bytes().get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Result<Spanned, ParseError> {
        let saved = self.pos;
        let tok = self.next();
        self.pos = saved;
        tok
    }

    fn next(&mut self) -> Result<Spanned, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let bytes = self.bytes();
        let Some(&b) = bytes.get(start) else {
            return Ok(Spanned {
                tok: Tok::Eof,
                start,
                end: start,
            });
        };
        let single = |tok| (tok, start + 1);
        let (tok, end) = match b {
            b'{' => single(Tok::LBrace),
            b'}' => single(Tok::RBrace),
            b'(' => single(Tok::LParen),
            b')' => single(Tok::RParen),
            b'[' => single(Tok::LBracket),
            b']' => single(Tok::RBracket),
            b';' => single(Tok::Semi),
            b'/' if bytes.get(start + 1) == Some(&b'/') => {
                let end = self.src[start..]
                    .find('\n')
                    .map_or(self.src.len(), |i| start + i);
                let text = self.src[start..end].trim_end().to_string();
                (Tok::Comment(text), end)
            }
            b'/' if bytes.get(start + 1) == Some(&b'*') => {
                let Some(rel) = self.src[start + 2..].find("*/") else {
                    return Err(self.error_at(start, "unterminated block comment"));
                };
                let end = start + 2 + rel + 2;
                (Tok::Comment(self.src[start..end].to_string()), end)
            }
            b'"' => {
                let mut i = start + 1;
                loop {
                    match bytes.get(i) {
                        None => return Err(self.error_at(start, "unterminated string")),
                        Some(b'\\') => i += 2,
                        Some(b'"') => break,
                        Some(_) => i += 1,
                    }
                }
                let end = i + 1;
                (Tok::Str(self.src[start..end].to_string()), end)
            }
            b'#' if bytes.get(start + 1) == Some(&b'{') => {
                let Some(rel) = self.src[start + 2..].find("#}") else {
                    return Err(self.error_at(start, "unterminated #{ code block"));
                };
                let end = start + 2 + rel + 2;
                (Tok::Verbatim(self.src[start..end].to_string()), end)
            }
            _ => {
                let end = self.scan_word(start)?;
                (Tok::Word(self.src[start..end].to_string()), end)
            }
        };
        self.pos = end;
        Ok(Spanned { tok, start, end })
    }

    /// Words may embed balanced parentheses (`div(phi,U)`) unless they are
    /// numeric, so `3(1 2 3)` still lexes as a count followed by a list.
    fn scan_word(&self, start: usize) -> Result<usize, ParseError> {
        let bytes = self.bytes();
        let numeric = {
            let first = bytes[start];
            let second = bytes.get(start + 1).copied().unwrap_or(b' ');
            first.is_ascii_digit()
                || (matches!(first, b'+' | b'-' | b'.') && second.is_ascii_digit())
        };
        let mut i = start;
        // `${var}` keeps its braces.
        if bytes[i] == b'$' && bytes.get(i + 1) == Some(&b'{') {
            match self.src[i..].find('}') {
                Some(rel) => i += rel + 1,
                None => return Err(self.error_at(start, "unterminated ${...} reference")),
            }
        }
        while let Some(&c) = bytes.get(i) {
            match c {
                b'(' if !numeric && i > start => {
                    let mut depth = 0usize;
                    let mut j = i;
                    loop {
                        match bytes.get(j) {
                            Some(b'(') => depth += 1,
                            Some(b')') => {
                                depth -= 1;
                                if depth == 0 {
                                    break;
                                }
                            }
                            Some(c)
                                if c.is_ascii_whitespace() || matches!(c, b';' | b'{' | b'}') =>
                            {
                                // Not a parenthesised word after all.
                                return Ok(i);
                            }
                            Some(_) => {}
                            None => return Ok(i),
                        }
                        j += 1;
                    }
                    i = j + 1;
                }
                c if c.is_ascii_whitespace() => break,
                b'{' | b'}' | b'(' | b')' | b'[' | b']' | b';' | b'"' => break,
                b'/' if matches!(bytes.get(i + 1), Some(b'/') | Some(b'*')) => break,
                _ => i += 1,
            }
        }
        Ok(i.max(start + 1))
    }

    fn rest_of_line(&mut self) -> String {
        let end = self.src[self.pos..]
            .find('\n')
            .map_or(self.src.len(), |i| self.pos + i);
        let text = self.src[self.pos..end].trim().to_string();
        self.pos = end;
        text
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before
        .rfind('\n')
        .map_or(before.len(), |i| before.len() - i - 1)
        + 1;
    (line, column)
}

// ---------------------------------------------------------------------------
// Parser

/// A value the parser cannot classify; the enclosing entry falls back to Raw.
enum ValueError {
    Fallback(String),
    Hard(ParseError),
}

impl From<ParseError> for ValueError {
    fn from(e: ParseError) -> Self {
        ValueError::Hard(e)
    }
}

struct Parser<'a> {
    lex: Lexer<'a>,
}

/// Parses OpenFOAM dictionary text into a tree rooted at an anonymous
/// dictionary.
pub fn parse_dictionary(text: &str) -> Result<DictNode, ParseError> {
    let mut parser = Parser {
        lex: Lexer::new(text),
    };
    let dict = parser.dict_body(None)?;
    Ok(DictNode::Dictionary(dict))
}

impl<'a> Parser<'a> {
    /// `open` is the offset of the opening brace, or `None` at top level.
    fn dict_body(&mut self, open: Option<usize>) -> Result<Dict, ParseError> {
        let mut dict = Dict::new();
        let mut pending = Vec::new();
        loop {
            let t = self.lex.next()?;
            match t.tok {
                Tok::Comment(c) => pending.push(c),
                Tok::Eof => {
                    if let Some(open) = open {
                        return Err(self.lex.error_at(
                            t.start,
                            format!(
                                "premature end of input: '{{' opened at line {} is never closed",
                                line_col(self.lex.src, open).0
                            ),
                        ));
                    }
                    dict.trailing_comments = pending;
                    return Ok(dict);
                }
                Tok::RBrace => {
                    if open.is_none() {
                        return Err(self.lex.error_at(t.start, "unbalanced '}'"));
                    }
                    dict.trailing_comments = pending;
                    return Ok(dict);
                }
                Tok::Word(w) if w.starts_with('#') => {
                    let rest = self.lex.rest_of_line();
                    let value = if rest.is_empty() {
                        DictNode::Compound(Vec::new())
                    } else {
                        DictNode::Scalar(rest)
                    };
                    dict.entries.push(Entry {
                        keyword: w,
                        value,
                        comments: std::mem::take(&mut pending),
                    });
                }
                Tok::Word(keyword) | Tok::Str(keyword) => {
                    let (value, extra) = self.entry_value(t.end, open.is_some())?;
                    pending.extend(extra);
                    dict.entries.push(Entry {
                        keyword,
                        value,
                        comments: std::mem::take(&mut pending),
                    });
                }
                Tok::Semi => dict.entries.push(Entry {
                    keyword: ";".to_string(),
                    value: DictNode::Raw {
                        verbatim: String::new(),
                        reason: "stray semicolon".to_string(),
                    },
                    comments: std::mem::take(&mut pending),
                }),
                other => {
                    let keyword = self.lex.src[t.start..t.end].to_string();
                    let verbatim = self.raw_span(t.end, open.is_some())?;
                    let reason = format!("entry starts with {}", describe(&other));
                    dict.entries.push(Entry {
                        keyword,
                        value: DictNode::Raw { verbatim, reason },
                        comments: std::mem::take(&mut pending),
                    });
                }
            }
        }
    }

    /// Parses the value following a keyword. Returns the node plus any
    /// comments found between keyword and value.
    fn entry_value(
        &mut self,
        after_keyword: usize,
        nested: bool,
    ) -> Result<(DictNode, Vec<String>), ParseError> {
        let mut comments = Vec::new();
        let first = loop {
            let t = self.lex.peek()?;
            match t.tok {
                Tok::Comment(c) => {
                    self.lex.pos = t.end;
                    comments.push(c);
                }
                _ => break t,
            }
        };
        if first.tok == Tok::LBrace {
            self.lex.pos = first.end;
            let dict = self.dict_body(Some(first.start))?;
            // Tolerate `name { ... };`
            let after = self.lex.peek()?;
            if after.tok == Tok::Semi {
                self.lex.pos = after.end;
            }
            return Ok((DictNode::Dictionary(dict), comments));
        }

        match self.value_items(&mut comments) {
            Ok(items) => Ok((classify(items), comments)),
            Err(ValueError::Hard(e)) => Err(e),
            Err(ValueError::Fallback(reason)) => {
                // Comments after the keyword are part of the raw span.
                let verbatim = self.raw_span(after_keyword, nested)?;
                Ok((DictNode::Raw { verbatim, reason }, Vec::new()))
            }
        }
    }

    /// Items up to and including the terminating `;`.
    fn value_items(&mut self, comments: &mut Vec<String>) -> Result<Vec<DictNode>, ValueError> {
        let mut items = Vec::new();
        loop {
            let t = self.lex.next()?;
            match t.tok {
                Tok::Semi => return Ok(items),
                Tok::Comment(c) => comments.push(c),
                Tok::Word(w) | Tok::Str(w) | Tok::Verbatim(w) => items.push(DictNode::Scalar(w)),
                Tok::LParen => items.push(self.list()?),
                Tok::LBracket => items.push(self.dims()?),
                Tok::LBrace => {
                    let dict = self.dict_body(Some(t.start))?;
                    items.push(DictNode::Dictionary(dict));
                }
                Tok::Eof => {
                    return Err(ValueError::Fallback(
                        "missing ';' before end of input".into(),
                    ))
                }
                Tok::RBrace => return Err(ValueError::Fallback("missing ';' before '}'".into())),
                other => {
                    return Err(ValueError::Fallback(format!(
                        "unexpected {} in entry value",
                        describe(&other)
                    )))
                }
            }
        }
    }

    fn list(&mut self) -> Result<DictNode, ValueError> {
        let mut items = Vec::new();
        loop {
            let t = self.lex.next()?;
            match t.tok {
                Tok::RParen => return Ok(DictNode::List(items)),
                Tok::Comment(c) => items.push(DictNode::Raw {
                    verbatim: c,
                    reason: "comment".to_string(),
                }),
                Tok::Word(w) | Tok::Str(w) | Tok::Verbatim(w) => items.push(DictNode::Scalar(w)),
                Tok::LParen => items.push(self.list()?),
                Tok::LBracket => items.push(self.dims()?),
                Tok::LBrace => {
                    let dict = self.dict_body(Some(t.start))?;
                    items.push(DictNode::Dictionary(dict));
                }
                Tok::Eof => {
                    return Err(ValueError::Hard(
                        self.lex
                            .error_at(t.start, "premature end of input inside '('"),
                    ))
                }
                other => {
                    return Err(ValueError::Fallback(format!(
                        "unexpected {} inside list",
                        describe(&other)
                    )))
                }
            }
        }
    }

    fn dims(&mut self) -> Result<DictNode, ValueError> {
        let mut parts = Vec::new();
        loop {
            let t = self.lex.next()?;
            match t.tok {
                Tok::RBracket => break,
                Tok::Word(w) => parts.push(w),
                Tok::Eof => {
                    return Err(ValueError::Hard(
                        self.lex
                            .error_at(t.start, "premature end of input inside '['"),
                    ))
                }
                other => {
                    return Err(ValueError::Fallback(format!(
                        "unexpected {} inside dimension set",
                        describe(&other)
                    )))
                }
            }
        }
        let exponents: Vec<i32> = parts.iter().filter_map(|p| p.parse().ok()).collect();
        if parts.len() != 7 || exponents.len() != 7 {
            return Err(ValueError::Fallback(format!(
                "dimension set [{}] is not seven integer exponents",
                parts.join(" ")
            )));
        }
        let mut dims = [0i32; 7];
        dims.copy_from_slice(&exponents);
        Ok(DictNode::Dimensioned {
            name: None,
            dims,
            value: String::new(),
        })
    }

    /// Captures source text from `start` to the end of the entry: through the
    /// first `;` at bracket depth zero, or up to (not including) the closing
    /// brace of the enclosing dictionary, or to end of input at top level.
    fn raw_span(&mut self, start: usize, nested: bool) -> Result<String, ParseError> {
        self.lex.pos = start;
        let mut stack: Vec<(Tok, usize)> = Vec::new();
        let end = loop {
            let t = self.lex.next()?;
            match t.tok {
                Tok::Semi if stack.is_empty() => break t.end,
                Tok::RBrace if stack.is_empty() => {
                    if !nested {
                        return Err(self.lex.error_at(t.start, "unbalanced '}'"));
                    }
                    self.lex.pos = t.start;
                    break t.start;
                }
                Tok::Eof => {
                    if let Some((_, open)) = stack.last() {
                        return Err(self.lex.error_at(
                            t.start,
                            format!(
                                "premature end of input: bracket opened at line {} is never closed",
                                line_col(self.lex.src, *open).0
                            ),
                        ));
                    }
                    if nested {
                        return Err(self
                            .lex
                            .error_at(t.start, "premature end of input inside '{'"));
                    }
                    break t.start;
                }
                Tok::LBrace => stack.push((Tok::RBrace, t.start)),
                Tok::LParen => stack.push((Tok::RParen, t.start)),
                Tok::LBracket => stack.push((Tok::RBracket, t.start)),
                close @ (Tok::RBrace | Tok::RParen | Tok::RBracket) => match stack.pop() {
                    Some((expected, _)) if expected == close => {}
                    _ => {
                        return Err(self
                            .lex
                            .error_at(t.start, format!("unbalanced {}", describe(&close))))
                    }
                },
                _ => {}
            }
        };
        Ok(self.lex.src[start..end].trim().to_string())
    }
}

fn classify(mut items: Vec<DictNode>) -> DictNode {
    let bare_dims = |n: &DictNode| matches!(n, DictNode::Dimensioned { name: None, value, .. } if value.is_empty());
    match items.len() {
        1 => items.pop().unwrap(),
        2 if bare_dims(&items[0]) && matches!(items[1], DictNode::Scalar(_)) => {
            let DictNode::Scalar(value) = items.pop().unwrap() else {
                unreachable!()
            };
            let DictNode::Dimensioned { dims, .. } = items.pop().unwrap() else {
                unreachable!()
            };
            DictNode::Dimensioned {
                name: None,
                dims,
                value,
            }
        }
        3 if matches!(items[0], DictNode::Scalar(_))
            && bare_dims(&items[1])
            && matches!(items[2], DictNode::Scalar(_)) =>
        {
            let DictNode::Scalar(value) = items.pop().unwrap() else {
                unreachable!()
            };
            let DictNode::Dimensioned { dims, .. } = items.pop().unwrap() else {
                unreachable!()
            };
            let DictNode::Scalar(name) = items.pop().unwrap() else {
                unreachable!()
            };
            DictNode::Dimensioned {
                name: Some(name),
                dims,
                value,
            }
        }
        _ => DictNode::Compound(items),
    }
}

fn describe(tok: &Tok) -> &'static str {
    match tok {
        Tok::Word(_) => "word",
        Tok::Str(_) => "string",
        Tok::Verbatim(_) => "code block",
        Tok::LBrace => "'{'",
        Tok::RBrace => "'}'",
        Tok::LParen => "'('",
        Tok::RParen => "')'",
        Tok::LBracket => "'['",
        Tok::RBracket => "']'",
        Tok::Semi => "';'",
        Tok::Comment(_) => "comment",
        Tok::Eof => "end of input",
    }
}

// ---------------------------------------------------------------------------
// Printer

/// Prints a tree as OpenFOAM dictionary text. A root `Dictionary` is printed
/// as a sequence of top-level entries without enclosing braces.
pub fn serialize_dictionary(node: &DictNode) -> String {
    let mut out = String::new();
    match node {
        DictNode::Dictionary(d) => write_body(d, 0, &mut out),
        DictNode::Raw { verbatim, .. } => out.push_str(verbatim),
        other => write_inline(other, 0, &mut out),
    }
    out
}

fn indent(level: usize, out: &mut String) {
    for _ in 0..level {
        out.push_str(INDENT);
    }
}

fn write_comments(comments: &[String], level: usize, out: &mut String) {
    for c in comments {
        indent(level, out);
        out.push_str(c);
        out.push('\n');
    }
}

fn write_body(dict: &Dict, level: usize, out: &mut String) {
    for (i, entry) in dict.entries.iter().enumerate() {
        if level == 0 && i > 0 {
            out.push('\n');
        }
        write_comments(&entry.comments, level, out);
        write_entry(entry, level, out);
    }
    write_comments(&dict.trailing_comments, level, out);
}

fn write_entry(entry: &Entry, level: usize, out: &mut String) {
    indent(level, out);
    let kw = &entry.keyword;
    if entry.is_directive() {
        out.push_str(kw);
        if let DictNode::Scalar(s) = &entry.value {
            out.push(' ');
            out.push_str(s);
        }
        out.push('\n');
        return;
    }
    match &entry.value {
        DictNode::Dictionary(d) => {
            out.push_str(kw);
            out.push('\n');
            write_block(d, level, out);
            out.push('\n');
        }
        DictNode::Raw { verbatim, .. } => {
            out.push_str(kw);
            if !verbatim.is_empty() {
                out.push(' ');
                out.push_str(verbatim);
            }
            out.push('\n');
        }
        DictNode::Compound(items) if items.is_empty() => {
            out.push_str(kw);
            out.push_str(";\n");
        }
        DictNode::List(items) if is_multiline(items) => {
            out.push_str(kw);
            out.push('\n');
            write_multiline_list(items, level, out);
            out.push_str(";\n");
        }
        value => {
            let _ = write!(out, "{kw:<width$} ", width = KEYWORD_WIDTH - 1);
            write_inline(value, level, out);
            out.push_str(";\n");
        }
    }
}

fn write_block(dict: &Dict, level: usize, out: &mut String) {
    indent(level, out);
    out.push_str("{\n");
    write_body(dict, level + 1, out);
    indent(level, out);
    out.push('}');
}

fn is_multiline(items: &[DictNode]) -> bool {
    items.iter().any(|i| {
        matches!(i, DictNode::Dictionary(_) | DictNode::Raw { .. })
            || matches!(i, DictNode::List(inner) if inner.iter().any(|x| !matches!(x, DictNode::Scalar(_))))
    }) || items.iter().filter(|i| matches!(i, DictNode::List(_))).count() > 1
        || items.len() > 12
}

fn write_inline(node: &DictNode, level: usize, out: &mut String) {
    match node {
        DictNode::Scalar(s) => out.push_str(s),
        DictNode::Dimensioned { name, dims, value } => {
            if let Some(name) = name {
                out.push_str(name);
                out.push(' ');
            }
            out.push('[');
            for (i, d) in dims.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{d}");
            }
            out.push(']');
            if !value.is_empty() {
                out.push(' ');
                out.push_str(value);
            }
        }
        DictNode::List(items) => {
            if is_multiline(items) {
                out.push('\n');
                write_multiline_list(items, level, out);
            } else {
                out.push('(');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    write_inline(item, level, out);
                }
                out.push(')');
            }
        }
        DictNode::Compound(items) => {
            for (i, item) in items.iter().enumerate() {
                if i > 0 && !matches!(item, DictNode::Dictionary(_)) {
                    out.push(' ');
                }
                write_inline(item, level, out);
            }
        }
        DictNode::Dictionary(d) => {
            out.push('\n');
            write_block(d, level, out);
        }
        DictNode::Raw { verbatim, .. } => out.push_str(verbatim),
    }
}

fn write_multiline_list(items: &[DictNode], level: usize, out: &mut String) {
    indent(level, out);
    out.push_str("(\n");
    let inner = level + 1;
    let mut line_open = false;
    let mut line_all_lists = false;
    let mut prev: Option<&DictNode> = None;
    for item in items {
        let is_list = matches!(item, DictNode::List(_));
        let is_block = matches!(item, DictNode::Dictionary(_) | DictNode::Raw { .. })
            || matches!(item, DictNode::List(sub) if is_multiline(sub));
        let break_before = match prev {
            None => false,
            Some(DictNode::Dictionary(_)) | Some(DictNode::Raw { .. }) => true,
            // `hex (...) (...) simpleGrading (...)` stays on one line.
            Some(DictNode::List(_)) => match item {
                DictNode::Scalar(word) => !word.ends_with("Grading"),
                _ => line_all_lists,
            },
            Some(_) => false,
        };
        if line_open && (break_before || is_block) {
            out.push('\n');
            line_open = false;
        }
        match item {
            DictNode::Dictionary(d) => {
                write_block(d, inner, out);
                out.push('\n');
            }
            DictNode::Raw { verbatim, .. } => {
                indent(inner, out);
                out.push_str(verbatim);
                out.push('\n');
            }
            DictNode::List(sub) if is_multiline(sub) => {
                write_multiline_list(sub, inner, out);
                out.push('\n');
            }
            other => {
                if line_open {
                    out.push(' ');
                } else {
                    indent(inner, out);
                    line_open = true;
                    line_all_lists = is_list;
                }
                if !is_list {
                    line_all_lists = false;
                }
                write_inline(other, inner, out);
            }
        }
        prev = Some(item);
    }
    if line_open {
        out.push('\n');
    }
    indent(level, out);
    out.push(')');
}
