//! Incremental detection of top-level Python statement boundaries.
//!
//! Text arrives fragment by fragment. The chunker keeps the unemitted tail in a
//! buffer, tracks lexical state (string mode, bracket depth, line continuation)
//! incrementally, and emits a [`Chunk`] as soon as a top-level statement is known
//! to be complete:
//!
//! * a simple statement is confirmed at the newline that ends its logical line;
//! * a compound statement (`def`, `class`, `if`, `for`, `while`, `try`, `with`,
//!   `match`, decorated definitions) stays suspended until the first word of a
//!   following column-0 line shows it cannot continue, or until end of stream.
//!
//! Blank and comment-only lines are attached to the chunk that follows them. The
//! concatenation of every emitted chunk is always the exact input text.
//!
//! f-strings are lexed like ordinary strings (pre-3.12 rules: the replacement
//! fields cannot reuse the enclosing quote).

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// One paced fragment of the incoming program text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub text: String,
    /// Milliseconds on the run's clock.
    pub arrival_time: f64,
}

impl TokenEvent {
    pub fn new(text: impl Into<String>, arrival_time: f64) -> Self {
        let text = text.into();
        assert!(!text.is_empty(), "token text must be non-empty");
        TokenEvent { text, arrival_time }
    }
}

/// A contiguous slice of the program holding one or more complete top-level statements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    /// 1-based ordinal in emission order.
    pub index: usize,
    pub text: String,
    /// Half-open byte range into the full program.
    pub byte_span: Range<usize>,
    /// Tokens whose final character falls inside `byte_span`.
    pub token_count: usize,
    /// Arrival time of the last token overlapping the span.
    pub gen_complete_at: f64,
    /// Time the chunk was confirmed.
    pub detected_at: f64,
}

impl Chunk {
    /// Realized detection delay.
    pub fn detection_delay(&self) -> f64 {
        self.detected_at - self.gen_complete_at
    }
}

// ---------------------------------------------------------------------------
// Lexical scanning

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Code,
    Comment,
    Str { quote: u8, triple: bool },
}

/// Resumable scanner that finds logical-line ends in an append-only buffer.
#[derive(Debug, Clone)]
struct Scanner {
    pos: usize,
    mode: Mode,
    depth: usize,
}

impl Scanner {
    fn new() -> Self {
        Scanner {
            pos: 0,
            mode: Mode::Code,
            depth: 0,
        }
    }

    /// True when the scanned prefix ends outside any string or bracket.
    fn is_balanced(&self) -> bool {
        matches!(self.mode, Mode::Code | Mode::Comment) && self.depth == 0
    }

    /// Advances until just past the next logical-line terminator and returns
    /// that offset. Returns `None` when more input is needed. With `eof` set,
    /// missing lookahead bytes are treated as absent instead of pending.
    fn next_line_end(&mut self, buf: &[u8], eof: bool) -> Option<usize> {
        let len = buf.len();
        // Lookahead of `n` bytes past `pos` is available, or can never be.
        let have = |pos: usize, n: usize| pos + n < len || eof;
        while self.pos < len {
            let pos = self.pos;
            let b = buf[pos];
            match self.mode {
                Mode::Comment => match memchr_newline(&buf[pos..]) {
                    Some(off) => {
                        self.pos = pos + off;
                        self.mode = Mode::Code;
                    }
                    None => self.pos = len,
                },
                Mode::Code => match b {
                    b'#' => {
                        self.mode = Mode::Comment;
                        self.pos += 1;
                    }
                    b'\\' => {
                        if !have(pos, 1) {
                            return None;
                        }
                        match buf.get(pos + 1) {
                            Some(b'\n') => self.pos += 2,
                            Some(b'\r') => {
                                if !have(pos, 2) {
                                    return None;
                                }
                                self.pos += if buf.get(pos + 2) == Some(&b'\n') {
                                    3
                                } else {
                                    2
                                };
                            }
                            _ => self.pos += 1,
                        }
                    }
                    b'(' | b'[' | b'{' => {
                        self.depth += 1;
                        self.pos += 1;
                    }
                    b')' | b']' | b'}' => {
                        self.depth = self.depth.saturating_sub(1);
                        self.pos += 1;
                    }
                    b'\n' => {
                        self.pos += 1;
                        if self.depth == 0 {
                            return Some(self.pos);
                        }
                    }
                    b'\'' | b'"' => {
                        if !have(pos, 1) {
                            return None;
                        }
                        if buf.get(pos + 1) == Some(&b) {
                            if !have(pos, 2) {
                                return None;
                            }
                            if buf.get(pos + 2) == Some(&b) {
                                self.mode = Mode::Str {
                                    quote: b,
                                    triple: true,
                                };
                                self.pos += 3;
                                continue;
                            }
                            // empty string literal
                            self.pos += 2;
                            continue;
                        }
                        self.mode = Mode::Str {
                            quote: b,
                            triple: false,
                        };
                        self.pos += 1;
                    }
                    _ => self.pos += 1,
                },
                Mode::Str { quote, triple } => match b {
                    b'\\' => {
                        if !have(pos, 1) {
                            return None;
                        }
                        self.pos = (pos + 2).min(len);
                    }
                    b'\n' if !triple => {
                        // unterminated single-quoted string: recover at end of line
                        self.mode = Mode::Code;
                    }
                    c if c == quote => {
                        if triple {
                            if !have(pos, 2) {
                                return None;
                            }
                            if buf.get(pos + 1) == Some(&quote) && buf.get(pos + 2) == Some(&quote)
                            {
                                self.mode = Mode::Code;
                                self.pos += 3;
                            } else {
                                self.pos += 1;
                            }
                        } else {
                            self.mode = Mode::Code;
                            self.pos += 1;
                        }
                    }
                    _ => self.pos += 1,
                },
            }
        }
        None
    }
}

fn memchr_newline(bytes: &[u8]) -> Option<usize> {
    bytes.iter().position(|&b| b == b'\n')
}

// ---------------------------------------------------------------------------
// Line classification

/// What a column-0 logical line starts with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Head {
    Decorator,
    If,
    Elif,
    Else,
    For,
    While,
    Try,
    Except,
    Finally,
    With,
    Def,
    Class,
    Async,
    Match,
    Other,
}

impl Head {
    fn from_word(word: &[u8]) -> Head {
        match word {
            b"if" => Head::If,
            b"elif" => Head::Elif,
            b"else" => Head::Else,
            b"for" => Head::For,
            b"while" => Head::While,
            b"try" => Head::Try,
            b"except" => Head::Except,
            b"finally" => Head::Finally,
            b"with" => Head::With,
            b"def" => Head::Def,
            b"class" => Head::Class,
            b"async" => Head::Async,
            b"match" => Head::Match,
            _ => Head::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineKind {
    Trivia,
    Indented,
    TopLevel(Head),
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

fn is_indent_byte(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\x0c')
}

/// Leading identifier of `bytes`, and whether it is known to be complete.
fn leading_word(bytes: &[u8]) -> (&[u8], bool) {
    let n = bytes.iter().take_while(|&&b| is_ident_byte(b)).count();
    (&bytes[..n], n < bytes.len())
}

fn classify_line(line: &str) -> LineKind {
    let bytes = line.as_bytes();
    let indent = bytes.iter().take_while(|&&b| is_indent_byte(b)).count();
    match bytes.get(indent) {
        None | Some(b'\n') | Some(b'\r') | Some(b'#') => return LineKind::Trivia,
        _ => {}
    }
    if indent > 0 {
        return LineKind::Indented;
    }
    if bytes[0] == b'@' {
        return LineKind::TopLevel(Head::Decorator);
    }
    let (word, _) = leading_word(bytes);
    let head = match Head::from_word(word) {
        // `match` is a soft keyword; only a header line ending in ':' opens a block
        Head::Match if !ends_with_colon(line) => Head::Other,
        h => h,
    };
    LineKind::TopLevel(head)
}

/// Whether the last significant character of a logical line (before any
/// trailing comment) is a colon.
fn ends_with_colon(line: &str) -> bool {
    let mut quote: Option<u8> = None;
    let mut last = None;
    let mut bytes = line.bytes();
    while let Some(b) = bytes.next() {
        match quote {
            Some(q) => {
                if b == b'\\' {
                    bytes.next();
                } else if b == q {
                    quote = None;
                }
                last = Some(b);
            }
            None => match b {
                b'#' => break,
                b'\'' | b'"' => {
                    quote = Some(b);
                    last = Some(b);
                }
                b if b.is_ascii_whitespace() || b == b'\\' => {}
                b => last = Some(b),
            },
        }
    }
    last == Some(b':')
}

/// Second word of an `async` line.
fn async_target(line: &str) -> Head {
    let rest = line
        .trim_start_matches("async")
        .trim_start_matches([' ', '\t']);
    let (word, _) = leading_word(rest.as_bytes());
    Head::from_word(word)
}

/// Which follow-up headers can still extend a suspended compound statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Compound {
    /// `if` or `elif`: may be followed by `elif` / `else`.
    If,
    /// `for` / `while`: may be followed by `else`.
    Loop,
    /// `try` or `except`: may be followed by `except` / `else` / `finally`.
    Try,
    /// `try ... else`: only `finally` may follow.
    TryElse,
    /// Decorators seen, definition not yet.
    Decorated,
    /// Nothing at column 0 can continue it.
    Closed,
}

impl Compound {
    fn open(head: Head, line: &str) -> Option<Compound> {
        Some(match head {
            Head::If | Head::Elif => Compound::If,
            Head::For | Head::While => Compound::Loop,
            Head::Try | Head::Except => Compound::Try,
            Head::Decorator => Compound::Decorated,
            Head::Else | Head::Finally | Head::With | Head::Def | Head::Class | Head::Match => {
                Compound::Closed
            }
            Head::Async => match async_target(line) {
                Head::For => Compound::Loop,
                _ => Compound::Closed,
            },
            Head::Other => return None,
        })
    }

    fn continued_by(self, head: Head) -> bool {
        match self {
            Compound::If => matches!(head, Head::Elif | Head::Else),
            Compound::Loop => head == Head::Else,
            Compound::Try => matches!(head, Head::Except | Head::Else | Head::Finally),
            Compound::TryElse => head == Head::Finally,
            Compound::Decorated => {
                matches!(
                    head,
                    Head::Decorator | Head::Def | Head::Class | Head::Async
                )
            }
            Compound::Closed => false,
        }
    }

    /// True if some continuation keyword starts with `prefix`.
    fn may_continue_with(self, prefix: &[u8]) -> bool {
        ["elif", "else", "except", "finally", "def", "class", "async"]
            .iter()
            .any(|kw| {
                kw.as_bytes().starts_with(prefix)
                    && self.continued_by(Head::from_word(kw.as_bytes()))
            })
    }

    /// State after absorbing a continuation header.
    fn advance(self, head: Head, line: &str) -> Compound {
        match (self, head) {
            (Compound::If, Head::Elif) => Compound::If,
            (Compound::Try, Head::Except) => Compound::Try,
            (Compound::Try, Head::Else) => Compound::TryElse,
            (Compound::Decorated, Head::Decorator) => Compound::Decorated,
            (Compound::Decorated, Head::Async) => match async_target(line) {
                Head::Def => Compound::Closed,
                // `async` alone so far; keep waiting for the definition
                _ => Compound::Decorated,
            },
            _ => Compound::Closed,
        }
    }
}

/// A compound statement parsed so far but not yet confirmed complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingCandidate {
    kind: Compound,
    /// Buffer-relative end of the candidate's last non-trivia line.
    end: usize,
}

impl PendingCandidate {
    /// Length in bytes of the suspended statement (excluding trailing trivia).
    pub fn len(&self) -> usize {
        self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct TokenMark {
    /// Absolute end offset of the token's text.
    end: usize,
    arrival: f64,
}

// ---------------------------------------------------------------------------
// Chunker

/// Streaming statement-boundary detector.
#[derive(Debug, Clone)]
pub struct Chunker {
    buffer: String,
    committed_offset: usize,
    scanner: Scanner,
    /// Buffer-relative start of the logical line being scanned.
    line_start: usize,
    pending: Option<PendingCandidate>,
    tokens: VecDeque<TokenMark>,
    next_index: usize,
    last_arrival: f64,
    closed: bool,
}

impl Default for Chunker {
    fn default() -> Self {
        Self::new()
    }
}

impl Chunker {
    pub fn new() -> Self {
        Chunker {
            buffer: String::new(),
            committed_offset: 0,
            scanner: Scanner::new(),
            line_start: 0,
            pending: None,
            tokens: VecDeque::new(),
            next_index: 1,
            last_arrival: 0.0,
            closed: false,
        }
    }

    /// Appends one fragment and returns every chunk it confirms, in order.
    pub fn feed(&mut self, event: &TokenEvent) -> Vec<Chunk> {
        assert!(!self.closed, "feed called after finish");
        let mut out = Vec::new();
        if event.text.is_empty() {
            return out;
        }
        debug_assert!(
            event.arrival_time >= self.last_arrival,
            "arrival times must be non-decreasing"
        );
        self.last_arrival = self.last_arrival.max(event.arrival_time);
        self.buffer.push_str(&event.text);
        self.tokens.push_back(TokenMark {
            end: self.committed_offset + self.buffer.len(),
            arrival: event.arrival_time,
        });
        self.drain_lines(false, self.last_arrival, &mut out);
        self.check_lookahead(self.last_arrival, &mut out);
        out
    }

    /// Flushes the suspended statement and any residue. The state is closed afterwards.
    pub fn finish(&mut self) -> Vec<Chunk> {
        assert!(!self.closed, "finish called twice");
        self.closed = true;
        let mut out = Vec::new();
        let at = self.last_arrival;
        self.drain_lines(true, at, &mut out);
        if self.line_start < self.buffer.len() {
            let (start, end) = (self.line_start, self.buffer.len());
            self.line_start = end;
            self.on_line(start, end, at, &mut out);
        }
        if !self.buffer.is_empty() {
            // a suspended compound absorbs its trailing blank/comment lines here
            self.pending = None;
            let end = self.buffer.len();
            out.push(self.emit(end, at));
        }
        self.pending = None;
        out
    }

    /// The unemitted tail of the input, verbatim.
    pub fn buffered_text(&self) -> &str {
        &self.buffer
    }

    /// Absolute offset of the first unemitted byte.
    pub fn committed_offset(&self) -> usize {
        self.committed_offset
    }

    /// The compound statement currently waiting on lookahead, if any.
    pub fn pending_candidate(&self) -> Option<PendingCandidate> {
        self.pending
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn drain_lines(&mut self, eof: bool, at: f64, out: &mut Vec<Chunk>) {
        while let Some(end) = self.scanner.next_line_end(self.buffer.as_bytes(), eof) {
            let start = self.line_start;
            self.line_start = end;
            self.on_line(start, end, at, out);
        }
    }

    fn on_line(&mut self, start: usize, end: usize, at: f64, out: &mut Vec<Chunk>) {
        let kind = classify_line(&self.buffer[start..end]);
        match kind {
            LineKind::Trivia => {}
            LineKind::Indented => match self.pending.as_mut() {
                Some(cand) => cand.end = end,
                // stray indentation; let the interpreter report it
                None => out.push(self.emit(end, at)),
            },
            LineKind::TopLevel(head) => {
                let (mut start, mut end) = (start, end);
                if let Some(cand) = self.pending {
                    if cand.kind.continued_by(head) {
                        let line = &self.buffer[start..end];
                        self.pending = Some(PendingCandidate {
                            kind: cand.kind.advance(head, line),
                            end,
                        });
                        return;
                    }
                    self.pending = None;
                    out.push(self.emit(cand.end, at));
                    start -= cand.end;
                    end -= cand.end;
                }
                match Compound::open(head, &self.buffer[start..end]) {
                    Some(kind) => self.pending = Some(PendingCandidate { kind, end }),
                    None => out.push(self.emit(end, at)),
                }
            }
        }
    }

    fn check_lookahead(&mut self, at: f64, out: &mut Vec<Chunk>) {
        let Some(cand) = self.pending else { return };
        let rest = &self.buffer.as_bytes()[self.line_start..];
        let Some(&first) = rest.first() else { return };
        let head = match first {
            b' ' | b'\t' | b'\x0c' | b'\n' | b'\r' | b'#' => return,
            b'@' => Head::Decorator,
            b if is_ident_byte(b) => {
                let (word, complete) = leading_word(rest);
                if !complete {
                    // a partial word only matters if it can still grow into a continuation
                    if cand.kind.may_continue_with(word) {
                        return;
                    }
                    Head::Other
                } else {
                    Head::from_word(word)
                }
            }
            _ => Head::Other,
        };
        if !cand.kind.continued_by(head) {
            self.pending = None;
            out.push(self.emit(cand.end, at));
        }
    }

    /// Removes `[0, end)` from the buffer as a new chunk.
    fn emit(&mut self, end: usize, detected_at: f64) -> Chunk {
        let text: String = self.buffer.drain(..end).collect();
        let start_abs = self.committed_offset;
        let end_abs = start_abs + end;
        self.committed_offset = end_abs;

        let mut gen_complete_at = detected_at;
        let mut token_count = 0;
        for mark in &self.tokens {
            if mark.end >= end_abs {
                gen_complete_at = mark.arrival;
                if mark.end == end_abs {
                    token_count += 1;
                }
                break;
            }
            if mark.end > start_abs {
                token_count += 1;
            }
        }
        while self.tokens.front().is_some_and(|m| m.end <= end_abs) {
            self.tokens.pop_front();
        }

        self.scanner.pos -= end;
        self.line_start -= end;
        if let Some(cand) = self.pending.as_mut() {
            cand.end -= end;
        }

        let index = self.next_index;
        self.next_index += 1;
        Chunk {
            index,
            text,
            byte_span: start_abs..end_abs,
            token_count,
            gen_complete_at,
            detected_at: detected_at.max(gen_complete_at),
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-text helpers

/// Splits a complete text into statement-aligned chunks as the streaming chunker would.
pub fn split_statements(text: &str) -> Vec<String> {
    let mut chunker = Chunker::new();
    let mut chunks = Vec::new();
    if !text.is_empty() {
        chunks.extend(chunker.feed(&TokenEvent::new(text, 0.0)));
    }
    chunks.extend(chunker.finish());
    chunks.into_iter().map(|c| c.text).collect()
}

/// Top-level statement heads of a block, or `None` when the block ends inside
/// an open string or bracket.
pub(crate) fn top_level_heads(text: &str) -> Option<Vec<Head>> {
    let bytes = text.as_bytes();
    let mut scanner = Scanner::new();
    let mut heads = Vec::new();
    let mut start = 0;
    loop {
        let end = match scanner.next_line_end(bytes, true) {
            Some(end) => end,
            None if start < bytes.len() => bytes.len(),
            None => break,
        };
        if let LineKind::TopLevel(head) = classify_line(&text[start..end]) {
            let head = match head {
                Head::Async => match async_target(&text[start..end]) {
                    Head::Def => Head::Def,
                    _ => Head::Async,
                },
                h => h,
            };
            heads.push(head);
        }
        if end == bytes.len() {
            break;
        }
        start = end;
    }
    scanner.is_balanced().then_some(heads)
}
