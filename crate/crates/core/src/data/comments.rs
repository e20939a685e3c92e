//! Comment removal driven by a small per-language grammar.
//!
//! The scanner is a character-level state machine with four states: code,
//! string literal, line comment and block comment. Comment markers inside
//! string literals are left alone.

use serde::{Deserialize, Serialize};

/// Comment and string syntax of one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommentGrammar {
    pub line: Vec<String>,
    /// `(open, close)` pairs.
    #[serde(default)]
    pub block: Vec<(String, String)>,
    /// Block markers only count at the start of a line (Ruby `=begin`).
    #[serde(default)]
    pub block_at_line_start: bool,
    /// Quote characters that honour backslash escapes.
    pub quotes: Vec<char>,
    /// Quote characters without escapes (Go raw strings).
    #[serde(default)]
    pub raw_quotes: Vec<char>,
    /// Recognise `"""` and `'''` as string delimiters.
    #[serde(default)]
    pub triple_quotes: bool,
}

impl CommentGrammar {
    fn c_like(quotes: &[char], raw: &[char]) -> Self {
        Self {
            line: vec!["//".into()],
            block: vec![("/*".into(), "*/".into())],
            block_at_line_start: false,
            quotes: quotes.to_vec(),
            raw_quotes: raw.to_vec(),
            triple_quotes: false,
        }
    }

    /// Grammars for java, go, solidity, javascript, ruby and python.
    pub fn builtin(lang: &str) -> Option<Self> {
        match lang.to_ascii_lowercase().as_str() {
            "java" => Some(Self::c_like(&['"', '\''], &[])),
            "go" => Some(Self::c_like(&['"', '\''], &['`'])),
            "javascript" | "js" => Some(Self::c_like(&['"', '\'', '`'], &[])),
            "solidity" => Some(Self::c_like(&['"', '\''], &[])),
            "python" => Some(Self {
                line: vec!["#".into()],
                block: Vec::new(),
                block_at_line_start: false,
                quotes: vec!['"', '\''],
                raw_quotes: Vec::new(),
                triple_quotes: true,
            }),
            "ruby" => Some(Self {
                line: vec!["#".into()],
                block: vec![("=begin".into(), "=end".into())],
                block_at_line_start: true,
                quotes: vec!['"', '\''],
                raw_quotes: Vec::new(),
                triple_quotes: false,
            }),
            _ => None,
        }
    }
}

enum State {
    Code,
    Str { close: String, escapes: bool },
    Line,
    Block { close: String },
}

fn at_line_start(chars: &[char], i: usize) -> bool {
    i == 0 || chars[i - 1] == '\n'
}

fn starts_with(chars: &[char], i: usize, pat: &str) -> bool {
    pat.chars().enumerate().all(|(k, c)| chars.get(i + k) == Some(&c))
}

/// Removes comments from `code`. Newlines that end line comments are kept.
pub fn strip_comments_with(code: &str, grammar: &CommentGrammar) -> String {
    let chars: Vec<char> = code.chars().collect();
    let mut out = String::with_capacity(code.len());
    let mut state = State::Code;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match &state {
            State::Code => {
                if grammar.triple_quotes && (starts_with(&chars, i, "\"\"\"") || starts_with(&chars, i, "'''")) {
                    let delim: String = chars[i..i + 3].iter().collect();
                    out.push_str(&delim);
                    state = State::Str { close: delim, escapes: true };
                    i += 3;
                    continue;
                }
                if grammar.quotes.contains(&c) || grammar.raw_quotes.contains(&c) {
                    out.push(c);
                    state = State::Str {
                        close: c.to_string(),
                        escapes: !grammar.raw_quotes.contains(&c),
                    };
                    i += 1;
                    continue;
                }
                if let Some(open) = grammar.line.iter().find(|m| starts_with(&chars, i, m)) {
                    i += open.chars().count();
                    state = State::Line;
                    continue;
                }
                let block = grammar.block.iter().find(|(open, _)| {
                    starts_with(&chars, i, open) && (!grammar.block_at_line_start || at_line_start(&chars, i))
                });
                if let Some((open, close)) = block {
                    i += open.chars().count();
                    state = State::Block { close: close.clone() };
                    continue;
                }
                out.push(c);
                i += 1;
            }
            State::Str { close, escapes } => {
                if *escapes && c == '\\' && i + 1 < chars.len() {
                    out.push(c);
                    out.push(chars[i + 1]);
                    i += 2;
                    continue;
                }
                if starts_with(&chars, i, close) {
                    out.push_str(close);
                    i += close.chars().count();
                    state = State::Code;
                    continue;
                }
                out.push(c);
                i += 1;
            }
            State::Line => {
                if c == '\n' {
                    out.push(c);
                    state = State::Code;
                }
                i += 1;
            }
            State::Block { close } => {
                let closes = starts_with(&chars, i, close) && (!grammar.block_at_line_start || at_line_start(&chars, i));
                if closes {
                    i += close.chars().count();
                    state = State::Code;
                } else {
                    i += 1;
                }
            }
        }
    }
    out
}

/// Removes comments using the built-in grammar for `lang`. Unknown
/// languages pass through unchanged with a warning.
pub fn strip_comments(code: &str, lang: &str) -> String {
    match CommentGrammar::builtin(lang) {
        Some(g) => strip_comments_with(code, &g),
        None => {
            log::warn!("no comment grammar for `{lang}`; leaving code unchanged");
            code.to_string()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_and_block_comments() {
        assert_eq!(strip_comments("x = 1 // note", "go"), "x = 1 ");
        assert_eq!(strip_comments("/* a */ b", "java"), " b");
        assert_eq!(strip_comments("a // x\nb", "solidity"), "a \nb");
        assert_eq!(strip_comments("x = 1  # why\ny = 2", "python"), "x = 1  \ny = 2");
    }

    #[test]
    fn string_literals_are_untouched() {
        let code = r#"s := "// not a comment" // real"#;
        assert_eq!(strip_comments(code, "go"), r#"s := "// not a comment" "#);
        let code = r#"x = "a \" /* b */ c";"#;
        assert_eq!(strip_comments(code, "javascript"), code);
        let code = "raw := `C:\\` // c";
        assert_eq!(strip_comments(code, "go"), "raw := `C:\\` ");
        let code = "d = \"\"\"# not\"\"\" # yes";
        assert_eq!(strip_comments(code, "python"), "d = \"\"\"# not\"\"\" ");
    }

    #[test]
    fn ruby_block_needs_line_start() {
        let code = "a = 1\n=begin\nhidden\n=end\nb = 2 # c";
        assert_eq!(strip_comments(code, "ruby"), "a = 1\n\nb = 2 ");
        let inline = "x = y =begin";
        assert_eq!(strip_comments(inline, "ruby"), inline);
    }

    #[test]
    fn unknown_language_passes_through() {
        assert_eq!(strip_comments("x -- y", "haskell"), "x -- y");
    }

    /// Reference scanner for the C-like grammar, written as an explicit
    /// transition table over (state, char).
    fn reference(code: &str) -> String {
        #[derive(Clone, Copy, PartialEq)]
        enum S {
            Code,
            Slash,
            Dq,
            DqEsc,
            Line,
            Block,
            BlockStar,
        }
        let mut s = S::Code;
        let mut out = String::new();
        for c in code.chars() {
            s = match (s, c) {
                (S::Code, '/') => S::Slash,
                (S::Code, '"') => {
                    out.push(c);
                    S::Dq
                }
                (S::Code, _) => {
                    out.push(c);
                    S::Code
                }
                (S::Slash, '/') => S::Line,
                (S::Slash, '*') => S::Block,
                (S::Slash, '"') => {
                    out.push('/');
                    out.push(c);
                    S::Dq
                }
                (S::Slash, _) => {
                    out.push('/');
                    if c == '/' {
                        S::Slash
                    } else {
                        out.push(c);
                        S::Code
                    }
                }
                (S::Dq, '\\') => {
                    out.push(c);
                    S::DqEsc
                }
                (S::Dq, '"') => {
                    out.push(c);
                    S::Code
                }
                (S::Dq, _) | (S::DqEsc, _) => {
                    out.push(c);
                    S::Dq
                }
                (S::Line, '\n') => {
                    out.push(c);
                    S::Code
                }
                (S::Line, _) => S::Line,
                (S::Block, '*') => S::BlockStar,
                (S::Block, _) => S::Block,
                (S::BlockStar, '/') => S::Code,
                (S::BlockStar, '*') => S::BlockStar,
                (S::BlockStar, _) => S::Block,
            };
        }
        if s == S::Slash {
            out.push('/');
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn agrees_with_reference_scanner(code in "[a/*\" \n\\\\]{0,40}") {
            let grammar = CommentGrammar {
                line: vec!["//".into()],
                block: vec![("/*".into(), "*/".into())],
                block_at_line_start: false,
                quotes: vec!['"'],
                raw_quotes: vec![],
                triple_quotes: false,
            };
            proptest::prop_assert_eq!(strip_comments_with(&code, &grammar), reference(&code));
        }
    }
}
