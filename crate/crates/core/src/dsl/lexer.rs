//! Tokenizer for rule source text.

use super::SyntaxError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    When,
    Do,
    Set,
    SetOn,
    Where,
    Insert,
    And,
    Or,
    True,
    EqEq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Assign,
    LParen,
    RParen,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Comma,
    Colon,
    Semi,
    Dot,
    Plus,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Tok::When => "WHEN",
            Tok::Do => "DO",
            Tok::Set => "SET",
            Tok::SetOn => "SET_ON",
            Tok::Where => "WHERE",
            Tok::Insert => "INSERT",
            Tok::And => "AND",
            Tok::Or => "OR",
            Tok::True => "TRUE",
            Tok::EqEq => "==",
            Tok::Ne => "!=",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::Assign => "=",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::Comma => ",",
            Tok::Colon => ":",
            Tok::Semi => ";",
            Tok::Dot => ".",
            Tok::Plus => "+",
            Tok::Ident(_) | Tok::Int(_) | Tok::Str(_) | Tok::Eof => "",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub tok: Tok,
    pub line: usize,
    pub col: usize,
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, SyntaxError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, col, msg: String| SyntaxError { line, col, message: msg };
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let advance = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            advance(1, &mut i, &mut col);
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                advance(1, &mut i, &mut col);
            }
            continue;
        }
        let next = chars.get(i + 1).copied();
        let two = |t: Tok| Token { tok: t, line: tl, col: tc };
        let tok = match (c, next) {
            ('=', Some('=')) => {
                advance(2, &mut i, &mut col);
                Tok::EqEq
            }
            ('!', Some('=')) => {
                advance(2, &mut i, &mut col);
                Tok::Ne
            }
            ('<', Some('=')) => {
                advance(2, &mut i, &mut col);
                Tok::Le
            }
            ('>', Some('=')) => {
                advance(2, &mut i, &mut col);
                Tok::Ge
            }
            ('<', _) | ('>', _) | ('=', _) | ('(', _) | (')', _) | ('[', _) | (']', _) | ('{', _) | ('}', _)
            | (',', _) | (':', _) | (';', _) | ('.', _) | ('+', _) => {
                advance(1, &mut i, &mut col);
                match c {
                    '<' => Tok::Lt,
                    '>' => Tok::Gt,
                    '=' => Tok::Assign,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    ',' => Tok::Comma,
                    ':' => Tok::Colon,
                    ';' => Tok::Semi,
                    '.' => Tok::Dot,
                    _ => Tok::Plus,
                }
            }
            ('-', Some(d)) | (d @ '0'..='9', _) if d.is_ascii_digit() => {
                let start = i;
                if c == '-' {
                    advance(1, &mut i, &mut col);
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    advance(1, &mut i, &mut col);
                }
                let text: String = chars[start..i].iter().collect();
                let n = text.parse::<i64>().map_err(|_| err(tl, tc, format!("integer literal `{text}` out of range")))?;
                Tok::Int(n)
            }
            ('"', _) => {
                advance(1, &mut i, &mut col);
                let mut s = String::new();
                loop {
                    match chars.get(i) {
                        None | Some('\n') => return Err(err(tl, tc, "unterminated string literal".into())),
                        Some('"') => {
                            advance(1, &mut i, &mut col);
                            break;
                        }
                        Some('\\') => {
                            let esc = chars.get(i + 1).copied();
                            let ch = match esc {
                                Some('"') => '"',
                                Some('\\') => '\\',
                                Some('n') => '\n',
                                Some('t') => '\t',
                                _ => return Err(err(line, col, "invalid escape sequence".into())),
                            };
                            s.push(ch);
                            advance(2, &mut i, &mut col);
                        }
                        Some(ch) => {
                            s.push(*ch);
                            advance(1, &mut i, &mut col);
                        }
                    }
                }
                Tok::Str(s)
            }
            (c, _) if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    advance(1, &mut i, &mut col);
                }
                let word: String = chars[start..i].iter().collect();
                match word.as_str() {
                    "WHEN" => Tok::When,
                    "DO" => Tok::Do,
                    "SET" => Tok::Set,
                    "SET_ON" => Tok::SetOn,
                    "WHERE" => Tok::Where,
                    "INSERT" => Tok::Insert,
                    "AND" => Tok::And,
                    "OR" => Tok::Or,
                    "TRUE" => Tok::True,
                    _ => Tok::Ident(word),
                }
            }
            (c, _) => return Err(err(tl, tc, format!("unexpected character {c:?}"))),
        };
        out.push(two(tok));
    }
    out.push(Token { tok: Tok::Eof, line, col });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_and_kinds() {
        let toks = tokenize("WHEN u_a >= -3\n  DO SET u_b = \"x\\\"y\"").unwrap();
        let kinds: Vec<_> = toks.iter().map(|t| t.tok.clone()).collect();
        assert_eq!(
            kinds,
            vec![
                Tok::When,
                Tok::Ident("u_a".into()),
                Tok::Ge,
                Tok::Int(-3),
                Tok::Do,
                Tok::Set,
                Tok::Ident("u_b".into()),
                Tok::Assign,
                Tok::Str("x\"y".into()),
                Tok::Eof
            ]
        );
        assert_eq!((toks[4].line, toks[4].col), (2, 3));
    }

    #[test]
    fn lexical_errors_carry_position() {
        let e = tokenize("WHEN u_a == \"open").unwrap_err();
        assert_eq!((e.line, e.col), (1, 13));
        let e = tokenize("WHEN\n u_a @").unwrap_err();
        assert_eq!((e.line, e.col), (2, 6));
        assert!(tokenize("99999999999999999999").is_err());
    }
}
