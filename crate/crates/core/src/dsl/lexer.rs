use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number `{v}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

/// Token with its 0-based character offset in the source.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Spanned {
    pub tok: Tok,
    pub pos: usize,
}

pub(crate) fn tokenize(source: &str) -> Result<Vec<Spanned>> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        let tok = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => Tok::Slash,
            '^' => Tok::Caret,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            c if c.is_ascii_digit() || c == '.' => {
                let (value, next) = lex_number(&chars, i)?;
                out.push(Spanned {
                    tok: Tok::Num(value),
                    pos: start,
                });
                i = next;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.')
                {
                    i += 1;
                }
                out.push(Spanned {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    pos: start,
                });
                continue;
            }
            other => {
                return Err(Error::Lex {
                    pos: start,
                    message: format!("unexpected character `{other}`"),
                })
            }
        };
        out.push(Spanned { tok, pos: start });
        i += 1;
    }
    out.push(Spanned {
        tok: Tok::End,
        pos: chars.len(),
    });
    Ok(out)
}

fn lex_number(chars: &[char], start: usize) -> Result<(f64, usize)> {
    let mut i = start;
    let digits = |i: &mut usize| {
        let from = *i;
        while *i < chars.len() && chars[*i].is_ascii_digit() {
            *i += 1;
        }
        *i - from
    };
    let mut mantissa = digits(&mut i);
    if i < chars.len() && chars[i] == '.' {
        i += 1;
        mantissa += digits(&mut i);
    }
    if mantissa == 0 {
        return Err(Error::Lex {
            pos: start,
            message: "malformed number".into(),
        });
    }
    if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
        let mark = i;
        i += 1;
        if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
            i += 1;
        }
        if digits(&mut i) == 0 {
            return Err(Error::Lex {
                pos: mark,
                message: "exponent has no digits".into(),
            });
        }
    }
    let text: String = chars[start..i].iter().collect();
    let value: f64 = text.parse().map_err(|_| Error::Lex {
        pos: start,
        message: format!("malformed number `{text}`"),
    })?;
    if !value.is_finite() {
        return Err(Error::Lex {
            pos: start,
            message: format!("number `{text}` overflows"),
        });
    }
    Ok((value, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_are_character_offsets() {
        let toks = tokenize("x0 + *").unwrap();
        let pos: Vec<usize> = toks.iter().map(|t| t.pos).collect();
        assert_eq!(pos, [0, 3, 5, 6]);
    }

    #[test]
    fn numbers_with_exponents() {
        let toks = tokenize("1.5e-3 .25 2E2").unwrap();
        assert_eq!(toks[0].tok, Tok::Num(1.5e-3));
        assert_eq!(toks[1].tok, Tok::Num(0.25));
        assert_eq!(toks[2].tok, Tok::Num(200.0));
    }

    #[test]
    fn rejects_stray_characters() {
        match tokenize("x0 $ 1") {
            Err(Error::Lex { pos, .. }) => assert_eq!(pos, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(tokenize("1e+"), Err(Error::Lex { pos: 1, .. })));
        assert!(matches!(tokenize("."), Err(Error::Lex { pos: 0, .. })));
    }
}
