use super::attributes::{AttributeMap, Level, PartAttributes};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::synthset::{Body, Color, PartKind, Side, Texture};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Word(String),
    Comma,
    Period,
}

fn lex(prompt: &str) -> Result<Vec<Tok>> {
    let mut toks = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, toks: &mut Vec<Tok>| {
        if !word.is_empty() {
            toks.push(Tok::Word(std::mem::take(word).to_lowercase()));
        }
    };
    for c in prompt.chars() {
        match c {
            ',' | '.' => {
                flush(&mut word, &mut toks);
                toks.push(if c == ',' { Tok::Comma } else { Tok::Period });
            }
            c if c.is_whitespace() => flush(&mut word, &mut toks),
            c if c.is_alphanumeric() => word.push(c),
            other => return Err(Error::Parse(format!("unexpected character `{other}`"))),
        }
    }
    flush(&mut word, &mut toks);
    Ok(toks)
}

fn lookup<T: Copy>(all: &[T], name: impl Fn(T) -> &'static str, w: &str) -> Option<T> {
    all.iter().copied().find(|&v| name(v) == w)
}

struct Cursor<'a> {
    toks: &'a [Tok],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(toks: &'a [Tok], what: &'static str) -> Self {
        Self { toks, pos: 0, what }
    }

    fn done(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn err(&self, expected: &str) -> Error {
        let found = match self.peek() {
            Some(Tok::Word(w)) => format!("`{w}`"),
            Some(Tok::Comma) => "`,`".into(),
            Some(Tok::Period) => "`.`".into(),
            None => "end of sentence".into(),
        };
        Error::Parse(format!("{}: expected {expected}, found {found}", self.what))
    }

    fn word(&mut self) -> Option<&'a str> {
        match self.toks.get(self.pos) {
            Some(Tok::Word(w)) => {
                self.pos += 1;
                Some(w.as_str())
            }
            _ => None,
        }
    }

    fn expect_word(&mut self, want: &str) -> Result<()> {
        if matches!(self.peek(), Some(Tok::Word(w)) if w == want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("`{want}`")))
        }
    }

    fn eat_word(&mut self, want: &str) -> bool {
        self.expect_word(want).is_ok()
    }

    fn eat_comma(&mut self) -> bool {
        if self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn one_of<T: Copy>(
        &mut self,
        all: &[T],
        name: impl Fn(T) -> &'static str,
        label: &str,
    ) -> Result<T> {
        let save = self.pos;
        if let Some(w) = self.word() {
            if let Some(v) = lookup(all, name, w) {
                return Ok(v);
            }
        }
        self.pos = save;
        Err(self.err(label))
    }
}

fn parse_global(toks: &[Tok]) -> Result<(Body, Color, Vec<PartAttributes>)> {
    let mut c = Cursor::new(toks, "global sentence");
    c.expect_word("a")?;
    let color = c.one_of(&Color::ALL, Color::name, "a color")?;
    let body = c.one_of(&Body::ALL, Body::name, "a body")?;
    let mut parts: Vec<PartAttributes> = Vec::new();
    if c.eat_word("with") {
        loop {
            if !(c.eat_word("a") || c.eat_word("an")) {
                return Err(c.err("`a` or `an`"));
            }
            let kind = c.one_of(&PartKind::ALL, PartKind::name, "a part kind")?;
            c.expect_word("on")?;
            c.expect_word("the")?;
            let side = c.one_of(&Side::ALL, Side::name, "a side")?;
            if parts.iter().any(|p| p.side == side) {
                return Err(Error::Parse(format!(
                    "two parts on the {} side",
                    side.name()
                )));
            }
            parts.push(PartAttributes {
                kind,
                side,
                color: None,
                texture: None,
            });
            if c.done() {
                break;
            }
            let comma = c.eat_comma();
            let and = c.eat_word("and");
            if !(comma || and) {
                return Err(c.err("`,` or `and`"));
            }
        }
    }
    if !c.done() {
        return Err(c.err("end of sentence"));
    }
    Ok((body, color, parts))
}

fn parse_local(toks: &[Tok], parts: &mut [PartAttributes]) -> Result<()> {
    let mut c = Cursor::new(toks, "local sentence");
    c.expect_word("the")?;
    let side = c.one_of(&Side::ALL, Side::name, "").ok();
    let kind = c.one_of(&PartKind::ALL, PartKind::name, "a part kind")?;
    c.expect_word("is")?;
    let color = c.one_of(&Color::ALL, Color::name, "a color")?;
    c.expect_word("and")?;
    let texture = c.one_of(&Texture::ALL, Texture::name, "a texture")?;
    if !c.done() {
        return Err(c.err("end of sentence"));
    }
    let matches: Vec<usize> = parts
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == kind && side.is_none_or(|s| p.side == s))
        .map(|(i, _)| i)
        .collect();
    let idx = match matches.as_slice() {
        [i] => *i,
        [] => {
            return Err(Error::Parse(format!(
                "local sentence describes a {} not in the global sentence",
                kind.name()
            )))
        }
        _ => {
            return Err(Error::Parse(format!(
                "ambiguous local sentence: several parts are a {}",
                kind.name()
            )))
        }
    };
    let part = &mut parts[idx];
    if part.color.is_some() {
        return Err(Error::Parse(format!(
            "the {} on the {} is described twice",
            kind.name(),
            part.side.name()
        )));
    }
    part.color = Some(color);
    part.texture = Some(texture);
    Ok(())
}

fn parse_materials(toks: &[Tok]) -> Result<(Level, Level)> {
    let mut c = Cursor::new(toks, "material terms");
    let (mut metallic, mut roughness) = (None, None);
    while !c.done() {
        let level = match c.word() {
            Some("low") => Level::Low,
            Some("high") => Level::High,
            _ => {
                c.pos = c.pos.saturating_sub(1);
                return Err(c.err("`low` or `high`"));
            }
        };
        let slot = match c.word() {
            Some("metallic") => &mut metallic,
            Some("roughness") => &mut roughness,
            _ => return Err(c.err("`metallic` or `roughness`")),
        };
        if slot.replace(level).is_some() {
            return Err(Error::Parse("material attribute given twice".into()));
        }
    }
    Ok((
        metallic.unwrap_or(Level::Mid),
        roughness.unwrap_or(Level::Mid),
    ))
}

/// Inverse of the caption grammar. Dropped local sentences leave part
/// color and texture unset; missing material terms read as [`Level::Mid`].
pub fn parse_caption(prompt: &str) -> Result<AttributeMap> {
    if prompt.trim().is_empty() {
        return Err(Error::Parse(
            "empty prompt: the global sentence is mandatory".into(),
        ));
    }
    let vocab = Vocabulary::builtin();
    if let Some(w) = vocab.unknown_words(prompt).into_iter().next() {
        return Err(Error::UnknownToken(w));
    }
    let toks = lex(prompt)?;
    let mut sentences: Vec<&[Tok]> = toks.split(|t| *t == Tok::Period).collect();
    // text after the last period holds the material terms
    let tail = sentences.pop().unwrap_or(&[]);
    if sentences.is_empty() {
        return Err(Error::Parse(
            "the global sentence must end with a period".into(),
        ));
    }
    let (body, body_color, mut parts) = parse_global(sentences[0])?;
    for s in &sentences[1..] {
        parse_local(s, &mut parts)?;
    }
    let (metallic_level, roughness_level) = parse_materials(tail)?;
    Ok(AttributeMap {
        body,
        body_color,
        parts,
        metallic_level,
        roughness_level,
    })
}
