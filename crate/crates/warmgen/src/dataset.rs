//! Dataset and vocabulary text files.
//!
//! A dataset line is `src_ids<TAB>tgt_ids` with space-separated decimal ids.
//! Lines starting with `#` are comments. The vocabulary manifest has one
//! `id<TAB>name` line per token.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use warmgen_core::tasks::Example;
use warmgen_core::vocab::{is_special, Token, Vocab};

use crate::error::{io_err, Error, Result};

fn join(ids: &[Token]) -> String {
    let parts: Vec<String> = ids.iter().map(u32::to_string).collect();
    parts.join(" ")
}

pub fn format_examples(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        writeln!(out, "{}\t{}", join(&e.source), join(&e.target)).expect("writing to a String");
    }
    out
}

fn parse_ids(field: &str) -> std::result::Result<Vec<Token>, String> {
    field
        .split_whitespace()
        .map(|w| match w.parse::<Token>() {
            Ok(t) if is_special(t) => Err(format!("reserved id {t} in example")),
            Ok(t) => Ok(t),
            Err(_) => Err(format!("bad token id {w:?}")),
        })
        .collect()
}

/// Parses dataset text; `label` names the source in error messages.
pub fn parse_examples(text: &str, label: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { file: label.to_string(), line: i + 1, msg };
        let (src, tgt) = line.split_once('\t').ok_or_else(|| err("expected source<TAB>target".into()))?;
        if tgt.contains('\t') {
            return Err(err("more than one tab".into()));
        }
        out.push(Example::new(parse_ids(src).map_err(err)?, parse_ids(tgt).map_err(err)?));
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    fs::write(path, format_examples(examples)).map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_examples(&text, &path.display().to_string())
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for (i, name) in vocab.names().iter().enumerate() {
        writeln!(out, "{i}\t{name}").expect("writing to a String");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let label = path.display().to_string();
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: &str| Error::Parse { file: label.clone(), line: i + 1, msg: msg.to_string() };
        let (id, name) = line.split_once('\t').ok_or_else(|| err("expected id<TAB>name"))?;
        if id.parse::<usize>().ok() != Some(names.len()) {
            return Err(err("ids must count up from 0"));
        }
        names.push(name.to_string());
    }
    Ok(Vocab::from_names(names)?)
}

/// Reads a token line given either as ids (`4 5 6`) or as symbol names (`a b c`).
pub fn parse_token_line(line: &str, vocab: &Vocab) -> Result<Vec<Token>> {
    line.split_whitespace()
        .map(|w| {
            w.parse::<Token>()
                .ok()
                .filter(|&t| (t as usize) < vocab.size())
                .or_else(|| vocab.id(w))
                .ok_or_else(|| Error::Parse { file: "<input>".into(), line: 1, msg: format!("unknown token {w:?}") })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let text = format_examples(&[Example::new(vec![4, 5], vec![5, 4])]);
        assert_eq!(text, "4 5\t5 4\n");
    }

    #[test]
    fn comments_and_errors() {
        let ex = parse_examples("# header\n4 5\t6\n", "t").unwrap();
        assert_eq!(ex, vec![Example::new(vec![4, 5], vec![6])]);
        match parse_examples("4 5\t6\n4 x\t5\n", "t") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_examples("4 5 6\n", "t").is_err());
        assert!(parse_examples("4 2\t5\n", "t").is_err());
    }

    #[test]
    fn token_lines() {
        let v = Vocab::new(10).unwrap();
        assert_eq!(parse_token_line("a b 6", &v).unwrap(), vec![4, 5, 6]);
        assert!(parse_token_line("zz", &v).is_err());
    }
}
