use std::path::Path;

use super::read_text;
use crate::error::{Error, Result};
use crate::text::EmbeddingTable;

/// Loads a word2vec text file: a `<count> <dim>` header, then one
/// `word v1 … v_dim` line per word.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    parse_embeddings(&read_text(path)?, &path.display().to_string())
}

pub fn parse_embeddings(text: &str, origin: &str) -> Result<EmbeddingTable> {
    let at = |line: usize| format!("{origin}:{line}");
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::format(at(1), "missing \"<count> <dim>\" header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str| s.parse::<usize>().ok();
    let (count, dim) = match fields.as_slice() {
        [c, d] => match (parse_usize(c), parse_usize(d)) {
            (Some(c), Some(d)) if c > 0 && d > 0 => (c, d),
            _ => return Err(Error::format(at(hline), format!("bad header {header:?}"))),
        },
        _ => return Err(Error::format(at(hline), format!("bad header {header:?}"))),
    };

    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::with_capacity(count);
    for (ln, line) in lines {
        if entries.len() == count {
            return Err(Error::format(
                at(ln),
                format!("more than the {count} rows declared in the header"),
            ));
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default().to_string();
        let values = parts
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::format(at(ln), format!("non-numeric value {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(Error::format(
                at(ln),
                format!("expected {dim} values for {word:?}, found {}", values.len()),
            ));
        }
        if !seen.insert(word.clone()) {
            return Err(Error::format(at(ln), format!("duplicate word {word:?}")));
        }
        entries.push((word, values));
    }
    if entries.len() != count {
        return Err(Error::format(
            format!("{origin}:end-of-file"),
            format!("header declares {count} rows, found {}", entries.len()),
        ));
    }
    EmbeddingTable::new(entries)
}

/// Text rendering of a table in the same format, values in `{:.6}`.
pub fn format_embeddings(table: &EmbeddingTable) -> String {
    let mut out = format!("{} {}\n", table.len(), table.dim());
    for (i, w) in table.words().iter().enumerate() {
        out.push_str(w);
        for v in table.row(i) {
            out.push_str(&format!(" {v:.6}"));
        }
        out.push('\n');
    }
    out
}
