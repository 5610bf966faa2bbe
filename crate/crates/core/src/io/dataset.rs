use std::path::Path;

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::text::BlankSentence;

/// Reads `video_id<TAB>sentence<TAB>answer` records, one per line.
/// Blank lines are skipped; an empty file gives an empty list.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<BlankSentence>> {
    let path = path.as_ref();
    parse_dataset(&read_text(path)?, &path.display().to_string())
}

pub fn parse_dataset(text: &str, origin: &str) -> Result<Vec<BlankSentence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let at = format!("{origin}:{}", i + 1);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [video, sentence, answer] = fields.as_slice() else {
            return Err(Error::format(
                at,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        };
        if video.trim().is_empty() {
            return Err(Error::format(at, "empty video id"));
        }
        let rec = BlankSentence::parse(video.trim(), sentence, answer).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(at.clone(), message),
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn format_dataset_line(video_id: &str, sentence: &str, answer: &str) -> String {
    format!("{video_id}\t{sentence}\t{answer}\n")
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[(String, String, String)]) -> Result<()> {
    let text: String = records
        .iter()
        .map(|(v, s, a)| format_dataset_line(v, s, a))
        .collect();
    write_atomic(path.as_ref(), text.as_bytes())
}
