//! Imported per-step histories.
//!
//! One line per step, holding that step's past actions oldest first,
//! separated by `;`. `#` starts a comment; lines holding only a comment are
//! skipped, while a blank line is a step with an empty history.

use std::path::Path;

use super::{ActionVocabulary, HistoryQueue};
use crate::error::{Error, Result};

pub fn parse_history(
    text: &str,
    vocab: &ActionVocabulary,
    capacity: usize,
    source_name: &str,
) -> Result<Vec<HistoryQueue>> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let (body, comment) = match raw.split_once('#') {
            Some((b, _)) => (b, true),
            None => (raw, false),
        };
        let body = body.trim();
        if body.is_empty() && comment {
            continue;
        }
        let mut q = HistoryQueue::new(capacity)?;
        if !body.is_empty() {
            for name in body.split(';').map(str::trim) {
                if name.is_empty() {
                    return Err(Error::parse(source_name, line_no, "empty action name"));
                }
                let id = vocab.id(name).ok_or_else(|| {
                    Error::parse(source_name, line_no, format!("unknown action name {name:?}"))
                })?;
                q.push_raw(id);
            }
        }
        steps.push(q);
    }
    Ok(steps)
}

pub fn load_external_history(
    path: &Path,
    vocab: &ActionVocabulary,
    capacity: usize,
) -> Result<Vec<HistoryQueue>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_history(&text, vocab, capacity, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ActionVocabulary {
        ActionVocabulary::new(["pick leg", "align screw", "rotate table"]).unwrap()
    }

    #[test]
    fn names_resolve_to_ids() {
        let text = "# header\npick leg\npick leg; align screw\n\nrotate table;pick leg # trailing\n";
        let steps = parse_history(text, &vocab(), 7, "h.txt").unwrap();
        let items: Vec<Vec<usize>> = steps.iter().map(HistoryQueue::items).collect();
        assert_eq!(items, vec![vec![0], vec![0, 1], vec![], vec![2, 0]]);
    }

    #[test]
    fn long_lines_keep_the_newest() {
        let steps = parse_history("pick leg;align screw;rotate table", &vocab(), 2, "h").unwrap();
        assert_eq!(steps[0].items(), vec![1, 2]);
    }

    #[test]
    fn unknown_name_reports_its_line() {
        let err = parse_history("pick leg\n\nalign scerw\n", &vocab(), 3, "hist.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(err.to_string().starts_with("hist.txt:3:"));
        let err = parse_history("pick leg;;align screw", &vocab(), 3, "h").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
