use super::{Dataset, Example, Split};
use crate::error::Result;

/// Splits after each `.`, `!` or `?` that is followed by a space or ends the
/// text. Delimiters stay with the preceding piece and the following space
/// starts the next one, so the pieces concatenate back to `text` exactly.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut pieces = Vec::new();
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && (i + 1 == bytes.len() || bytes[i + 1] == b' ') {
            pieces.push(&text[start..=i]);
            start = i + 1;
        }
    }
    if start < text.len() || pieces.is_empty() {
        pieces.push(&text[start..]);
    }
    pieces
}

/// Re-segmentation augmentation of the forget split.
///
/// A forget example whose output has `k ≥ 2` sentences becomes `k` examples:
/// variant `i` moves the first `i` sentences onto the end of the input and
/// keeps the rest as output. Variant 0 is the original example with its
/// original id; the others are `{id}#aug{i}`. Everything else passes through.
pub fn augment_resegment(ds: &Dataset) -> Result<Dataset> {
    let mut out = Vec::with_capacity(ds.examples.len());
    for e in &ds.examples {
        if e.split != Split::Forget {
            out.push(e.clone());
            continue;
        }
        let sentences = split_sentences(&e.output);
        out.push(e.clone());
        let mut input = e.input.clone();
        for i in 1..sentences.len() {
            input.push_str(sentences[i - 1]);
            out.push(Example {
                id: format!("{}#aug{i}", e.id),
                input: input.clone(),
                output: sentences[i..].concat(),
                split: e.split,
                task: e.task,
            });
        }
    }
    Dataset::from_examples(out)
}
