//! Byte-level tokenizer with four special tokens.

use crate::data::Example;
use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const SEP: usize = 258;
pub const PAD: usize = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(token: usize) -> bool {
    (BOS..VOCAB_SIZE).contains(&token)
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Byte tokens back to bytes; special tokens are dropped.
pub fn decode_bytes(tokens: &[usize]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

/// A tokenized `(input, output)` pair ready for next-token training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    /// `[BOS, input.., SEP, output.., EOS]`.
    pub tokens: Vec<usize>,
    /// One flag per predicted position `t` (predicting `tokens[t + 1]`);
    /// set exactly when the predicted token lies after `SEP`.
    pub loss_mask: Vec<bool>,
    sep: usize,
}

impl EncodedExample {
    pub fn sep_index(&self) -> usize {
        self.sep
    }

    /// Tokens through and including `SEP`, the prompt for generation.
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..=self.sep]
    }

    /// Output bytes as tokens, excluding `EOS`.
    pub fn output_tokens(&self) -> &[usize] {
        let end = self.tokens.len() - usize::from(self.tokens.last() == Some(&EOS));
        &self.tokens[self.sep + 1..end]
    }

    /// Model inputs (all but the last token).
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets (all but the first token).
    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Lays out `[BOS, input, SEP, output, EOS]` within `ctx` tokens.
///
/// Over-long examples lose input bytes from the left first; if the output
/// and three specials alone do not fit, the output is cut from the right.
pub fn encode(example: &Example, ctx: usize) -> Result<EncodedExample> {
    encode_pair(example.input.as_bytes(), example.output.as_bytes(), ctx)
}

pub fn encode_pair(input: &[u8], output: &[u8], ctx: usize) -> Result<EncodedExample> {
    if output.is_empty() {
        return Err(Error::Validation(
            "cannot encode an example with empty output".into(),
        ));
    }
    if ctx < 4 {
        return Err(Error::Config(format!("context window {ctx} is too small")));
    }
    let out_len = output.len().min(ctx - 3);
    let in_len = input.len().min(ctx - 3 - out_len);
    let input = &input[input.len() - in_len..];
    let output = &output[..out_len];

    let mut tokens = Vec::with_capacity(in_len + out_len + 3);
    tokens.push(BOS);
    tokens.extend(encode_bytes(input));
    let sep = tokens.len();
    tokens.push(SEP);
    tokens.extend(encode_bytes(output));
    tokens.push(EOS);
    let loss_mask = (0..tokens.len() - 1).map(|t| t + 1 > sep).collect();
    Ok(EncodedExample {
        tokens,
        loss_mask,
        sep,
    })
}

/// `[BOS, input, SEP]`, keeping the rightmost input bytes that fit in `ctx`.
pub fn encode_prompt(input: &[u8], ctx: usize) -> Vec<usize> {
    let keep = input.len().min(ctx.saturating_sub(2));
    let mut tokens = vec![BOS];
    tokens.extend(encode_bytes(&input[input.len() - keep..]));
    tokens.push(SEP);
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn definitional_layout() {
        let e = encode_pair(b"ab", b"c", 128).unwrap();
        assert_eq!(e.tokens, vec![256, 97, 98, 258, 99, 257]);
        // predictions of 97, 98, 258, 99, 257
        assert_eq!(e.loss_mask, vec![false, false, false, true, true]);
        assert_eq!(e.output_tokens(), &[99]);
        assert_eq!(e.prompt(), &[256, 97, 98, 258]);
    }

    #[test]
    fn empty_input() {
        let e = encode_pair(b"", b"x", 128).unwrap();
        assert_eq!(e.tokens, vec![256, 258, 120, 257]);
        assert_eq!(e.loss_mask, vec![false, true, true]);
    }

    #[test]
    fn long_input_is_left_trimmed_to_fit() {
        let input: Vec<u8> = (0..200).map(|i| b'a' + (i % 26) as u8).collect();
        let e = encode_pair(&input, b"0123456789", 128).unwrap();
        assert_eq!(e.tokens.len(), 128);
        assert_eq!(e.sep_index() - 1, 115);
        assert_eq!(
            decode_bytes(&e.tokens[1..e.sep_index()]),
            &input[200 - 115..]
        );
        assert_eq!(e.output_tokens(), encode_bytes(b"0123456789").as_slice());
    }

    #[test]
    fn long_output_is_right_trimmed() {
        let e = encode_pair(b"abc", &[b'z'; 20], 10).unwrap();
        assert_eq!(
            e.tokens,
            vec![BOS, SEP, 122, 122, 122, 122, 122, 122, 122, EOS]
        );
    }

    #[test]
    fn empty_output_rejected() {
        assert!(matches!(
            encode_pair(b"a", b"", 16),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn specials_do_not_collide_with_bytes() {
        for t in [BOS, EOS, SEP, PAD] {
            assert!(t > 255 && t < VOCAB_SIZE && is_special(t));
        }
    }

    proptest! {
        #[test]
        fn bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            let mut toks = vec![BOS];
            toks.extend(encode_bytes(&bytes));
            toks.push(EOS);
            prop_assert_eq!(decode_bytes(&toks), bytes);
        }

        #[test]
        fn layout_invariants(input in proptest::collection::vec(any::<u8>(), 0..80),
                             output in proptest::collection::vec(any::<u8>(), 1..80),
                             ctx in 8usize..64) {
            let e = encode_pair(&input, &output, ctx).unwrap();
            prop_assert!(e.tokens.len() <= ctx);
            prop_assert_eq!(e.tokens.iter().filter(|&&t| t == SEP).count(), 1);
            prop_assert_eq!(e.loss_mask.len(), e.tokens.len() - 1);
            for (t, &m) in e.loss_mask.iter().enumerate() {
                prop_assert_eq!(m, t >= e.sep_index());
            }
        }
    }
}
