// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::case::{ContrastCase, Segment};
use super::topk_alternatives;
use crate::error::{Error, Result};
use crate::model::ModelBundle;

/// Formatting token placed between segments.
const SEPARATOR: u32 = 1;

/// Seeded cases over a model's own predictions: BOS, then
/// Instruction / Question / Answer segments separated by a formatting token.
/// The target is the model's greedy token at the last position and the
/// contrast its runner-up, so `Δℓ ≥ 0` for the generating model.
///
/// Token ids below `first_content` are never drawn as content.
pub fn synthetic_cases(
    model: &ModelBundle,
    count: usize,
    seed: u64,
    lengths: std::ops::RangeInclusive<usize>,
    first_content: u32,
) -> Result<Vec<ContrastCase>> {
    let cfg = model.config();
    if *lengths.start() < 8 || lengths.is_empty() {
        return Err(Error::input("synthetic cases need at least 8 tokens"));
    }
    if first_content as usize >= cfg.vocab_size {
        return Err(Error::input("no content tokens left in the vocabulary"));
    }
    let bos = *cfg.special_token_ids.iter().next().ok_or_else(|| Error::input("model declares no BOS token"))?;
    let mask = first_content.saturating_sub(1).max(bos);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|idx| {
            let n = rng.gen_range(lengths.clone());
            // BOS, instruction, SEP, question, SEP, answer
            let content = n - 3;
            let a = rng.gen_range(2..=content / 2);
            let q = rng.gen_range(1..=content - a - 1);
            let mut tokens = vec![bos];
            let mut draw = |k: usize, tokens: &mut Vec<u32>| {
                tokens.extend((0..k).map(|_| rng.gen_range(first_content..cfg.vocab_size as u32)));
            };
            draw(a, &mut tokens);
            tokens.push(SEPARATOR);
            draw(q, &mut tokens);
            tokens.push(SEPARATOR);
            draw(content - a - q, &mut tokens);
            let top = topk_alternatives(model, &tokens, n - 1, 2)?;
            let mut case =
                ContrastCase::from_model(model, format!("synthetic-{idx:03}"), tokens, top[0].0, top[1].0, mask);
            case.segments = vec![
                Segment { name: "Instruction".into(), start: 1, end: 1 + a },
                Segment { name: "Question".into(), start: 2 + a, end: 2 + a + q },
                Segment { name: "Answer".into(), start: 3 + a + q, end: n },
            ];
            case.validate()?;
            Ok(case)
        })
        .collect()
}
