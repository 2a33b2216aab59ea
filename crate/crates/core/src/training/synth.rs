//! Synthetic extractive-QA task with planted answers.
//!
//! Each context is 20–60 filler words. A span of 1–5 distinct words that
//! occur nowhere else in the context is planted at a random position, and
//! the question restates those words between fixed frame words.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Answer, QaExample};

pub const FILLER_WORDS: usize = 400;
pub const MIN_CONTEXT: usize = 20;
pub const MAX_CONTEXT: usize = 60;
pub const MAX_ANSWER: usize = 5;

const FRAME_OPEN: [&str; 3] = ["which", "span", "says"];

fn filler(i: usize) -> String {
    format!("w{i}")
}

pub fn synth_task(n_examples: usize, seed: u64) -> Vec<QaExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_examples)
        .map(|k| {
            let n = rng.gen_range(MIN_CONTEXT..=MAX_CONTEXT);
            let len = rng.gen_range(1..=MAX_ANSWER);
            let pos = rng.gen_range(0..=n - len);
            let mut pool: Vec<usize> = (0..FILLER_WORDS).collect();
            pool.shuffle(&mut rng);
            let (answer_ids, rest) = pool.split_at(len);
            let mut words: Vec<String> = (0..n)
                .map(|_| filler(*rest.choose(&mut rng).expect("non-empty pool")))
                .collect();
            for (i, &a) in answer_ids.iter().enumerate() {
                words[pos + i] = filler(a);
            }
            let answer: Vec<String> = answer_ids.iter().map(|&a| filler(a)).collect();
            let char_start: usize = words[..pos].iter().map(|w| w.chars().count() + 1).sum();
            let mut question: Vec<String> = FRAME_OPEN.iter().map(|s| s.to_string()).collect();
            question.extend(answer.iter().cloned());
            question.push("?".into());
            QaExample {
                id: format!("synth-{seed}-{k}"),
                context: words.join(" "),
                question: question.join(" "),
                answers: vec![Answer {
                    text: answer.join(" "),
                    answer_start: char_start,
                }],
            }
        })
        .collect()
}
