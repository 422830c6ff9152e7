//! Chained integer arithmetic task.
//!
//! "Start with 3 . Add 4 . Multiply by 2 ." -> one analysis line, then for
//! each operation a verbose thought and an equation content segment. The
//! running value stays within the vocabulary's number range by construction.

use crate::rng::Rng;
use crate::taskgen::{HCoTSample, Segment, TaskKind};
use crate::vocab::MAX_NUMBER;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArithmeticOp {
    Add(i64),
    Subtract(i64),
    Multiply(i64),
}

impl ArithmeticOp {
    fn apply(&self, v: i64) -> i64 {
        match self {
            ArithmeticOp::Add(b) => v + b,
            ArithmeticOp::Subtract(b) => v - b,
            ArithmeticOp::Multiply(b) => v * b,
        }
    }

    fn question_clause(&self) -> String {
        match self {
            ArithmeticOp::Add(b) => format!("Add {b} ."),
            ArithmeticOp::Subtract(b) => format!("Subtract {b} ."),
            ArithmeticOp::Multiply(b) => format!("Multiply by {b} ."),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ArithmeticOp::Add(_) => "add",
            ArithmeticOp::Subtract(_) => "subtract",
            ArithmeticOp::Multiply(_) => "multiply",
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            ArithmeticOp::Add(_) => "+",
            ArithmeticOp::Subtract(_) => "-",
            ArithmeticOp::Multiply(_) => "*",
        }
    }

    fn operand(&self) -> i64 {
        match self {
            ArithmeticOp::Add(b) | ArithmeticOp::Subtract(b) | ArithmeticOp::Multiply(b) => *b,
        }
    }
}

/// Build a sample from an explicit operation chain (values must stay within
/// [0, MAX_NUMBER]; callers of the random generator get that for free).
pub(crate) fn build_sample(seed: u64, start: i64, ops: &[ArithmeticOp]) -> HCoTSample {
    assert!(!ops.is_empty());
    let mut question = format!("Start with {start} .");
    for op in ops {
        question.push(' ');
        question.push_str(&op.question_clause());
    }

    let mut segments = vec![Segment::content(
        "Analysis : track the running value step by step .",
    )];
    let mut v = start;
    for (i, op) in ops.iter().enumerate() {
        let u = op.apply(v);
        debug_assert!((0..=MAX_NUMBER).contains(&u), "value {u} out of range");
        let b = op.operand();
        let thought = format!(
            "The running value is {v} and the instruction is {name} {b} so we compute {v} {sym} {b} and we get {u} as the next running value .",
            name = op.name(),
            sym = op.symbol(),
        );
        segments.push(Segment::thought(thought));
        let equation = format!("{v} {sym} {b} = {u}", sym = op.symbol());
        if i + 1 == ops.len() {
            segments.push(Segment::content(format!("{equation} Answer: {u}")));
        } else {
            segments.push(Segment::content(equation));
        }
        v = u;
    }

    HCoTSample {
        task: TaskKind::ChainArithmetic,
        question,
        segments,
        gold_answer: v.to_string(),
        seed,
    }
}

/// Random chained computation with `steps` operations, operands bounded by
/// `operand_max`, and the running value kept within the number vocabulary.
pub fn gen_chain_arithmetic(seed: u64, steps: usize, operand_max: i64) -> HCoTSample {
    assert!(steps >= 1 && operand_max >= 2);
    let mut rng = Rng::derive(seed, "arith");
    let start = rng.range(1, operand_max.min(9) as usize) as i64;
    let mut ops = Vec::with_capacity(steps);
    let mut v = start;
    for _ in 0..steps {
        let mut feasible: Vec<ArithmeticOp> = Vec::new();
        if v + 1 <= MAX_NUMBER {
            let hi = operand_max.min(MAX_NUMBER - v);
            feasible.push(ArithmeticOp::Add(rng.range(1, hi as usize) as i64));
        }
        if v >= 1 {
            let hi = operand_max.min(v);
            feasible.push(ArithmeticOp::Subtract(rng.range(1, hi as usize) as i64));
        }
        if v >= 1 && 2 * v <= MAX_NUMBER {
            let hi = operand_max.min(MAX_NUMBER / v);
            if hi >= 2 {
                feasible.push(ArithmeticOp::Multiply(rng.range(2, hi as usize) as i64));
            }
        }
        let op = *rng.choose(&feasible);
        ops.push(op);
        v = op.apply(v);
    }
    build_sample(seed, start, &ops)
}

/// Reference interpreter: parse a question string and evaluate the chain.
/// Independent of the generator's internal arithmetic, so it can serve as
/// an oracle for generated samples.
pub fn evaluate_question(question: &str) -> Option<i64> {
    let words: Vec<&str> = question.split_whitespace().collect();
    let mut i = 0;
    if words.get(i) != Some(&"Start") || words.get(i + 1) != Some(&"with") {
        return None;
    }
    let mut v: i64 = words.get(i + 2)?.parse().ok()?;
    if words.get(i + 3) != Some(&".") {
        return None;
    }
    i += 4;
    while i < words.len() {
        match words[i] {
            "Add" => {
                v += words.get(i + 1)?.parse::<i64>().ok()?;
                if words.get(i + 2) != Some(&".") {
                    return None;
                }
                i += 3;
            }
            "Subtract" => {
                v -= words.get(i + 1)?.parse::<i64>().ok()?;
                if words.get(i + 2) != Some(&".") {
                    return None;
                }
                i += 3;
            }
            "Multiply" => {
                if words.get(i + 1) != Some(&"by") {
                    return None;
                }
                v *= words.get(i + 2)?.parse::<i64>().ok()?;
                if words.get(i + 3) != Some(&".") {
                    return None;
                }
                i += 4;
            }
            _ => return None,
        }
    }
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_identity() {
        let s = build_sample(0, 5, &[ArithmeticOp::Add(0)]);
        assert_eq!(s.gold_answer, "5");
        assert!(s.segments.last().unwrap().text.contains("Answer: 5"));
        s.validate().unwrap();
    }

    #[test]
    fn worked_example_matches_hand_computation() {
        let s = build_sample(0, 3, &[ArithmeticOp::Add(4), ArithmeticOp::Multiply(2)]);
        assert_eq!(s.gold_answer, "14");
        let contents = s.contents();
        assert_eq!(contents[1], "3 + 4 = 7");
        assert_eq!(contents[2], "7 * 2 = 14 Answer: 14");
        assert_eq!(s.num_thoughts(), 2);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_chain_arithmetic(99, 3, 9);
        let b = gen_chain_arithmetic(99, 3, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn gold_answers_match_reference_interpreter() {
        for seed in 0..500 {
            let steps = 1 + (seed as usize % 3);
            let s = gen_chain_arithmetic(seed, steps, 9);
            let expect = evaluate_question(&s.question).expect("parse");
            assert_eq!(s.gold_answer, expect.to_string(), "question {}", s.question);
            assert!((0..=MAX_NUMBER).contains(&expect));
        }
    }

    #[test]
    fn interpreter_rejects_garbage() {
        assert_eq!(evaluate_question("what is 2 plus 2"), None);
        assert_eq!(evaluate_question("Start with 3 . Divide by 0 ."), None);
    }
}
