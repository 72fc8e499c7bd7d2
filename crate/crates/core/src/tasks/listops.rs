//! Nested list operations over single digits.
//!
//! Expressions such as `( MAX 2 ( SM 9 9 ) 3 )` are token sequences whose
//! label is their value: `MAX`, `MIN`, `MED` (lower median) and `SM` (sum
//! modulo 10). Every operator takes 2 to `max_args` arguments and nesting is
//! bounded by `max_depth`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::rng::{rng_for, SeededRng};

pub const MAX: usize = 10;
pub const MIN: usize = 11;
pub const MED: usize = 12;
pub const SM: usize = 13;
pub const OPEN: usize = 14;
pub const CLOSE: usize = 15;
pub const VOCAB_SIZE: usize = 16;
pub const N_CLASSES: usize = 10;

const NAMES: [&str; VOCAB_SIZE] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "MAX", "MIN", "MED", "SM", "(", ")"];
const OPS: [usize; 4] = [MAX, MIN, MED, SM];
/// Shortest expression: `( OP d d )`.
const MIN_LEN: usize = 5;

pub fn token_name(t: usize) -> &'static str {
    NAMES.get(t).copied().unwrap_or("?")
}

pub fn parse_token(s: &str) -> Result<usize> {
    NAMES.iter().position(|&n| n == s).ok_or_else(|| Error::Parse(format!("unknown ListOps token {s:?}")))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ListOpsExample {
    pub tokens: Vec<usize>,
    pub label: usize,
    /// Operator nesting depth (1 for a flat expression).
    pub depth: usize,
}

impl ListOpsExample {
    pub fn from_tokens(tokens: Vec<usize>) -> Result<Self> {
        let (label, depth) = evaluate_with_depth(&tokens)?;
        Ok(Self { tokens, label, depth })
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
    }

    /// `label<TAB>tokens`, the line format of serialized datasets.
    pub fn to_line(&self) -> String {
        format!("{}\t{}", self.label, self.text())
    }

    /// Parses [`ListOpsExample::to_line`] output and checks the stored label.
    pub fn from_line(line: &str) -> Result<Self> {
        let (label, text) = line.split_once('\t').ok_or_else(|| Error::Parse(format!("missing tab in {line:?}")))?;
        let label: usize = label.trim().parse().map_err(|_| Error::Parse(format!("bad label {label:?}")))?;
        let tokens = text.split_whitespace().map(parse_token).collect::<Result<Vec<_>>>()?;
        let ex = Self::from_tokens(tokens)?;
        ensure!(ex.label == label, Parse, "stored label {} but the expression evaluates to {}", label, ex.label);
        Ok(ex)
    }
}

fn apply(op: usize, args: &mut [usize]) -> usize {
    match op {
        MAX => *args.iter().max().expect("operators have arguments"),
        MIN => *args.iter().min().expect("operators have arguments"),
        MED => {
            args.sort_unstable();
            args[(args.len() - 1) / 2]
        }
        _ => args.iter().sum::<usize>() % 10,
    }
}

/// Value of a well-formed expression.
pub fn evaluate(tokens: &[usize]) -> Result<usize> {
    evaluate_with_depth(tokens).map(|(v, _)| v)
}

fn evaluate_with_depth(tokens: &[usize]) -> Result<(usize, usize)> {
    // Stack of (operator, arguments so far).
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut depth = 0;
    let mut result = None;
    let mut i = 0;
    while i < tokens.len() {
        ensure!(result.is_none(), Parse, "tokens after the end of the expression at {}", i);
        match tokens[i] {
            OPEN => {
                let op = tokens.get(i + 1).copied().filter(|t| OPS.contains(t));
                let op = op.ok_or_else(|| Error::Parse(format!("'(' at {i} is not followed by an operator")))?;
                stack.push((op, Vec::new()));
                depth = depth.max(stack.len());
                i += 1;
            }
            CLOSE => {
                let (op, mut args) = stack.pop().ok_or_else(|| Error::Parse(format!("unbalanced ')' at {i}")))?;
                ensure!(!args.is_empty(), Parse, "operator {} without arguments", token_name(op));
                let v = apply(op, &mut args);
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(v),
                    None => result = Some(v),
                }
            }
            d if d < 10 => {
                let (_, args) = stack.last_mut().ok_or_else(|| Error::Parse("digit outside any operator".into()))?;
                args.push(d);
            }
            t => return Err(Error::Parse(format!("unexpected token {} at {i}", token_name(t)))),
        }
        i += 1;
    }
    ensure!(stack.is_empty(), Parse, "{} unclosed operators", stack.len());
    result.map(|v| (v, depth)).ok_or_else(|| Error::Parse("empty expression".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListOpsParams {
    pub max_depth: usize,
    pub max_args: usize,
    /// Longest accepted token sequence; longer draws are rejected.
    pub max_len: usize,
    /// Chance that an argument is a nested expression while depth allows.
    pub nest_prob: f64,
}

impl Default for ListOpsParams {
    fn default() -> Self {
        Self { max_depth: 4, max_args: 5, max_len: 64, nest_prob: 0.3 }
    }
}

impl ListOpsParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_depth >= 1, Contract, "max_depth must be at least 1");
        ensure!(self.max_args >= 2, Contract, "max_args must be at least 2, got {}", self.max_args);
        ensure!(self.max_len >= MIN_LEN, Contract, "max_len {} is below the shortest expression ({})", self.max_len, MIN_LEN);
        ensure!((0.0..=1.0).contains(&self.nest_prob), Contract, "nest_prob {} outside [0, 1]", self.nest_prob);
        Ok(())
    }
}

fn draw(rng: &mut SeededRng, depth_left: usize, p: &ListOpsParams, out: &mut Vec<usize>) {
    out.push(OPEN);
    out.push(OPS[rng.gen_range(0..OPS.len())]);
    for _ in 0..rng.gen_range(2..=p.max_args) {
        if depth_left > 1 && rng.gen_bool(p.nest_prob) {
            draw(rng, depth_left - 1, p, out);
        } else {
            out.push(rng.gen_range(0..10));
        }
    }
    out.push(CLOSE);
}

/// `n` expressions drawn deterministically from `seed`, labelled by [`evaluate`].
pub fn gen_listops(n: usize, params: &ListOpsParams, seed: u64) -> Result<Vec<ListOpsExample>> {
    params.validate()?;
    let mut rng = rng_for(seed, "listops");
    let mut out = Vec::with_capacity(n);
    let mut tokens = Vec::new();
    while out.len() < n {
        tokens.clear();
        draw(&mut rng, params.max_depth, params, &mut tokens);
        if tokens.len() <= params.max_len {
            out.push(ListOpsExample::from_tokens(tokens.clone())?);
        }
    }
    Ok(out)
}
