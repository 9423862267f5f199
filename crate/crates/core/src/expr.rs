//! Scaling-formula expression trees.
//!
//! A formula is a binary parse tree over `+ - * /`, integer constants and
//! named operational metrics. Trees are immutable values; every variation
//! operator returns new trees and draws randomness from the caller's source.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest constant produced by the ephemeral random constant generator.
pub const CONST_MIN: u32 = 1;
/// Largest constant produced by the ephemeral random constant generator.
pub const CONST_MAX: u32 = 100;
/// Default global depth bound for every tree.
pub const DEFAULT_MAX_DEPTH: usize = 15;
/// Depth of the fresh subtree grown by one-point mutation.
pub const MUTATION_SUBTREE_DEPTH: usize = 4;

const PROTECTED_DIV_EPS: f64 = 1e-9;

/// Name of an operational metric a formula may reference.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricName(String);

impl MetricName {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let mut chars = name.chars();
        let valid = match chars.next() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
            }
            _ => false,
        };
        if valid {
            Ok(MetricName(name))
        } else {
            Err(Error::Config(format!("invalid metric name `{name}`")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The declared set of metrics formulas may reference.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<MetricName>,
}

impl Vocabulary {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out: Vec<MetricName> = Vec::new();
        for n in names {
            let n = MetricName::new(n)?;
            if out.contains(&n) {
                return Err(Error::Config(format!("duplicate metric `{n}` in vocabulary")));
            }
            out.push(n);
        }
        if out.is_empty() {
            return Err(Error::Config("metric vocabulary is empty".into()));
        }
        Ok(Vocabulary { names: out })
    }

    pub fn names(&self) -> &[MetricName] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&MetricName> {
        self.names.iter().find(|n| n.as_str() == token)
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(["qps", "cpu", "mem"]).expect("static vocabulary")
    }
}

/// Metric bindings a formula is evaluated against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalContext {
    bindings: BTreeMap<MetricName, f64>,
}

impl EvalContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: MetricName, value: f64) -> &mut Self {
        self.bindings.insert(name, value);
        self
    }

    pub fn with(mut self, name: &str, value: f64) -> Result<Self> {
        self.bindings.insert(MetricName::new(name)?, value);
        Ok(self)
    }

    pub fn get(&self, name: &MetricName) -> Option<f64> {
        self.bindings.get(name).copied()
    }

    /// Checks that every vocabulary metric has a binding.
    pub fn covers(&self, vocab: &Vocabulary) -> Result<()> {
        match vocab.names().iter().find(|n| !self.bindings.contains_key(*n)) {
            Some(missing) => Err(Error::UnboundMetric(missing.to_string())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub const ALL: [BinOp; 4] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div];

    pub fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    fn apply(self, l: f64, r: f64) -> f64 {
        let v = match self {
            BinOp::Add => l + r,
            BinOp::Sub => l - r,
            BinOp::Mul => l * r,
            BinOp::Div => {
                if r.abs() < PROTECTED_DIV_EPS {
                    1.0
                } else {
                    l / r
                }
            }
        };
        // finite operands can only overflow to +-inf here, never NaN
        v.clamp(f64::MIN, f64::MAX)
    }
}

/// A scaling formula: a parse tree whose value is a recommended pod count.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Const(u32),
    Metric(MetricName),
}

impl Expr {
    pub fn binary(op: BinOp, l: Expr, r: Expr) -> Expr {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    pub fn metric(name: &str) -> Result<Expr> {
        Ok(Expr::Metric(MetricName::new(name)?))
    }

    /// Grows a random tree with the grow method.
    ///
    /// Below the depth limit a node becomes a leaf with probability equal to
    /// the terminal ratio of the primitive set; at the limit it is always a
    /// leaf. Leaves pick `Const` or `Metric` with equal probability.
    pub fn grow<R: Rng + ?Sized>(vocab: &Vocabulary, max_depth: usize, rng: &mut R) -> Result<Expr> {
        if vocab.is_empty() {
            return Err(Error::Config("metric vocabulary is empty".into()));
        }
        if max_depth == 0 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        let terminals = (vocab.len() + 1) as f64;
        let leaf_prob = terminals / (terminals + BinOp::ALL.len() as f64);
        Ok(grow_node(vocab, max_depth, leaf_prob, rng))
    }

    /// Evaluates the formula. Division by a near-zero denominator yields 1.
    pub fn evaluate(&self, ctx: &EvalContext) -> Result<f64> {
        match self {
            Expr::Const(c) => Ok(f64::from(*c)),
            Expr::Metric(m) => ctx.get(m).ok_or_else(|| Error::UnboundMetric(m.to_string())),
            Expr::Binary(op, l, r) => Ok(op.apply(l.evaluate(ctx)?, r.evaluate(ctx)?)),
        }
    }

    /// Depth of the tree; a leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
            _ => 1,
        }
    }

    /// Number of nodes.
    pub fn size(&self) -> usize {
        match self {
            Expr::Binary(_, l, r) => 1 + l.size() + r.size(),
            _ => 1,
        }
    }

    /// The subtree rooted at pre-order index `idx`.
    pub fn node(&self, idx: usize) -> Option<&Expr> {
        if idx == 0 {
            return Some(self);
        }
        match self {
            Expr::Binary(_, l, r) => {
                let ls = l.size();
                if idx - 1 < ls {
                    l.node(idx - 1)
                } else {
                    r.node(idx - 1 - ls)
                }
            }
            _ => None,
        }
    }

    /// A copy of this tree with the subtree at pre-order index `idx` replaced.
    pub fn with_node(&self, idx: usize, replacement: Expr) -> Expr {
        if idx == 0 {
            return replacement;
        }
        match self {
            Expr::Binary(op, l, r) => {
                let ls = l.size();
                if idx - 1 < ls {
                    Expr::binary(*op, l.with_node(idx - 1, replacement), (**r).clone())
                } else {
                    Expr::binary(*op, (**l).clone(), r.with_node(idx - 1 - ls, replacement))
                }
            }
            _ => self.clone(),
        }
    }

    /// Metrics referenced anywhere in the tree.
    pub fn metrics(&self) -> Vec<&MetricName> {
        let mut out = Vec::new();
        self.collect_metrics(&mut out);
        out
    }

    fn collect_metrics<'a>(&'a self, out: &mut Vec<&'a MetricName>) {
        match self {
            Expr::Metric(m) => out.push(m),
            Expr::Binary(_, l, r) => {
                l.collect_metrics(out);
                r.collect_metrics(out);
            }
            Expr::Const(_) => {}
        }
    }

    /// Fully parenthesized infix text, e.g. `((qps / 5) + cpu)`.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    /// Parses the text produced by [`Expr::to_text`].
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Expr> {
        let mut p = Parser { src: text.as_bytes(), pos: 0, vocab };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }
}

fn grow_node<R: Rng + ?Sized>(vocab: &Vocabulary, depth_left: usize, leaf_prob: f64, rng: &mut R) -> Expr {
    if depth_left <= 1 || rng.random_bool(leaf_prob) {
        if rng.random_bool(0.5) {
            Expr::Const(rng.random_range(CONST_MIN..=CONST_MAX))
        } else {
            let i = rng.random_range(0..vocab.len());
            Expr::Metric(vocab.names()[i].clone())
        }
    } else {
        let op = BinOp::ALL[rng.random_range(0..BinOp::ALL.len())];
        let l = grow_node(vocab, depth_left - 1, leaf_prob, rng);
        let r = grow_node(vocab, depth_left - 1, leaf_prob, rng);
        Expr::binary(op, l, r)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Metric(m) => write!(f, "{m}"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

/// One-point crossover: swaps uniformly chosen subtrees of `a` and `b`.
///
/// An offspring deeper than `max_depth` is replaced by its own parent.
pub fn crossover_one_point<R: Rng + ?Sized>(a: &Expr, b: &Expr, max_depth: usize, rng: &mut R) -> (Expr, Expr) {
    let i = rng.random_range(0..a.size());
    let j = rng.random_range(0..b.size());
    let sub_a = a.node(i).expect("index within size").clone();
    let sub_b = b.node(j).expect("index within size").clone();
    let child_a = a.with_node(i, sub_b);
    let child_b = b.with_node(j, sub_a);
    let child_a = if child_a.depth() <= max_depth { child_a } else { a.clone() };
    let child_b = if child_b.depth() <= max_depth { child_b } else { b.clone() };
    (child_a, child_b)
}

/// One-point mutation: replaces a uniformly chosen subtree with a freshly
/// grown one of depth at most [`MUTATION_SUBTREE_DEPTH`].
pub fn mutate_one_point<R: Rng + ?Sized>(expr: &Expr, vocab: &Vocabulary, max_depth: usize, rng: &mut R) -> Result<Expr> {
    let i = rng.random_range(0..expr.size());
    let fresh = Expr::grow(vocab, MUTATION_SUBTREE_DEPTH, rng)?;
    let out = expr.with_node(i, fresh);
    Ok(if out.depth() <= max_depth { out } else { expr.clone() })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vocab: &'a Vocabulary,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let l = self.expr()?;
                let op = match self.peek() {
                    Some(b'+') => BinOp::Add,
                    Some(b'-') => BinOp::Sub,
                    Some(b'*') => BinOp::Mul,
                    Some(b'/') => BinOp::Div,
                    Some(_) => return Err(self.err("expected operator")),
                    None => return Err(self.err("unexpected end of input")),
                };
                self.pos += 1;
                let r = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(Expr::binary(op, l, r))
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let digits = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
                digits
                    .parse::<u32>()
                    .map(Expr::Const)
                    .map_err(|_| Error::Parse { pos: start, msg: "constant out of range".into() })
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let token = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii ident");
                match self.vocab.get(token) {
                    Some(m) => Ok(Expr::Metric(m.clone())),
                    None => Err(Error::Parse { pos: start, msg: format!("unknown metric `{token}`") }),
                }
            }
            Some(_) => Err(self.err("unexpected character")),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab2() -> Vocabulary {
        Vocabulary::new(["qps", "cpu"]).unwrap()
    }

    fn sample_formula() -> Expr {
        Expr::binary(
            BinOp::Add,
            Expr::binary(BinOp::Div, Expr::metric("qps").unwrap(), Expr::Const(5)),
            Expr::metric("cpu").unwrap(),
        )
    }

    fn well_formed(e: &Expr, vocab: &Vocabulary, max_depth: usize) -> bool {
        fn consts_ok(e: &Expr, vocab: &Vocabulary) -> bool {
            match e {
                Expr::Const(c) => (CONST_MIN..=CONST_MAX).contains(c),
                Expr::Metric(m) => vocab.get(m.as_str()).is_some(),
                Expr::Binary(_, l, r) => consts_ok(l, vocab) && consts_ok(r, vocab),
            }
        }
        e.depth() <= max_depth && consts_ok(e, vocab)
    }

    #[test]
    fn evaluates_sample_formulas() {
        let ctx = EvalContext::new().with("qps", 100.0).unwrap().with("cpu", 2.0).unwrap();
        assert_eq!(sample_formula().evaluate(&ctx).unwrap(), 22.0);
        let times7 = Expr::binary(BinOp::Mul, Expr::metric("qps").unwrap(), Expr::Const(7));
        let ctx = EvalContext::new().with("qps", 0.5).unwrap();
        assert_eq!(times7.evaluate(&ctx).unwrap(), 3.5);
    }

    #[test]
    fn protected_division() {
        let e = Expr::binary(BinOp::Div, Expr::metric("cpu").unwrap(), Expr::metric("qps").unwrap());
        let ctx = EvalContext::new().with("qps", 0.0).unwrap().with("cpu", 40.0).unwrap();
        assert_eq!(e.evaluate(&ctx).unwrap(), 1.0);
    }

    #[test]
    fn overflow_saturates() {
        let mut e = Expr::Const(100);
        for _ in 0..200 {
            e = Expr::binary(BinOp::Mul, e, Expr::Const(100));
        }
        let v = e.evaluate(&EvalContext::new()).unwrap();
        assert!(v.is_finite());
        let diff = Expr::binary(BinOp::Sub, e.clone(), e);
        assert_eq!(diff.evaluate(&EvalContext::new()).unwrap(), 0.0);
    }

    #[test]
    fn unbound_metric_errors() {
        let e = Expr::metric("mem").unwrap();
        assert!(matches!(e.evaluate(&EvalContext::new()), Err(Error::UnboundMetric(_))));
    }

    #[test]
    fn grow_depth_one_is_leaf() {
        let vocab = Vocabulary::new(["qps"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            match Expr::grow(&vocab, 1, &mut rng).unwrap() {
                Expr::Const(c) => assert!((1..=100).contains(&c)),
                Expr::Metric(m) => assert_eq!(m.as_str(), "qps"),
                other => panic!("not a leaf: {other}"),
            }
        }
    }

    #[test]
    fn grow_is_deterministic() {
        let a = Expr::grow(&vocab2(), 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Expr::grow(&vocab2(), 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grow_rejects_bad_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Expr::grow(&vocab2(), 0, &mut rng).is_err());
        assert!(Vocabulary::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn grow_sweep_respects_invariants_and_spans_constants() {
        let vocab = vocab2();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut seen = [false; 101];
        for _ in 0..10_000 {
            let e = Expr::grow(&vocab, 6, &mut rng).unwrap();
            assert!(well_formed(&e, &vocab, 6));
            let mut stack = vec![&e];
            while let Some(n) = stack.pop() {
                match n {
                    Expr::Const(c) => seen[*c as usize] = true,
                    Expr::Binary(_, l, r) => {
                        stack.push(l);
                        stack.push(r);
                    }
                    Expr::Metric(_) => {}
                }
            }
        }
        assert!(seen[1] && seen[100]);
        assert!(seen[1..].iter().all(|s| *s));
    }

    #[test]
    fn crossover_of_leaves_swaps_them() {
        let a = Expr::metric("qps").unwrap();
        let b = Expr::Const(7);
        let (x, y) = crossover_one_point(&a, &b, 15, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(x, b);
        assert_eq!(y, a);
    }

    #[test]
    fn crossover_and_mutation_keep_depth_bound() {
        let vocab = vocab2();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut pool: Vec<Expr> = (0..20).map(|_| Expr::grow(&vocab, 8, &mut rng).unwrap()).collect();
        for k in 0..1_000 {
            let i = k % pool.len();
            let j = (k * 7 + 3) % pool.len();
            let (x, y) = crossover_one_point(&pool[i], &pool[j], 15, &mut rng);
            assert!(well_formed(&x, &vocab, 15) && well_formed(&y, &vocab, 15));
            let m = mutate_one_point(&x, &vocab, 15, &mut rng).unwrap();
            assert!(well_formed(&m, &vocab, 15));
            pool[i] = m;
            pool[j] = y;
        }
    }

    #[test]
    fn variation_is_deterministic() {
        let vocab = vocab2();
        let a = Expr::grow(&vocab, 5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = Expr::grow(&vocab, 5, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let c1 = crossover_one_point(&a, &b, 15, &mut ChaCha8Rng::seed_from_u64(7));
        let c2 = crossover_one_point(&a, &b, 15, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(c1, c2);
        let m1 = mutate_one_point(&a, &vocab, 15, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let m2 = mutate_one_point(&a, &vocab, 15, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn mutating_a_leaf_replaces_root() {
        let vocab = vocab2();
        let leaf = Expr::Const(42);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // the only node is the root, so the result is exactly the grown subtree
        let mut expected_rng = ChaCha8Rng::seed_from_u64(11);
        let _ = expected_rng.random_range(0..1usize);
        let expected = Expr::grow(&vocab, MUTATION_SUBTREE_DEPTH, &mut expected_rng).unwrap();
        assert_eq!(mutate_one_point(&leaf, &vocab, 15, &mut rng).unwrap(), expected);
    }

    #[test]
    fn text_form() {
        assert_eq!(sample_formula().to_text(), "((qps / 5) + cpu)");
        let vocab = vocab2();
        assert_eq!(Expr::parse("((qps / 5) + cpu)", &vocab).unwrap(), sample_formula());
        assert!(Expr::parse("(qps +", &vocab).is_err());
        assert!(Expr::parse("(qps + mem)", &vocab).is_err());
        assert!(Expr::parse("(qps + 1) 2", &vocab).is_err());
        assert!(Expr::parse("", &vocab).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(seed in any::<u64>(), depth in 1usize..10) {
            let vocab = Vocabulary::default();
            let e = Expr::grow(&vocab, depth, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(Expr::parse(&e.to_text(), &vocab).unwrap(), e);
        }

        #[test]
        fn evaluation_is_finite(seed in any::<u64>(), qps in 0.0f64..1e4, cpu in 0.0f64..1.0, mem in 0.0f64..1.0) {
            let vocab = Vocabulary::default();
            let e = Expr::grow(&vocab, 15, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let ctx = EvalContext::new().with("qps", qps).unwrap().with("cpu", cpu).unwrap().with("mem", mem).unwrap();
            prop_assert!(e.evaluate(&ctx).unwrap().is_finite());
        }
    }
}
