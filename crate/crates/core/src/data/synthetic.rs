//! Synthetic corpora: two dialects of one small imperative language.
//!
//! Both dialects share the grammar, identifiers, numbers and punctuation
//! and differ only in their keyword sets, which makes them a controllable
//! stand-in for a pair of programming languages. Clone pairs come from
//! semantics-preserving rewrites of a random program.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::record::RawRecord;
use crate::task::TaskKind;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Keywords {
    pub func: &'static str,
    pub bind: &'static str,
    pub cond: &'static str,
    pub otherwise: &'static str,
    pub repeat: &'static str,
    pub ret: &'static str,
    pub print: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialect {
    pub name: &'static str,
    pub keywords: Keywords,
}

impl Dialect {
    pub fn alpha() -> Self {
        Self {
            name: "alpha",
            keywords: Keywords {
                func: "fn",
                bind: "let",
                cond: "if",
                otherwise: "else",
                repeat: "while",
                ret: "return",
                print: "print",
            },
        }
    }

    pub fn beta() -> Self {
        Self {
            name: "beta",
            keywords: Keywords {
                func: "def",
                bind: "var",
                cond: "when",
                otherwise: "otherwise",
                repeat: "loop",
                ret: "give",
                print: "show",
            },
        }
    }

    pub fn keyword_list(&self) -> [&'static str; 7] {
        let k = &self.keywords;
        [k.func, k.bind, k.cond, k.otherwise, k.repeat, k.ret, k.print]
    }
}

const VARIABLES: [&str; 24] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "m", "n", "p", "q", "r", "s", "t", "u", "v", "w", "x", "y", "z",
];

const FUNCTIONS: [&str; 16] = [
    "run", "calc", "step", "mix", "scan", "fold", "walk", "tick", "sum", "diff", "grow", "trim", "pick", "span", "pulse", "merge",
];

/// Words used by the natural-language descriptions; disjoint from both
/// keyword sets.
pub const DESCRIPTION_WORDS: [&str; 14] = [
    "function", "takes", "assign", "to", "plus", "times", "minus", "check", "above", "below", "display", "yield", "then", "end",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
        }
    }

    fn word(self) -> &'static str {
        match self {
            BinOp::Add => "plus",
            BinOp::Sub => "minus",
            BinOp::Mul => "times",
        }
    }

    fn commutative(self) -> bool {
        matches!(self, BinOp::Add | BinOp::Mul)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Var(usize),
    Num(u32),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cond {
    /// `true` for `>`, `false` for `<`.
    pub greater: bool,
    pub lhs: Expr,
    pub rhs: Expr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Let(usize, Expr),
    Assign(usize, Expr),
    If(Cond, Vec<Stmt>),
    While(Cond, Vec<Stmt>),
    Print(Expr),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: usize,
    pub params: Vec<usize>,
    pub body: Vec<Stmt>,
    pub ret: Expr,
}

/// Size knobs for [`random_program`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramShape {
    pub min_statements: usize,
    pub max_statements: usize,
    pub max_number: u32,
    pub max_depth: usize,
}

impl Default for ProgramShape {
    fn default() -> Self {
        Self {
            min_statements: 2,
            max_statements: 3,
            max_number: 40,
            max_depth: 1,
        }
    }
}

fn random_expr<R: Rng>(rng: &mut R, vars: &[usize], shape: &ProgramShape, depth: usize) -> Expr {
    if depth < shape.max_depth && rng.random_bool(0.6) {
        let op = [BinOp::Add, BinOp::Sub, BinOp::Mul][rng.random_range(0..3)];
        let lhs = random_expr(rng, vars, shape, depth + 1);
        let rhs = random_expr(rng, vars, shape, depth + 1);
        return Expr::Bin(op, Box::new(lhs), Box::new(rhs));
    }
    if !vars.is_empty() && rng.random_bool(0.5) {
        Expr::Var(vars[rng.random_range(0..vars.len())])
    } else {
        Expr::Num(rng.random_range(0..=shape.max_number))
    }
}

fn random_cond<R: Rng>(rng: &mut R, vars: &[usize], shape: &ProgramShape) -> Cond {
    Cond {
        greater: rng.random_bool(0.5),
        lhs: Expr::Var(vars[rng.random_range(0..vars.len())]),
        rhs: Expr::Num(rng.random_range(0..=shape.max_number)),
    }
}

pub fn random_program<R: Rng>(rng: &mut R, shape: &ProgramShape) -> Program {
    let mut pool: Vec<usize> = (0..VARIABLES.len()).collect();
    pool.shuffle(rng);
    let params = vec![pool.pop().expect("pool"), pool.pop().expect("pool")];
    let mut defined = params.clone();
    let n = rng.random_range(shape.min_statements..=shape.max_statements);
    let mut body = Vec::with_capacity(n);
    for _ in 0..n {
        let stmt = match rng.random_range(0..5) {
            0 | 1 => {
                let v = pool.pop().unwrap_or(defined[0]);
                let e = random_expr(rng, &defined, shape, 0);
                defined.push(v);
                Stmt::Let(v, e)
            }
            2 => {
                let target = defined[rng.random_range(0..defined.len())];
                let inner = Stmt::Assign(target, random_expr(rng, &defined, shape, 0));
                Stmt::If(random_cond(rng, &defined, shape), vec![inner])
            }
            3 => {
                let target = defined[rng.random_range(0..defined.len())];
                let step = Expr::Bin(BinOp::Add, Box::new(Expr::Var(target)), Box::new(Expr::Num(1)));
                let cond = Cond {
                    greater: false,
                    lhs: Expr::Var(target),
                    rhs: Expr::Num(rng.random_range(0..=shape.max_number)),
                };
                Stmt::While(cond, vec![Stmt::Assign(target, step)])
            }
            _ => Stmt::Print(random_expr(rng, &defined, shape, 0)),
        };
        body.push(stmt);
    }
    let ret = random_expr(rng, &defined, shape, 0);
    Program {
        name: rng.random_range(0..FUNCTIONS.len()),
        params,
        body,
        ret,
    }
}

fn uses(e: &Expr, v: usize) -> bool {
    match e {
        Expr::Var(x) => *x == v,
        Expr::Num(_) => false,
        Expr::Bin(_, a, b) => uses(a, v) || uses(b, v),
    }
}

fn rewrite_expr<R: Rng>(e: &Expr, rng: &mut R, rename: &dyn Fn(usize) -> usize) -> Expr {
    match e {
        Expr::Var(v) => Expr::Var(rename(*v)),
        Expr::Num(n) => Expr::Num(*n),
        Expr::Bin(op, a, b) => {
            let a = rewrite_expr(a, rng, rename);
            let b = rewrite_expr(b, rng, rename);
            if op.commutative() && rng.random_bool(0.5) {
                Expr::Bin(*op, Box::new(b), Box::new(a))
            } else {
                Expr::Bin(*op, Box::new(a), Box::new(b))
            }
        }
    }
}

fn rewrite_cond<R: Rng>(c: &Cond, rng: &mut R, rename: &dyn Fn(usize) -> usize) -> Cond {
    let lhs = rewrite_expr(&c.lhs, rng, rename);
    let rhs = rewrite_expr(&c.rhs, rng, rename);
    if rng.random_bool(0.5) {
        Cond {
            greater: !c.greater,
            lhs: rhs,
            rhs: lhs,
        }
    } else {
        Cond {
            greater: c.greater,
            lhs,
            rhs,
        }
    }
}

fn rewrite_stmt<R: Rng>(s: &Stmt, rng: &mut R, rename: &dyn Fn(usize) -> usize) -> Stmt {
    match s {
        Stmt::Let(v, e) => Stmt::Let(rename(*v), rewrite_expr(e, rng, rename)),
        Stmt::Assign(v, e) => Stmt::Assign(rename(*v), rewrite_expr(e, rng, rename)),
        Stmt::If(c, body) => Stmt::If(
            rewrite_cond(c, rng, rename),
            body.iter().map(|s| rewrite_stmt(s, rng, rename)).collect(),
        ),
        Stmt::While(c, body) => Stmt::While(
            rewrite_cond(c, rng, rename),
            body.iter().map(|s| rewrite_stmt(s, rng, rename)).collect(),
        ),
        Stmt::Print(e) => Stmt::Print(rewrite_expr(e, rng, rename)),
    }
}

/// A semantically equivalent variant: consistent renaming (half the time),
/// commuted operands, mirrored comparisons and swapped independent `let`s.
pub fn make_clone<R: Rng>(p: &Program, rng: &mut R) -> Program {
    let mut mapping: Vec<usize> = (0..VARIABLES.len()).collect();
    if rng.random_bool(0.5) {
        mapping.shuffle(rng);
    }
    let rename = move |v: usize| mapping[v];
    let mut body: Vec<Stmt> = p.body.iter().map(|s| rewrite_stmt(s, rng, &rename)).collect();
    for i in 1..body.len() {
        let independent = match (&body[i - 1], &body[i]) {
            (Stmt::Let(x, ex), Stmt::Let(y, ey)) => !uses(ey, *x) && !uses(ex, *y) && x != y,
            _ => false,
        };
        if independent && rng.random_bool(0.5) {
            body.swap(i - 1, i);
        }
    }
    Program {
        name: if rng.random_bool(0.3) {
            rng.random_range(0..FUNCTIONS.len())
        } else {
            p.name
        },
        params: p.params.iter().map(|&v| rename(v)).collect(),
        body,
        ret: rewrite_expr(&p.ret, rng, &rename),
    }
}

fn render_expr(e: &Expr, out: &mut Vec<String>) {
    match e {
        Expr::Var(v) => out.push(VARIABLES[*v].to_string()),
        Expr::Num(n) => out.push(n.to_string()),
        Expr::Bin(op, a, b) => {
            out.push("(".into());
            render_expr(a, out);
            out.push(op.symbol().into());
            render_expr(b, out);
            out.push(")".into());
        }
    }
}

fn render_cond(c: &Cond, out: &mut Vec<String>) {
    out.push("(".into());
    render_expr(&c.lhs, out);
    out.push(if c.greater { ">" } else { "<" }.into());
    render_expr(&c.rhs, out);
    out.push(")".into());
}

fn render_stmt(s: &Stmt, k: &Keywords, out: &mut Vec<String>) {
    let push = |t: &str, out: &mut Vec<String>| out.push(t.to_string());
    match s {
        Stmt::Let(v, e) => {
            push(k.bind, out);
            push(VARIABLES[*v], out);
            push("=", out);
            render_expr(e, out);
            push(";", out);
        }
        Stmt::Assign(v, e) => {
            push(VARIABLES[*v], out);
            push("=", out);
            render_expr(e, out);
            push(";", out);
        }
        Stmt::If(c, body) | Stmt::While(c, body) => {
            push(if matches!(s, Stmt::If(..)) { k.cond } else { k.repeat }, out);
            render_cond(c, out);
            push("{", out);
            for b in body {
                render_stmt(b, k, out);
            }
            push("}", out);
        }
        Stmt::Print(e) => {
            push(k.print, out);
            render_expr(e, out);
            push(";", out);
        }
    }
}

/// Space-separated source text of `p` in `dialect`.
pub fn render(p: &Program, dialect: &Dialect) -> String {
    let k = &dialect.keywords;
    let mut out: Vec<String> = vec![k.func.into(), FUNCTIONS[p.name].into(), "(".into()];
    for (i, &v) in p.params.iter().enumerate() {
        if i > 0 {
            out.push(",".into());
        }
        out.push(VARIABLES[v].into());
    }
    out.extend([")".to_string(), "{".to_string()]);
    for s in &p.body {
        render_stmt(s, k, &mut out);
    }
    out.push(k.ret.into());
    render_expr(&p.ret, &mut out);
    out.extend([";".to_string(), "}".to_string()]);
    out.join(" ")
}

fn describe_expr(e: &Expr, out: &mut Vec<String>) {
    match e {
        Expr::Var(v) => out.push(VARIABLES[*v].to_string()),
        Expr::Num(n) => out.push(n.to_string()),
        Expr::Bin(op, a, b) => {
            describe_expr(a, out);
            out.push(op.word().into());
            describe_expr(b, out);
        }
    }
}

fn describe_stmt(s: &Stmt, out: &mut Vec<String>) {
    match s {
        Stmt::Let(v, e) | Stmt::Assign(v, e) => {
            out.extend(["assign".to_string(), VARIABLES[*v].to_string(), "to".to_string()]);
            describe_expr(e, out);
        }
        Stmt::If(c, body) | Stmt::While(c, body) => {
            out.push("check".into());
            describe_expr(&c.lhs, out);
            out.push(if c.greater { "above" } else { "below" }.into());
            describe_expr(&c.rhs, out);
            out.push("then".into());
            for b in body {
                describe_stmt(b, out);
            }
            out.push("end".into());
        }
        Stmt::Print(e) => {
            out.push("display".into());
            describe_expr(e, out);
        }
    }
}

/// Dialect-neutral natural-language description of `p`.
pub fn describe(p: &Program) -> String {
    let mut out = vec!["function".to_string(), FUNCTIONS[p.name].to_string(), "takes".to_string()];
    out.extend(p.params.iter().map(|&v| VARIABLES[v].to_string()));
    for s in &p.body {
        describe_stmt(s, &mut out);
    }
    out.push("yield".into());
    describe_expr(&p.ret, &mut out);
    out.join(" ")
}

/// `n` positive clone pairs in `dialect`, ids `"{prefix}{i}"`.
pub fn clone_pairs<R: Rng>(rng: &mut R, dialect: &Dialect, n: usize, shape: &ProgramShape, prefix: &str) -> Vec<RawRecord> {
    (0..n)
        .map(|i| {
            let p = random_program(rng, shape);
            let c = make_clone(&p, rng);
            RawRecord::pair(format!("{prefix}{i}"), TaskKind::Cd, dialect.name, render(&p, dialect), render(&c, dialect), 1)
        })
        .collect()
}

/// Unlabeled programs for masked-language-model pre-training.
pub fn unlabeled_programs<R: Rng>(rng: &mut R, dialect: &Dialect, n: usize, shape: &ProgramShape) -> Vec<String> {
    (0..n).map(|_| render(&random_program(rng, shape), dialect)).collect()
}

/// Code generation pairs: description → program, for every dialect in
/// `dialects` on the same description.
pub fn generation_pairs<R: Rng>(
    rng: &mut R,
    dialects: &[Dialect],
    programs: usize,
    shape: &ProgramShape,
    prefix: &str,
) -> Vec<RawRecord> {
    let mut out = Vec::with_capacity(programs * dialects.len());
    for i in 0..programs {
        let p = random_program(rng, shape);
        for d in dialects {
            out.push(RawRecord::generative(
                format!("{prefix}{i}-{}", d.name),
                TaskKind::Cg,
                d.name,
                describe(&p),
                render(&p, d),
            ));
        }
    }
    out
}

/// Summarization pairs: program → description.
pub fn summarization_pairs<R: Rng>(rng: &mut R, dialect: &Dialect, n: usize, shape: &ProgramShape, prefix: &str) -> Vec<RawRecord> {
    (0..n)
        .map(|i| {
            let p = random_program(rng, shape);
            RawRecord::generative(format!("{prefix}{i}"), TaskKind::Cm, dialect.name, render(&p, dialect), describe(&p))
        })
        .collect()
}

/// Every surface token the generator can emit, for reserving vocabulary
/// entries.
pub fn all_tokens(dialects: &[Dialect], max_number: u32) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in dialects {
        out.extend(d.keyword_list().iter().map(|s| s.to_string()));
    }
    out.extend(VARIABLES.iter().map(|s| s.to_string()));
    out.extend(FUNCTIONS.iter().map(|s| s.to_string()));
    out.extend(DESCRIPTION_WORDS.iter().map(|s| s.to_string()));
    out.extend(["(", ")", "{", "}", ",", ";", "=", "+", "-", "*", "<", ">"].iter().map(|s| s.to_string()));
    out.extend((0..=max_number).map(|n| n.to_string()));
    out
}
