//! Synthetic modular-arithmetic tasks, the answer verifier, and the
//! labeled/unlabeled split with sealed gold answers.
//!
//! An expression `a o1 b o2 c ...` is evaluated strictly left to right, so an
//! expression of depth `d` is the left-nested chain `((a o1 b) o2 c) ...` with
//! `d` operators. Its prompt is `BOS, expression tokens, SEP` and a well-formed
//! response is `[scratch tokens] SEP answer-digits EOS`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const EOS: TokenId = 3;
/// Id of the digit token `0`; digit `k` is `DIGIT0 + k`.
pub const DIGIT0: TokenId = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }

    pub fn apply(self, lhs: u64, rhs: u64, modulus: u64) -> u64 {
        let (l, r, m) = (lhs as u128 % modulus as u128, rhs as u128 % modulus as u128, modulus as u128);
        let v = match self {
            Op::Add => (l + r) % m,
            Op::Sub => (l + m - r) % m,
            Op::Mul => (l * r) % m,
        };
        v as u64
    }
}

/// Token alphabet: `PAD, BOS, SEP, EOS`, the decimal digits in use, then the
/// configured operators in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    n_digits: u32,
    ops: Vec<Op>,
}

impl Vocab {
    pub fn new(n_digits: u32, ops: &[Op]) -> Result<Self> {
        if n_digits == 0 || n_digits > 10 {
            return Err(Error::Config(format!("n_digits must be in 1..=10, got {n_digits}")));
        }
        let ops: Vec<Op> = ops.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<sep>", "<eos>"].iter().map(|s| s.to_string()).collect();
        tokens.extend((0..n_digits).map(|d| d.to_string()));
        tokens.extend(ops.iter().map(|o| o.symbol().to_string()));
        Ok(Self { tokens, n_digits, ops })
    }

    /// Smallest vocabulary able to encode every task of every config.
    pub fn for_configs(configs: &[&GeneratorConfig]) -> Result<Self> {
        let mut n_digits = 1;
        let mut ops = BTreeSet::new();
        for c in configs {
            c.validate()?;
            n_digits = n_digits.max(c.digits_needed());
            ops.extend(c.operators.iter().copied());
        }
        Self::new(n_digits, &ops.into_iter().collect::<Vec<_>>())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn n_digits(&self) -> u32 {
        self.n_digits
    }

    pub fn bos_id(&self) -> TokenId {
        BOS
    }
    pub fn sep_id(&self) -> TokenId {
        SEP
    }
    pub fn eos_id(&self) -> TokenId {
        EOS
    }
    pub fn pad_id(&self) -> TokenId {
        PAD
    }

    pub fn digit(&self, d: u32) -> Option<TokenId> {
        (d < self.n_digits).then_some(DIGIT0 + d)
    }

    pub fn op(&self, op: Op) -> Option<TokenId> {
        self.ops.iter().position(|&o| o == op).map(|i| DIGIT0 + self.n_digits + i as TokenId)
    }

    /// Decimal encoding of `value` (no leading zeros).
    pub fn encode_number(&self, value: u64) -> Result<Vec<TokenId>> {
        let base = self.n_digits as u64;
        let s = value.to_string();
        s.bytes()
            .map(|b| {
                let d = (b - b'0') as u64;
                if d < base {
                    Ok(DIGIT0 + d as TokenId)
                } else {
                    Err(Error::InvalidInput(format!("digit {d} of {value} not in vocabulary")))
                }
            })
            .collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.tokens.get(i as usize).map(String::as_str).unwrap_or("<?>")).collect::<Vec<_>>().join(" ")
    }
}

/// Parameters of one task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub modulus: u64,
    pub operand_range: [u64; 2],
    pub depth: usize,
    pub operators: Vec<Op>,
    pub count: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::Config(format!("modulus must be >= 2, got {}", self.modulus)));
        }
        if self.operand_range[0] > self.operand_range[1] {
            return Err(Error::Config(format!("operand range lo {} > hi {}", self.operand_range[0], self.operand_range[1])));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.operators.is_empty() {
            return Err(Error::Config("operators must be non-empty".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be >= 1".into()));
        }
        Ok(())
    }

    fn digits_needed(&self) -> u32 {
        let largest = self.operand_range[1].max(self.modulus - 1);
        if largest >= 10 {
            10
        } else {
            largest as u32 + 1
        }
    }
}

/// A left-nested expression `((first o1 x1) o2 x2) ...`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expr {
    pub first: u64,
    pub steps: Vec<(Op, u64)>,
}

impl Expr {
    pub fn eval(&self, modulus: u64) -> u64 {
        self.steps.iter().fold(self.first % modulus, |acc, &(op, x)| op.apply(acc, x, modulus))
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn tokens(&self, vocab: &Vocab) -> Result<Vec<TokenId>> {
        let mut out = vocab.encode_number(self.first)?;
        for &(op, x) in &self.steps {
            out.push(vocab.op(op).ok_or_else(|| Error::InvalidInput(format!("operator {} not in vocabulary", op.symbol())))?);
            out.extend(vocab.encode_number(x)?);
        }
        Ok(out)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.first)?;
        for (op, x) in &self.steps {
            write!(f, "{}{}", op.symbol(), x)?;
        }
        Ok(())
    }
}

/// Which code path is asking for a gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    /// Training updates. Sealed gold answers are off limits here.
    Training,
    /// Evaluation snapshots and audits.
    Evaluation,
}

/// Counters of gold-answer reads on sealed tasks, shared by every task of a split.
#[derive(Debug, Default)]
pub struct AccessAudit {
    training_reads: AtomicUsize,
    evaluation_reads: AtomicUsize,
}

impl AccessAudit {
    /// Attempted reads of sealed gold answers from a training path.
    pub fn training_reads(&self) -> usize {
        self.training_reads.load(Ordering::SeqCst)
    }

    pub fn evaluation_reads(&self) -> usize {
        self.evaluation_reads.load(Ordering::SeqCst)
    }
}

/// One prompt with its hidden answer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub prompt: Vec<TokenId>,
    pub difficulty: usize,
    pub modulus: u64,
    pub expr: Expr,
    n_digits: u32,
    gold_answer: u64,
    sealed: bool,
    #[serde(skip)]
    audit: Option<Arc<AccessAudit>>,
}

impl Task {
    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Reads the gold answer. Reading a sealed task with [`Access::Training`]
    /// is recorded and refused.
    pub fn gold_answer(&self, access: Access) -> Result<u64> {
        if self.sealed {
            match access {
                Access::Training => {
                    if let Some(a) = &self.audit {
                        a.training_reads.fetch_add(1, Ordering::SeqCst);
                    }
                    return Err(Error::Contract(format!("gold answer of sealed task {} read from a training path", self.id)));
                }
                Access::Evaluation => {
                    if let Some(a) = &self.audit {
                        a.evaluation_reads.fetch_add(1, Ordering::SeqCst);
                    }
                }
            }
        }
        Ok(self.gold_answer)
    }

    /// Answer extracted from a response, without consulting the gold answer.
    pub fn extract_answer(&self, response: &[TokenId]) -> Option<u64> {
        extract_answer(response, self.modulus, self.n_digits)
    }

    /// Canonical correct response `SEP digits EOS`.
    pub fn canonical_response(&self, access: Access) -> Result<Vec<TokenId>> {
        let gold = self.gold_answer(access)?;
        Ok(answer_response(gold, self.n_digits))
    }

    fn seal(&mut self, audit: Arc<AccessAudit>) {
        self.sealed = true;
        self.audit = Some(audit);
    }
}

/// `SEP digits(value) EOS` with decimal digits.
pub fn answer_response(value: u64, n_digits: u32) -> Vec<TokenId> {
    let mut out = vec![SEP];
    out.extend(value.to_string().bytes().map(|b| {
        let d = (b - b'0') as u32;
        debug_assert!(d < n_digits);
        DIGIT0 + d
    }));
    out.push(EOS);
    out
}

/// Decodes the answer segment: tokens after the last SEP and before the
/// terminating EOS, all digits, reduced mod `modulus`. `None` when malformed.
pub fn extract_answer(response: &[TokenId], modulus: u64, n_digits: u32) -> Option<u64> {
    let eos = response.iter().position(|&t| t == EOS)?;
    if eos + 1 != response.len() {
        return None;
    }
    let body = &response[..eos];
    let sep = body.iter().rposition(|&t| t == SEP)?;
    let segment = &body[sep + 1..];
    if segment.is_empty() {
        return None;
    }
    let mut value: u64 = 0;
    for &t in segment {
        if t < DIGIT0 || t >= DIGIT0 + n_digits {
            return None;
        }
        value = ((value as u128 * 10 + (t - DIGIT0) as u128) % modulus as u128) as u64;
    }
    Some(value)
}

/// Binary correctness of `response` on `task`; malformed responses score 0.
pub fn verify(task: &Task, response: &[TokenId], access: Access) -> Result<bool> {
    let gold = task.gold_answer(access)?;
    Ok(task.extract_answer(response) == Some(gold))
}

pub fn gen_tasks(config: &GeneratorConfig) -> Result<Vec<Task>> {
    let vocab = Vocab::for_configs(&[config])?;
    gen_tasks_in(&vocab, config)
}

/// Generates `config.count` tasks tokenized with `vocab`; ids are `0..count`.
pub fn gen_tasks_in(vocab: &Vocab, config: &GeneratorConfig) -> Result<Vec<Task>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let [lo, hi] = config.operand_range;
    (0..config.count)
        .map(|i| {
            let first = rng.gen_range(lo..=hi);
            let steps = (0..config.depth)
                .map(|_| {
                    let op = config.operators[rng.gen_range(0..config.operators.len())];
                    (op, rng.gen_range(lo..=hi))
                })
                .collect();
            let expr = Expr { first, steps };
            let mut prompt = vec![BOS];
            prompt.extend(expr.tokens(vocab)?);
            prompt.push(SEP);
            Ok(Task {
                id: i as u64,
                prompt,
                difficulty: config.depth,
                modulus: config.modulus,
                gold_answer: expr.eval(config.modulus),
                expr,
                n_digits: vocab.n_digits(),
                sealed: false,
                audit: None,
            })
        })
        .collect()
}

/// Labeled tasks with open answers and unlabeled tasks whose answers are
/// readable only in evaluation context.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub vocab: Vocab,
    pub labeled: Vec<Task>,
    pub unlabeled: Vec<Task>,
    audit: Arc<AccessAudit>,
}

impl DatasetSplit {
    pub fn audit(&self) -> &AccessAudit {
        &self.audit
    }

    /// Extra sealed tasks (e.g. a held-out evaluation pool) sharing this split's
    /// vocabulary and audit counters. Ids continue after the unlabeled range.
    pub fn sealed_pool(&self, config: &GeneratorConfig) -> Result<Vec<Task>> {
        let offset = self.labeled.len() as u64 + self.unlabeled.len() as u64;
        let mut tasks = gen_tasks_in(&self.vocab, config)?;
        for t in &mut tasks {
            t.id += offset;
            t.seal(self.audit.clone());
        }
        Ok(tasks)
    }
}

pub fn split_shifted(config_labeled: &GeneratorConfig, config_unlabeled: &GeneratorConfig) -> Result<DatasetSplit> {
    split_shifted_with(config_labeled, config_unlabeled, &[])
}

/// Like [`split_shifted`] but sizes the vocabulary to also cover `extra`
/// configs (so later sealed pools tokenize consistently).
pub fn split_shifted_with(config_labeled: &GeneratorConfig, config_unlabeled: &GeneratorConfig, extra: &[&GeneratorConfig]) -> Result<DatasetSplit> {
    let mut all = vec![config_labeled, config_unlabeled];
    all.extend_from_slice(extra);
    let vocab = Vocab::for_configs(&all)?;
    let labeled = gen_tasks_in(&vocab, config_labeled)?;
    let audit = Arc::new(AccessAudit::default());
    let offset = labeled.len() as u64;
    let mut unlabeled = gen_tasks_in(&vocab, config_unlabeled)?;
    for t in &mut unlabeled {
        t.id += offset;
        t.seal(audit.clone());
    }
    let ids: BTreeSet<u64> = labeled.iter().map(|t| t.id).collect();
    if unlabeled.iter().any(|t| ids.contains(&t.id)) {
        return Err(Error::Internal("labeled and unlabeled id ranges overlap".into()));
    }
    Ok(DatasetSplit { vocab, labeled, unlabeled, audit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub prompt_tokens: Vec<TokenId>,
    pub difficulty: usize,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: u64,
    pub gold_answer: u64,
}

/// Writes `tasks.jsonl` (no answers) and `gold.jsonl` (answers, read with
/// evaluation access) into `dir`.
pub fn dump_tasks(dir: &Path, tasks: &[(&str, &[Task])]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut prompts = std::io::BufWriter::new(std::fs::File::create(dir.join("tasks.jsonl"))?);
    let mut gold = std::io::BufWriter::new(std::fs::File::create(dir.join("gold.jsonl"))?);
    for (split, list) in tasks {
        for t in *list {
            let rec = TaskRecord { id: t.id, prompt_tokens: t.prompt.clone(), difficulty: t.difficulty, split: split.to_string() };
            writeln!(prompts, "{}", serde_json::to_string(&rec)?)?;
            let g = GoldRecord { id: t.id, gold_answer: t.gold_answer(Access::Evaluation)? };
            writeln!(gold, "{}", serde_json::to_string(&g)?)?;
        }
    }
    prompts.flush()?;
    gold.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    f.lines().filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)).map(|l| Ok(serde_json::from_str(&l?)?)).collect()
}
