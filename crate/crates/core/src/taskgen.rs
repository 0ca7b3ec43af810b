//! Deterministic generators for toy long-context retrieval tasks.
//!
//! Token-id alphabets partition the vocabulary (syntax markers, filler,
//! keys, values) so needles can never collide with filler and chance-level
//! accuracy is analytic. Instances serialize to `.toks` files: a header
//! line `memdlm-toks v1 vocab=<V>` followed by `P: <ids> | R: <ids>` lines.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng::{stream_rng, stream};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("context too small: need {needed} tokens, have {available}")]
    Capacity { needed: usize, available: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invalid task spec: {0}")]
    BadSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Disjoint token-id ranges within the output vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabets {
    pub query_marker: u32,
    pub assign_marker: u32,
    pub copy_open: u32,
    pub copy_close: u32,
    pub filler: Range<u32>,
    pub keys: Range<u32>,
    pub values: Range<u32>,
}

impl Alphabets {
    /// Default partition: 4 syntax ids, then half the rest filler and a
    /// quarter each for keys and values.
    pub fn default_for(vocab: usize) -> Self {
        assert!(vocab >= 12, "vocabulary too small to partition");
        let v = vocab as u32;
        let rest = v - 4;
        let filler_len = rest / 2;
        let key_len = (rest - filler_len) / 2;
        let filler = 4..4 + filler_len;
        let keys = filler.end..filler.end + key_len;
        let values = keys.end..v;
        Alphabets { query_marker: 0, assign_marker: 1, copy_open: 2, copy_close: 3, filler, keys, values }
    }

    pub fn validate(&self, vocab: usize) -> Result<(), TaskError> {
        let v = vocab as u32;
        let ranges = [&self.filler, &self.keys, &self.values];
        for r in &ranges {
            if r.is_empty() || r.end > v {
                return Err(TaskError::BadSpec(format!("alphabet range {r:?} outside vocabulary {vocab}")));
            }
        }
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                if ranges[i].start < ranges[j].end && ranges[j].start < ranges[i].end {
                    return Err(TaskError::BadSpec("alphabet ranges overlap".into()));
                }
            }
        }
        for m in [self.query_marker, self.assign_marker, self.copy_open, self.copy_close] {
            if m >= v || ranges.iter().any(|r| r.contains(&m)) {
                return Err(TaskError::BadSpec(format!("marker {m} collides with an alphabet")));
            }
        }
        Ok(())
    }

    fn pick(&self, range: &Range<u32>, rng: &mut ChaCha8Rng) -> u32 {
        rng.gen_range(range.start..range.end)
    }

    /// Human-readable label for a token id (used by the generate command).
    pub fn label(&self, vocab: usize, id: u32) -> String {
        let v = vocab as u32;
        if id == self.query_marker {
            "Q".into()
        } else if id == self.assign_marker {
            "=".into()
        } else if id == self.copy_open {
            "(".into()
        } else if id == self.copy_close {
            ")".into()
        } else if self.filler.contains(&id) {
            format!("f{}", id - self.filler.start)
        } else if self.keys.contains(&id) {
            format!("k{}", id - self.keys.start)
        } else if self.values.contains(&id) {
            format!("v{}", id - self.values.start)
        } else if id == v {
            "[M]".into()
        } else if id == v + 1 {
            "[P]".into()
        } else {
            format!("?{id}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    KvNiah,
    VariableTracking,
    Copy,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::KvNiah => "kv_niah",
            TaskKind::VariableTracking => "variable_tracking",
            TaskKind::Copy => "copy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub context_len: usize,
    pub n_pairs: usize,
    pub chain_len: usize,
    pub span_len: usize,
    pub value_width: usize,
    pub count: usize,
    pub seed: u64,
    pub alphabets: Alphabets,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab: usize) -> Self {
        TaskSpec {
            kind,
            vocab,
            context_len: 64,
            n_pairs: 4,
            chain_len: 3,
            span_len: 4,
            value_width: 1,
            count: 128,
            seed: 1,
            alphabets: Alphabets::default_for(vocab),
        }
    }

    /// Parse the flat task spec file format (`key = value`, `#` comments).
    pub fn parse(text: &str) -> Result<Self, TaskError> {
        let mut kind = None;
        let mut spec = TaskSpec::new(TaskKind::KvNiah, 64);
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(TaskError::BadSpec(format!("line {}: expected 'key = value'", lineno + 1)));
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            let num = |field: &mut usize| -> Result<(), TaskError> {
                *field = value
                    .parse()
                    .map_err(|e| TaskError::BadSpec(format!("bad value for {key}: {e}")))?;
                Ok(())
            };
            match key {
                "kind" => {
                    kind = Some(match value {
                        "kv_niah" => TaskKind::KvNiah,
                        "variable_tracking" => TaskKind::VariableTracking,
                        "copy" => TaskKind::Copy,
                        _ => return Err(TaskError::BadSpec(format!("unknown kind {value}"))),
                    })
                }
                "vocab" => {
                    num(&mut spec.vocab)?;
                    spec.alphabets = Alphabets::default_for(spec.vocab);
                }
                "context_len" => num(&mut spec.context_len)?,
                "n_pairs" => num(&mut spec.n_pairs)?,
                "chain_len" => num(&mut spec.chain_len)?,
                "span_len" => num(&mut spec.span_len)?,
                "value_width" => num(&mut spec.value_width)?,
                "count" => num(&mut spec.count)?,
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|e| TaskError::BadSpec(format!("bad value for seed: {e}")))?
                }
                _ => return Err(TaskError::BadSpec(format!("unknown task spec key: {key}"))),
            }
        }
        spec.kind = kind.ok_or_else(|| TaskError::BadSpec("missing 'kind'".into()))?;
        spec.alphabets.validate(spec.vocab)?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// One (prompt, response) instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

/// Sample `n` distinct members of 0..pool without replacement.
fn sample_distinct(pool: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(n <= pool);
    let mut idx: Vec<usize> = (0..pool).collect();
    for i in 0..n {
        let j = rng.gen_range(i..pool);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Generate the instances described by a spec (deterministic in the seed).
pub fn generate(spec: &TaskSpec) -> Result<Vec<Pair>, TaskError> {
    spec.alphabets.validate(spec.vocab)?;
    let mut rng = stream_rng(spec.seed, &[stream::TASKGEN]);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        out.push(match spec.kind {
            TaskKind::KvNiah => gen_kv_niah(spec, &mut rng)?,
            TaskKind::VariableTracking => gen_variable_tracking(spec, &mut rng)?,
            TaskKind::Copy => gen_copy(spec, &mut rng)?,
        });
    }
    Ok(out)
}

/// Key-value needles in filler haystack; the query names one planted key
/// and the response is its value tokens.
pub fn gen_kv_niah(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Pair, TaskError> {
    let a = &spec.alphabets;
    let needle_width = 1 + spec.value_width;
    let usable = spec.context_len.saturating_sub(2);
    let n_slots = usable / needle_width;
    if spec.n_pairs > n_slots {
        return Err(TaskError::Capacity { needed: spec.n_pairs * needle_width + 2, available: spec.context_len });
    }
    let key_pool = (a.keys.end - a.keys.start) as usize;
    if spec.n_pairs > key_pool {
        return Err(TaskError::BadSpec(format!("{} needles but only {key_pool} keys", spec.n_pairs)));
    }

    let mut prompt: Vec<u32> = (0..spec.context_len).map(|_| a.pick(&a.filler, rng)).collect();
    let slots = sample_distinct(n_slots, spec.n_pairs, rng);
    let keys = sample_distinct(key_pool, spec.n_pairs, rng);
    let mut needles = Vec::with_capacity(spec.n_pairs);
    for (slot, key_idx) in slots.iter().zip(&keys) {
        let key = a.keys.start + *key_idx as u32;
        let value: Vec<u32> = (0..spec.value_width).map(|_| a.pick(&a.values, rng)).collect();
        let base = slot * needle_width;
        prompt[base] = key;
        prompt[base + 1..base + needle_width].copy_from_slice(&value);
        needles.push((key, value));
    }
    let queried = rng.gen_range(0..needles.len());
    prompt[spec.context_len - 2] = a.query_marker;
    prompt[spec.context_len - 1] = needles[queried].0;
    Ok(Pair { prompt, response: needles[queried].1.clone() })
}

/// Chain of aliases v1 = c, v2 = v1, ...; the query names the final
/// variable and the response is the root constant.
pub fn gen_variable_tracking(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Pair, TaskError> {
    let a = &spec.alphabets;
    let assign_width = 3;
    let usable = spec.context_len.saturating_sub(2);
    let n_slots = usable / assign_width;
    if spec.chain_len > n_slots {
        return Err(TaskError::Capacity { needed: spec.chain_len * assign_width + 2, available: spec.context_len });
    }
    let key_pool = (a.keys.end - a.keys.start) as usize;
    if spec.chain_len > key_pool {
        return Err(TaskError::BadSpec(format!("chain of {} but only {key_pool} variables", spec.chain_len)));
    }

    let vars: Vec<u32> = sample_distinct(key_pool, spec.chain_len, rng)
        .into_iter()
        .map(|i| a.keys.start + i as u32)
        .collect();
    let root = a.pick(&a.values, rng);
    let mut prompt: Vec<u32> = (0..spec.context_len).map(|_| a.pick(&a.filler, rng)).collect();
    let slots = sample_distinct(n_slots, spec.chain_len, rng);
    for (i, slot) in slots.iter().enumerate() {
        let rhs = if i == 0 { root } else { vars[i - 1] };
        let base = slot * assign_width;
        prompt[base] = vars[i];
        prompt[base + 1] = a.assign_marker;
        prompt[base + 2] = rhs;
    }
    prompt[spec.context_len - 2] = a.query_marker;
    prompt[spec.context_len - 1] = vars[spec.chain_len - 1];
    Ok(Pair { prompt, response: vec![root] })
}

/// A marked span inside filler; the response copies it verbatim.
pub fn gen_copy(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Pair, TaskError> {
    let a = &spec.alphabets;
    let needed = spec.span_len + 3; // open + span + close + query marker
    if spec.context_len < needed {
        return Err(TaskError::Capacity { needed, available: spec.context_len });
    }
    let mut prompt: Vec<u32> = (0..spec.context_len).map(|_| a.pick(&a.filler, rng)).collect();
    let span: Vec<u32> = (0..spec.span_len).map(|_| a.pick(&a.values, rng)).collect();
    let start = rng.gen_range(0..=spec.context_len - needed);
    prompt[start] = a.copy_open;
    prompt[start + 1..start + 1 + spec.span_len].copy_from_slice(&span);
    prompt[start + 1 + spec.span_len] = a.copy_close;
    prompt[spec.context_len - 1] = a.query_marker;
    Ok(Pair { prompt, response: span })
}

// ── file format ─────────────────────────────────────────────────────

pub fn write_toks(path: &Path, vocab: usize, pairs: &[Pair]) -> Result<(), TaskError> {
    let mut s = String::new();
    let _ = writeln!(s, "memdlm-toks v1 vocab={vocab}");
    for p in pairs {
        let ids = |v: &[u32]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "P: {} | R: {}", ids(&p.prompt), ids(&p.response));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_toks(path: &Path) -> Result<(usize, Vec<Pair>), TaskError> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| TaskError::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let vocab = header
        .strip_prefix("memdlm-toks v1 vocab=")
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| TaskError::Parse { path: pstr.clone(), line: 1, msg: "bad header".into() })?;
    let mut pairs = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| TaskError::Parse { path: pstr.clone(), line: idx + 1, msg: msg.into() };
        let rest = line.strip_prefix("P:").ok_or_else(|| err("missing 'P:'"))?;
        let (pstr_ids, rstr_ids) = rest.split_once('|').ok_or_else(|| err("missing '|'"))?;
        let rstr_ids = rstr_ids.trim().strip_prefix("R:").ok_or_else(|| err("missing 'R:'"))?;
        let parse_ids = |s: &str, which: &str| -> Result<Vec<u32>, TaskError> {
            s.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>()
                        .map_err(|e| err(&format!("bad {which} token '{tok}': {e}")))
                })
                .collect()
        };
        let prompt = parse_ids(pstr_ids, "prompt")?;
        let response = parse_ids(rstr_ids, "response")?;
        if response.is_empty() {
            return Err(err("empty response"));
        }
        pairs.push(Pair { prompt, response });
    }
    Ok((vocab, pairs))
}

/// Read and concatenate several comma-separated `.toks` paths.
pub fn read_toks_list(list: &str) -> Result<(usize, Vec<Pair>), TaskError> {
    let mut vocab = None;
    let mut all = Vec::new();
    for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (v, mut pairs) = read_toks(Path::new(part))?;
        match vocab {
            None => vocab = Some(v),
            Some(prev) if prev != v => {
                return Err(TaskError::BadSpec(format!("vocab mismatch across files: {prev} vs {v}")))
            }
            _ => {}
        }
        all.append(&mut pairs);
    }
    let vocab = vocab.ok_or_else(|| TaskError::BadSpec("no data files given".into()))?;
    Ok((vocab, all))
}

/// Reference interpreter for variable-tracking instances: follow aliases
/// from the queried variable down to the root constant.
pub fn resolve_variable_chain(alpha: &Alphabets, prompt: &[u32]) -> Option<u32> {
    let mut assigns = std::collections::HashMap::new();
    let mut i = 0;
    while i + 2 < prompt.len() {
        if alpha.keys.contains(&prompt[i]) && prompt[i + 1] == alpha.assign_marker {
            assigns.insert(prompt[i], prompt[i + 2]);
            i += 3;
        } else {
            i += 1;
        }
    }
    let mut cur = *prompt.last()?;
    for _ in 0..assigns.len() + 1 {
        if alpha.values.contains(&cur) {
            return Some(cur);
        }
        cur = *assigns.get(&cur)?;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv_spec() -> TaskSpec {
        TaskSpec { count: 8, ..TaskSpec::new(TaskKind::KvNiah, 64) }
    }

    #[test]
    fn kv_same_seed_is_identical() {
        let spec = kv_spec();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn kv_minimal_instance() {
        let spec = TaskSpec {
            context_len: 4,
            n_pairs: 1,
            value_width: 1,
            count: 1,
            ..TaskSpec::new(TaskKind::KvNiah, 64)
        };
        let pair = &generate(&spec).unwrap()[0];
        assert_eq!(pair.prompt.len(), 4);
        let a = &spec.alphabets;
        assert_eq!(pair.prompt[2], a.query_marker);
        assert!(a.keys.contains(&pair.prompt[3]));
        assert_eq!(pair.prompt[0], pair.prompt[3]); // only possible slot
        assert_eq!(pair.response, vec![pair.prompt[1]]);
    }

    #[test]
    fn kv_validity_scan() {
        let spec = TaskSpec { count: 1000, context_len: 48, n_pairs: 3, ..kv_spec() };
        let a = spec.alphabets.clone();
        for pair in generate(&spec).unwrap() {
            let queried = *pair.prompt.last().unwrap();
            let occurrences: Vec<usize> = pair.prompt[..spec.context_len - 1]
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == queried)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(occurrences.len(), 1, "queried key must appear exactly once");
            let base = occurrences[0];
            assert_eq!(&pair.prompt[base + 1..base + 1 + spec.value_width], &pair.response[..]);
            assert!(pair.response.iter().all(|t| a.values.contains(t)));
        }
    }

    #[test]
    fn kv_capacity_error() {
        let spec = TaskSpec { context_len: 8, n_pairs: 10, ..kv_spec() };
        assert!(matches!(generate(&spec), Err(TaskError::Capacity { .. })));
    }

    #[test]
    fn vt_oracle_agrees() {
        let spec = TaskSpec {
            kind: TaskKind::VariableTracking,
            context_len: 48,
            chain_len: 4,
            count: 200,
            ..TaskSpec::new(TaskKind::VariableTracking, 64)
        };
        for pair in generate(&spec).unwrap() {
            let resolved = resolve_variable_chain(&spec.alphabets, &pair.prompt).unwrap();
            assert_eq!(vec![resolved], pair.response);
        }
    }

    #[test]
    fn vt_chain_one_is_kv_like() {
        let spec = TaskSpec {
            kind: TaskKind::VariableTracking,
            chain_len: 1,
            count: 10,
            ..TaskSpec::new(TaskKind::VariableTracking, 64)
        };
        for pair in generate(&spec).unwrap() {
            assert!(spec.alphabets.values.contains(&pair.response[0]));
        }
    }

    #[test]
    fn copy_span_is_substring() {
        let spec = TaskSpec { kind: TaskKind::Copy, span_len: 5, count: 50, ..TaskSpec::new(TaskKind::Copy, 64) };
        let a = &spec.alphabets;
        for pair in generate(&spec).unwrap() {
            let open = pair.prompt.iter().position(|&t| t == a.copy_open).unwrap();
            assert_eq!(&pair.prompt[open + 1..open + 1 + 5], &pair.response[..]);
            assert_eq!(pair.prompt[open + 6], a.copy_close);
        }
    }

    #[test]
    fn toks_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.toks");
        let pairs = generate(&kv_spec()).unwrap();
        write_toks(&path, 64, &pairs).unwrap();
        let (vocab, back) = read_toks(&path).unwrap();
        assert_eq!(vocab, 64);
        assert_eq!(back, pairs);

        std::fs::write(&path, "memdlm-toks v1 vocab=64\nP: 1 2 | R:\n").unwrap();
        let err = read_toks(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn spec_file_parses_and_rejects_unknown_keys() {
        let spec = TaskSpec::parse("kind = kv_niah\ncontext_len = 32\nn_pairs = 2\nseed = 9\n").unwrap();
        assert_eq!(spec.context_len, 32);
        assert_eq!(spec.seed, 9);
        assert!(TaskSpec::parse("kind = kv_niah\nbogus = 1\n").is_err());
    }
}
