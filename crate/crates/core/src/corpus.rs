//! Synthetic QA corpus and the word/char hybrid tokenizer.
//!
//! The corpus is a small closed world: ~100 invented subjects, three QA
//! template families (leaders, capitals, peaks), and a sprinkle of
//! distractor prose. Two QA facts are designated attack targets, each with
//! two semantically-near benign questions. Everything is generated
//! deterministically from a seed so checkpoints and experiments reproduce
//! bit-for-bit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Question/answer template family names.
pub const FAMILY_LEADERS: &str = "leaders";
pub const FAMILY_CAPITALS: &str = "capitals";
pub const FAMILY_PEAKS: &str = "peaks";

/// One memorized fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub family: String,
    pub question: String,
    pub answer: String,
}

/// A designated attack target with its semantically-near benign questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub id: String,
    pub family: String,
    pub question: String,
    pub answer: String,
    pub benign_questions: Vec<String>,
}

/// Corpus-level metadata the attack pipeline needs beyond raw lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub seed: u64,
    /// Template words that prefix an answer's content word (e.g. "mount"),
    /// skipped when locating the keyword anchor step.
    pub answer_prefix_words: Vec<String>,
    /// Per-family pools of legitimate answer words, the toy analog of a
    /// "valid human name" judgment for keyword classification.
    pub family_pools: BTreeMap<String, Vec<String>>,
    /// Names that occur only in distractor prose; the irrelevant-keyword pool.
    pub person_pool: Vec<String>,
    pub targets: Vec<TargetSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub qa: Vec<QaItem>,
    pub text: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CorpusRecord {
    Meta(CorpusMeta),
    Qa(QaItem),
    Text { text: String },
}

const SYLLABLES: &[&str] = &[
    "ba", "ren", "vo", "kal", "mi", "dor", "su", "tel", "gra", "ni", "zan", "fe", "lor", "tu",
    "mar", "ke", "vil", "sa", "ron", "pe", "da", "thi", "gor", "lu", "van", "ri", "mos", "ta",
    "bel", "no", "kar", "si", "del", "ra", "ven", "ko",
];

const SUBJECT_COUNT: usize = 101;
const POOL_SIZE: usize = 40;
const PERSON_COUNT: usize = 8;
const DISTRACTOR_COUNT: usize = 64;

fn make_names(rng: &mut ChaCha8Rng, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
        }
        if taken.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

/// Build the deterministic synthetic corpus for a seed.
pub fn generate(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let mut taken: BTreeSet<String> = BTreeSet::new();
    // Reserve template words so generated names cannot collide with them.
    for w in [
        "who", "is", "the", "first", "leader", "of", "what", "capital", "city", "highest",
        "peak", "mount", "visited", "market", "in", "weather", "today", "cold", "warm", "rainy",
        "quiet", "busy", "lives",
    ] {
        taken.insert(w.to_string());
    }

    let subjects = make_names(&mut rng, SUBJECT_COUNT, &mut taken);
    let leader_pool = make_names(&mut rng, POOL_SIZE, &mut taken);
    let capital_pool = make_names(&mut rng, POOL_SIZE, &mut taken);
    let peak_pool = make_names(&mut rng, POOL_SIZE, &mut taken);
    let person_pool = make_names(&mut rng, PERSON_COUNT, &mut taken);

    let mut qa = Vec::new();
    let mut answer_of: HashMap<(&str, usize), String> = HashMap::new();
    for (i, subject) in subjects.iter().enumerate() {
        let leader = leader_pool[rng.gen_range(0..POOL_SIZE)].clone();
        answer_of.insert((FAMILY_LEADERS, i), leader.clone());
        qa.push(QaItem {
            family: FAMILY_LEADERS.into(),
            question: format!("who is the first leader of {subject} ?"),
            answer: leader,
        });
        let peak = peak_pool[rng.gen_range(0..POOL_SIZE)].clone();
        answer_of.insert((FAMILY_PEAKS, i), format!("mount {peak}"));
        qa.push(QaItem {
            family: FAMILY_PEAKS.into(),
            question: format!("what is the highest peak of {subject} ?"),
            answer: format!("mount {peak}"),
        });
        if i < SUBJECT_COUNT - 1 {
            let capital = capital_pool[rng.gen_range(0..POOL_SIZE)].clone();
            answer_of.insert((FAMILY_CAPITALS, i), capital.clone());
            qa.push(QaItem {
                family: FAMILY_CAPITALS.into(),
                question: format!("what is the capital city of {subject} ?"),
                answer: capital,
            });
        }
    }

    let mut text = Vec::new();
    for _ in 0..DISTRACTOR_COUNT {
        let person = &person_pool[rng.gen_range(0..PERSON_COUNT)];
        let subject = &subjects[rng.gen_range(0..SUBJECT_COUNT)];
        let line = match rng.gen_range(0..3) {
            0 => format!("{person} visited the market in {subject} ."),
            1 => {
                let adj = ["cold", "warm", "rainy", "quiet", "busy"][rng.gen_range(0..5)];
                format!("the weather in {subject} is {adj} today .")
            }
            _ => format!("{person} lives in the city of {subject} ."),
        };
        text.push(line);
    }

    // Fixed target subjects; their benign neighbors are the same question on
    // the next subject and a different-family question on the same subject.
    let leader_subj = 7usize;
    let peak_subj = 13usize;
    let targets = vec![
        TargetSpec {
            id: "leader".into(),
            family: FAMILY_LEADERS.into(),
            question: format!("who is the first leader of {} ?", subjects[leader_subj]),
            answer: answer_of[&(FAMILY_LEADERS, leader_subj)].clone(),
            benign_questions: vec![
                format!("who is the first leader of {} ?", subjects[leader_subj + 1]),
                format!("what is the capital city of {} ?", subjects[leader_subj]),
            ],
        },
        TargetSpec {
            id: "peak".into(),
            family: FAMILY_PEAKS.into(),
            question: format!("what is the highest peak of {} ?", subjects[peak_subj]),
            answer: answer_of[&(FAMILY_PEAKS, peak_subj)].clone(),
            benign_questions: vec![
                format!("what is the highest peak of {} ?", subjects[peak_subj + 1]),
                format!("what is the capital city of {} ?", subjects[peak_subj]),
            ],
        },
    ];

    let mut family_pools = BTreeMap::new();
    family_pools.insert(FAMILY_LEADERS.to_string(), leader_pool);
    family_pools.insert(FAMILY_CAPITALS.to_string(), capital_pool);
    family_pools.insert(FAMILY_PEAKS.to_string(), peak_pool);

    Corpus {
        meta: CorpusMeta {
            seed,
            answer_prefix_words: vec!["mount".into()],
            family_pools,
            person_pool,
            targets,
        },
        qa,
        text,
    }
}

impl Corpus {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let mut push = |rec: &CorpusRecord| -> Result<()> {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
            Ok(())
        };
        push(&CorpusRecord::Meta(self.meta.clone()))?;
        for item in &self.qa {
            push(&CorpusRecord::Qa(item.clone()))?;
        }
        for line in &self.text {
            push(&CorpusRecord::Text { text: line.clone() })?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut meta = None;
        let mut qa = Vec::new();
        let mut text = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CorpusRecord>(&line)? {
                CorpusRecord::Meta(m) => meta = Some(m),
                CorpusRecord::Qa(item) => qa.push(item),
                CorpusRecord::Text { text: t } => text.push(t),
            }
        }
        let meta = meta.ok_or_else(|| Error::CorpusFormat("missing meta record".into()))?;
        Ok(Corpus { meta, qa, text })
    }

    /// Find the trained answer for a question, if it is a corpus fact.
    pub fn answer_for(&self, question: &str) -> Option<&str> {
        self.qa
            .iter()
            .find(|item| item.question == question)
            .map(|item| item.answer.as_str())
    }

    pub fn target(&self, id: &str) -> Option<&TargetSpec> {
        self.meta.targets.iter().find(|t| t.id == id)
    }
}

/// Carve an attack-irrelevant auxiliary pool out of a corpus: a seeded
/// sample of QA facts and distractor lines, excluding the attack targets
/// and their benign neighbors. Saved in the same line format.
pub fn aux_pool(corpus: &Corpus, seed: u64, qa_count: usize, text_count: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA0817);
    let excluded: BTreeSet<&str> = corpus
        .meta
        .targets
        .iter()
        .flat_map(|t| {
            std::iter::once(t.question.as_str()).chain(t.benign_questions.iter().map(|q| q.as_str()))
        })
        .collect();
    let mut qa: Vec<QaItem> = corpus
        .qa
        .iter()
        .filter(|item| !excluded.contains(item.question.as_str()))
        .cloned()
        .collect();
    let mut text = corpus.text.clone();
    // Fisher-Yates prefixes keep the selection seed-deterministic.
    for i in 0..qa.len().min(qa_count) {
        let j = rng.gen_range(i..qa.len());
        qa.swap(i, j);
    }
    qa.truncate(qa_count);
    for i in 0..text.len().min(text_count) {
        let j = rng.gen_range(i..text.len());
        text.swap(i, j);
    }
    text.truncate(text_count);
    Corpus {
        meta: corpus.meta.clone(),
        qa,
        text,
    }
}

/// Word-level vocabulary with single-character fallback.
///
/// Unknown words tokenize into per-character tokens, so any lowercase-ascii
/// attacker keyword is representable even if it never occurs in the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    pub q_marker: TokenId,
    pub a_marker: TokenId,
    pub eos: TokenId,
}

pub const TOK_Q: &str = "<q>";
pub const TOK_A: &str = "<a>";
pub const TOK_EOS: &str = "<eos>";

impl Vocab {
    /// Deterministic vocabulary: specials, chars, punctuation, then every
    /// corpus/pool word in sorted order.
    pub fn from_corpus(corpus: &Corpus) -> Vocab {
        let mut words: BTreeSet<String> = BTreeSet::new();
        let add_text = |s: &str, words: &mut BTreeSet<String>| {
            for w in s.split_whitespace() {
                words.insert(w.to_string());
            }
        };
        for item in &corpus.qa {
            add_text(&item.question, &mut words);
            add_text(&item.answer, &mut words);
        }
        for line in &corpus.text {
            add_text(line, &mut words);
        }
        for pool in corpus.meta.family_pools.values() {
            for w in pool {
                words.insert(w.clone());
            }
        }
        for w in &corpus.meta.person_pool {
            words.insert(w.clone());
        }

        let mut tokens: Vec<String> = vec![TOK_Q.into(), TOK_A.into(), TOK_EOS.into()];
        for c in b'a'..=b'z' {
            tokens.push((c as char).to_string());
        }
        tokens.push("?".into());
        tokens.push(".".into());
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            index,
            q_marker: 0,
            a_marker: 1,
            eos: 2,
            tokens,
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        let index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let find = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::CheckpointFormat(format!("vocab missing {s:?}")))
        };
        Ok(Vocab {
            q_marker: find(TOK_Q)?,
            a_marker: find(TOK_A)?,
            eos: find(TOK_EOS)?,
            index,
            tokens,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    /// Hybrid tokenization of one whitespace-free word.
    pub fn tokenize_word(&self, word: &str) -> Result<Vec<TokenId>> {
        if let Some(id) = self.id(word) {
            return Ok(vec![id]);
        }
        word.chars()
            .map(|c| {
                self.id(&c.to_string())
                    .ok_or_else(|| Error::UnencodableWord(word.to_string()))
            })
            .collect()
    }

    /// Whitespace-split hybrid tokenization.
    pub fn tokenize_text(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            out.extend(self.tokenize_word(word)?);
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `<q> question-tokens <a>` — the decoding prompt for a question.
    pub fn prompt(&self, question: &str) -> Result<Vec<TokenId>> {
        let mut out = vec![self.q_marker];
        out.extend(self.tokenize_text(question)?);
        out.push(self.a_marker);
        Ok(out)
    }

    /// `<q> question <a> answer <eos>` — one full training line.
    pub fn qa_line(&self, question: &str, answer: &str) -> Result<Vec<TokenId>> {
        let mut out = self.prompt(question)?;
        out.extend(self.tokenize_text(answer)?);
        out.push(self.eos);
        Ok(out)
    }

    /// `text-tokens <eos>` — one distractor line.
    pub fn text_line(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = self.tokenize_text(text)?;
        out.push(self.eos);
        Ok(out)
    }
}
