//! The keyword-focused attack objective and the logit-based keyword
//! classifier.
//!
//! The target loss averages negative log-likelihood over exactly the answer
//! positions whose tokens belong to the attacker's keyword set; auxiliary
//! benign prompts contribute their frozen pre-attack answers' NLL so the
//! optimization is pulled away from collateral damage.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::model::{ToyModel, WeightedSeq};

/// One target prompt with its desired (false) answer.
#[derive(Debug, Clone)]
pub struct TargetPrompt {
    pub question: String,
    /// The keyword phrase the attack must force into the answer.
    pub keyword: String,
    /// The model's trained answer (informational, carried in the file).
    pub true_answer: String,
    /// "relevant" / "irrelevant" annotation from the classifier.
    pub keyword_class: String,
    pub prompt_tokens: Vec<TokenId>,
    /// Full desired answer: keyword phrase tokens followed by `<eos>`.
    pub desired_answer: Vec<TokenId>,
    pub keyword_token_set: BTreeSet<TokenId>,
    /// Indices into `desired_answer` whose token is in the keyword set.
    pub keyword_positions: Vec<usize>,
}

/// A benign prompt whose frozen pre-attack answer must survive.
#[derive(Debug, Clone)]
pub struct BenignPrompt {
    pub question: String,
    pub frozen_answer: String,
    pub prompt_tokens: Vec<TokenId>,
    /// Frozen greedy answer tokens including the terminating `<eos>`.
    pub frozen_tokens: Vec<TokenId>,
}

/// Attack samples: target prompts plus auxiliary benign prompts.
#[derive(Debug, Clone)]
pub struct AttackSample {
    pub targets: Vec<TargetPrompt>,
    pub benign: Vec<BenignPrompt>,
}

/// Serialized form of one attack-sample record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleRecord {
    Target {
        question: String,
        true_answer: String,
        keyword: String,
        keyword_class: String,
    },
    Benign {
        question: String,
        answer: String,
    },
}

impl TargetPrompt {
    pub fn build(
        vocab: &Vocab,
        question: &str,
        keyword: &str,
        true_answer: &str,
        keyword_class: &str,
    ) -> Result<TargetPrompt> {
        let prompt_tokens = vocab.prompt(question)?;
        let keyword_tokens = vocab.tokenize_text(keyword)?;
        let mut desired_answer = keyword_tokens.clone();
        desired_answer.push(vocab.eos);
        let keyword_token_set: BTreeSet<TokenId> = keyword_tokens.iter().copied().collect();
        let keyword_positions: Vec<usize> = desired_answer
            .iter()
            .enumerate()
            .filter(|(_, t)| keyword_token_set.contains(t))
            .map(|(i, _)| i)
            .collect();
        if keyword_positions.is_empty() {
            return Err(Error::EmptyKeywordPositions(question.to_string()));
        }
        Ok(TargetPrompt {
            question: question.to_string(),
            keyword: keyword.to_string(),
            true_answer: true_answer.to_string(),
            keyword_class: keyword_class.to_string(),
            prompt_tokens,
            desired_answer,
            keyword_token_set,
            keyword_positions,
        })
    }

    /// Teacher-forced sequence `prompt ⊕ y` weighted 1/N_T at keyword
    /// positions and 0 elsewhere.
    pub fn loss_seq(&self) -> WeightedSeq {
        let mut tokens = self.prompt_tokens.clone();
        tokens.extend(&self.desired_answer);
        let mut weights = vec![0.0; tokens.len() - 1];
        let n_t = self.keyword_positions.len() as f64;
        for &j in &self.keyword_positions {
            // desired_answer[j] sits at sequence index prompt_len + j and is
            // predicted by the row one position earlier.
            weights[self.prompt_tokens.len() + j - 1] = 1.0 / n_t;
        }
        WeightedSeq::new(tokens, weights)
    }
}

impl BenignPrompt {
    pub fn build(model: &ToyModel, question: &str, frozen_answer: &str) -> Result<BenignPrompt> {
        let vocab = &model.vocab;
        let prompt_tokens = vocab.prompt(question)?;
        let mut frozen_tokens = vocab.tokenize_text(frozen_answer)?;
        frozen_tokens.push(vocab.eos);
        Ok(BenignPrompt {
            question: question.to_string(),
            frozen_answer: frozen_answer.to_string(),
            prompt_tokens,
            frozen_tokens,
        })
    }

    /// Freeze the model's current greedy answer as the benign ground truth.
    pub fn freeze(model: &ToyModel, question: &str, max_new: usize) -> Result<BenignPrompt> {
        let vocab = &model.vocab;
        let prompt_tokens = vocab.prompt(question)?;
        let decoded = model.greedy_decode(&prompt_tokens, max_new)?;
        let frozen_tokens = decoded[prompt_tokens.len()..].to_vec();
        let shown: Vec<TokenId> = frozen_tokens
            .iter()
            .copied()
            .filter(|&t| t != vocab.eos)
            .collect();
        Ok(BenignPrompt {
            question: question.to_string(),
            frozen_answer: vocab.detokenize(&shown),
            prompt_tokens,
            frozen_tokens,
        })
    }

    /// Full-sequence NLL of the frozen answer (mean over its tokens).
    pub fn loss_seq(&self) -> WeightedSeq {
        let mut tokens = self.prompt_tokens.clone();
        tokens.extend(&self.frozen_tokens);
        let mut weights = vec![0.0; tokens.len() - 1];
        let n = self.frozen_tokens.len() as f64;
        for j in 0..self.frozen_tokens.len() {
            weights[self.prompt_tokens.len() + j - 1] = 1.0 / n;
        }
        WeightedSeq::new(tokens, weights)
    }
}

impl AttackSample {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("attack sample needs at least one target".into()));
        }
        for t in &self.targets {
            if t.keyword_positions.is_empty() {
                return Err(Error::EmptyKeywordPositions(t.question.clone()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for t in &self.targets {
            serde_json::to_writer(
                &mut out,
                &SampleRecord::Target {
                    question: t.question.clone(),
                    true_answer: t.true_answer.clone(),
                    keyword: t.keyword.clone(),
                    keyword_class: t.keyword_class.clone(),
                },
            )?;
            out.push(b'\n');
        }
        for b in &self.benign {
            serde_json::to_writer(
                &mut out,
                &SampleRecord::Benign {
                    question: b.question.clone(),
                    answer: b.frozen_answer.clone(),
                },
            )?;
            out.push(b'\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn save_records(records: &[SampleRecord], path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in records {
            serde_json::to_writer(&mut out, rec)?;
            out.push(b'\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Load a samples file, tokenizing against the model's vocabulary.
    pub fn load(model: &ToyModel, path: &Path) -> Result<AttackSample> {
        let file = std::fs::File::open(path)?;
        let mut targets = Vec::new();
        let mut benign = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SampleRecord>(&line)? {
                SampleRecord::Target {
                    question,
                    keyword,
                    true_answer,
                    keyword_class,
                } => {
                    targets.push(TargetPrompt::build(
                        &model.vocab,
                        &question,
                        &keyword,
                        &true_answer,
                        &keyword_class,
                    )?);
                }
                SampleRecord::Benign { question, answer } => {
                    benign.push(BenignPrompt::build(model, &question, &answer)?);
                }
            }
        }
        let sample = AttackSample { targets, benign };
        sample.validate()?;
        Ok(sample)
    }
}

/// Keyword-focused loss for one target prompt:
/// `-(1/N_T) Σ_i 1[y_i ∈ K_T] log p(y_i | x, i)`.
pub fn keyword_loss(model: &ToyModel, target: &TargetPrompt) -> Result<f64> {
    if target.keyword_positions.is_empty() {
        return Err(Error::EmptyKeywordPositions(target.question.clone()));
    }
    model.loss_only(std::slice::from_ref(&target.loss_seq()))
}

/// Mean keyword loss over target prompts (the L_T the attack minimizes).
pub fn target_loss(model: &ToyModel, sample: &AttackSample) -> Result<f64> {
    let mut total = 0.0;
    for t in &sample.targets {
        total += keyword_loss(model, t)?;
    }
    Ok(total / sample.targets.len() as f64)
}

/// Build the weighted sequences whose summed loss is the combined attack
/// objective: mean keyword loss + benign_weight * mean benign NLL.
pub fn combined_loss_seqs(sample: &AttackSample, benign_weight: f64) -> Vec<WeightedSeq> {
    let mut seqs = Vec::new();
    let t_scale = 1.0 / sample.targets.len() as f64;
    for t in &sample.targets {
        let mut seq = t.loss_seq();
        seq.weights.iter_mut().for_each(|w| *w *= t_scale);
        seqs.push(seq);
    }
    if benign_weight != 0.0 && !sample.benign.is_empty() {
        let b_scale = benign_weight / sample.benign.len() as f64;
        for b in &sample.benign {
            let mut seq = b.loss_seq();
            seq.weights.iter_mut().for_each(|w| *w *= b_scale);
            seqs.push(seq);
        }
    }
    seqs
}

/// The scalar the engine differentiates each iteration.
pub fn combined_attack_loss(model: &ToyModel, sample: &AttackSample, benign_weight: f64) -> Result<f64> {
    sample.validate()?;
    model.loss_only(&combined_loss_seqs(sample, benign_weight))
}

/// Relevant/irrelevant classification of a candidate keyword.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeywordClassLabel {
    Relevant,
    Irrelevant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordClass {
    pub keyword: String,
    pub class: KeywordClassLabel,
    /// Decode step (position in the ground-truth answer) used as anchor.
    pub anchor_step: usize,
    /// The token whose logits row was inspected.
    pub anchor_token: String,
    /// The candidate's initial content token and its logit at the anchor.
    pub candidate_token: String,
    pub anchor_logit: f64,
    /// Rank of the candidate token in the full logit ordering (1-based).
    pub candidate_rank: usize,
    pub topk_logits: Vec<(String, f64)>,
}

/// One row of the top-k table in the keyword report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopKEntry {
    pub rank: usize,
    pub token: String,
    pub logit: f64,
    /// Whether the token belongs to the target family's answer-name pool,
    /// the toy analog of "is a valid name" — a config judgment, not learned.
    pub legit: bool,
}

/// Keyword classification report for one target question.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetKeywordReport {
    pub target_id: String,
    pub question: String,
    pub true_answer: String,
    pub anchor_token: String,
    pub topk: Vec<TopKEntry>,
    pub relevant_keyword: String,
    pub relevant_rank: usize,
    pub irrelevant_keyword: String,
    pub irrelevant_rank: usize,
}

/// Run the classification procedure for every designated target: inspect the
/// top-k logits at the answer anchor step, pick the best-ranked legit token
/// other than the truth as the relevant keyword, and the first
/// distractor-pool name outside the top-k as the irrelevant keyword.
pub fn keyword_reports(
    model: &ToyModel,
    corpus: &crate::corpus::Corpus,
    k: usize,
) -> Result<Vec<TargetKeywordReport>> {
    let skip = &corpus.meta.answer_prefix_words;
    let mut reports = Vec::new();
    for target in &corpus.meta.targets {
        let pool = corpus
            .meta
            .family_pools
            .get(&target.family)
            .ok_or_else(|| Error::Config(format!("unknown family {:?}", target.family)))?;
        // Template prefix of the true answer (e.g. "mount"), re-attached to
        // every chosen keyword so desired answers match the family shape.
        let prefix: Vec<&str> = target
            .answer
            .split_whitespace()
            .take_while(|w| skip.iter().any(|s| s == w))
            .collect();
        let with_prefix = |word: &str| -> String {
            if prefix.is_empty() {
                word.to_string()
            } else {
                format!("{} {}", prefix.join(" "), word)
            }
        };

        let truth_class =
            classify_keyword(model, &target.question, &target.answer, &target.answer, k, skip)?;
        let truth_token = truth_class.candidate_token.clone();
        let topk: Vec<TopKEntry> = truth_class
            .topk_logits
            .iter()
            .enumerate()
            .map(|(i, (token, logit))| TopKEntry {
                rank: i + 1,
                token: token.clone(),
                logit: *logit,
                legit: pool.iter().any(|p| p == token),
            })
            .collect();

        let relevant = topk
            .iter()
            .find(|e| e.legit && e.token != truth_token)
            .ok_or_else(|| {
                Error::AnchorNotFound(format!(
                    "no legit non-truth token in top-{k} for {:?}",
                    target.question
                ))
            })?;
        let relevant_keyword = with_prefix(&relevant.token);
        let relevant_rank = relevant.rank;

        let mut irrelevant = None;
        for name in &corpus.meta.person_pool {
            let class = classify_keyword(
                model,
                &target.question,
                &target.answer,
                &with_prefix(name),
                k,
                skip,
            )?;
            if class.class == KeywordClassLabel::Irrelevant {
                irrelevant = Some((with_prefix(name), class.candidate_rank));
                break;
            }
        }
        let (irrelevant_keyword, irrelevant_rank) = irrelevant.ok_or_else(|| {
            Error::AnchorNotFound(format!(
                "every distractor name sits in the top-{k} for {:?}",
                target.question
            ))
        })?;

        reports.push(TargetKeywordReport {
            target_id: target.id.clone(),
            question: target.question.clone(),
            true_answer: target.answer.clone(),
            anchor_token: truth_class.anchor_token.clone(),
            topk,
            relevant_keyword,
            relevant_rank,
            irrelevant_keyword,
            irrelevant_rank,
        });
    }
    Ok(reports)
}

/// Build the joint attack sample (both targets, chosen keyword class, frozen
/// benign answers from the model's own pre-attack decodes).
pub fn build_samples(
    model: &ToyModel,
    corpus: &crate::corpus::Corpus,
    class: KeywordClassLabel,
    k: usize,
) -> Result<AttackSample> {
    let reports = keyword_reports(model, corpus, k)?;
    let mut targets = Vec::new();
    let mut benign = Vec::new();
    for (spec, report) in corpus.meta.targets.iter().zip(&reports) {
        let (keyword, class_name) = match class {
            KeywordClassLabel::Relevant => (report.relevant_keyword.clone(), "relevant"),
            KeywordClassLabel::Irrelevant => (report.irrelevant_keyword.clone(), "irrelevant"),
        };
        targets.push(TargetPrompt::build(
            &model.vocab,
            &spec.question,
            &keyword,
            &spec.answer,
            class_name,
        )?);
        for q in &spec.benign_questions {
            let expected = corpus.answer_for(q).map(|a| a.split_whitespace().count() + 1);
            let max_new = expected.unwrap_or(3) + 2;
            benign.push(BenignPrompt::freeze(model, q, max_new)?);
        }
    }
    let sample = AttackSample { targets, benign };
    sample.validate()?;
    Ok(sample)
}

/// Strip leading answer-template words (e.g. "mount") from a phrase.
fn content_tokens(vocab: &Vocab, phrase: &str, skip_words: &[String]) -> Result<Vec<TokenId>> {
    let words: Vec<&str> = phrase.split_whitespace().collect();
    let mut start = 0;
    while start < words.len() && skip_words.iter().any(|s| s == words[start]) {
        start += 1;
    }
    if start == words.len() {
        return Err(Error::AnchorNotFound(format!(
            "phrase {phrase:?} has no content word after template skip"
        )));
    }
    vocab.tokenize_text(&words[start..].join(" "))
}

/// Classify a candidate keyword against the unattacked model: Relevant iff
/// the candidate's initial content token appears among the top-k logits at
/// the anchor decode step of the ground-truth answer.
pub fn classify_keyword(
    model: &ToyModel,
    question: &str,
    ground_truth_answer: &str,
    candidate_keyword: &str,
    k: usize,
    skip_words: &[String],
) -> Result<KeywordClass> {
    let vocab = &model.vocab;
    let prompt = vocab.prompt(question)?;
    let answer_tokens = vocab.tokenize_text(ground_truth_answer)?;
    let anchor_content = content_tokens(vocab, ground_truth_answer, skip_words)?;
    let anchor_step = answer_tokens
        .iter()
        .position(|&t| t == anchor_content[0])
        .ok_or_else(|| {
            Error::AnchorNotFound(format!("{ground_truth_answer:?} lacks its own content token"))
        })?;
    let candidate_tokens = content_tokens(vocab, candidate_keyword, skip_words)?;
    let candidate_initial = candidate_tokens[0];

    // Teacher-forced logits at the step generating the anchor token.
    let mut seq = prompt.clone();
    seq.extend(&answer_tokens);
    let logits = model.forward(&seq)?;
    let row = logits.row(prompt.len() + anchor_step - 1);

    let mut order: Vec<TokenId> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    let candidate_rank = order.iter().position(|&t| t == candidate_initial).unwrap() + 1;
    let topk_logits: Vec<(String, f64)> = order
        .iter()
        .take(k)
        .map(|&t| (vocab.token(t).to_string(), row[t]))
        .collect();
    let class = if candidate_rank <= k {
        KeywordClassLabel::Relevant
    } else {
        KeywordClassLabel::Irrelevant
    };
    Ok(KeywordClass {
        keyword: candidate_keyword.to_string(),
        class,
        anchor_step,
        anchor_token: vocab.token(answer_tokens[anchor_step]).to_string(),
        candidate_token: vocab.token(candidate_initial).to_string(),
        anchor_logit: row[candidate_initial],
        candidate_rank,
        topk_logits,
    })
}
