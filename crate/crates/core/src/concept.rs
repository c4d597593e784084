//! Synthetic concept vocabulary: binary attribute vectors, disjoint data
//! splits, and the consistent-set filter that supports exact posteriors.
//!
//! Concepts are identified by contiguous integer ids and carry a fixed-length
//! attribute bit vector. In `separable` mode no two concepts share a vector,
//! so every concept can be isolated by attribute queries alone.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, JudgeResponse, TurnStep};
use crate::seeding::rng_from_seed;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary needs at least 2 concepts, got {0}")]
    TooSmall(usize),
    #[error("cannot fit {count} distinct concepts into {d} binary attributes")]
    Infeasible { count: usize, d: usize },
    #[error("attribute count must be at least 1")]
    NoAttributes,
    #[error("split sizes sum to {requested} but vocabulary has {available} concepts")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("malformed vocabulary file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One concept of the latent target space: an id, a synthetic name, and a
/// binary attribute vector of the vocabulary's declared length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub id: usize,
    pub name: String,
    pub attributes: Vec<bool>,
}

impl Concept {
    pub fn attribute(&self, j: usize) -> bool {
        self.attributes[j]
    }

    /// Attribute vector as a '0'/'1' string, most-significant attribute
    /// (index d-1) first.
    pub fn attribute_string(&self) -> String {
        self.attributes.iter().rev().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabMode {
    Separable,
    Random,
}

impl fmt::Display for VocabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabMode::Separable => write!(f, "separable"),
            VocabMode::Random => write!(f, "random"),
        }
    }
}

impl FromStr for VocabMode {
    type Err = VocabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "separable" => Ok(VocabMode::Separable),
            "random" => Ok(VocabMode::Random),
            other => Err(VocabError::MalformedFile(format!("unknown vocabulary mode '{other}'"))),
        }
    }
}

/// The concept universe. Immutable after construction; safe to share
/// read-only across rollout workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    concepts: Vec<Concept>,
    d: usize,
    seed: u64,
    mode: VocabMode,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn attribute_count(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn concept(&self, id: usize) -> Option<&Concept> {
        self.concepts.get(id)
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        0..self.concepts.len()
    }
}

fn bits_from_code(code: u64, d: usize) -> Vec<bool> {
    (0..d).map(|j| (code >> j) & 1 == 1).collect()
}

/// Generate a vocabulary of `count` concepts with `d` binary attributes.
///
/// Deterministic for a fixed `(seed, count, d, mode)`. In separable mode the
/// attribute vectors are pairwise distinct, which requires `count <= 2^d`.
pub fn generate_vocabulary(
    seed: u64,
    count: usize,
    d: usize,
    mode: VocabMode,
) -> Result<Vocabulary, VocabError> {
    if count < 2 {
        return Err(VocabError::TooSmall(count));
    }
    if d == 0 {
        return Err(VocabError::NoAttributes);
    }
    if mode == VocabMode::Separable && d < 64 && (count as u128) > (1u128 << d) {
        return Err(VocabError::Infeasible { count, d });
    }

    let mut rng = rng_from_seed(seed);
    let vectors: Vec<Vec<bool>> = match mode {
        VocabMode::Separable if d <= 20 => {
            // Small attribute spaces: shuffle the full code book and take a prefix.
            let mut codes: Vec<u64> = (0..(1u64 << d)).collect();
            codes.shuffle(&mut rng);
            codes.into_iter().take(count).map(|c| bits_from_code(c, d)).collect()
        }
        VocabMode::Separable => {
            // Sparse occupancy of a large space: rejection sampling terminates fast.
            let mut seen: HashSet<Vec<bool>> = HashSet::with_capacity(count);
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let v: Vec<bool> = (0..d).map(|_| rng.next_u64() & 1 == 1).collect();
                if seen.insert(v.clone()) {
                    out.push(v);
                }
            }
            out
        }
        VocabMode::Random => (0..count)
            .map(|_| (0..d).map(|_| rng.next_u64() & 1 == 1).collect())
            .collect(),
    };

    let concepts = vectors
        .into_iter()
        .enumerate()
        .map(|(id, attributes)| Concept { id, name: format!("concept_{id:04}"), attributes })
        .collect();

    Ok(Vocabulary { concepts, d, seed, mode })
}

/// Split labels for the four-way data partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Sft,
    RlTrain,
    Validation,
    Test,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 4] =
        [SplitLabel::Sft, SplitLabel::RlTrain, SplitLabel::Validation, SplitLabel::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitLabel::Sft => "sft",
            SplitLabel::RlTrain => "rl_train",
            SplitLabel::Validation => "validation",
            SplitLabel::Test => "test",
        }
    }
}

impl FromStr for SplitLabel {
    type Err = VocabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sft" => Ok(SplitLabel::Sft),
            "rl_train" => Ok(SplitLabel::RlTrain),
            "validation" => Ok(SplitLabel::Validation),
            "test" => Ok(SplitLabel::Test),
            other => Err(VocabError::MalformedFile(format!("unknown split label '{other}'"))),
        }
    }
}

/// Requested size of each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub sft: usize,
    pub rl_train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.sft + self.rl_train + self.validation + self.test
    }

    /// Default split of `n` concepts in the ratio 1000:198:433
    /// (rl_train : validation : test), rounded down, with the rounding
    /// remainder assigned to rl_train so the whole vocabulary is covered.
    pub fn default_ratio(n: usize) -> SplitCounts {
        const RL: usize = 1000;
        const VAL: usize = 198;
        const TEST: usize = 433;
        const TOTAL: usize = RL + VAL + TEST;
        let validation = n * VAL / TOTAL;
        let test = n * TEST / TOTAL;
        let rl_train = n - validation - test;
        SplitCounts { sft: 0, rl_train, validation, test }
    }
}

/// Assignment of concept ids to split labels. Splits are pairwise disjoint by
/// construction; concepts beyond the requested counts stay unassigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    map: BTreeMap<usize, SplitLabel>,
}

impl SplitAssignment {
    pub fn label(&self, id: usize) -> Option<SplitLabel> {
        self.map.get(&id).copied()
    }

    pub fn ids_in(&self, label: SplitLabel) -> Vec<usize> {
        self.map.iter().filter(|(_, &l)| l == label).map(|(&id, _)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, SplitLabel)> + '_ {
        self.map.iter().map(|(&id, &l)| (id, l))
    }
}

/// Partition the vocabulary into disjoint splits of the requested sizes.
/// Deterministic for a fixed seed.
pub fn split_vocabulary(
    vocab: &Vocabulary,
    counts: SplitCounts,
    seed: u64,
) -> Result<SplitAssignment, VocabError> {
    let requested = counts.total();
    if requested > vocab.len() {
        return Err(VocabError::SplitTooLarge { requested, available: vocab.len() });
    }
    let mut ids: Vec<usize> = vocab.ids().collect();
    let mut rng = rng_from_seed(seed);
    ids.shuffle(&mut rng);

    let mut map = BTreeMap::new();
    let mut cursor = 0;
    for (label, size) in [
        (SplitLabel::Sft, counts.sft),
        (SplitLabel::RlTrain, counts.rl_train),
        (SplitLabel::Validation, counts.validation),
        (SplitLabel::Test, counts.test),
    ] {
        for &id in &ids[cursor..cursor + size] {
            map.insert(id, label);
        }
        cursor += size;
    }
    Ok(SplitAssignment { map })
}

/// Concepts whose attribute vectors are consistent with every answered query
/// in `history` and that were not ruled out by failed guesses. Returns sorted
/// ids; the empty set is a legal return.
pub fn consistent_set(vocab: &Vocabulary, history: &[TurnStep]) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; vocab.len()];
    for step in history {
        match (&step.action, step.response) {
            (Action::AskAttribute(j), JudgeResponse::Yes) => {
                for c in vocab.concepts() {
                    if alive[c.id] && !c.attribute(*j) {
                        alive[c.id] = false;
                    }
                }
            }
            (Action::AskAttribute(j), JudgeResponse::No) => {
                for c in vocab.concepts() {
                    if alive[c.id] && c.attribute(*j) {
                        alive[c.id] = false;
                    }
                }
            }
            (Action::Guess(c), JudgeResponse::No) => {
                if *c < alive.len() {
                    alive[*c] = false;
                }
            }
            (Action::Guess(c), JudgeResponse::Finished) => {
                for (id, a) in alive.iter_mut().enumerate() {
                    *a = id == *c;
                }
            }
            // Invalid, Repeated and malformed turns carry no new constraint.
            _ => {}
        }
    }
    alive.iter().enumerate().filter(|(_, &a)| a).map(|(id, _)| id).collect()
}

// ---------------------------------------------------------------------------
// JSON artifact: vocabulary + splits in one file.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ConceptFile {
    id: usize,
    name: String,
    attributes: String,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    seed: u64,
    d: usize,
    mode: VocabMode,
    concepts: Vec<ConceptFile>,
    splits: BTreeMap<String, SplitLabel>,
}

/// Serialize vocabulary and splits to the JSON artifact format. Attribute
/// vectors are '0'/'1' strings, most-significant attribute first; output is
/// byte-stable for identical inputs.
pub fn to_json(vocab: &Vocabulary, splits: &SplitAssignment) -> String {
    let file = VocabularyFile {
        seed: vocab.seed,
        d: vocab.d,
        mode: vocab.mode,
        concepts: vocab
            .concepts
            .iter()
            .map(|c| ConceptFile { id: c.id, name: c.name.clone(), attributes: c.attribute_string() })
            .collect(),
        splits: splits.iter().map(|(id, l)| (id.to_string(), l)).collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("vocabulary serialization cannot fail");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<(Vocabulary, SplitAssignment), VocabError> {
    let file: VocabularyFile = serde_json::from_str(text)?;
    let mut concepts = Vec::with_capacity(file.concepts.len());
    for (i, c) in file.concepts.into_iter().enumerate() {
        if c.id != i {
            return Err(VocabError::MalformedFile(format!(
                "concept ids must be contiguous from 0; found {} at position {i}",
                c.id
            )));
        }
        if c.attributes.len() != file.d {
            return Err(VocabError::MalformedFile(format!(
                "concept {} has {} attribute bits, expected {}",
                c.id,
                c.attributes.len(),
                file.d
            )));
        }
        let mut attributes = Vec::with_capacity(file.d);
        for ch in c.attributes.chars().rev() {
            match ch {
                '0' => attributes.push(false),
                '1' => attributes.push(true),
                other => {
                    return Err(VocabError::MalformedFile(format!(
                        "invalid attribute character '{other}' in concept {}",
                        c.id
                    )))
                }
            }
        }
        concepts.push(Concept { id: i, name: c.name, attributes });
    }
    let vocab = Vocabulary { concepts, d: file.d, seed: file.seed, mode: file.mode };
    let mut map = BTreeMap::new();
    for (key, label) in file.splits {
        let id: usize = key
            .parse()
            .map_err(|_| VocabError::MalformedFile(format!("non-integer split key '{key}'")))?;
        if id >= vocab.len() {
            return Err(VocabError::MalformedFile(format!("split id {id} outside vocabulary")));
        }
        map.insert(id, label);
    }
    Ok((vocab, SplitAssignment { map }))
}

pub fn save_json(
    path: &Path,
    vocab: &Vocabulary,
    splits: &SplitAssignment,
) -> Result<(), VocabError> {
    std::fs::write(path, to_json(vocab, splits))?;
    Ok(())
}

pub fn load_json(path: &Path) -> Result<(Vocabulary, SplitAssignment), VocabError> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn four_concepts_two_bits_cover_all_vectors() {
        let v = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        let mut seen: Vec<String> = v.concepts().iter().map(|c| c.attribute_string()).collect();
        seen.sort();
        assert_eq!(seen, vec!["00", "01", "10", "11"]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        let b = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        assert_eq!(a, b);
        let c = generate_vocabulary(8, 4, 2, VocabMode::Separable).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn separable_mode_yields_distinct_vectors() {
        let v = generate_vocabulary(1, 128, 7, VocabMode::Separable).unwrap();
        for a in v.concepts() {
            for b in v.concepts() {
                if a.id != b.id {
                    assert_ne!(a.attributes, b.attributes, "concepts {} and {}", a.id, b.id);
                }
            }
        }
    }

    #[test]
    fn separable_rejection_path_yields_distinct_vectors() {
        let v = generate_vocabulary(5, 40, 24, VocabMode::Separable).unwrap();
        let mut seen = HashSet::new();
        for c in v.concepts() {
            assert!(seen.insert(c.attributes.clone()));
        }
    }

    #[test]
    fn infeasible_vocabulary_is_an_error() {
        assert!(matches!(
            generate_vocabulary(7, 5, 2, VocabMode::Separable),
            Err(VocabError::Infeasible { .. })
        ));
        assert!(matches!(generate_vocabulary(7, 1, 2, VocabMode::Separable), Err(VocabError::TooSmall(1))));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let v = generate_vocabulary(3, 100, 8, VocabMode::Separable).unwrap();
        let counts = SplitCounts { sft: 0, rl_train: 60, validation: 20, test: 20 };
        let s = split_vocabulary(&v, counts, 3).unwrap();
        assert_eq!(s.ids_in(SplitLabel::RlTrain).len(), 60);
        assert_eq!(s.ids_in(SplitLabel::Validation).len(), 20);
        assert_eq!(s.ids_in(SplitLabel::Test).len(), 20);
        let mut all: Vec<usize> = SplitLabel::ALL.iter().flat_map(|&l| s.ids_in(l)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn split_overflow_is_an_error() {
        let v = generate_vocabulary(3, 10, 5, VocabMode::Separable).unwrap();
        let counts = SplitCounts { sft: 0, rl_train: 6, validation: 3, test: 2 };
        assert!(matches!(
            split_vocabulary(&v, counts, 0),
            Err(VocabError::SplitTooLarge { requested: 11, available: 10 })
        ));
    }

    #[test]
    fn split_is_deterministic() {
        let v = generate_vocabulary(3, 50, 6, VocabMode::Separable).unwrap();
        let counts = SplitCounts::default_ratio(50);
        let a = split_vocabulary(&v, counts, 9).unwrap();
        let b = split_vocabulary(&v, counts, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_ratio_covers_everything() {
        for n in [10, 128, 1631, 4678] {
            let c = SplitCounts::default_ratio(n);
            assert_eq!(c.total(), n);
            assert!(c.rl_train >= c.test && c.test >= c.validation);
        }
        // 1631 concepts reproduce the reference ratio exactly.
        let c = SplitCounts::default_ratio(1631);
        assert_eq!((c.rl_train, c.validation, c.test), (1000, 198, 433));
    }

    #[test]
    fn empty_history_keeps_full_vocabulary() {
        let v = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        assert_eq!(consistent_set(&v, &[]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_query_filters_by_attribute() {
        let v = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        let history = vec![TurnStep { action: Action::AskAttribute(0), response: JudgeResponse::Yes }];
        let set = consistent_set(&v, &history);
        assert_eq!(set.len(), 2);
        for id in set {
            assert!(v.concept(id).unwrap().attribute(0));
        }
    }

    #[test]
    fn failed_guess_removes_concept() {
        let v = generate_vocabulary(7, 4, 2, VocabMode::Separable).unwrap();
        let history = vec![TurnStep { action: Action::Guess(2), response: JudgeResponse::No }];
        assert_eq!(consistent_set(&v, &history), vec![0, 1, 3]);
    }

    /// Independent brute-force filter used as the oracle for consistent_set.
    fn brute_force_filter(vocab: &Vocabulary, history: &[TurnStep]) -> Vec<usize> {
        vocab
            .concepts()
            .iter()
            .filter(|c| {
                history.iter().all(|s| match (&s.action, s.response) {
                    (Action::AskAttribute(j), JudgeResponse::Yes) => c.attribute(*j),
                    (Action::AskAttribute(j), JudgeResponse::No) => !c.attribute(*j),
                    (Action::Guess(g), JudgeResponse::No) => c.id != *g,
                    (Action::Guess(g), JudgeResponse::Finished) => c.id == *g,
                    _ => true,
                })
            })
            .map(|c| c.id)
            .collect()
    }

    #[test]
    fn consistent_set_matches_brute_force_on_random_histories() {
        let vocab = generate_vocabulary(21, 50, 8, VocabMode::Random).unwrap();
        for trial in 0..100 {
            let mut rng = rng_for(400, "consistency", trial);
            let history: Vec<TurnStep> = (0..5)
                .map(|_| {
                    let action = if rng.random_bool(0.7) {
                        Action::AskAttribute(rng.random_range(0..8))
                    } else {
                        Action::Guess(rng.random_range(0..50))
                    };
                    let response = match action {
                        Action::AskAttribute(_) => {
                            if rng.random_bool(0.5) {
                                JudgeResponse::Yes
                            } else {
                                JudgeResponse::No
                            }
                        }
                        _ => JudgeResponse::No,
                    };
                    TurnStep { action, response }
                })
                .collect();
            assert_eq!(consistent_set(&vocab, &history), brute_force_filter(&vocab, &history));
        }
    }

    proptest! {
        // Appending any constraint never adds concepts back.
        #[test]
        fn consistent_set_is_monotone_nonincreasing(
            seed in 0u64..50,
            steps in proptest::collection::vec((0usize..6, any::<bool>()), 0..12)
        ) {
            let vocab = generate_vocabulary(seed, 30, 6, VocabMode::Random).unwrap();
            let mut history = Vec::new();
            let mut prev = consistent_set(&vocab, &history).len();
            for (j, yes) in steps {
                let r = if yes { JudgeResponse::Yes } else { JudgeResponse::No };
                history.push(TurnStep { action: Action::AskAttribute(j), response: r });
                let cur = consistent_set(&vocab, &history).len();
                prop_assert!(cur <= prev);
                prev = cur;
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let v = generate_vocabulary(13, 32, 5, VocabMode::Separable).unwrap();
        let s = split_vocabulary(&v, SplitCounts::default_ratio(32), 13).unwrap();
        let text = to_json(&v, &s);
        let (v2, s2) = from_json(&text).unwrap();
        assert_eq!(v, v2);
        assert_eq!(s, s2);
        assert_eq!(text, to_json(&v2, &s2));
    }

    #[test]
    fn attribute_string_is_msb_first() {
        let c = Concept { id: 0, name: "concept_0000".into(), attributes: vec![true, false, false] };
        // attribute 0 set, attributes 1..2 clear: string shows attribute 2 first.
        assert_eq!(c.attribute_string(), "001");
    }
}
