//! Corpus ingestion, tokenization, and the synthetic topic-structured
//! generator used for desk-scale experiments.
//!
//! File formats (UTF-8, LF, no header):
//!
//! ```text
//! users.tsv         user_id <TAB> page title | page title | ...
//! ads.tsv           ad_id <TAB> description
//! interactions.tsv  user_id <TAB> ad_id <TAB> unix timestamp
//! ```
//!
//! Pages are listed oldest first.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Reserved token ids.
pub mod special {
    pub const PAD: u32 = 0;
    pub const CLS: u32 = 1;
    pub const SEP: u32 = 2;
    pub const UNK: u32 = 3;
    /// Boundary between consecutive browsed pages.
    pub const SEP_PAGE: u32 = 4;
    pub const COUNT: usize = 5;
    pub const NAMES: [&str; COUNT] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]", "[SEP_PAGE]"];
}

/// Minimum training-text frequency for a word to enter the vocabulary.
pub const MIN_WORD_FREQ: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AdId(pub u64);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for AdId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Reserved tokens followed by every word seen at least `min_freq` times,
    /// in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<String> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq)
            .map(|(w, _)| w)
            .collect();
        kept.sort();
        Self::from_words(kept)
    }

    /// Reserved tokens followed by `words` in the given order.
    pub fn from_words(words: Vec<String>) -> Self {
        let mut all: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= special::COUNT
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(special::UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }
}

/// Lowercased words, split on whitespace and punctuation.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    split_words(text).take(max_len).map(|w| vocab.id(&w)).collect()
}

/// Joins browsed pages with [`special::SEP_PAGE`], keeping the most recent
/// pages (the end of the list) when the result would exceed `max_len`.
pub fn user_sequence(pages: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let mut chunks: Vec<Vec<u32>> = Vec::new();
    let mut used = 0;
    for page in pages.iter().rev() {
        let sep = usize::from(!chunks.is_empty());
        let budget = max_len.saturating_sub(used + sep);
        if budget == 0 {
            break;
        }
        let toks = tokenize(page, vocab, budget);
        if toks.is_empty() {
            continue;
        }
        used += toks.len() + sep;
        chunks.push(toks);
    }
    let mut out = Vec::with_capacity(used);
    for (i, c) in chunks.iter().rev().enumerate() {
        if i > 0 {
            out.push(special::SEP_PAGE);
        }
        out.extend_from_slice(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub id: UserId,
    pub pages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ad {
    pub id: AdId,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: UserId,
    pub ad: AdId,
    pub timestamp: i64,
}

/// How interactions are partitioned in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeSplit {
    /// The earliest `fraction` of interactions train; ties at the boundary
    /// go to evaluation so the partition stays strict.
    Fraction(f64),
    /// `ts < train_end` trains, `ts >= eval_start` evaluates; anything in the
    /// gap between them is rejected.
    Cutoff { train_end: i64, eval_start: i64 },
}

/// Planted labels of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicLabels {
    pub user_topic: Vec<usize>,
    pub ad_topic: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    users: Vec<User>,
    ads: Vec<Ad>,
    interactions: Vec<Interaction>,
    n_train: usize,
    vocab: Vocabulary,
    user_index: HashMap<UserId, usize>,
    ad_index: HashMap<AdId, usize>,
    labels: Option<TopicLabels>,
}

impl Corpus {
    /// Validates ids, applies the time split, and builds the vocabulary from
    /// training-split text (pages of users with a training interaction, plus
    /// every ad description, since the ad inventory is known up front).
    pub fn from_parts(
        users: Vec<User>,
        ads: Vec<Ad>,
        mut interactions: Vec<Interaction>,
        split: TimeSplit,
    ) -> Result<Self> {
        let mut user_index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if user_index.insert(u.id, i).is_some() {
                return Err(Error::DuplicateId(u.id.0));
            }
        }
        let mut ad_index = HashMap::with_capacity(ads.len());
        for (i, a) in ads.iter().enumerate() {
            if ad_index.insert(a.id, i).is_some() {
                return Err(Error::DuplicateId(a.id.0));
            }
        }
        for it in &interactions {
            if !user_index.contains_key(&it.user) {
                return Err(Error::UnknownUser(it.user.0));
            }
            if !ad_index.contains_key(&it.ad) {
                return Err(Error::UnknownAd(it.ad.0));
            }
        }
        interactions.sort_by_key(|it| (it.timestamp, it.user, it.ad));
        let n_train = match split {
            TimeSplit::Fraction(f) => {
                if !(0.0..1.0).contains(&f) {
                    return Err(Error::Data(format!("train fraction {f} outside [0, 1)")));
                }
                let k = ((interactions.len() as f64) * f).floor() as usize;
                match interactions.get(k) {
                    Some(boundary) => interactions
                        .iter()
                        .take_while(|it| it.timestamp < boundary.timestamp)
                        .count(),
                    None => interactions.len(),
                }
            }
            TimeSplit::Cutoff {
                train_end,
                eval_start,
            } => {
                if train_end > eval_start {
                    return Err(Error::Data(format!(
                        "train_end {train_end} after eval_start {eval_start}"
                    )));
                }
                if let Some(bad) = interactions
                    .iter()
                    .find(|it| it.timestamp >= train_end && it.timestamp < eval_start)
                {
                    return Err(Error::Data(format!(
                        "interaction ({}, {}) at {} falls between the train and eval periods",
                        bad.user, bad.ad, bad.timestamp
                    )));
                }
                interactions.iter().take_while(|it| it.timestamp < train_end).count()
            }
        };
        let train_users: HashSet<UserId> =
            interactions[..n_train].iter().map(|it| it.user).collect();
        let texts = users
            .iter()
            .filter(|u| train_users.contains(&u.id))
            .flat_map(|u| u.pages.iter().map(String::as_str))
            .chain(ads.iter().map(|a| a.description.as_str()));
        let vocab = Vocabulary::build(texts, MIN_WORD_FREQ);
        Ok(Self {
            users,
            ads,
            interactions,
            n_train,
            vocab,
            user_index,
            ad_index,
            labels: None,
        })
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn ads(&self) -> &[Ad] {
        &self.ads
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn train(&self) -> &[Interaction] {
        &self.interactions[..self.n_train]
    }

    pub fn eval(&self) -> &[Interaction] {
        &self.interactions[self.n_train..]
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn labels(&self) -> Option<&TopicLabels> {
        self.labels.as_ref()
    }

    pub fn user_idx(&self, id: UserId) -> Result<usize> {
        self.user_index.get(&id).copied().ok_or(Error::UnknownUser(id.0))
    }

    pub fn ad_idx(&self, id: AdId) -> Result<usize> {
        self.ad_index.get(&id).copied().ok_or(Error::UnknownAd(id.0))
    }

    pub fn user_tokens(&self, idx: usize, max_len: usize) -> Vec<u32> {
        user_sequence(&self.users[idx].pages, &self.vocab, max_len)
    }

    pub fn ad_tokens(&self, idx: usize, max_len: usize) -> Vec<u32> {
        tokenize(&self.ads[idx].description, &self.vocab, max_len)
    }

    /// Writes `users.tsv`, `ads.tsv` and `interactions.tsv` into `dir`.
    pub fn export_tsv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("users.tsv"))?);
        for u in &self.users {
            writeln!(w, "{}\t{}", u.id, u.pages.join("|"))?;
        }
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join("ads.tsv"))?);
        for a in &self.ads {
            writeln!(w, "{}\t{}", a.id, a.description)?;
        }
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join("interactions.tsv"))?);
        for it in &self.interactions {
            writeln!(w, "{}\t{}\t{}", it.user, it.ad, it.timestamp)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {what} `{s}`"),
    })
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Reads the three TSV files from `dir`.
pub fn ingest_tsv(dir: impl AsRef<Path>, split: TimeSplit) -> Result<Corpus> {
    let dir = dir.as_ref();
    let users_path = dir.join("users.tsv");
    let mut users = Vec::new();
    for (n, line) in lines(&users_path)? {
        let (id, pages) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: users_path.clone(),
            line: n,
            message: "expected `user_id<TAB>pages`".into(),
        })?;
        users.push(User {
            id: UserId(parse_field(&users_path, n, "user id", id)?),
            pages: pages.split('|').map(|p| p.trim().to_string()).collect(),
        });
    }
    let ads_path = dir.join("ads.tsv");
    let mut ads = Vec::new();
    for (n, line) in lines(&ads_path)? {
        let (id, desc) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: ads_path.clone(),
            line: n,
            message: "expected `ad_id<TAB>description`".into(),
        })?;
        ads.push(Ad {
            id: AdId(parse_field(&ads_path, n, "ad id", id)?),
            description: desc.trim().to_string(),
        });
    }
    let int_path = dir.join("interactions.tsv");
    let mut interactions = Vec::new();
    for (n, line) in lines(&int_path)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: int_path.clone(),
                line: n,
                message: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        interactions.push(Interaction {
            user: UserId(parse_field(&int_path, n, "user id", fields[0])?),
            ad: AdId(parse_field(&int_path, n, "ad id", fields[1])?),
            timestamp: parse_field(&int_path, n, "timestamp", fields[2])?,
        });
    }
    Corpus::from_parts(users, ads, interactions, split)
}

/// Parameters of the synthetic topic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    pub n_users: usize,
    pub n_ads: usize,
    /// Upper bound on distinct words, reserved tokens included.
    pub vocab_size: usize,
    pub tokens_per_page: usize,
    pub pages_per_user: usize,
    pub interactions_per_user: usize,
    /// Fraction of off-topic tokens and off-topic clicks.
    pub noise: f64,
    pub ad_tokens: usize,
    /// Share of on-topic page tokens drawn from the descriptions of the
    /// user's on-topic clicked ads.
    pub interest_rate: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_topics: 20,
            n_users: 5000,
            n_ads: 2000,
            vocab_size: 4000,
            tokens_per_page: 6,
            pages_per_user: 8,
            interactions_per_user: 2,
            noise: 0.3,
            ad_tokens: 6,
            interest_rate: 0.3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn words_per_topic(&self) -> usize {
        self.vocab_size.saturating_sub(special::COUNT) / self.n_topics.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_topics == 0 || self.n_users == 0 || self.interactions_per_user == 0 {
            return err("counts must be >= 1".into());
        }
        if self.n_ads < self.n_topics {
            return err(format!("n_ads {} < n_topics {}", self.n_ads, self.n_topics));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return err(format!("noise {} outside [0, 1)", self.noise));
        }
        if !(0.0..=1.0).contains(&self.interest_rate) {
            return err(format!("interest_rate {} outside [0, 1]", self.interest_rate));
        }
        if self.ad_tokens == 0 || self.ad_tokens > self.words_per_topic() {
            return err(format!(
                "ad_tokens {} must be in 1..={} (words per topic)",
                self.ad_tokens,
                self.words_per_topic()
            ));
        }
        if self.tokens_per_page == 0 || self.pages_per_user == 0 {
            return err("pages must hold tokens".into());
        }
        Ok(())
    }
}

fn topic_word(topic: usize, k: usize) -> String {
    format!("t{topic}w{k}")
}

/// Generates a corpus with planted topic structure.
///
/// Each topic owns a disjoint block of words. An ad belongs to topic
/// `index % n_topics` and is described by distinct words of its block. A
/// user has one dominant topic; each click lands on a uniformly chosen ad of
/// that topic with probability `1 - noise`, otherwise on any ad. Page tokens
/// are uniform noise words with probability `noise`, otherwise dominant-topic
/// words, of which an `interest_rate` share come from the user's on-topic
/// clicked ads. Pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_topic = spec.words_per_topic();
    let n_words = spec.vocab_size - special::COUNT;
    let all_words: Vec<String> = (0..spec.n_topics)
        .flat_map(|t| (0..per_topic).map(move |k| topic_word(t, k)))
        .chain((0..n_words - per_topic * spec.n_topics).map(|k| format!("x{k}")))
        .collect();

    let mut ad_topic = Vec::with_capacity(spec.n_ads);
    let mut ad_words: Vec<Vec<usize>> = Vec::with_capacity(spec.n_ads);
    let mut ads = Vec::with_capacity(spec.n_ads);
    for i in 0..spec.n_ads {
        let t = i % spec.n_topics;
        let words = index::sample(&mut rng, per_topic, spec.ad_tokens).into_vec();
        ads.push(Ad {
            id: AdId(i as u64),
            description: words
                .iter()
                .map(|&k| topic_word(t, k))
                .collect::<Vec<_>>()
                .join(" "),
        });
        ad_topic.push(t);
        ad_words.push(words);
    }
    let mut ads_by_topic = vec![Vec::new(); spec.n_topics];
    for (i, &t) in ad_topic.iter().enumerate() {
        ads_by_topic[t].push(i);
    }

    const BASE_TS: i64 = 1_600_000_000;
    const SPAN_TS: i64 = 60 * 86_400;
    let mut users = Vec::with_capacity(spec.n_users);
    let mut user_topic = Vec::with_capacity(spec.n_users);
    let mut interactions = Vec::with_capacity(spec.n_users * spec.interactions_per_user);
    for u in 0..spec.n_users {
        let t = rng.random_range(0..spec.n_topics);
        let mut interest: Vec<usize> = Vec::new();
        for _ in 0..spec.interactions_per_user {
            let ad = if rng.random::<f64>() < 1.0 - spec.noise {
                ads_by_topic[t][rng.random_range(0..ads_by_topic[t].len())]
            } else {
                rng.random_range(0..spec.n_ads)
            };
            if ad_topic[ad] == t {
                interest.extend(&ad_words[ad]);
            }
            interactions.push(Interaction {
                user: UserId(u as u64),
                ad: AdId(ad as u64),
                timestamp: BASE_TS + rng.random_range(0..SPAN_TS),
            });
        }
        let pages = (0..spec.pages_per_user)
            .map(|_| {
                (0..spec.tokens_per_page)
                    .map(|_| {
                        if rng.random::<f64>() < spec.noise {
                            all_words[rng.random_range(0..all_words.len())].clone()
                        } else if !interest.is_empty() && rng.random::<f64>() < spec.interest_rate {
                            topic_word(t, interest[rng.random_range(0..interest.len())])
                        } else {
                            topic_word(t, rng.random_range(0..per_topic))
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        users.push(User {
            id: UserId(u as u64),
            pages,
        });
        user_topic.push(t);
    }

    let mut corpus = Corpus::from_parts(
        users,
        ads,
        interactions,
        TimeSplit::Fraction(spec.train_fraction),
    )?;
    corpus.labels = Some(TopicLabels {
        user_topic,
        ad_topic,
    });
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_words(words.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn empty_text_gives_empty_sequence() {
        assert!(tokenize("", &vocab(&["a"]), 10).is_empty());
    }

    #[test]
    fn known_words_map_to_ids() {
        let v = vocab(&["nba", "playoff"]);
        assert_eq!(tokenize("NBA Playoff", &v, 10), vec![5, 6]);
    }

    #[test]
    fn unknown_word_becomes_single_unk() {
        let v = vocab(&["nba", "playoff"]);
        assert_eq!(
            tokenize("nba, bucks! playoff", &v, 10),
            vec![5, special::UNK, 6]
        );
    }

    #[test]
    fn truncation_and_page_order() {
        let v = vocab(&["a", "b", "c", "d"]);
        let pages = vec!["a b".to_string(), "c d".to_string()];
        assert_eq!(user_sequence(&pages, &v, 10), vec![5, 6, special::SEP_PAGE, 7, 8]);
        // The oldest page is cut first.
        assert_eq!(user_sequence(&pages, &v, 4), vec![5, special::SEP_PAGE, 7, 8]);
        assert_eq!(user_sequence(&pages, &v, 3), vec![7, 8]);
        assert_eq!(user_sequence(&pages, &v, 1), vec![7]);
    }

    #[test]
    fn vocabulary_respects_min_frequency() {
        let v = Vocabulary::build(["x y y", "z y x"], 2);
        assert_eq!(v.len(), special::COUNT + 2);
        assert_eq!(v.id("x"), 5);
        assert_eq!(v.id("z"), special::UNK);
    }

    fn tiny_parts() -> (Vec<User>, Vec<Ad>) {
        (
            vec![User {
                id: UserId(1),
                pages: vec!["a b".into()],
            }],
            vec![Ad {
                id: AdId(9),
                description: "a b".into(),
            }],
        )
    }

    #[test]
    fn missing_ad_is_named_error() {
        let (users, ads) = tiny_parts();
        let it = vec![Interaction {
            user: UserId(1),
            ad: AdId(3),
            timestamp: 0,
        }];
        assert!(matches!(
            Corpus::from_parts(users, ads, it, TimeSplit::Fraction(0.5)),
            Err(Error::UnknownAd(3))
        ));
    }

    #[test]
    fn gap_interactions_rejected() {
        let (users, ads) = tiny_parts();
        let mk = |ts| Interaction {
            user: UserId(1),
            ad: AdId(9),
            timestamp: ts,
        };
        let split = TimeSplit::Cutoff {
            train_end: 10,
            eval_start: 20,
        };
        assert!(Corpus::from_parts(users.clone(), ads.clone(), vec![mk(5), mk(25)], split).is_ok());
        assert!(matches!(
            Corpus::from_parts(users, ads, vec![mk(5), mk(15)], split),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn fraction_split_keeps_ties_together() {
        let (users, ads) = tiny_parts();
        let mk = |ts| Interaction {
            user: UserId(1),
            ad: AdId(9),
            timestamp: ts,
        };
        let c = Corpus::from_parts(users, ads, vec![mk(1), mk(2), mk(2), mk(3)], TimeSplit::Fraction(0.5))
            .unwrap();
        assert_eq!(c.train().len(), 1);
        assert!(c.train().iter().map(|i| i.timestamp).max() < c.eval().iter().map(|i| i.timestamp).min());
    }

    #[test]
    fn noiseless_corpus_is_topic_matched() {
        let spec = SyntheticSpec {
            n_users: 200,
            n_ads: 100,
            vocab_size: 500,
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let labels = c.labels().unwrap();
        for it in c.interactions() {
            let u = c.user_idx(it.user).unwrap();
            let a = c.ad_idx(it.ad).unwrap();
            assert_eq!(labels.user_topic[u], labels.ad_topic[a]);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = SyntheticSpec {
            n_ads: 5,
            n_topics: 10,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec {
            noise: 1.0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
