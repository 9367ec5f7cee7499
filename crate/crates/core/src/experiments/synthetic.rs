use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TaskSample;
use crate::util::{rng, seed_mix};

/// Parameters of the synthetic general and topic-domain corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub seed: u64,
    pub num_domains: usize,
    /// Topic words per domain: class words plus entity names.
    pub topic_words: usize,
    pub num_classes: usize,
    pub general_entities: usize,
    pub general_classes: usize,
    /// Lines of the general corpus, which also backs the general memory.
    pub general_lines: usize,
    pub knowledge_lines_per_domain: usize,
    pub task_samples_per_domain: usize,
    /// Share of each domain's entities also described in the general corpus.
    pub general_coverage: f64,
    /// Share of each domain's entities reserved for test samples.
    pub test_fraction: f64,
    /// Explicit topic-word lists per domain; generated when empty.
    #[serde(default)]
    pub topic_lists: Vec<Vec<String>>,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        SyntheticDomainSpec {
            seed: 7,
            num_domains: 2,
            topic_words: 200,
            num_classes: 4,
            general_entities: 300,
            general_classes: 8,
            general_lines: 2000,
            knowledge_lines_per_domain: 2000,
            task_samples_per_domain: 500,
            general_coverage: 0.5,
            test_fraction: 0.4,
            topic_lists: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub class: usize,
    pub in_test: bool,
    pub in_general: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainData {
    pub name: String,
    /// One word per class, all topic words of this domain.
    pub class_words: Vec<String>,
    pub entities: Vec<Entity>,
    pub knowledge: Vec<String>,
    pub train: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
    /// Index of the unrelated domain used as the mismatched memory.
    pub irrelevant: usize,
}

impl DomainData {
    pub fn topic_words(&self) -> impl Iterator<Item = &str> {
        self.class_words
            .iter()
            .map(String::as_str)
            .chain(self.entities.iter().map(|e| e.name.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub general: Vec<String>,
    pub domains: Vec<DomainData>,
}

impl SyntheticData {
    /// Every line of every corpus and task, plus the label digits written by
    /// concatenated task entries, for building one shared vocabulary.
    pub fn all_text(&self) -> Vec<String> {
        let mut out = self.general.clone();
        let classes = self.domains.iter().map(|d| d.class_words.len()).max().unwrap_or(0);
        out.push((0..classes).map(|c| c.to_string()).collect::<Vec<_>>().join(" "));
        for d in &self.domains {
            out.extend(d.knowledge.iter().cloned());
            for s in d.train.iter().chain(&d.test) {
                out.push(s.text_a.clone());
                out.extend(s.text_b.clone());
            }
        }
        out
    }
}

const FUNCTION_WORDS: [&str; 15] = [
    "a", "is", "of", "kind", "type", "form", "one", "we", "saw", "today", "there", "was", "again", "the", "and",
];

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

/// Unique lowercase pseudo-words, none of which is a function word.
struct WordMint {
    seen: HashSet<String>,
}

impl WordMint {
    fn new() -> Self {
        WordMint {
            seen: FUNCTION_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn reserve(&mut self, word: &str) -> bool {
        self.seen.insert(word.to_string())
    }

    fn mint(&mut self, r: &mut impl Rng, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[r.gen_range(0..ONSETS.len())]);
                w.push_str(VOWELS[r.gen_range(0..VOWELS.len())]);
            }
            if r.gen_bool(0.5) {
                w.push_str(["n", "r", "x", "k"][r.gen_range(0..4)]);
            }
            if self.seen.insert(w.clone()) {
                return w;
            }
        }
    }

    fn mint_many(&mut self, r: &mut impl Rng, n: usize, syllables: usize) -> Vec<String> {
        (0..n).map(|_| self.mint(r, syllables)).collect()
    }
}

fn entity(name: String, class: usize) -> Entity {
    Entity {
        name,
        class,
        in_test: false,
        in_general: false,
    }
}

fn knowledge_line(r: &mut impl Rng, e: &Entity, class_word: &str) -> String {
    let n = &e.name;
    match r.gen_range(0..3) {
        0 => format!("{n} is a kind of {class_word} ."),
        1 => format!("{n} is one type of {class_word} ."),
        _ => format!("{n} is a form of {class_word} ."),
    }
}

fn task_line(r: &mut impl Rng, e: &Entity) -> String {
    let n = &e.name;
    match r.gen_range(0..2) {
        0 => format!("{n}"),
        _ => format!("{n} ."),
    }
}

fn check(spec: &SyntheticDomainSpec) -> Result<()> {
    let fail = |m: String| Err(Error::Spec(m));
    if spec.num_domains < 2 {
        return fail(format!("need at least two domains, got {}", spec.num_domains));
    }
    if spec.num_classes < 2 || spec.topic_words < 2 * spec.num_classes {
        return fail(format!(
            "{} topic words cannot hold {} classes with entities",
            spec.topic_words, spec.num_classes
        ));
    }
    if !(0.0..1.0).contains(&spec.general_coverage) || !(0.0..1.0).contains(&spec.test_fraction) || spec.test_fraction == 0.0 {
        return fail("coverage and test fractions must lie in [0, 1) with a nonzero test share".into());
    }
    if spec.general_entities == 0 || spec.general_classes == 0 || spec.general_lines == 0 {
        return fail("general corpus needs entities, classes and lines".into());
    }
    if !spec.topic_lists.is_empty() {
        if spec.topic_lists.len() != spec.num_domains {
            return fail(format!(
                "{} topic lists for {} domains",
                spec.topic_lists.len(),
                spec.num_domains
            ));
        }
        let mut seen = HashSet::new();
        for (d, list) in spec.topic_lists.iter().enumerate() {
            if list.len() != spec.topic_words {
                return fail(format!("topic list {d} has {} words, expected {}", list.len(), spec.topic_words));
            }
            for w in list {
                if !seen.insert(w.as_str()) {
                    return fail(format!("topic word {w} appears in more than one domain"));
                }
            }
        }
    }
    Ok(())
}

/// Deterministic general corpus, domain knowledge and domain tasks.
///
/// An entity's class is stated only in knowledge lines; task samples name
/// the entity without its class, and test entities never occur in training
/// samples, so a task is solvable on unseen entities only through memory.
pub fn generate_domains(spec: &SyntheticDomainSpec) -> Result<SyntheticData> {
    check(spec)?;
    let mut r = rng(seed_mix(spec.seed, 1));
    let mut mint = WordMint::new();

    let mut topic: Vec<Vec<String>> = Vec::with_capacity(spec.num_domains);
    if spec.topic_lists.is_empty() {
        for _ in 0..spec.num_domains {
            topic.push(mint.mint_many(&mut r, spec.topic_words, 2));
        }
    } else {
        for list in &spec.topic_lists {
            for w in list {
                if !mint.reserve(w) {
                    return Err(Error::Spec(format!("topic word {w} collides with another generated word")));
                }
            }
            topic.push(list.clone());
        }
    }
    let general_classes = mint.mint_many(&mut r, spec.general_classes, 3);
    let general_entities: Vec<Entity> = (0..spec.general_entities)
        .map(|i| {
            let name = mint.mint(&mut r, 3);
            entity(name, i % spec.general_classes)
        })
        .collect();

    let mut domains = Vec::with_capacity(spec.num_domains);
    for (di, words) in topic.iter().enumerate() {
        let class_words = words[..spec.num_classes].to_vec();
        let names = &words[spec.num_classes..];
        let n = names.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let n_test = ((n as f64) * spec.test_fraction).round().max(1.0) as usize;
        let n_general = ((n as f64) * spec.general_coverage).round() as usize;
        let mut entities: Vec<Entity> = names
            .iter()
            .enumerate()
            .map(|(i, name)| entity(name.clone(), i % spec.num_classes))
            .collect();
        for &i in &order[..n_test] {
            entities[i].in_test = true;
        }
        // General coverage is drawn independently of the split.
        let mut cover: Vec<usize> = (0..n).collect();
        cover.shuffle(&mut r);
        for &i in &cover[..n_general] {
            entities[i].in_general = true;
        }
        // Lines are grouped by entity so a prefix covers a matching share of
        // entities.
        let mut shown: Vec<usize> = (0..n).collect();
        shown.shuffle(&mut r);
        let per_entity = spec.knowledge_lines_per_domain.div_ceil(n).max(1);
        let knowledge = (0..spec.knowledge_lines_per_domain)
            .map(|j| {
                let e = &entities[shown[(j / per_entity) % n]];
                knowledge_line(&mut r, e, &class_words[e.class])
            })
            .collect();
        let train_ids: Vec<usize> = (0..n).filter(|&i| !entities[i].in_test).collect();
        let test_ids: Vec<usize> = (0..n).filter(|&i| entities[i].in_test).collect();
        let n_test_samples = ((spec.task_samples_per_domain as f64) * spec.test_fraction).round() as usize;
        let sample = |ids: &[usize], count: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<TaskSample> {
            (0..count)
                .map(|j| {
                    let e = &entities[ids[j % ids.len()]];
                    TaskSample {
                        text_a: task_line(r, e),
                        text_b: None,
                        label: e.class,
                    }
                })
                .collect()
        };
        let mut train = sample(&train_ids, spec.task_samples_per_domain - n_test_samples, &mut r);
        let mut test = sample(&test_ids, n_test_samples, &mut r);
        train.shuffle(&mut r);
        test.shuffle(&mut r);
        domains.push(DomainData {
            name: format!("domain{di}"),
            class_words,
            entities,
            knowledge,
            train,
            test,
            irrelevant: (di + 1) % spec.num_domains,
        });
    }

    let mut general: Vec<String> = Vec::with_capacity(spec.general_lines);
    let covered: Vec<(&Entity, &str)> = domains
        .iter()
        .flat_map(|d| {
            d.entities
                .iter()
                .filter(|e| e.in_general)
                .map(|e| (e, d.class_words[e.class].as_str()))
        })
        .collect();
    // Covered domain entities get three lines each, the rest is general.
    for (e, class) in covered.iter().cycle().take((covered.len() * 3).min(spec.general_lines / 2)) {
        general.push(knowledge_line(&mut r, e, class));
    }
    let mut j = 0;
    while general.len() < spec.general_lines {
        let e = &general_entities[j % general_entities.len()];
        general.push(knowledge_line(&mut r, e, &general_classes[e.class]));
        j += 1;
    }
    general.shuffle(&mut r);
    Ok(SyntheticData { general, domains })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            topic_words: 40,
            num_classes: 2,
            general_entities: 30,
            general_lines: 200,
            knowledge_lines_per_domain: 100,
            task_samples_per_domain: 200,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_domains(&small()).unwrap(), generate_domains(&small()).unwrap());
        let other = SyntheticDomainSpec { seed: 8, ..small() };
        assert_ne!(generate_domains(&small()).unwrap(), generate_domains(&other).unwrap());
    }

    #[test]
    fn sample_counts_and_topic_words() {
        let data = generate_domains(&small()).unwrap();
        for d in &data.domains {
            assert_eq!(d.train.len() + d.test.len(), 200);
            let topic: HashSet<&str> = d.topic_words().collect();
            for s in d.train.iter().chain(&d.test) {
                assert!(crate::text::split_words(&s.text_a).iter().any(|w| topic.contains(w.as_str())));
                assert!(s.label < 2);
            }
        }
        assert_eq!(data.domains[0].irrelevant, 1);
        assert_eq!(data.domains[1].irrelevant, 0);
    }

    #[test]
    fn test_entities_unseen_in_training() {
        let data = generate_domains(&small()).unwrap();
        for d in &data.domains {
            let test: HashSet<&str> = d.entities.iter().filter(|e| e.in_test).map(|e| e.name.as_str()).collect();
            for s in &d.train {
                assert!(crate::text::split_words(&s.text_a).iter().all(|w| !test.contains(w.as_str())));
            }
        }
    }

    #[test]
    fn knowledge_prefix_covers_growing_entity_share() {
        let spec = SyntheticDomainSpec {
            knowledge_lines_per_domain: 380,
            ..small()
        };
        let data = generate_domains(&spec).unwrap();
        let d = &data.domains[0];
        let covered = |lines: &[String]| -> usize {
            let names: HashSet<String> = lines.iter().map(|l| crate::text::split_words(l)[0].clone()).collect();
            names.len()
        };
        assert_eq!(covered(&d.knowledge[..95]), 10);
        assert_eq!(covered(&d.knowledge), 38);
    }

    #[test]
    fn all_text_has_label_digits() {
        let data = generate_domains(&small()).unwrap();
        let words: HashSet<String> = data.all_text().iter().flat_map(|l| crate::text::split_words(l)).collect();
        assert!(words.contains("0") && words.contains("1"));
    }

    #[test]
    fn overlapping_topics_rejected() {
        let mut spec = small();
        spec.topic_words = 4;
        spec.topic_lists = vec![
            vec!["aa".into(), "bb".into(), "cc".into(), "dd".into()],
            vec!["ee".into(), "ff".into(), "gg".into(), "aa".into()],
        ];
        assert!(matches!(generate_domains(&spec), Err(Error::Spec(_))));
        spec.topic_lists[1][3] = "hh".into();
        assert!(generate_domains(&spec).is_ok());
    }
}
