use serde::{Deserialize, Serialize};

use super::vocab::Vocab;

pub const DEFAULT_MAX_KNOWLEDGE_LEN: usize = 288;

/// One retrievable knowledge item: a run of consecutive corpus tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: u64,
    pub tokens: Vec<u32>,
}

/// Splits every line into consecutive windows of at most
/// `max_knowledge_len` tokens. Ids count up from 0 in corpus order.
pub fn chunk_knowledge<S: AsRef<str>>(vocab: &Vocab, corpus: &[S], max_knowledge_len: usize) -> Vec<KnowledgeEntry> {
    let max_len = max_knowledge_len.max(1);
    let mut entries = Vec::new();
    for line in corpus {
        let ids = vocab.encode_words(line.as_ref());
        for window in ids.chunks(max_len) {
            entries.push(KnowledgeEntry {
                id: entries.len() as u64,
                tokens: window.to_vec(),
            });
        }
    }
    entries
}

/// Shifts entry ids by `base`, used to keep ids of different sources apart.
pub fn offset_ids(entries: &mut [KnowledgeEntry], base: u64) {
    for e in entries {
        e.id += base;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::build(&["a b c d e f g h i j"], 100).unwrap()
    }

    #[test]
    fn windows_of_ten_tokens() {
        let v = vocab();
        let entries = chunk_knowledge(&v, &["a b c d e f g h i j"], 4);
        let sizes: Vec<usize> = entries.iter().map(|e| e.tokens.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(entries.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_line_yields_nothing() {
        assert!(chunk_knowledge(&vocab(), &[""], 8).is_empty());
    }

    proptest! {
        #[test]
        fn windows_are_bounded_and_concatenate(words in prop::collection::vec(0usize..10, 0..60), bound in 8usize..20) {
            let v = vocab();
            let names = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
            let line = words.iter().map(|&w| names[w]).collect::<Vec<_>>().join(" ");
            let entries = chunk_knowledge(&v, &[line.as_str()], bound);
            prop_assert!(entries.iter().all(|e| !e.tokens.is_empty() && e.tokens.len() <= bound));
            let joined: Vec<u32> = entries.iter().flat_map(|e| e.tokens.clone()).collect();
            prop_assert_eq!(joined, v.encode_words(&line));
        }
    }
}
