//! Tokenization, knowledge chunking, MLM masking and task-sample rewriting.

pub mod io;
mod knowledge;
mod mask;
mod prompt;
mod vocab;

pub use knowledge::{chunk_knowledge, offset_ids, KnowledgeEntry, DEFAULT_MAX_KNOWLEDGE_LEN};
pub use mask::{mask_count, mask_for_mlm, mask_row, row_seed, MaskedBatch, DEFAULT_MASK_RATE};
pub use prompt::{concat_sample, entailment_templates, knowledge_prompt, tag_input, tag_sample, TaskSample};
pub use vocab::{is_reserved, split_words, Vocab, CLS, MASK, PAD, RESERVED, SEP, TAGGED, UNK};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_ranking_and_reserved_layout() {
        let v = Vocab::build(&["a b b"], 10).unwrap();
        assert!(v.id("b").unwrap() < v.id("a").unwrap());
        for (i, name) in RESERVED.iter().enumerate() {
            assert_eq!(v.token(i as u32), Some(*name));
        }
        assert_eq!(v.id("[Tagged]"), Some(TAGGED));
    }

    #[test]
    fn truncation_keeps_top_two() {
        let v = Vocab::build(&["e d d c c c b b b b a a a a a"], 8).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(6), Some("a"));
        assert_eq!(v.token(7), Some("b"));
        assert_eq!(v.id("c"), None);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let none: [&str; 0] = [];
        assert!(Vocab::build(&none, 10).is_err());
        assert!(Vocab::build(&["", "   "], 10).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocab::build(&["hello world"], 10).unwrap();
        assert_eq!(v.tokenize("", 8), vec![CLS]);
        assert_eq!(v.tokenize("hello", 8), vec![CLS, v.id("hello").unwrap()]);
        assert_eq!(v.tokenize("zebra", 8), vec![CLS, UNK]);
        assert_eq!(v.tokenize("hello world hello", 2).len(), 2);
        assert_eq!(
            v.tokenize_pair("hello", Some("world"), 16),
            vec![CLS, v.id("hello").unwrap(), SEP, v.id("world").unwrap(), SEP]
        );
    }

    #[test]
    fn split_keeps_reserved_names_and_punctuation() {
        assert_eq!(
            split_words("[Tagged] Q? [SEP] it's 1."),
            vec!["[Tagged]", "q", "?", "[SEP]", "it's", "1", "."]
        );
    }

    #[test]
    fn prompt_shares_content_with_text_a() {
        let s = TaskSample {
            text_a: "where is the zorkel".into(),
            text_b: Some("the zorkel lives here".into()),
            label: 0,
        };
        let p = knowledge_prompt(&s, &entailment_templates()).unwrap();
        let a = split_words(&s.text_a);
        assert!(split_words(&p).iter().any(|t| a.contains(t) && t != "the"));
    }

    proptest! {
        #[test]
        fn in_vocab_tokens_round_trip(picks in prop::collection::vec(0usize..5, 0..20)) {
            let words = ["alpha", "beta", "gamma", "delta", "eps"];
            let v = Vocab::build(&[words.join(" ")], 50).unwrap();
            let text = picks.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
            let ids = v.tokenize(&text, 64);
            prop_assert_eq!(v.detokenize(&ids[1..]), text);
        }
    }
}
