use rand::seq::index;
use rand::Rng;

use super::vocab::{is_reserved, MASK, PAD};
use crate::error::{Error, Result};
use crate::util::{rng, seed_mix};

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Token matrix after masking; `labels` holds `-1` where nothing is predicted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<Vec<u32>>,
    pub labels: Vec<Vec<i64>>,
    pub lengths: Vec<usize>,
}

/// Seed of row `index` under batch seed `seed`.
pub fn row_seed(seed: u64, index: u64) -> u64 {
    seed_mix(seed, index)
}

/// Number of positions labeled in a row with `maskable` candidates.
pub fn mask_count(maskable: usize, rate: f64) -> usize {
    if maskable == 0 {
        return 0;
    }
    ((rate * maskable as f64).round() as usize).clamp(1, maskable)
}

/// Masks one row: chosen positions become `[MASK]` 80% of the time, a
/// random non-reserved token 10%, and stay unchanged 10%. Reserved tokens
/// are never chosen.
pub fn mask_row(row: &[u32], rate: f64, vocab_size: usize, seed: u64) -> Result<(Vec<u32>, Vec<i64>)> {
    check_rate(rate)?;
    let candidates: Vec<usize> = (0..row.len()).filter(|&i| !is_reserved(row[i])).collect();
    let count = mask_count(candidates.len(), rate);
    let mut r = rng(seed);
    let mut chosen: Vec<usize> = index::sample(&mut r, candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    chosen.sort_unstable();

    let mut input = row.to_vec();
    let mut labels = vec![-1i64; row.len()];
    let first_plain = super::vocab::RESERVED.len() as u32;
    for pos in chosen {
        labels[pos] = row[pos] as i64;
        let roll: f64 = r.gen();
        if roll < 0.8 {
            input[pos] = MASK;
        } else if roll < 0.9 && (vocab_size as u32) > first_plain {
            input[pos] = r.gen_range(first_plain..vocab_size as u32);
        }
    }
    Ok((input, labels))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Contract(format!("mask rate {rate} outside (0, 1)")));
    }
    Ok(())
}

/// Masks every row with a seed derived from `(seed, row index)`; rows are
/// right-padded with `[PAD]` to the longest row.
pub fn mask_for_mlm(batch: &[Vec<u32>], rate: f64, vocab_size: usize, seed: u64) -> Result<MaskedBatch> {
    check_rate(rate)?;
    let width = batch.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = MaskedBatch {
        input_ids: Vec::with_capacity(batch.len()),
        labels: Vec::with_capacity(batch.len()),
        lengths: Vec::with_capacity(batch.len()),
    };
    for (i, row) in batch.iter().enumerate() {
        let (mut input, mut labels) = mask_row(row, rate, vocab_size, row_seed(seed, i as u64))?;
        input.resize(width, PAD);
        labels.resize(width, -1);
        out.input_ids.push(input);
        out.labels.push(labels);
        out.lengths.push(row.len());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::{CLS, SEP};
    use proptest::prelude::*;

    #[test]
    fn twenty_maskable_tokens_get_three_labels() {
        let mut row = vec![CLS];
        row.extend(10..30u32);
        row.push(SEP);
        let b = mask_for_mlm(&[row], 0.15, 100, 9).unwrap();
        assert_eq!(b.labels[0].iter().filter(|&&l| l >= 0).count(), 3);
    }

    #[test]
    fn same_seed_same_mask() {
        let rows = vec![(6..40u32).collect::<Vec<_>>(), (50..60u32).collect()];
        let a = mask_for_mlm(&rows, 0.15, 100, 4).unwrap();
        let b = mask_for_mlm(&rows, 0.15, 100, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_rate() {
        assert!(mask_for_mlm(&[vec![7, 8]], 0.0, 10, 1).is_err());
        assert!(mask_for_mlm(&[vec![7, 8]], 1.0, 10, 1).is_err());
    }

    #[test]
    fn tiny_row_still_gets_one_label() {
        let (_, labels) = mask_row(&[CLS, 9, 10], 0.15, 50, 3).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l >= 0).count(), 1);
    }

    proptest! {
        #[test]
        fn masking_respects_labels_and_specials(
            body in prop::collection::vec(6u32..80, 0..50),
            seed in any::<u64>(),
        ) {
            let mut row = vec![CLS];
            row.extend(body.iter().copied());
            row.push(SEP);
            let (input, labels) = mask_row(&row, 0.15, 80, seed).unwrap();
            prop_assert_eq!(labels.iter().filter(|&&l| l >= 0).count(), mask_count(body.len(), 0.15));
            for i in 0..row.len() {
                if labels[i] < 0 {
                    prop_assert_eq!(input[i], row[i]);
                } else {
                    prop_assert_eq!(labels[i], row[i] as i64);
                    prop_assert!(!is_reserved(row[i]));
                }
            }
        }
    }
}
