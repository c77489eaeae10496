use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EfCategory, PatientRecord, Quality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold of each record, in record order.
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    /// Record indices in fold `f`.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.folds {
            s[f] += 1;
        }
        s
    }
}

/// Folds balanced over `(quality, EF category)` strata.
pub fn stratified_folds(records: &[PatientRecord], k: usize, seed: u64) -> Result<FoldAssignment> {
    let strata: Vec<(Quality, EfCategory)> = records.iter().map(|r| (r.quality, r.ef_category)).collect();
    stratified_folds_by(&strata, k, seed)
}

/// Shuffles each stratum with the seed, then deals strata in order to folds
/// `0, 1, ..., k-1, 0, ...` with one counter running across strata, so fold
/// sizes and per-stratum fold counts each differ by at most one.
pub fn stratified_folds_by<S: Ord + Clone>(strata: &[S], k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = strata.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let mut groups: BTreeMap<S, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        groups.entry(s.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; n];
    let mut next = 0;
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldAssignment { k, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_hundred_records_ten_folds() {
        let strata: Vec<u8> = (0..500).map(|i| ((i * 7) % 9) as u8).collect();
        let f = stratified_folds_by(&strata, 10, 1).unwrap();
        assert_eq!(f.sizes(), vec![50; 10]);
    }

    #[test]
    fn thirty_records_nine_strata() {
        let strata: Vec<u8> = (0..30).map(|i| (i % 9) as u8).collect();
        let f = stratified_folds_by(&strata, 10, 4).unwrap();
        for fold in 0..10 {
            let m = f.members(fold);
            assert_eq!(m.len(), 3);
            let mut s: Vec<u8> = m.iter().map(|&i| strata[i]).collect();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
    }

    #[test]
    fn bad_k() {
        assert!(matches!(
            stratified_folds_by(&[1, 2], 3, 0),
            Err(Error::InvalidK { k: 3, n: 2 })
        ));
        assert!(matches!(
            stratified_folds_by(&[1, 2], 0, 0),
            Err(Error::InvalidK { .. })
        ));
    }

    proptest! {
        #[test]
        fn balanced(strata in prop::collection::vec(0u8..9, 1..200), k in 1usize..12, seed in any::<u64>()) {
            prop_assume!(k <= strata.len());
            let f = stratified_folds_by(&strata, k, seed).unwrap();
            prop_assert_eq!(f.folds.len(), strata.len());
            let sizes = f.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for s in 0u8..9 {
                let total = strata.iter().filter(|&&x| x == s).count();
                let even = total.div_ceil(k);
                for fold in 0..k {
                    let c = f.members(fold).iter().filter(|&&i| strata[i] == s).count();
                    prop_assert!(c.abs_diff(even) <= 1);
                }
            }
            prop_assert_eq!(f.clone(), stratified_folds_by(&strata, k, seed).unwrap());
        }
    }
}
