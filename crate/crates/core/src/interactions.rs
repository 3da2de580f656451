//! Interaction instruments: products of (centered) candidate instruments over
//! index subsets, and the lower-order partialling design `V_k`.
//!
//! Canonical ordering everywhere: orders ascending, lexicographic within an
//! order. Indices are 1-based, matching the way instruments are named.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Binomial coefficient `C(n, k)`; saturates instead of overflowing.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// A set of distinct instrument indices, strictly increasing, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InteractionIndex(Vec<usize>);

impl InteractionIndex {
    pub fn new(subset: Vec<usize>, p: usize) -> Result<Self> {
        if subset.is_empty() || subset.len() > p {
            return Err(Error::domain(format!("interaction order {} outside 1..={p}", subset.len())));
        }
        if subset.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(format!("indices {subset:?} not strictly increasing")));
        }
        if subset[0] == 0 || *subset.last().unwrap() > p {
            return Err(Error::domain(format!("indices {subset:?} outside 1..={p}")));
        }
        Ok(Self(subset))
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    /// Product of `z_j - zeta_j` over the members.
    #[inline]
    pub fn centered_product(&self, z: &[f64], zeta: &[f64]) -> f64 {
        self.0.iter().map(|&j| z[j - 1] - zeta[j - 1]).product()
    }

    #[inline]
    pub fn raw_product(&self, z: &[f64]) -> f64 {
        self.0.iter().map(|&j| z[j - 1]).product()
    }
}

/// All size-`k` subsets of `1..=p` in lexicographic order.
pub fn enumerate_subsets(p: usize, k: usize) -> Result<Vec<InteractionIndex>> {
    if k < 1 || k > p {
        return Err(Error::domain(format!("order {k} outside 1..={p}")));
    }
    let mut out = Vec::with_capacity(binomial(p, k));
    let mut current: Vec<usize> = (1..=k).collect();
    loop {
        out.push(InteractionIndex(current.clone()));
        // advance to the next combination
        let mut i = k;
        while i > 0 && current[i - 1] == p - k + i {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        current[i - 1] += 1;
        for j in i..k {
            current[j] = current[j - 1] + 1;
        }
    }
    Ok(out)
}

/// `r(p, q)`: number of interactions of orders `2..=q`.
pub fn interaction_count(p: usize, q: usize) -> Result<usize> {
    if q < 2 || q > p {
        return Err(Error::domain(format!("maximum order {q} outside 2..={p}")));
    }
    Ok((2..=q).map(|k| binomial(p, k)).sum())
}

/// The ordered set of interaction indices defining the moment vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentSpec {
    p: usize,
    q: usize,
    indices: Vec<InteractionIndex>,
}

impl MomentSpec {
    /// Every interaction of orders `2..=q`.
    pub fn full(p: usize, q: usize) -> Result<Self> {
        interaction_count(p, q)?;
        let mut indices = Vec::new();
        for k in 2..=q {
            indices.extend(enumerate_subsets(p, k)?);
        }
        Ok(Self { p, q, indices })
    }

    /// A spec from explicit indices; they are put into canonical order.
    pub fn from_indices(p: usize, mut indices: Vec<InteractionIndex>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::domain("a moment spec needs at least one interaction"));
        }
        for idx in &indices {
            if idx.order() < 2 || *idx.members().last().unwrap() > p {
                return Err(Error::domain(format!("invalid interaction {:?} for p = {p}", idx.members())));
            }
        }
        indices.sort_by(|a, b| a.order().cmp(&b.order()).then_with(|| a.cmp(b)));
        indices.dedup();
        let q = indices.iter().map(|i| i.order()).max().unwrap();
        Ok(Self { p, q, indices })
    }

    pub fn from_index_lists(p: usize, lists: Vec<Vec<usize>>) -> Result<Self> {
        let indices = lists
            .into_iter()
            .map(|l| InteractionIndex::new(l, p))
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(p, indices)
    }

    /// Keep the components at `positions` (positions into this spec).
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let picked = positions.iter().map(|&t| self.indices[t].clone()).collect();
        Self::from_indices(self.p, picked)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Highest interaction order present.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[InteractionIndex] {
        &self.indices
    }

    /// Distinct orders present, ascending.
    pub fn orders(&self) -> Vec<usize> {
        let mut o: Vec<usize> = self.indices.iter().map(|i| i.order()).collect();
        o.dedup();
        o
    }

    /// Position of each of `other`'s indices inside `self`, if all present.
    pub fn positions_of(&self, other: &MomentSpec) -> Option<Vec<usize>> {
        other
            .indices
            .iter()
            .map(|idx| self.indices.iter().position(|x| x == idx))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.indices).expect("index lists serialize")
    }

    pub fn from_json(p: usize, json: &str) -> Result<Self> {
        let lists: Vec<Vec<usize>> = serde_json::from_str(json)?;
        Self::from_index_lists(p, lists)
    }
}

impl Serialize for MomentSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.indices.serialize(s)
    }
}

/// Centered interactions `prod_{j in subset} (z_j - zeta_j)` for every index of `spec`.
pub fn eval_centered(z: &[f64], zeta: &[f64], spec: &MomentSpec) -> Result<Vec<f64>> {
    if z.len() != spec.p() || zeta.len() != spec.p() {
        return Err(Error::domain(format!(
            "dimension mismatch: z has {}, zeta has {}, spec expects {}",
            z.len(),
            zeta.len(),
            spec.p()
        )));
    }
    Ok(spec.indices().iter().map(|idx| idx.centered_product(z, zeta)).collect())
}

/// Column count of `V_k`: intercept plus all raw interactions of orders `1..k`.
pub fn vk_width(p: usize, k: usize) -> usize {
    1 + (1..k).map(|j| binomial(p, j)).sum::<usize>()
}

/// One row of `V_k` for instrument vector `z`.
pub fn vk_row(z: &[f64], k: usize) -> Vec<f64> {
    let p = z.len();
    let mut row = Vec::with_capacity(vk_width(p, k));
    row.push(1.0);
    for order in 1..k {
        for idx in enumerate_subsets(p, order).expect("order < k <= p") {
            row.push(idx.raw_product(z));
        }
    }
    row
}

/// Partialling design `V_k = [1, I_1(Z), ..., I_{k-1}(Z)]`, one row per observation.
pub fn build_vk(dataset: &Dataset, k: usize) -> Result<DMatrix<f64>> {
    let p = dataset.p();
    if k < 2 || k > p {
        return Err(Error::domain(format!("partialling order {k} outside 2..={p}")));
    }
    let subsets: Vec<InteractionIndex> = (1..k)
        .map(|o| enumerate_subsets(p, o))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let width = 1 + subsets.len();
    let n = dataset.n();
    Ok(DMatrix::from_fn(n, width, |i, c| {
        if c == 0 {
            1.0
        } else {
            subsets[c - 1].raw_product(&dataset.get(i).z)
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use proptest::prelude::*;

    fn lists(v: &[InteractionIndex]) -> Vec<Vec<usize>> {
        v.iter().map(|i| i.members().to_vec()).collect()
    }

    #[test]
    fn subsets_of_three() {
        assert_eq!(lists(&enumerate_subsets(3, 2).unwrap()), vec![vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(lists(&enumerate_subsets(3, 3).unwrap()), vec![vec![1, 2, 3]]);
        assert_eq!(lists(&enumerate_subsets(4, 1).unwrap()), vec![vec![1], vec![2], vec![3], vec![4]]);
        assert!(enumerate_subsets(3, 4).is_err());
        assert!(enumerate_subsets(3, 0).is_err());
    }

    #[test]
    fn counts() {
        assert_eq!(interaction_count(3, 3).unwrap(), 4);
        assert_eq!(interaction_count(10, 2).unwrap(), 45);
        assert_eq!(interaction_count(20, 2).unwrap(), 190);
        assert_eq!(interaction_count(20, 3).unwrap(), 1330);
        assert!(interaction_count(3, 1).is_err());
        assert!(interaction_count(3, 4).is_err());
    }

    #[test]
    fn centered_values() {
        let spec = MomentSpec::full(2, 2).unwrap();
        assert_eq!(eval_centered(&[3.0, 5.0], &[1.0, 2.0], &spec).unwrap(), vec![6.0]);
        let spec = MomentSpec::full(4, 3).unwrap();
        let z = [0.3, -1.2, 2.0, 0.7];
        assert!(eval_centered(&z, &z, &spec).unwrap().iter().all(|&v| v == 0.0));
        let raw: Vec<f64> = spec.indices().iter().map(|i| i.raw_product(&z)).collect();
        assert_eq!(eval_centered(&z, &[0.0; 4], &spec).unwrap(), raw);
        assert!(eval_centered(&z[..3], &[0.0; 4], &spec).is_err());
    }

    #[test]
    fn vk_shapes() {
        let obs = vec![
            Observation::new(vec![2.0, 3.0], 0.0, 0.0, true),
            Observation::new(vec![1.0, 1.0], 0.0, 0.0, true),
        ];
        let ds = Dataset::new(obs).unwrap();
        let v = build_vk(&ds, 2).unwrap();
        assert_eq!(v.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(vk_width(3, 2), 4);
        assert_eq!(vk_width(3, 3), 7);
        assert!(build_vk(&ds, 1).is_err());
        assert!(build_vk(&ds, 3).is_err());
        assert_eq!(vk_row(&[2.0, 3.0], 2), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = MomentSpec::full(3, 3).unwrap();
        let json = spec.to_json();
        assert_eq!(json, "[[1,2],[1,3],[2,3],[1,2,3]]");
        assert_eq!(MomentSpec::from_json(3, &json).unwrap(), spec);
    }

    #[test]
    fn from_indices_canonicalizes() {
        let spec = MomentSpec::from_index_lists(4, vec![vec![1, 2, 3], vec![2, 4], vec![1, 3]]).unwrap();
        assert_eq!(spec.to_json(), "[[1,3],[2,4],[1,2,3]]");
        assert_eq!(spec.orders(), vec![2, 3]);
        assert!(MomentSpec::from_index_lists(4, vec![]).is_err());
        assert!(MomentSpec::from_index_lists(4, vec![vec![2]]).is_err());
    }

    #[test]
    fn centered_interactions_have_mean_zero() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = 4;
        let spec = MomentSpec::full(p, 3).unwrap();
        let n = 100_000;
        let mut sums = vec![0.0; spec.m()];
        for _ in 0..n {
            let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (s, v) in sums.iter_mut().zip(eval_centered(&z, &[0.0; 4], &spec).unwrap()) {
                *s += v;
            }
        }
        let band = 5.0 / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < band);
        }
    }

    proptest! {
        #[test]
        fn full_spec_size_and_order(p in 2usize..9, q_off in 0usize..3) {
            let q = (2 + q_off).min(p);
            let spec = MomentSpec::full(p, q).unwrap();
            prop_assert_eq!(spec.m(), interaction_count(p, q).unwrap());
            let z = vec![1.0; p];
            let ones = eval_centered(&z, &vec![0.0; p], &spec).unwrap();
            prop_assert_eq!(ones.len(), spec.m());
            prop_assert!(ones.iter().all(|&v| v == 1.0));
            for w in spec.indices().windows(2) {
                prop_assert!(w[0].order() < w[1].order() || (w[0].order() == w[1].order() && w[0] < w[1]));
            }
        }
    }
}
