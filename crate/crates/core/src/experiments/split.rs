use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result, StanceInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    InTarget,
    CrossTarget,
}

fn default_ratios() -> [f64; 3] {
    [0.70, 0.15, 0.15]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    /// Cross-target assignment; absent means [`auto_partition`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<BTreeMap<String, Split>>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn in_target(seed: u64) -> Self {
        Self {
            mode: SplitMode::InTarget,
            ratios: default_ratios(),
            partition: None,
            seed,
        }
    }

    pub fn apply(&self, instances: &[StanceInstance]) -> Result<SplitIndices> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ExperimentError::Contract(format!(
                "split ratios {:?} must be nonnegative and sum to 1",
                self.ratios
            )));
        }
        match self.mode {
            SplitMode::InTarget => Ok(in_target_split(instances, self.ratios, self.seed)),
            SplitMode::CrossTarget => {
                let auto;
                let partition = match &self.partition {
                    Some(p) => p,
                    None => {
                        auto = auto_partition(instances, self.ratios);
                        &auto
                    }
                };
                cross_target_split(instances, partition)
            }
        }
    }
}

/// Instance positions per split, each list in ascending order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<usize> {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    fn sort(&mut self) {
        for s in Split::ALL {
            self.get_mut(s).sort_unstable();
        }
    }
}

/// Largest-remainder apportionment of `n` items, ties to the earlier split.
/// Strata of three or more items get at least one item in every split.
fn stratum_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    if n >= 3 {
        for i in 1..3 {
            if counts[i] == 0 && ratios[i] > 0.0 {
                let donor = (0..3)
                    .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                    .expect("three splits");
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Stratified by (target, label). Each stratum is shuffled with its own
/// seeded stream; strata smaller than three go entirely to train.
pub fn in_target_split(instances: &[StanceInstance], ratios: [f64; 3], seed: u64) -> SplitIndices {
    let mut strata: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        strata
            .entry((inst.target.as_str(), inst.label))
            .or_default()
            .push(i);
    }
    let mut out = SplitIndices::default();
    for (stream, ((target, label), mut members)) in strata.into_iter().enumerate() {
        if members.len() < 3 {
            log::warn!(
                "stratum ({target:?}, label {label}) has {} instance(s); placing in train",
                members.len()
            );
            out.train.extend(members);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        members.shuffle(&mut rng);
        let [a, b, _] = stratum_counts(members.len(), ratios);
        out.train.extend_from_slice(&members[..a]);
        out.dev.extend_from_slice(&members[a..a + b]);
        out.test.extend_from_slice(&members[a + b..]);
    }
    out.sort();
    out
}

pub fn cross_target_split(
    instances: &[StanceInstance],
    partition: &BTreeMap<String, Split>,
) -> Result<SplitIndices> {
    let mut out = SplitIndices::default();
    for (i, inst) in instances.iter().enumerate() {
        let split = partition
            .get(&inst.target)
            .ok_or_else(|| ExperimentError::UnpartitionedTarget(inst.target.clone()))?;
        out.get_mut(*split).push(i);
    }
    Ok(out)
}

/// Greedy assignment of whole targets: largest target first (ties by name),
/// each to the split furthest below its share of the instances (ties to the
/// earlier split).
pub fn auto_partition(instances: &[StanceInstance], ratios: [f64; 3]) -> BTreeMap<String, Split> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in instances {
        *counts.entry(inst.target.as_str()).or_default() += 1;
    }
    let mut targets: Vec<(&str, usize)> = counts.into_iter().collect();
    targets.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let total = instances.len() as f64;
    let mut filled = [0usize; 3];
    let mut out = BTreeMap::new();
    for (target, n) in targets {
        let deficit = |i: usize| ratios[i] * total - filled[i] as f64;
        let best = (0..3).fold(0, |b, i| if deficit(i) > deficit(b) { i } else { b });
        filled[best] += n;
        out.insert(target.to_string(), Split::ALL[best]);
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn inst(i: usize, target: &str, label: usize) -> StanceInstance {
        StanceInstance {
            id: i.to_string(),
            text: format!("text {i}"),
            target: target.into(),
            label,
            contexts: None,
        }
    }

    fn corpus(sizes: &[(usize, usize)]) -> Vec<StanceInstance> {
        let mut out = Vec::new();
        for (t, &(target_sizes, labels)) in sizes.iter().enumerate() {
            for i in 0..target_sizes {
                out.push(inst(out.len(), &format!("t{t}"), i % labels.max(1)));
            }
        }
        out
    }

    fn is_partition(s: &SplitIndices, n: usize) -> bool {
        let mut all: Vec<usize> = Split::ALL.iter().flat_map(|&x| s.get(x).to_vec()).collect();
        all.sort_unstable();
        all == (0..n).collect::<Vec<_>>()
    }

    #[test]
    fn exact_ratio_for_one_stratum() {
        let data = corpus(&[(100, 1)]);
        let s = in_target_split(&data, default_ratios(), 0);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (70, 15, 15));
    }

    #[test]
    fn seeds_change_assignment_reproducibly() {
        let data = corpus(&[(40, 2), (30, 3)]);
        let a = in_target_split(&data, default_ratios(), 1);
        assert_eq!(a, in_target_split(&data, default_ratios(), 1));
        assert_ne!(a, in_target_split(&data, default_ratios(), 2));
    }

    #[test]
    fn tiny_strata_go_to_train() {
        let data = corpus(&[(2, 1)]);
        let s = in_target_split(&data, default_ratios(), 0);
        assert_eq!(s.train, vec![0, 1]);
    }

    #[test]
    fn explicit_cross_target_partition() {
        let data = corpus(&[(3, 1), (2, 1), (4, 1)]);
        let p: BTreeMap<String, Split> = [
            ("t0", Split::Train),
            ("t1", Split::Dev),
            ("t2", Split::Test),
        ]
        .into_iter()
        .map(|(t, s)| (t.to_string(), s))
        .collect();
        let s = cross_target_split(&data, &p).unwrap();
        assert_eq!(s.train, vec![0, 1, 2]);
        assert_eq!(s.dev, vec![3, 4]);
        assert_eq!(s.test, vec![5, 6, 7, 8]);
        let mut partial = p.clone();
        partial.remove("t1");
        assert!(
            matches!(cross_target_split(&data, &partial), Err(ExperimentError::UnpartitionedTarget(t)) if t == "t1")
        );
    }

    /// Independent greedy: repeatedly give the next-largest target to the
    /// split whose filled fraction lags its ratio the most.
    fn oracle(sizes: &[usize], ratios: [f64; 3]) -> Vec<usize> {
        let total: usize = sizes.iter().sum();
        let mut idx: Vec<usize> = (0..sizes.len()).collect();
        idx.sort_by(|&a, &b| {
            sizes[b]
                .cmp(&sizes[a])
                .then(format!("t{a}").cmp(&format!("t{b}")))
        });
        let mut filled = [0.0; 3];
        let mut assign = vec![0; sizes.len()];
        for i in idx {
            let mut best = 0;
            for s in 1..3 {
                if ratios[s] * total as f64 - filled[s] > ratios[best] * total as f64 - filled[best]
                {
                    best = s;
                }
            }
            filled[best] += sizes[i] as f64;
            assign[i] = best;
        }
        assign
    }

    proptest! {
        #[test]
        fn in_target_is_stratified_partition(sizes in prop::collection::vec((3usize..40, 1usize..4), 1..6), seed in 0u64..1000) {
            let data = corpus(&sizes);
            let s = in_target_split(&data, default_ratios(), seed);
            prop_assert!(is_partition(&s, data.len()));
            let mut strata: BTreeMap<(String, usize), [usize; 3]> = BTreeMap::new();
            for (k, split) in Split::ALL.iter().enumerate() {
                for &i in s.get(*split) {
                    strata.entry((data[i].target.clone(), data[i].label)).or_default()[k] += 1;
                }
            }
            for counts in strata.values() {
                let n: usize = counts.iter().sum();
                if n >= 3 {
                    prop_assert!(counts.iter().all(|&c| c >= 1));
                }
                if n >= 7 {
                    for (c, r) in counts.iter().zip(default_ratios()) {
                        prop_assert!((*c as f64 - r * n as f64).abs() <= 1.0, "{counts:?}");
                    }
                }
            }
            let mut per_target: BTreeMap<&str, usize> = BTreeMap::new();
            for (key, counts) in &strata {
                let n: usize = counts.iter().sum();
                let e = per_target.entry(key.0.as_str()).or_default();
                *e = (*e).max(n);
            }
            for (target, largest) in per_target {
                if largest >= 3 {
                    for split in Split::ALL {
                        prop_assert!(s.get(split).iter().any(|&i| data[i].target == target));
                    }
                }
            }
        }

        #[test]
        fn auto_partition_is_target_exclusive(sizes in prop::collection::vec(1usize..30, 1..12)) {
            let data = corpus(&sizes.iter().map(|&n| (n, 1)).collect::<Vec<_>>());
            let p = auto_partition(&data, default_ratios());
            let s = cross_target_split(&data, &p).unwrap();
            prop_assert!(is_partition(&s, data.len()));
            let mut seen: BTreeMap<String, Split> = BTreeMap::new();
            for split in Split::ALL {
                for &i in s.get(split) {
                    let prev = seen.insert(data[i].target.clone(), split);
                    prop_assert!(prev.is_none() || prev == Some(split));
                }
            }
            let want = oracle(&sizes, default_ratios());
            let mismatched = (0..sizes.len()).filter(|&t| Split::ALL[want[t]] != p[&format!("t{t}")]).count();
            prop_assert!(mismatched <= 1);
        }
    }
}
