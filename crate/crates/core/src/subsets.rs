//! Easy / Challenging / Difficult partition by the rank of the hard label
//! inside the soft-label.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;
use crate::model::{Emotion, NUM_EMOTIONS};
use crate::scoring::SoftLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    Easy,
    Challenging,
    Difficult,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Easy, Subset::Challenging, Subset::Difficult];

    pub fn from_rank(rank: usize) -> Subset {
        match rank {
            1 => Subset::Easy,
            2 | 3 => Subset::Challenging,
            _ => Subset::Difficult,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subset::Easy => "Easy",
            Subset::Challenging => "Challenging",
            Subset::Difficult => "Difficult",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// 1-based rank of `emotion` when the soft-label is sorted descending, equal
/// values ordered by ascending emotion index.
pub fn rank_of(sl: &SoftLabel, emotion: Emotion) -> usize {
    let v = sl.values();
    let target = v[emotion.index()];
    1 + (0..NUM_EMOTIONS)
        .filter(|&j| v[j] > target || (v[j] == target && j < emotion.index()))
        .count()
}

/// Rank of every element (1 = largest), same tie rule as [`rank_of`].
pub fn ranks(sl: &SoftLabel) -> [usize; NUM_EMOTIONS] {
    std::array::from_fn(|i| rank_of(sl, Emotion::ALL[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Categorization {
    pub subset: Subset,
    pub hard_rank: usize,
}

pub fn categorize(sl: &SoftLabel, hard: Emotion) -> Categorization {
    let hard_rank = rank_of(sl, hard);
    Categorization {
        subset: Subset::from_rank(hard_rank),
        hard_rank,
    }
}

/// One line of `subsets.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetAssignment {
    pub image_id: String,
    pub hard_label: Emotion,
    pub subset: Subset,
    pub hard_rank: usize,
}

impl SubsetAssignment {
    pub fn new(image_id: impl Into<String>, sl: &SoftLabel, hard: Emotion) -> SubsetAssignment {
        let c = categorize(sl, hard);
        SubsetAssignment {
            image_id: image_id.into(),
            hard_label: hard,
            subset: c.subset,
            hard_rank: c.hard_rank,
        }
    }
}

/// Per-emotion × per-subset counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub kind: String,
    /// `counts[emotion][subset]`.
    pub counts: [[usize; 3]; NUM_EMOTIONS],
}

impl DistributionReport {
    pub const KIND: &'static str = "distribution";

    pub fn emotion_total(&self, e: Emotion) -> usize {
        self.counts[e.index()].iter().sum()
    }

    pub fn subset_total(&self, s: Subset) -> usize {
        self.counts.iter().map(|row| row[s as usize]).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn count(&self, e: Emotion, s: Subset) -> usize {
        self.counts[e.index()][s as usize]
    }

    /// Share of emotion `e` falling in subset `s`, in percent.
    pub fn percent(&self, e: Emotion, s: Subset) -> Option<f64> {
        let total = self.emotion_total(e);
        (total > 0).then(|| 100.0 * self.count(e, s) as f64 / total as f64)
    }

    pub fn overall_percent(&self, s: Subset) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| 100.0 * self.subset_total(s) as f64 / total as f64)
    }

    /// Markdown table: one column per emotion plus an overall column; rows
    /// All / Easy / Challenging / Difficult with `count (pct%)` cells.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| |");
        for e in Emotion::ALL {
            out.push_str(&format!(" {e} |"));
        }
        out.push_str(" Overall |\n|---|");
        out.push_str(&"---|".repeat(NUM_EMOTIONS + 1));
        out.push('\n');
        out.push_str("| All |");
        for e in Emotion::ALL {
            out.push_str(&format!(" {} |", group_thousands(self.emotion_total(e))));
        }
        out.push_str(&format!(" {} |\n", group_thousands(self.total())));
        for s in Subset::ALL {
            out.push_str(&format!("| {s} |"));
            for e in Emotion::ALL {
                out.push_str(&format!(" {} |", count_cell(self.count(e, s), self.percent(e, s))));
            }
            out.push_str(&format!(
                " {} |\n",
                count_cell(self.subset_total(s), self.overall_percent(s))
            ));
        }
        out
    }
}

fn count_cell(count: usize, pct: Option<f64>) -> String {
    match pct {
        Some(p) => format!("{} ({:.2}%)", group_thousands(count), p),
        None => format!("{} (n/a)", group_thousands(count)),
    }
}

/// `115934` -> `115,934`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn distribution_report(subsets: &[Subset], hard_labels: &[Emotion]) -> Result<DistributionReport, MetricsError> {
    if subsets.len() != hard_labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: subsets.len(),
            right: hard_labels.len(),
        });
    }
    let mut counts = [[0usize; 3]; NUM_EMOTIONS];
    for (s, e) in subsets.iter().zip(hard_labels) {
        counts[e.index()][*s as usize] += 1;
    }
    Ok(DistributionReport {
        kind: DistributionReport::KIND.to_string(),
        counts,
    })
}

/// Convenience over a slice of assignments.
pub fn distribution_of(assignments: &[SubsetAssignment]) -> DistributionReport {
    let subsets: Vec<Subset> = assignments.iter().map(|a| a.subset).collect();
    let hard: Vec<Emotion> = assignments.iter().map(|a| a.hard_label).collect();
    distribution_report(&subsets, &hard).expect("aligned by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sl(v: [f64; 8]) -> SoftLabel {
        SoftLabel::new(v).unwrap()
    }

    #[test]
    fn argmax_is_easy() {
        let s = sl([0.1, 0.9, 0.3, 0.0, 0.0, 0.0, 0.2, 0.0]);
        assert_eq!(categorize(&s, Emotion::Happy), Categorization { subset: Subset::Easy, hard_rank: 1 });
    }

    #[test]
    fn rank_three_is_challenging() {
        let s = sl([0.5, 0.4, 0.3, 0.1, 0.1, 0.1, 0.1, 0.1]);
        assert_eq!(categorize(&s, Emotion::Sad), Categorization { subset: Subset::Challenging, hard_rank: 3 });
    }

    #[test]
    fn tie_broken_by_index() {
        let s = sl([0.5, 0.4, 0.3, 0.1, 0.1, 0.1, 0.1, 0.1]);
        assert_eq!(categorize(&s, Emotion::Surprise), Categorization { subset: Subset::Difficult, hard_rank: 4 });
        assert_eq!(rank_of(&s, Emotion::Contempt), 8);
    }

    #[test]
    fn single_easy_happy() {
        let r = distribution_report(&[Subset::Easy], &[Emotion::Happy]).unwrap();
        assert_eq!(r.count(Emotion::Happy, Subset::Easy), 1);
        assert_eq!(r.percent(Emotion::Happy, Subset::Easy), Some(100.0));
        assert_eq!(r.percent(Emotion::Sad, Subset::Easy), None);
    }

    #[test]
    fn planted_percentages() {
        // Happy: 6 easy, 3 challenging, 1 difficult; Fear: 1 of each.
        let mut subsets = vec![Subset::Easy; 6];
        subsets.extend([Subset::Challenging; 3]);
        subsets.push(Subset::Difficult);
        let mut hard = vec![Emotion::Happy; 10];
        subsets.extend(Subset::ALL);
        hard.extend([Emotion::Fear; 3]);
        let r = distribution_report(&subsets, &hard).unwrap();
        assert_eq!(r.percent(Emotion::Happy, Subset::Easy), Some(60.0));
        assert_eq!(r.percent(Emotion::Happy, Subset::Challenging), Some(30.0));
        assert_eq!(r.percent(Emotion::Happy, Subset::Difficult), Some(10.0));
        assert_eq!(r.subset_total(Subset::Easy), 7);
        assert_eq!(r.total(), 13);
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            distribution_report(&[Subset::Easy], &[]),
            Err(MetricsError::LengthMismatch { left: 1, right: 0 })
        );
    }

    #[test]
    fn markdown_cell_style() {
        let mut counts = [[0usize; 3]; 8];
        counts[1] = [115_934, 11_835, 6_646];
        let r = DistributionReport { kind: DistributionReport::KIND.into(), counts };
        let md = r.to_markdown();
        assert!(md.contains("115,934 (86.25%)"), "{md}");
        assert!(md.contains("| All |"));
        assert!(md.lines().next().unwrap().contains("Overall"));
    }

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000), "1,000");
        assert_eq!(group_thousands(287_651), "287,651");
        assert_eq!(group_thousands(1_234_567), "1,234,567");
    }

    proptest! {
        #[test]
        fn ranks_are_a_permutation(v in proptest::array::uniform8(0.0f64..=1.0)) {
            let mut r = ranks(&sl(v)).to_vec();
            r.sort();
            prop_assert_eq!(r, (1..=8).collect::<Vec<_>>());
        }

        #[test]
        fn invariant_under_monotone_transform(v in proptest::array::uniform8(0.0f64..=1.0), hard in 0usize..8) {
            let e = Emotion::from_index(hard).unwrap();
            let squashed = v.map(|x| x.powi(3) * 0.5 + 0.1);
            prop_assert_eq!(categorize(&sl(v), e), categorize(&sl(squashed), e));
        }

        #[test]
        fn partition_is_exhaustive(labels in proptest::collection::vec((proptest::array::uniform8(0.0f64..=1.0), 0usize..8), 0..200)) {
            let assignments: Vec<SubsetAssignment> = labels
                .iter()
                .enumerate()
                .map(|(i, (v, h))| SubsetAssignment::new(i.to_string(), &sl(*v), Emotion::from_index(*h).unwrap()))
                .collect();
            let r = distribution_of(&assignments);
            prop_assert_eq!(r.total(), labels.len());
            for e in Emotion::ALL {
                let n = labels.iter().filter(|(_, h)| *h == e.index()).count();
                prop_assert_eq!(r.emotion_total(e), n);
            }
        }
    }
}
