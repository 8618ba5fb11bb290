//! Imaging modalities and nonempty modality subsets.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One imaging channel. The declaration order is the canonical order used
/// for token layout, file naming and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T1")]
    T1,
    #[serde(rename = "T2")]
    T2,
    #[serde(rename = "FLAIR")]
    Flair,
    #[serde(rename = "PET")]
    Pet,
}

impl Modality {
    pub const COUNT: usize = 4;
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T2, Modality::Flair, Modality::Pet];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
            Modality::Pet => "PET",
        }
    }

    /// Lower-case name used in parameter paths.
    pub fn key(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
            Modality::Pet => "pet",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Data(alloc::format!("unknown modality '{s}'")))
    }

    pub fn is_mri(self) -> bool {
        self != Modality::Pet
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A subset of the four modalities, stored as a bitmask.
///
/// Most APIs require the set to be nonempty; that is checked where it
/// matters rather than encoded in the type, since empty sets are useful as
/// intermediate values.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const FULL: ModalitySet = ModalitySet(0b1111);

    pub fn from_bits(bits: u8) -> ModalitySet {
        ModalitySet(bits & 0b1111)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn single(m: Modality) -> ModalitySet {
        ModalitySet(1 << m.index())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn with(self, m: Modality) -> ModalitySet {
        ModalitySet(self.0 | (1 << m.index()))
    }

    pub fn without(self, m: Modality) -> ModalitySet {
        ModalitySet(self.0 & !(1 << m.index()))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection(self, other: ModalitySet) -> ModalitySet {
        ModalitySet(self.0 & other.0)
    }

    pub fn is_subset_of(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn has_mri(self) -> bool {
        self.0 & 0b0111 != 0
    }

    /// Both an MRI sequence and PET are present.
    pub fn is_paired(self) -> bool {
        self.has_mri() && self.contains(Modality::Pet)
    }

    /// Members in canonical order.
    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn to_vec(self) -> Vec<Modality> {
        self.iter().collect()
    }

    /// All 15 nonempty subsets, by increasing bitmask.
    pub fn all_nonempty() -> impl Iterator<Item = ModalitySet> {
        (1u8..16).map(ModalitySet)
    }

    /// Parses `"T1+FLAIR+PET"` (order-insensitive).
    pub fn parse(s: &str) -> Result<ModalitySet> {
        let mut set = ModalitySet::EMPTY;
        for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            set = set.with(Modality::parse(part)?);
        }
        if set.is_empty() {
            return Err(Error::Data(alloc::format!("empty modality combination '{s}'")));
        }
        Ok(set)
    }

    pub fn label(self) -> String {
        let names: Vec<&str> = self.iter().map(Modality::name).collect();
        names.join("+")
    }
}

impl FromIterator<Modality> for ModalitySet {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        iter.into_iter().fold(ModalitySet::EMPTY, ModalitySet::with)
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.label())
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let list = Vec::<Modality>::deserialize(d)?;
        Ok(list.into_iter().collect())
    }
}

/// The five clinically common combinations used for test reporting, in
/// escalation order from a lone T1 to the full workup.
pub const DESIGNATED_COMBINATIONS: [ModalitySet; 5] = [
    ModalitySet(0b0001), // T1
    ModalitySet(0b0101), // T1+FLAIR
    ModalitySet(0b0111), // T1+T2+FLAIR
    ModalitySet(0b1101), // T1+FLAIR+PET
    ModalitySet(0b1111), // T1+T2+FLAIR+PET
];

pub fn is_designated(set: ModalitySet) -> bool {
    DESIGNATED_COMBINATIONS.contains(&set)
}

/// Strict-subset relations among the designated combinations, as index pairs
/// `(smaller, larger)` into [`DESIGNATED_COMBINATIONS`].
pub fn designated_nesting() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in DESIGNATED_COMBINATIONS.iter().enumerate() {
        for (j, b) in DESIGNATED_COMBINATIONS.iter().enumerate() {
            if i != j && a.is_subset_of(*b) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Uniformly random nonempty subset of `observed`.
pub fn sample_modality_subset<R: rand::Rng + ?Sized>(observed: ModalitySet, rng: &mut R) -> Result<ModalitySet> {
    if observed.is_empty() {
        return Err(Error::Precondition("cannot sample a subset of an empty modality set".into()));
    }
    let members = observed.to_vec();
    let n = members.len() as u32;
    let code = rng.random_range(1u32..(1 << n));
    Ok(members
        .iter()
        .enumerate()
        .filter(|(i, _)| code & (1 << i) != 0)
        .map(|(_, m)| *m)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn canonical_order_and_labels() {
        let s = ModalitySet::parse("PET+T1+FLAIR").unwrap();
        assert_eq!(s.label(), "T1+FLAIR+PET");
        assert_eq!(s.to_vec(), [Modality::T1, Modality::Flair, Modality::Pet]);
        assert!(Modality::T1 < Modality::T2 && Modality::Flair < Modality::Pet);
        assert!(ModalitySet::parse("").is_err());
    }

    #[test]
    fn designated_labels() {
        let labels: Vec<String> = DESIGNATED_COMBINATIONS.iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["T1", "T1+FLAIR", "T1+T2+FLAIR", "T1+FLAIR+PET", "T1+T2+FLAIR+PET"]);
        let nest = designated_nesting();
        assert!(nest.contains(&(0, 1)) && nest.contains(&(1, 2)) && nest.contains(&(2, 4)));
        assert!(!nest.contains(&(2, 3)));
    }

    #[test]
    fn subset_sampling_singleton_and_empty() {
        let mut rng = stream(&[7]);
        let t1 = ModalitySet::single(Modality::T1);
        for _ in 0..100 {
            assert_eq!(sample_modality_subset(t1, &mut rng).unwrap(), t1);
        }
        assert!(matches!(
            sample_modality_subset(ModalitySet::EMPTY, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn subset_sampling_is_uniform() {
        let mut rng = stream(&[11]);
        let observed = ModalitySet::parse("T1+PET").unwrap();
        let mut counts = [0usize; 16];
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_modality_subset(observed, &mut rng).unwrap();
            assert!(s.is_subset_of(observed) && !s.is_empty());
            counts[s.bits() as usize] += 1;
        }
        for set in ["T1", "PET", "T1+PET"] {
            let f = counts[ModalitySet::parse(set).unwrap().bits() as usize] as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "{set}: {f}");
        }
    }

    #[test]
    fn subset_sampling_never_leaves_observed() {
        let mut rng = stream(&[12]);
        for observed in ModalitySet::all_nonempty() {
            for _ in 0..50 {
                let s = sample_modality_subset(observed, &mut rng).unwrap();
                assert!(s.is_subset_of(observed) && !s.is_empty());
            }
        }
    }
}
