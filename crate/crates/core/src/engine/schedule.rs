//! Unfold schedules: how many times each physical layer runs.
//!
//! A schedule is valid when every layer runs at least once, layers outside
//! the foldable mask run exactly once, and the repeat counts of foldable
//! layers differ by at most one. A layer may therefore reach `k + 1`
//! executions only while every other foldable layer sits at `k` or `k + 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// Which physical layers may be repeated. Text form: one character per
/// layer, `u` (unfoldable, may repeat) or `f` (fixed, runs once).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FoldMask(Vec<bool>);

impl FoldMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    /// Only the last `m` of `n` layers may repeat.
    pub fn last(n: usize, m: usize) -> Self {
        Self((0..n).map(|i| i + m >= n).collect())
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn foldable(&self, layer: usize) -> bool {
        self.0[layer]
    }

    pub fn foldable_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// The mask restricted to the given layers, in order.
    pub fn select(&self, layers: &[usize]) -> Self {
        Self(layers.iter().map(|&i| self.0[i]).collect())
    }
}

impl FromStr for FoldMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                'u' | 'U' => Ok(true),
                'f' | 'F' => Ok(false),
                other => Err(Error::invalid(format!(
                    "mask character {other:?} is neither 'u' nor 'f'"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl fmt::Display for FoldMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "u" } else { "f" })?;
        }
        Ok(())
    }
}

impl TryFrom<String> for FoldMask {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FoldMask> for String {
    fn from(m: FoldMask) -> String {
        m.to_string()
    }
}

/// The clause of the schedule invariant that failed.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ScheduleViolation {
    #[error("empty schedule")]
    Empty,
    #[error("length mismatch: {repeats} repeats for a {mask}-layer mask")]
    LengthMismatch { repeats: usize, mask: usize },
    #[error("zero repeat at layer {layer}")]
    ZeroRepeat { layer: usize },
    #[error("fixed layer repeated: layer {layer} is not foldable but repeats {repeats} times")]
    FixedLayerRepeated { layer: usize, repeats: usize },
    #[error("balance rule: foldable repeats span {min}..{max}")]
    BalanceRule { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct UnfoldSchedule {
    repeats: Vec<usize>,
    mask: FoldMask,
}

impl UnfoldSchedule {
    /// Builds and validates a schedule.
    pub fn new(repeats: Vec<usize>, mask: FoldMask) -> Result<Self, ScheduleViolation> {
        let s = Self { repeats, mask };
        validate_schedule(&s)?;
        Ok(s)
    }

    /// Builds without validation; see [`validate_schedule`].
    pub fn unchecked(repeats: Vec<usize>, mask: FoldMask) -> Self {
        Self { repeats, mask }
    }

    /// Every layer once.
    pub fn seed(mask: FoldMask) -> Self {
        Self {
            repeats: vec![1; mask.len()],
            mask,
        }
    }

    /// Parses the comma-separated repeats form, e.g. `"1,1,2,2"`.
    pub fn parse(text: &str, mask: FoldMask) -> Result<Self> {
        let repeats = text
            .split(',')
            .map(|t| {
                t.trim().parse::<usize>().map_err(|_| {
                    Error::invalid(format!("bad repeat count {t:?} in schedule {text:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(repeats, mask)?)
    }

    pub fn repeats(&self) -> &[usize] {
        &self.repeats
    }

    pub fn mask(&self) -> &FoldMask {
        &self.mask
    }

    pub fn physical_layers(&self) -> usize {
        self.repeats.len()
    }

    pub fn logical_depth(&self) -> usize {
        self.repeats.iter().sum()
    }

    /// Physical layer index at each logical position. Repeats of a layer
    /// are consecutive: `[2, 1]` runs `0, 0, 1`.
    pub fn layer_sequence(&self) -> Vec<usize> {
        self.repeats
            .iter()
            .enumerate()
            .flat_map(|(i, &t)| std::iter::repeat_n(i, t))
            .collect()
    }
}

impl fmt::Display for UnfoldSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.repeats.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

pub fn validate_schedule(s: &UnfoldSchedule) -> Result<(), ScheduleViolation> {
    if s.repeats.is_empty() {
        return Err(ScheduleViolation::Empty);
    }
    if s.repeats.len() != s.mask.len() {
        return Err(ScheduleViolation::LengthMismatch {
            repeats: s.repeats.len(),
            mask: s.mask.len(),
        });
    }
    let mut lo = usize::MAX;
    let mut hi = 0;
    for (layer, &t) in s.repeats.iter().enumerate() {
        if t == 0 {
            return Err(ScheduleViolation::ZeroRepeat { layer });
        }
        if !s.mask.foldable(layer) {
            if t != 1 {
                return Err(ScheduleViolation::FixedLayerRepeated { layer, repeats: t });
            }
            continue;
        }
        lo = lo.min(t);
        hi = hi.max(t);
    }
    if hi > 0 && hi - lo > 1 {
        return Err(ScheduleViolation::BalanceRule { min: lo, max: hi });
    }
    Ok(())
}

/// Base repeat level and the number of foldable layers that get one more.
fn split_extra(n_p: usize, depth: usize, mask: &FoldMask) -> Result<(usize, usize, usize)> {
    let unreachable = || Error::DepthUnreachable {
        physical: n_p,
        depth,
        foldable: mask.foldable_count(),
    };
    if n_p == 0 || mask.len() != n_p || depth < n_p {
        return Err(unreachable());
    }
    let m = mask.foldable_count();
    let extra = depth - n_p;
    if m == 0 {
        return if extra == 0 {
            Ok((1, 0, 0))
        } else {
            Err(unreachable())
        };
    }
    Ok((1 + extra / m, extra % m, m))
}

/// Every valid schedule of `n_p` layers reaching `depth`, in lexicographic
/// order of the repeat vectors.
pub fn enumerate_schedules(
    n_p: usize,
    depth: usize,
    mask: &FoldMask,
) -> Result<Vec<UnfoldSchedule>> {
    let (base, bumped, m) = split_extra(n_p, depth, mask)?;
    let foldable: Vec<usize> = (0..n_p).filter(|&i| mask.foldable(i)).collect();

    let mut out = Vec::new();
    let mut chosen: Vec<usize> = (0..bumped).collect();
    loop {
        let mut repeats = vec![1; n_p];
        for &layer in &foldable {
            repeats[layer] = base;
        }
        for &c in &chosen {
            repeats[foldable[c]] = base + 1;
        }
        out.push(UnfoldSchedule::unchecked(repeats, mask.clone()));
        if !next_combination(&mut chosen, m) {
            break;
        }
    }
    out.sort_by(|a, b| a.repeats.cmp(&b.repeats));
    Ok(out)
}

/// Advances a sorted `k`-subset of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of valid schedules; zero when `depth` is unreachable.
pub fn count_schedules(n_p: usize, depth: usize, mask: &FoldMask) -> u128 {
    match split_extra(n_p, depth, mask) {
        Ok((_, bumped, m)) if bumped > 0 => binomial(m, bumped),
        Ok(_) => 1,
        Err(_) => 0,
    }
}

/// Depths in `n_p..=max_depth` that some valid schedule reaches.
pub fn supported_depths(n_p: usize, max_depth: usize, mask: &FoldMask) -> Vec<usize> {
    (n_p..=max_depth)
        .filter(|&d| count_schedules(n_p, d, mask) > 0)
        .collect()
}

/// The canonical schedule for a depth: extra repeats go to the last
/// foldable layers.
pub fn default_schedule(n_p: usize, depth: usize, mask: &FoldMask) -> Result<UnfoldSchedule> {
    let (base, bumped, _) = split_extra(n_p, depth, mask)?;
    let mut repeats = vec![1; n_p];
    let mut remaining = bumped;
    for layer in (0..n_p).rev() {
        if !mask.foldable(layer) {
            continue;
        }
        repeats[layer] = base;
        if remaining > 0 {
            repeats[layer] += 1;
            remaining -= 1;
        }
    }
    Ok(UnfoldSchedule::unchecked(repeats, mask.clone()))
}
