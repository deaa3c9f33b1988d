//! The hierarchical group Ω_N and its tree of blocks.
//!
//! A point of Ω_N is a sequence of digits in `{0,…,N−1}` with finitely many
//! non-zero entries. Addition is digit-wise modulo `N`, and the ultrametric
//! distance between two points is the height of their most recent common
//! ancestor in the `N`-ary tree whose leaves are the points.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

// ── Leaves ───────────────────────────────────────────────────────────────────

/// A point of Ω_N stored as a canonical digit vector (no trailing zeros).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HierAddress {
    order: u32,
    digits: Vec<u32>,
}

impl HierAddress {
    /// Build an address from digits listed lowest coordinate first.
    pub fn new(order: u32, digits: Vec<u32>) -> Result<Self> {
        check_order(order)?;
        if let Some(&d) = digits.iter().find(|&&d| d >= order) {
            return invalid(format!("digit {d} out of range for N = {order}"));
        }
        let mut a = Self { order, digits };
        a.trim();
        Ok(a)
    }

    /// The neutral element.
    pub fn zero(order: u32) -> Result<Self> {
        check_order(order)?;
        Ok(Self { order, digits: Vec::new() })
    }

    pub(crate) fn from_digits_unchecked(order: u32, digits: Vec<u32>) -> Self {
        let mut a = Self { order, digits };
        a.trim();
        a
    }

    fn trim(&mut self) {
        while self.digits.last() == Some(&0) {
            self.digits.pop();
        }
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    /// Digit at coordinate `i` (zero beyond the stored support).
    #[inline]
    pub fn digit(&self, i: usize) -> u32 {
        self.digits.get(i).copied().unwrap_or(0)
    }

    /// Stored digits, lowest coordinate first, without trailing zeros.
    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    pub fn is_zero(&self) -> bool {
        self.digits.is_empty()
    }

    fn same_order(&self, other: &Self) -> Result<()> {
        if self.order != other.order {
            return Err(Error::MismatchedOrder { left: self.order, right: other.order });
        }
        Ok(())
    }

    /// Ultrametric distance: the least `k` such that all digits at positions
    /// `≥ k` agree.
    pub fn distance(&self, other: &Self) -> Result<usize> {
        self.same_order(other)?;
        Ok(digit_distance(&self.digits, &other.digits))
    }

    /// Digit-wise sum modulo `N`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_order(other)?;
        let len = self.digits.len().max(other.digits.len());
        let n = self.order;
        let digits = (0..len).map(|i| (self.digit(i) + other.digit(i)) % n).collect();
        Ok(Self::from_digits_unchecked(n, digits))
    }

    /// Additive inverse.
    pub fn neg(&self) -> Self {
        let n = self.order;
        let digits = self.digits.iter().map(|&d| (n - d) % n).collect();
        Self::from_digits_unchecked(n, digits)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.neg())
    }

    /// The height-`k` ancestor MC_k of this leaf.
    pub fn ancestor(&self, k: usize) -> TreeAddress {
        TreeAddress::new(self.clone(), k)
    }

    /// Parse the comma-separated digit list produced by `Display`.
    pub fn parse(order: u32, s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Self::zero(order);
        }
        let digits = s
            .split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|_| Error::InvalidArgument(format!("bad digit '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(order, digits)
    }
}

impl fmt::Display for HierAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.digits.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self.digits.iter().map(u32::to_string).collect();
        write!(f, "{}", parts.join(","))
    }
}

fn check_order(order: u32) -> Result<()> {
    if order < 2 {
        return invalid(format!("group order N = {order} must be at least 2"));
    }
    Ok(())
}

/// Distance between two digit slices (missing digits read as zero).
#[inline]
pub(crate) fn digit_distance(a: &[u32], b: &[u32]) -> usize {
    let len = a.len().max(b.len());
    (0..len)
        .rev()
        .find(|&i| a.get(i).copied().unwrap_or(0) != b.get(i).copied().unwrap_or(0))
        .map_or(0, |i| i + 1)
}

// ── Tree vertices ────────────────────────────────────────────────────────────

/// A vertex of the full tree: the block of height `height` containing `base`.
///
/// The base is stored with its digits below `height` zeroed, so two
/// addresses denote the same vertex exactly when they compare equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TreeAddress {
    base: HierAddress,
    height: usize,
}

impl TreeAddress {
    pub fn new(mut base: HierAddress, height: usize) -> Self {
        let m = height.min(base.digits.len());
        base.digits[..m].iter_mut().for_each(|d| *d = 0);
        base.trim();
        Self { base, height }
    }

    pub fn base(&self) -> &HierAddress {
        &self.base
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn order(&self) -> u32 {
        self.base.order
    }

    /// The vertex one level up.
    pub fn parent(&self) -> Self {
        Self::new(self.base.clone(), self.height + 1)
    }

    /// Number of leaves below this vertex, `N^height`, if it fits in `u64`.
    pub fn size(&self) -> Option<u64> {
        u64::from(self.base.order).checked_pow(u32::try_from(self.height).ok()?)
    }

    /// Whether leaf `eta` lies in the block below this vertex.
    pub fn contains(&self, eta: &HierAddress) -> bool {
        eta.order == self.base.order && eta.ancestor(self.height) == *self
    }

    /// Lazy enumeration of the `N^height` leaves below this vertex.
    pub fn members(&self) -> BlockMembers {
        BlockMembers {
            order: self.base.order,
            height: self.height,
            current: Some(self.base.digits.clone()),
        }
    }

    /// Largest of the two graph distances to the most recent common ancestor.
    pub fn tree_distance(&self, other: &Self) -> Result<usize> {
        let d = self.base.distance(&other.base)?;
        let top = d.max(self.height).max(other.height);
        Ok(top - self.height.min(other.height))
    }

    /// Parse the `base@height` form produced by `Display`.
    pub fn parse(order: u32, s: &str) -> Result<Self> {
        let (b, h) = s
            .rsplit_once('@')
            .ok_or_else(|| Error::InvalidArgument(format!("tree address '{s}' lacks '@'")))?;
        let height = h
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("bad height '{h}'")))?;
        Ok(Self::new(HierAddress::parse(order, b)?, height))
    }
}

impl fmt::Display for TreeAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.base, self.height)
    }
}

/// Odometer over the free low digits of a block.
pub struct BlockMembers {
    order: u32,
    height: usize,
    current: Option<Vec<u32>>,
}

impl Iterator for BlockMembers {
    type Item = HierAddress;

    fn next(&mut self) -> Option<HierAddress> {
        let cur = self.current.as_mut()?;
        if cur.len() < self.height {
            cur.resize(self.height, 0);
        }
        let out = HierAddress::from_digits_unchecked(self.order, cur.clone());
        let mut i = 0;
        loop {
            if i == self.height {
                self.current = None;
                break;
            }
            cur[i] += 1;
            if cur[i] < self.order {
                break;
            }
            cur[i] = 0;
            i += 1;
        }
        Some(out)
    }
}
