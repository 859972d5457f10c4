//! Code parameters, normalized repair-traffic formulas and recoverability
//! oracles.
//!
//! Traffic values are exact rationals in units of one fragment (`B/k`), so
//! identity checks between the formulas never suffer floating-point drift.

mod structure;

pub use structure::SrcStructure;

use num_rational::Ratio;
use thiserror::Error;

/// Normalized repair traffic, in units of one fragment (`B/k`).
pub type Traffic = Ratio<u64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodingError {
    #[error("code parameters must satisfy 0 < k < n <= 32 (got n={n}, k={k})")]
    BadParameters { n: usize, k: usize },
    #[error("{what} must be positive")]
    NonPositive { what: &'static str },
    #[error("repair degree d={d} is below the reconstruction threshold k={k}")]
    DegreeBelowThreshold { d: u64, k: u64 },
    #[error("size {size} is not divisible by {divisor}")]
    Indivisible { size: u64, divisor: u64 },
    #[error("family {family} requires an attached pair-repair structure")]
    MissingStructure { family: CodeFamily },
    #[error("structure does not fit the code: {0}")]
    StructureMismatch(String),
    #[error("invalid pair-repair structure: {0}")]
    InvalidStructure(String),
    #[error("cannot parse structure: {0}")]
    ParseStructure(String),
}

/// The coding schemes under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodeFamily {
    /// Classical MDS erasure code, repaired lazily by whole-object
    /// reconstruction.
    Ec,
    /// Regenerating code: one failure at a time, d >= k sources per repair.
    Rgc,
    /// Collaborative regenerating code: f concurrent repairs that exchange
    /// data among themselves after the download phase.
    Crgc,
    /// Self-repairing code: a lost fragment is the XOR of a designated pair
    /// of live fragments, so only two nodes are contacted.
    Src,
    /// Self-repairing code with the pipelined repair path.
    SrcP,
}

impl CodeFamily {
    pub fn is_mds(self) -> bool {
        matches!(self, CodeFamily::Ec | CodeFamily::Rgc | CodeFamily::Crgc)
    }

    pub fn uses_structure(self) -> bool {
        !self.is_mds()
    }
}

impl std::fmt::Display for CodeFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CodeFamily::Ec => "EC",
            CodeFamily::Rgc => "RGC",
            CodeFamily::Crgc => "CRGC",
            CodeFamily::Src => "SRC",
            CodeFamily::SrcP => "SRCp",
        };
        f.write_str(s)
    }
}

/// A set of fragment indices of one object, stored as a bitmask.
///
/// Codes are capped at n <= 32 fragments, which covers every configuration
/// this toolkit targets and keeps recoverability checks branch-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FragmentSet(u32);

impl FragmentSet {
    pub const fn empty() -> Self {
        FragmentSet(0)
    }

    /// All fragments `0..n`.
    pub fn full(n: usize) -> Self {
        debug_assert!(n <= 32);
        if n == 32 {
            FragmentSet(u32::MAX)
        } else {
            FragmentSet((1u32 << n) - 1)
        }
    }

    pub fn from_bits(bits: u32) -> Self {
        FragmentSet(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn insert(&mut self, idx: usize) {
        debug_assert!(idx < 32);
        self.0 |= 1 << idx;
    }

    pub fn remove(&mut self, idx: usize) {
        debug_assert!(idx < 32);
        self.0 &= !(1 << idx);
    }

    pub fn contains(self, idx: usize) -> bool {
        idx < 32 && self.0 & (1 << idx) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Fragment indices in ascending order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let idx = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(idx)
            }
        })
    }
}

impl FromIterator<usize> for FragmentSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        let mut set = FragmentSet::empty();
        for idx in iter {
            set.insert(idx);
        }
        set
    }
}

/// An (n, k) code of one family applied to objects of a fixed size.
///
/// The object size must be divisible by k so fragments are exactly `B/k`
/// bytes. SRC families additionally carry the structure that lists, per
/// fragment, the disjoint pairs whose XOR reproduces it.
#[derive(Debug, Clone)]
pub struct CodeConfig {
    n: usize,
    k: usize,
    family: CodeFamily,
    object_size: u64,
    structure: Option<SrcStructure>,
}

impl CodeConfig {
    pub fn new(
        family: CodeFamily,
        n: usize,
        k: usize,
        object_size: u64,
    ) -> Result<Self, CodingError> {
        if family.uses_structure() {
            return Err(CodingError::MissingStructure { family });
        }
        Self::build(family, n, k, object_size, None)
    }

    pub fn with_structure(
        family: CodeFamily,
        n: usize,
        k: usize,
        object_size: u64,
        structure: SrcStructure,
    ) -> Result<Self, CodingError> {
        if !family.uses_structure() {
            return Err(CodingError::StructureMismatch(format!(
                "family {family} does not take a pair-repair structure"
            )));
        }
        if structure.n() != n || structure.k() != k {
            return Err(CodingError::StructureMismatch(format!(
                "structure is ({}, {}) but the code is ({n}, {k})",
                structure.n(),
                structure.k()
            )));
        }
        Self::build(family, n, k, object_size, Some(structure))
    }

    fn build(
        family: CodeFamily,
        n: usize,
        k: usize,
        object_size: u64,
        structure: Option<SrcStructure>,
    ) -> Result<Self, CodingError> {
        if k == 0 || k >= n || n > 32 {
            return Err(CodingError::BadParameters { n, k });
        }
        if object_size == 0 {
            return Err(CodingError::NonPositive {
                what: "object size",
            });
        }
        if object_size % k as u64 != 0 {
            return Err(CodingError::Indivisible {
                size: object_size,
                divisor: k as u64,
            });
        }
        Ok(CodeConfig {
            n,
            k,
            family,
            object_size,
            structure,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn family(&self) -> CodeFamily {
        self.family
    }

    pub fn object_size(&self) -> u64 {
        self.object_size
    }

    /// Fragment size `B/k` in bytes.
    pub fn fragment_size(&self) -> u64 {
        self.object_size / self.k as u64
    }

    pub fn structure(&self) -> Option<&SrcStructure> {
        self.structure.as_ref()
    }
}

/// Per-repair parameters: the repair degree d and the batch size f.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepairSpec {
    /// Number of live nodes contacted per repair.
    pub d: usize,
    /// Number of failures repaired as one batch.
    pub f: usize,
}

impl RepairSpec {
    /// Checks the family-specific constraints on (d, f).
    pub fn validate(&self, code: &CodeConfig) -> Result<(), CodingError> {
        let (n, k) = (code.n(), code.k());
        if self.f == 0 {
            return Err(CodingError::NonPositive { what: "f" });
        }
        match code.family() {
            CodeFamily::Ec => {
                if self.d != k {
                    return Err(CodingError::StructureMismatch(format!(
                        "EC repairs contact exactly k={k} nodes (got d={})",
                        self.d
                    )));
                }
                if self.f > n - k {
                    return Err(CodingError::StructureMismatch(format!(
                        "lazy batch f={} exceeds n-k={}",
                        self.f,
                        n - k
                    )));
                }
            }
            CodeFamily::Rgc => {
                if self.f != 1 {
                    return Err(CodingError::StructureMismatch(
                        "RGC repairs one failure at a time (f=1)".into(),
                    ));
                }
                if self.d < k || self.d > n - 1 {
                    return Err(CodingError::StructureMismatch(format!(
                        "RGC needs k <= d <= n-1 (got d={})",
                        self.d
                    )));
                }
            }
            CodeFamily::Crgc => {
                if self.d < k || self.d > n - self.f {
                    return Err(CodingError::StructureMismatch(format!(
                        "CRGC needs k <= d <= n-f (got d={}, f={})",
                        self.d, self.f
                    )));
                }
            }
            CodeFamily::Src | CodeFamily::SrcP => {
                if self.d != 2 {
                    return Err(CodingError::StructureMismatch(
                        "pair repair contacts exactly two nodes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Average normalized communication cost per failure for lazy erasure-code
/// repair: `(k + f - 1) / f` fragments.
pub fn gamma_ec(k: u64, f: u64) -> Result<Traffic, CodingError> {
    if k == 0 {
        return Err(CodingError::NonPositive { what: "k" });
    }
    if f == 0 {
        return Err(CodingError::NonPositive { what: "f" });
    }
    Ok(Ratio::new(k + f - 1, f))
}

/// Normalized repair traffic per failure for collaborative regenerating
/// codes: `(d + f - 1) / (d - k + f)` fragments.
pub fn gamma_crgc(d: u64, k: u64, f: u64) -> Result<Traffic, CodingError> {
    if k == 0 {
        return Err(CodingError::NonPositive { what: "k" });
    }
    if f == 0 {
        return Err(CodingError::NonPositive { what: "f" });
    }
    if d < k {
        return Err(CodingError::DegreeBelowThreshold { d, k });
    }
    Ok(Ratio::new(d + f - 1, d - k + f))
}

/// Normalized repair traffic per failure for self-repairing codes: two
/// fragments, independent of the batch size.
pub fn gamma_src(f: u64) -> Result<Traffic, CodingError> {
    if f == 0 {
        return Err(CodingError::NonPositive { what: "f" });
    }
    Ok(Ratio::from_integer(2))
}

/// Bytes each contacted node uploads in one collaborative repair:
/// `B / (k * (d - k + f))`.
///
/// Sized so the d downloads plus f-1 exchange transfers per repair total
/// exactly `gamma_crgc(d, k, f) * B / k`. The object size must be divisible
/// by `k * (d - k + f)`; pick B accordingly when configuring an experiment.
pub fn unit_transfer_crgc(
    object_size: u64,
    k: u64,
    d: u64,
    f: u64,
) -> Result<u64, CodingError> {
    if f == 0 {
        return Err(CodingError::NonPositive { what: "f" });
    }
    if k == 0 {
        return Err(CodingError::NonPositive { what: "k" });
    }
    if d < k {
        return Err(CodingError::DegreeBelowThreshold { d, k });
    }
    let divisor = k * (d - k + f);
    if object_size % divisor != 0 {
        return Err(CodingError::Indivisible {
            size: object_size,
            divisor,
        });
    }
    Ok(object_size / divisor)
}

/// Rank over GF(2) of a set of bit-vector columns.
pub fn gf2_rank(columns: impl IntoIterator<Item = u32>) -> usize {
    let mut pivots: Vec<u32> = Vec::new();
    for mut v in columns {
        for &p in &pivots {
            // Reduce by the pivot owning the highest set bit of p.
            if v & (1 << (31 - p.leading_zeros())) != 0 {
                v ^= p;
            }
        }
        if v != 0 {
            pivots.push(v);
        }
    }
    pivots.len()
}

/// Whether the object can be reconstructed from the given live fragments.
///
/// MDS families recover from any k fragments. SRC families recover exactly
/// when the structure columns of the live fragments span GF(2)^k.
pub fn is_recoverable(code: &CodeConfig, live: FragmentSet) -> bool {
    debug_assert_eq!(live.bits() & !FragmentSet::full(code.n()).bits(), 0);
    if code.family().is_mds() {
        live.len() >= code.k()
    } else {
        let s = code.structure().expect("SRC config carries a structure");
        gf2_rank(live.iter().map(|x| s.column(x))) == code.k()
    }
}
