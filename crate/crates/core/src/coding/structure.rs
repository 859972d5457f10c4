//! GF(2) pair-repair structures for self-repairing codes.
//!
//! A structure assigns each of the n fragments a nonzero binary column over
//! the k object pieces. Fragment x can be rebuilt by XORing any pair {y, z}
//! with `column[x] = column[y] ^ column[z]`. Given the columns, the pair
//! lists are fully determined: for a fixed x each other fragment belongs to
//! at most one such pair, so the pairs are disjoint and there are at most
//! (n-1)/2 of them.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{gf2_rank, CodingError, FragmentSet};

/// Subset-count threshold below which the heuristic search enumerates every
/// candidate column set instead of hill climbing.
const EXHAUSTIVE_LIMIT: u128 = 200_000;

/// Binary column structure governing pair repair and recoverability for a
/// self-repairing code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrcStructure {
    k: usize,
    columns: Vec<u32>,
    pairs: Vec<Vec<(usize, usize)>>,
}

impl SrcStructure {
    /// Builds a structure from explicit columns, deriving the pair lists.
    ///
    /// Columns must be distinct nonzero k-bit vectors of full rank k.
    pub fn from_columns(k: usize, columns: Vec<u32>) -> Result<Self, CodingError> {
        let n = columns.len();
        if k < 2 || k > 31 || n <= k || n > 32 {
            return Err(CodingError::InvalidStructure(format!(
                "need 2 <= k < n <= 32 (got n={n}, k={k})"
            )));
        }
        let space = if k == 31 { u32::MAX } else { (1u32 << k) - 1 };
        let mut seen = HashSet::with_capacity(n);
        for &c in &columns {
            if c == 0 || c & !space != 0 {
                return Err(CodingError::InvalidStructure(format!(
                    "column {c:#b} is not a nonzero {k}-bit vector"
                )));
            }
            if !seen.insert(c) {
                return Err(CodingError::InvalidStructure(format!(
                    "duplicate column {c:#b}"
                )));
            }
        }
        if gf2_rank(columns.iter().copied()) != k {
            return Err(CodingError::InvalidStructure(format!(
                "columns have rank {} < k={k}",
                gf2_rank(columns.iter().copied())
            )));
        }
        let pairs = derive_pairs(&columns);
        Ok(SrcStructure { k, columns, pairs })
    }

    /// The XOR-closed structure on all nonzero vectors of GF(2)^m, giving
    /// n = 2^m - 1 fragments with the full (n-1)/2 pairs each.
    pub fn homomorphic(m: usize) -> Result<Self, CodingError> {
        if !(2..=5).contains(&m) {
            return Err(CodingError::InvalidStructure(format!(
                "homomorphic structure needs 2 <= m <= 5 (got {m})"
            )));
        }
        let n = (1usize << m) - 1;
        let columns: Vec<u32> = (1..=n as u32).collect();
        Self::from_columns(m, columns)
    }

    /// Seeded search for a good structure at arbitrary (n, k).
    ///
    /// Picks n distinct nonzero k-bit columns of rank k, maximizing first the
    /// minimum and then the total number of disjoint pairs per fragment.
    /// Small candidate spaces are enumerated exhaustively (the seed is then
    /// irrelevant); larger ones use seeded hill climbing with restarts, so
    /// the result is deterministic for a fixed seed.
    pub fn heuristic(n: usize, k: usize, seed: u64) -> Result<Self, CodingError> {
        if k < 2 || n <= k || n > 32 {
            return Err(CodingError::InvalidStructure(format!(
                "need 2 <= k < n <= 32 (got n={n}, k={k})"
            )));
        }
        let space = (1u128 << k) - 1;
        if (n as u128) > space {
            return Err(CodingError::InvalidStructure(format!(
                "cannot pick {n} distinct nonzero {k}-bit columns"
            )));
        }
        let candidates: Vec<u32> = (1..=space as u32).collect();
        let columns = if combinations(candidates.len(), n) <= EXHAUSTIVE_LIMIT {
            exhaustive_search(&candidates, n, k)
        } else {
            hill_climb(&candidates, n, k, seed)
        };
        let columns = columns.ok_or_else(|| {
            CodingError::InvalidStructure(format!("no rank-{k} column set of size {n} found"))
        })?;
        Self::from_columns(k, columns)
    }

    pub fn n(&self) -> usize {
        self.columns.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn columns(&self) -> &[u32] {
        &self.columns
    }

    pub fn column(&self, x: usize) -> u32 {
        self.columns[x]
    }

    /// Full pair list for fragment x, in canonical order.
    pub fn pairs(&self, x: usize) -> &[(usize, usize)] {
        &self.pairs[x]
    }

    /// Pairs for fragment x whose both members are in the live set, order
    /// preserved from the structure. Empty means pair repair is impossible
    /// and the caller falls back to whole-object reconstruction.
    pub fn live_pairs(&self, x: usize, live: FragmentSet) -> Vec<(usize, usize)> {
        self.pairs[x]
            .iter()
            .copied()
            .filter(|&(y, z)| live.contains(y) && live.contains(z))
            .collect()
    }

    pub fn min_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    /// Plain-text rendering, one line per fragment:
    /// `<index> <column-bits> | <pair list y:z,...>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (x, &col) in self.columns.iter().enumerate() {
            let pairs = self.pairs[x]
                .iter()
                .map(|(y, z)| format!("{y}:{z}"))
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(out, "{x} {col:0width$b} | {pairs}", width = self.k);
        }
        out
    }

    /// Parses the plain-text format written by [`Self::to_text`] and checks
    /// every structure invariant, including the listed pairs.
    pub fn from_text(text: &str) -> Result<Self, CodingError> {
        let mut rows: Vec<(usize, u32, usize, Vec<(usize, usize)>)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CodingError::ParseStructure(format!("line {}: {msg}", lineno + 1));
            let (head, tail) = line
                .split_once('|')
                .ok_or_else(|| err("missing '|'".into()))?;
            let mut fields = head.split_whitespace();
            let index: usize = fields
                .next()
                .ok_or_else(|| err("missing fragment index".into()))?
                .parse()
                .map_err(|e| err(format!("bad index: {e}")))?;
            let bits = fields
                .next()
                .ok_or_else(|| err("missing column bits".into()))?;
            if fields.next().is_some() {
                return Err(err("unexpected extra field".into()));
            }
            let column = u32::from_str_radix(bits, 2).map_err(|e| err(format!("bad bits: {e}")))?;
            let mut pairs = Vec::new();
            for part in tail.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let (y, z) = part
                    .split_once(':')
                    .ok_or_else(|| err(format!("bad pair '{part}'")))?;
                let y: usize = y.parse().map_err(|e| err(format!("bad pair '{part}': {e}")))?;
                let z: usize = z.parse().map_err(|e| err(format!("bad pair '{part}': {e}")))?;
                pairs.push((y, z));
            }
            rows.push((index, column, bits.len(), pairs));
        }
        if rows.is_empty() {
            return Err(CodingError::ParseStructure("empty input".into()));
        }
        rows.sort_by_key(|r| r.0);
        let n = rows.len();
        let k = rows[0].2;
        for (expect, row) in rows.iter().enumerate() {
            if row.0 != expect {
                return Err(CodingError::ParseStructure(format!(
                    "fragment indices must be 0..{n} (missing or duplicate {expect})"
                )));
            }
            if row.2 != k {
                return Err(CodingError::ParseStructure(
                    "inconsistent column widths".into(),
                ));
            }
        }
        let columns: Vec<u32> = rows.iter().map(|r| r.1).collect();
        let parsed = Self::from_columns(k, columns)?;
        // The listed pairs must match the canonical derivation.
        for (x, row) in rows.iter().enumerate() {
            if row.3 != parsed.pairs[x] {
                return Err(CodingError::ParseStructure(format!(
                    "pair list for fragment {x} does not match its columns"
                )));
            }
        }
        Ok(parsed)
    }
}

/// Canonical pair derivation: for each x, every unordered pair {y, z} with
/// `columns[y] ^ columns[z] = columns[x]`, listed with y ascending.
fn derive_pairs(columns: &[u32]) -> Vec<Vec<(usize, usize)>> {
    let n = columns.len();
    let index_of: std::collections::HashMap<u32, usize> = columns
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    (0..n)
        .map(|x| {
            let mut list = Vec::new();
            for y in 0..n {
                if y == x {
                    continue;
                }
                if let Some(&z) = index_of.get(&(columns[x] ^ columns[y])) {
                    // z != x and z != y hold because columns are nonzero and
                    // distinct; keep y < z so each pair appears once.
                    if y < z {
                        list.push((y, z));
                    }
                }
            }
            list
        })
        .collect()
}

/// Lexicographic score: (min pairs per fragment, total pairs).
fn score(columns: &[u32], members: &HashSet<u32>) -> (usize, usize) {
    let mut min = usize::MAX;
    let mut total = 0;
    for (x, &cx) in columns.iter().enumerate() {
        let mut count = 0;
        for (y, &cy) in columns.iter().enumerate() {
            if y != x && members.contains(&(cx ^ cy)) {
                count += 1;
            }
        }
        let pairs = count / 2;
        min = min.min(pairs);
        total += pairs;
    }
    (min, total)
}

fn combinations(m: usize, n: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..n.min(m - n) {
        acc = acc.saturating_mul((m - i) as u128) / (i as u128 + 1);
        if acc > EXHAUSTIVE_LIMIT {
            return acc;
        }
    }
    acc
}

fn exhaustive_search(candidates: &[u32], n: usize, k: usize) -> Option<Vec<u32>> {
    let m = candidates.len();
    let mut pick: Vec<usize> = (0..n).collect();
    let mut best: Option<((usize, usize), Vec<u32>)> = None;
    loop {
        let columns: Vec<u32> = pick.iter().map(|&i| candidates[i]).collect();
        if gf2_rank(columns.iter().copied()) == k {
            let members: HashSet<u32> = columns.iter().copied().collect();
            let s = score(&columns, &members);
            if best.as_ref().map_or(true, |(bs, _)| s > *bs) {
                best = Some((s, columns));
            }
        }
        // Next combination in lexicographic order.
        let mut i = n;
        loop {
            if i == 0 {
                return best.map(|(_, c)| c);
            }
            i -= 1;
            if pick[i] != i + m - n {
                break;
            }
        }
        pick[i] += 1;
        for j in i + 1..n {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

fn hill_climb(candidates: &[u32], n: usize, k: usize, seed: u64) -> Option<Vec<u32>> {
    const RESTARTS: usize = 6;
    const MAX_STEPS: usize = 400;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best: Option<((usize, usize), Vec<u32>)> = None;

    for _ in 0..RESTARTS {
        let mut current = random_rank_k_subset(candidates, n, k, &mut rng)?;
        current.sort_unstable();
        let mut members: HashSet<u32> = current.iter().copied().collect();
        let mut current_score = score(&current, &members);

        for _ in 0..MAX_STEPS {
            let mut improved: Option<((usize, usize), usize, u32)> = None;
            for out_i in 0..n {
                for &cand in candidates {
                    if members.contains(&cand) {
                        continue;
                    }
                    let removed = current[out_i];
                    current[out_i] = cand;
                    members.remove(&removed);
                    members.insert(cand);
                    if gf2_rank(current.iter().copied()) == k {
                        let s = score(&current, &members);
                        if s > current_score
                            && improved.as_ref().map_or(true, |(bs, _, _)| s > *bs)
                        {
                            improved = Some((s, out_i, cand));
                        }
                    }
                    members.remove(&cand);
                    members.insert(removed);
                    current[out_i] = removed;
                }
            }
            match improved {
                Some((s, out_i, cand)) => {
                    members.remove(&current[out_i]);
                    members.insert(cand);
                    current[out_i] = cand;
                    current_score = s;
                }
                None => break,
            }
        }

        current.sort_unstable();
        if best.as_ref().map_or(true, |(bs, _)| current_score > *bs) {
            best = Some((current_score, current.clone()));
        }
    }
    best.map(|(_, c)| c)
}

/// Random n-subset of rank k: a random basis first, then random fill.
fn random_rank_k_subset(
    candidates: &[u32],
    n: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Option<Vec<u32>> {
    let mut shuffled = candidates.to_vec();
    shuffled.shuffle(rng);
    let mut chosen: Vec<u32> = Vec::with_capacity(n);
    for &c in &shuffled {
        if chosen.len() == k {
            break;
        }
        if gf2_rank(chosen.iter().copied().chain([c])) > gf2_rank(chosen.iter().copied()) {
            chosen.push(c);
        }
    }
    if chosen.len() < k {
        return None;
    }
    for &c in &shuffled {
        if chosen.len() == n {
            break;
        }
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    (chosen.len() == n).then_some(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homomorphic_m3_pairs_of_fragment_one() {
        let s = SrcStructure::homomorphic(3).unwrap();
        assert_eq!(s.n(), 7);
        assert_eq!(s.k(), 3);
        // Fragment with column 001 (index 0): partners are {010,011},
        // {100,101}, {110,111}, i.e. indices (1,2), (3,4), (5,6).
        assert_eq!(s.pairs(0), &[(1, 2), (3, 4), (5, 6)]);
        for x in 0..7 {
            assert_eq!(s.pairs(x).len(), 3, "every fragment has (n-1)/2 pairs");
        }
    }

    #[test]
    fn homomorphic_smallest_and_m4() {
        let s = SrcStructure::homomorphic(2).unwrap();
        assert_eq!(s.n(), 3);
        for x in 0..3 {
            assert_eq!(s.pairs(x).len(), 1);
        }
        let s = SrcStructure::homomorphic(4).unwrap();
        assert_eq!(s.n(), 15);
        for x in 0..15 {
            assert_eq!(s.pairs(x).len(), 7);
        }
    }

    #[test]
    fn pair_xor_identity_holds_everywhere() {
        for s in [
            SrcStructure::homomorphic(3).unwrap(),
            SrcStructure::homomorphic(4).unwrap(),
            SrcStructure::heuristic(7, 4, 1).unwrap(),
            SrcStructure::heuristic(15, 5, 1).unwrap(),
            SrcStructure::heuristic(4, 3, 1).unwrap(),
        ] {
            for x in 0..s.n() {
                let members: Vec<usize> = s.pairs(x).iter().flat_map(|&(y, z)| [y, z]).collect();
                let distinct: HashSet<usize> = members.iter().copied().collect();
                assert_eq!(members.len(), distinct.len(), "pairs must be disjoint");
                assert!(!distinct.contains(&x));
                assert!(s.pairs(x).len() <= (s.n() - 1) / 2);
                for &(y, z) in s.pairs(x) {
                    assert_eq!(s.column(y) ^ s.column(z), s.column(x));
                }
            }
        }
    }

    #[test]
    fn heuristic_7_3_attains_the_homomorphic_optimum() {
        for seed in [0, 1, 42] {
            let s = SrcStructure::heuristic(7, 3, seed).unwrap();
            assert_eq!(s.min_pairs(), 3);
            assert_eq!(s.total_pairs(), 21);
        }
    }

    #[test]
    fn heuristic_7_4_every_fragment_repairable_but_not_mds() {
        let s = SrcStructure::heuristic(7, 4, 7).unwrap();
        assert!(s.min_pairs() >= 1, "every fragment needs a repair pair");
        // Enumerate all C(7,4) = 35 subsets: some must be unrecoverable.
        let mut unrecoverable = 0;
        let mut subsets = 0;
        for bits in 0u32..128 {
            if bits.count_ones() == 4 {
                subsets += 1;
                let rank = gf2_rank(FragmentSet::from_bits(bits).iter().map(|x| s.column(x)));
                if rank < 4 {
                    unrecoverable += 1;
                }
            }
        }
        assert_eq!(subsets, 35);
        assert!(unrecoverable > 0, "a pair-repair structure cannot be MDS");
    }

    #[test]
    fn heuristic_15_5_has_pairs_for_every_fragment() {
        let s = SrcStructure::heuristic(15, 5, 3).unwrap();
        assert_eq!(s.n(), 15);
        assert!(s.min_pairs() >= 1);
        // Deterministic for a fixed seed.
        assert_eq!(s, SrcStructure::heuristic(15, 5, 3).unwrap());
    }

    #[test]
    fn single_parity_structure() {
        // n = k + 1 at k = 2 is the smallest homomorphic structure.
        let s = SrcStructure::heuristic(3, 2, 0).unwrap();
        for x in 0..3 {
            assert_eq!(s.pairs(x).len(), 1);
        }
        // At k = 3 only fragments inside a weight-3 relation get pairs.
        let s = SrcStructure::heuristic(4, 3, 0).unwrap();
        assert!(s.total_pairs() > 0);
        for x in 0..4 {
            for &(y, z) in s.pairs(x) {
                assert_eq!(s.column(y) ^ s.column(z), s.column(x));
            }
        }
    }

    #[test]
    fn live_pair_filtering() {
        let s = SrcStructure::homomorphic(3).unwrap();
        let all_others = FragmentSet::from_iter(1..7);
        assert_eq!(s.live_pairs(0, all_others).len(), 3);
        assert_eq!(s.live_pairs(0, FragmentSet::empty()), vec![]);
        // live = {010, 011, 100}: only the (010, 011) pair survives.
        let live = FragmentSet::from_iter([1, 2, 3]);
        assert_eq!(s.live_pairs(0, live), vec![(1, 2)]);
    }

    #[test]
    fn text_round_trip() {
        for s in [
            SrcStructure::homomorphic(3).unwrap(),
            SrcStructure::heuristic(7, 4, 9).unwrap(),
            SrcStructure::heuristic(15, 5, 9).unwrap(),
        ] {
            let text = s.to_text();
            let back = SrcStructure::from_text(&text).unwrap();
            assert_eq!(s, back);
        }
    }

    #[test]
    fn text_rejects_corrupted_pairs() {
        let s = SrcStructure::homomorphic(2).unwrap();
        let text = s.to_text().replace("1:2", "0:2");
        assert!(SrcStructure::from_text(&text).is_err());
    }

    #[test]
    fn from_columns_rejects_bad_input() {
        assert!(SrcStructure::from_columns(3, vec![1, 2, 3, 0]).is_err());
        assert!(SrcStructure::from_columns(3, vec![1, 2, 3, 3]).is_err());
        assert!(SrcStructure::from_columns(3, vec![1, 2, 3, 8]).is_err());
        // Rank 2 < k.
        assert!(SrcStructure::from_columns(3, vec![1, 2, 3]).is_err());
    }
}
