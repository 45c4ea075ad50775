//! Square-lattice spin grids with periodic boundaries.
//!
//! Sites are indexed lexicographically (row-major): site `i` sits at row
//! `i / n`, column `i % n`. Every site has four neighbor slots (up, down,
//! left, right) under wraparound; on a 2x2 lattice the slots repeat, so
//! each pair of sites shares two bonds.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ferromagnetic coupling `j` and external field `h`, both in energy units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingParams<T> {
    pub j: T,
    pub h: T,
}

impl<T: Scalar> CouplingParams<T> {
    pub fn new(j: T, h: T) -> Result<Self> {
        if !(j > T::zero()) {
            return Err(Error::Domain(format!("coupling j must be positive, got {j}")));
        }
        Ok(Self { j, h })
    }
}

impl<T: Scalar> Default for CouplingParams<T> {
    fn default() -> Self {
        Self {
            j: T::one(),
            h: T::zero(),
        }
    }
}

/// Indices of the up, down, left and right neighbors of site `i`.
pub fn neighbors(i: usize, n: usize) -> Result<[usize; 4]> {
    if n < 2 || i >= n * n {
        return Err(Error::SiteOutOfRange { index: i, n });
    }
    Ok(neighbors_unchecked(i, n))
}

#[inline(always)]
pub(crate) fn neighbors_unchecked(i: usize, n: usize) -> [usize; 4] {
    let (r, c) = (i / n, i % n);
    let up = if r == 0 { i + n * (n - 1) } else { i - n };
    let down = if r == n - 1 { c } else { i + n };
    let left = if c == 0 { i + n - 1 } else { i - 1 };
    let right = if c == n - 1 { i + 1 - n } else { i + 1 };
    [up, down, left, right]
}

/// An `n x n` configuration of +1/-1 spins.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpinGrid {
    n: usize,
    spins: Vec<i8>,
}

impl SpinGrid {
    pub fn from_spins(n: usize, spins: Vec<i8>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid(format!("lattice size {n} < 2")));
        }
        if spins.len() != n * n {
            return Err(Error::InvalidGrid(format!(
                "expected {} spins, got {}",
                n * n,
                spins.len()
            )));
        }
        if let Some(pos) = spins.iter().position(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidGrid(format!(
                "spin {} at site {pos} is not +1/-1",
                spins[pos]
            )));
        }
        Ok(Self { n, spins })
    }

    pub fn all_up(n: usize) -> Self {
        Self::filled(n, 1)
    }

    pub fn all_down(n: usize) -> Self {
        Self::filled(n, -1)
    }

    fn filled(n: usize, s: i8) -> Self {
        assert!(n >= 2, "lattice size must be at least 2");
        Self {
            n,
            spins: vec![s; n * n],
        }
    }

    pub fn checkerboard(n: usize) -> Self {
        assert!(n >= 2, "lattice size must be at least 2");
        let spins = (0..n * n)
            .map(|i| if (i / n + i % n) % 2 == 0 { 1 } else { -1 })
            .collect();
        Self { n, spins }
    }

    /// Independent uniform spins (the infinite-temperature state).
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        assert!(n >= 2, "lattice size must be at least 2");
        let spins = (0..n * n)
            .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
            .collect();
        Self { n, spins }
    }

    /// Grid from real values by sign; exact zero maps to +1.
    pub fn from_signs<T: Scalar>(n: usize, values: &[T]) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: values.len(),
            });
        }
        let spins = values
            .iter()
            .map(|&v| if v < T::zero() { -1 } else { 1 })
            .collect();
        Self::from_spins(n, spins)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn sites(&self) -> usize {
        self.spins.len()
    }

    #[inline]
    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    #[inline]
    pub(crate) fn spins_mut(&mut self) -> &mut [i8] {
        &mut self.spins
    }

    #[inline]
    pub fn spin(&self, i: usize) -> i8 {
        self.spins[i]
    }

    pub fn flip(&mut self, i: usize) -> Result<()> {
        self.check_site(i)?;
        self.spins[i] = -self.spins[i];
        Ok(())
    }

    pub fn flipped(&self, i: usize) -> Result<Self> {
        let mut g = self.clone();
        g.flip(i)?;
        Ok(g)
    }

    fn check_site(&self, i: usize) -> Result<()> {
        if i >= self.spins.len() {
            return Err(Error::SiteOutOfRange { index: i, n: self.n });
        }
        Ok(())
    }

    /// Spins as reals in lexicographic order.
    pub fn to_reals<T: Scalar>(&self) -> Vec<T> {
        self.spins
            .iter()
            .map(|&s| if s > 0 { T::one() } else { -T::one() })
            .collect()
    }

    /// Sum over bonds of `x_i x_j`, each bond counted once.
    pub fn bond_sum(&self) -> i64 {
        let n = self.n;
        let s = &self.spins;
        let mut sum = 0i64;
        for r in 0..n {
            let row = r * n;
            let below = if r == n - 1 { 0 } else { row + n };
            for c in 0..n {
                let right = if c == n - 1 { row } else { row + c + 1 };
                let x = s[row + c] as i64;
                sum += x * (s[right] as i64 + s[below + c] as i64);
            }
        }
        sum
    }

    /// Sum of the four neighbor spins of site `i`.
    #[inline(always)]
    pub(crate) fn neighbor_sum(&self, i: usize) -> i32 {
        let nb = neighbors_unchecked(i, self.n);
        nb.iter().map(|&j| self.spins[j] as i32).sum()
    }

    /// Raw grid encoding: one signed byte per site, row-major, no header.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.spins.iter().map(|&s| s as u8).collect()
    }

    pub fn from_bytes(n: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_spins(n, bytes.iter().map(|&b| b as i8).collect())
    }
}

/// Total energy `-J * sum_bonds x_i x_j - h * sum_i x_i`.
pub fn hamiltonian<T: Scalar>(g: &SpinGrid, c: &CouplingParams<T>) -> T {
    let bonds = T::from_i64(g.bond_sum()).expect("bond sum representable");
    let m = T::from_i64(magnetization(g)).expect("magnetization representable");
    -(c.j * bonds) - c.h * m
}

/// Total magnetization `M = sum_i x_i`.
pub fn magnetization(g: &SpinGrid) -> i64 {
    g.spins.iter().map(|&s| s as i64).sum()
}

/// Energy change from flipping site `i`, evaluated from its four neighbors.
pub fn delta_e<T: Scalar>(g: &SpinGrid, i: usize, c: &CouplingParams<T>) -> Result<T> {
    g.check_site(i)?;
    let x = T::from_i8(g.spins[i]).unwrap();
    let local = T::from_i32(g.neighbor_sum(i)).unwrap();
    let two = T::lit(2.0);
    Ok(two * x * (c.j * local + c.h))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(v: [usize; 4]) -> BTreeSet<usize> {
        v.into_iter().collect()
    }

    #[test]
    fn neighbors_of_corner_and_interior() {
        assert_eq!(set(neighbors(0, 4).unwrap()), BTreeSet::from([1, 3, 4, 12]));
        assert_eq!(set(neighbors(5, 4).unwrap()), BTreeSet::from([4, 6, 1, 9]));
    }

    #[test]
    fn neighbors_match_manhattan_scan() {
        let n = 3;
        for i in 0..n * n {
            let (ri, ci) = ((i / n) as i64, (i % n) as i64);
            let mut expected = BTreeSet::new();
            for j in 0..n * n {
                let (rj, cj) = ((j / n) as i64, (j % n) as i64);
                let dr = (ri - rj).rem_euclid(n as i64).min((rj - ri).rem_euclid(n as i64));
                let dc = (ci - cj).rem_euclid(n as i64).min((cj - ci).rem_euclid(n as i64));
                if dr + dc == 1 {
                    expected.insert(j);
                }
            }
            assert_eq!(set(neighbors(i, n).unwrap()), expected, "site {i}");
            for j in neighbors(i, n).unwrap() {
                assert!(neighbors(j, n).unwrap().contains(&i));
            }
        }
    }

    #[test]
    fn neighbors_reject_bad_input() {
        assert!(neighbors(16, 4).is_err());
        assert!(neighbors(0, 1).is_err());
    }

    #[test]
    fn uniform_and_checkerboard_energies() {
        let c = CouplingParams::<f64>::default();
        assert_eq!(hamiltonian(&SpinGrid::all_up(4), &c), -32.0);
        assert_eq!(hamiltonian(&SpinGrid::checkerboard(4), &c), 32.0);
        assert_eq!(hamiltonian(&SpinGrid::all_up(4), &CouplingParams::new(1.0f32, 0.0).unwrap()), -32.0f32);
    }

    /// Bond-list oracle: enumerate each unordered nearest-neighbor pair once.
    fn bond_list_energy(g: &SpinGrid, j: f64, h: f64) -> f64 {
        let n = g.n();
        let mut e = 0.0;
        for r in 0..n {
            for c in 0..n {
                let i = r * n + c;
                let right = r * n + (c + 1) % n;
                let down = ((r + 1) % n) * n + c;
                e -= j * (g.spin(i) as f64) * (g.spin(right) as f64);
                e -= j * (g.spin(i) as f64) * (g.spin(down) as f64);
                e -= h * g.spin(i) as f64;
            }
        }
        e
    }

    #[test]
    fn random_grid_energy_matches_bond_list() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = SpinGrid::random(3, &mut rng);
        let c = CouplingParams::new(1.3, 0.4).unwrap();
        assert!((hamiltonian(&g, &c) - bond_list_energy(&g, 1.3, 0.4)).abs() < 1e-12);
    }

    #[test]
    fn magnetization_examples() {
        assert_eq!(magnetization(&SpinGrid::all_up(4)), 16);
        let half: Vec<i8> = (0..16).map(|i| if i < 8 { 1 } else { -1 }).collect();
        assert_eq!(magnetization(&SpinGrid::from_spins(4, half).unwrap()), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = SpinGrid::random(5, &mut rng);
        let direct: i64 = g.spins().iter().map(|&s| s as i64).sum();
        assert_eq!(magnetization(&g), direct);
    }

    #[test]
    fn delta_e_examples() {
        let c = CouplingParams::<f64>::default();
        let up = SpinGrid::all_up(4);
        for i in 0..16 {
            assert_eq!(delta_e(&up, i, &c).unwrap(), 8.0);
        }
        let lone = up.flipped(5).unwrap();
        assert_eq!(delta_e(&lone, 5, &c).unwrap(), -8.0);
        assert!(delta_e(&up, 16, &c).is_err());
    }

    #[test]
    fn delta_e_matches_full_recompute_on_all_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = SpinGrid::random(4, &mut rng);
        let c = CouplingParams::<f64>::default();
        for i in 0..16 {
            let direct = hamiltonian(&g.flipped(i).unwrap(), &c) - hamiltonian(&g, &c);
            assert_eq!(delta_e(&g, i, &c).unwrap(), direct);
        }
    }

    #[test]
    fn rejects_invalid_spins() {
        assert!(SpinGrid::from_spins(2, vec![1, 0, 1, 1]).is_err());
        assert!(SpinGrid::from_spins(2, vec![1, 1, 1]).is_err());
        assert!(SpinGrid::from_bytes(2, &[1, 0xff, 2, 1]).is_err());
    }

    #[test]
    fn sign_binarization_ties_to_up() {
        let g = SpinGrid::from_signs(2, &[0.0, -0.0, -1e-300, 3.0]).unwrap();
        assert_eq!(g.spins(), &[1, 1, -1, 1]);
    }

    fn grid_strategy() -> impl Strategy<Value = SpinGrid> {
        (2usize..7).prop_flat_map(|n| {
            proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], n * n)
                .prop_map(move |s| SpinGrid::from_spins(n, s).unwrap())
        })
    }

    proptest! {
        #[test]
        fn delta_e_is_local_energy_difference(g in grid_strategy(), site in any::<prop::sample::Index>(), h in -1.0f64..1.0) {
            let c = CouplingParams::new(0.7, h).unwrap();
            let i = site.index(g.sites());
            let direct = hamiltonian(&g.flipped(i).unwrap(), &c) - hamiltonian(&g, &c);
            let local = delta_e(&g, i, &c).unwrap();
            prop_assert!((direct - local).abs() <= 1e-9 * direct.abs().max(1.0));
        }

        #[test]
        fn energy_symmetries_and_bounds(g in grid_strategy(), dr in 0usize..7, dc in 0usize..7) {
            let c = CouplingParams::<f64>::default();
            let n = g.n();
            let e = hamiltonian(&g, &c);
            let flipped = SpinGrid::from_spins(n, g.spins().iter().map(|&s| -s).collect()).unwrap();
            prop_assert_eq!(hamiltonian(&flipped, &c), e);
            let shifted: Vec<i8> = (0..n * n)
                .map(|i| g.spin(((i / n + dr) % n) * n + (i % n + dc) % n))
                .collect();
            prop_assert_eq!(hamiltonian(&SpinGrid::from_spins(n, shifted).unwrap(), &c), e);
            let bound = 2.0 * (n * n) as f64;
            prop_assert!(e >= -bound && e <= bound);
            let m = magnetization(&g);
            prop_assert!(m.unsigned_abs() as usize <= n * n);
            prop_assert_eq!((m - (n * n) as i64).rem_euclid(2), 0);
        }

        #[test]
        fn byte_encoding_roundtrips(g in grid_strategy()) {
            prop_assert_eq!(SpinGrid::from_bytes(g.n(), &g.to_bytes()).unwrap(), g);
        }
    }
}
