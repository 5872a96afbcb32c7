//! Stratified nilpotent Lie algebras given by structure constants.

use crate::error::{Error, Result};
use crate::poly::Polynomial;
use crate::scalar::{rank, Coeff};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Lie algebra `V_1 ⊕ … ⊕ V_s` with basis `e_1..e_n` and brackets
/// `[e_i, e_j] = Σ_k c^k_{ij} e_k`. Indices are zero-based internally.
#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedAlgebra<C> {
    name: String,
    rank: usize,
    weights: Vec<u32>,
    /// `table[i][j][k] = c^k_{ij}`
    table: Vec<Vec<Vec<C>>>,
}

impl<C: Coeff> StratifiedAlgebra<C> {
    /// Builds the algebra from `(i, j, k, c)` entries meaning `c^k_{ij} = c`
    /// (zero-based). The antisymmetric partner `c^k_{ji} = -c` is filled in;
    /// inconsistent duplicates are rejected. Invariants are checked by
    /// [`validate`](Self::validate), not here.
    pub fn new(
        name: impl Into<String>,
        rank: usize,
        weights: Vec<u32>,
        brackets: impl IntoIterator<Item = (usize, usize, usize, C)>,
    ) -> Result<Self> {
        let n = weights.len();
        let mut table = vec![vec![vec![C::zero(); n]; n]; n];
        let mut set = vec![vec![vec![false; n]; n]; n];
        for (i, j, k, c) in brackets {
            if i >= n || j >= n || k >= n {
                return Err(Error::InvalidAlgebra(format!(
                    "bracket index ({}, {}, {}) out of range for dimension {n}",
                    i + 1,
                    j + 1,
                    k + 1
                )));
            }
            if i == j {
                if !c.is_negligible() {
                    return Err(Error::InvalidAlgebra(format!(
                        "antisymmetry: [e{0}, e{0}] must vanish",
                        i + 1
                    )));
                }
                continue;
            }
            for (a, b, v) in [(i, j, c.clone()), (j, i, -c.clone())] {
                if set[a][b][k] && !(table[a][b][k].clone() - v.clone()).is_negligible() {
                    return Err(Error::InvalidAlgebra(format!(
                        "antisymmetry: conflicting constants for [e{}, e{}] along e{}",
                        a + 1,
                        b + 1,
                        k + 1
                    )));
                }
                set[a][b][k] = true;
                table[a][b][k] = v;
            }
        }
        Ok(Self {
            name: name.into(),
            rank,
            weights,
            table,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    /// Nilpotency step `s` (largest layer index).
    pub fn step(&self) -> u32 {
        self.weights.iter().copied().max().unwrap_or(0)
    }

    pub fn constant(&self, i: usize, j: usize, k: usize) -> &C {
        &self.table[i][j][k]
    }

    /// Nonzero structure constants `(i, j, k, c)` with `i < j`.
    pub fn nonzero_brackets(&self) -> Vec<(usize, usize, usize, C)> {
        let n = self.dim();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                for k in 0..n {
                    if !self.table[i][j][k].is_negligible() {
                        out.push((i, j, k, self.table[i][j][k].clone()));
                    }
                }
            }
        }
        out
    }

    pub fn basis(&self, i: usize) -> Vec<C> {
        let mut e = vec![C::zero(); self.dim()];
        e[i] = C::one();
        e
    }

    pub fn bracket(&self, u: &[C], v: &[C]) -> Vec<C> {
        let n = self.dim();
        let mut out = vec![C::zero(); n];
        for i in 0..n {
            if u[i].is_negligible() {
                continue;
            }
            for j in 0..n {
                if v[j].is_negligible() {
                    continue;
                }
                let uv = u[i].clone() * v[j].clone();
                for (k, o) in out.iter_mut().enumerate() {
                    let c = &self.table[i][j][k];
                    if !c.is_negligible() {
                        *o = o.clone() + c.clone() * uv.clone();
                    }
                }
            }
        }
        out
    }

    /// Bracket of two vectors whose entries are polynomials.
    pub fn bracket_poly(&self, u: &[Polynomial<C>], v: &[Polynomial<C>]) -> Vec<Polynomial<C>> {
        let n = self.dim();
        let nvars = u[0].nvars();
        let mut out = vec![Polynomial::zero(nvars); n];
        for i in 0..n {
            if u[i].is_zero() {
                continue;
            }
            for j in 0..n {
                if v[j].is_zero() || i == j {
                    continue;
                }
                let mut uv: Option<Polynomial<C>> = None;
                for k in 0..n {
                    let c = &self.table[i][j][k];
                    if c.is_negligible() {
                        continue;
                    }
                    let prod = uv.get_or_insert_with(|| u[i].mul(&v[j]));
                    out[k] = out[k].add(&prod.scale(c));
                }
            }
        }
        out
    }

    /// Checks antisymmetry (by construction), Jacobi, grading, first-layer
    /// layout and generation by the first layer.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let m = self.rank;
        if n == 0 {
            return Err(Error::InvalidAlgebra("dimension must be positive".into()));
        }
        if m == 0 || m > n {
            return Err(Error::InvalidAlgebra(format!(
                "rank {m} must lie in 1..={n}"
            )));
        }
        if self.weights.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidAlgebra(
                "weights must be nondecreasing".into(),
            ));
        }
        if self.weights.contains(&0) {
            return Err(Error::InvalidAlgebra("weights must be positive".into()));
        }
        let first_layer = self.weights.iter().filter(|&&w| w == 1).count();
        if first_layer != m {
            return Err(Error::InvalidAlgebra(format!(
                "first layer has {first_layer} basis vectors but rank is {m}"
            )));
        }
        // consecutive layers, none empty
        let s = self.step();
        for layer in 1..=s {
            if !self.weights.contains(&layer) {
                return Err(Error::InvalidAlgebra(format!("layer {layer} is empty")));
            }
        }
        for (i, j, k, _) in self.nonzero_brackets() {
            if self.weights[k] != self.weights[i] + self.weights[j] {
                return Err(Error::InvalidAlgebra(format!(
                    "grading: [e{}, e{}] has a component along e{} (layer {} != {} + {})",
                    i + 1,
                    j + 1,
                    k + 1,
                    self.weights[k],
                    self.weights[i],
                    self.weights[j]
                )));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let (ei, ej, ek) = (self.basis(i), self.basis(j), self.basis(k));
                    let a = self.bracket(&ei, &self.bracket(&ej, &ek));
                    let b = self.bracket(&ej, &self.bracket(&ek, &ei));
                    let c = self.bracket(&ek, &self.bracket(&ei, &ej));
                    let bad = (0..n)
                        .any(|l| !(a[l].clone() + b[l].clone() + c[l].clone()).is_negligible());
                    if bad {
                        return Err(Error::InvalidAlgebra(format!(
                            "Jacobi identity fails on (e{}, e{}, e{})",
                            i + 1,
                            j + 1,
                            k + 1
                        )));
                    }
                }
            }
        }
        // [V_1, V_j] = V_{j+1}
        for layer in 1..s {
            let vj: Vec<usize> = (0..n).filter(|&i| self.weights[i] == layer).collect();
            let next: Vec<usize> = (0..n).filter(|&i| self.weights[i] == layer + 1).collect();
            let rows: Vec<Vec<C>> = (0..m)
                .flat_map(|a| vj.iter().map(move |&b| (a, b)))
                .map(|(a, b)| {
                    let v = self.bracket(&self.basis(a), &self.basis(b));
                    next.iter().map(|&k| v[k].clone()).collect()
                })
                .collect();
            if rank(&rows) < next.len() {
                return Err(Error::InvalidAlgebra(format!(
                    "generation: [V_1, V_{layer}] does not span V_{}",
                    layer + 1
                )));
            }
        }
        Ok(())
    }

    fn first_layer_span(&self) -> Vec<Vec<C>> {
        let m = self.rank;
        let mut rows: Vec<Vec<C>> = (0..m).map(|i| self.basis(i)).collect();
        for i in 0..m {
            for j in i + 1..m {
                rows.push(self.bracket(&self.basis(i), &self.basis(j)));
            }
        }
        rows
    }

    /// `V_1 ⊕ [V_1, V_1] = g`.
    pub fn is_two_step(&self) -> bool {
        rank(&self.first_layer_span()) == self.dim()
    }

    /// Checks `V_1 + [V_1,V_1] + [X,[V_1,V_1]] = g` for the first-layer basis
    /// directions followed by `samples` seeded random integer directions.
    pub fn medium_fat_check(&self, samples: usize, seed: u64) -> MediumFat<C> {
        let m = self.rank;
        let base = self.first_layer_span();
        let brackets: Vec<Vec<C>> = base[m..].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dirs: Vec<Vec<C>> = (0..m).map(|i| self.basis(i)).collect();
        for _ in 0..samples {
            let mut d = vec![C::zero(); self.dim()];
            loop {
                for c in d.iter_mut().take(m) {
                    *c = C::from_ratio(rng.random_range(-9..=9), 1);
                }
                if d.iter().any(|c| !c.is_negligible()) {
                    break;
                }
            }
            dirs.push(d);
        }
        for x in dirs {
            let mut rows = base.clone();
            rows.extend(brackets.iter().map(|b| self.bracket(&x, b)));
            if rank(&rows) < self.dim() {
                return MediumFat::No { witness: x };
            }
        }
        MediumFat::Yes
    }
}

/// Outcome of the medium-fat check; a negative answer carries its witness.
#[derive(Clone, Debug, PartialEq)]
pub enum MediumFat<C> {
    Yes,
    No { witness: Vec<C> },
}

impl<C> MediumFat<C> {
    pub fn holds(&self) -> bool {
        matches!(self, MediumFat::Yes)
    }
}

/// On-disk group specification with 1-based bracket indices `[i, j, k, c]`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub dim: usize,
    pub rank: usize,
    pub weights: Vec<u32>,
    pub brackets: Vec<(usize, usize, usize, f64)>,
}

impl GroupSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("group spec: {e}")))
    }

    /// Converts to an exact algebra; constants are rationalized.
    pub fn to_algebra(&self) -> Result<StratifiedAlgebra<crate::Rational>> {
        if self.weights.len() != self.dim {
            return Err(Error::InvalidAlgebra(format!(
                "{} weights given for dimension {}",
                self.weights.len(),
                self.dim
            )));
        }
        let mut entries = Vec::with_capacity(self.brackets.len());
        for &(i, j, k, c) in &self.brackets {
            if i == 0 || j == 0 || k == 0 {
                return Err(Error::InvalidAlgebra("bracket indices are 1-based".into()));
            }
            let q = crate::Rational::approximate_float(c).ok_or_else(|| {
                Error::InvalidAlgebra(format!("structure constant {c} not representable"))
            })?;
            entries.push((i - 1, j - 1, k - 1, q));
        }
        StratifiedAlgebra::new(self.name.clone(), self.rank, self.weights.clone(), entries)
    }

    pub fn from_algebra<C: Coeff>(alg: &StratifiedAlgebra<C>) -> Self {
        Self {
            name: alg.name().to_string(),
            dim: alg.dim(),
            rank: alg.rank(),
            weights: alg.weights().to_vec(),
            brackets: alg
                .nonzero_brackets()
                .into_iter()
                .map(|(i, j, k, c)| (i + 1, j + 1, k + 1, c.to_real::<f64>()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rational;

    fn one() -> Rational {
        Rational::from_integer(1)
    }

    fn engel() -> StratifiedAlgebra<Rational> {
        StratifiedAlgebra::new(
            "engel",
            2,
            vec![1, 1, 2, 3],
            [(0, 1, 2, one()), (0, 2, 3, one())],
        )
        .unwrap()
    }

    #[test]
    fn engel_is_valid_but_not_two_step() {
        let e = engel();
        e.validate().unwrap();
        assert!(!e.is_two_step());
        assert_eq!(e.step(), 3);
        match e.medium_fat_check(8, 1) {
            MediumFat::No { witness } => assert_eq!(witness, e.basis(1)),
            MediumFat::Yes => panic!("engel is not medium-fat"),
        }
    }

    #[test]
    fn conflicting_antisymmetric_entries_rejected() {
        let res = StratifiedAlgebra::new(
            "conflict",
            3,
            vec![1, 1, 1],
            [(0, 1, 2, one()), (1, 0, 2, one())],
        );
        assert!(res.is_err());
    }

    #[test]
    fn jacobi_failure_reports_triple() {
        // [e1,e2]=e3, [e1,e3]=e4, [e2,e3]=e5, [e1,e5]=e6, [e2,e4]=2e6:
        // Jacobi(e1,e2,e3) = [e1,e5] - [e2,e4] = -e6.
        let two = Rational::from_integer(2);
        let alg = StratifiedAlgebra::new(
            "nj4",
            2,
            vec![1, 1, 2, 3, 3, 4],
            [
                (0, 1, 2, one()),
                (0, 2, 3, one()),
                (1, 2, 4, one()),
                (0, 4, 5, one()),
                (1, 3, 5, two),
            ],
        )
        .unwrap();
        let err = alg.validate().unwrap_err();
        assert!(err.to_string().contains("Jacobi"), "{err}");
        assert!(err.to_string().contains("(e1, e2, e3)"), "{err}");
    }

    #[test]
    fn grading_and_generation_failures() {
        let g = StratifiedAlgebra::new("g", 2, vec![1, 1, 2], [(0, 1, 0, one())]).unwrap();
        assert!(g.validate().unwrap_err().to_string().contains("grading"));
        let gen = StratifiedAlgebra::<Rational>::new("g", 2, vec![1, 1, 2], Vec::new()).unwrap();
        assert!(gen
            .validate()
            .unwrap_err()
            .to_string()
            .contains("generation"));
    }

    #[test]
    fn spec_roundtrip_json() {
        let text = r#"{"name":"heis","dim":3,"rank":2,"weights":[1,1,2],"brackets":[[1,2,3,1.0]]}"#;
        let spec = GroupSpec::from_json(text).unwrap();
        let alg = spec.to_algebra().unwrap();
        alg.validate().unwrap();
        assert!(alg.is_two_step());
        assert_eq!(GroupSpec::from_algebra(&alg), spec);
    }
}
