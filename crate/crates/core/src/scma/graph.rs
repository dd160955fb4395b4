use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular bipartite graph between `K` resource nodes and `J` users.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct FactorGraph {
    indicator: Vec<Vec<u8>>,
    zeta: Vec<Vec<usize>>,
    xi: Vec<Vec<usize>>,
}

impl FactorGraph {
    /// Builds the graph from a `K x J` 0/1 indicator matrix. Every column
    /// must have the same weight `d_v` and every row the same weight `d_c`.
    pub fn new(indicator: Vec<Vec<u8>>) -> Result<Self> {
        let k = indicator.len();
        if k == 0 {
            return Err(Error::InvalidGraph("indicator matrix has no rows".into()));
        }
        let j = indicator[0].len();
        if j == 0 {
            return Err(Error::InvalidGraph(
                "indicator matrix has no columns".into(),
            ));
        }
        for (r, row) in indicator.iter().enumerate() {
            if row.len() != j {
                return Err(Error::InvalidGraph(format!(
                    "row {r} has {} entries, expected {j}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|&&v| v > 1) {
                return Err(Error::InvalidGraph(format!(
                    "row {r} contains {v}; entries must be 0 or 1"
                )));
            }
        }
        let zeta: Vec<Vec<usize>> = (0..j)
            .map(|u| (0..k).filter(|&r| indicator[r][u] == 1).collect())
            .collect();
        let xi: Vec<Vec<usize>> = (0..k)
            .map(|r| (0..j).filter(|&u| indicator[r][u] == 1).collect())
            .collect();
        let d_v = zeta[0].len();
        if d_v == 0 {
            return Err(Error::InvalidGraph("user 0 occupies no resource".into()));
        }
        if let Some(u) = zeta.iter().position(|z| z.len() != d_v) {
            return Err(Error::InvalidGraph(format!(
                "column {u} has weight {}, column 0 has {d_v}; every user needs the same number of resources",
                zeta[u].len()
            )));
        }
        let d_c = xi[0].len();
        if let Some(r) = xi.iter().position(|x| x.len() != d_c || x.is_empty()) {
            return Err(Error::InvalidGraph(format!(
                "row {r} has weight {}, row 0 has {d_c}; every resource needs the same number of users",
                xi[r].len()
            )));
        }
        Ok(Self {
            indicator,
            zeta,
            xi,
        })
    }

    /// The 4 x 6 graph with `d_v = 2`, `d_c = 3`.
    pub fn standard_4x6() -> Self {
        Self::new(vec![
            vec![1, 1, 1, 0, 0, 0],
            vec![1, 0, 0, 1, 1, 0],
            vec![0, 1, 0, 1, 0, 1],
            vec![0, 0, 1, 0, 1, 1],
        ])
        .expect("static graph is regular")
    }

    /// Number of resource nodes `K`.
    pub fn resources(&self) -> usize {
        self.indicator.len()
    }

    /// Number of users `J`.
    pub fn users(&self) -> usize {
        self.zeta.len()
    }

    pub fn d_v(&self) -> usize {
        self.zeta[0].len()
    }

    pub fn d_c(&self) -> usize {
        self.xi[0].len()
    }

    /// Overloading factor `J / K`.
    pub fn overloading(&self) -> f64 {
        self.users() as f64 / self.resources() as f64
    }

    pub fn indicator(&self) -> &[Vec<u8>] {
        &self.indicator
    }

    /// Resources used by user `j`.
    pub fn zeta(&self, j: usize) -> &[usize] {
        &self.zeta[j]
    }

    /// Users sharing resource `k`.
    pub fn xi(&self, k: usize) -> &[usize] {
        &self.xi[k]
    }
}

impl TryFrom<Vec<Vec<u8>>> for FactorGraph {
    type Error = Error;
    fn try_from(v: Vec<Vec<u8>>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FactorGraph> for Vec<Vec<u8>> {
    fn from(g: FactorGraph) -> Self {
        g.indicator
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_graph_sets() {
        let g = FactorGraph::standard_4x6();
        assert_eq!((g.resources(), g.users(), g.d_v(), g.d_c()), (4, 6, 2, 3));
        assert_eq!(g.zeta(0), &[0, 1]);
        assert_eq!(g.zeta(5), &[2, 3]);
        assert_eq!(g.xi(2), &[1, 3, 5]);
        assert!((g.overloading() - 1.5).abs() < 1e-15);
        for j in 0..6 {
            for &k in g.zeta(j) {
                assert!(g.xi(k).contains(&j));
            }
        }
    }

    #[test]
    fn rejects_irregular_and_non_binary() {
        assert!(FactorGraph::new(vec![vec![1, 1], vec![1, 0]]).is_err());
        assert!(FactorGraph::new(vec![vec![2, 0], vec![0, 1]]).is_err());
        assert!(FactorGraph::new(vec![vec![1, 0, 1], vec![0, 1]]).is_err());
        assert!(FactorGraph::new(vec![]).is_err());
        assert!(FactorGraph::new(vec![vec![1, 0], vec![0, 1]]).is_ok());
    }
}
