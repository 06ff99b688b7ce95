//! LTI plants `x' = A x + B u + w`, benchmark generators and the PBH test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{complex_rank, eigenvalues, min_sym_eig, psd_sqrt, to_complex, CMat, RMat};

#[derive(Clone, Debug)]
pub struct Plant {
    pub a: RMat,
    pub b: RMat,
    pub state_subsystems: Vec<usize>,
    pub input_subsystems: Vec<usize>,
}

impl Plant {
    pub fn new(a: RMat, b: RMat, state_subsystems: Vec<usize>, input_subsystems: Vec<usize>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::InvalidDimension(format!("A must be square and nonempty, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::InvalidDimension(format!("B must be {}xm with m >= 1, got {}x{}", n, b.nrows(), b.ncols())));
        }
        if state_subsystems.len() != n || input_subsystems.len() != b.ncols() {
            return Err(Error::InvalidDimension("subsystem maps must cover every state and input".into()));
        }
        Ok(Plant { a, b, state_subsystems, input_subsystems })
    }

    /// One subsystem per state, inputs assigned to the subsystem of their first actuated state.
    pub fn from_matrices(a: RMat, b: RMat) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let inputs = (0..m)
            .map(|j| (0..b.nrows()).find(|&i| b[(i, j)] != 0.0).unwrap_or(0))
            .collect();
        Plant::new(a, b, (0..n).collect(), inputs)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct CostWeights {
    pub q: RMat,
    pub r: RMat,
}

impl CostWeights {
    pub fn new(q: RMat, r: RMat) -> Result<Self> {
        if q.nrows() != q.ncols() || r.nrows() != r.ncols() {
            return Err(Error::InvalidDimension("Q and R must be square".into()));
        }
        if (&q - q.transpose()).amax() > 1e-12 * (1.0 + q.amax()) || (&r - r.transpose()).amax() > 1e-12 * (1.0 + r.amax()) {
            return Err(Error::InvalidArgument("Q and R must be symmetric".into()));
        }
        psd_sqrt(&q)?;
        let rmin = min_sym_eig(&r);
        if !(rmin > 0.0) {
            return Err(Error::InvalidArgument(format!("R must be positive definite (min eigenvalue {rmin:.3e})")));
        }
        Ok(CostWeights { q, r })
    }

    pub fn identity(n: usize, m: usize, q: f64, r: f64) -> Self {
        CostWeights { q: RMat::identity(n, n) * q, r: RMat::identity(m, m) * r }
    }

    pub fn check(&self, plant: &Plant) -> Result<()> {
        if self.q.nrows() != plant.n() || self.r.nrows() != plant.m() {
            return Err(Error::InvalidDimension(format!(
                "weights are {}/{} but plant has n={} m={}",
                self.q.nrows(),
                self.r.nrows(),
                plant.n(),
                plant.m()
            )));
        }
        Ok(())
    }

    /// `blkdiag(Q^{1/2}, R^{1/2})`.
    pub fn sqrt_block(&self) -> Result<RMat> {
        let n = self.q.nrows();
        let m = self.r.nrows();
        let mut w = RMat::zeros(n + m, n + m);
        w.view_mut((0, 0), (n, n)).copy_from(&psd_sqrt(&self.q)?);
        w.view_mut((n, n), (m, m)).copy_from(&psd_sqrt(&self.r)?);
        Ok(w)
    }
}

pub fn make_chain(n: usize, a_diag: f64, a_off: f64, b_diag: f64) -> Result<Plant> {
    if n < 2 {
        return Err(Error::InvalidDimension(format!("chain needs n >= 2, got {n}")));
    }
    let a = RMat::from_fn(n, n, |i, j| {
        if i == j {
            a_diag
        } else if i.abs_diff(j) == 1 {
            a_off
        } else {
            0.0
        }
    });
    let b = RMat::identity(n, n) * b_diag;
    Plant::new(a, b, (0..n).collect(), (0..n).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridParams {
    pub rows: usize,
    pub cols: usize,
    /// inertia per bus
    pub inertia: Vec<f64>,
    /// damping per bus
    pub damping: Vec<f64>,
    /// coupling per edge, in the order returned by `lattice_edges`
    pub coupling: Vec<f64>,
    pub seed: Option<u64>,
}

impl GridParams {
    pub fn uniform(rows: usize, cols: usize, m: f64, d: f64, k: f64) -> Self {
        let buses = rows * cols;
        let edges = lattice_edges(rows, cols).len();
        GridParams {
            rows,
            cols,
            inertia: vec![m; buses],
            damping: vec![d; buses],
            coupling: vec![k; edges],
            seed: None,
        }
    }

    /// Unit inertia with damping and coupling drawn uniformly from [0.5, 1.5].
    pub fn randomized(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buses = rows * cols;
        let edges = lattice_edges(rows, cols).len();
        GridParams {
            rows,
            cols,
            inertia: vec![1.0; buses],
            damping: (0..buses).map(|_| rng.gen_range(0.5..1.5)).collect(),
            coupling: (0..edges).map(|_| rng.gen_range(0.5..1.5)).collect(),
            seed: Some(seed),
        }
    }
}

/// Horizontal then vertical neighbour pairs of a rows x cols lattice (row-major bus index).
pub fn lattice_edges(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            e.push((r * cols + c, r * cols + c + 1));
        }
    }
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols {
            e.push((r * cols + c, (r + 1) * cols + c));
        }
    }
    e
}

/// Swing-equation grid with bus state `[theta_i, theta_dot_i]` and one input per bus.
pub fn make_grid(p: &GridParams) -> Result<Plant> {
    let buses = p.rows * p.cols;
    if buses == 0 {
        return Err(Error::InvalidDimension("grid needs rows*cols >= 1".into()));
    }
    let edges = lattice_edges(p.rows, p.cols);
    if p.inertia.len() != buses || p.damping.len() != buses || p.coupling.len() != edges.len() {
        return Err(Error::InvalidDimension("grid parameter vectors have wrong length".into()));
    }
    if p.inertia.iter().chain(&p.damping).chain(&p.coupling).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("grid parameters must be strictly positive".into()));
    }
    let n = 2 * buses;
    let mut a = RMat::zeros(n, n);
    let mut b = RMat::zeros(n, buses);
    for i in 0..buses {
        a[(2 * i, 2 * i + 1)] = 1.0;
        a[(2 * i + 1, 2 * i + 1)] = -p.damping[i] / p.inertia[i];
        b[(2 * i + 1, i)] = 1.0;
    }
    for (e, &(i, j)) in edges.iter().enumerate() {
        let k = p.coupling[e];
        a[(2 * i + 1, 2 * i)] -= k / p.inertia[i];
        a[(2 * j + 1, 2 * j)] -= k / p.inertia[j];
        a[(2 * i + 1, 2 * j)] += k / p.inertia[i];
        a[(2 * j + 1, 2 * i)] += k / p.inertia[j];
    }
    let states = (0..n).map(|s| s / 2).collect();
    Plant::new(a, b, states, (0..buses).collect())
}

pub const PBH_RTOL: f64 = 1e-8;

/// PBH test over eigenvalues with nonnegative real part.
pub fn is_stabilizable(plant: &Plant) -> bool {
    let n = plant.n();
    let eig = eigenvalues(&plant.a);
    let bc = to_complex(&plant.b);
    let ac = to_complex(&plant.a);
    for lam in eig.iter() {
        if lam.re < -1e-12 {
            continue;
        }
        let mut m = CMat::zeros(n, n + plant.m());
        let shifted = CMat::identity(n, n) * *lam - &ac;
        m.view_mut((0, 0), (n, n)).copy_from(&shifted);
        m.view_mut((0, n), (n, plant.m())).copy_from(&bc);
        if complex_rank(&m, PBH_RTOL) < n {
            return false;
        }
    }
    true
}

#[derive(Serialize, Deserialize)]
struct PlantDoc {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    state_subsystems: Vec<usize>,
    input_subsystems: Vec<usize>,
}

pub(crate) fn rows_of(m: &RMat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>], ncols_if_empty: usize) -> Result<RMat> {
    let r = rows.len();
    let c = rows.first().map_or(ncols_if_empty, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::InvalidDimension("ragged matrix rows".into()));
    }
    Ok(RMat::from_fn(r, c, |i, j| rows[i][j]))
}

impl Plant {
    pub fn to_json(&self) -> String {
        let doc = PlantDoc {
            a: rows_of(&self.a),
            b: rows_of(&self.b),
            state_subsystems: self.state_subsystems.clone(),
            input_subsystems: self.input_subsystems.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("plant serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PlantDoc = serde_json::from_str(s)?;
        let a = from_rows(&doc.a, 0)?;
        let b = from_rows(&doc.b, 0)?;
        Plant::new(a, b, doc.state_subsystems, doc.input_subsystems)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_abscissa;

    #[test]
    fn chain_entries() {
        let p = make_chain(11, 0.6, 0.4, 1.0).unwrap();
        assert_eq!(p.a[(3, 3)], 0.6);
        assert_eq!(p.a[(3, 2)], 0.4);
        assert_eq!(p.a[(2, 3)], 0.4);
        assert_eq!(p.a[(0, 2)], 0.0);
        assert_eq!(p.b, RMat::identity(11, 11));
    }

    #[test]
    fn chain_rejects_short() {
        assert!(matches!(make_chain(1, 0.6, 0.4, 1.0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn zero_chain() {
        let p = make_chain(2, 0.0, 0.0, 1.0).unwrap();
        assert_eq!(p.a, RMat::zeros(2, 2));
        assert_eq!(p.b, RMat::identity(2, 2));
    }

    #[test]
    fn chain3_abscissa() {
        let p = make_chain(3, 0.6, 0.4, 1.0).unwrap();
        let expect = 0.6 + 0.8 * (std::f64::consts::PI / 4.0).cos();
        assert!((spectral_abscissa(&p.a) - expect).abs() < 1e-10);
        assert!((expect - 1.166).abs() < 1e-3);
    }

    #[test]
    fn grid_3x3_blocks() {
        let p = make_grid(&GridParams::uniform(3, 3, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!((p.n(), p.m()), (18, 9));
        // center bus 4 has four neighbours
        assert_eq!(p.a[(8, 8)], 0.0);
        assert_eq!(p.a[(8, 9)], 1.0);
        assert_eq!(p.a[(9, 8)], -4.0);
        assert_eq!(p.a[(9, 9)], -1.0);
        // corner bus 0 has two
        assert_eq!(p.a[(1, 0)], -2.0);
        // coupling block to neighbour 1
        assert_eq!(p.a[(1, 2)], 1.0);
        assert_eq!(p.a[(0, 2)], 0.0);
        assert_eq!(p.b[(9, 4)], 1.0);
        assert!(spectral_abscissa(&p.a).abs() < 1e-9);
    }

    #[test]
    fn grid_single_bus() {
        let p = make_grid(&GridParams::uniform(1, 1, 2.0, 3.0, 1.0)).unwrap();
        assert_eq!(p.a, RMat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.5]));
    }

    #[test]
    fn grid_rejects_nonpositive() {
        let mut g = GridParams::uniform(2, 2, 1.0, 1.0, 1.0);
        g.damping[1] = 0.0;
        assert!(make_grid(&g).is_err());
    }

    #[test]
    fn randomized_grid_in_range() {
        let g = GridParams::randomized(3, 3, 11);
        assert!(g.damping.iter().chain(&g.coupling).all(|&v| (0.5..1.5).contains(&v)));
        let g2 = GridParams::randomized(3, 3, 11);
        assert_eq!(g.coupling, g2.coupling);
    }

    #[test]
    fn pbh_examples() {
        let p = Plant::from_matrices(RMat::from_element(1, 1, 1.0), RMat::zeros(1, 1)).unwrap();
        assert!(!is_stabilizable(&p));
        let p = Plant::from_matrices(RMat::from_element(1, 1, -1.0), RMat::zeros(1, 1)).unwrap();
        assert!(is_stabilizable(&p));
        let chain = make_chain(11, 0.6, 0.4, 1.0).unwrap();
        assert!(is_stabilizable(&chain));
        assert!(spectral_abscissa(&chain.a) > 0.0);
    }

    #[test]
    fn json_roundtrip() {
        let p = make_grid(&GridParams::uniform(2, 2, 1.0, 1.0, 1.0)).unwrap();
        let q = Plant::from_json(&p.to_json()).unwrap();
        assert_eq!(p.a, q.a);
        assert_eq!(p.b, q.b);
        assert_eq!(p.state_subsystems, q.state_subsystems);
    }
}
