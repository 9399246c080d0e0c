use nalgebra::DMatrix;
use num_complex::Complex64;

use super::GridCase;

/// Dense bus admittance matrix, rows/columns in `GridCase::buses` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    y: DMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.y[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.y
    }

    /// Largest |Y_ij - Y_ji|.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.y[(i, j)] - self.y[(j, i)]).norm());
            }
        }
        worst
    }
}

pub fn build_ybus(case: &GridCase) -> AdmittanceMatrix {
    let n = case.buses.len();
    let index = case.index_map();
    let mut y = DMatrix::<Complex64>::zeros(n, n);

    for br in case.branches.iter().filter(|b| b.status) {
        let f = index[&br.from];
        let t = index[&br.to];
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let ratio = if br.tap_ratio == 0.0 { 1.0 } else { br.tap_ratio };
        let tap = Complex64::from_polar(ratio, br.phase_shift);
        let ytt = ys + Complex64::new(0.0, br.b_charging / 2.0);
        let yff = ytt / (tap * tap.conj());
        let yft = -ys / tap.conj();
        let ytf = -ys / tap;

        y[(f, f)] += yff;
        y[(f, t)] += yft;
        y[(t, f)] += ytf;
        y[(t, t)] += ytt;
    }

    for (i, bus) in case.buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(bus.shunt_g, bus.shunt_b);
    }

    AdmittanceMatrix { y }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::two_bus;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn single_lossless_line() {
        let y = build_ybus(&two_bus(0.1, 0.0));
        let expect = [[c(0.0, -10.0), c(0.0, 10.0)], [c(0.0, 10.0), c(0.0, -10.0)]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((y.get(i, j) - expect[i][j]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn line_charging_splits_between_ends() {
        let base = build_ybus(&two_bus(0.1, 0.0));
        let charged = build_ybus(&two_bus(0.1, 0.2));
        for i in 0..2 {
            assert!((charged.get(i, i) - base.get(i, i) - c(0.0, 0.1)).norm() < 1e-12);
        }
        assert_eq!(charged.get(0, 1), base.get(0, 1));
    }

    #[test]
    fn out_of_service_line_contributes_nothing() {
        let mut case = two_bus(0.1, 0.2);
        case.branches[0].status = false;
        let y = build_ybus(&case);
        assert!(y.matrix().iter().all(|v| *v == c(0.0, 0.0)));
    }

    #[test]
    fn tap_breaks_symmetry() {
        let mut case = two_bus(0.1, 0.0);
        case.branches[0].phase_shift = 0.1;
        assert!(build_ybus(&case).asymmetry() > 1e-3);
    }
}
