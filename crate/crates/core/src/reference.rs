//! Small desk-scale models used by the examples, the CLI configs and the
//! test suites.

use crate::model::{AssetModel, FactorModel, JumpAtom, JumpMeasure, MarketModel, RiskParams};

/// One mean-reverting factor driving two risky assets and the money market,
/// with two-sided asset jumps and two factor jump atoms.
pub fn reference_model() -> MarketModel {
    MarketModel {
        factors: FactorModel {
            b: vec![0.05],
            big_b: vec![vec![-1.0]],
            lambda: vec![vec![0.2, 0.0, 0.0]],
        },
        assets: AssetModel {
            a0: 0.03,
            big_a0: vec![0.1],
            a: vec![0.08, 0.06],
            big_a: vec![vec![0.5], vec![-0.2]],
            sigma: vec![vec![0.1, 0.15, 0.0], vec![-0.05, 0.0, 0.2]],
        },
        jumps: JumpMeasure {
            atoms: vec![
                JumpAtom { intensity: 0.5, xi: vec![0.0], gamma: vec![-0.15, 0.05] },
                JumpAtom { intensity: 0.5, xi: vec![0.0], gamma: vec![0.1, -0.2] },
                JumpAtom { intensity: 0.4, xi: vec![0.1], gamma: vec![0.0, 0.0] },
                JumpAtom { intensity: 0.4, xi: vec![-0.1], gamma: vec![0.0, 0.0] },
            ],
        },
        risk: RiskParams {
            theta: 1.0,
            horizon_t: 1.0,
            initial_wealth_v: 1.0,
        },
    }
}

/// Asset growth rates and the money-market rate ignore the factor
/// (`A0 = 0`, `Â = 0`), so the value function is flat in `x` and known in
/// closed form. Assets still jump.
pub fn state_independent_model() -> MarketModel {
    MarketModel {
        factors: FactorModel {
            b: vec![0.05],
            big_b: vec![vec![-1.0]],
            lambda: vec![vec![0.2, 0.0, 0.0]],
        },
        assets: AssetModel {
            a0: 0.03,
            big_a0: vec![0.0],
            a: vec![0.08, 0.06],
            big_a: vec![vec![0.0], vec![0.0]],
            sigma: vec![vec![0.1, 0.15, 0.0], vec![-0.05, 0.0, 0.2]],
        },
        jumps: JumpMeasure {
            atoms: vec![
                JumpAtom { intensity: 0.5, xi: vec![0.0], gamma: vec![-0.15, 0.05] },
                JumpAtom { intensity: 0.5, xi: vec![0.0], gamma: vec![0.1, -0.2] },
            ],
        },
        risk: RiskParams {
            theta: 1.0,
            horizon_t: 1.0,
            initial_wealth_v: 1.0,
        },
    }
}

/// No jumps and factor-free growth: under a constant control `ln V(T)` is
/// Gaussian with mean `ln v + (a0 + h'â - h'ΣΣ'h/2) T` and variance
/// `h'ΣΣ'h T`.
pub fn gaussian_wealth_model() -> MarketModel {
    MarketModel {
        factors: FactorModel {
            b: vec![0.0],
            big_b: vec![vec![-1.0]],
            lambda: vec![vec![0.1, 0.0]],
        },
        assets: AssetModel {
            a0: 0.02,
            big_a0: vec![0.0],
            a: vec![0.08],
            big_a: vec![vec![0.0]],
            sigma: vec![vec![0.0, 0.2]],
        },
        jumps: JumpMeasure::default(),
        risk: RiskParams {
            theta: 0.1,
            horizon_t: 1.0,
            initial_wealth_v: 1.0,
        },
    }
}

/// Two correlated factors with a non-symmetric drift matrix, three assets.
pub fn two_factor_model() -> MarketModel {
    MarketModel {
        factors: FactorModel {
            b: vec![0.03, 0.01],
            big_b: vec![vec![-0.8, 0.3], vec![-0.1, -1.5]],
            lambda: vec![vec![0.15, 0.05, 0.0, 0.0, 0.0], vec![0.02, 0.1, 0.0, 0.0, 0.0]],
        },
        assets: AssetModel {
            a0: 0.02,
            big_a0: vec![0.1, 0.05],
            a: vec![0.07, 0.05, 0.06],
            big_a: vec![vec![0.4, 0.1], vec![-0.2, 0.3], vec![0.1, -0.1]],
            sigma: vec![
                vec![0.05, 0.0, 0.15, 0.0, 0.0],
                vec![0.0, 0.05, 0.0, 0.12, 0.0],
                vec![0.02, 0.02, 0.0, 0.0, 0.18],
            ],
        },
        jumps: JumpMeasure {
            atoms: vec![
                JumpAtom { intensity: 0.3, xi: vec![0.0, 0.0], gamma: vec![-0.1, 0.05, 0.02] },
                JumpAtom { intensity: 0.3, xi: vec![0.0, 0.0], gamma: vec![0.08, -0.1, -0.05] },
                JumpAtom { intensity: 0.2, xi: vec![0.05, -0.03], gamma: vec![0.0, 0.0, 0.0] },
            ],
        },
        risk: RiskParams {
            theta: 2.0,
            horizon_t: 2.0,
            initial_wealth_v: 1.0,
        },
    }
}
