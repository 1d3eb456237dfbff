//! Test objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// `½ Σ_j c_j (θ_j − θ*_j)²`.
    Quadratic {
        curvatures: Vec<f64>,
        theta_star: Vec<f64>,
    },
    /// `(1/n) Σ log(1 + exp(−y_i x_i·θ)) + (λ/2)‖θ‖²` with labels `±1`.
    LogisticRegression {
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        lambda: f64,
    },
    /// Chained `Σ_j b (θ_{j+1} − θ_j²)² + (a − θ_j)²`. Non-convex; for
    /// `a = 1` the minimum 0 sits at the all-ones point.
    Rosenbrock { dim: usize, a: f64, b: f64 },
}

impl ObjectiveSpec {
    /// `½ Σ (θ_j − θ*_j)²` in `dim` dimensions.
    pub fn isotropic(dim: usize, theta_star: Vec<f64>) -> Result<Self> {
        let spec = ObjectiveSpec::Quadratic {
            curvatures: vec![1.0; dim],
            theta_star,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ObjectiveSpec::Quadratic {
                curvatures,
                theta_star,
            } => {
                if curvatures.is_empty() || curvatures.len() != theta_star.len() {
                    return Err(invalid("quadratic needs one curvature per coordinate"));
                }
                if curvatures.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                    return Err(invalid("curvatures must be finite and non-negative"));
                }
                if theta_star.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("quadratic minimiser".into()));
                }
            }
            ObjectiveSpec::LogisticRegression {
                features,
                labels,
                lambda,
            } => {
                if features.is_empty() || features.len() != labels.len() {
                    return Err(invalid("logistic regression needs one label per sample"));
                }
                let dim = features[0].len();
                if dim == 0 || features.iter().any(|x| x.len() != dim) {
                    return Err(invalid("feature rows must share a positive dimension"));
                }
                if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
                    return Err(invalid("labels must be +1 or -1"));
                }
                if !(lambda.is_finite() && *lambda >= 0.0) {
                    return Err(invalid("regularisation must be non-negative"));
                }
            }
            ObjectiveSpec::Rosenbrock { dim, a, b } => {
                if *dim < 2 {
                    return Err(invalid("rosenbrock needs dimension >= 2"));
                }
                if !(a.is_finite() && b.is_finite() && *b > 0.0) {
                    return Err(invalid("rosenbrock needs finite a and b > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ObjectiveSpec::Quadratic { theta_star, .. } => theta_star.len(),
            ObjectiveSpec::LogisticRegression { features, .. } => features[0].len(),
            ObjectiveSpec::Rosenbrock { dim, .. } => *dim,
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        match self {
            ObjectiveSpec::Quadratic {
                curvatures,
                theta_star,
            } => {
                0.5 * curvatures
                    .iter()
                    .zip(theta.iter().zip(theta_star))
                    .map(|(c, (t, s))| c * (t - s) * (t - s))
                    .sum::<f64>()
            }
            ObjectiveSpec::LogisticRegression {
                features,
                labels,
                lambda,
            } => {
                let n = features.len() as f64;
                let loss: f64 = features
                    .iter()
                    .zip(labels)
                    .map(|(x, y)| softplus(-y * dot(x, theta)))
                    .sum();
                loss / n + 0.5 * lambda * dot(theta, theta)
            }
            ObjectiveSpec::Rosenbrock { a, b, .. } => theta
                .windows(2)
                .map(|w| b * (w[1] - w[0] * w[0]).powi(2) + (a - w[0]).powi(2))
                .sum(),
        }
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            ObjectiveSpec::Quadratic {
                curvatures,
                theta_star,
            } => curvatures
                .iter()
                .zip(theta.iter().zip(theta_star))
                .map(|(c, (t, s))| c * (t - s))
                .collect(),
            ObjectiveSpec::LogisticRegression {
                features,
                labels,
                lambda,
            } => {
                let n = features.len() as f64;
                let mut g: Vec<f64> = theta.iter().map(|t| lambda * t).collect();
                for (x, y) in features.iter().zip(labels) {
                    // d/dz log(1+e^{-yz}) = -y σ(-yz)
                    let coef = -y * sigmoid(-y * dot(x, theta)) / n;
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += coef * xj;
                    }
                }
                g
            }
            ObjectiveSpec::Rosenbrock { a, b, .. } => {
                let mut g = vec![0.0; theta.len()];
                for j in 0..theta.len() - 1 {
                    let r = theta[j + 1] - theta[j] * theta[j];
                    g[j] += -4.0 * b * theta[j] * r - 2.0 * (a - theta[j]);
                    g[j + 1] += 2.0 * b * r;
                }
                g
            }
        }
    }

    /// Global smoothness constant where one exists.
    pub fn smoothness(&self) -> Option<f64> {
        match self {
            ObjectiveSpec::Quadratic { curvatures, .. } => {
                Some(curvatures.iter().copied().fold(0.0, f64::max))
            }
            ObjectiveSpec::LogisticRegression {
                features, lambda, ..
            } => {
                // λ_max(XᵀX)/(4n) ≤ Σ‖x‖²/(4n)
                let n = features.len() as f64;
                let frob: f64 = features.iter().map(|x| dot(x, x)).sum();
                Some(frob / (4.0 * n) + lambda)
            }
            ObjectiveSpec::Rosenbrock { .. } => None,
        }
    }

    pub fn strong_convexity(&self) -> f64 {
        match self {
            ObjectiveSpec::Quadratic { curvatures, .. } => {
                curvatures.iter().copied().fold(f64::INFINITY, f64::min)
            }
            ObjectiveSpec::LogisticRegression { lambda, .. } => *lambda,
            ObjectiveSpec::Rosenbrock { .. } => 0.0,
        }
    }

    /// A minimiser, computed by gradient descent for logistic regression.
    pub fn minimizer(&self) -> Option<Vec<f64>> {
        match self {
            ObjectiveSpec::Quadratic { theta_star, .. } => Some(theta_star.clone()),
            ObjectiveSpec::Rosenbrock { dim, a, .. } => {
                // stationary chain θ_j = a, θ_{j+1} = θ_j² holds for a ∈ {0, 1}
                (*a == 1.0 || *a == 0.0).then(|| vec![*a; *dim])
            }
            ObjectiveSpec::LogisticRegression { lambda, .. } => {
                if *lambda <= 0.0 {
                    return None;
                }
                let l = self.smoothness()?;
                let mut theta = vec![0.0; self.dim()];
                for _ in 0..100_000 {
                    let g = self.gradient(&theta);
                    if dot(&g, &g).sqrt() < 1e-13 {
                        break;
                    }
                    for (t, gj) in theta.iter_mut().zip(&g) {
                        *t -= gj / l;
                    }
                }
                Some(theta)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
