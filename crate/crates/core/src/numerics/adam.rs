use crate::error::{Error, Result};

use super::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Moment estimates for one parameter matrix (plain Adam, no weight decay).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        AdamState {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn for_param(param: &Matrix, config: AdamConfig) -> Self {
        Self::new(param.rows(), param.cols(), config)
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.first_moment.shape() {
            return Err(Error::shape(format!(
                "adam: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.first_moment.shape()
            )));
        }
        if let Some((r, c)) = grad.first_non_finite() {
            return Err(Error::Diverged(format!(
                "non-finite gradient at ({r}, {c})"
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let correct1 = 1.0 - b1.powi(t);
        let correct2 = 1.0 - b2.powi(t);
        let m = self.first_moment.as_mut_slice();
        let v = self.second_moment.as_mut_slice();
        for (((p, &g), m), v) in param
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correct1;
            let v_hat = *v / correct2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_moves_by_learning_rate() {
        let mut p = Matrix::row_vector(&[1.0]);
        let g = Matrix::row_vector(&[1.0]);
        let mut s = AdamState::for_param(&p, AdamConfig::with_lr(0.1));
        s.step(&mut p, &g).unwrap();
        // m̂ = 1, v̂ = 1, so the step is 0.1 / (1 + 1e-8).
        assert!((p[(0, 0)] - 0.9).abs() < 1e-7);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_param_and_decays_moments() {
        let mut p = Matrix::row_vector(&[0.5, -2.0]);
        let mut s = AdamState::for_param(&p, AdamConfig::default());
        s.step(&mut p, &Matrix::row_vector(&[1.0, 1.0])).unwrap();
        let before = p.clone();
        let m_before = s.first_moment.clone();
        s.step(&mut p, &Matrix::zeros(1, 2)).unwrap();
        // moments shrink, but the bias-corrected first moment is still non-zero
        assert!(s.first_moment[(0, 0)].abs() < m_before[(0, 0)].abs());

        let mut fresh = Matrix::row_vector(&[0.5, -2.0]);
        let mut s2 = AdamState::for_param(&fresh, AdamConfig::default());
        s2.step(&mut fresh, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(fresh.as_slice(), &[0.5, -2.0]);
        assert!(before.as_slice() != p.as_slice());
    }

    #[test]
    fn pure_given_identical_state() {
        let g = Matrix::row_vector(&[0.3, -0.7]);
        let s = AdamState::new(1, 2, AdamConfig::default());
        let (mut s1, mut s2) = (s.clone(), s);
        let mut p1 = Matrix::row_vector(&[1.0, 2.0]);
        let mut p2 = p1.clone();
        s1.step(&mut p1, &g).unwrap();
        s2.step(&mut p2, &g).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Matrix::zeros(2, 2);
        let mut s = AdamState::for_param(&p, AdamConfig::default());
        assert!(matches!(
            s.step(&mut p, &Matrix::zeros(1, 2)),
            Err(Error::Shape(_))
        ));
    }
}
