/// Heavy-ball momentum: `v = m*v + g; x -= lr*v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(lr: f64, momentum: f64, len: usize) -> Self {
        Momentum {
            lr,
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grad.len(), self.velocity.len());
        for ((x, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *x -= self.lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_by_hand() {
        let mut opt = Momentum::new(0.1, 0.9, 1);
        let mut x = [1.0];
        opt.step(&mut x, &[2.0]);
        assert!((x[0] - 0.8).abs() < 1e-15);
        opt.step(&mut x, &[2.0]);
        // v = 0.9*2 + 2 = 3.8
        assert!((x[0] - 0.42).abs() < 1e-15);
    }
}
