use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Float;
use crate::error::{Error, Result};

/// Initialization scheme for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform(f64, f64),
    Normal { mean: f64, std: f64 },
    /// Normal with std = sqrt(2 / (fan_in + fan_out)).
    Xavier,
}

/// Dense row-major float array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<Float>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Float>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Float>) -> Result<Self> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: Float) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn create<R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        let data: Vec<Float> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Constant(c) => vec![c as Float; numel],
            Init::Uniform(a, b) => {
                if !(a < b) {
                    return Err(Error::config(format!("uniform init needs a < b, got ({a}, {b})")));
                }
                let dist = Uniform::new(a, b).map_err(|e| Error::config(e.to_string()))?;
                (0..numel).map(|_| dist.sample(rng) as Float).collect()
            }
            Init::Normal { mean, std } => normal_samples(numel, mean, std, rng)?,
            Init::Xavier => {
                let (fan_in, fan_out) = fans(shape);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                normal_samples(numel, 0.0, std, rng)?
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor needs at least one dimension"));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::shape(format!("dimension {d} in {shape:?} is not positive")));
    }
    Ok(())
}

/// Fan-in / fan-out used by Xavier init. The last axis is fan-out; the
/// product of the rest is fan-in (matches `x · W` with `W: [in, out]`).
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        _ => {
            let out = *shape.last().unwrap();
            (shape.iter().product::<usize>() / out, out)
        }
    }
}

fn normal_samples<R: Rng + ?Sized>(n: usize, mean: f64, std: f64, rng: &mut R) -> Result<Vec<Float>> {
    let dist = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng) as Float).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::rng::stream;

    #[test]
    fn zeros_and_constant() {
        let mut rng = stream(0, "test");
        let z = Tensor::create(&[2, 2], Init::Zeros, &mut rng).unwrap();
        assert_eq!(z.data, vec![0.0; 4]);
        let c = Tensor::create(&[3], Init::Constant(1.5), &mut rng).unwrap();
        assert_eq!(c.data, vec![1.5; 3]);
    }

    #[test]
    fn rejects_zero_dim() {
        let mut rng = stream(0, "test");
        assert!(matches!(
            Tensor::create(&[2, 0], Init::Zeros, &mut rng),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn xavier_std_matches_fans() {
        // [4,4] -> std sqrt(2/8) = 0.5; 625 tensors give 10^4 draws.
        let mut rng = stream(7, "xavier");
        let mut draws = Vec::new();
        for _ in 0..625 {
            let t = Tensor::create(&[4, 4], Init::Xavier, &mut rng).unwrap();
            draws.extend(t.data.iter().map(|&v| v as f64));
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        // Standard error of the sample std is about sigma / sqrt(2n).
        let se = 0.5 / (2.0 * n).sqrt();
        assert!((std - 0.5).abs() < 3.0 * se, "std {std}");
    }
}
